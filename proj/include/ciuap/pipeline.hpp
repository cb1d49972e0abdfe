#pragma once

#include "ciuap/evaluation.hpp"
#include "ciuap/io.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace ciuap::pipeline {

enum class ValueKind { integer, real, boolean, text, list };

struct ConfigKey {
    std::string name;
    ValueKind kind;
    std::string default_value;
    std::string help;
};

const std::vector<ConfigKey>& config_keys();

// Flat dotted keys, one "key = value" per line, '#' starts a comment. Every
// key has a default; the resolved form lists all of them in table order.
class RunConfig {
public:
    RunConfig();

    // Throws ConfigError naming the origin and line on malformed input.
    static RunConfig parse(const std::string& text, const std::string& origin = "<config>");
    static RunConfig load(const std::filesystem::path& path);

    void set(const std::string& key, const std::string& value);
    // "key=value" as given on the command line.
    void apply_override(const std::string& assignment);

    const std::string& get(const std::string& key) const;
    long long get_int(const std::string& key) const;
    double get_real(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::vector<std::string> get_list(const std::string& key) const;

    std::string resolved_text() const;
    std::string hash() const;

    std::uint64_t root_seed() const;
    std::uint64_t stage_seed(const std::string& stage) const;
    std::filesystem::path registry() const; // CIUAP_REGISTRY overrides registry
    std::filesystem::path output_dir() const;

    ImpressionConfig impression_config() const;
    TrainConfig train_config(const std::string& stage = "train-generator") const;
    ClassifierTrainOptions classifier_options() const;
    std::vector<int> impression_classes(int num_classes) const;

private:
    std::map<std::string, std::string> values_;
};

struct RunResult {
    std::filesystem::path run_dir;
    io::Json summary;
};

const std::vector<std::string>& subcommands();

// Creates <output_dir>/<timestamp>-<confighash>/ holding config.resolved,
// the stage artifacts and summary.json. Errors propagate as ciuap::Error.
RunResult run(const std::string& subcommand, const RunConfig& cfg);

// Checksum over everything in a summary except timestamps and timings.
std::string summary_checksum(const io::Json& summary);

// Throws DependencyError if any listed artifact is missing or altered.
void verify_summary(const std::filesystem::path& run_dir);

} // namespace ciuap::pipeline
