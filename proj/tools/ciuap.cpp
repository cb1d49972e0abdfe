#include "ciuap/errors.hpp"
#include "ciuap/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace ciuap;

namespace {

std::string describe_keys()
{
    std::string out = "configuration keys (defaults):\n";
    for (const auto& k : pipeline::config_keys()) {
        out += "  " + k.name + " = " + k.default_value;
        if (!k.help.empty()) out += "    # " + k.help;
        out += "\n";
    }
    return out;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Data-free universal adversarial perturbation pipeline"};
    app.footer(describe_keys());
    app.require_subcommand(1);
    std::string config_path;
    std::vector<std::string> overrides;
    bool print_config = false;
    for (const auto& name : pipeline::subcommands()) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("-c,--config", config_path, "config file (key = value lines)");
        sub->add_option("-s,--set", overrides, "override, key=value (repeatable)");
        sub->add_flag("--print-config", print_config, "print the resolved config and exit");
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : static_cast<int>(ExitCode::usage);
    }
    const std::string subcommand = app.get_subcommands().front()->get_name();
    try {
        auto cfg = config_path.empty() ? pipeline::RunConfig() : pipeline::RunConfig::load(config_path);
        for (const auto& o : overrides) cfg.apply_override(o);
        if (print_config) {
            std::cout << cfg.resolved_text();
            return 0;
        }
        const auto result = pipeline::run(subcommand, cfg);
        std::cout << result.run_dir.string() << "\n" << result.summary.at("metrics").dump(2) << "\n";
        return 0;
    } catch (const Error& e) {
        std::cerr << "ciuap " << subcommand << ": " << e.what() << "\n";
        return static_cast<int>(e.code());
    } catch (const std::exception& e) {
        std::cerr << "ciuap " << subcommand << ": " << e.what() << "\n";
        return static_cast<int>(ExitCode::usage);
    }
}
