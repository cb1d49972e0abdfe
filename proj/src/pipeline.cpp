#include "ciuap/pipeline.hpp"

#include "ciuap/errors.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <optional>
#include <sstream>

namespace ciuap::pipeline {

namespace fs = std::filesystem;

const std::vector<ConfigKey>& config_keys()
{
    using K = ValueKind;
    static const std::vector<ConfigKey> keys = {
        {"seed", K::integer, "1", "root seed; every stage derives its own substream"},
        {"dataset", K::text, "gratings10", "dataset id"},
        {"output_dir", K::text, "runs", "parent of run directories"},
        {"registry", K::text, "registry", "classifier registry (CIUAP_REGISTRY overrides)"},

        {"classifier.arch", K::text, "cnn-3layer", "architecture id"},
        {"classifier.model_id", K::text, "", "registry id; empty derives <dataset>-<arch>-s<seed>"},
        {"classifier.epochs", K::integer, "0", "0 selects the architecture default"},
        {"classifier.batch_size", K::integer, "64", ""},
        {"classifier.learning_rate", K::real, "0", "0 selects the architecture default"},
        {"classifier.label_smoothing", K::real, "0.1", ""},

        {"impressions.per_class", K::integer, "10", ""},
        {"impressions.classes", K::list, "all", "class ids or 'all'"},
        {"impressions.learning_rate", K::real, "0.1", ""},
        {"impressions.max_steps", K::integer, "2000", ""},
        {"impressions.confidence_low", K::real, "0.55", ""},
        {"impressions.confidence_high", K::real, "0.99", ""},
        {"impressions.augment", K::boolean, "true", "false disables every augmentation"},
        {"impressions.rotation_min", K::real, "-5", "degrees"},
        {"impressions.rotation_max", K::real, "5", "degrees"},
        {"impressions.scales", K::list, "0.95,0.975,1.0,1.025", ""},
        {"impressions.jitter", K::real, "5", "per-channel offset amplitude"},
        {"impressions.crop_fraction", K::real, "0.9", ""},
        {"impressions.noise", K::real, "10", "uniform noise amplitude"},
        {"impressions.init_low", K::real, "0", ""},
        {"impressions.init_high", K::real, "255", ""},

        {"generator.latent_dim", K::integer, "10", ""},
        {"generator.xi", K::real, "10", "max-norm bound"},
        {"generator.stages", K::integer, "5", "reduced automatically for small inputs"},
        {"generator.base_channels", K::integer, "64", ""},

        {"train.batch_size", K::integer, "32", ""},
        {"train.lambda", K::real, "1", "diversity weight"},
        {"train.distance", K::text, "cosine", "cosine | euclidean"},
        {"train.embedding_layer", K::text, "softmax", ""},
        {"train.pairing", K::text, "per-impression-pair", "per-impression-pair | all-pairs"},
        {"train.all_pairs_group", K::integer, "4", ""},
        {"train.epochs", K::integer, "50", ""},
        {"train.learning_rate", K::real, "0.002", ""},
        {"train.bn_calibration_samples", K::integer, "256", ""},

        {"input.impressions", K::text, "", "impression dataset directory"},
        {"input.generator", K::text, "", "generator checkpoint directory"},

        {"eval.z_samples", K::integer, "10", "UAPs averaged per success rate"},
        {"eval.noise_trials", K::integer, "10", "random-noise baseline draws"},
        {"eval.zero_uap", K::boolean, "false", "evaluate v = 0 instead of a generator"},
        {"eval.num_uaps", K::integer, "10", "UAPs sampled for diversity"},
        {"eval.coverage", K::real, "0.95", ""},

        {"interp.steps", K::integer, "5", ""},

        {"transfer.archs", K::list, "cnn-3layer,cnn-5layer,cnn-allconv", ""},
        {"transfer.generators", K::list, "", "generator directories; empty trains one per arch"},

        {"advtrain.epochs", K::integer, "2", ""},
        {"advtrain.mix", K::real, "0.5", "fraction of each batch carrying a UAP"},
        {"advtrain.batch_size", K::integer, "64", ""},
        {"advtrain.learning_rate", K::real, "0.0005", ""},
        {"retrain.per_class", K::integer, "10", ""},
    };
    return keys;
}

namespace {

const ConfigKey* find_key(const std::string& name)
{
    for (const auto& k : config_keys()) {
        if (k.name == name) return &k;
    }
    return nullptr;
}

std::string trim(std::string_view s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::optional<long long> parse_int(const std::string& s)
{
    long long v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

std::optional<double> parse_real(const std::string& s)
{
    if (s.empty()) return std::nullopt;
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size() || !std::isfinite(v)) return std::nullopt;
    return v;
}

std::optional<bool> parse_bool(const std::string& s)
{
    if (s == "true" || s == "yes" || s == "1") return true;
    if (s == "false" || s == "no" || s == "0") return false;
    return std::nullopt;
}

std::vector<std::string> split_list(const std::string& s)
{
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

// Returns an error description, empty when the value fits the key.
std::string check_value(const ConfigKey& key, const std::string& value)
{
    switch (key.kind) {
    case ValueKind::integer:
        return parse_int(value) ? "" : "expects an integer, got '" + value + "'";
    case ValueKind::real:
        return parse_real(value) ? "" : "expects a number, got '" + value + "'";
    case ValueKind::boolean:
        return parse_bool(value) ? "" : "expects true or false, got '" + value + "'";
    case ValueKind::list:
        if (key.name == "impressions.scales") {
            for (const auto& item : split_list(value)) {
                if (!parse_real(item)) return "expects a list of numbers, got '" + item + "'";
            }
        }
        return "";
    case ValueKind::text:
        return "";
    }
    return "";
}

} // namespace

RunConfig::RunConfig()
{
    for (const auto& k : config_keys()) values_[k.name] = k.default_value;
}

RunConfig RunConfig::parse(const std::string& text, const std::string& origin)
{
    RunConfig cfg;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    std::map<std::string, int> seen;
    while (std::getline(ss, line)) {
        ++lineno;
        const auto where = origin + ":" + std::to_string(lineno) + ": ";
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string body = trim(line);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value', got '" + body + "'");
        const std::string key = trim(std::string_view(body).substr(0, eq));
        const std::string value = trim(std::string_view(body).substr(eq + 1));
        const ConfigKey* k = find_key(key);
        if (k == nullptr) throw ConfigError(where + "unknown key '" + key + "'");
        if (const auto it = seen.find(key); it != seen.end()) {
            throw ConfigError(where + "duplicate key '" + key + "' (first set on line " +
                              std::to_string(it->second) + ")");
        }
        seen[key] = lineno;
        if (const auto err = check_value(*k, value); !err.empty()) {
            throw ConfigError(where + "key '" + key + "' " + err);
        }
        cfg.values_[key] = value;
    }
    return cfg;
}

RunConfig RunConfig::load(const fs::path& path)
{
    if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
    return parse(io::read_text(path), path.string());
}

void RunConfig::set(const std::string& key, const std::string& value)
{
    const ConfigKey* k = find_key(key);
    if (k == nullptr) throw ConfigError("unknown key '" + key + "'");
    if (const auto err = check_value(*k, value); !err.empty()) throw ConfigError("key '" + key + "' " + err);
    values_[key] = value;
}

void RunConfig::apply_override(const std::string& assignment)
{
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
    set(trim(std::string_view(assignment).substr(0, eq)), trim(std::string_view(assignment).substr(eq + 1)));
}

const std::string& RunConfig::get(const std::string& key) const
{
    const auto it = values_.find(key);
    require(it != values_.end(), "no config key '" + key + "'");
    return it->second;
}

long long RunConfig::get_int(const std::string& key) const { return *parse_int(get(key)); }
double RunConfig::get_real(const std::string& key) const { return *parse_real(get(key)); }
bool RunConfig::get_bool(const std::string& key) const { return *parse_bool(get(key)); }
std::vector<std::string> RunConfig::get_list(const std::string& key) const { return split_list(get(key)); }

std::string RunConfig::resolved_text() const
{
    std::string out;
    for (const auto& k : config_keys()) out += k.name + " = " + values_.at(k.name) + "\n";
    return out;
}

std::string RunConfig::hash() const { return io::sha256_text(resolved_text()); }

std::uint64_t RunConfig::root_seed() const { return static_cast<std::uint64_t>(get_int("seed")); }

std::uint64_t RunConfig::stage_seed(const std::string& stage) const { return derive_seed(root_seed(), stage); }

fs::path RunConfig::registry() const
{
    if (const char* env = std::getenv("CIUAP_REGISTRY"); env != nullptr && *env != '\0') return env;
    return get("registry");
}

fs::path RunConfig::output_dir() const { return get("output_dir"); }

ImpressionConfig RunConfig::impression_config() const
{
    ImpressionConfig c = get_bool("impressions.augment") ? ImpressionConfig{} : identity_augmentation_config();
    c.learning_rate = get_real("impressions.learning_rate");
    c.max_steps = static_cast<int>(get_int("impressions.max_steps"));
    c.confidence_low = get_real("impressions.confidence_low");
    c.confidence_high = get_real("impressions.confidence_high");
    c.init_low = get_real("impressions.init_low");
    c.init_high = get_real("impressions.init_high");
    if (get_bool("impressions.augment")) {
        c.rotation_min_degrees = get_real("impressions.rotation_min");
        c.rotation_max_degrees = get_real("impressions.rotation_max");
        c.scale_choices.clear();
        for (const auto& s : get_list("impressions.scales")) c.scale_choices.push_back(*parse_real(s));
        c.jitter_amplitude = get_real("impressions.jitter");
        c.crop_fraction = get_real("impressions.crop_fraction");
        c.noise_amplitude = get_real("impressions.noise");
    }
    try {
        c.validate();
    } catch (const ContractViolation& e) {
        throw ConfigError(std::string("impressions: ") + e.what());
    }
    return c;
}

TrainConfig RunConfig::train_config(const std::string& stage) const
{
    TrainConfig t;
    t.batch_size = static_cast<int>(get_int("train.batch_size"));
    t.lambda = get_real("train.lambda");
    t.distance_metric = parse_distance_metric(get("train.distance"));
    t.embedding_layer = get("train.embedding_layer");
    t.pairing_mode = parse_pairing_mode(get("train.pairing"));
    t.all_pairs_group = static_cast<int>(get_int("train.all_pairs_group"));
    t.epochs = static_cast<int>(get_int("train.epochs"));
    t.optimizer.learning_rate = get_real("train.learning_rate");
    t.bn_calibration_samples = static_cast<int>(get_int("train.bn_calibration_samples"));
    t.seed = stage_seed(stage);
    try {
        t.validate();
    } catch (const ContractViolation& e) {
        throw ConfigError(std::string("train: ") + e.what());
    }
    return t;
}

ClassifierTrainOptions RunConfig::classifier_options() const
{
    ClassifierTrainOptions o;
    o.epochs = static_cast<int>(get_int("classifier.epochs"));
    o.batch_size = static_cast<int>(get_int("classifier.batch_size"));
    o.learning_rate = get_real("classifier.learning_rate");
    o.label_smoothing = get_real("classifier.label_smoothing");
    if (o.epochs < 0 || o.batch_size < 1 || o.learning_rate < 0.0 || o.label_smoothing < 0.0 ||
        o.label_smoothing >= 1.0) {
        throw ConfigError("classifier: invalid training options");
    }
    return o;
}

std::vector<int> RunConfig::impression_classes(int num_classes) const
{
    const auto items = get_list("impressions.classes");
    std::vector<int> out;
    if (items.size() == 1 && items[0] == "all") {
        for (int c = 0; c < num_classes; ++c) out.push_back(c);
        return out;
    }
    for (const auto& s : items) {
        const auto v = parse_int(s);
        if (!v || *v < 0 || *v >= num_classes) {
            throw ConfigError("impressions.classes: '" + s + "' is not a class id below " +
                              std::to_string(num_classes));
        }
        out.push_back(static_cast<int>(*v));
    }
    if (out.empty()) throw ConfigError("impressions.classes is empty");
    return out;
}

// ---------------------------------------------------------------- stages

const std::vector<std::string>& subcommands()
{
    static const std::vector<std::string> names = {"train-classifier", "synth-impressions", "train-generator",
                                                   "evaluate",         "transfer-matrix",   "diversity",
                                                   "interpolate",      "adv-train",         "full-pipeline"};
    return names;
}

namespace {

class Stage {
public:
    Stage(const RunConfig& cfg, fs::path run_dir) : cfg_(cfg), run_dir_(std::move(run_dir)) {}

    const RunConfig& cfg() const { return cfg_; }
    const fs::path& run_dir() const { return run_dir_; }
    io::Json& metrics() { return metrics_; }
    io::Json& artifacts() { return artifacts_; }

    const DatasetSplits& data()
    {
        if (!data_) data_ = load_dataset(cfg_.get("dataset"));
        return *data_;
    }

    std::string model_id(const std::string& arch) const
    {
        const auto& id = cfg_.get("classifier.model_id");
        if (!id.empty() && arch == cfg_.get("classifier.arch")) return id;
        return default_model_id(cfg_.get("dataset"), arch, cfg_.root_seed());
    }

    void add_artifact(const fs::path& path, const std::string& root)
    {
        const fs::path base = root == "run" ? run_dir_ : cfg_.registry();
        artifacts_.push_back(io::Json{{"root", root},
                                      {"path", fs::relative(path, base).generic_string()},
                                      {"sha256", io::sha256_file(path)}});
    }

    ClassifierHandle train(const std::string& arch)
    {
        const ClassifierHandle trained =
            train_classifier(data(), arch, cfg_.stage_seed("train-classifier"), cfg_.classifier_options());
        ClassifierInfo info = trained.info();
        info.model_id = model_id(arch);
        ClassifierHandle clf(info, trained.network());
        save_classifier(clf, cfg_.registry());
        record_classifier(clf);
        return clf;
    }

    ClassifierHandle load(const std::string& arch)
    {
        const ClassifierHandle clf = load_classifier(cfg_.registry(), model_id(arch));
        record_classifier(clf);
        return clf;
    }

    ClassifierHandle load_or_train(const std::string& arch)
    {
        return classifier_exists(cfg_.registry(), model_id(arch)) ? load(arch) : train(arch);
    }

private:
    void record_classifier(const ClassifierHandle& clf)
    {
        add_artifact(cfg_.registry() / (clf.model_id() + ".json"), "registry");
        add_artifact(cfg_.registry() / (clf.model_id() + ".params"), "registry");
    }

    const RunConfig& cfg_;
    fs::path run_dir_;
    io::Json metrics_ = io::Json::object();
    io::Json artifacts_ = io::Json::array();
    std::optional<DatasetSplits> data_;
};

fs::path required_input(const RunConfig& cfg, const std::string& key)
{
    const auto& value = cfg.get(key);
    if (value.empty()) throw ConfigError("this subcommand needs " + key);
    return value;
}

ImpressionDataset synthesize(Stage& s, const Target& clf, const fs::path& dir)
{
    const auto& cfg = s.cfg();
    auto ds = build_impression_dataset(clf, static_cast<int>(cfg.get_int("impressions.per_class")),
                                       cfg.impression_classes(clf.num_classes()), cfg.impression_config(),
                                       cfg.stage_seed("synth-impressions"), dir);
    s.add_artifact(dir / "dataset.json", "run");
    s.add_artifact(dir / "manifest.csv", "run");
    double steps = 0.0;
    for (const auto& r : ds.records) steps += r.steps_used;
    s.metrics()["impressions"] = {{"model_id", ds.model_id},
                                  {"records", ds.size()},
                                  {"converged", ds.converged_count()},
                                  {"convergence_rate", static_cast<double>(ds.converged_count()) / ds.size()},
                                  {"mean_steps", steps / ds.size()}};
    return ds;
}

ImpressionDataset load_impressions(const fs::path& dir, const Target& clf)
{
    if (!fs::exists(dir / "dataset.json")) throw DependencyError("missing impression dataset: " +
                                                                 (dir / "dataset.json").string());
    auto ds = load_impression_dataset(dir);
    if (ds.model_id != clf.model_id()) {
        throw ConfigError("impressions in " + dir.string() + " belong to '" + ds.model_id + "', not '" +
                          clf.model_id() + "'");
    }
    return ds;
}

GeneratorSpec generator_spec(const RunConfig& cfg, const Target& clf)
{
    GeneratorSpec spec = default_generator_spec(clf);
    spec.latent_dim = static_cast<int>(cfg.get_int("generator.latent_dim"));
    spec.xi = static_cast<float>(cfg.get_real("generator.xi"));
    spec.base_channels = static_cast<int>(cfg.get_int("generator.base_channels"));
    spec.stages = std::min(spec.stages, static_cast<int>(cfg.get_int("generator.stages")));
    try {
        spec.validate();
    } catch (const ContractViolation& e) {
        throw ConfigError(std::string("generator: ") + e.what());
    }
    return spec;
}

GeneratorModel fit_generator(Stage& s, const Target& clf, const ImpressionDataset& imps, const fs::path& dir)
{
    auto g = train_generator(clf, imps, s.cfg().train_config(), generator_spec(s.cfg(), clf), dir);
    for (const char* f : {"generator.json", "generator.bin", "losses.csv"}) s.add_artifact(dir / f, "run");
    const auto& last = g.loss_history.back();
    s.metrics()["generator"] = {{"trained_against", g.trained_against},
                                {"epochs", g.loss_history.size()},
                                {"final_total_loss", last.total},
                                {"final_fooling_loss", last.fooling},
                                {"final_diversity_loss", last.diversity}};
    return g;
}

GeneratorModel load_input_generator(const RunConfig& cfg, const Target& clf)
{
    const fs::path dir = required_input(cfg, "input.generator");
    if (!fs::exists(dir / "generator.json")) {
        throw DependencyError("missing generator checkpoint: " + (dir / "generator.json").string());
    }
    auto g = load_generator(dir);
    if (g.spec().output_shape != clf.input_shape()) {
        throw ConfigError("generator in " + dir.string() + " produces " + g.spec().output_shape.str() +
                          " but the classifier expects " + clf.input_shape().str());
    }
    return g;
}

void evaluate(Stage& s, const Target& clf, const GeneratorModel* g)
{
    const auto& cfg = s.cfg();
    const Dataset& test = s.data().test;
    const std::uint64_t seed = cfg.stage_seed("evaluate");
    const int z_samples = static_cast<int>(cfg.get_int("eval.z_samples"));
    const float xi = g != nullptr ? g->xi() : static_cast<float>(cfg.get_real("generator.xi"));
    EvalReport report;
    if (g == nullptr) {
        report = evaluate_perturbation(clf, test, Perturbation{Tensor(clf.input_shape()), xi, {}}, "zero");
    } else {
        Rng rng(derive_seed(seed, "eval-latents"));
        const auto uaps = generate_uaps(*g, sample_latent(rng, z_samples, g->latent_dim()));
        report.model_id = clf.model_id();
        report.source_id = "generator";
        report.dataset_id = test.id;
        report.num_samples = test.size();
        report.success_rate = generator_success_rate(*g, clf, test, z_samples, seed);
        report.label_histogram = mean_label_histogram(clf, test, uaps);
    }
    const double baseline =
        random_noise_baseline(clf, test, xi, static_cast<int>(cfg.get_int("eval.noise_trials")), seed);
    io::write_json(s.run_dir() / "report.json", report.to_json());
    s.add_artifact(s.run_dir() / "report.json", "run");
    s.metrics()["evaluation"] = report.to_json();
    s.metrics()["evaluation"]["noise_baseline"] = baseline;
    s.metrics()["evaluation"]["z_samples"] = g == nullptr ? 0 : z_samples;
}

void run_transfer(Stage& s)
{
    const auto& cfg = s.cfg();
    const auto archs = cfg.get_list("transfer.archs");
    const auto gen_dirs = cfg.get_list("transfer.generators");
    if (archs.empty()) throw ConfigError("transfer.archs is empty");
    std::vector<ClassifierHandle> victims;
    for (const auto& arch : archs) victims.push_back(s.load_or_train(arch));

    std::vector<GeneratorModel> generators;
    std::vector<std::string> sources;
    if (gen_dirs.empty()) {
        for (std::size_t i = 0; i < archs.size(); ++i) {
            const fs::path dir = s.run_dir() / archs[i];
            const auto imps = synthesize(s, victims[i], dir / "impressions");
            generators.push_back(fit_generator(s, victims[i], imps, dir / "generator"));
            sources.push_back(victims[i].model_id());
        }
        s.metrics().erase("impressions");
        s.metrics().erase("generator");
    } else {
        for (const auto& d : gen_dirs) {
            if (!fs::exists(fs::path(d) / "generator.json")) {
                throw DependencyError("missing generator checkpoint: " + (fs::path(d) / "generator.json").string());
            }
            generators.push_back(load_generator(d));
            const auto& against = generators.back().trained_against;
            sources.push_back(against.empty() ? d : against.front());
        }
    }
    std::vector<const GeneratorModel*> gptrs;
    for (const auto& g : generators) gptrs.push_back(&g);
    std::vector<const Target*> vptrs;
    for (const auto& v : victims) vptrs.push_back(&v);
    const Dataset& test = s.data().test;
    const std::uint64_t seed = cfg.stage_seed("transfer-matrix");
    const auto m = transfer_matrix(gptrs, sources, vptrs, test, static_cast<int>(cfg.get_int("eval.z_samples")), seed);
    std::vector<double> baselines;
    for (const auto* v : vptrs) {
        baselines.push_back(random_noise_baseline(*v, test, generators.front().xi(),
                                                  static_cast<int>(cfg.get_int("eval.noise_trials")), seed));
    }
    io::write_text(s.run_dir() / "transfer.csv", m.to_csv());
    s.add_artifact(s.run_dir() / "transfer.csv", "run");
    s.metrics()["transfer"] = {{"sources", m.source_models},
                               {"victims", m.victim_models},
                               {"rates", m.rates},
                               {"mean_per_source", m.mean_per_source},
                               {"noise_baseline", baselines}};
}

double min_pairwise_distance(const std::vector<Perturbation>& uaps)
{
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < uaps.size(); ++i) {
        for (std::size_t j = i + 1; j < uaps.size(); ++j) {
            best = std::min(best, embedding_distance(uaps[i].values.span(), uaps[j].values.span(),
                                                     DistanceMetric::euclidean));
        }
    }
    return std::isfinite(best) ? best : 0.0;
}

void run_diversity(Stage& s, const Target& clf, const GeneratorModel& g)
{
    const auto& cfg = s.cfg();
    const int count = static_cast<int>(cfg.get_int("eval.num_uaps"));
    const double coverage = cfg.get_real("eval.coverage");
    if (count < 1) throw ConfigError("eval.num_uaps must be >= 1");
    if (!(coverage > 0.0 && coverage <= 1.0)) throw ConfigError("eval.coverage must lie in (0, 1]");
    Rng rng(cfg.stage_seed("diversity"));
    const auto uaps = generate_uaps(g, sample_latent(rng, count, g.latent_dim()));
    const auto hist = mean_label_histogram(clf, s.data().test, uaps);
    const fs::path dir = s.run_dir() / "uaps";
    for (std::size_t i = 0; i < uaps.size(); ++i) {
        export_uap(uaps[i], dir, "uap_" + std::to_string(i));
        s.add_artifact(dir / ("uap_" + std::to_string(i) + ".pfm"), "run");
    }
    s.metrics()["diversity"] = {{"num_uaps", count},
                                {"coverage", coverage},
                                {"labels_at_coverage", labels_for_coverage(hist, coverage)},
                                {"min_pairwise_euclidean", min_pairwise_distance(uaps)},
                                {"mean_label_histogram", hist}};
}

void run_interpolation(Stage& s, const Target& clf, const GeneratorModel& g)
{
    const int steps = static_cast<int>(s.cfg().get_int("interp.steps"));
    if (steps < 2) throw ConfigError("interp.steps must be >= 2");
    Rng rng(s.cfg().stage_seed("interpolate"));
    const auto z = sample_latent(rng, 2, g.latent_dim());
    const fs::path dir = s.run_dir() / "interpolation";
    const auto points = interpolate_eval(g, z[0], z[1], steps, clf, s.data().test, dir);
    std::vector<double> alphas;
    std::vector<double> rates;
    for (const auto& p : points) {
        alphas.push_back(p.alpha);
        rates.push_back(p.success_rate);
    }
    const bool exact = points.front().uap.values == generate_uap(g, z[0]).values &&
                       points.back().uap.values == generate_uap(g, z[1]).values;
    s.add_artifact(dir / "interpolation.csv", "run");
    const auto [lo, hi] = std::minmax_element(rates.begin(), rates.end());
    s.metrics()["interpolation"] = {
        {"alphas", alphas}, {"success_rates", rates}, {"spread", *hi - *lo}, {"endpoints_exact", exact}};
}

void run_adv_train(Stage& s, const ClassifierHandle& clf, const GeneratorModel& g)
{
    const auto& cfg = s.cfg();
    FinetuneOptions fo;
    fo.batch_size = static_cast<int>(cfg.get_int("advtrain.batch_size"));
    fo.learning_rate = cfg.get_real("advtrain.learning_rate");
    fo.eval_z_samples = static_cast<int>(cfg.get_int("eval.z_samples"));
    fo.seed = cfg.stage_seed("adv-train");
    const double mix = cfg.get_real("advtrain.mix");
    if (!(mix > 0.0 && mix < 1.0)) throw ConfigError("advtrain.mix must lie in (0, 1)");
    const auto ft = adversarial_finetune(clf, g, s.data().train, s.data().test,
                                         static_cast<int>(cfg.get_int("advtrain.epochs")), mix, fo);
    save_classifier(ft.model, cfg.registry());
    s.add_artifact(cfg.registry() / (ft.model.model_id() + ".json"), "registry");
    s.add_artifact(cfg.registry() / (ft.model.model_id() + ".params"), "registry");

    RetrainOptions ro;
    ro.per_class = static_cast<int>(cfg.get_int("retrain.per_class"));
    ro.impression_config = cfg.impression_config();
    ro.train_config = cfg.train_config("adv-train/generator");
    ro.seed = cfg.stage_seed("adv-train/impressions");
    ro.eval_z_samples = fo.eval_z_samples;
    const fs::path dir = s.run_dir() / "retrain";
    const auto rr = retrain_against(ft.model, s.data().test, ro, dir);
    s.add_artifact(dir / "retrain.json", "run");
    s.add_artifact(dir / "generator" / "generator.bin", "run");
    s.metrics()["adversarial_training"] = {{"model_id", clf.model_id()},
                                           {"finetuned_model_id", ft.model.model_id()},
                                           {"finetuned_accuracy", ft.model.info().accuracy},
                                           {"success_rate_before", ft.sr_before},
                                           {"success_rate_after", ft.sr_after},
                                           {"recovered_success_rate", rr.recovered_success_rate}};
}

std::string timestamp()
{
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
    return buf;
}

fs::path make_run_dir(const RunConfig& cfg, const std::string& stamp)
{
    const fs::path base = cfg.output_dir() / (stamp + "-" + cfg.hash().substr(0, 12));
    fs::path dir = base;
    for (int k = 2; fs::exists(dir); ++k) dir = base.string() + "-" + std::to_string(k);
    fs::create_directories(dir);
    return dir;
}

} // namespace

std::string summary_checksum(const io::Json& summary)
{
    io::Json copy = summary;
    for (const char* volatile_key : {"created", "elapsed_seconds", "summary_sha256", "run_dir"}) {
        copy.erase(volatile_key);
    }
    return io::sha256_text(copy.dump());
}

RunResult run(const std::string& subcommand, const RunConfig& cfg)
{
    const auto& names = subcommands();
    if (std::find(names.begin(), names.end(), subcommand) == names.end()) {
        throw ConfigError("unknown subcommand '" + subcommand + "'");
    }
    const auto t0 = std::chrono::steady_clock::now();
    const std::string stamp = timestamp();
    const fs::path run_dir = make_run_dir(cfg, stamp);
    io::write_text(run_dir / "config.resolved", cfg.resolved_text());
    Stage s(cfg, run_dir);
    const std::string arch = cfg.get("classifier.arch");

    if (subcommand == "train-classifier") {
        const auto clf = s.train(arch);
        s.metrics()["classifier"] = {{"model_id", clf.model_id()}, {"accuracy", clf.info().accuracy}};
    } else if (subcommand == "synth-impressions") {
        synthesize(s, s.load(arch), run_dir / "impressions");
    } else if (subcommand == "train-generator") {
        const auto clf = s.load(arch);
        const auto imps = load_impressions(required_input(cfg, "input.impressions"), clf);
        fit_generator(s, clf, imps, run_dir / "generator");
    } else if (subcommand == "evaluate") {
        const auto clf = s.load(arch);
        if (cfg.get_bool("eval.zero_uap")) {
            evaluate(s, clf, nullptr);
        } else {
            const auto g = load_input_generator(cfg, clf);
            evaluate(s, clf, &g);
        }
    } else if (subcommand == "transfer-matrix") {
        run_transfer(s);
    } else if (subcommand == "diversity") {
        const auto clf = s.load(arch);
        run_diversity(s, clf, load_input_generator(cfg, clf));
    } else if (subcommand == "interpolate") {
        const auto clf = s.load(arch);
        run_interpolation(s, clf, load_input_generator(cfg, clf));
    } else if (subcommand == "adv-train") {
        const auto clf = s.load(arch);
        run_adv_train(s, clf, load_input_generator(cfg, clf));
    } else {
        const auto clf = s.load_or_train(arch);
        s.metrics()["classifier"] = {{"model_id", clf.model_id()}, {"accuracy", clf.info().accuracy}};
        const auto imps = synthesize(s, clf, run_dir / "impressions");
        const auto g = fit_generator(s, clf, imps, run_dir / "generator");
        evaluate(s, clf, &g);
    }

    io::Json summary{{"subcommand", subcommand},
                     {"config_sha256", cfg.hash()},
                     {"registry", cfg.registry().generic_string()},
                     {"metrics", s.metrics()},
                     {"artifacts", s.artifacts()}};
    summary["summary_sha256"] = summary_checksum(summary);
    summary["created"] = stamp;
    summary["elapsed_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    io::write_json(run_dir / "summary.json", summary);
    return {run_dir, summary};
}

void verify_summary(const fs::path& run_dir)
{
    const fs::path path = run_dir / "summary.json";
    if (!fs::exists(path)) throw DependencyError("missing run summary: " + path.string());
    const io::Json summary = io::read_json(path);
    if (summary.value("summary_sha256", "") != summary_checksum(summary)) {
        throw DependencyError("summary checksum mismatch in " + path.string());
    }
    const fs::path registry = summary.value("registry", "");
    for (const auto& a : summary.at("artifacts")) {
        const fs::path base = a.at("root") == "run" ? run_dir : registry;
        const fs::path file = base / a.at("path").get<std::string>();
        if (!fs::exists(file)) throw DependencyError("summary lists missing artifact: " + file.string());
        io::verify_checksum(file, a.at("sha256").get<std::string>());
    }
}

} // namespace ciuap::pipeline
