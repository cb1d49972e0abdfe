#include "ciuap/generator.hpp"

#include "ciuap/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace ciuap {

namespace fs = std::filesystem;

namespace {

constexpr double kLogGuard = 1e-6;

} // namespace

// ---------------------------------------------------------------- latents

std::vector<LatentVector> sample_latent(Rng& rng, int count, int latent_dim)
{
    require(count >= 1, "sample_latent needs count >= 1");
    require(latent_dim >= 1, "latent_dim must be >= 1");
    std::vector<LatentVector> out(count);
    for (auto& z : out) {
        z.values.resize(latent_dim);
        for (auto& v : z.values) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    }
    return out;
}

Tensor latent_batch(const std::vector<LatentVector>& z)
{
    require(!z.empty(), "empty latent batch");
    const int dim = static_cast<int>(z.front().values.size());
    Tensor t(Shape{static_cast<int>(z.size()), dim, 1, 1});
    for (std::size_t i = 0; i < z.size(); ++i) {
        require(static_cast<int>(z[i].values.size()) == dim, "latent dimension mismatch within batch");
        std::copy(z[i].values.begin(), z[i].values.end(), t.sample(static_cast<int>(i)).begin());
    }
    return t;
}

// ---------------------------------------------------------------- spec

void GeneratorSpec::validate() const
{
    require(latent_dim >= 1, "latent_dim must be >= 1");
    require(xi >= 0.0F, "xi must be nonnegative");
    require(stages >= 1, "generator needs at least one stage");
    require(base_channels >= 1, "base_channels must be >= 1");
    const int f = 1 << (stages - 1);
    require(output_shape.h % f == 0 && output_shape.w % f == 0,
            "output sides must be divisible by 2^(stages-1) for " + std::to_string(stages) + " stages");
}

io::Json GeneratorSpec::to_json() const
{
    return io::Json{{"latent_dim", latent_dim},
                    {"xi", xi},
                    {"stages", stages},
                    {"base_channels", base_channels},
                    {"output_shape", {{"height", output_shape.h}, {"width", output_shape.w}, {"channels", output_shape.c}}}};
}

GeneratorSpec GeneratorSpec::from_json(const io::Json& j)
{
    GeneratorSpec s;
    s.latent_dim = j.at("latent_dim").get<int>();
    s.xi = j.at("xi").get<float>();
    s.stages = j.at("stages").get<int>();
    s.base_channels = j.at("base_channels").get<int>();
    const auto& o = j.at("output_shape");
    s.output_shape = Shape{1, o.at("channels").get<int>(), o.at("height").get<int>(), o.at("width").get<int>()};
    return s;
}

GeneratorSpec default_generator_spec(const Target& target)
{
    GeneratorSpec s;
    s.output_shape = target.input_shape();
    // Fall back to fewer stages when the input sides are not divisible by 16.
    while (s.stages > 1 && (s.output_shape.h % (1 << (s.stages - 1)) != 0 ||
                            s.output_shape.w % (1 << (s.stages - 1)) != 0)) {
        --s.stages;
    }
    return s;
}

namespace {

nn::Network build_generator(const GeneratorSpec& spec)
{
    spec.validate();
    const int f = 1 << (spec.stages - 1);
    const int h0 = spec.output_shape.h / f;
    const int w0 = spec.output_shape.w / f;
    auto channels = [&](int k) {
        return k == spec.stages - 1 ? spec.output_shape.c : std::max(spec.base_channels >> k, 8);
    };
    nn::Network net;
    net.add<nn::Linear>("deconv1", spec.latent_dim, channels(0) * h0 * w0);
    net.add<nn::Reshape>("deconv1_map", channels(0), h0, w0);
    for (int k = 1; k < spec.stages; ++k) {
        net.add<nn::BatchNorm2d>("bn" + std::to_string(k), channels(k - 1));
        net.add<nn::Relu>("relu" + std::to_string(k));
        net.add<nn::ConvTranspose2d>("deconv" + std::to_string(k + 1), channels(k - 1), channels(k), 4, 2, 1);
    }
    net.add<nn::TanhScale>("tanh_xi", spec.xi);
    return net;
}

bool has_batchnorm(const nn::Network& net)
{
    for (std::size_t i = 0; i < net.num_layers(); ++i) {
        if (net.layer(i).kind() == "batchnorm") return true;
    }
    return false;
}

void calibrate_batchnorm(nn::Network& net, const std::vector<LatentVector>& z)
{
    if (!has_batchnorm(net)) return;
    net.set_batchnorm_stats(net.forward(latent_batch(z), nn::Mode::train));
}

} // namespace

GeneratorModel::GeneratorModel(const GeneratorSpec& spec, std::uint64_t init_seed)
    : spec_(spec), net_(build_generator(spec))
{
    Rng rng(derive_seed(init_seed, "generator/weights"));
    net_.initialize(rng);
    Rng calib(derive_seed(init_seed, "generator/bn-calibration"));
    calibrate_batchnorm(net_, sample_latent(calib, 256, spec_.latent_dim));
}

// ---------------------------------------------------------------- generation

std::vector<Perturbation> generate_uaps(const GeneratorModel& g, const std::vector<LatentVector>& z)
{
    for (const auto& zi : z) {
        require(static_cast<int>(zi.values.size()) == g.latent_dim(),
                "latent dimension " + std::to_string(zi.values.size()) + " does not match generator latent_dim " +
                    std::to_string(g.latent_dim()));
    }
    const Tensor out = g.network().infer(latent_batch(z));
    std::vector<Perturbation> result(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        result[i].values = out.slice(static_cast<int>(i), 1);
        result[i].xi = g.xi();
        result[i].source_z = z[i];
    }
    return result;
}

Perturbation generate_uap(const GeneratorModel& g, const LatentVector& z) { return generate_uaps(g, {z}).front(); }

// ---------------------------------------------------------------- losses

std::string to_string(DistanceMetric m) { return m == DistanceMetric::cosine ? "cosine" : "euclidean"; }

std::string to_string(PairingMode m) { return m == PairingMode::per_impression_pair ? "per-impression-pair" : "all-pairs"; }

DistanceMetric parse_distance_metric(const std::string& s)
{
    if (s == "cosine") return DistanceMetric::cosine;
    if (s == "euclidean") return DistanceMetric::euclidean;
    throw ConfigError("unknown distance metric '" + s + "'");
}

PairingMode parse_pairing_mode(const std::string& s)
{
    if (s == "per-impression-pair") return PairingMode::per_impression_pair;
    if (s == "all-pairs") return PairingMode::all_pairs;
    throw ConfigError("unknown pairing mode '" + s + "'");
}

double embedding_distance(std::span<const float> a, std::span<const float> b, DistanceMetric metric)
{
    require(a.size() == b.size(), "embedding size mismatch");
    if (metric == DistanceMetric::euclidean) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += (static_cast<double>(a[i]) - b[i]) * (a[i] - b[i]);
        return std::sqrt(s);
    }
    double dot = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    const double denom = std::sqrt(na) * std::sqrt(nb);
    if (denom < 1e-24) return 0.0;
    return 1.0 - dot / denom;
}

namespace {

// Adds d(distance)/d(a) into ga and d(distance)/d(b) into gb, scaled by w.
void distance_gradient(std::span<const float> a, std::span<const float> b, DistanceMetric metric, double w,
                       std::span<float> ga, std::span<float> gb)
{
    const std::size_t n = a.size();
    if (metric == DistanceMetric::euclidean) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += (static_cast<double>(a[i]) - b[i]) * (a[i] - b[i]);
        const double d = std::sqrt(s);
        if (d < 1e-12) return;
        for (std::size_t i = 0; i < n; ++i) {
            const double g = w * (a[i] - b[i]) / d;
            ga[i] += static_cast<float>(g);
            gb[i] -= static_cast<float>(g);
        }
        return;
    }
    double dot = 0.0;
    double na2 = 0.0;
    double nb2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na2 += static_cast<double>(a[i]) * a[i];
        nb2 += static_cast<double>(b[i]) * b[i];
    }
    const double na = std::sqrt(na2);
    const double nb = std::sqrt(nb2);
    if (na * nb < 1e-24) return;
    const double cos = dot / (na * nb);
    // d = 1 - cos; d cos / d a = b / (|a||b|) - cos * a / |a|^2
    for (std::size_t i = 0; i < n; ++i) {
        ga[i] += static_cast<float>(-w * (b[i] / (na * nb) - cos * a[i] / na2));
        gb[i] += static_cast<float>(-w * (a[i] / (na * nb) - cos * b[i] / nb2));
    }
}

// Which image and which perturbation make up each perturbed row, and which
// rows form diversity pairs.
struct Layout {
    std::vector<int> x_index;
    std::vector<int> v_index;
    std::vector<std::pair<int, int>> pairs;
};

Layout paired_layout(int images, int perturbations)
{
    require(perturbations == images || perturbations == 1,
            "need one perturbation per image or a single broadcast perturbation");
    Layout l;
    for (int r = 0; r < images; ++r) {
        l.x_index.push_back(r);
        l.v_index.push_back(perturbations == 1 ? 0 : r);
    }
    return l;
}

Layout diversity_layout(int images, int perturbations, PairingMode mode)
{
    require(perturbations >= 2, "diversity loss needs at least two perturbations");
    Layout l;
    if (mode == PairingMode::per_impression_pair) {
        require(perturbations == 2 * images, "per-impression-pair mode needs exactly two perturbations per image");
        for (int k = 0; k < images; ++k) {
            for (int t = 0; t < 2; ++t) {
                l.x_index.push_back(k);
                l.v_index.push_back(2 * k + t);
            }
            l.pairs.emplace_back(2 * k, 2 * k + 1);
        }
        return l;
    }
    for (int k = 0; k < images; ++k) {
        const int base = static_cast<int>(l.x_index.size());
        for (int m = 0; m < perturbations; ++m) {
            l.x_index.push_back(k);
            l.v_index.push_back(m);
        }
        for (int a = 0; a < perturbations; ++a) {
            for (int b = a + 1; b < perturbations; ++b) l.pairs.emplace_back(base + a, base + b);
        }
    }
    return l;
}

struct Objective {
    double fooling = 0.0;   // mean over rows
    double diversity = 0.0; // -sum over pairs
    Tensor grad_v;          // gradient of wf * fooling + wd * diversity w.r.t. v
};

Objective evaluate(const Target& clf, const Tensor& x, const Tensor& v, const Layout& layout,
                   std::span<const int> clean_labels, double wf, double wd, DistanceMetric metric,
                   std::string_view layer, bool need_grad)
{
    require(x.shape().with_batch(1) == v.shape().with_batch(1), "x and v sample shapes differ");
    const int rows = static_cast<int>(layout.x_index.size());
    const std::size_t stride = x.shape().sample_size();
    const PixelRange range = clf.pixel_range();
    Tensor perturbed(x.shape().with_batch(rows));
    std::vector<std::uint8_t> inside(perturbed.size(), 1);
    for (int r = 0; r < rows; ++r) {
        const auto xs = x.sample(layout.x_index[r]);
        const auto vs = v.sample(layout.v_index[r]);
        auto out = perturbed.sample(r);
        for (std::size_t i = 0; i < stride; ++i) {
            const float s = xs[i] + vs[i];
            if (s < range.low || s > range.high) inside[r * stride + i] = 0;
            out[i] = std::clamp(s, range.low, range.high);
        }
    }
    const bool intermediate = wd != 0.0 && layer != kSoftmaxLayer && !layout.pairs.empty();
    const TapResult tap = clf.forward(perturbed, intermediate ? layer : kSoftmaxLayer);
    const Tensor probs = nn::softmax(tap.logits);
    const int k = clf.num_classes();

    Objective obj;
    Tensor dlogits(tap.logits.shape());
    for (int r = 0; r < rows; ++r) {
        const int c = clean_labels[layout.x_index[r]];
        const double pc = probs[static_cast<std::size_t>(r) * k + c];
        // Offset by log(1 + eps) so the loss is exactly 0 at p_c = 0 and never negative.
        obj.fooling -= std::log(1.0 - pc + kLogGuard) - std::log1p(kLogGuard);
        if (need_grad && wf != 0.0) {
            // d/dz_j of -log(1 - p_c + eps) = p_c (delta_jc - p_j) / (1 - p_c + eps)
            const double scale = wf * pc / (1.0 - pc + kLogGuard) / rows;
            for (int j = 0; j < k; ++j) {
                const double pj = probs[static_cast<std::size_t>(r) * k + j];
                dlogits[static_cast<std::size_t>(r) * k + j] += static_cast<float>(scale * ((j == c ? 1.0 : 0.0) - pj));
            }
        }
    }
    obj.fooling /= rows;

    Tensor dembed;
    if (!layout.pairs.empty()) {
        const Tensor& emb = intermediate ? tap.embedding : probs;
        const int dim = static_cast<int>(emb.shape().sample_size());
        if (need_grad && wd != 0.0) dembed = Tensor(emb.shape());
        for (const auto& [a, b] : layout.pairs) {
            const auto ea = emb.sample(a);
            const auto eb = emb.sample(b);
            obj.diversity -= embedding_distance(ea, eb, metric);
            if (!dembed.empty()) distance_gradient(ea, eb, metric, -wd, dembed.sample(a), dembed.sample(b));
        }
        (void)dim;
        if (!dembed.empty() && !intermediate) {
            dlogits += nn::softmax_backward(probs, dembed);
            dembed = Tensor();
        }
    }
    if (!need_grad) return obj;

    const Tensor dx = clf.backward(tap, dlogits, dembed.empty() ? nullptr : &dembed);
    obj.grad_v = Tensor(v.shape());
    for (int r = 0; r < rows; ++r) {
        const auto g = dx.sample(r);
        auto gv = obj.grad_v.sample(layout.v_index[r]);
        for (std::size_t i = 0; i < stride; ++i) {
            if (inside[r * stride + i] != 0) gv[i] += g[i];
        }
    }
    return obj;
}

} // namespace

double fooling_loss(const Target& clf, const Tensor& x, const Tensor& v)
{
    const auto labels = predict_label(clf, x);
    return evaluate(clf, x, v, paired_layout(x.shape().n, v.shape().n), labels, 1.0, 0.0, DistanceMetric::cosine,
                    kSoftmaxLayer, false)
        .fooling;
}

LossGradient fooling_loss_with_grad(const Target& clf, const Tensor& x, const Tensor& v)
{
    const auto labels = predict_label(clf, x);
    auto obj = evaluate(clf, x, v, paired_layout(x.shape().n, v.shape().n), labels, 1.0, 0.0, DistanceMetric::cosine,
                        kSoftmaxLayer, true);
    return {obj.fooling, std::move(obj.grad_v)};
}

double diversity_loss(const Target& clf, const Tensor& x, const Tensor& v, const TrainConfig& cfg)
{
    const auto labels = predict_label(clf, x);
    return evaluate(clf, x, v, diversity_layout(x.shape().n, v.shape().n, cfg.pairing_mode), labels, 0.0, 1.0,
                    cfg.distance_metric, cfg.embedding_layer, false)
        .diversity;
}

LossGradient diversity_loss_with_grad(const Target& clf, const Tensor& x, const Tensor& v, const TrainConfig& cfg)
{
    const auto labels = predict_label(clf, x);
    auto obj = evaluate(clf, x, v, diversity_layout(x.shape().n, v.shape().n, cfg.pairing_mode), labels, 0.0, 1.0,
                        cfg.distance_metric, cfg.embedding_layer, true);
    return {obj.diversity, std::move(obj.grad_v)};
}

double total_loss(double fooling, double diversity, double lambda)
{
    require(lambda >= 0.0, "lambda must be nonnegative");
    return fooling + lambda * diversity;
}

// ---------------------------------------------------------------- training

void TrainConfig::validate() const
{
    require(lambda >= 0.0, "lambda must be nonnegative");
    require(batch_size >= 1, "batch_size must be >= 1");
    require(lambda == 0.0 || batch_size >= 2, "batch_size must be >= 2 when the diversity loss is enabled");
    require(epochs >= 0, "epochs must be nonnegative");
    require(pairing_mode == PairingMode::per_impression_pair || all_pairs_group >= 2,
            "all_pairs_group must be >= 2");
    require(optimizer.learning_rate > 0.0, "generator learning rate must be positive");
    require(bn_calibration_samples >= 2, "bn_calibration_samples must be >= 2");
}

io::Json TrainConfig::to_json() const
{
    return io::Json{{"batch_size", batch_size},
                    {"lambda", lambda},
                    {"distance_metric", to_string(distance_metric)},
                    {"embedding_layer", embedding_layer},
                    {"pairing_mode", to_string(pairing_mode)},
                    {"all_pairs_group", all_pairs_group},
                    {"epochs", epochs},
                    {"learning_rate", optimizer.learning_rate},
                    {"beta1", optimizer.beta1},
                    {"beta2", optimizer.beta2},
                    {"seed", seed},
                    {"bn_calibration_samples", bn_calibration_samples}};
}

GeneratorModel train_generator(const Target& target, const ImpressionDataset& impressions, const TrainConfig& cfg,
                               const GeneratorSpec& spec, const fs::path& out_dir, const EpochObserver& observer)
{
    cfg.validate();
    require(impressions.size() > 0, "train_generator needs a non-empty impression dataset");
    require(spec.output_shape == target.input_shape(), "generator output shape must equal the target input shape");

    GeneratorModel g(spec, derive_seed(cfg.seed, "generator/init"));
    g.trained_against = target.member_ids();
    g.train_config = cfg.to_json();

    const Tensor images = impressions.images();
    const int n = images.shape().n;
    Rng order_rng(derive_seed(cfg.seed, "generator/order"));
    Rng z_rng(derive_seed(cfg.seed, "generator/latent"));
    Rng calib_rng(derive_seed(cfg.seed, "generator/bn-calibration"));
    const auto calib_latents = sample_latent(calib_rng, cfg.bn_calibration_samples, spec.latent_dim);
    Adam adam(cfg.optimizer);
    auto params = g.network().parameters();
    const bool diversity_on = cfg.lambda > 0.0;

    std::vector<int> order(n);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        for (int i = n - 1; i > 0; --i) std::swap(order[i], order[order_rng.below(static_cast<std::uint64_t>(i) + 1)]);
        EpochLoss acc{epoch, 0.0, 0.0, 0.0};
        int batches = 0;
        for (int b = 0; b < n; b += cfg.batch_size) {
            const int count = std::min(cfg.batch_size, n - b);
            const Tensor x = images.gather(std::span<const int>(order.data() + b, count));
            const int m = cfg.pairing_mode == PairingMode::per_impression_pair ? 2 * count : cfg.all_pairs_group;
            const auto z = sample_latent(z_rng, m, spec.latent_dim);
            const nn::Trace trace = g.network().forward(latent_batch(z), nn::Mode::train);
            const auto labels = predict_label(target, x);
            const Layout layout = diversity_layout(count, m, cfg.pairing_mode);
            const Objective obj = evaluate(target, x, trace.output(), layout, labels, 1.0,
                                           diversity_on ? cfg.lambda : 0.0, cfg.distance_metric, cfg.embedding_layer,
                                           true);
            const double total = total_loss(obj.fooling, obj.diversity, cfg.lambda);
            if (!std::isfinite(total) || !obj.grad_v.all_finite()) {
                throw NumericalError("generator loss became non-finite at epoch " + std::to_string(epoch) +
                                     (out_dir.empty() ? std::string()
                                                      : "; last good checkpoint kept in " + out_dir.string()));
            }
            auto grads = g.network().zero_gradients();
            g.network().backward(trace, obj.grad_v, &grads);
            std::vector<const Tensor*> gptrs;
            for (const auto& layer : grads) {
                for (const auto& t : layer) gptrs.push_back(&t);
            }
            adam.step(params, gptrs);
            acc.total += total;
            acc.fooling += obj.fooling;
            acc.diversity += obj.diversity;
            ++batches;
        }
        acc.total /= batches;
        acc.fooling /= batches;
        acc.diversity /= batches;
        calibrate_batchnorm(g.network(), calib_latents);
        g.loss_history.push_back(acc);
        if (!out_dir.empty()) save_generator(g, out_dir);
        if (observer) observer(epoch, g);
    }
    if (!out_dir.empty() && cfg.epochs == 0) save_generator(g, out_dir);
    return g;
}

// ---------------------------------------------------------------- persistence

fs::path save_generator(const GeneratorModel& g, const fs::path& dir)
{
    fs::create_directories(dir);
    const auto bytes = g.network().serialize();
    io::write_bytes(dir / "generator.bin", bytes);
    std::ostringstream csv;
    csv << "epoch,total,fooling,diversity\n";
    char line[160];
    for (const auto& e : g.loss_history) {
        std::snprintf(line, sizeof(line), "%d,%.17g,%.17g,%.17g\n", e.epoch, e.total, e.fooling, e.diversity);
        csv << line;
    }
    io::write_text(dir / "losses.csv", csv.str());
    io::Json j;
    j["latent_dim"] = g.latent_dim();
    j["xi"] = g.xi();
    j["layer_spec"] = g.spec().to_json();
    j["trained_against"] = g.trained_against;
    j["train_config"] = g.train_config;
    j["epochs_completed"] = g.loss_history.size();
    j["checkpoint"] = "generator.bin";
    j["checkpoint_sha256"] = io::sha256_hex(bytes);
    j["loss_table"] = "losses.csv";
    j["loss_table_sha256"] = io::sha256_file(dir / "losses.csv");
    io::write_json(dir / "generator.json", j);
    return dir / "generator.json";
}

GeneratorModel load_generator(const fs::path& dir)
{
    const auto manifest = dir / "generator.json";
    if (!fs::exists(manifest)) throw DependencyError("missing generator manifest " + manifest.string());
    const auto j = io::read_json(manifest);
    const auto spec = GeneratorSpec::from_json(j.at("layer_spec"));
    GeneratorModel g(spec, 0);
    const auto ckpt = dir / j.at("checkpoint").get<std::string>();
    io::verify_checksum(ckpt, j.at("checkpoint_sha256").get<std::string>());
    g.network().deserialize(io::read_bytes(ckpt));
    g.trained_against = j.at("trained_against").get<std::vector<std::string>>();
    g.train_config = j.at("train_config");
    const auto table = dir / j.at("loss_table").get<std::string>();
    io::verify_checksum(table, j.at("loss_table_sha256").get<std::string>());
    std::istringstream csv(io::read_text(table));
    std::string row;
    std::getline(csv, row);
    while (std::getline(csv, row)) {
        if (row.empty()) continue;
        EpochLoss e;
        if (std::sscanf(row.c_str(), "%d,%lf,%lf,%lf", &e.epoch, &e.total, &e.fooling, &e.diversity) != 4) {
            throw DependencyError("malformed loss table row: " + row);
        }
        g.loss_history.push_back(e);
    }
    return g;
}

void export_uap(const Perturbation& v, const fs::path& dir, const std::string& stem)
{
    fs::create_directories(dir);
    io::write_pfm(dir / (stem + ".pfm"), v.values);
    const float bound = v.xi > 0.0F ? v.xi : 1.0F;
    io::write_png(dir / (stem + ".png"), v.values, -bound, bound);
}

} // namespace ciuap
