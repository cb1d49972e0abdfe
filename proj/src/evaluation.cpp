#include "ciuap/evaluation.hpp"

#include "ciuap/adam.hpp"
#include "ciuap/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace ciuap {

namespace fs = std::filesystem;

namespace {

constexpr int kChunk = 256;

Tensor add_clamped(const Tensor& images, const Tensor& v, PixelRange range)
{
    require(images.shape().with_batch(1) == v.shape().with_batch(1) && v.shape().n == 1,
            "perturbation shape " + v.shape().str() + " does not match images " + images.shape().str());
    Tensor out = images;
    const std::size_t stride = images.shape().sample_size();
    for (int n = 0; n < images.shape().n; ++n) {
        auto s = out.sample(n);
        for (std::size_t i = 0; i < stride; ++i) s[i] = std::clamp(s[i] + v[i], range.low, range.high);
    }
    return out;
}

} // namespace

io::Json EvalReport::to_json() const
{
    return io::Json{{"model_id", model_id},
                    {"source_id", source_id},
                    {"dataset_id", dataset_id},
                    {"success_rate", success_rate},
                    {"num_samples", num_samples},
                    {"label_histogram", label_histogram}};
}

FoolingCount& FoolingCount::operator+=(const FoolingCount& other)
{
    fooled += other.fooled;
    total += other.total;
    if (histogram.size() < other.histogram.size()) histogram.resize(other.histogram.size(), 0);
    for (std::size_t i = 0; i < other.histogram.size(); ++i) histogram[i] += other.histogram[i];
    return *this;
}

FoolingCount count_fooled(const Target& clf, const Tensor& images, std::span<const int> clean_labels, const Tensor& v)
{
    require(static_cast<int>(clean_labels.size()) == images.shape().n, "clean label count mismatch");
    FoolingCount count;
    count.histogram.assign(clf.num_classes(), 0);
    for (int b = 0; b < images.shape().n; b += kChunk) {
        const int n = std::min(kChunk, images.shape().n - b);
        const auto perturbed = predict_label(clf, add_clamped(images.slice(b, n), v, clf.pixel_range()));
        for (int i = 0; i < n; ++i) {
            count.fooled += perturbed[i] != clean_labels[b + i] ? 1 : 0;
            ++count.histogram[perturbed[i]];
        }
        count.total += n;
    }
    return count;
}

EvalReport evaluate_perturbation(const Target& clf, const Dataset& d, const Perturbation& v,
                                 const std::string& source_id)
{
    require(d.size() > 0, "success rate over an empty dataset");
    const auto clean = predict_labels_chunked(clf, d.images);
    const auto count = count_fooled(clf, d.images, clean, v.values);
    EvalReport r;
    r.model_id = clf.model_id();
    r.source_id = source_id;
    r.dataset_id = d.id;
    r.success_rate = count.rate();
    r.num_samples = static_cast<int>(count.total);
    r.label_histogram.assign(count.histogram.begin(), count.histogram.end());
    return r;
}

double success_rate(const Target& clf, const Dataset& d, const Perturbation& v)
{
    return evaluate_perturbation(clf, d, v, "").success_rate;
}

double random_noise_baseline(const Target& clf, const Dataset& d, float xi, int trials, std::uint64_t seed)
{
    require(trials >= 1, "random_noise_baseline needs trials >= 1");
    require(d.size() > 0, "success rate over an empty dataset");
    const auto clean = predict_labels_chunked(clf, d.images);
    Rng rng(derive_seed(seed, "noise-baseline"));
    double sum = 0.0;
    for (int t = 0; t < trials; ++t) {
        Tensor noise(d.sample_shape());
        for (auto& e : noise.vec()) e = static_cast<float>(rng.uniform(-xi, xi));
        sum += count_fooled(clf, d.images, clean, noise).rate();
    }
    return sum / trials;
}

double generator_success_rate(const GeneratorModel& g, const Target& clf, const Dataset& d, int z_samples,
                              std::uint64_t seed)
{
    require(z_samples >= 1, "z_samples must be >= 1");
    require(d.size() > 0, "success rate over an empty dataset");
    Rng rng(derive_seed(seed, "eval-latents"));
    const auto uaps = generate_uaps(g, sample_latent(rng, z_samples, g.latent_dim()));
    const auto clean = predict_labels_chunked(clf, d.images);
    double sum = 0.0;
    for (const auto& v : uaps) sum += count_fooled(clf, d.images, clean, v.values).rate();
    return sum / z_samples;
}

// ---------------------------------------------------------------- transfer

std::string TransferMatrix::to_csv() const
{
    std::ostringstream os;
    os << "source";
    for (const auto& v : victim_models) os << "," << v;
    os << ",mean\n";
    char buf[32];
    for (std::size_t i = 0; i < source_models.size(); ++i) {
        os << source_models[i];
        for (double r : rates[i]) {
            std::snprintf(buf, sizeof(buf), ",%.4f", r);
            os << buf;
        }
        std::snprintf(buf, sizeof(buf), ",%.4f", mean_per_source[i]);
        os << buf << "\n";
    }
    return os.str();
}

TransferMatrix transfer_matrix(const std::vector<const GeneratorModel*>& generators,
                               const std::vector<std::string>& source_ids, const std::vector<const Target*>& victims,
                               const Dataset& d, int z_samples, std::uint64_t seed)
{
    require(!generators.empty() && !victims.empty(), "transfer matrix needs generators and victims");
    require(source_ids.size() == generators.size(), "one source id per generator");
    require(z_samples >= 1, "z_samples must be >= 1");
    for (const auto* v : victims) {
        require(v->input_shape() == victims.front()->input_shape(), "all victims must share input_shape");
    }
    TransferMatrix m;
    m.source_models = source_ids;
    for (const auto* v : victims) m.victim_models.push_back(v->model_id());
    std::vector<std::vector<int>> clean;
    for (const auto* v : victims) clean.push_back(predict_labels_chunked(*v, d.images));
    Rng rng(derive_seed(seed, "eval-latents"));
    const auto latents = sample_latent(rng, z_samples, generators.front()->latent_dim());
    for (const auto* g : generators) {
        const auto uaps = generate_uaps(*g, latents);
        std::vector<double> row;
        for (std::size_t j = 0; j < victims.size(); ++j) {
            double sum = 0.0;
            for (const auto& v : uaps) sum += count_fooled(*victims[j], d.images, clean[j], v.values).rate();
            row.push_back(sum / z_samples);
        }
        m.mean_per_source.push_back(std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(row.size()));
        m.rates.push_back(std::move(row));
    }
    return m;
}

// ---------------------------------------------------------------- diversity

int labels_for_coverage(std::span<const double> histogram, double coverage)
{
    require(coverage > 0.0 && coverage <= 1.0, "coverage must lie in (0, 1]");
    std::vector<double> sorted(histogram.begin(), histogram.end());
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    const double total = std::accumulate(sorted.begin(), sorted.end(), 0.0);
    require(total > 0.0, "empty label histogram");
    double cum = 0.0;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        cum += sorted[i];
        // Relative slack absorbs rounding in the running sum.
        if (cum >= coverage * total * (1.0 - 1e-12)) return static_cast<int>(i) + 1;
    }
    return static_cast<int>(sorted.size());
}

std::vector<double> mean_label_histogram(const Target& clf, const Dataset& d, const std::vector<Perturbation>& uaps)
{
    require(!uaps.empty(), "label diversity needs at least one UAP");
    require(d.size() > 0, "label diversity over an empty dataset");
    const auto clean = predict_labels_chunked(clf, d.images);
    std::vector<double> hist(clf.num_classes(), 0.0);
    for (const auto& v : uaps) {
        const auto count = count_fooled(clf, d.images, clean, v.values);
        for (std::size_t i = 0; i < hist.size(); ++i) hist[i] += static_cast<double>(count.histogram[i]);
    }
    for (auto& h : hist) h /= static_cast<double>(uaps.size());
    return hist;
}

int label_diversity(const Target& clf, const Dataset& d, const std::vector<Perturbation>& uaps, double coverage)
{
    require(coverage > 0.0 && coverage <= 1.0, "coverage must lie in (0, 1]");
    return labels_for_coverage(mean_label_histogram(clf, d, uaps), coverage);
}

// ---------------------------------------------------------------- interpolation

std::vector<InterpolationPoint> interpolate_eval(const GeneratorModel& g, const LatentVector& z1,
                                                 const LatentVector& z2, int steps, const Target& clf,
                                                 const Dataset& d, const fs::path& out_dir)
{
    require(steps >= 2, "interpolation needs steps >= 2");
    require(z1.values.size() == z2.values.size(), "interpolation endpoints differ in dimension");
    require(d.size() > 0, "success rate over an empty dataset");
    const auto clean = predict_labels_chunked(clf, d.images);
    std::vector<InterpolationPoint> points;
    std::ostringstream table;
    table << "index,alpha,success_rate\n";
    for (int i = 0; i < steps; ++i) {
        InterpolationPoint p;
        p.alpha = static_cast<double>(i) / (steps - 1);
        LatentVector z;
        if (i == 0) {
            z = z1;
        } else if (i == steps - 1) {
            z = z2;
        } else {
            z.values.resize(z1.values.size());
            for (std::size_t k = 0; k < z.values.size(); ++k) {
                z.values[k] = static_cast<float>((1.0 - p.alpha) * z1.values[k] + p.alpha * z2.values[k]);
            }
        }
        p.uap = generate_uap(g, z);
        p.success_rate = count_fooled(clf, d.images, clean, p.uap.values).rate();
        char row[96];
        std::snprintf(row, sizeof(row), "%d,%.6f,%.4f\n", i, p.alpha, p.success_rate);
        table << row;
        if (!out_dir.empty()) export_uap(p.uap, out_dir, "interp_" + std::to_string(i));
        points.push_back(std::move(p));
    }
    if (!out_dir.empty()) io::write_text(out_dir / "interpolation.csv", table.str());
    return points;
}

// ---------------------------------------------------------------- adversarial training

FinetuneResult adversarial_finetune(const ClassifierHandle& clf, const GeneratorModel& g, const Dataset& train_data,
                                    const Dataset& eval_data, int epochs, double mix, const FinetuneOptions& opts)
{
    require(mix > 0.0 && mix < 1.0, "mix must lie in (0, 1)");
    require(epochs >= 0, "epochs must be nonnegative");
    require(train_data.size() > 0, "finetuning needs training data");
    require(opts.batch_size >= 1, "batch_size must be >= 1");
    require(g.spec().output_shape == clf.input_shape(), "generator output shape differs from classifier input");

    nn::Network net = clf.network();
    Adam adam({.learning_rate = opts.learning_rate});
    auto params = net.parameters();
    Rng order_rng(derive_seed(opts.seed, "advft/order"));
    Rng z_rng(derive_seed(opts.seed, "advft/latent"));
    const PixelRange range = clf.pixel_range();
    const int n = train_data.size();
    std::vector<int> order(n);
    for (int epoch = 0; epoch < epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        for (int i = n - 1; i > 0; --i) std::swap(order[i], order[order_rng.below(static_cast<std::uint64_t>(i) + 1)]);
        for (int b = 0; b < n; b += opts.batch_size) {
            const int count = std::min(opts.batch_size, n - b);
            const std::span<const int> idx(order.data() + b, count);
            Tensor x = train_data.images.gather(idx);
            std::vector<int> y(count);
            for (int k = 0; k < count; ++k) y[k] = train_data.labels[idx[k]];
            const int adversarial = static_cast<int>(std::lround(mix * count));
            if (adversarial > 0) {
                const auto uaps = generate_uaps(g, sample_latent(z_rng, adversarial, g.latent_dim()));
                for (int k = 0; k < adversarial; ++k) {
                    auto s = x.sample(k);
                    for (std::size_t i = 0; i < s.size(); ++i) {
                        s[i] = std::clamp(s[i] + uaps[k].values[i], range.low, range.high);
                    }
                }
            }
            const nn::Trace trace = net.forward(x, nn::Mode::train);
            Tensor dlogits;
            const float loss = nn::cross_entropy(trace.output(), y, &dlogits);
            if (!std::isfinite(loss)) throw NumericalError("adversarial finetuning diverged");
            auto grads = net.zero_gradients();
            net.backward(trace, dlogits.reshaped(trace.output().shape()), &grads);
            std::vector<const Tensor*> gptrs;
            for (const auto& layer : grads) {
                for (const auto& t : layer) gptrs.push_back(&t);
            }
            adam.step(params, gptrs);
        }
    }
    ClassifierInfo info = clf.info();
    info.parent_model_id = clf.model_id();
    info.model_id = clf.model_id() + "-advft" + std::to_string(epochs);
    ClassifierHandle tuned(info, std::move(net));
    info.accuracy = accuracy(tuned, eval_data);
    FinetuneResult r{ClassifierHandle(info, tuned.network()), 0.0, 0.0};
    const std::uint64_t eval_seed = derive_seed(opts.seed, "advft/eval");
    r.sr_before = generator_success_rate(g, clf, eval_data, opts.eval_z_samples, eval_seed);
    r.sr_after = generator_success_rate(g, r.model, eval_data, opts.eval_z_samples, eval_seed);
    return r;
}

RetrainResult retrain_against(const ClassifierHandle& clf_new, const Dataset& eval_data, const RetrainOptions& opts,
                              const fs::path& out_dir)
{
    std::vector<int> classes(clf_new.num_classes());
    std::iota(classes.begin(), classes.end(), 0);
    RetrainResult r{build_impression_dataset(clf_new, opts.per_class, classes, opts.impression_config, opts.seed,
                                             out_dir.empty() ? fs::path() : out_dir / "impressions"),
                    GeneratorModel(), 0.0, io::Json()};
    r.generator = train_generator(clf_new, r.impressions, opts.train_config, default_generator_spec(clf_new),
                                  out_dir.empty() ? fs::path() : out_dir / "generator");
    r.recovered_success_rate = generator_success_rate(r.generator, clf_new, eval_data, opts.eval_z_samples,
                                                      derive_seed(opts.seed, "retrain/eval"));
    r.manifest = io::Json{{"finetuned_model_id", clf_new.model_id()},
                          {"parent_model_id", clf_new.info().parent_model_id},
                          {"impressions", r.impressions.size()},
                          {"impressions_converged", r.impressions.converged_count()},
                          {"generator_trained_against", r.generator.trained_against},
                          {"recovered_success_rate", r.recovered_success_rate}};
    if (!out_dir.empty()) io::write_json(out_dir / "retrain.json", r.manifest);
    return r;
}

} // namespace ciuap
