#include "ciuap/impressions.hpp"

#include "ciuap/adam.hpp"
#include "ciuap/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

namespace ciuap {

namespace fs = std::filesystem;

void ImpressionConfig::validate() const
{
    require(learning_rate > 0.0, "impression learning_rate must be positive");
    require(max_steps >= 1, "impression max_steps must be >= 1");
    require(confidence_low > 0.0 && confidence_high < 1.0 && confidence_low <= confidence_high,
            "confidence range must satisfy 0 < low <= high < 1");
    require(rotation_min_degrees <= rotation_max_degrees, "rotation range is inverted");
    require(!scale_choices.empty(), "scale_choices must not be empty");
    for (double s : scale_choices) require(s > 0.0, "scale choices must be positive");
    require(jitter_amplitude >= 0.0 && noise_amplitude >= 0.0, "augmentation amplitudes must be nonnegative");
    require(crop_fraction > 0.0 && crop_fraction <= 1.0, "crop_fraction must lie in (0, 1]");
    require(init_low <= init_high, "init range is inverted");
}

io::Json ImpressionConfig::to_json() const
{
    return io::Json{{"learning_rate", learning_rate},
                    {"max_steps", max_steps},
                    {"confidence_range", {confidence_low, confidence_high}},
                    {"rotation_range_degrees", {rotation_min_degrees, rotation_max_degrees}},
                    {"scale_choices", scale_choices},
                    {"jitter_amplitude", jitter_amplitude},
                    {"crop_fraction", crop_fraction},
                    {"noise_amplitude", noise_amplitude},
                    {"init_range", {init_low, init_high}}};
}

ImpressionConfig identity_augmentation_config()
{
    ImpressionConfig cfg;
    cfg.rotation_min_degrees = 0.0;
    cfg.rotation_max_degrees = 0.0;
    cfg.scale_choices = {1.0};
    cfg.jitter_amplitude = 0.0;
    cfg.crop_fraction = 1.0;
    cfg.noise_amplitude = 0.0;
    return cfg;
}

// ---------------------------------------------------------------- augmentation

Augmentation Augmentation::sample(Shape shape, Rng& rng, const ImpressionConfig& cfg, PixelRange range)
{
    require(shape.n == 1, "augment works on a single image");
    require(shape.h * shape.w > 1, "augment rejects degenerate 1x1 images");
    cfg.validate();
    Augmentation a;
    a.shape_ = shape;
    a.range_ = range;
    a.rotation_ = rng.uniform(cfg.rotation_min_degrees, cfg.rotation_max_degrees);
    a.scale_ = cfg.scale_choices[rng.below(cfg.scale_choices.size())];
    const int crop_h = std::max(1, static_cast<int>(std::lround(cfg.crop_fraction * shape.h)));
    const int crop_w = std::max(1, static_cast<int>(std::lround(cfg.crop_fraction * shape.w)));
    const int off_y = static_cast<int>(rng.below(static_cast<std::uint64_t>(shape.h - crop_h) + 1));
    const int off_x = static_cast<int>(rng.below(static_cast<std::uint64_t>(shape.w - crop_w) + 1));
    a.jitter_.resize(shape.c);
    for (auto& j : a.jitter_) j = static_cast<float>(rng.uniform(-cfg.jitter_amplitude, cfg.jitter_amplitude));
    a.noise_.resize(shape.size());
    for (auto& v : a.noise_) v = static_cast<float>(rng.uniform(-cfg.noise_amplitude, cfg.noise_amplitude));

    // Inverse map from each output pixel to source coordinates: undo the
    // crop/resize, then the zoom, then the rotation (all about the centre).
    const double cy = (shape.h - 1) / 2.0;
    const double cx = (shape.w - 1) / 2.0;
    const double theta = a.rotation_ * std::numbers::pi / 180.0;
    const double cos_t = std::cos(theta);
    const double sin_t = std::sin(theta);
    a.taps_.resize(static_cast<std::size_t>(shape.h) * shape.w);
    for (int i = 0; i < shape.h; ++i) {
        for (int j = 0; j < shape.w; ++j) {
            const double y2 = off_y + (i + 0.5) * crop_h / shape.h - 0.5;
            const double x2 = off_x + (j + 0.5) * crop_w / shape.w - 0.5;
            const double dy = (y2 - cy) / a.scale_;
            const double dx = (x2 - cx) / a.scale_;
            double y0 = cy - sin_t * dx + cos_t * dy;
            double x0 = cx + cos_t * dx + sin_t * dy;
            y0 = std::clamp(y0, 0.0, static_cast<double>(shape.h - 1));
            x0 = std::clamp(x0, 0.0, static_cast<double>(shape.w - 1));
            const int yf = static_cast<int>(std::floor(y0));
            const int xf = static_cast<int>(std::floor(x0));
            const int yc = std::min(yf + 1, shape.h - 1);
            const int xc = std::min(xf + 1, shape.w - 1);
            const auto fy = static_cast<float>(y0 - yf);
            const auto fx = static_cast<float>(x0 - xf);
            Tap& t = a.taps_[static_cast<std::size_t>(i) * shape.w + j];
            t.index[0] = yf * shape.w + xf;
            t.index[1] = yf * shape.w + xc;
            t.index[2] = yc * shape.w + xf;
            t.index[3] = yc * shape.w + xc;
            t.weight[0] = (1.0F - fy) * (1.0F - fx);
            t.weight[1] = (1.0F - fy) * fx;
            t.weight[2] = fy * (1.0F - fx);
            t.weight[3] = fy * fx;
        }
    }
    return a;
}

Tensor Augmentation::unclamped(const Tensor& image) const
{
    require(image.shape() == shape_, "augmentation was sampled for shape " + shape_.str());
    Tensor out(shape_);
    const std::size_t plane = taps_.size();
    for (int c = 0; c < shape_.c; ++c) {
        const float* src = image.data() + c * plane;
        float* dst = out.data() + c * plane;
        for (std::size_t p = 0; p < plane; ++p) {
            const Tap& t = taps_[p];
            float v = 0.0F;
            for (int k = 0; k < 4; ++k) {
                if (t.weight[k] != 0.0F) v += t.weight[k] * src[t.index[k]];
            }
            dst[p] = v + jitter_[c] + noise_[c * plane + p];
        }
    }
    return out;
}

Tensor Augmentation::apply(const Tensor& image) const
{
    Tensor out = unclamped(image);
    for (auto& v : out.vec()) v = std::clamp(v, range_.low, range_.high);
    return out;
}

Tensor Augmentation::backward(const Tensor& image, const Tensor& grad_output) const
{
    const Tensor pre = unclamped(image);
    Tensor grad(shape_);
    const std::size_t plane = taps_.size();
    for (int c = 0; c < shape_.c; ++c) {
        float* dst = grad.data() + c * plane;
        for (std::size_t p = 0; p < plane; ++p) {
            const float v = pre[c * plane + p];
            if (v < range_.low || v > range_.high) continue;
            const float g = grad_output[c * plane + p];
            const Tap& t = taps_[p];
            for (int k = 0; k < 4; ++k) dst[t.index[k]] += t.weight[k] * g;
        }
    }
    return grad;
}

Tensor augment(const Tensor& image, Rng& rng, const ImpressionConfig& cfg, PixelRange range)
{
    return Augmentation::sample(image.shape(), rng, cfg, range).apply(image);
}

double sample_stop_confidence(Rng& rng, const ImpressionConfig& cfg)
{
    return rng.uniform(cfg.confidence_low, cfg.confidence_high);
}

// ---------------------------------------------------------------- synthesis

ClassImpressionRecord synth_impression(const Target& clf, int class_id, std::uint64_t seed,
                                       const ImpressionConfig& cfg, std::vector<float>* objective_trace)
{
    cfg.validate();
    require(class_id >= 0 && class_id < clf.num_classes(), "class_id out of range");
    const Shape shape = clf.input_shape();
    const PixelRange range = clf.pixel_range();
    Rng rng(seed);

    ClassImpressionRecord rec;
    rec.class_id = class_id;
    rec.seed = seed;
    rec.model_id = clf.model_id();
    rec.target_confidence = sample_stop_confidence(rng, cfg);

    Tensor x(shape);
    for (auto& v : x.vec()) {
        v = std::clamp(static_cast<float>(rng.uniform(cfg.init_low, cfg.init_high)), range.low, range.high);
    }
    Adam adam({.learning_rate = cfg.learning_rate});
    Tensor ascent(Shape{1, clf.num_classes(), 1, 1});
    // Adam descends, so feed it the gradient of -f_c.
    ascent[static_cast<std::size_t>(class_id)] = -1.0F;

    for (int step = 1; step <= cfg.max_steps; ++step) {
        const Augmentation aug = Augmentation::sample(shape, rng, cfg, range);
        const Tensor xa = aug.apply(x);
        const TapResult r = clf.forward(xa);
        const Tensor grad = aug.backward(x, clf.backward(r, ascent));
        if (!grad.all_finite()) {
            throw NumericalError("impression synthesis for class " + std::to_string(class_id) +
                                 " produced a non-finite gradient at step " + std::to_string(step));
        }
        adam.step(x, grad);
        for (auto& v : x.vec()) v = std::clamp(v, range.low, range.high);

        const Tensor logits = clf.logits(x);
        const double conf = nn::softmax(logits)[static_cast<std::size_t>(class_id)];
        if (!std::isfinite(conf)) {
            throw NumericalError("impression synthesis for class " + std::to_string(class_id) +
                                 " produced a non-finite confidence at step " + std::to_string(step));
        }
        if (objective_trace != nullptr && step % 10 == 0) {
            objective_trace->push_back(logits[static_cast<std::size_t>(class_id)]);
        }
        rec.steps_used = step;
        rec.achieved_confidence = conf;
        if (conf >= rec.target_confidence) {
            rec.converged = true;
            break;
        }
    }
    rec.image = std::move(x);
    return rec;
}

// ---------------------------------------------------------------- datasets

int ImpressionDataset::converged_count() const
{
    return static_cast<int>(std::count_if(records.begin(), records.end(), [](const auto& r) { return r.converged; }));
}

Tensor ImpressionDataset::images() const
{
    std::vector<Tensor> parts;
    parts.reserve(records.size());
    for (const auto& r : records) parts.push_back(r.image);
    return concat_batch(parts);
}

ImpressionDataset build_impression_dataset(const Target& clf, int per_class, const std::vector<int>& class_ids,
                                           const ImpressionConfig& cfg, std::uint64_t seed, const fs::path& out_dir)
{
    require(per_class >= 1, "per_class must be >= 1");
    require(!class_ids.empty(), "class_ids must not be empty");
    cfg.validate();
    ImpressionDataset ds;
    ds.model_id = clf.model_id();
    ds.member_ids = clf.member_ids();
    ds.per_class = per_class;
    ds.class_ids = class_ids;
    ds.seed = seed;
    ds.config = cfg;
    try {
        std::uint64_t index = 0;
        for (int c : class_ids) {
            for (int k = 0; k < per_class; ++k, ++index) {
                ds.records.push_back(synth_impression(clf, c, derive_seed(seed, "impression", index), cfg));
            }
        }
    } catch (const Error&) {
        ds.complete = false;
        if (!out_dir.empty()) save_impression_dataset(ds, out_dir);
        throw;
    }
    ds.complete = true;
    if (!out_dir.empty()) save_impression_dataset(ds, out_dir);
    return ds;
}

namespace {

std::string fmt_real(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

const char* kManifestHeader =
    "index,class_id,target_confidence,achieved_confidence,steps_used,seed,model_id,converged,file,sha256";

std::vector<std::string> split_csv(const std::string& line)
{
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
}

} // namespace

fs::path save_impression_dataset(const ImpressionDataset& ds, const fs::path& dir)
{
    fs::create_directories(dir / "images");
    std::ostringstream csv;
    csv << kManifestHeader << "\n";
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
        const auto& r = ds.records[i];
        char name[32];
        std::snprintf(name, sizeof(name), "ci_%05zu.pfm", i);
        const fs::path rel = fs::path("images") / name;
        io::write_pfm(dir / rel, r.image);
        csv << i << "," << r.class_id << "," << fmt_real(r.target_confidence) << ","
            << fmt_real(r.achieved_confidence) << "," << r.steps_used << "," << r.seed << "," << r.model_id << ","
            << (r.converged ? 1 : 0) << "," << rel.generic_string() << "," << io::sha256_file(dir / rel) << "\n";
    }
    io::write_text(dir / "manifest.csv", csv.str());
    io::Json j;
    j["model_id"] = ds.model_id;
    j["member_ids"] = ds.member_ids;
    j["per_class"] = ds.per_class;
    j["class_ids"] = ds.class_ids;
    j["seed"] = ds.seed;
    j["complete"] = ds.complete;
    j["count"] = ds.records.size();
    j["converged"] = ds.converged_count();
    j["config"] = ds.config.to_json();
    j["manifest_sha256"] = io::sha256_file(dir / "manifest.csv");
    io::write_json(dir / "dataset.json", j);
    return dir / "dataset.json";
}

ImpressionDataset load_impression_dataset(const fs::path& dir)
{
    const auto meta_path = dir / "dataset.json";
    if (!fs::exists(meta_path)) throw DependencyError("missing impression dataset " + meta_path.string());
    const auto j = io::read_json(meta_path);
    io::verify_checksum(dir / "manifest.csv", j.at("manifest_sha256").get<std::string>());
    ImpressionDataset ds;
    ds.model_id = j.at("model_id").get<std::string>();
    ds.member_ids = j.at("member_ids").get<std::vector<std::string>>();
    ds.per_class = j.at("per_class").get<int>();
    ds.class_ids = j.at("class_ids").get<std::vector<int>>();
    ds.seed = j.at("seed").get<std::uint64_t>();
    ds.complete = j.at("complete").get<bool>();
    const auto& c = j.at("config");
    ds.config.learning_rate = c.at("learning_rate").get<double>();
    ds.config.max_steps = c.at("max_steps").get<int>();
    ds.config.confidence_low = c.at("confidence_range")[0].get<double>();
    ds.config.confidence_high = c.at("confidence_range")[1].get<double>();
    ds.config.rotation_min_degrees = c.at("rotation_range_degrees")[0].get<double>();
    ds.config.rotation_max_degrees = c.at("rotation_range_degrees")[1].get<double>();
    ds.config.scale_choices = c.at("scale_choices").get<std::vector<double>>();
    ds.config.jitter_amplitude = c.at("jitter_amplitude").get<double>();
    ds.config.crop_fraction = c.at("crop_fraction").get<double>();
    ds.config.noise_amplitude = c.at("noise_amplitude").get<double>();
    ds.config.init_low = c.at("init_range")[0].get<double>();
    ds.config.init_high = c.at("init_range")[1].get<double>();

    std::istringstream csv(io::read_text(dir / "manifest.csv"));
    std::string line;
    std::getline(csv, line);
    if (line != kManifestHeader) throw DependencyError("unexpected impression manifest header in " + dir.string());
    while (std::getline(csv, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv(line);
        if (cells.size() != 10) throw DependencyError("malformed impression manifest row: " + line);
        ClassImpressionRecord r;
        r.class_id = std::stoi(cells[1]);
        r.target_confidence = std::stod(cells[2]);
        r.achieved_confidence = std::stod(cells[3]);
        r.steps_used = std::stoi(cells[4]);
        r.seed = std::stoull(cells[5]);
        r.model_id = cells[6];
        r.converged = cells[7] == "1";
        io::verify_checksum(dir / cells[8], cells[9]);
        r.image = io::read_pfm(dir / cells[8]);
        ds.records.push_back(std::move(r));
    }
    if (ds.records.size() != j.at("count").get<std::size_t>()) {
        throw DependencyError("impression manifest row count differs from dataset.json in " + dir.string());
    }
    return ds;
}

} // namespace ciuap
