#pragma once

#include "ciuap/classifier.hpp"
#include "ciuap/io.hpp"
#include "ciuap/random.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ciuap {

struct ImpressionConfig {
    double learning_rate = 0.1;
    int max_steps = 2000;
    double confidence_low = 0.55;
    double confidence_high = 0.99;
    double rotation_min_degrees = -5.0;
    double rotation_max_degrees = 5.0;
    std::vector<double> scale_choices = {0.95, 0.975, 1.0, 1.025};
    double jitter_amplitude = 5.0; // per-channel offset, pixel units
    double crop_fraction = 0.9;
    double noise_amplitude = 10.0; // uniform in [-a, a], pixel units
    double init_low = 0.0;
    double init_high = 255.0;

    // Throws ContractViolation on an invalid configuration.
    void validate() const;
    io::Json to_json() const;
};

// Configuration under which augment() is the identity map.
ImpressionConfig identity_augmentation_config();

// One draw of the augmentation chain rotate -> scale -> crop/resize ->
// jitter -> noise. The spatial part is a fixed bilinear resampling, so the
// whole chain is differentiable and its adjoint is exact.
class Augmentation {
public:
    static Augmentation sample(Shape shape, Rng& rng, const ImpressionConfig& cfg, PixelRange range);

    // Applies to a (1, c, h, w) image and clamps to the pixel range.
    Tensor apply(const Tensor& image) const;
    // Adjoint of apply() at `image`: maps d/d(output) to d/d(image). Pixels
    // clamped in the output pass no gradient.
    Tensor backward(const Tensor& image, const Tensor& grad_output) const;

    double rotation_degrees() const { return rotation_; }
    double scale() const { return scale_; }

private:
    struct Tap {
        int index[4];
        float weight[4];
    };
    Tensor unclamped(const Tensor& image) const;

    Shape shape_;
    PixelRange range_;
    double rotation_ = 0.0;
    double scale_ = 1.0;
    std::vector<Tap> taps_; // one per output pixel in a channel plane
    std::vector<float> jitter_;
    std::vector<float> noise_;
};

// Convenience: sample one augmentation and apply it.
Tensor augment(const Tensor& image, Rng& rng, const ImpressionConfig& cfg, PixelRange range = {});

double sample_stop_confidence(Rng& rng, const ImpressionConfig& cfg = {});

struct ClassImpressionRecord {
    Tensor image; // (1, c, h, w), raw pixels
    int class_id = 0;
    double target_confidence = 0.0;
    double achieved_confidence = 0.0;
    int steps_used = 0;
    std::uint64_t seed = 0;
    std::string model_id;
    bool converged = false;
};

// Maximizes the class's pre-softmax activation on augmented copies of an
// image drawn uniformly from the init range, with Adam in raw pixel space.
// Stops once the clean image's softmax confidence reaches a target drawn by
// sample_stop_confidence, or after max_steps (record flagged unconverged).
// When objective_trace is given, the clean pre-softmax activation is
// appended every 10 steps.
ClassImpressionRecord synth_impression(const Target& clf, int class_id, std::uint64_t seed,
                                       const ImpressionConfig& cfg = {},
                                       std::vector<float>* objective_trace = nullptr);

struct ImpressionDataset {
    std::string model_id;
    std::vector<std::string> member_ids;
    int per_class = 0;
    std::vector<int> class_ids;
    std::uint64_t seed = 0;
    bool complete = false;
    ImpressionConfig config;
    std::vector<ClassImpressionRecord> records;

    int size() const { return static_cast<int>(records.size()); }
    int converged_count() const;
    // All record images as one (n, c, h, w) batch.
    Tensor images() const;
};

// Synthesizes per_class records for each listed class with distinct derived
// seeds. When out_dir is non-empty the dataset is persisted there; if a
// synthesis error aborts the run, the records finished so far are persisted
// with complete = false before the error propagates.
ImpressionDataset build_impression_dataset(const Target& clf, int per_class, const std::vector<int>& class_ids,
                                           const ImpressionConfig& cfg, std::uint64_t seed,
                                           const std::filesystem::path& out_dir = {});

// On-disk layout: images/ci_XXXXX.pfm (lossless float32), manifest.csv,
// dataset.json. Returns the dataset.json path.
std::filesystem::path save_impression_dataset(const ImpressionDataset& ds, const std::filesystem::path& dir);
// Validates every image checksum listed in the manifest.
ImpressionDataset load_impression_dataset(const std::filesystem::path& dir);

} // namespace ciuap
