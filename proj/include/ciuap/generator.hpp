#pragma once

#include "ciuap/adam.hpp"
#include "ciuap/classifier.hpp"
#include "ciuap/impressions.hpp"
#include "ciuap/io.hpp"
#include "ciuap/nn.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace ciuap {

struct LatentVector {
    std::vector<float> values; // each component in [-1, 1]
};

// i.i.d. uniform components in [-1, 1].
std::vector<LatentVector> sample_latent(Rng& rng, int count, int latent_dim);
// Packs latents into an (n, latent_dim, 1, 1) tensor.
Tensor latent_batch(const std::vector<LatentVector>& z);

// Deconvolution stack: a projection stage (a deconvolution from the 1x1
// latent, realized as a dense layer) to (base_channels, h / 2^(stages-1),
// w / 2^(stages-1)), then stages-1 stride-2 deconvolutions that double the
// spatial size, halving channels down to `channels` of the output. Batch
// normalization and ReLU sit between stages; the last stage is followed by
// tanh and multiplication by xi.
struct GeneratorSpec {
    int latent_dim = 10;
    float xi = 10.0F;
    int stages = 5;
    int base_channels = 64;
    Shape output_shape{1, 3, 32, 32};

    void validate() const;
    io::Json to_json() const;
    static GeneratorSpec from_json(const io::Json& j);
};

struct Perturbation {
    Tensor values; // (1, c, h, w)
    float xi = 0.0F;
    LatentVector source_z;
};

enum class DistanceMetric { cosine, euclidean };
enum class PairingMode { per_impression_pair, all_pairs };

std::string to_string(DistanceMetric m);
std::string to_string(PairingMode m);
DistanceMetric parse_distance_metric(const std::string& s);
PairingMode parse_pairing_mode(const std::string& s);

struct TrainConfig {
    int batch_size = 32;
    double lambda = 1.0;
    DistanceMetric distance_metric = DistanceMetric::cosine;
    std::string embedding_layer = std::string(kSoftmaxLayer);
    PairingMode pairing_mode = PairingMode::per_impression_pair;
    int all_pairs_group = 4; // perturbations per mini-batch in all-pairs mode
    int epochs = 50;
    AdamSettings optimizer{.learning_rate = 2e-3};
    std::uint64_t seed = 0;
    int bn_calibration_samples = 256;

    void validate() const;
    io::Json to_json() const;
};

struct EpochLoss {
    int epoch = 0;
    double total = 0.0;
    double fooling = 0.0;
    double diversity = 0.0;
};

class GeneratorModel {
public:
    GeneratorModel() = default;
    // Freshly initialized generator.
    GeneratorModel(const GeneratorSpec& spec, std::uint64_t init_seed);

    const GeneratorSpec& spec() const { return spec_; }
    int latent_dim() const { return spec_.latent_dim; }
    float xi() const { return spec_.xi; }
    const nn::Network& network() const { return net_; }
    nn::Network& network() { return net_; }

    std::vector<std::string> trained_against;
    io::Json train_config; // echo of the TrainConfig used
    std::vector<EpochLoss> loss_history;

private:
    GeneratorSpec spec_;
    nn::Network net_;
};

// Deterministic eval-mode forward pass; |v| <= xi elementwise.
Perturbation generate_uap(const GeneratorModel& g, const LatentVector& z);
std::vector<Perturbation> generate_uaps(const GeneratorModel& g, const std::vector<LatentVector>& z);

// Mean over the batch of -log((1 - p_c(clamp(x + v)) + 1e-6) / (1 + 1e-6)) where c is the
// clean label predicted on x. v must have one sample per x, or exactly one
// (broadcast).
double fooling_loss(const Target& clf, const Tensor& x, const Tensor& v);

struct LossGradient {
    double loss = 0.0;
    Tensor grad_v; // same shape as v
};
LossGradient fooling_loss_with_grad(const Target& clf, const Tensor& x, const Tensor& v);

// -sum of pairwise embedding distances between perturbed copies of the same
// image. per_impression_pair: v has 2 * x.n samples and image k is paired
// with v[2k], v[2k+1]. all_pairs: every image is combined with every
// perturbation and all unordered pairs are counted once.
double diversity_loss(const Target& clf, const Tensor& x, const Tensor& v, const TrainConfig& cfg);
LossGradient diversity_loss_with_grad(const Target& clf, const Tensor& x, const Tensor& v, const TrainConfig& cfg);

double embedding_distance(std::span<const float> a, std::span<const float> b, DistanceMetric metric);

double total_loss(double fooling, double diversity, double lambda);

// Called after every epoch with the epoch index (1-based) and the current model.
using EpochObserver = std::function<void(int, const GeneratorModel&)>;

// Minimizes fooling + lambda * diversity over impression mini-batches with
// Adam. Batch-norm statistics are recalibrated after each epoch from a
// fixed set of latents, so generate_uap is a deterministic function of z.
// When out_dir is set, the checkpoint, manifest and loss table are
// rewritten there after every epoch; a NaN loss aborts with the last good
// checkpoint left in place.
GeneratorModel train_generator(const Target& target, const ImpressionDataset& impressions, const TrainConfig& cfg,
                               const GeneratorSpec& spec, const std::filesystem::path& out_dir = {},
                               const EpochObserver& observer = {});

// Default spec for a target's input shape.
GeneratorSpec default_generator_spec(const Target& target);

std::filesystem::path save_generator(const GeneratorModel& g, const std::filesystem::path& dir);
GeneratorModel load_generator(const std::filesystem::path& dir);

// Writes <stem>.pfm (raw float array) and <stem>.png (preview mapped from
// [-xi, xi] to [0, 255]).
void export_uap(const Perturbation& v, const std::filesystem::path& dir, const std::string& stem);

} // namespace ciuap
