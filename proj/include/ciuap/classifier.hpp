#pragma once

#include "ciuap/datasets.hpp"
#include "ciuap/nn.hpp"

#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace ciuap {

// Name of the default embedding tap: the softmax output.
inline constexpr std::string_view kSoftmaxLayer = "softmax";

// Result of a differentiable forward pass through a frozen target.
struct TapResult {
    Tensor logits;                 // (n, num_classes, 1, 1)
    Tensor embedding;              // (n, features, 1, 1) for intermediate layers; empty for "softmax"
    std::vector<nn::Trace> traces; // one per underlying network
    int embedding_index = -1;
};

// A frozen, differentiable classifier working in raw pixel space. Both
// single classifiers and ensembles implement it, so attack code is agnostic
// to which one it drives.
class Target {
public:
    virtual ~Target() = default;

    virtual std::string model_id() const = 0;
    virtual Shape input_shape() const = 0; // (1, c, h, w)
    virtual int num_classes() const = 0;
    virtual PixelRange pixel_range() const = 0;
    virtual std::vector<std::string> embedding_layer_ids() const = 0;
    virtual std::vector<std::string> member_ids() const { return {model_id()}; }

    virtual TapResult forward(const Tensor& batch, std::string_view embedding_layer = kSoftmaxLayer) const = 0;
    // d(loss)/d(batch) given d(loss)/d(logits) and, for intermediate
    // embedding taps, d(loss)/d(embedding).
    virtual Tensor backward(const TapResult& r, const Tensor& dlogits, const Tensor* dembedding = nullptr) const = 0;
    virtual Tensor logits(const Tensor& batch) const = 0;

    // Throws ContractViolation unless the batch matches input_shape and lies within the pixel range.
    void check_batch(const Tensor& batch) const;
};

struct ClassifierInfo {
    std::string model_id;
    std::string arch;
    std::string dataset_id;
    std::uint64_t seed = 0;
    double accuracy = 0.0;
    Shape input_shape; // (1, c, h, w)
    int num_classes = 0;
    PixelRange pixel_range;
    std::vector<float> norm_mean;
    std::vector<float> norm_std;
    std::vector<std::string> embedding_layer_ids;
    std::string parent_model_id; // set for finetuned copies
};

// A frozen trained classifier. Immutable: every operation that would change
// parameters returns a new handle.
class ClassifierHandle final : public Target {
public:
    ClassifierHandle(ClassifierInfo info, nn::Network network);

    std::string model_id() const override { return info_.model_id; }
    Shape input_shape() const override { return info_.input_shape; }
    int num_classes() const override { return info_.num_classes; }
    PixelRange pixel_range() const override { return info_.pixel_range; }
    std::vector<std::string> embedding_layer_ids() const override { return info_.embedding_layer_ids; }
    bool frozen() const { return true; }

    TapResult forward(const Tensor& batch, std::string_view embedding_layer = kSoftmaxLayer) const override;
    Tensor backward(const TapResult& r, const Tensor& dlogits, const Tensor* dembedding = nullptr) const override;
    Tensor logits(const Tensor& batch) const override;

    const ClassifierInfo& info() const { return info_; }
    const nn::Network& network() const { return *network_; }

private:
    ClassifierInfo info_;
    std::shared_ptr<const nn::Network> network_;
};

// Mean of the members' pre-softmax outputs. Only the softmax embedding tap
// is available, since intermediate layers differ between members.
class EnsembleHandle final : public Target {
public:
    explicit EnsembleHandle(std::vector<ClassifierHandle> members);

    std::string model_id() const override;
    Shape input_shape() const override { return members_.front().input_shape(); }
    int num_classes() const override { return members_.front().num_classes(); }
    PixelRange pixel_range() const override { return members_.front().pixel_range(); }
    std::vector<std::string> embedding_layer_ids() const override { return {}; }
    std::vector<std::string> member_ids() const override;

    TapResult forward(const Tensor& batch, std::string_view embedding_layer = kSoftmaxLayer) const override;
    Tensor backward(const TapResult& r, const Tensor& dlogits, const Tensor* dembedding = nullptr) const override;
    Tensor logits(const Tensor& batch) const override;

    const std::vector<ClassifierHandle>& members() const { return members_; }

private:
    std::vector<ClassifierHandle> members_;
};

// Layer taps.
Tensor tap_presoftmax(const Target& clf, const Tensor& batch);
Tensor tap_softmax(const Target& clf, const Tensor& batch);
Tensor tap_embedding(const Target& clf, const Tensor& batch, std::string_view layer_id = kSoftmaxLayer);
Tensor ensemble_presoftmax(const EnsembleHandle& ens, const Tensor& batch);
// Argmax of the softmax tap per sample, lowest index on ties.
std::vector<int> predict_label(const Target& clf, const Tensor& batch);
// Same, evaluated in chunks to bound memory on large datasets.
std::vector<int> predict_labels_chunked(const Target& clf, const Tensor& images, int chunk = 256);

// Registered architectures: "linear", "cnn-3layer", "cnn-5layer", "cnn-allconv".
std::vector<std::string> architecture_ids();
// Builds an untrained network (including its input normalization layer).
nn::Network build_architecture(const std::string& arch, Shape input_shape, int num_classes,
                               const std::vector<float>& norm_mean, const std::vector<float>& norm_std,
                               std::vector<std::string>* embedding_layer_ids = nullptr);

struct ClassifierTrainOptions {
    // Zero selects the architecture's default.
    int epochs = 0;
    int batch_size = 64;
    double learning_rate = 0.0;
    double label_smoothing = 0.1;
};

ClassifierHandle train_classifier(const std::string& dataset_id, const std::string& arch, std::uint64_t seed,
                                  const ClassifierTrainOptions& opts = {});
ClassifierHandle train_classifier(const DatasetSplits& data, const std::string& arch, std::uint64_t seed,
                                  const ClassifierTrainOptions& opts = {});

double accuracy(const Target& clf, const Dataset& d);

// The hand-set two-class linear model over 2-pixel inputs: logits
// (x0 - x1, x1 - x0), no bias, identity normalization.
ClassifierHandle make_toy_linear_classifier();

// Registry persistence: <dir>/<model_id>.params and <dir>/<model_id>.json.
std::filesystem::path save_classifier(const ClassifierHandle& clf, const std::filesystem::path& dir);
ClassifierHandle load_classifier(const std::filesystem::path& dir, const std::string& model_id);
bool classifier_exists(const std::filesystem::path& dir, const std::string& model_id);
std::string default_model_id(const std::string& dataset_id, const std::string& arch, std::uint64_t seed);

} // namespace ciuap
