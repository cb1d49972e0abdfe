#pragma once

#include "ciuap/random.hpp"
#include "ciuap/tensor.hpp"

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

// Minimal layer-based network engine with explicit reverse-mode gradients.
// Forward passes are const and write per-call state into a Trace, so a
// network can be shared read-only between callers.
namespace ciuap::nn {

enum class Mode { eval, train };

struct LayerCache {
    std::vector<float> values;
    std::vector<int> indices;
};

class Layer {
public:
    explicit Layer(std::string name) : name_(std::move(name)) {}
    virtual ~Layer() = default;

    virtual std::string kind() const = 0;
    virtual std::unique_ptr<Layer> clone() const = 0;
    virtual Shape output_shape(const Shape& in) const = 0;
    virtual Tensor forward(const Tensor& x, LayerCache& cache, Mode mode) const = 0;
    // Returns dL/dx. Parameter gradients are accumulated into dparams when it
    // is non-empty (one entry per parameter tensor).
    virtual Tensor backward(const Tensor& x, const Tensor& y, const LayerCache& cache, const Tensor& dy,
                            std::span<Tensor> dparams) const = 0;
    virtual void reset_parameters(Rng&) {}

    const std::string& name() const { return name_; }
    std::vector<Tensor>& params() { return params_; }
    const std::vector<Tensor>& params() const { return params_; }
    // Non-trainable state that is still serialized (running statistics, constants).
    std::vector<Tensor>& buffers() { return buffers_; }
    const std::vector<Tensor>& buffers() const { return buffers_; }

protected:
    std::string name_;
    std::vector<Tensor> params_;
    std::vector<Tensor> buffers_;
};

// Per-channel affine input normalization: (x - mean) / stddev.
class Normalize final : public Layer {
public:
    Normalize(std::string name, std::vector<float> mean, std::vector<float> stddev);
    std::string kind() const override { return "normalize"; }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<Normalize>(*this); }
    Shape output_shape(const Shape& in) const override { return in; }
    Tensor forward(const Tensor& x, LayerCache& cache, Mode mode) const override;
    Tensor backward(const Tensor& x, const Tensor& y, const LayerCache& cache, const Tensor& dy,
                    std::span<Tensor> dparams) const override;
};

class Conv2d final : public Layer {
public:
    Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride, int pad);
    std::string kind() const override { return "conv2d"; }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2d>(*this); }
    Shape output_shape(const Shape& in) const override;
    Tensor forward(const Tensor& x, LayerCache& cache, Mode mode) const override;
    Tensor backward(const Tensor& x, const Tensor& y, const LayerCache& cache, const Tensor& dy,
                    std::span<Tensor> dparams) const override;
    void reset_parameters(Rng& rng) override;

private:
    int in_, out_, kernel_, stride_, pad_;
};

// Transposed convolution (the adjoint of Conv2d with the same geometry).
class ConvTranspose2d final : public Layer {
public:
    ConvTranspose2d(std::string name, int in_channels, int out_channels, int kernel, int stride, int pad);
    std::string kind() const override { return "deconv2d"; }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<ConvTranspose2d>(*this); }
    Shape output_shape(const Shape& in) const override;
    Tensor forward(const Tensor& x, LayerCache& cache, Mode mode) const override;
    Tensor backward(const Tensor& x, const Tensor& y, const LayerCache& cache, const Tensor& dy,
                    std::span<Tensor> dparams) const override;
    void reset_parameters(Rng& rng) override;

private:
    int in_, out_, kernel_, stride_, pad_;
};

// Fully connected layer over the flattened sample; output shape (n, out, 1, 1).
class Linear final : public Layer {
public:
    Linear(std::string name, int in_features, int out_features, bool bias = true);
    std::string kind() const override { return "linear"; }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<Linear>(*this); }
    Shape output_shape(const Shape& in) const override;
    Tensor forward(const Tensor& x, LayerCache& cache, Mode mode) const override;
    Tensor backward(const Tensor& x, const Tensor& y, const LayerCache& cache, const Tensor& dy,
                    std::span<Tensor> dparams) const override;
    void reset_parameters(Rng& rng) override;
    bool has_bias() const { return bias_; }

private:
    int in_, out_;
    bool bias_;
};

class Relu final : public Layer {
public:
    using Layer::Layer;
    std::string kind() const override { return "relu"; }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<Relu>(*this); }
    Shape output_shape(const Shape& in) const override { return in; }
    Tensor forward(const Tensor& x, LayerCache& cache, Mode mode) const override;
    Tensor backward(const Tensor& x, const Tensor& y, const LayerCache& cache, const Tensor& dy,
                    std::span<Tensor> dparams) const override;
};

class MaxPool2 final : public Layer {
public:
    using Layer::Layer;
    std::string kind() const override { return "maxpool2"; }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<MaxPool2>(*this); }
    Shape output_shape(const Shape& in) const override { return {in.n, in.c, in.h / 2, in.w / 2}; }
    Tensor forward(const Tensor& x, LayerCache& cache, Mode mode) const override;
    Tensor backward(const Tensor& x, const Tensor& y, const LayerCache& cache, const Tensor& dy,
                    std::span<Tensor> dparams) const override;
};

class GlobalAvgPool final : public Layer {
public:
    using Layer::Layer;
    std::string kind() const override { return "gap"; }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<GlobalAvgPool>(*this); }
    Shape output_shape(const Shape& in) const override { return {in.n, in.c, 1, 1}; }
    Tensor forward(const Tensor& x, LayerCache& cache, Mode mode) const override;
    Tensor backward(const Tensor& x, const Tensor& y, const LayerCache& cache, const Tensor& dy,
                    std::span<Tensor> dparams) const override;
};

class Reshape final : public Layer {
public:
    Reshape(std::string name, int c, int h, int w) : Layer(std::move(name)), c_(c), h_(h), w_(w) {}
    std::string kind() const override { return "reshape"; }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<Reshape>(*this); }
    Shape output_shape(const Shape& in) const override { return {in.n, c_, h_, w_}; }
    Tensor forward(const Tensor& x, LayerCache& cache, Mode mode) const override;
    Tensor backward(const Tensor& x, const Tensor& y, const LayerCache& cache, const Tensor& dy,
                    std::span<Tensor> dparams) const override;

private:
    int c_, h_, w_;
};

// Batch normalization over (n, h, w) per channel. Train mode normalizes with
// batch statistics and records them in the cache; eval mode uses the running
// statistics held in buffers() = {mean, var}.
class BatchNorm2d final : public Layer {
public:
    BatchNorm2d(std::string name, int channels, float eps = 1e-5F);
    std::string kind() const override { return "batchnorm"; }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<BatchNorm2d>(*this); }
    Shape output_shape(const Shape& in) const override { return in; }
    Tensor forward(const Tensor& x, LayerCache& cache, Mode mode) const override;
    Tensor backward(const Tensor& x, const Tensor& y, const LayerCache& cache, const Tensor& dy,
                    std::span<Tensor> dparams) const override;
    void reset_parameters(Rng& rng) override;
    int channels() const { return channels_; }
    // Batch mean and biased variance recorded by a train-mode forward.
    static std::pair<std::vector<float>, std::vector<float>> batch_stats(const LayerCache& cache, int channels);

private:
    int channels_;
    float eps_;
};

// y = scale * tanh(x). Bounds every output to [-scale, scale].
class TanhScale final : public Layer {
public:
    TanhScale(std::string name, float scale);
    std::string kind() const override { return "tanh_scale"; }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<TanhScale>(*this); }
    Shape output_shape(const Shape& in) const override { return in; }
    Tensor forward(const Tensor& x, LayerCache& cache, Mode mode) const override;
    Tensor backward(const Tensor& x, const Tensor& y, const LayerCache& cache, const Tensor& dy,
                    std::span<Tensor> dparams) const override;
    float scale() const { return buffers_[0][0]; }
};

// Parameter gradients, one vector of tensors per layer.
using Gradients = std::vector<std::vector<Tensor>>;

struct Trace {
    Mode mode = Mode::eval;
    std::vector<Tensor> activations; // activations[0] is the input; [i+1] is layer i's output
    std::vector<LayerCache> caches;

    const Tensor& output() const { return activations.back(); }
};

class Network {
public:
    Network() = default;
    Network(const Network& other);
    Network& operator=(const Network& other);
    Network(Network&&) noexcept = default;
    Network& operator=(Network&&) noexcept = default;

    template <typename L, typename... Args>
    L& add(Args&&... args)
    {
        auto layer = std::make_unique<L>(std::forward<Args>(args)...);
        L& ref = *layer;
        layers_.push_back(std::move(layer));
        return ref;
    }

    void initialize(Rng& rng);

    std::size_t num_layers() const { return layers_.size(); }
    const Layer& layer(std::size_t i) const { return *layers_[i]; }
    Layer& layer(std::size_t i) { return *layers_[i]; }
    // Index of the named layer, or -1.
    int find(std::string_view name) const;
    std::vector<std::string> layer_names() const;

    Shape output_shape(const Shape& in) const;

    // Runs layers [0, stop] inclusive (all layers when stop < 0).
    Trace forward(const Tensor& x, Mode mode = Mode::eval, int stop = -1) const;
    Tensor infer(const Tensor& x) const;

    // Backpropagates dy, the gradient w.r.t. the output of layer `from`
    // (the last traced layer when from < 0), through layers from..to and
    // returns the gradient w.r.t. the input of layer `to`.
    Tensor backward(const Trace& trace, const Tensor& dy, Gradients* grads = nullptr, int from = -1,
                    int to = 0) const;

    Gradients zero_gradients() const;
    std::vector<Tensor*> parameters();
    std::size_t parameter_count() const;

    // Replaces BatchNorm running statistics with the statistics recorded in
    // a train-mode trace.
    void set_batchnorm_stats(const Trace& trace);

    void save(const std::filesystem::path& path) const;
    // Loads parameters into an already constructed network of the same architecture.
    void load(const std::filesystem::path& path);
    std::vector<char> serialize() const;
    void deserialize(const std::vector<char>& bytes);

private:
    std::vector<std::unique_ptr<Layer>> layers_;
};

// Softmax over the channel axis of an (n, k, 1, 1) tensor, stabilized by the row max.
Tensor softmax(const Tensor& logits);
// Backprop through softmax: given p and dL/dp returns dL/dlogits.
Tensor softmax_backward(const Tensor& probs, const Tensor& dprobs);
// Lowest-index argmax per row.
std::vector<int> argmax_rows(const Tensor& t);

// Mean cross-entropy; writes dL/dlogits when grad is non-null.
float cross_entropy(const Tensor& logits, std::span<const int> labels, Tensor* grad, float smoothing = 0.0F);

} // namespace ciuap::nn
