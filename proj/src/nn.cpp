#include "ciuap/nn.hpp"

#include "ciuap/errors.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace ciuap::nn {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

struct ConvGeometry {
    int channels, height, width, kernel, stride, pad, out_h, out_w;

    int patch() const { return channels * kernel * kernel; }
    int positions() const { return out_h * out_w; }
};

// cols[(c, ki, kj), (oh, ow)] = img[c, oh*s - p + ki, ow*s - p + kj], zero outside.
void im2col(const float* img, const ConvGeometry& g, float* cols)
{
    const int positions = g.positions();
    for (int c = 0; c < g.channels; ++c) {
        for (int ki = 0; ki < g.kernel; ++ki) {
            for (int kj = 0; kj < g.kernel; ++kj) {
                float* row = cols + static_cast<std::size_t>((c * g.kernel + ki) * g.kernel + kj) * positions;
                for (int oh = 0; oh < g.out_h; ++oh) {
                    const int ih = oh * g.stride - g.pad + ki;
                    float* dst = row + oh * g.out_w;
                    if (ih < 0 || ih >= g.height) {
                        std::fill_n(dst, g.out_w, 0.0F);
                        continue;
                    }
                    const float* src = img + (static_cast<std::size_t>(c) * g.height + ih) * g.width;
                    for (int ow = 0; ow < g.out_w; ++ow) {
                        const int iw = ow * g.stride - g.pad + kj;
                        dst[ow] = (iw >= 0 && iw < g.width) ? src[iw] : 0.0F;
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: accumulates columns back into the image.
void col2im(const float* cols, const ConvGeometry& g, float* img)
{
    const int positions = g.positions();
    for (int c = 0; c < g.channels; ++c) {
        for (int ki = 0; ki < g.kernel; ++ki) {
            for (int kj = 0; kj < g.kernel; ++kj) {
                const float* row =
                    cols + static_cast<std::size_t>((c * g.kernel + ki) * g.kernel + kj) * positions;
                for (int oh = 0; oh < g.out_h; ++oh) {
                    const int ih = oh * g.stride - g.pad + ki;
                    if (ih < 0 || ih >= g.height) continue;
                    float* dst = img + (static_cast<std::size_t>(c) * g.height + ih) * g.width;
                    const float* src = row + oh * g.out_w;
                    for (int ow = 0; ow < g.out_w; ++ow) {
                        const int iw = ow * g.stride - g.pad + kj;
                        if (iw >= 0 && iw < g.width) dst[iw] += src[ow];
                    }
                }
            }
        }
    }
}

void fill_normal(Tensor& t, Rng& rng, double stddev)
{
    for (auto& v : t.vec()) v = static_cast<float>(rng.normal() * stddev);
}

void check_input(const Layer& layer, const Shape& got, int channels)
{
    if (got.c != channels) {
        throw ContractViolation("layer '" + layer.name() + "' expects " + std::to_string(channels) +
                                " channels, got shape " + got.str());
    }
}

} // namespace

// ---------------------------------------------------------------- Normalize

Normalize::Normalize(std::string name, std::vector<float> mean, std::vector<float> stddev) : Layer(std::move(name))
{
    require(mean.size() == stddev.size() && !mean.empty(), "normalize: mean/stddev size mismatch");
    for (float s : stddev) require(s > 0.0F, "normalize: stddev must be positive");
    const int c = static_cast<int>(mean.size());
    buffers_.emplace_back(Shape{1, c, 1, 1}, std::move(mean));
    buffers_.emplace_back(Shape{1, c, 1, 1}, std::move(stddev));
}

Tensor Normalize::forward(const Tensor& x, LayerCache&, Mode) const
{
    const auto& s = x.shape();
    check_input(*this, s, buffers_[0].shape().c);
    Tensor y(s);
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            const float m = buffers_[0][c];
            const float inv = 1.0F / buffers_[1][c];
            const std::size_t off = (static_cast<std::size_t>(n) * s.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) y[off + i] = (x[off + i] - m) * inv;
        }
    }
    return y;
}

Tensor Normalize::backward(const Tensor& x, const Tensor&, const LayerCache&, const Tensor& dy,
                           std::span<Tensor>) const
{
    const auto& s = x.shape();
    Tensor dx(s);
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            const float inv = 1.0F / buffers_[1][c];
            const std::size_t off = (static_cast<std::size_t>(n) * s.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) dx[off + i] = dy[off + i] * inv;
        }
    }
    return dx;
}

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride, int pad)
    : Layer(std::move(name)), in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride), pad_(pad)
{
    params_.emplace_back(Shape{out_, in_, kernel_, kernel_});
    params_.emplace_back(Shape{1, out_, 1, 1});
}

Shape Conv2d::output_shape(const Shape& in) const
{
    return {in.n, out_, (in.h + 2 * pad_ - kernel_) / stride_ + 1, (in.w + 2 * pad_ - kernel_) / stride_ + 1};
}

void Conv2d::reset_parameters(Rng& rng)
{
    fill_normal(params_[0], rng, std::sqrt(2.0 / (in_ * kernel_ * kernel_)));
    params_[1].fill(0.0F);
}

Tensor Conv2d::forward(const Tensor& x, LayerCache&, Mode) const
{
    check_input(*this, x.shape(), in_);
    const Shape os = output_shape(x.shape());
    const ConvGeometry g{in_, x.shape().h, x.shape().w, kernel_, stride_, pad_, os.h, os.w};
    Tensor y(os);
    std::vector<float> cols(static_cast<std::size_t>(g.patch()) * g.positions());
    const ConstMatMap weight(params_[0].data(), out_, g.patch());
    for (int n = 0; n < x.shape().n; ++n) {
        im2col(x.sample(n).data(), g, cols.data());
        MatMap out(y.sample(n).data(), out_, g.positions());
        out.noalias() = weight * ConstMatMap(cols.data(), g.patch(), g.positions());
        for (int o = 0; o < out_; ++o) out.row(o).array() += params_[1][o];
    }
    return y;
}

Tensor Conv2d::backward(const Tensor& x, const Tensor&, const LayerCache&, const Tensor& dy,
                        std::span<Tensor> dparams) const
{
    const Shape os = dy.shape();
    const ConvGeometry g{in_, x.shape().h, x.shape().w, kernel_, stride_, pad_, os.h, os.w};
    Tensor dx(x.shape());
    std::vector<float> cols(static_cast<std::size_t>(g.patch()) * g.positions());
    const ConstMatMap weight(params_[0].data(), out_, g.patch());
    for (int n = 0; n < x.shape().n; ++n) {
        const ConstMatMap grad_out(dy.sample(n).data(), out_, g.positions());
        if (!dparams.empty()) {
            im2col(x.sample(n).data(), g, cols.data());
            MatMap dw(dparams[0].data(), out_, g.patch());
            dw.noalias() += grad_out * ConstMatMap(cols.data(), g.patch(), g.positions()).transpose();
            for (int o = 0; o < out_; ++o) dparams[1][o] += grad_out.row(o).sum();
        }
        MatMap dcols(cols.data(), g.patch(), g.positions());
        dcols.noalias() = weight.transpose() * grad_out;
        col2im(cols.data(), g, dx.sample(n).data());
    }
    return dx;
}

// ---------------------------------------------------------------- ConvTranspose2d

ConvTranspose2d::ConvTranspose2d(std::string name, int in_channels, int out_channels, int kernel, int stride,
                                 int pad)
    : Layer(std::move(name)), in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride), pad_(pad)
{
    params_.emplace_back(Shape{in_, out_, kernel_, kernel_});
    params_.emplace_back(Shape{1, out_, 1, 1});
}

Shape ConvTranspose2d::output_shape(const Shape& in) const
{
    return {in.n, out_, (in.h - 1) * stride_ - 2 * pad_ + kernel_, (in.w - 1) * stride_ - 2 * pad_ + kernel_};
}

void ConvTranspose2d::reset_parameters(Rng& rng)
{
    const double fan_in = static_cast<double>(in_) * kernel_ * kernel_ / (stride_ * stride_);
    fill_normal(params_[0], rng, std::sqrt(2.0 / fan_in));
    params_[1].fill(0.0F);
}

Tensor ConvTranspose2d::forward(const Tensor& x, LayerCache&, Mode) const
{
    check_input(*this, x.shape(), in_);
    const Shape os = output_shape(x.shape());
    // Geometry of the adjoint convolution: image is the output, positions are the input.
    const ConvGeometry g{out_, os.h, os.w, kernel_, stride_, pad_, x.shape().h, x.shape().w};
    Tensor y(os);
    std::vector<float> cols(static_cast<std::size_t>(g.patch()) * g.positions());
    const ConstMatMap weight(params_[0].data(), in_, g.patch());
    const std::size_t plane = static_cast<std::size_t>(os.h) * os.w;
    for (int n = 0; n < x.shape().n; ++n) {
        MatMap c(cols.data(), g.patch(), g.positions());
        c.noalias() = weight.transpose() * ConstMatMap(x.sample(n).data(), in_, g.positions());
        auto out = y.sample(n);
        col2im(cols.data(), g, out.data());
        for (int o = 0; o < out_; ++o) {
            const float b = params_[1][o];
            for (std::size_t i = 0; i < plane; ++i) out[o * plane + i] += b;
        }
    }
    return y;
}

Tensor ConvTranspose2d::backward(const Tensor& x, const Tensor&, const LayerCache&, const Tensor& dy,
                                 std::span<Tensor> dparams) const
{
    const Shape os = dy.shape();
    const ConvGeometry g{out_, os.h, os.w, kernel_, stride_, pad_, x.shape().h, x.shape().w};
    Tensor dx(x.shape());
    std::vector<float> cols(static_cast<std::size_t>(g.patch()) * g.positions());
    const ConstMatMap weight(params_[0].data(), in_, g.patch());
    const std::size_t plane = static_cast<std::size_t>(os.h) * os.w;
    for (int n = 0; n < x.shape().n; ++n) {
        im2col(dy.sample(n).data(), g, cols.data());
        const ConstMatMap c(cols.data(), g.patch(), g.positions());
        MatMap grad_in(dx.sample(n).data(), in_, g.positions());
        grad_in.noalias() = weight * c;
        if (!dparams.empty()) {
            MatMap dw(dparams[0].data(), in_, g.patch());
            dw.noalias() += ConstMatMap(x.sample(n).data(), in_, g.positions()) * c.transpose();
            auto go = dy.sample(n);
            for (int o = 0; o < out_; ++o) {
                float s = 0.0F;
                for (std::size_t i = 0; i < plane; ++i) s += go[o * plane + i];
                dparams[1][o] += s;
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------- Linear

Linear::Linear(std::string name, int in_features, int out_features, bool bias)
    : Layer(std::move(name)), in_(in_features), out_(out_features), bias_(bias)
{
    params_.emplace_back(Shape{out_, in_, 1, 1});
    if (bias_) params_.emplace_back(Shape{1, out_, 1, 1});
}

Shape Linear::output_shape(const Shape& in) const { return {in.n, out_, 1, 1}; }

void Linear::reset_parameters(Rng& rng)
{
    const double bound = std::sqrt(1.0 / in_);
    for (auto& v : params_[0].vec()) v = static_cast<float>(rng.uniform(-bound, bound));
    if (bias_) params_[1].fill(0.0F);
}

Tensor Linear::forward(const Tensor& x, LayerCache&, Mode) const
{
    if (static_cast<int>(x.shape().sample_size()) != in_) {
        throw ContractViolation("layer '" + name_ + "' expects " + std::to_string(in_) + " features, got shape " +
                                x.shape().str());
    }
    const int n = x.shape().n;
    Tensor y(Shape{n, out_, 1, 1});
    const ConstMatMap weight(params_[0].data(), out_, in_);
    // Per-sample products keep each row's result independent of batch composition.
    for (int i = 0; i < n; ++i) {
        Eigen::Map<Eigen::VectorXf> out(y.sample(i).data(), out_);
        out.noalias() = weight * Eigen::Map<const Eigen::VectorXf>(x.sample(i).data(), in_);
        if (bias_) out += Eigen::Map<const Eigen::VectorXf>(params_[1].data(), out_);
    }
    return y;
}

Tensor Linear::backward(const Tensor& x, const Tensor&, const LayerCache&, const Tensor& dy,
                        std::span<Tensor> dparams) const
{
    const int n = x.shape().n;
    const ConstMatMap grad_out(dy.data(), n, out_);
    Tensor dx(x.shape());
    const ConstMatMap weight(params_[0].data(), out_, in_);
    for (int i = 0; i < n; ++i) {
        Eigen::Map<Eigen::VectorXf>(dx.sample(i).data(), in_).noalias() =
            weight.transpose() * Eigen::Map<const Eigen::VectorXf>(dy.sample(i).data(), out_);
    }
    if (!dparams.empty()) {
        MatMap(dparams[0].data(), out_, in_).noalias() += grad_out.transpose() * ConstMatMap(x.data(), n, in_);
        if (bias_) {
            for (int o = 0; o < out_; ++o) dparams[1][o] += grad_out.col(o).sum();
        }
    }
    return dx;
}

// ---------------------------------------------------------------- Relu

Tensor Relu::forward(const Tensor& x, LayerCache&, Mode) const
{
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0F ? x[i] : 0.0F;
    return y;
}

Tensor Relu::backward(const Tensor& x, const Tensor&, const LayerCache&, const Tensor& dy, std::span<Tensor>) const
{
    Tensor dx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0F ? dy[i] : 0.0F;
    return dx;
}

// ---------------------------------------------------------------- MaxPool2

Tensor MaxPool2::forward(const Tensor& x, LayerCache& cache, Mode) const
{
    const Shape& s = x.shape();
    const Shape os = output_shape(s);
    Tensor y(os);
    cache.indices.assign(os.size(), 0);
    std::size_t k = 0;
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            for (int oh = 0; oh < os.h; ++oh) {
                for (int ow = 0; ow < os.w; ++ow, ++k) {
                    int best = -1;
                    float best_v = -std::numeric_limits<float>::infinity();
                    for (int dh = 0; dh < 2; ++dh) {
                        for (int dw = 0; dw < 2; ++dw) {
                            const int idx = ((n * s.c + c) * s.h + 2 * oh + dh) * s.w + 2 * ow + dw;
                            if (best < 0 || x[idx] > best_v) {
                                best = idx;
                                best_v = x[idx];
                            }
                        }
                    }
                    y[k] = best_v;
                    cache.indices[k] = best;
                }
            }
        }
    }
    return y;
}

Tensor MaxPool2::backward(const Tensor& x, const Tensor&, const LayerCache& cache, const Tensor& dy,
                          std::span<Tensor>) const
{
    Tensor dx(x.shape());
    for (std::size_t k = 0; k < dy.size(); ++k) dx[cache.indices[k]] += dy[k];
    return dx;
}

// ---------------------------------------------------------------- GlobalAvgPool

Tensor GlobalAvgPool::forward(const Tensor& x, LayerCache&, Mode) const
{
    const Shape& s = x.shape();
    Tensor y(output_shape(s));
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    for (int i = 0; i < s.n * s.c; ++i) {
        float acc = 0.0F;
        for (std::size_t j = 0; j < plane; ++j) acc += x[i * plane + j];
        y[i] = acc / static_cast<float>(plane);
    }
    return y;
}

Tensor GlobalAvgPool::backward(const Tensor& x, const Tensor&, const LayerCache&, const Tensor& dy,
                               std::span<Tensor>) const
{
    const Shape& s = x.shape();
    Tensor dx(s);
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    for (int i = 0; i < s.n * s.c; ++i) {
        const float g = dy[i] / static_cast<float>(plane);
        for (std::size_t j = 0; j < plane; ++j) dx[i * plane + j] = g;
    }
    return dx;
}

// ---------------------------------------------------------------- Reshape

Tensor Reshape::forward(const Tensor& x, LayerCache&, Mode) const
{
    return x.reshaped(output_shape(x.shape()));
}

Tensor Reshape::backward(const Tensor& x, const Tensor&, const LayerCache&, const Tensor& dy, std::span<Tensor>) const
{
    return dy.reshaped(x.shape());
}

// ---------------------------------------------------------------- BatchNorm2d

BatchNorm2d::BatchNorm2d(std::string name, int channels, float eps)
    : Layer(std::move(name)), channels_(channels), eps_(eps)
{
    params_.emplace_back(Shape{1, channels, 1, 1}, 1.0F);
    params_.emplace_back(Shape{1, channels, 1, 1}, 0.0F);
    buffers_.emplace_back(Shape{1, channels, 1, 1}, 0.0F);
    buffers_.emplace_back(Shape{1, channels, 1, 1}, 1.0F);
}

void BatchNorm2d::reset_parameters(Rng&)
{
    params_[0].fill(1.0F);
    params_[1].fill(0.0F);
    buffers_[0].fill(0.0F);
    buffers_[1].fill(1.0F);
}

Tensor BatchNorm2d::forward(const Tensor& x, LayerCache& cache, Mode mode) const
{
    const Shape& s = x.shape();
    check_input(*this, s, channels_);
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    const double count = static_cast<double>(s.n) * plane;
    std::vector<float> mean(channels_);
    std::vector<float> var(channels_);
    if (mode == Mode::train) {
        for (int c = 0; c < channels_; ++c) {
            double sum = 0.0;
            double sq = 0.0;
            for (int n = 0; n < s.n; ++n) {
                const std::size_t off = (static_cast<std::size_t>(n) * s.c + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    sum += x[off + i];
                    sq += static_cast<double>(x[off + i]) * x[off + i];
                }
            }
            const double m = sum / count;
            mean[c] = static_cast<float>(m);
            var[c] = static_cast<float>(std::max(0.0, sq / count - m * m));
        }
    } else {
        std::copy_n(buffers_[0].data(), channels_, mean.begin());
        std::copy_n(buffers_[1].data(), channels_, var.begin());
    }
    Tensor y(s);
    cache.indices.assign(1, mode == Mode::train ? 1 : 0);
    cache.values.assign(x.size() + 2 * static_cast<std::size_t>(channels_), 0.0F);
    float* xhat = cache.values.data();
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < channels_; ++c) {
            const float inv = 1.0F / std::sqrt(var[c] + eps_);
            const std::size_t off = (static_cast<std::size_t>(n) * s.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                xhat[off + i] = (x[off + i] - mean[c]) * inv;
                y[off + i] = params_[0][c] * xhat[off + i] + params_[1][c];
            }
        }
    }
    std::copy(mean.begin(), mean.end(), cache.values.begin() + static_cast<std::ptrdiff_t>(x.size()));
    std::copy(var.begin(), var.end(), cache.values.begin() + static_cast<std::ptrdiff_t>(x.size()) + channels_);
    return y;
}

std::pair<std::vector<float>, std::vector<float>> BatchNorm2d::batch_stats(const LayerCache& cache, int channels)
{
    const auto base = cache.values.end() - 2 * channels;
    return {std::vector<float>(base, base + channels), std::vector<float>(base + channels, cache.values.end())};
}

Tensor BatchNorm2d::backward(const Tensor& x, const Tensor&, const LayerCache& cache, const Tensor& dy,
                             std::span<Tensor> dparams) const
{
    const Shape& s = x.shape();
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    const double count = static_cast<double>(s.n) * plane;
    const float* xhat = cache.values.data();
    const float* var = cache.values.data() + x.size() + channels_;
    const bool batch_stats_used = !cache.indices.empty() && cache.indices[0] == 1;
    Tensor dx(s);
    for (int c = 0; c < channels_; ++c) {
        const float gamma = params_[0][c];
        const float inv = 1.0F / std::sqrt(var[c] + eps_);
        double sum_dy = 0.0;
        double sum_dy_xhat = 0.0;
        for (int n = 0; n < s.n; ++n) {
            const std::size_t off = (static_cast<std::size_t>(n) * s.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                sum_dy += dy[off + i];
                sum_dy_xhat += static_cast<double>(dy[off + i]) * xhat[off + i];
            }
        }
        if (!dparams.empty()) {
            dparams[0][c] += static_cast<float>(sum_dy_xhat);
            dparams[1][c] += static_cast<float>(sum_dy);
        }
        const float mean_dy = static_cast<float>(sum_dy / count);
        const float mean_dy_xhat = static_cast<float>(sum_dy_xhat / count);
        for (int n = 0; n < s.n; ++n) {
            const std::size_t off = (static_cast<std::size_t>(n) * s.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                const float g = batch_stats_used ? dy[off + i] - mean_dy - xhat[off + i] * mean_dy_xhat : dy[off + i];
                dx[off + i] = gamma * inv * g;
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------- TanhScale

TanhScale::TanhScale(std::string name, float scale) : Layer(std::move(name))
{
    require(scale >= 0.0F, "tanh scale must be nonnegative");
    buffers_.emplace_back(Shape{1, 1, 1, 1}, scale);
}

Tensor TanhScale::forward(const Tensor& x, LayerCache&, Mode) const
{
    const float s = scale();
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = s * std::tanh(x[i]);
    return y;
}

Tensor TanhScale::backward(const Tensor& x, const Tensor&, const LayerCache&, const Tensor& dy, std::span<Tensor>) const
{
    const float s = scale();
    Tensor dx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const float t = std::tanh(x[i]);
        dx[i] = dy[i] * s * (1.0F - t * t);
    }
    return dx;
}

// ---------------------------------------------------------------- Network

Network::Network(const Network& other)
{
    layers_.reserve(other.layers_.size());
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Network& Network::operator=(const Network& other)
{
    if (this != &other) {
        Network copy(other);
        layers_ = std::move(copy.layers_);
    }
    return *this;
}

void Network::initialize(Rng& rng)
{
    for (auto& l : layers_) l->reset_parameters(rng);
}

int Network::find(std::string_view name) const
{
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        if (layers_[i]->name() == name) return static_cast<int>(i);
    }
    return -1;
}

std::vector<std::string> Network::layer_names() const
{
    std::vector<std::string> out;
    for (const auto& l : layers_) out.push_back(l->name());
    return out;
}

Shape Network::output_shape(const Shape& in) const
{
    Shape s = in;
    for (const auto& l : layers_) s = l->output_shape(s);
    return s;
}

Trace Network::forward(const Tensor& x, Mode mode, int stop) const
{
    const int last = stop < 0 ? static_cast<int>(layers_.size()) - 1 : stop;
    require(last < static_cast<int>(layers_.size()), "forward stop index out of range");
    Trace t;
    t.mode = mode;
    t.activations.reserve(last + 2);
    t.caches.resize(last + 1);
    t.activations.push_back(x);
    for (int i = 0; i <= last; ++i) {
        t.activations.push_back(layers_[i]->forward(t.activations.back(), t.caches[i], mode));
    }
    return t;
}

Tensor Network::infer(const Tensor& x) const
{
    Tensor cur = x;
    LayerCache scratch;
    for (const auto& l : layers_) cur = l->forward(cur, scratch, Mode::eval);
    return cur;
}

Tensor Network::backward(const Trace& trace, const Tensor& dy, Gradients* grads, int from, int to) const
{
    const int top = from < 0 ? static_cast<int>(trace.caches.size()) - 1 : from;
    require(top < static_cast<int>(trace.caches.size()), "backward start is beyond the traced layers");
    require(dy.shape() == trace.activations[top + 1].shape(),
            "backward gradient shape " + dy.shape().str() + " does not match activation " +
                trace.activations[top + 1].shape().str());
    require(to >= 0 && to <= top + 1, "backward stop index out of range");
    Tensor g = dy;
    for (int i = top; i >= to; --i) {
        std::span<Tensor> dparams;
        if (grads != nullptr) dparams = (*grads)[i];
        g = layers_[i]->backward(trace.activations[i], trace.activations[i + 1], trace.caches[i], g, dparams);
    }
    return g;
}

Gradients Network::zero_gradients() const
{
    Gradients g(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        for (const auto& p : layers_[i]->params()) g[i].emplace_back(p.shape(), 0.0F);
    }
    return g;
}

std::vector<Tensor*> Network::parameters()
{
    std::vector<Tensor*> out;
    for (auto& l : layers_) {
        for (auto& p : l->params()) out.push_back(&p);
    }
    return out;
}

std::size_t Network::parameter_count() const
{
    std::size_t n = 0;
    for (const auto& l : layers_) {
        for (const auto& p : l->params()) n += p.size();
    }
    return n;
}

void Network::set_batchnorm_stats(const Trace& trace)
{
    require(trace.mode == Mode::train, "batchnorm statistics need a train-mode trace");
    for (std::size_t i = 0; i < layers_.size() && i < trace.caches.size(); ++i) {
        auto* bn = dynamic_cast<BatchNorm2d*>(layers_[i].get());
        if (bn == nullptr) continue;
        auto [mean, var] = BatchNorm2d::batch_stats(trace.caches[i], bn->channels());
        std::copy(mean.begin(), mean.end(), bn->buffers()[0].data());
        std::copy(var.begin(), var.end(), bn->buffers()[1].data());
    }
}

namespace {

constexpr char kMagic[8] = {'C', 'I', 'U', 'A', 'P', 'N', 'N', '1'};

template <typename T>
void put(std::vector<char>& out, const T& v)
{
    const auto* p = reinterpret_cast<const char*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T take(const std::vector<char>& in, std::size_t& pos)
{
    if (pos + sizeof(T) > in.size()) throw DependencyError("truncated network checkpoint");
    T v{};
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

} // namespace

std::vector<char> Network::serialize() const
{
    std::vector<char> out(kMagic, kMagic + sizeof(kMagic));
    put(out, static_cast<std::uint32_t>(layers_.size()));
    for (const auto& l : layers_) {
        put(out, static_cast<std::uint32_t>(l->name().size()));
        out.insert(out.end(), l->name().begin(), l->name().end());
        const auto n = static_cast<std::uint32_t>(l->params().size() + l->buffers().size());
        put(out, n);
        auto write_tensor = [&](const Tensor& t) {
            put(out, t.shape().n);
            put(out, t.shape().c);
            put(out, t.shape().h);
            put(out, t.shape().w);
            const auto* p = reinterpret_cast<const char*>(t.data());
            out.insert(out.end(), p, p + t.size() * sizeof(float));
        };
        for (const auto& t : l->params()) write_tensor(t);
        for (const auto& t : l->buffers()) write_tensor(t);
    }
    return out;
}

void Network::deserialize(const std::vector<char>& bytes)
{
    if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        throw DependencyError("not a network checkpoint (bad magic)");
    }
    std::size_t pos = sizeof(kMagic);
    const auto count = take<std::uint32_t>(bytes, pos);
    if (count != layers_.size()) throw DependencyError("checkpoint layer count does not match architecture");
    for (auto& l : layers_) {
        const auto len = take<std::uint32_t>(bytes, pos);
        if (pos + len > bytes.size()) throw DependencyError("truncated network checkpoint");
        const std::string name(bytes.data() + pos, len);
        pos += len;
        if (name != l->name()) throw DependencyError("checkpoint layer '" + name + "' != '" + l->name() + "'");
        const auto n = take<std::uint32_t>(bytes, pos);
        if (n != l->params().size() + l->buffers().size()) {
            throw DependencyError("checkpoint tensor count mismatch in layer " + name);
        }
        auto read_tensor = [&](Tensor& t) {
            Shape s;
            s.n = take<int>(bytes, pos);
            s.c = take<int>(bytes, pos);
            s.h = take<int>(bytes, pos);
            s.w = take<int>(bytes, pos);
            if (!(s == t.shape())) throw DependencyError("checkpoint tensor shape mismatch in layer " + name);
            const std::size_t nbytes = t.size() * sizeof(float);
            if (pos + nbytes > bytes.size()) throw DependencyError("truncated network checkpoint");
            std::memcpy(t.data(), bytes.data() + pos, nbytes);
            pos += nbytes;
        };
        for (auto& t : l->params()) read_tensor(t);
        for (auto& t : l->buffers()) read_tensor(t);
    }
    if (pos != bytes.size()) throw DependencyError("trailing bytes in network checkpoint");
}

void Network::save(const std::filesystem::path& path) const
{
    const auto bytes = serialize();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void Network::load(const std::filesystem::path& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DependencyError("missing checkpoint " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    deserialize(bytes);
}

// ---------------------------------------------------------------- softmax helpers

Tensor softmax(const Tensor& logits)
{
    const int n = logits.shape().n;
    const int k = static_cast<int>(logits.shape().sample_size());
    Tensor p(logits.shape());
    for (int i = 0; i < n; ++i) {
        const float* z = logits.data() + static_cast<std::size_t>(i) * k;
        float* out = p.data() + static_cast<std::size_t>(i) * k;
        const float m = *std::max_element(z, z + k);
        double sum = 0.0;
        for (int j = 0; j < k; ++j) {
            out[j] = std::exp(z[j] - m);
            sum += out[j];
        }
        for (int j = 0; j < k; ++j) out[j] = static_cast<float>(out[j] / sum);
    }
    return p;
}

Tensor softmax_backward(const Tensor& probs, const Tensor& dprobs)
{
    const int n = probs.shape().n;
    const int k = static_cast<int>(probs.shape().sample_size());
    Tensor dz(probs.shape());
    for (int i = 0; i < n; ++i) {
        const float* p = probs.data() + static_cast<std::size_t>(i) * k;
        const float* g = dprobs.data() + static_cast<std::size_t>(i) * k;
        double dot = 0.0;
        for (int j = 0; j < k; ++j) dot += static_cast<double>(p[j]) * g[j];
        for (int j = 0; j < k; ++j) dz[static_cast<std::size_t>(i) * k + j] = p[j] * (g[j] - static_cast<float>(dot));
    }
    return dz;
}

std::vector<int> argmax_rows(const Tensor& t)
{
    const int n = t.shape().n;
    const int k = static_cast<int>(t.shape().sample_size());
    std::vector<int> out(n);
    for (int i = 0; i < n; ++i) {
        const float* row = t.data() + static_cast<std::size_t>(i) * k;
        int best = 0;
        for (int j = 1; j < k; ++j) {
            if (row[j] > row[best]) best = j;
        }
        out[i] = best;
    }
    return out;
}

float cross_entropy(const Tensor& logits, std::span<const int> labels, Tensor* grad, float smoothing)
{
    const int n = logits.shape().n;
    const int k = static_cast<int>(logits.shape().sample_size());
    require(static_cast<int>(labels.size()) == n, "cross_entropy label count mismatch");
    require(smoothing >= 0.0F && smoothing < 1.0F, "label smoothing must lie in [0, 1)");
    const Tensor p = softmax(logits);
    const float off = smoothing / static_cast<float>(k);
    const float on = 1.0F - smoothing + off;
    double loss = 0.0;
    if (grad != nullptr) *grad = p;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < k; ++j) {
            const float q = j == labels[i] ? on : off;
            if (q == 0.0F) continue;
            const std::size_t at = static_cast<std::size_t>(i) * k + j;
            loss -= q * std::log(std::max(p[at], 1e-30F));
            if (grad != nullptr) (*grad)[at] -= q;
        }
    }
    if (grad != nullptr) *grad *= 1.0F / static_cast<float>(n);
    return static_cast<float>(loss / n);
}

} // namespace ciuap::nn
