#pragma once

#include "ciuap/tensor.hpp"

#include <span>
#include <vector>

namespace ciuap {

struct AdamSettings {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Adaptive-moment optimizer over a fixed list of tensors. Moment state is
// sized on the first step.
class Adam {
public:
    explicit Adam(AdamSettings settings = {}) : settings_(settings) {}

    // Descends: p <- p - lr * m_hat / (sqrt(v_hat) + eps).
    void step(std::span<Tensor* const> params, std::span<const Tensor* const> grads);
    void step(Tensor& param, const Tensor& grad);

    const AdamSettings& settings() const { return settings_; }
    long steps() const { return t_; }

private:
    AdamSettings settings_;
    long t_ = 0;
    std::vector<std::vector<float>> m_;
    std::vector<std::vector<float>> v_;
};

} // namespace ciuap
