#include "ciuap/adam.hpp"

#include "ciuap/errors.hpp"

#include <cmath>

namespace ciuap {

void Adam::step(std::span<Tensor* const> params, std::span<const Tensor* const> grads)
{
    require(params.size() == grads.size(), "adam: parameter/gradient count mismatch");
    if (m_.empty()) {
        for (const auto* p : params) {
            m_.emplace_back(p->size(), 0.0F);
            v_.emplace_back(p->size(), 0.0F);
        }
    }
    require(m_.size() == params.size(), "adam: parameter list changed between steps");
    ++t_;
    const double b1 = settings_.beta1;
    const double b2 = settings_.beta2;
    const double correction1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double correction2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    const auto step_size = static_cast<float>(settings_.learning_rate * std::sqrt(correction2) / correction1);
    const auto eps_hat = static_cast<float>(settings_.epsilon * std::sqrt(correction2));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& p = *params[k];
        const Tensor& g = *grads[k];
        require(p.size() == g.size() && p.size() == m_[k].size(), "adam: tensor size mismatch");
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = static_cast<float>(b1 * m[i] + (1.0 - b1) * g[i]);
            v[i] = static_cast<float>(b2 * v[i] + (1.0 - b2) * static_cast<double>(g[i]) * g[i]);
            p[i] -= step_size * m[i] / (std::sqrt(v[i]) + eps_hat);
        }
    }
}

void Adam::step(Tensor& param, const Tensor& grad)
{
    Tensor* p[] = {&param};
    const Tensor* g[] = {&grad};
    step(p, g);
}

} // namespace ciuap
