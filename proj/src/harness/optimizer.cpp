#include "rlar/harness/optimizer.hpp"

#include <cmath>

#include "rlar/errors.hpp"

namespace rlar::harness {

AdamW::AdamW(AdamWConfig config, std::span<const ad::Tensor> params) : config_(config) {
    if (!(config_.lr > 0.0)) throw ValidationError("AdamW: lr must be > 0");
    if (!(config_.weight_decay >= 0.0)) throw ValidationError("AdamW: weight_decay must be >= 0");
    for (const auto& p : params) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
    }
}

void AdamW::step(std::span<ad::Tensor> params, std::span<const ad::Tensor> grads) {
    if (params.size() != m_.size() || grads.size() != m_.size())
        throw ValidationError("AdamW: expected " + std::to_string(m_.size()) + " parameters and gradients");
    ++t_;
    const double t = static_cast<double>(t_);
    const double bias1 = 1.0 - std::pow(config_.beta1, t);
    const double bias2 = 1.0 - std::pow(config_.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto p = params[i].values();
        const auto g = grads[i].values();
        if (g.size() != p.size())
            throw ad::ShapeError("AdamW", params[i].shape(), grads[i].shape());
        std::vector<double> next(p.begin(), p.end());
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < next.size(); ++j) {
            if (!std::isfinite(g[j])) throw NumericalError("AdamW: non-finite gradient in parameter " + std::to_string(i));
            m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
            v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
            const double m_hat = m[j] / bias1;
            const double v_hat = v[j] / bias2;
            next[j] -= config_.lr * (m_hat / (std::sqrt(v_hat) + config_.eps) + config_.weight_decay * next[j]);
            if (!std::isfinite(next[j])) throw NumericalError("AdamW: non-finite parameter " + std::to_string(i));
        }
        params[i] = ad::Tensor(params[i].shape(), std::move(next));
    }
}

}  // namespace rlar::harness
