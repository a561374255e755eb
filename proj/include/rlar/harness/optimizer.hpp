#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rlar/ad/tensor.hpp"

namespace rlar::harness {

struct AdamWConfig {
    double lr = 1e-4;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with decoupled weight decay:
//   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
class AdamW {
public:
    AdamW(AdamWConfig config, std::span<const ad::Tensor> params);

    // Replaces each parameter with its updated value. Throws NumericalError
    // if a gradient or an updated parameter is non-finite.
    void step(std::span<ad::Tensor> params, std::span<const ad::Tensor> grads);

    std::uint64_t steps() const { return t_; }
    const AdamWConfig& config() const { return config_; }

private:
    AdamWConfig config_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::uint64_t t_ = 0;
};

}  // namespace rlar::harness
