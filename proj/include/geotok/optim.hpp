#pragma once

#include <cstdint>
#include <vector>

#include "geotok/tensor.hpp"

namespace geotok::optim {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;
    std::uint64_t warmup_steps = 10000;
};

// Linear warmup to the base rate, then constant.
double warmup_lr(const AdamConfig& cfg, std::uint64_t step);

// Adam with decoupled weight decay over a fixed parameter list.
template <typename T>
class AdamW {
public:
    AdamW(std::vector<tensor::Tensor<T>> params, AdamConfig cfg);

    // Applies one update from the gradients currently stored on the
    // parameters, then clears them. Throws NonFiniteError (leaving the
    // parameters untouched) when any gradient is NaN or infinite.
    void step();
    void zero_grad();

    std::uint64_t steps_taken() const noexcept { return step_; }
    const AdamConfig& config() const noexcept { return cfg_; }
    const std::vector<std::vector<T>>& first_moments() const noexcept { return m_; }
    const std::vector<std::vector<T>>& second_moments() const noexcept { return v_; }

private:
    std::vector<tensor::Tensor<T>> params_;
    AdamConfig cfg_;
    std::vector<std::vector<T>> m_, v_;
    std::uint64_t step_ = 0;
};

}  // namespace geotok::optim
