#include "geotok/optim.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "geotok/error.hpp"

namespace geotok::optim {

double warmup_lr(const AdamConfig& cfg, std::uint64_t step) {
    if (cfg.warmup_steps == 0) return cfg.lr;
    return cfg.lr * std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.warmup_steps));
}

template <typename T>
AdamW<T>::AdamW(std::vector<tensor::Tensor<T>> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.emplace_back(p.numel(), T(0));
        v_.emplace_back(p.numel(), T(0));
    }
}

template <typename T>
void AdamW<T>::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

template <typename T>
void AdamW<T>::step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        for (auto g : params_[i].grad()) {
            if (!std::isfinite(static_cast<double>(g))) {
                throw NonFiniteError("adam: non-finite gradient in parameter #" + std::to_string(i));
            }
        }
    }
    ++step_;
    const double lr = warmup_lr(cfg_, step_);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    const T b1 = T(cfg_.beta1), b2 = T(cfg_.beta2);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        auto vals = p.values_mut();
        auto grad = p.grad();
        auto& m = m_[i];
        auto& v = v_[i];
        const T decay = T(lr * cfg_.weight_decay);
        for (std::size_t j = 0; j < vals.size(); ++j) {
            const T g = grad.empty() ? T(0) : grad[j];
            if (decay != T(0)) vals[j] -= decay * vals[j];
            m[j] = b1 * m[j] + (T(1) - b1) * g;
            v[j] = b2 * v[j] + (T(1) - b2) * g * g;
            const double mhat = static_cast<double>(m[j]) / bc1;
            const double vhat = static_cast<double>(v[j]) / bc2;
            vals[j] -= T(lr * mhat / (std::sqrt(vhat) + cfg_.eps));
        }
    }
    zero_grad();
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace geotok::optim
