#pragma once

// Helpers shared by the unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "geotok/tensor.hpp"
#include "geotok/trajectory_pipeline.hpp"

namespace testsupport {

using geotok::tensor::Shape;
using geotok::tensor::Tensor;

template <typename T>
Tensor<T> randn(Shape shape, std::mt19937_64& rng, double scale = 1.0, bool requires_grad = true) {
    std::normal_distribution<double> n(0.0, scale);
    std::vector<T> v(geotok::tensor::numel(shape));
    for (auto& x : v) x = static_cast<T>(n(rng));
    return Tensor<T>::from(std::move(shape), std::move(v), requires_grad);
}

inline double rel_err(double analytic, double numeric, double floor) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheck {
    double max_rel = 0.0;
    std::size_t checked = 0;
    std::size_t failed = 0;
    std::string worst;
};

// Central differences on every element of every leaf. `loss` must rebuild the
// graph from the leaves on each call.
inline GradCheck check_gradients(const std::vector<std::pair<std::string, Tensor<double>>>& leaves,
                                 const std::function<Tensor<double>()>& loss, double step, double tol,
                                 double floor) {
    for (auto [name, t] : leaves) t.zero_grad();
    geotok::tensor::backward(loss());
    GradCheck r;
    for (auto [name, t] : leaves) {
        const std::vector<double> analytic(t.grad().begin(), t.grad().end());
        auto vals = t.values_mut();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double keep = vals[i];
            vals[i] = keep + step;
            const double up = loss().item();
            vals[i] = keep - step;
            const double down = loss().item();
            vals[i] = keep;
            const double numeric = (up - down) / (2 * step);
            const double a = analytic.empty() ? 0.0 : analytic[i];
            const double e = rel_err(a, numeric, floor);
            ++r.checked;
            if (e > tol) ++r.failed;
            if (e > r.max_rel) {
                r.max_rel = e;
                char buf[96];
                std::snprintf(buf, sizeof buf, "] analytic %.6e numeric %.6e", a, numeric);
                r.worst = name + "[" + std::to_string(i) + buf;
            }
        }
    }
    return r;
}

// Random weights turn an arbitrary tensor into a scalar with O(1) gradients.
inline Tensor<double> project_to_scalar(const Tensor<double>& y, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto w = randn<double>(y.shape(), rng, 1.0, false);
    return geotok::tensor::sum_all(geotok::tensor::mul(y, w));
}

inline geotok::Trajectory make_traj(const std::vector<std::vector<std::int32_t>>& real, std::int64_t t0 = 1600000000,
                                    std::int64_t dt = 60, std::string user = "u") {
    geotok::Trajectory t;
    t.user = std::move(user);
    t.ids.emplace_back(real.empty() ? 0 : real[0].size(), geotok::kSosId);
    t.ts.push_back(t0);
    for (std::size_t i = 0; i < real.size(); ++i) {
        t.ids.push_back(real[i]);
        t.ts.push_back(t0 + static_cast<std::int64_t>(i) * dt);
    }
    return t;
}

}  // namespace testsupport
