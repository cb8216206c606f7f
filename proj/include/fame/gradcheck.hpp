#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fame/tensor.hpp"

namespace fame {

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t count = 0;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::vector<GradCheckEntry> per_param;
};

using NamedTensor = std::pair<std::string, Tensor>;

/// Compares reverse-mode gradients against central differences for every entry
/// of every parameter. Error per entry is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
/// `forward` must be deterministic and return a scalar.
inline GradCheckResult grad_check(const std::function<Tensor()>& forward,
                                  std::vector<NamedTensor> params, double eps = 1e-5) {
    for (auto& [name, p] : params) p.zero_grad();
    Tensor loss = forward();
    backward(loss);

    GradCheckResult result;
    for (auto& [name, p] : params) {
        std::vector<double> analytic(p.grad().begin(), p.grad().end());
        GradCheckEntry entry{name, 0.0, p.numel()};
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double saved = p.at(i);
            p.at(i) = saved + eps;
            const double up = forward().item();
            p.at(i) = saved - eps;
            const double down = forward().item();
            p.at(i) = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
            entry.max_rel_error = std::max(entry.max_rel_error, std::abs(analytic[i] - numeric) / denom);
        }
        result.max_rel_error = std::max(result.max_rel_error, entry.max_rel_error);
        result.per_param.push_back(std::move(entry));
    }
    return result;
}

inline GradCheckResult grad_check(const std::function<Tensor()>& forward,
                                  const std::vector<Tensor>& params, double eps = 1e-5) {
    std::vector<NamedTensor> named;
    for (std::size_t i = 0; i < params.size(); ++i) named.emplace_back("param" + std::to_string(i), params[i]);
    return grad_check(forward, std::move(named), eps);
}

}  // namespace fame
