#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fame/error.hpp"
#include "fame/ops.hpp"
#include "fame/tensor.hpp"

namespace fame {

/// Ordered, named collection of trainable leaves. Order is insertion order and
/// is what checkpoints and optimizers iterate over.
class ParameterSet {
public:
    Tensor add(const std::string& name, Tensor t) {
        if (index_.count(name)) throw ContractError("duplicate parameter name " + name);
        index_.emplace(name, entries_.size());
        entries_.emplace_back(name, t);
        return t;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Tensor get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("unknown parameter " + name);
        return entries_[it->second].second;
    }

    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : entries_) n += t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [name, t] : entries_) t.zero_grad();
    }

    std::vector<std::vector<double>> snapshot() const {
        std::vector<std::vector<double>> out;
        out.reserve(entries_.size());
        for (const auto& [name, t] : entries_) out.emplace_back(t.values().begin(), t.values().end());
        return out;
    }

    void restore(const std::vector<std::vector<double>>& snap) {
        if (snap.size() != entries_.size()) throw ContractError("snapshot does not match parameter set");
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            auto v = entries_[i].second.values();
            std::copy(snap[i].begin(), snap[i].end(), v.begin());
        }
    }

    /// Copies values from `other` for every name present in both sets.
    void copy_matching(const ParameterSet& other) {
        for (auto& [name, t] : entries_) {
            if (!other.contains(name)) continue;
            auto src = other.get(name);
            if (src.shape() != t.shape()) {
                throw IncompatibleError("parameter " + name + " has shape " + shape_str(src.shape()) +
                                        ", expected " + shape_str(t.shape()));
            }
            std::copy(src.values().begin(), src.values().end(), t.values().begin());
        }
    }

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

inline Tensor uniform_param(Shape shape, double bound, Rng& rng) {
    auto t = Tensor::zeros(std::move(shape), true);
    for (auto& v : t.values()) v = (2.0 * uniform01(rng) - 1.0) * bound;
    return t;
}

}  // namespace fame
