#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "fame/data.hpp"
#include "fame/error.hpp"
#include "fame/fame_layer.hpp"

namespace fame {

/// One row of a head-importance case study: a single head's gate weight and
/// the items it ranks highest, or the fused ranking (head == npos, weight 1).
struct CaseStudyRow {
    static constexpr std::size_t kFused = static_cast<std::size_t>(-1);
    std::size_t head = kFused;
    double gate_weight = 1.0;
    std::vector<std::size_t> top_items;  // item ids, best first
};

inline std::vector<std::size_t> top_k_items(std::span<const double> scores, std::size_t k) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    k = std::min(k, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
    std::vector<std::size_t> ids(k);
    for (std::size_t i = 0; i < k; ++i) ids[i] = order[i] + 1;
    return ids;
}

/// Gate weights and per-head top-k lists for one user's next-item prediction
/// after their full history (train plus validation item). Returns H head
/// rows followed by the fused row.
inline std::vector<CaseStudyRow> case_study(FameModel& model, const SplitView& split, std::size_t user,
                                            std::size_t top_k = 10) {
    if (user >= split.users.size()) {
        throw IndexError("user index " + std::to_string(user) + " outside [0, " + std::to_string(split.users.size()) + ")");
    }
    auto history = split.users[user].train;
    history.push_back(split.users[user].valid);
    auto batch = history_batch(history, model.backbone().max_len, user);
    ForwardContext ctx;
    auto out = model.forward_detailed(batch, last_positions(batch), ctx);

    std::vector<CaseStudyRow> rows;
    const std::size_t V = out.fused.dim(1);
    for (std::size_t h = 0; h < out.head_scores.size(); ++h) {
        CaseStudyRow r;
        r.head = h;
        r.gate_weight = out.gate.values()[h];
        r.top_items = top_k_items(std::span<const double>(out.head_scores[h].values().data(), V), top_k);
        rows.push_back(std::move(r));
    }
    CaseStudyRow fused;
    fused.top_items = top_k_items(std::span<const double>(out.fused.values().data(), V), top_k);
    rows.push_back(std::move(fused));
    return rows;
}

}  // namespace fame
