#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "fame/backbone.hpp"
#include "fame/data.hpp"
#include "fame/error.hpp"

namespace fame {

inline const std::vector<std::size_t> kDefaultKs{5, 10, 20};

/// HR@k and NDCG@k under full ranking, one relevant item per user.
struct EvalReport {
    std::vector<std::size_t> ks;
    std::vector<double> hr;
    std::vector<double> ndcg;
    std::size_t users = 0;
    std::vector<std::size_t> ranks;  // 1-based, per user, when retained

    double hr_at(std::size_t k) const { return hr.at(index_of(k)); }
    double ndcg_at(std::size_t k) const { return ndcg.at(index_of(k)); }

private:
    std::size_t index_of(std::size_t k) const {
        auto it = std::find(ks.begin(), ks.end(), k);
        if (it == ks.end()) throw ContractError("k=" + std::to_string(k) + " was not evaluated");
        return static_cast<std::size_t>(it - ks.begin());
    }
};

/// 1-based rank of `target_id` among all items. scores[c] belongs to item
/// c + 1; equal scores are ordered by ascending item id.
inline std::size_t target_rank(std::span<const double> scores, std::size_t target_id) {
    if (target_id == kPaddingId || target_id > scores.size()) {
        throw IndexError("target item " + std::to_string(target_id) + " outside [1, " + std::to_string(scores.size()) +
                         "]");
    }
    const std::size_t t = target_id - 1;
    const double s = scores[t];
    std::size_t rank = 1;
    for (std::size_t c = 0; c < scores.size(); ++c) {
        if (scores[c] > s || (scores[c] == s && c < t)) ++rank;
    }
    return rank;
}

inline EvalReport report_from_ranks(const std::vector<std::size_t>& ranks, const std::vector<std::size_t>& ks,
                                    bool keep_ranks = false) {
    EvalReport r;
    r.ks = ks;
    r.users = ranks.size();
    r.hr.assign(ks.size(), 0.0);
    r.ndcg.assign(ks.size(), 0.0);
    for (std::size_t rank : ranks) {
        for (std::size_t i = 0; i < ks.size(); ++i) {
            if (rank <= ks[i]) {
                r.hr[i] += 1.0;
                r.ndcg[i] += 1.0 / std::log2(static_cast<double>(rank) + 1.0);
            }
        }
    }
    if (!ranks.empty()) {
        const double n = static_cast<double>(ranks.size());
        for (std::size_t i = 0; i < ks.size(); ++i) {
            r.hr[i] /= n;
            r.ndcg[i] /= n;
        }
    }
    if (keep_ranks) r.ranks = ranks;
    return r;
}

/// Metrics over a score matrix with one row per user.
inline EvalReport evaluate_scores(const std::vector<std::vector<double>>& scores,
                                  const std::vector<std::size_t>& target_ids,
                                  const std::vector<std::size_t>& ks = kDefaultKs, bool keep_ranks = false) {
    if (scores.size() != target_ids.size()) throw DimensionError("evaluate_scores: one target per score row");
    std::vector<std::size_t> ranks(scores.size());
    for (std::size_t u = 0; u < scores.size(); ++u) ranks[u] = target_rank(scores[u], target_ids[u]);
    return report_from_ranks(ranks, ks, keep_ranks);
}

/// Full-rank leave-one-out evaluation of a model on the validation or test
/// targets; no negative sampling and no history masking.
inline EvalReport evaluate(Recommender& model, const SplitView& split, EvalTarget which,
                           const std::vector<std::size_t>& ks = kDefaultKs, std::size_t batch_size = 256,
                           bool keep_ranks = false) {
    ForwardContext ctx;  // eval mode
    std::vector<std::size_t> ranks;
    ranks.reserve(split.users.size());
    for (const auto& batch : eval_batches(split, which, model.backbone().max_len, batch_size)) {
        auto scores = model.scores(batch, ctx);
        const std::size_t n = scores.dim(1);
        for (std::size_t r = 0; r < batch.rows; ++r) {
            ranks.push_back(target_rank(scores.values().subspan(r * n, n), batch.target_ids[r]));
        }
    }
    return report_from_ranks(ranks, ks, keep_ranks);
}

/// Per-user metric contributions computed by fully sorting the score vector.
/// Independent of `target_rank`; used to cross-check `evaluate`.
struct OracleContribution {
    std::size_t rank = 0;
    std::vector<double> hr;
    std::vector<double> ndcg;
};

inline OracleContribution metric_oracle(std::span<const double> scores, std::size_t target_id,
                                        const std::vector<std::size_t>& ks = kDefaultKs) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{1});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a - 1] > scores[b - 1]; });
    OracleContribution c;
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
        if (order[pos] == target_id) {
            c.rank = pos + 1;
            break;
        }
    }
    if (c.rank == 0) throw IndexError("target item " + std::to_string(target_id) + " not among scored items");
    for (std::size_t k : ks) {
        const bool hit = c.rank <= k;
        c.hr.push_back(hit ? 1.0 : 0.0);
        c.ndcg.push_back(hit ? 1.0 / std::log2(static_cast<double>(c.rank) + 1.0) : 0.0);
    }
    return c;
}

}  // namespace fame
