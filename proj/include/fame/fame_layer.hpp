#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "fame/backbone.hpp"
#include "fame/error.hpp"
#include "fame/ops.hpp"
#include "fame/params.hpp"
#include "fame/tensor.hpp"

namespace fame {

/// Facet-aware prediction with MoE queries in the final attention block.
/// The head count comes from the backbone; `experts` is N per head.
struct FameConfig {
    std::size_t experts = 2;
    /// Route through expert 0 only (the w/o-MoE ablation).
    bool bypass_router = false;

    void validate() const {
        if (experts == 0) throw ConfigError("FAME needs at least one expert per head");
    }

    bool operator==(const FameConfig&) const = default;
};

/// Per-head parameters of the final block.
struct FameHeadParams {
    std::vector<Tensor> expert_wq;  // N x [d x d']
    Tensor wk, wv;                  // d x d'
    Tensor router;                  // (N*d') x N
    Tensor wf;                      // d x d', item sub-embedding projection
};

/// FFN' shared by every head, operating on d'-dimensional vectors.
struct SharedFfnParams {
    Tensor w1, b1, w2, b2;
};

struct GateParams {
    Tensor w;  // d x H, rows ordered head 0 .. H-1
    Tensor b;  // H
};

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

/// q_(n) = x . W_Q(n) for every expert. `x` may hold several rows.
inline std::vector<Tensor> expert_queries(const Tensor& x, const std::vector<Tensor>& expert_wq) {
    std::vector<Tensor> out;
    out.reserve(expert_wq.size());
    for (const auto& w : expert_wq) out.push_back(matmul(x, w));
    return out;
}

/// Attention of every expert's queries over the head's shared keys/values.
/// Returns the expert representations f_(n), each [B*L x d'].
inline std::vector<Tensor> moe_attention_head(const Tensor& x, const FameHeadParams& head, std::size_t batch_rows,
                                              std::size_t len, const Mask& mask, const ForwardContext& ctx,
                                              std::size_t expert_limit = 0) {
    const std::size_t dh = head.wk.dim(1);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    auto k = reshape(matmul(x, head.wk), {batch_rows, len, dh});
    auto v = reshape(matmul(x, head.wv), {batch_rows, len, dh});
    const std::size_t n_used = expert_limit ? expert_limit : head.expert_wq.size();
    std::vector<Tensor> reps;
    reps.reserve(n_used);
    for (std::size_t n = 0; n < n_used; ++n) {
        auto q = reshape(matmul(x, head.expert_wq[n]), {batch_rows, len, dh});
        auto probs = softmax_rows(scale(bmm_nt(q, k), inv_sqrt), &mask);
        if (ctx.trace) ctx.trace->attention.push_back(probs);
        reps.push_back(reshape(bmm(probs, v), {batch_rows * len, dh}));
    }
    return reps;
}

/// beta = softmax([f_(1) | ... | f_(N)] . W_exp), one row per position.
inline Tensor route_experts(const std::vector<Tensor>& reps, const Tensor& router) {
    auto stacked = reps.size() == 1 ? reps[0] : concat_cols(reps);
    return softmax_rows(matmul(stacked, router));
}

/// f = sum_n beta_(n) * f_(n).
inline Tensor integrate_experts(const std::vector<Tensor>& reps, const Tensor& beta) {
    if (beta.rank() != 2 || beta.dim(1) != reps.size()) {
        throw DimensionError("integrate_experts: weights " + shape_str(beta.shape()) + " for " +
                             std::to_string(reps.size()) + " experts");
    }
    if (reps.size() == 1) return scale_rows(reps[0], beta);
    Tensor acc;
    for (std::size_t n = 0; n < reps.size(); ++n) {
        auto term = scale_rows(reps[n], slice_cols(beta, n, n + 1));
        acc = acc.defined() ? add(acc, term) : term;
    }
    return acc;
}

/// F = LayerNorm(f + Dropout(FFN'(f))) with the shared FFN'. The layer norm
/// has no affine parameters.
inline Tensor head_ffn_prime(const Tensor& f, const SharedFfnParams& ffn, double dropout_p, const ForwardContext& ctx) {
    const std::size_t dh = ffn.w1.dim(0);
    if (f.rank() != 2 || f.dim(1) != dh) {
        throw ContractError("FFN' expects rows of width " + std::to_string(dh) + ", got " + shape_str(f.shape()));
    }
    auto hidden = add_bias(matmul(relu(add_bias(matmul(f, ffn.w1), ffn.b1)), ffn.w2), ffn.b2);
    return layer_norm(add(f, ctx.drop(hidden, dropout_p)), Tensor::full({dh}, 1.0), Tensor::zeros({dh}));
}

/// P^(h)(v) = (x_v . W_f) . F for every item row of `items` ([|V| x d]).
inline Tensor head_scores(const Tensor& f_head, const Tensor& items, const Tensor& wf) {
    return matmul_nt(f_head, matmul(items, wf));
}

/// g = softmax([F^(1) | ... | F^(H)] . W_g + b_g).
inline Tensor gate_heads(const std::vector<Tensor>& head_reps, const GateParams& gate) {
    auto stacked = head_reps.size() == 1 ? head_reps[0] : concat_cols(head_reps);
    return softmax_rows(add_bias(matmul(stacked, gate.w), gate.b));
}

/// P(v) = sum_h g^(h) * P^(h)(v).
inline Tensor fame_scores(const std::vector<Tensor>& head_scores_list, const Tensor& gate) {
    if (gate.rank() != 2 || gate.dim(1) != head_scores_list.size()) {
        throw DimensionError("fame_scores: gate " + shape_str(gate.shape()) + " for " +
                             std::to_string(head_scores_list.size()) + " heads");
    }
    Tensor acc;
    for (std::size_t h = 0; h < head_scores_list.size(); ++h) {
        auto term = scale_rows(head_scores_list[h], slice_cols(gate, h, h + 1));
        acc = acc.defined() ? add(acc, term) : term;
    }
    return acc;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct FameOutput {
    Tensor fused;                     // [rows x |V|]
    std::vector<Tensor> head_scores;  // H x [rows x |V|]
    Tensor gate;                      // [rows x H]
};

/// Backbone blocks 0..L-2 followed by the FAME final block.
class FameModel : public Recommender {
public:
    FameModel(BackboneConfig cfg, FameConfig fame, std::uint64_t seed) : cfg_(std::move(cfg)), fame_(fame) {
        cfg_.validate();
        fame_.validate();
        if (cfg_.blocks == 0) throw ConfigError("FAME replaces the final block, so blocks must be at least 1");
        Rng rng(seed);
        encoder_.init(params_, cfg_, cfg_.blocks - 1, rng);
        init_final_block(rng);
    }

    Tensor forward(const Batch& batch, const std::vector<std::size_t>& rows, ForwardContext& ctx) override {
        return forward_detailed(batch, rows, ctx).fused;
    }

    FameOutput forward_detailed(const Batch& batch, const std::vector<std::size_t>& rows, ForwardContext& ctx) {
        const auto mask = attention_mask(batch);
        auto x = encoder_.encode(batch, mask, cfg_, ctx);
        auto items = encoder_.item_table();
        FameOutput out;
        std::vector<Tensor> head_reps;
        for (const auto& head : heads_) {
            auto reps = moe_attention_head(x, head, batch.rows, batch.max_len, mask, ctx,
                                           fame_.bypass_router ? 1 : 0);
            for (auto& r : reps) r = gather_rows(r, rows);
            Tensor f;
            if (fame_.bypass_router) {
                f = reps[0];
            } else {
                auto beta = route_experts(reps, head.router);
                if (ctx.trace) ctx.trace->router.push_back(beta);
                f = integrate_experts(reps, beta);
            }
            auto F = head_ffn_prime(f, ffn_, cfg_.dropout, ctx);
            out.head_scores.push_back(head_scores(F, items, head.wf));
            head_reps.push_back(F);
        }
        out.gate = gate_heads(head_reps, gate_);
        if (ctx.trace) ctx.trace->gate.push_back(out.gate);
        out.fused = fame_scores(out.head_scores, out.gate);
        return out;
    }

    ParameterSet& parameters() override { return params_; }
    const ParameterSet& parameters() const override { return params_; }
    const BackboneConfig& backbone() const override { return cfg_; }
    std::string kind() const override { return "fame"; }

    const FameConfig& fame_config() const { return fame_; }
    void set_bypass_router(bool bypass) { fame_.bypass_router = bypass; }
    const std::vector<FameHeadParams>& heads() const { return heads_; }
    const GateParams& gate() const { return gate_; }
    const SharedFfnParams& ffn_prime() const { return ffn_; }
    std::string final_block_prefix() const { return "block" + std::to_string(cfg_.blocks - 1); }

private:
    void init_final_block(Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(cfg_.d));
        const std::size_t dh = cfg_.head_dim(), n = fame_.experts;
        const std::string prefix = final_block_prefix();
        for (std::size_t h = 0; h < cfg_.heads; ++h) {
            const std::string hp = prefix + ".head" + std::to_string(h);
            FameHeadParams head;
            for (std::size_t e = 0; e < n; ++e) {
                head.expert_wq.push_back(
                    params_.add(hp + ".expert" + std::to_string(e) + ".wq", uniform_param({cfg_.d, dh}, bound, rng)));
            }
            head.wk = params_.add(hp + ".wk", uniform_param({cfg_.d, dh}, bound, rng));
            head.wv = params_.add(hp + ".wv", uniform_param({cfg_.d, dh}, bound, rng));
            head.router = params_.add(hp + ".router", uniform_param({n * dh, n}, bound, rng));
            head.wf = params_.add(hp + ".wf", uniform_param({cfg_.d, dh}, bound, rng));
            heads_.push_back(std::move(head));
        }
        ffn_.w1 = params_.add("ffn_prime.w1", uniform_param({dh, dh}, bound, rng));
        ffn_.b1 = params_.add("ffn_prime.b1", Tensor::zeros({dh}, true));
        ffn_.w2 = params_.add("ffn_prime.w2", uniform_param({dh, dh}, bound, rng));
        ffn_.b2 = params_.add("ffn_prime.b2", Tensor::zeros({dh}, true));
        gate_.w = params_.add("gate.w", uniform_param({cfg_.d, cfg_.heads}, bound, rng));
        gate_.b = params_.add("gate.b", Tensor::zeros({cfg_.heads}, true));
    }

    BackboneConfig cfg_;
    FameConfig fame_;
    ParameterSet params_;
    Encoder encoder_;
    std::vector<FameHeadParams> heads_;
    SharedFfnParams ffn_;
    GateParams gate_;
};

// ---------------------------------------------------------------------------
// Grafting
// ---------------------------------------------------------------------------

struct GraftOptions {
    /// Expert queries start as the pretrained W_Q plus N(0, sigma^2) noise with
    /// sigma = noise_scale / sqrt(d).
    double noise_scale = 0.01;
    /// Ignore the pretrained W_Q and keep the fresh random expert queries.
    bool random_expert_init = false;
};

/// Builds a FAME model from a pretrained backbone: earlier blocks and the
/// embeddings are copied, the final block keeps its key/value matrices, expert
/// queries clone the pretrained query matrix (plus noise), and router, gate,
/// FFN' and sub-embedding projections are freshly initialized.
inline std::unique_ptr<FameModel> graft_fame(const SasRec& pretrained, const BackboneConfig& target, FameConfig fame,
                                             std::uint64_t seed, const GraftOptions& opts = {}) {
    const auto& src = pretrained.backbone();
    std::vector<std::string> mismatches;
    auto check = [&](const char* field, std::size_t have, std::size_t want) {
        if (have != want) {
            mismatches.push_back(std::string(field) + " (checkpoint " + std::to_string(have) + ", requested " +
                                 std::to_string(want) + ")");
        }
    };
    check("num_items", src.num_items, target.num_items);
    check("d", src.d, target.d);
    check("heads", src.heads, target.heads);
    check("blocks", src.blocks, target.blocks);
    check("max_len", src.max_len, target.max_len);
    if (!mismatches.empty()) {
        std::string msg = "pretrained checkpoint is incompatible:";
        for (const auto& m : mismatches) msg += " " + m + ";";
        throw IncompatibleError(msg);
    }

    BackboneConfig cfg = src;
    cfg.dropout = target.dropout;
    auto model = std::make_unique<FameModel>(cfg, fame, derive_seed(seed, "graft.init"));
    auto& dst = model->parameters();
    const auto& pre = pretrained.parameters();
    const std::string final_prefix = model->final_block_prefix();
    for (auto& [name, tensor] : dst.entries()) {
        if (name.rfind(final_prefix + ".", 0) == 0) continue;
        if (pre.contains(name)) {
            auto t = tensor;
            auto from = pre.get(name);
            std::copy(from.values().begin(), from.values().end(), t.values().begin());
        }
    }

    Rng noise_rng(derive_seed(seed, "graft.noise"));
    std::normal_distribution<double> normal(0.0, 1.0);
    const double sigma = opts.noise_scale / std::sqrt(static_cast<double>(cfg.d));
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        const std::string hp = final_prefix + ".head" + std::to_string(h);
        for (const char* kv : {".wk", ".wv"}) {
            auto from = pre.get(hp + kv);
            auto to = dst.get(hp + kv);
            std::copy(from.values().begin(), from.values().end(), to.values().begin());
        }
        if (opts.random_expert_init) continue;
        auto wq = pre.get(hp + ".wq");
        for (std::size_t e = 0; e < fame.experts; ++e) {
            auto to = dst.get(hp + ".expert" + std::to_string(e) + ".wq");
            for (std::size_t i = 0; i < to.numel(); ++i) to.at(i) = wq.at(i) + sigma * normal(noise_rng);
        }
    }
    return model;
}

}  // namespace fame
