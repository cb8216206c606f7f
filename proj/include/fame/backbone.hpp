#pragma once

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "fame/data.hpp"
#include "fame/error.hpp"
#include "fame/ops.hpp"
#include "fame/params.hpp"
#include "fame/tensor.hpp"

namespace fame {

struct BackboneConfig {
    std::size_t num_items = 0;
    std::size_t d = 64;
    std::size_t heads = 2;
    std::size_t blocks = 2;
    std::size_t max_len = 50;
    double dropout = 0.2;

    std::size_t head_dim() const { return d / heads; }

    void validate() const {
        if (num_items == 0) throw ConfigError("model needs at least one item");
        if (d == 0 || heads == 0 || max_len == 0) throw ConfigError("d, heads and max_len must be positive");
        if (d % heads != 0) {
            throw ConfigError("embedding dimension " + std::to_string(d) + " is not divisible by " +
                              std::to_string(heads) + " heads");
        }
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    }

    bool operator==(const BackboneConfig&) const = default;
};

/// Optional probe filled during a forward pass with attention, router and
/// gate probabilities (shared handles, no copies).
struct ForwardTrace {
    std::vector<Tensor> attention;  // [B x L x L] per head (and per expert in MoE heads)
    std::vector<Tensor> router;     // [rows x N] per head
    std::vector<Tensor> gate;       // [rows x H]
};

struct ForwardContext {
    bool training = false;
    Rng* rng = nullptr;
    ForwardTrace* trace = nullptr;

    Tensor drop(const Tensor& x, double p) const {
        if (!training || p == 0.0) return x;
        if (!rng) throw ContractError("training forward pass with dropout needs an rng");
        return dropout(x, p, *rng, true);
    }
};

/// Causal + padding mask of shape [B x L x L]. Query i may attend key j iff
/// j <= i and j is not padding. A padding query attends only to itself so its
/// softmax row stays well defined; no valid query ever sees it.
inline Mask attention_mask(const Batch& batch) {
    const std::size_t B = batch.rows, L = batch.max_len;
    Mask m{{B, L, L}, std::vector<std::uint8_t>(B * L * L, 0)};
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < L; ++i) {
            for (std::size_t j = 0; j <= i; ++j) {
                if (!batch.is_pad(b, j) || j == i) m.keep[(b * L + i) * L + j] = 1;
            }
        }
    }
    return m;
}

/// Flat indices (b * L + L - 1) of each row's most recent position.
inline std::vector<std::size_t> last_positions(const Batch& batch) {
    std::vector<std::size_t> rows(batch.rows);
    for (std::size_t b = 0; b < batch.rows; ++b) rows[b] = b * batch.max_len + batch.max_len - 1;
    return rows;
}

struct HeadParams {
    Tensor wq, wk, wv;
};

struct BlockParams {
    std::vector<HeadParams> heads;
    Tensor wo;
    Tensor ln1_gamma, ln1_beta;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    Tensor ln2_gamma, ln2_beta;
};

inline BlockParams make_block(ParameterSet& ps, const std::string& prefix, const BackboneConfig& cfg, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.d));
    const std::size_t dh = cfg.head_dim();
    BlockParams blk;
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        const std::string hp = prefix + ".head" + std::to_string(h);
        HeadParams head;
        head.wq = ps.add(hp + ".wq", uniform_param({cfg.d, dh}, bound, rng));
        head.wk = ps.add(hp + ".wk", uniform_param({cfg.d, dh}, bound, rng));
        head.wv = ps.add(hp + ".wv", uniform_param({cfg.d, dh}, bound, rng));
        blk.heads.push_back(head);
    }
    blk.wo = ps.add(prefix + ".wo", uniform_param({cfg.d, cfg.d}, bound, rng));
    blk.ln1_gamma = ps.add(prefix + ".ln1.gamma", Tensor::full({cfg.d}, 1.0, true));
    blk.ln1_beta = ps.add(prefix + ".ln1.beta", Tensor::zeros({cfg.d}, true));
    blk.ffn_w1 = ps.add(prefix + ".ffn.w1", uniform_param({cfg.d, cfg.d}, bound, rng));
    blk.ffn_b1 = ps.add(prefix + ".ffn.b1", Tensor::zeros({cfg.d}, true));
    blk.ffn_w2 = ps.add(prefix + ".ffn.w2", uniform_param({cfg.d, cfg.d}, bound, rng));
    blk.ffn_b2 = ps.add(prefix + ".ffn.b2", Tensor::zeros({cfg.d}, true));
    blk.ln2_gamma = ps.add(prefix + ".ln2.gamma", Tensor::full({cfg.d}, 1.0, true));
    blk.ln2_beta = ps.add(prefix + ".ln2.beta", Tensor::zeros({cfg.d}, true));
    return blk;
}

/// Item embedding plus positional embedding, then dropout. Returns [B*L x d].
/// Positions are right-aligned: the last slot always uses the last
/// positional row.
inline Tensor embed_sequence(const Tensor& item_emb, const Tensor& pos_emb, const Batch& batch, double dropout_p,
                             const ForwardContext& ctx) {
    const std::size_t L = batch.max_len, max_len = pos_emb.dim(0);
    if (L > max_len) {
        throw ContractError("batch length " + std::to_string(L) + " exceeds model max_len " +
                            std::to_string(max_len));
    }
    std::vector<std::size_t> pos_ids(batch.rows * L);
    for (std::size_t b = 0; b < batch.rows; ++b) {
        for (std::size_t p = 0; p < L; ++p) pos_ids[b * L + p] = max_len - L + p;
    }
    auto x = add(embedding_lookup(item_emb, batch.input_ids, kPaddingId), gather_rows(pos_emb, pos_ids));
    return ctx.drop(x, dropout_p);
}

/// One scaled dot-product head over X[B*L x d]: softmax(q k^T / sqrt(d')) v
/// with the causal/padding mask. Returns [B*L x d'].
inline Tensor attention_head(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                             std::size_t batch_rows, std::size_t len, const Mask& mask, const ForwardContext& ctx) {
    const std::size_t dh = wq.dim(1);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    auto q = reshape(matmul(x, wq), {batch_rows, len, dh});
    auto k = reshape(matmul(x, wk), {batch_rows, len, dh});
    auto v = reshape(matmul(x, wv), {batch_rows, len, dh});
    auto probs = softmax_rows(scale(bmm_nt(q, k), inv_sqrt), &mask);
    if (ctx.trace) ctx.trace->attention.push_back(probs);
    return reshape(bmm(probs, v), {batch_rows * len, dh});
}

/// Post-norm transformer block:
///   A = LayerNorm(X + Dropout(MultiHead(X)))
///   Y = LayerNorm(A + Dropout(FFN(A)))
inline Tensor transformer_block(const Tensor& x, const BlockParams& blk, std::size_t batch_rows, std::size_t len,
                                const Mask& mask, double dropout_p, const ForwardContext& ctx) {
    std::vector<Tensor> heads;
    heads.reserve(blk.heads.size());
    for (const auto& h : blk.heads) heads.push_back(attention_head(x, h.wq, h.wk, h.wv, batch_rows, len, mask, ctx));
    auto attn = matmul(heads.size() == 1 ? heads[0] : concat_cols(heads), blk.wo);
    auto a = layer_norm(add(x, ctx.drop(attn, dropout_p)), blk.ln1_gamma, blk.ln1_beta);
    auto ffn = add_bias(matmul(relu(add_bias(matmul(a, blk.ffn_w1), blk.ffn_b1)), blk.ffn_w2), blk.ffn_b2);
    return layer_norm(add(a, ctx.drop(ffn, dropout_p)), blk.ln2_gamma, blk.ln2_beta);
}

/// Common interface of the backbone and the FAME model for training,
/// evaluation and checkpointing. Score column c corresponds to item id c + 1.
class Recommender {
public:
    virtual ~Recommender() = default;

    /// Scores over all items for the flat positions `rows` (b * L + p).
    virtual Tensor forward(const Batch& batch, const std::vector<std::size_t>& rows, ForwardContext& ctx) = 0;
    virtual ParameterSet& parameters() = 0;
    virtual const ParameterSet& parameters() const = 0;
    virtual const BackboneConfig& backbone() const = 0;
    virtual std::string kind() const = 0;

    /// Next-item scores for every row's most recent position: [B x |V|].
    Tensor scores(const Batch& batch, ForwardContext& ctx) { return forward(batch, last_positions(batch), ctx); }
};

/// Item/positional embeddings followed by a stack of transformer blocks.
struct Encoder {
    Tensor item_emb;  // (|V|+1) x d, row 0 is padding and stays zero
    Tensor pos_emb;   // max_len x d
    std::vector<BlockParams> blocks;

    void init(ParameterSet& ps, const BackboneConfig& cfg, std::size_t num_blocks, Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.d));
        item_emb = ps.add("item_emb", uniform_param({cfg.num_items + 1, cfg.d}, bound, rng));
        for (std::size_t c = 0; c < cfg.d; ++c) item_emb.at(c) = 0.0;
        pos_emb = ps.add("pos_emb", uniform_param({cfg.max_len, cfg.d}, bound, rng));
        for (std::size_t b = 0; b < num_blocks; ++b) blocks.push_back(make_block(ps, "block" + std::to_string(b), cfg, rng));
    }

    Tensor encode(const Batch& batch, const Mask& mask, const BackboneConfig& cfg, const ForwardContext& ctx) const {
        auto x = embed_sequence(item_emb, pos_emb, batch, cfg.dropout, ctx);
        for (const auto& blk : blocks) x = transformer_block(x, blk, batch.rows, batch.max_len, mask, cfg.dropout, ctx);
        return x;
    }

    /// Rows 1..|V| of the item table, i.e. every real item.
    Tensor item_table() const {
        std::vector<std::size_t> ids(item_emb.dim(0) - 1);
        std::iota(ids.begin(), ids.end(), std::size_t{1});
        return gather_rows(item_emb, ids, kPaddingId);
    }
};

/// Causal self-attention recommender: score(v) = x_v . F_t, where F_t is the
/// final block's representation at the most recent position.
class SasRec : public Recommender {
public:
    SasRec(BackboneConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(seed);
        encoder_.init(params_, cfg_, cfg_.blocks, rng);
    }

    Tensor forward(const Batch& batch, const std::vector<std::size_t>& rows, ForwardContext& ctx) override {
        const auto mask = attention_mask(batch);
        auto x = encoder_.encode(batch, mask, cfg_, ctx);
        return sasrec_scores(gather_rows(x, rows));
    }

    /// score(v) = x_v . F for v in [1, |V|]; F is [rows x d].
    Tensor sasrec_scores(const Tensor& f) const { return matmul_nt(f, encoder_.item_table()); }

    ParameterSet& parameters() override { return params_; }
    const ParameterSet& parameters() const override { return params_; }
    const BackboneConfig& backbone() const override { return cfg_; }
    std::string kind() const override { return "sasrec"; }

    const Encoder& encoder() const { return encoder_; }

private:
    BackboneConfig cfg_;
    ParameterSet params_;
    Encoder encoder_;
};

}  // namespace fame
