#pragma once

#include <chrono>
#include <cmath>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "fame/backbone.hpp"
#include "fame/data.hpp"
#include "fame/error.hpp"
#include "fame/fame_layer.hpp"
#include "fame/metrics.hpp"
#include "fame/ops.hpp"
#include "fame/params.hpp"

namespace fame {

/// Mean next-item cross-entropy over all real items. `target_ids` are item
/// ids in [1, |V|]; scores column c belongs to item c + 1.
inline Tensor cross_entropy_loss(const Tensor& scores, const std::vector<std::size_t>& target_ids) {
    std::vector<std::size_t> cols(target_ids.size());
    for (std::size_t i = 0; i < target_ids.size(); ++i) {
        if (target_ids[i] == kPaddingId) throw ContractError("cross-entropy target is the padding item");
        cols[i] = target_ids[i] - 1;
    }
    return softmax_cross_entropy(scores, cols);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct OptimState {
    AdamConfig config;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::size_t step = 0;

    static OptimState for_params(const ParameterSet& params, AdamConfig cfg = {}) {
        OptimState s;
        s.config = cfg;
        for (const auto& [name, t] : params.entries()) {
            s.m.emplace_back(t.numel(), 0.0);
            s.v.emplace_back(t.numel(), 0.0);
        }
        return s;
    }
};

/// One bias-corrected Adam update using the gradients currently stored on
/// the parameters.
inline void adam_step(ParameterSet& params, OptimState& state) {
    const auto& entries = params.entries();
    if (state.m.size() != entries.size()) throw ContractError("optimizer state does not match parameter set");
    for (std::size_t p = 0; p < entries.size(); ++p) {
        auto t = entries[p].second;
        for (double g : t.grad()) {
            if (!std::isfinite(g)) throw DivergenceError("non-finite gradient in parameter " + entries[p].first);
        }
    }
    ++state.step;
    const auto& c = state.config;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    for (std::size_t p = 0; p < entries.size(); ++p) {
        auto t = entries[p].second;
        auto values = t.values();
        auto grad = t.grad();
        auto& m = state.m[p];
        auto& v = state.v[p];
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double g = grad[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            values[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
    std::size_t epochs = 200;
    std::size_t batch_size = 256;
    AdamConfig adam;
    std::size_t patience = 10;
    /// Next-item targets at every valid position instead of the last only.
    bool all_positions = false;
    std::size_t eval_batch_size = 256;
    std::uint64_t seed = 1;
    std::ostream* log = nullptr;  // one line per epoch when set
};

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double valid_ndcg10 = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    std::vector<EpochLog> history;
    std::size_t epochs_run = 0;
    std::size_t best_epoch = 0;  // 0 means the starting parameters were best
    double initial_valid_ndcg10 = 0.0;
    double best_valid_ndcg10 = 0.0;
};

inline std::vector<std::size_t> training_rows(const Batch& batch, bool all_positions,
                                              std::vector<std::size_t>& targets) {
    targets.clear();
    std::vector<std::size_t> rows;
    if (!all_positions) {
        rows = last_positions(batch);
        targets = batch.target_ids;
        return rows;
    }
    for (std::size_t b = 0; b < batch.rows; ++b) {
        for (std::size_t p = 0; p < batch.max_len; ++p) {
            const std::size_t flat = b * batch.max_len + p;
            if (batch.pad_mask[flat] || batch.position_targets[flat] == kPaddingId) continue;
            rows.push_back(flat);
            targets.push_back(batch.position_targets[flat]);
        }
    }
    return rows;
}

inline void write_epoch_line(std::ostream& os, const EpochLog& e) {
    os << "epoch=" << e.epoch << " train_loss=" << format_fixed(e.train_loss, 6)
       << " valid_ndcg10=" << format_fixed(e.valid_ndcg10, 6) << " lr=" << format_double(e.lr) << '\n';
}

/// Mean training loss of one pass without updating parameters (dropout off).
inline double mean_training_loss(Recommender& model, const SplitView& split, const TrainConfig& cfg) {
    ForwardContext ctx;
    double total = 0.0;
    std::size_t rows_seen = 0;
    std::vector<std::size_t> targets;
    for (const auto& batch : batchify(split, model.backbone().max_len, cfg.batch_size, 0)) {
        auto rows = training_rows(batch, cfg.all_positions, targets);
        auto loss = cross_entropy_loss(model.forward(batch, rows, ctx), targets);
        total += loss.item() * static_cast<double>(rows.size());
        rows_seen += rows.size();
    }
    return total / static_cast<double>(rows_seen);
}

/// Adam on the cross-entropy loss with early stopping on validation NDCG@10.
/// The best parameters seen (including the starting point) are restored on
/// exit. A non-finite loss restores them and throws DivergenceError.
inline TrainResult train_model(Recommender& model, const SplitView& split, const TrainConfig& cfg) {
    auto& params = model.parameters();
    auto state = OptimState::for_params(params, cfg.adam);
    Rng dropout_rng(derive_seed(cfg.seed, "dropout"));
    const std::uint64_t shuffle_root = derive_seed(cfg.seed, "shuffle");

    TrainResult result;
    result.initial_valid_ndcg10 = evaluate(model, split, EvalTarget::valid, {10}, cfg.eval_batch_size).ndcg_at(10);
    result.best_valid_ndcg10 = result.initial_valid_ndcg10;
    auto best = params.snapshot();
    std::size_t since_best = 0;
    std::vector<std::size_t> targets;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double loss_sum = 0.0;
        std::size_t rows_seen = 0;
        for (const auto& batch : batchify(split, model.backbone().max_len, cfg.batch_size, shuffle_root + epoch)) {
            ForwardContext ctx{true, &dropout_rng, nullptr};
            auto rows = training_rows(batch, cfg.all_positions, targets);
            params.zero_grad();
            auto loss = cross_entropy_loss(model.forward(batch, rows, ctx), targets);
            if (!std::isfinite(loss.item())) {
                params.restore(best);
                throw DivergenceError("training loss became non-finite at epoch " + std::to_string(epoch));
            }
            backward(loss);
            try {
                adam_step(params, state);
            } catch (const DivergenceError&) {
                params.restore(best);
                throw;
            }
            loss_sum += loss.item() * static_cast<double>(rows.size());
            rows_seen += rows.size();
        }

        EpochLog entry;
        entry.epoch = epoch;
        entry.train_loss = loss_sum / static_cast<double>(rows_seen);
        entry.valid_ndcg10 = evaluate(model, split, EvalTarget::valid, {10}, cfg.eval_batch_size).ndcg_at(10);
        entry.lr = cfg.adam.lr;
        result.history.push_back(entry);
        result.epochs_run = epoch;
        if (cfg.log) write_epoch_line(*cfg.log, entry);

        if (entry.valid_ndcg10 > result.best_valid_ndcg10) {
            result.best_valid_ndcg10 = entry.valid_ndcg10;
            result.best_epoch = epoch;
            best = params.snapshot();
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    params.restore(best);
    return result;
}

// ---------------------------------------------------------------------------
// Two-phase pipeline
// ---------------------------------------------------------------------------

struct PretrainOutcome {
    std::unique_ptr<SasRec> model;
    TrainResult result;
};

/// Trains a SASRec backbone from scratch on next-item targets.
inline PretrainOutcome pretrain_sasrec(const SplitView& split, BackboneConfig cfg, const TrainConfig& train) {
    cfg.num_items = split.num_items;
    PretrainOutcome out;
    out.model = std::make_unique<SasRec>(cfg, derive_seed(train.seed, "init"));
    out.result = train_model(*out.model, split, train);
    return out;
}

/// End-to-end fine-tuning of a grafted model (all parameters trainable).
inline TrainResult finetune_fame(FameModel& model, const SplitView& split, const TrainConfig& train) {
    return train_model(model, split, train);
}

struct PipelineConfig {
    BackboneConfig backbone;
    FameConfig fame;
    GraftOptions graft;
    TrainConfig pretrain;
    TrainConfig finetune;
    std::uint64_t seed = 1;
};

struct PipelineOutcome {
    std::unique_ptr<SasRec> pretrained;
    std::unique_ptr<FameModel> grafted;    // state right after grafting
    std::unique_ptr<FameModel> finetuned;
    TrainResult pretrain_result;
    TrainResult finetune_result;
};

/// Pretrain -> graft -> fine-tune. Every random stream derives from cfg.seed.
inline PipelineOutcome run_pipeline(const SplitView& split, const PipelineConfig& cfg) {
    PipelineOutcome out;
    auto pre_cfg = cfg.pretrain;
    pre_cfg.seed = derive_seed(cfg.seed, "pretrain");
    auto pre = pretrain_sasrec(split, cfg.backbone, pre_cfg);
    out.pretrained = std::move(pre.model);
    out.pretrain_result = pre.result;

    auto target = out.pretrained->backbone();
    target.dropout = cfg.backbone.dropout;
    out.grafted = graft_fame(*out.pretrained, target, cfg.fame, derive_seed(cfg.seed, "graft"), cfg.graft);
    out.finetuned = graft_fame(*out.pretrained, target, cfg.fame, derive_seed(cfg.seed, "graft"), cfg.graft);
    auto ft_cfg = cfg.finetune;
    ft_cfg.seed = derive_seed(cfg.seed, "finetune");
    out.finetune_result = finetune_fame(*out.finetuned, split, ft_cfg);
    return out;
}

}  // namespace fame
