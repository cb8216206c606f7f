#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "fame/ablation.hpp"
#include "fame/config.hpp"
#include "fame/report.hpp"
#include "fame/train.hpp"

using namespace fame;

namespace {

const SplitView& small_split() {
    static const SplitView split = [] {
        SynthConfig sc;
        sc.n_users = 150;
        sc.n_items = 60;
        sc.values_per_facet = 6;
        sc.seed = 4;
        return leave_one_out_split(build_sequences(five_core_filter(synthesize_facet_dataset(sc).log)));
    }();
    return split;
}

BackboneConfig small_backbone() {
    BackboneConfig c;
    c.d = 16;
    c.heads = 2;
    c.blocks = 2;
    c.max_len = 20;
    c.dropout = 0.2;
    return c;
}

PipelineConfig small_pipeline(std::size_t pre_epochs, std::size_t ft_epochs) {
    PipelineConfig p;
    p.backbone = small_backbone();
    p.pretrain.epochs = pre_epochs;
    p.pretrain.batch_size = 64;
    p.finetune = p.pretrain;
    p.finetune.epochs = ft_epochs;
    p.seed = 3;
    return p;
}

void expect_same_params(const Recommender& a, const Recommender& b) {
    ASSERT_EQ(a.parameters().size(), b.parameters().size());
    for (const auto& [name, t] : a.parameters().entries()) {
        auto other = b.parameters().get(name);
        for (std::size_t i = 0; i < t.numel(); ++i) ASSERT_EQ(t.at(i), other.at(i)) << name;
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Loss and optimizer
// ---------------------------------------------------------------------------

TEST(Loss, UniformScoresGiveLogVocabulary) {
    auto loss = cross_entropy_loss(Tensor::zeros({3, 10}), {1, 5, 10});
    EXPECT_NEAR(loss.item(), std::log(10.0), 1e-12);
    EXPECT_NEAR(loss.item(), 2.302585, 1e-6);
}

TEST(Loss, SaturatesAtLargeTargetLogit) {
    auto s = Tensor::zeros({1, 10});
    s.at(3) = 50.0;
    const double loss = cross_entropy_loss(s, {4}).item();
    EXPECT_GE(loss, 0.0);
    EXPECT_LT(loss, 1e-9);
}

TEST(Loss, GradientIsSoftmaxMinusOneHot) {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n;
    std::vector<double> v(2 * 6);
    for (auto& x : v) x = n(rng);
    auto s = Tensor::from({2, 6}, v, true);
    auto loss = cross_entropy_loss(s, {2, 6});
    backward(loss);
    auto p = softmax_rows(s.detach());
    const std::size_t targets[] = {1, 5};
    for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t c = 0; c < 6; ++c) {
            const double want = (p.at(r * 6 + c) - (c == targets[r] ? 1.0 : 0.0)) / 2.0;  // mean over rows
            EXPECT_NEAR(s.grad()[r * 6 + c], want, 1e-12);
        }
}

TEST(Loss, PaddingTargetRejected) {
    EXPECT_THROW(cross_entropy_loss(Tensor::zeros({1, 4}), {kPaddingId}), ContractError);
}

namespace {

ParameterSet scalar_param(double x0) {
    ParameterSet ps;
    ps.add("x", Tensor::from({1}, {x0}, true));
    return ps;
}

}  // namespace

TEST(Adam, FirstStepMovesByLearningRate) {
    for (double g : {3.0, -0.002, 1e4}) {
        auto ps = scalar_param(0.5);
        auto state = OptimState::for_params(ps, {});
        ps.get("x").grad()[0] = g;
        adam_step(ps, state);
        EXPECT_NEAR(ps.get("x").at(0) - 0.5, g > 0 ? -0.001 : 0.001, 1e-8) << g;
    }
}

TEST(Adam, ZeroGradientIsIdentity) {
    auto ps = scalar_param(0.7);
    auto state = OptimState::for_params(ps, {});
    for (int i = 0; i < 5; ++i) adam_step(ps, state);
    EXPECT_EQ(ps.get("x").at(0), 0.7);
    EXPECT_EQ(state.m[0][0], 0.0);
    EXPECT_EQ(state.v[0][0], 0.0);
}

TEST(Adam, MinimizesQuadratic) {
    auto ps = scalar_param(1.0);
    AdamConfig cfg;
    cfg.lr = 0.1;
    auto state = OptimState::for_params(ps, cfg);
    for (int i = 0; i < 100; ++i) {
        auto x = ps.get("x");
        x.grad()[0] = 2.0 * x.at(0);
        adam_step(ps, state);
    }
    EXPECT_LT(std::abs(ps.get("x").at(0)), 0.05);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
    auto ps = scalar_param(1.0);
    auto state = OptimState::for_params(ps, {});
    ps.get("x").grad()[0] = std::nan("");
    try {
        adam_step(ps, state);
        FAIL() << "expected DivergenceError";
    } catch (const DivergenceError& e) {
        EXPECT_NE(std::string(e.what()).find("x"), std::string::npos);
    }
    EXPECT_EQ(ps.get("x").at(0), 1.0);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

TEST(Train, InitialLossNearUniform) {
    const auto& split = small_split();
    for (bool fame_model : {false, true}) {
        auto cfg = small_backbone();
        cfg.num_items = split.num_items;
        std::unique_ptr<Recommender> m;
        if (fame_model) {
            m = std::make_unique<FameModel>(cfg, FameConfig{}, 2);
        } else {
            m = std::make_unique<SasRec>(cfg, 2);
        }
        TrainConfig tc;
        const double loss = mean_training_loss(*m, split, tc);
        EXPECT_NEAR(loss / std::log(static_cast<double>(split.num_items)), 1.0, 0.05) << m->kind();
    }
}

TEST(Train, LearnsNoiseFreeSinglePreference) {
    SynthConfig sc;
    sc.n_facets = 1;
    sc.prefs_per_facet = 1;
    sc.noise_rate = 0.0;
    sc.seed = 2;
    auto split = leave_one_out_split(build_sequences(five_core_filter(synthesize_facet_dataset(sc).log)));
    auto cfg = small_backbone();
    cfg.d = 32;
    cfg.max_len = 30;
    TrainConfig tc;
    tc.epochs = 30;
    tc.batch_size = 64;
    tc.all_positions = true;  // 500 users give too few final-position targets to converge in 30 epochs
    auto out = pretrain_sasrec(split, cfg, tc);
    EXPECT_GT(evaluate(*out.model, split, EvalTarget::valid).hr_at(10), 0.9);
}

TEST(Train, IdenticalSeedsGiveIdenticalModels) {
    const auto& split = small_split();
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 64;
    auto a = pretrain_sasrec(split, small_backbone(), tc);
    auto b = pretrain_sasrec(split, small_backbone(), tc);
    expect_same_params(*a.model, *b.model);
    tc.seed = 2;
    auto c = pretrain_sasrec(split, small_backbone(), tc);
    EXPECT_NE(c.model->parameters().get("item_emb").at(20), a.model->parameters().get("item_emb").at(20));
}

TEST(Train, EarlyStoppingRestoresBestAndLogs) {
    const auto& split = small_split();
    std::ostringstream log;
    TrainConfig tc;
    tc.epochs = 4;
    tc.batch_size = 64;
    tc.log = &log;
    auto out = pretrain_sasrec(split, small_backbone(), tc);
    EXPECT_EQ(out.result.epochs_run, 4u);
    EXPECT_EQ(out.result.history.size(), 4u);
    const double now = evaluate(*out.model, split, EvalTarget::valid, {10}).ndcg_at(10);
    EXPECT_EQ(now, out.result.best_valid_ndcg10);
    EXPECT_GE(out.result.best_valid_ndcg10, out.result.initial_valid_ndcg10);
    EXPECT_EQ(log.str().rfind("epoch=1 train_loss=", 0), 0u);
    EXPECT_NE(log.str().find("\nepoch=4 "), std::string::npos);
}

TEST(Train, PatienceStopsEarly) {
    const auto& split = small_split();
    TrainConfig tc;
    tc.epochs = 50;
    tc.batch_size = 64;
    tc.patience = 1;
    tc.adam.lr = 1e-9;  // no measurable progress
    auto out = pretrain_sasrec(split, small_backbone(), tc);
    EXPECT_LT(out.result.epochs_run, 50u);
}

TEST(Pipeline, ZeroFinetuneEpochsMatchesGraftedModel) {
    const auto& split = small_split();
    auto out = run_pipeline(split, small_pipeline(3, 0));
    expect_same_params(*out.finetuned, *out.grafted);
    auto a = evaluate(*out.finetuned, split, EvalTarget::test, kDefaultKs, 256, true);
    auto b = evaluate(*out.grafted, split, EvalTarget::test, kDefaultKs, 256, true);
    EXPECT_EQ(a.ranks, b.ranks);
    EXPECT_EQ(a.ndcg, b.ndcg);
}

TEST(Pipeline, FinetuneDoesNotForgetAndIsDeterministic) {
    const auto& split = small_split();
    auto a = run_pipeline(split, small_pipeline(4, 3));
    const double at_graft = evaluate(*a.grafted, split, EvalTarget::valid, {10}).ndcg_at(10);
    const double after = evaluate(*a.finetuned, split, EvalTarget::valid, {10}).ndcg_at(10);
    EXPECT_EQ(at_graft, a.finetune_result.initial_valid_ndcg10);
    EXPECT_GE(after, at_graft - 0.005);
    auto b = run_pipeline(split, small_pipeline(4, 3));
    expect_same_params(*a.pretrained, *b.pretrained);
    expect_same_params(*a.finetuned, *b.finetuned);
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

TEST(Metrics, RankThreeContributesHalf) {
    std::vector<double> s{0.9, 0.8, 0.7, 0.1, 0.0};
    EXPECT_EQ(target_rank(s, 3), 3u);
    auto r = evaluate_scores({s}, {3});
    EXPECT_DOUBLE_EQ(r.ndcg_at(5), 0.5);
    EXPECT_EQ(r.hr_at(5), 1.0);
}

TEST(Metrics, RankSixCountsFromTenOnly) {
    auto r = report_from_ranks({6}, kDefaultKs);
    EXPECT_EQ(r.hr_at(5), 0.0);
    EXPECT_EQ(r.hr_at(10), 1.0);
    EXPECT_EQ(r.hr_at(20), 1.0);
    EXPECT_EQ(r.ndcg_at(5), 0.0);
    EXPECT_NEAR(r.ndcg_at(10), 1.0 / std::log2(7.0), 1e-15);
}

TEST(Metrics, AllFirstRanksArePerfect) {
    auto r = report_from_ranks({1, 1, 1}, kDefaultKs);
    for (std::size_t k : kDefaultKs) {
        EXPECT_EQ(r.hr_at(k), 1.0);
        EXPECT_EQ(r.ndcg_at(k), 1.0);
    }
}

TEST(Metrics, TiesFollowItemIdAndSingleItemVocabulary) {
    std::vector<double> flat(8, 0.25);
    for (std::size_t t = 1; t <= 8; ++t) {
        EXPECT_EQ(target_rank(flat, t), t);
        EXPECT_EQ(metric_oracle(flat, t).rank, t);
    }
    std::vector<double> one{-3.0};
    auto c = metric_oracle(one, 1);
    for (double hr : c.hr) EXPECT_EQ(hr, 1.0);
    EXPECT_EQ(evaluate_scores({one}, {1}).hr_at(5), 1.0);
}

TEST(Metrics, TargetOutsideVocabularyRejected) {
    std::vector<double> s{1.0, 2.0};
    EXPECT_THROW(target_rank(s, 0), IndexError);
    EXPECT_THROW(target_rank(s, 3), IndexError);
}

TEST(Metrics, OracleAgreesWithEvaluateUnderTies) {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> level(0, 6);  // coarse scores force ties
    std::uniform_int_distribution<std::size_t> item(1, 40);
    std::vector<std::vector<double>> scores(200, std::vector<double>(40));
    std::vector<std::size_t> targets(200);
    for (std::size_t u = 0; u < 200; ++u) {
        for (auto& x : scores[u]) x = level(rng) * 0.5;
        targets[u] = item(rng);
    }
    auto r = evaluate_scores(scores, targets, kDefaultKs, true);
    std::vector<double> hr(3, 0.0), ndcg(3, 0.0);
    for (std::size_t u = 0; u < 200; ++u) {
        auto c = metric_oracle(scores[u], targets[u]);
        EXPECT_EQ(c.rank, r.ranks[u]);
        for (std::size_t i = 0; i < 3; ++i) {
            hr[i] += c.hr[i];
            ndcg[i] += c.ndcg[i];
        }
    }
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_DOUBLE_EQ(r.hr[i], hr[i] / 200.0);
        EXPECT_DOUBLE_EQ(r.ndcg[i], ndcg[i] / 200.0);
    }
    EXPECT_LE(r.hr_at(5), r.hr_at(10));
    EXPECT_LE(r.ndcg_at(10), r.ndcg_at(20));
}

TEST(Metrics, EvaluateMatchesOracleOnModelScores) {
    const auto& split = small_split();
    auto cfg = small_backbone();
    cfg.num_items = split.num_items;
    FameModel model(cfg, FameConfig{}, 9);
    auto r = evaluate(model, split, EvalTarget::test, kDefaultKs, 64, true);
    ForwardContext ctx;
    std::size_t u = 0;
    for (const auto& batch : eval_batches(split, EvalTarget::test, cfg.max_len, 50)) {
        auto s = model.scores(batch, ctx);
        for (std::size_t row = 0; row < batch.rows; ++row, ++u) {
            auto span = s.values().subspan(row * split.num_items, split.num_items);
            EXPECT_EQ(metric_oracle(span, batch.target_ids[row]).rank, r.ranks[u]);
        }
    }
    EXPECT_EQ(u, r.users);
}

// ---------------------------------------------------------------------------
// Ablation, reports, config
// ---------------------------------------------------------------------------

TEST(Ablation, SingleCellGridGivesOneRow) {
    AblationSpec spec;
    spec.heads = {1};
    spec.experts = {1};
    spec.base = small_pipeline(1, 1);
    spec.record_wall_time = false;
    auto cells = ablation_grid(small_split(), spec);
    ASSERT_EQ(cells.size(), 1u);
    EXPECT_TRUE(cells[0].ok) << cells[0].error;
    std::ostringstream csv;
    write_ablation_csv(csv, "toy", cells);
    std::string header, row, extra;
    std::istringstream in(csv.str());
    std::getline(in, header);
    std::getline(in, row);
    EXPECT_EQ(header, kMetricsCsvHeader);
    EXPECT_EQ(row.rfind("toy,FAME,1,1,1,", 0), 0u);
    EXPECT_EQ(row.substr(row.size() - 3), ",NA");
    EXPECT_FALSE(std::getline(in, extra));
}

TEST(Ablation, FailingCellRecordedAndGridSorted) {
    AblationSpec spec;
    spec.heads = {3, 1};  // 3 does not divide d = 16
    spec.experts = {1};
    spec.seeds = {2, 1};
    spec.base = small_pipeline(1, 0);
    spec.threads = 2;
    auto cells = ablation_grid(small_split(), spec);
    ASSERT_EQ(cells.size(), 4u);
    EXPECT_EQ(cells[0].heads, 1u);
    EXPECT_EQ(cells[0].seed, 1u);
    EXPECT_EQ(cells[1].seed, 2u);
    EXPECT_TRUE(cells[0].ok && cells[1].ok);
    EXPECT_FALSE(cells[2].ok);
    EXPECT_FALSE(cells[2].error.empty());
    EXPECT_GE(cells[0].wall_seconds, 0.0);
    std::ostringstream csv;
    write_ablation_csv(csv, "toy", cells);
    EXPECT_NE(csv.str().find("toy,FAME,3,1,1,NA,NA,NA,NA,NA,NA,NA,NA\n"), std::string::npos);
}

TEST(Ablation, EmptyGridRejected) {
    AblationSpec spec;
    spec.heads.clear();
    EXPECT_THROW(ablation_grid(small_split(), spec), ConfigError);
}

TEST(Ablation, BestCellsPreferSmallerOnTies) {
    auto cell = [](std::size_t h, std::size_t n, std::uint64_t seed, double v) {
        AblationCell c;
        c.heads = h;
        c.experts = n;
        c.seed = seed;
        c.ok = true;
        c.report = report_from_ranks({1}, kDefaultKs);
        for (auto& x : c.report.hr) x = v;
        for (auto& x : c.report.ndcg) x = v;
        return c;
    };
    std::vector<AblationCell> cells{cell(4, 2, 1, 0.3), cell(4, 2, 2, 0.5), cell(2, 2, 1, 0.4), cell(2, 4, 1, 0.4),
                                    cell(1, 2, 1, 0.1)};
    auto best = best_cells(cells);
    ASSERT_EQ(best.size(), 6u);
    EXPECT_EQ(best[0].metric, "HR@5");
    EXPECT_EQ(best[5].metric, "NDCG@20");
    for (const auto& b : best) {
        EXPECT_EQ(b.heads, 2u);
        EXPECT_EQ(b.experts, 2u);
        EXPECT_DOUBLE_EQ(b.value, 0.4);
    }
}

TEST(Report, TopItemsBreakTiesByLowerId) {
    std::vector<double> s{0.5, 0.9, 0.5, 0.9, 0.1};
    EXPECT_EQ(top_k_items(s, 3), (std::vector<std::size_t>{2, 4, 1}));
    EXPECT_EQ(top_k_items(s, 10).size(), 5u);
}

TEST(Report, CaseStudyRowsPerHeadPlusFused) {
    const auto& split = small_split();
    auto cfg = small_backbone();
    cfg.num_items = split.num_items;
    FameModel model(cfg, FameConfig{}, 5);
    auto rows = case_study(model, split, 0, 5);
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[2].head, CaseStudyRow::kFused);
    EXPECT_NEAR(rows[0].gate_weight + rows[1].gate_weight, 1.0, 1e-12);
    for (const auto& r : rows) EXPECT_EQ(r.top_items.size(), 5u);
    EXPECT_THROW(case_study(model, split, split.users.size(), 5), IndexError);
}

TEST(Config, SerializeRoundTrip) {
    RunConfig cfg;
    set_config_value(cfg, "model.heads", "4");
    set_config_value(cfg, "train.lr", "0.0005");
    set_config_value(cfg, "data.delimiter", "comma");
    set_config_value(cfg, "train.all_positions", "true");
    const auto text = serialize_config(cfg);
    std::istringstream in(text);
    auto back = parse_config(in);
    EXPECT_EQ(serialize_config(back), text);
    EXPECT_EQ(back.backbone.heads, 4u);
    EXPECT_EQ(back.pretrain.adam.lr, 0.0005);
    EXPECT_EQ(back.format.delimiter, ',');
    EXPECT_TRUE(back.pretrain.all_positions);
}

TEST(Config, UnknownKeysAndBadValuesRejected) {
    RunConfig cfg;
    EXPECT_THROW(set_config_value(cfg, "model.width", "3"), ConfigError);
    EXPECT_THROW(set_config_value(cfg, "model.heads", "two"), ConfigError);
    EXPECT_THROW(set_config_value(cfg, "train.all_positions", "maybe"), ConfigError);
    std::istringstream in("# comment\n\nmodel.d=32\nnot a pair\n");
    EXPECT_THROW(parse_config(in), ConfigError);
}
