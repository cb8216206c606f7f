#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <tuple>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fame/data.hpp"
#include "fame/error.hpp"
#include "fame/metrics.hpp"
#include "fame/train.hpp"

namespace fame {

inline const char* const kMetricsCsvHeader =
    "dataset,model,H,N,seed,HR@5,HR@10,HR@20,NDCG@5,NDCG@10,NDCG@20,epochs,wall_seconds";

/// One metrics CSV row. A negative wall time is written as NA so that runs
/// meant to be compared byte for byte can leave timing out.
inline std::string metrics_csv_row(const std::string& dataset, const std::string& model, std::size_t heads,
                                   std::size_t experts, std::uint64_t seed, const EvalReport& r,
                                   std::size_t epochs, double wall_seconds) {
    std::ostringstream os;
    os << dataset << ',' << model << ',' << heads << ',' << experts << ',' << seed;
    for (std::size_t k : kDefaultKs) os << ',' << format_fixed(r.hr_at(k), 6);
    for (std::size_t k : kDefaultKs) os << ',' << format_fixed(r.ndcg_at(k), 6);
    os << ',' << epochs << ',' << (wall_seconds < 0.0 ? std::string("NA") : format_fixed(wall_seconds, 3));
    return os.str();
}

struct AblationSpec {
    std::string dataset = "synthetic";
    std::vector<std::size_t> heads{1};
    std::vector<std::size_t> experts{2};
    std::vector<std::uint64_t> seeds{1};
    PipelineConfig base;  // backbone.heads, fame.experts and seed are overwritten per cell
    EvalTarget target = EvalTarget::test;
    std::size_t threads = 1;
    bool record_wall_time = true;
};

struct AblationCell {
    std::size_t heads = 0;
    std::size_t experts = 0;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    EvalReport report;
    std::size_t epochs = 0;
    double wall_seconds = -1.0;
};

inline AblationCell run_ablation_cell(const SplitView& split, const AblationSpec& spec, std::size_t heads,
                                      std::size_t experts, std::uint64_t seed) {
    AblationCell cell;
    cell.heads = heads;
    cell.experts = experts;
    cell.seed = seed;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        auto cfg = spec.base;
        cfg.backbone.heads = heads;
        cfg.fame.experts = experts;
        cfg.seed = seed;
        cfg.pretrain.log = nullptr;
        cfg.finetune.log = nullptr;
        auto out = run_pipeline(split, cfg);
        cell.report = evaluate(*out.finetuned, split, spec.target, kDefaultKs, cfg.finetune.eval_batch_size);
        cell.epochs = out.pretrain_result.epochs_run + out.finetune_result.epochs_run;
        cell.ok = true;
    } catch (const std::exception& e) {
        cell.error = e.what();
    }
    if (spec.record_wall_time) {
        cell.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    return cell;
}

/// Runs the full pipeline for every (H, N, seed) cell. Cells are independent,
/// so up to spec.threads of them run at once. A failing cell is recorded and
/// the rest of the grid still runs. Output is sorted by (H, N, seed).
inline std::vector<AblationCell> ablation_grid(const SplitView& split, const AblationSpec& spec) {
    if (spec.heads.empty() || spec.experts.empty() || spec.seeds.empty()) {
        throw ConfigError("ablation grid needs at least one H, one N and one seed");
    }
    std::vector<AblationCell> cells;
    for (auto h : spec.heads)
        for (auto n : spec.experts)
            for (auto s : spec.seeds) {
                AblationCell c;
                c.heads = h;
                c.experts = n;
                c.seed = s;
                cells.push_back(std::move(c));
            }
    std::sort(cells.begin(), cells.end(), [](const AblationCell& a, const AblationCell& b) {
        return std::tie(a.heads, a.experts, a.seed) < std::tie(b.heads, b.experts, b.seed);
    });

    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) {
            cells[i] = run_ablation_cell(split, spec, cells[i].heads, cells[i].experts, cells[i].seed);
        }
    };
    const std::size_t n_threads = std::clamp<std::size_t>(spec.threads, 1, cells.size());
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    return cells;
}

/// Grid CSV. Failed cells keep their row with NA metrics.
inline void write_ablation_csv(std::ostream& os, const std::string& dataset, const std::vector<AblationCell>& cells) {
    os << kMetricsCsvHeader << '\n';
    for (const auto& c : cells) {
        if (c.ok) {
            os << metrics_csv_row(dataset, "FAME", c.heads, c.experts, c.seed, c.report, c.epochs, c.wall_seconds)
               << '\n';
        } else {
            os << dataset << ",FAME," << c.heads << ',' << c.experts << ',' << c.seed
               << ",NA,NA,NA,NA,NA,NA,NA,NA\n";
        }
    }
}

struct BestCell {
    std::string metric;
    std::size_t heads = 0;
    std::size_t experts = 0;
    double value = 0.0;  // mean over the seeds that succeeded
};

/// Best (H, N) per metric by seed-averaged value. Ties go to the smaller H,
/// then the smaller N. Metrics with no successful cell are omitted.
inline std::vector<BestCell> best_cells(const std::vector<AblationCell>& cells) {
    struct Group {
        std::size_t h, n;
        std::vector<const AblationCell*> runs;
    };
    std::vector<Group> groups;
    for (const auto& c : cells) {
        if (!c.ok) continue;
        auto it = std::find_if(groups.begin(), groups.end(),
                               [&](const Group& g) { return g.h == c.heads && g.n == c.experts; });
        if (it == groups.end()) {
            groups.push_back({c.heads, c.experts, {}});
            it = groups.end() - 1;
        }
        it->runs.push_back(&c);
    }
    std::sort(groups.begin(), groups.end(),
              [](const Group& a, const Group& b) { return std::tie(a.h, a.n) < std::tie(b.h, b.n); });

    std::vector<BestCell> out;
    if (groups.empty()) return out;
    for (int family = 0; family < 2; ++family) {
        for (std::size_t k : kDefaultKs) {
            BestCell best;
            best.metric = (family == 0 ? "HR@" : "NDCG@") + std::to_string(k);
            bool have = false;
            for (const auto& g : groups) {
                double total = 0.0;
                for (const auto* c : g.runs) total += family == 0 ? c->report.hr_at(k) : c->report.ndcg_at(k);
                const double mean = total / static_cast<double>(g.runs.size());
                // groups are visited in (H, N) order, so strict > keeps the smaller cell on ties
                if (!have || mean > best.value) {
                    best.heads = g.h;
                    best.experts = g.n;
                    best.value = mean;
                    have = true;
                }
            }
            out.push_back(best);
        }
    }
    return out;
}

}  // namespace fame
