#pragma once

// Command implementations for the `fame` executable. Kept in a header so the
// test suite can run commands in-process.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "fame/fame.hpp"
#include "fame/toy.hpp"

namespace fame::cli {

namespace fs = std::filesystem;

struct Options {
    std::string config_path;
    std::vector<std::string> overrides;  // key=value
    std::uint64_t seed = 0;
    bool seed_given = false;
    std::string out_dir;
    std::size_t threads = 0;

    // command specific
    std::string input;
    std::string snapshot;
    std::string phase = "full";
    std::string checkpoint;
    std::string split = "test";
    std::string dataset_name;
    std::string case_user;
    std::size_t top_k = 10;
    std::string heads = "1,2,4,8";
    std::string experts = "2";
    std::string seeds = "1,2,3";
    bool no_timing = false;
    double threshold = 1e-4;
};

inline std::vector<std::uint64_t> parse_list(const std::string& flag, const std::string& text) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::uint64_t v = 0;
        auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
        if (item.empty() || ec != std::errc{} || ptr != item.data() + item.size()) {
            throw ConfigError(flag + ": expected a comma-separated list of non-negative integers, got '" + text + "'");
        }
        out.push_back(v);
    }
    if (out.empty()) throw ConfigError(flag + " is empty");
    return out;
}

inline RunConfig resolve_config(const Options& o) {
    RunConfig cfg;
    if (!o.config_path.empty()) cfg = load_config(o.config_path);
    for (const auto& kv : o.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!o.input.empty()) cfg.input = o.input;
    if (!o.snapshot.empty()) cfg.snapshot = o.snapshot;
    if (o.seed_given) cfg.seed = o.seed;
    if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;
    if (o.threads > 0) cfg.threads = o.threads;
    return cfg;
}

inline SequenceDataset load_dataset(const RunConfig& cfg) {
    if (!cfg.snapshot.empty()) return read_snapshot(cfg.snapshot);
    if (!cfg.input.empty()) return build_sequences(five_core_filter(parse_interactions(cfg.input, cfg.format)));
    throw ConfigError("no dataset given: pass --snapshot DIR or --input FILE");
}

inline std::string dataset_label(const Options& o, const RunConfig& cfg) {
    if (!o.dataset_name.empty()) return o.dataset_name;
    const fs::path p = !cfg.snapshot.empty() ? fs::path(cfg.snapshot) : fs::path(cfg.input);
    auto name = p.filename().string();
    if (name.empty()) name = p.parent_path().filename().string();
    return name.empty() ? "dataset" : name;
}

inline void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
}

inline void print_stats(std::ostream& out, const DatasetStats& s) {
    out << "#users\t#items\t#actions\tavg.length\tdensity\n"
        << s.users << '\t' << s.items << '\t' << s.actions << '\t' << format_fixed(s.avg_length, 2) << '\t'
        << format_fixed(100.0 * s.density, 4) << "%\n";
}

// ---------------------------------------------------------------------------

inline int cmd_ingest(const Options& o, std::ostream& out) {
    auto cfg = resolve_config(o);
    if (cfg.input.empty()) throw ConfigError("ingest needs --input FILE");
    const auto log = parse_interactions(cfg.input, cfg.format);
    const auto filtered = five_core_filter(log);
    const auto ds = build_sequences(filtered);
    const fs::path dir = cfg.snapshot.empty() ? fs::path(cfg.out_dir) / "snapshot" : fs::path(cfg.snapshot);
    write_snapshot(dir, ds);
    out << "parsed " << log.records.size() << " interactions (" << log.malformed << " malformed, " << log.duplicates
        << " duplicates dropped); " << filtered.records.size() << " remain after 5-core filtering\n";
    print_stats(out, dataset_stats(ds));
    out << "snapshot written to " << dir.string() << '\n';
    return 0;
}

inline int cmd_synth(const Options& o, std::ostream& out) {
    auto cfg = resolve_config(o);
    auto sc = cfg.synth;
    sc.seed = derive_seed(cfg.seed, "generator");
    const auto data = synthesize_facet_dataset(sc);

    std::ostringstream log;
    log << "# user\titem\ttimestamp\n";
    for (const auto& r : data.log.records) log << r.user << '\t' << r.item << '\t' << r.timestamp << '\n';
    const fs::path dir(cfg.out_dir);
    write_text(dir / "interactions.tsv", log.str());

    std::ostringstream truth;
    truth << "# item\t<id>\t<value per facet>\n# user\t<id>\t<dominant facet>\t<preferred values>\n";
    for (std::size_t i = 0; i < data.item_facets.size(); ++i) {
        truth << "item\t" << synth_item_id(i);
        for (auto v : data.item_facets[i]) truth << '\t' << v;
        truth << '\n';
    }
    for (std::size_t u = 0; u < data.user_facet.size(); ++u) {
        truth << "user\t" << synth_user_id(u) << '\t' << data.user_facet[u] << '\t';
        for (std::size_t k = 0; k < data.user_prefs[u].size(); ++k) truth << (k ? "," : "") << data.user_prefs[u][k];
        truth << '\n';
    }
    write_text(dir / "ground_truth.tsv", truth.str());
    out << "wrote " << data.log.records.size() << " interactions for " << sc.n_users << " users and " << sc.n_items
        << " items to " << (dir / "interactions.tsv").string() << '\n';
    return 0;
}

inline CheckpointMeta train_meta(const RunConfig& cfg, const std::string& phase, std::size_t epochs) {
    return {{"epochs", std::to_string(epochs)}, {"phase", phase}, {"seed", std::to_string(cfg.seed)}};
}

inline std::size_t meta_epochs(const CheckpointMeta& meta) {
    auto it = meta.find("epochs");
    if (it == meta.end()) return 0;
    std::size_t v = 0;
    std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
    return v;
}

inline std::ofstream open_log(const fs::path& path) {
    fs::create_directories(path.parent_path());
    std::ofstream log(path, std::ios::binary);
    if (!log) throw IoError("cannot write " + path.string());
    return log;
}

inline void require_file(const fs::path& path, const std::string& what) {
    if (!fs::exists(path)) throw IoError(what + " checkpoint not found: " + path.string());
}

inline int cmd_train(const Options& o, std::ostream& out) {
    auto cfg = resolve_config(o);
    const auto ds = load_dataset(cfg);
    const auto split = leave_one_out_split(ds);
    const fs::path dir(cfg.out_dir);
    const std::string& phase = o.phase;

    if (phase == "full") {
        auto pre_log = open_log(dir / "pretrain_log.txt");
        auto ft_log = open_log(dir / "finetune_log.txt");
        auto pc = cfg.pipeline();
        pc.pretrain.log = &pre_log;
        pc.finetune.log = &ft_log;
        auto result = run_pipeline(split, pc);
        const auto pre_epochs = result.pretrain_result.epochs_run;
        const auto ft_epochs = result.finetune_result.epochs_run;
        save_checkpoint(*result.pretrained, dir / "pretrained.ckpt", train_meta(cfg, "pretrain", pre_epochs));
        save_checkpoint(*result.grafted, dir / "grafted.ckpt", train_meta(cfg, "graft", pre_epochs));
        save_checkpoint(*result.finetuned, dir / "finetuned.ckpt", train_meta(cfg, "finetune", pre_epochs + ft_epochs));
        out << "pretrain: " << pre_epochs << " epochs, best valid NDCG@10 "
            << format_fixed(result.pretrain_result.best_valid_ndcg10, 6) << '\n'
            << "finetune: " << ft_epochs << " epochs, best valid NDCG@10 "
            << format_fixed(result.finetune_result.best_valid_ndcg10, 6) << '\n'
            << "wrote pretrained.ckpt, grafted.ckpt, finetuned.ckpt to " << dir.string() << '\n';
        return 0;
    }
    if (phase == "pretrain") {
        auto log = open_log(dir / "pretrain_log.txt");
        auto tc = cfg.pretrain;
        tc.seed = derive_seed(cfg.seed, "pretrain");
        tc.log = &log;
        auto res = pretrain_sasrec(split, cfg.backbone, tc);
        save_checkpoint(*res.model, dir / "pretrained.ckpt", train_meta(cfg, "pretrain", res.result.epochs_run));
        out << "pretrain: " << res.result.epochs_run << " epochs, best valid NDCG@10 "
            << format_fixed(res.result.best_valid_ndcg10, 6) << "; wrote " << (dir / "pretrained.ckpt").string()
            << '\n';
        return 0;
    }
    if (phase == "graft") {
        const fs::path src = o.checkpoint.empty() ? dir / "pretrained.ckpt" : fs::path(o.checkpoint);
        require_file(src, "pretrained");
        auto model = load_checkpoint(src);
        auto* sas = dynamic_cast<SasRec*>(model.get());
        if (!sas) throw ConfigError("graft needs a SASRec checkpoint; " + src.string() + " holds a " + model->kind() + " model");
        auto target = cfg.backbone;
        target.num_items = split.num_items;
        auto grafted = graft_fame(*sas, target, cfg.fame, derive_seed(cfg.seed, "graft"), cfg.graft);
        save_checkpoint(*grafted, dir / "grafted.ckpt", train_meta(cfg, "graft", meta_epochs(read_checkpoint_meta(src))));
        out << "grafted " << cfg.fame.experts << " experts per head onto " << src.string() << "; wrote "
            << (dir / "grafted.ckpt").string() << '\n';
        return 0;
    }
    if (phase == "finetune") {
        const fs::path src = o.checkpoint.empty() ? dir / "grafted.ckpt" : fs::path(o.checkpoint);
        require_file(src, "grafted");
        auto model = load_checkpoint(src);
        auto* fm = dynamic_cast<FameModel*>(model.get());
        if (!fm) throw ConfigError("finetune needs a grafted FAME checkpoint; " + src.string() + " holds a " + model->kind() + " model");
        if (fm->backbone().num_items != split.num_items) {
            throw IncompatibleError("checkpoint has " + std::to_string(fm->backbone().num_items) + " items, dataset has " +
                                    std::to_string(split.num_items));
        }
        auto log = open_log(dir / "finetune_log.txt");
        auto tc = cfg.finetune();
        tc.seed = derive_seed(cfg.seed, "finetune");
        tc.log = &log;
        auto res = finetune_fame(*fm, split, tc);
        const auto prior = meta_epochs(read_checkpoint_meta(src));
        save_checkpoint(*fm, dir / "finetuned.ckpt", train_meta(cfg, "finetune", prior + res.epochs_run));
        out << "finetune: " << res.epochs_run << " epochs, best valid NDCG@10 " << format_fixed(res.best_valid_ndcg10, 6)
            << "; wrote " << (dir / "finetuned.ckpt").string() << '\n';
        return 0;
    }
    throw ConfigError("--phase must be pretrain, graft, finetune or full; got '" + phase + "'");
}

inline int cmd_eval(const Options& o, std::ostream& out) {
    auto cfg = resolve_config(o);
    if (o.checkpoint.empty()) throw ConfigError("eval needs --checkpoint FILE");
    require_file(o.checkpoint, "evaluation");
    auto model = load_checkpoint(o.checkpoint);
    const auto ds = load_dataset(cfg);
    const auto split = leave_one_out_split(ds);
    if (model->backbone().num_items != split.num_items) {
        throw IncompatibleError("checkpoint has " + std::to_string(model->backbone().num_items) + " items, dataset has " +
                                std::to_string(split.num_items));
    }
    EvalTarget which;
    if (o.split == "test") which = EvalTarget::test;
    else if (o.split == "valid") which = EvalTarget::valid;
    else throw ConfigError("--split must be valid or test; got '" + o.split + "'");

    const fs::path dir(cfg.out_dir);
    const auto t0 = std::chrono::steady_clock::now();
    const auto report = evaluate(*model, split, which, kDefaultKs, cfg.pretrain.eval_batch_size);
    const double secs = o.no_timing ? -1.0 : std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const auto* fm = dynamic_cast<const FameModel*>(model.get());
    const std::string label = fm ? "FAME" : "SASRec";
    const std::size_t experts = fm ? fm->fame_config().experts : 0;
    const auto row = metrics_csv_row(dataset_label(o, cfg), label, model->backbone().heads, experts, cfg.seed, report,
                                     meta_epochs(read_checkpoint_meta(o.checkpoint)), secs);
    write_text(dir / "metrics.csv", std::string(kMetricsCsvHeader) + "\n" + row + "\n");
    out << kMetricsCsvHeader << '\n' << row << '\n';

    if (!o.case_user.empty()) {
        auto* fame_model = dynamic_cast<FameModel*>(model.get());
        if (!fame_model) throw ConfigError("--case-study needs a FAME checkpoint");
        auto it = ds.user_index.find(o.case_user);
        if (it == ds.user_index.end()) throw IndexError("unknown user id '" + o.case_user + "'");
        const auto rows = case_study(*fame_model, split, it->second, o.top_k);
        std::ostringstream csv;
        csv << "user,row,gate_weight,top_items\n";
        for (const auto& r : rows) {
            csv << o.case_user << ',' << (r.head == CaseStudyRow::kFused ? std::string("fused") : "head" + std::to_string(r.head))
                << ',' << format_fixed(r.gate_weight, 6) << ',';
            for (std::size_t k = 0; k < r.top_items.size(); ++k) csv << (k ? " " : "") << ds.item_raw[r.top_items[k]];
            csv << '\n';
        }
        write_text(dir / "case_study.csv", csv.str());
        out << csv.str();
    }
    return 0;
}

inline int cmd_ablate(const Options& o, std::ostream& out, std::ostream& err) {
    auto cfg = resolve_config(o);
    const auto ds = load_dataset(cfg);
    const auto split = leave_one_out_split(ds);

    AblationSpec spec;
    spec.dataset = dataset_label(o, cfg);
    spec.heads.clear();
    for (auto h : parse_list("--heads", o.heads)) spec.heads.push_back(h);
    spec.experts.clear();
    for (auto n : parse_list("--experts", o.experts)) spec.experts.push_back(n);
    spec.seeds = parse_list("--seeds", o.seeds);
    spec.base = cfg.pipeline();
    spec.threads = cfg.threads;
    spec.record_wall_time = !o.no_timing;

    const auto cells = ablation_grid(split, spec);
    std::ostringstream csv;
    write_ablation_csv(csv, spec.dataset, cells);
    write_text(fs::path(cfg.out_dir) / "ablation.csv", csv.str());
    out << csv.str();

    std::size_t failed = 0;
    for (const auto& c : cells) {
        if (!c.ok) {
            ++failed;
            err << "cell H=" << c.heads << " N=" << c.experts << " seed=" << c.seed << " failed: " << c.error << '\n';
        }
    }
    if (failed) err << failed << " of " << cells.size() << " cells failed\n";
    for (const auto& b : best_cells(cells)) {
        out << "best " << b.metric << ": H=" << b.heads << " N=" << b.experts << " (" << format_fixed(b.value, 6) << ")\n";
    }
    return failed == cells.size() ? static_cast<int>(Error::Category::numerical) : 0;
}

inline int cmd_gradcheck(const Options& o, std::ostream& out) {
    auto cfg = resolve_config(o);
    const auto result = toy_gradcheck(cfg.seed);
    out << "parameter\tentries\tmax_rel_error\n";
    for (const auto& e : result.per_param) {
        out << e.name << '\t' << e.count << '\t' << format_double(e.max_rel_error) << '\n';
    }
    const bool pass = result.max_rel_error < o.threshold;
    out << (pass ? "PASS" : "FAIL") << ": max relative error " << format_double(result.max_rel_error)
        << (pass ? " < " : " >= ") << format_double(o.threshold) << '\n';
    return pass ? 0 : static_cast<int>(Error::Category::numerical);
}

// ---------------------------------------------------------------------------

/// Parses `args` (without the program name), runs one command and returns the
/// process exit code: 0 success, 1 usage or config error, 2 data error,
/// 3 numerical failure.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"FAME sequential recommendation toolkit", "fame"};
    app.require_subcommand(1);
    app.fallthrough();
    Options o;
    app.add_option("--config", o.config_path, "key=value config file")->check(CLI::ExistingFile);
    app.add_option("--set", o.overrides, "override one config key (key=value), repeatable");
    app.add_option("--seed", o.seed, "root random seed")->each([&](const std::string&) { o.seed_given = true; });
    app.add_option("--out-dir", o.out_dir, "output directory");
    app.add_option("--threads", o.threads, "worker threads for ablation sweeps");

    auto* ingest = app.add_subcommand("ingest", "parse, 5-core filter and snapshot an interaction file");
    ingest->add_option("--input", o.input, "interaction file")->required();
    ingest->add_option("--snapshot", o.snapshot, "snapshot directory (default <out-dir>/snapshot)");

    auto* synth = app.add_subcommand("synth", "write a planted-facet interaction log and its ground truth");

    auto* train = app.add_subcommand("train", "pretrain, graft, fine-tune or run the whole pipeline");
    train->add_option("--phase", o.phase, "pretrain | graft | finetune | full")->capture_default_str();
    train->add_option("--checkpoint", o.checkpoint, "input checkpoint for graft or finetune");

    auto* eval = app.add_subcommand("eval", "full-ranking HR@k and NDCG@k of a checkpoint");
    eval->add_option("--checkpoint", o.checkpoint, "checkpoint to evaluate")->required();
    eval->add_option("--split", o.split, "valid | test")->capture_default_str();
    eval->add_option("--case-study", o.case_user, "raw user id for a head-importance case study");
    eval->add_option("--top-k", o.top_k, "items listed per case-study row")->capture_default_str();
    eval->add_flag("--no-timing", o.no_timing, "write NA instead of wall time");

    auto* ablate = app.add_subcommand("ablate", "sweep the pipeline over heads, experts and seeds");
    ablate->add_option("--heads", o.heads, "comma-separated H values")->capture_default_str();
    ablate->add_option("--experts", o.experts, "comma-separated N values")->capture_default_str();
    ablate->add_option("--seeds", o.seeds, "comma-separated seeds")->capture_default_str();
    ablate->add_flag("--no-timing", o.no_timing, "write NA instead of wall time");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every gradient on a toy model");
    gradcheck->add_option("--threshold", o.threshold, "maximum allowed relative error")->capture_default_str();

    for (auto* sub : {train, eval, ablate}) {
        sub->add_option("--snapshot", o.snapshot, "snapshot directory written by ingest");
        sub->add_option("--input", o.input, "raw interaction file (ingested on the fly)");
        sub->add_option("--dataset-name", o.dataset_name, "dataset label in CSV output");
    }

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : static_cast<int>(Error::Category::config);
    }

    try {
        if (*ingest) return cmd_ingest(o, out);
        if (*synth) return cmd_synth(o, out);
        if (*train) return cmd_train(o, out);
        if (*eval) return cmd_eval(o, out);
        if (*ablate) return cmd_ablate(o, out, err);
        if (*gradcheck) return cmd_gradcheck(o, out);
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return e.exit_code();
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return static_cast<int>(Error::Category::data);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return static_cast<int>(Error::Category::config);
    }
    return static_cast<int>(Error::Category::config);
}

}  // namespace fame::cli
