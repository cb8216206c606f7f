#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include "fame/backbone.hpp"
#include "fame/data.hpp"
#include "fame/error.hpp"
#include "fame/fame_layer.hpp"
#include "fame/train.hpp"

namespace fame {

/// Everything a CLI run needs. Every field has a default; files use
/// `section.key=value` lines and command-line flags override them.
struct RunConfig {
    // data.
    std::string input;     // raw interaction file
    std::string snapshot;  // directory written by `ingest`
    FormatSpec format;
    SynthConfig synth;
    // model.
    BackboneConfig backbone;
    FameConfig fame;
    GraftOptions graft;
    // train.
    TrainConfig pretrain;
    std::size_t finetune_epochs = 200;
    // run.
    std::uint64_t seed = 1;
    std::string out_dir = "out";
    std::size_t threads = 1;

    TrainConfig finetune() const {
        auto t = pretrain;
        t.epochs = finetune_epochs;
        return t;
    }

    PipelineConfig pipeline() const {
        PipelineConfig p;
        p.backbone = backbone;
        p.fame = fame;
        p.graft = graft;
        p.pretrain = pretrain;
        p.finetune = finetune();
        p.seed = seed;
        return p;
    }
};

namespace detail {

struct ConfigField {
    std::string key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

inline std::size_t parse_size(const std::string& key, const std::string& v) {
    std::size_t out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return out;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
    double out = 0.0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::string bool_str(bool b) { return b ? "true" : "false"; }

inline std::string delimiter_name(char c) {
    switch (c) {
        case '\t': return "tab";
        case ',': return "comma";
        case ' ': return "space";
        case ';': return "semicolon";
        default: return std::string(1, c);
    }
}

inline char parse_delimiter(const std::string& key, const std::string& v) {
    if (v == "tab" || v == "\\t") return '\t';
    if (v == "comma") return ',';
    if (v == "space") return ' ';
    if (v == "semicolon") return ';';
    if (v.size() == 1 && v != "=") return v[0];
    throw ConfigError(key + ": expected tab, comma, space, semicolon or one character, got '" + v + "'");
}

#define FAME_SIZE_FIELD(KEY, MEMBER) \
    {KEY, [](const RunConfig& c) { return std::to_string(c.MEMBER); }, \
     [](RunConfig& c, const std::string& v) { c.MEMBER = parse_size(KEY, v); }}
#define FAME_REAL_FIELD(KEY, MEMBER) \
    {KEY, [](const RunConfig& c) { return format_double(c.MEMBER); }, \
     [](RunConfig& c, const std::string& v) { c.MEMBER = parse_real(KEY, v); }}
#define FAME_BOOL_FIELD(KEY, MEMBER) \
    {KEY, [](const RunConfig& c) { return bool_str(c.MEMBER); }, \
     [](RunConfig& c, const std::string& v) { c.MEMBER = parse_bool(KEY, v); }}
#define FAME_STRING_FIELD(KEY, MEMBER) \
    {KEY, [](const RunConfig& c) { return c.MEMBER; }, [](RunConfig& c, const std::string& v) { c.MEMBER = v; }}

inline const std::vector<ConfigField>& config_fields() {
    static const std::vector<ConfigField> fields = [] {
        std::vector<ConfigField> f = {
            FAME_STRING_FIELD("data.input", input),
            FAME_STRING_FIELD("data.snapshot", snapshot),
            {"data.delimiter", [](const RunConfig& c) { return delimiter_name(c.format.delimiter); },
             [](RunConfig& c, const std::string& v) { c.format.delimiter = parse_delimiter("data.delimiter", v); }},
            FAME_SIZE_FIELD("data.user_col", format.user_col),
            FAME_SIZE_FIELD("data.item_col", format.item_col),
            FAME_SIZE_FIELD("data.time_col", format.time_col),
            FAME_BOOL_FIELD("data.skip_header", format.skip_header),
            FAME_SIZE_FIELD("data.synth.users", synth.n_users),
            FAME_SIZE_FIELD("data.synth.items", synth.n_items),
            FAME_SIZE_FIELD("data.synth.facets", synth.n_facets),
            FAME_SIZE_FIELD("data.synth.values_per_facet", synth.values_per_facet),
            FAME_SIZE_FIELD("data.synth.prefs_per_facet", synth.prefs_per_facet),
            FAME_SIZE_FIELD("data.synth.min_len", synth.min_seq_len),
            FAME_SIZE_FIELD("data.synth.max_len", synth.max_seq_len),
            FAME_REAL_FIELD("data.synth.noise_rate", synth.noise_rate),
            FAME_SIZE_FIELD("model.d", backbone.d),
            FAME_SIZE_FIELD("model.heads", backbone.heads),
            FAME_SIZE_FIELD("model.blocks", backbone.blocks),
            FAME_SIZE_FIELD("model.max_len", backbone.max_len),
            FAME_REAL_FIELD("model.dropout", backbone.dropout),
            FAME_SIZE_FIELD("model.experts", fame.experts),
            FAME_BOOL_FIELD("model.bypass_router", fame.bypass_router),
            FAME_REAL_FIELD("model.expert_noise", graft.noise_scale),
            FAME_BOOL_FIELD("model.random_expert_init", graft.random_expert_init),
            FAME_SIZE_FIELD("train.epochs", pretrain.epochs),
            FAME_SIZE_FIELD("train.finetune_epochs", finetune_epochs),
            FAME_SIZE_FIELD("train.batch_size", pretrain.batch_size),
            FAME_REAL_FIELD("train.lr", pretrain.adam.lr),
            FAME_REAL_FIELD("train.beta1", pretrain.adam.beta1),
            FAME_REAL_FIELD("train.beta2", pretrain.adam.beta2),
            FAME_REAL_FIELD("train.adam_eps", pretrain.adam.eps),
            FAME_SIZE_FIELD("train.patience", pretrain.patience),
            FAME_BOOL_FIELD("train.all_positions", pretrain.all_positions),
            FAME_SIZE_FIELD("train.eval_batch_size", pretrain.eval_batch_size),
            {"run.seed", [](const RunConfig& c) { return std::to_string(c.seed); },
             [](RunConfig& c, const std::string& v) { c.seed = parse_u64("run.seed", v); }},
            FAME_STRING_FIELD("run.out_dir", out_dir),
            FAME_SIZE_FIELD("run.threads", threads),
        };
        std::sort(f.begin(), f.end(), [](const auto& a, const auto& b) { return a.key < b.key; });
        return f;
    }();
    return fields;
}

#undef FAME_SIZE_FIELD
#undef FAME_REAL_FIELD
#undef FAME_BOOL_FIELD
#undef FAME_STRING_FIELD

}  // namespace detail

/// Sets one `section.key` to a textual value.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& f : detail::config_fields()) {
        if (f.key == key) {
            f.set(cfg, value);
            return;
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

inline std::string get_config_value(const RunConfig& cfg, const std::string& key) {
    for (const auto& f : detail::config_fields()) {
        if (f.key == key) return f.get(cfg);
    }
    throw ConfigError("unknown config key '" + key + "'");
}

/// Applies `key=value` lines on top of `cfg`. Blank lines and lines starting
/// with '#' are ignored.
inline void apply_config(RunConfig& cfg, std::istream& in) {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto view = detail::trim(line);
        if (view.empty() || view.front() == '#') continue;
        const auto eq = view.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + " is not key=value: " + std::string(view));
        }
        set_config_value(cfg, std::string(detail::trim(view.substr(0, eq))), std::string(detail::trim(view.substr(eq + 1))));
    }
}

inline RunConfig parse_config(std::istream& in) {
    RunConfig cfg;
    apply_config(cfg, in);
    return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    return parse_config(in);
}

/// Normalized form: every key, sorted, one per line.
inline std::string serialize_config(const RunConfig& cfg) {
    std::ostringstream os;
    for (const auto& f : detail::config_fields()) os << f.key << '=' << f.get(cfg) << '\n';
    return os.str();
}

}  // namespace fame
