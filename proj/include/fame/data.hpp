#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fame/error.hpp"
#include "fame/ops.hpp"

namespace fame {

// ---------------------------------------------------------------------------
// Raw interaction logs
// ---------------------------------------------------------------------------

struct Interaction {
    std::string user;
    std::string item;
    std::int64_t timestamp = 0;

    bool operator==(const Interaction&) const = default;
};

struct InteractionLog {
    std::vector<Interaction> records;
    std::size_t malformed = 0;   // rows rejected by the parser
    std::size_t duplicates = 0;  // exact (user, item, timestamp) repeats dropped
};

/// Column layout of a delimiter-separated interaction file. Columns beyond the
/// three used ones are ignored (e.g. a rating column).
struct FormatSpec {
    char delimiter = '\t';
    std::size_t user_col = 0;
    std::size_t item_col = 1;
    std::size_t time_col = 2;
    bool skip_header = false;
};

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line, char delim) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(delim, start);
        if (pos == std::string_view::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\r' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\r' || s.back() == '\t')) s.remove_suffix(1);
    return s;
}

inline bool parse_timestamp(std::string_view s, std::int64_t& out) {
    s = trim(s);
    if (s.empty()) return false;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc{}) return false;
    // Accept a fractional suffix of zeros ("1360000000.0").
    if (ptr != s.data() + s.size()) {
        if (*ptr != '.') return false;
        for (++ptr; ptr != s.data() + s.size(); ++ptr) {
            if (*ptr != '0') return false;
        }
    }
    return out >= 0;
}

struct InteractionHash {
    std::size_t operator()(const Interaction& r) const noexcept {
        const auto h1 = std::hash<std::string>{}(r.user);
        const auto h2 = std::hash<std::string>{}(r.item);
        const auto h3 = std::hash<std::int64_t>{}(r.timestamp);
        return h1 ^ (h2 * 0x9e3779b97f4a7c15ULL) ^ (h3 + 0x7f4a7c159e3779b9ULL + (h1 << 6));
    }
};

}  // namespace detail

/// Reads one interaction per line. Lines starting with '#' and blank lines
/// are skipped; rows that fail to parse are counted in `malformed`.
inline InteractionLog parse_interactions(std::istream& in, const FormatSpec& fmt) {
    InteractionLog log;
    std::unordered_set<Interaction, detail::InteractionHash> seen;
    std::string line;
    std::size_t data_rows = 0;
    bool header_pending = fmt.skip_header;
    const std::size_t needed = std::max({fmt.user_col, fmt.item_col, fmt.time_col}) + 1;
    while (std::getline(in, line)) {
        std::string_view view = detail::trim(line);
        if (view.empty() || view.front() == '#') continue;
        if (header_pending) {
            header_pending = false;
            continue;
        }
        ++data_rows;
        const auto fields = detail::split_fields(view, fmt.delimiter);
        Interaction rec;
        if (fields.size() < needed || !detail::parse_timestamp(fields[fmt.time_col], rec.timestamp)) {
            ++log.malformed;
            continue;
        }
        rec.user = std::string(detail::trim(fields[fmt.user_col]));
        rec.item = std::string(detail::trim(fields[fmt.item_col]));
        if (rec.user.empty() || rec.item.empty()) {
            ++log.malformed;
            continue;
        }
        if (!seen.insert(rec).second) {
            ++log.duplicates;
            continue;
        }
        log.records.push_back(std::move(rec));
    }
    if (data_rows > 0 && 2 * log.malformed > data_rows) {
        throw FormatError(std::to_string(log.malformed) + " of " + std::to_string(data_rows) +
                          " rows are malformed; check the delimiter and column flags");
    }
    return log;
}

inline InteractionLog parse_interactions(const std::filesystem::path& path, const FormatSpec& fmt) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read interaction file " + path.string());
    return parse_interactions(in, fmt);
}

/// Iteratively drops users and items with fewer than `min_count` interactions
/// until both constraints hold at once. Record order is preserved.
inline InteractionLog five_core_filter(const InteractionLog& log, std::size_t min_count = 5) {
    std::unordered_map<std::string, std::size_t> user_index, item_index;
    std::vector<std::size_t> rec_user(log.records.size()), rec_item(log.records.size());
    for (std::size_t r = 0; r < log.records.size(); ++r) {
        rec_user[r] = user_index.try_emplace(log.records[r].user, user_index.size()).first->second;
        rec_item[r] = item_index.try_emplace(log.records[r].item, item_index.size()).first->second;
    }
    const std::size_t nu = user_index.size(), ni = item_index.size();
    std::vector<std::vector<std::size_t>> user_recs(nu), item_recs(ni);
    for (std::size_t r = 0; r < log.records.size(); ++r) {
        user_recs[rec_user[r]].push_back(r);
        item_recs[rec_item[r]].push_back(r);
    }
    std::vector<std::size_t> user_count(nu), item_count(ni);
    for (std::size_t u = 0; u < nu; ++u) user_count[u] = user_recs[u].size();
    for (std::size_t i = 0; i < ni; ++i) item_count[i] = item_recs[i].size();

    // Peel: node ids < nu are users, the rest are items.
    std::vector<std::uint8_t> alive(log.records.size(), 1), queued(nu + ni, 0);
    std::vector<std::size_t> queue;
    for (std::size_t u = 0; u < nu; ++u) {
        if (user_count[u] < min_count) queue.push_back(u), queued[u] = 1;
    }
    for (std::size_t i = 0; i < ni; ++i) {
        if (item_count[i] < min_count) queue.push_back(nu + i), queued[nu + i] = 1;
    }
    while (!queue.empty()) {
        const std::size_t node = queue.back();
        queue.pop_back();
        const bool is_user = node < nu;
        const auto& recs = is_user ? user_recs[node] : item_recs[node - nu];
        for (std::size_t r : recs) {
            if (!alive[r]) continue;
            alive[r] = 0;
            if (is_user) {
                const std::size_t i = rec_item[r];
                if (--item_count[i] < min_count && !queued[nu + i]) queue.push_back(nu + i), queued[nu + i] = 1;
            } else {
                const std::size_t u = rec_user[r];
                if (--user_count[u] < min_count && !queued[u]) queue.push_back(u), queued[u] = 1;
            }
        }
    }

    InteractionLog out;
    for (std::size_t r = 0; r < log.records.size(); ++r) {
        if (alive[r]) out.records.push_back(log.records[r]);
    }
    if (out.records.empty()) {
        throw EmptyDatasetError("no interactions survive the " + std::to_string(min_count) + "-core filter");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sequences and splits
// ---------------------------------------------------------------------------

inline constexpr std::size_t kPaddingId = 0;

/// Per-user chronological item-id sequences. Item ids are contiguous in
/// [1, num_items()]; id 0 is reserved for padding.
struct SequenceDataset {
    std::vector<std::string> user_raw;
    std::vector<std::string> item_raw;  // item_raw[0] is the padding placeholder
    std::vector<std::vector<std::size_t>> sequences;
    std::unordered_map<std::string, std::size_t> user_index;
    std::unordered_map<std::string, std::size_t> item_index;

    std::size_t num_users() const { return sequences.size(); }
    std::size_t num_items() const { return item_raw.empty() ? 0 : item_raw.size() - 1; }
    std::size_t num_actions() const {
        std::size_t n = 0;
        for (const auto& s : sequences) n += s.size();
        return n;
    }
};

struct DatasetStats {
    std::size_t users = 0;
    std::size_t items = 0;
    std::size_t actions = 0;
    double avg_length = 0.0;
    double density = 0.0;  // actions / (users * items)
};

inline DatasetStats dataset_stats(const SequenceDataset& ds) {
    DatasetStats s;
    s.users = ds.num_users();
    s.items = ds.num_items();
    s.actions = ds.num_actions();
    if (s.users > 0) s.avg_length = static_cast<double>(s.actions) / static_cast<double>(s.users);
    if (s.users > 0 && s.items > 0) {
        s.density = static_cast<double>(s.actions) / (static_cast<double>(s.users) * static_cast<double>(s.items));
    }
    return s;
}

/// Groups a filtered log per user and sorts by timestamp; equal timestamps
/// keep input order. Users and items are numbered by first appearance.
inline SequenceDataset build_sequences(const InteractionLog& log) {
    SequenceDataset ds;
    ds.item_raw.emplace_back();
    std::vector<std::vector<std::pair<std::int64_t, std::size_t>>> timed;
    for (const auto& rec : log.records) {
        auto [uit, new_user] = ds.user_index.try_emplace(rec.user, ds.user_raw.size());
        if (new_user) {
            ds.user_raw.push_back(rec.user);
            timed.emplace_back();
        }
        auto [iit, new_item] = ds.item_index.try_emplace(rec.item, ds.item_raw.size());
        if (new_item) ds.item_raw.push_back(rec.item);
        timed[uit->second].emplace_back(rec.timestamp, iit->second);
    }
    ds.sequences.reserve(timed.size());
    for (auto& events : timed) {
        std::stable_sort(events.begin(), events.end(),
                         [](const auto& a, const auto& b) { return a.first < b.first; });
        std::vector<std::size_t> seq;
        seq.reserve(events.size());
        for (const auto& [t, item] : events) seq.push_back(item);
        ds.sequences.push_back(std::move(seq));
    }
    return ds;
}

struct UserSplit {
    std::vector<std::size_t> train;
    std::size_t valid = kPaddingId;
    std::size_t test = kPaddingId;
};

/// Leave-one-out: last item is the test target, second-to-last the
/// validation target, everything before is training history.
struct SplitView {
    std::size_t num_items = 0;
    std::vector<UserSplit> users;
};

inline SplitView leave_one_out_split(const SequenceDataset& ds) {
    SplitView split;
    split.num_items = ds.num_items();
    split.users.reserve(ds.num_users());
    for (std::size_t u = 0; u < ds.num_users(); ++u) {
        const auto& seq = ds.sequences[u];
        if (seq.size() < 3) {
            throw ContractError("user " + ds.user_raw[u] + " has " + std::to_string(seq.size()) +
                                " interactions; leave-one-out needs at least 3");
        }
        UserSplit us;
        us.train.assign(seq.begin(), seq.end() - 2);
        us.valid = seq[seq.size() - 2];
        us.test = seq.back();
        split.users.push_back(std::move(us));
    }
    return split;
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

/// Left-padded, right-aligned id matrix. The last column always holds the most
/// recent item of each row.
struct Batch {
    std::size_t rows = 0;
    std::size_t max_len = 0;
    std::vector<std::size_t> input_ids;         // rows x max_len
    std::vector<std::uint8_t> pad_mask;         // 1 where input_ids == 0
    std::vector<std::size_t> target_ids;        // next item after each row
    std::vector<std::size_t> position_targets;  // rows x max_len, 0 where none
    std::vector<std::size_t> users;

    std::size_t id(std::size_t r, std::size_t p) const { return input_ids[r * max_len + p]; }
    bool is_pad(std::size_t r, std::size_t p) const { return pad_mask[r * max_len + p] != 0; }
};

enum class EvalTarget { valid, test };

namespace detail {

/// Appends one row: the last `max_len` entries of `seq` left-padded with 0,
/// plus the shifted next-item targets (`next` follows the last input).
inline void append_row(Batch& b, const std::vector<std::size_t>& seq, std::size_t next, std::size_t user) {
    const std::size_t L = b.max_len;
    const std::size_t keep = std::min(L, seq.size());
    const std::size_t offset = seq.size() - keep;
    const std::size_t pad = L - keep;
    for (std::size_t p = 0; p < L; ++p) {
        if (p < pad) {
            b.input_ids.push_back(kPaddingId);
            b.pad_mask.push_back(1);
            b.position_targets.push_back(kPaddingId);
        } else {
            const std::size_t src = offset + (p - pad);
            b.input_ids.push_back(seq[src]);
            b.pad_mask.push_back(0);
            b.position_targets.push_back(src + 1 < seq.size() ? seq[src + 1] : next);
        }
    }
    b.target_ids.push_back(next);
    b.users.push_back(user);
    ++b.rows;
}

inline void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
    for (std::size_t i = idx.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(idx[i - 1], idx[j]);
    }
}

}  // namespace detail

/// Training batches: each user's training history minus its last item is the
/// input, that last item is the target. Rows are shuffled under `shuffle_seed`;
/// the final batch may be partial.
inline std::vector<Batch> batchify(const SplitView& split, std::size_t max_len, std::size_t batch_size,
                                   std::uint64_t shuffle_seed) {
    if (max_len == 0 || batch_size == 0) throw ParameterError("batchify needs max_len >= 1 and batch_size >= 1");
    std::vector<std::size_t> order(split.users.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(shuffle_seed);
    detail::shuffle_indices(order, rng);
    std::vector<Batch> batches;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        Batch b;
        b.max_len = max_len;
        const std::size_t end = std::min(order.size(), start + batch_size);
        for (std::size_t k = start; k < end; ++k) {
            const auto& train = split.users[order[k]].train;
            std::vector<std::size_t> input(train.begin(), train.end() - 1);
            detail::append_row(b, input, train.back(), order[k]);
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

/// Evaluation batches in user order. Validation uses the training history as
/// input; test appends the validation item to it.
inline std::vector<Batch> eval_batches(const SplitView& split, EvalTarget target, std::size_t max_len,
                                       std::size_t batch_size) {
    if (max_len == 0 || batch_size == 0) throw ParameterError("eval_batches needs max_len >= 1 and batch_size >= 1");
    std::vector<Batch> batches;
    for (std::size_t start = 0; start < split.users.size(); start += batch_size) {
        Batch b;
        b.max_len = max_len;
        const std::size_t end = std::min(split.users.size(), start + batch_size);
        for (std::size_t u = start; u < end; ++u) {
            const auto& us = split.users[u];
            if (target == EvalTarget::valid) {
                detail::append_row(b, us.train, us.valid, u);
            } else {
                auto input = us.train;
                input.push_back(us.valid);
                detail::append_row(b, input, us.test, u);
            }
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

/// Single-row batch for an arbitrary history (used by the case-study report).
inline Batch history_batch(const std::vector<std::size_t>& history, std::size_t max_len, std::size_t user = 0) {
    Batch b;
    b.max_len = max_len;
    detail::append_row(b, history, kPaddingId, user);
    return b;
}

// ---------------------------------------------------------------------------
// Planted-facet synthetic data
// ---------------------------------------------------------------------------

struct SynthConfig {
    std::size_t n_users = 500;
    std::size_t n_items = 200;
    std::size_t n_facets = 2;
    std::size_t values_per_facet = 20;
    std::size_t prefs_per_facet = 2;
    std::size_t min_seq_len = 10;
    std::size_t max_seq_len = 30;
    double noise_rate = 0.2;
    std::uint64_t seed = 1;
};

struct SyntheticData {
    InteractionLog log;
    std::vector<std::vector<std::size_t>> item_facets;  // [item][facet] -> value
    std::vector<std::size_t> user_facet;                // dominant facet per user
    std::vector<std::vector<std::size_t>> user_prefs;   // preferred values in that facet
};

inline std::string synth_user_id(std::size_t u) { return "u" + std::to_string(u); }
inline std::string synth_item_id(std::size_t i) { return "i" + std::to_string(i); }

/// Each item carries one value per facet (balanced, shuffled). Users alternate
/// dominant facets and draw `prefs_per_facet` distinct preferred values in it.
/// Each interaction is, with probability 1 - noise_rate, a uniform item from a
/// uniformly chosen preferred value; otherwise a uniform item.
inline SyntheticData synthesize_facet_dataset(const SynthConfig& cfg) {
    if (cfg.n_facets == 0) throw ParameterError("n_facets must be at least 1");
    if (cfg.n_users == 0) throw ParameterError("n_users must be at least 1");
    if (cfg.values_per_facet == 0 || cfg.values_per_facet > cfg.n_items) {
        throw ParameterError("values_per_facet must lie in [1, n_items]; got " +
                             std::to_string(cfg.values_per_facet) + " for " + std::to_string(cfg.n_items) +
                             " items");
    }
    if (cfg.prefs_per_facet == 0 || cfg.prefs_per_facet > cfg.values_per_facet) {
        throw ParameterError("prefs_per_facet must lie in [1, values_per_facet]");
    }
    if (cfg.min_seq_len == 0 || cfg.min_seq_len > cfg.max_seq_len) {
        throw ParameterError("sequence length range must satisfy 1 <= min <= max");
    }
    if (!(cfg.noise_rate >= 0.0 && cfg.noise_rate < 1.0)) throw ParameterError("noise_rate must lie in [0, 1)");

    Rng rng(cfg.seed);
    SyntheticData out;
    out.item_facets.assign(cfg.n_items, std::vector<std::size_t>(cfg.n_facets));
    // members[f][v] lists items with value v in facet f.
    std::vector<std::vector<std::vector<std::size_t>>> members(
        cfg.n_facets, std::vector<std::vector<std::size_t>>(cfg.values_per_facet));
    for (std::size_t f = 0; f < cfg.n_facets; ++f) {
        std::vector<std::size_t> order(cfg.n_items);
        std::iota(order.begin(), order.end(), std::size_t{0});
        detail::shuffle_indices(order, rng);
        for (std::size_t k = 0; k < cfg.n_items; ++k) {
            const std::size_t v = k % cfg.values_per_facet;
            out.item_facets[order[k]][f] = v;
        }
        for (std::size_t i = 0; i < cfg.n_items; ++i) members[f][out.item_facets[i][f]].push_back(i);
    }

    for (std::size_t u = 0; u < cfg.n_users; ++u) {
        const std::size_t facet = u % cfg.n_facets;
        std::vector<std::size_t> values(cfg.values_per_facet);
        std::iota(values.begin(), values.end(), std::size_t{0});
        detail::shuffle_indices(values, rng);
        values.resize(cfg.prefs_per_facet);
        std::sort(values.begin(), values.end());
        out.user_facet.push_back(facet);
        out.user_prefs.push_back(values);

        const std::size_t span = cfg.max_seq_len - cfg.min_seq_len + 1;
        const std::size_t len = cfg.min_seq_len + static_cast<std::size_t>(rng() % span);
        for (std::size_t t = 0; t < len; ++t) {
            std::size_t item;
            if (uniform01(rng) >= cfg.noise_rate) {
                const auto& pool = members[facet][values[rng() % values.size()]];
                item = pool[rng() % pool.size()];
            } else {
                item = static_cast<std::size_t>(rng() % cfg.n_items);
            }
            out.log.records.push_back({synth_user_id(u), synth_item_id(item), static_cast<std::int64_t>(t)});
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Snapshot files
// ---------------------------------------------------------------------------

/// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

inline std::string format_fixed(double v, int precision) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(precision) << v;
    return os.str();
}

/// Writes vocab.tsv (raw_id TAB id), sequences.tsv (user TAB ids) and stats.tsv.
inline void write_snapshot(const std::filesystem::path& dir, const SequenceDataset& ds) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / "vocab.tsv");
        if (!out) throw IoError("cannot write " + (dir / "vocab.tsv").string());
        for (std::size_t i = 1; i < ds.item_raw.size(); ++i) out << ds.item_raw[i] << '\t' << i << '\n';
    }
    {
        std::ofstream out(dir / "sequences.tsv");
        if (!out) throw IoError("cannot write " + (dir / "sequences.tsv").string());
        for (std::size_t u = 0; u < ds.num_users(); ++u) {
            out << ds.user_raw[u] << '\t';
            for (std::size_t k = 0; k < ds.sequences[u].size(); ++k) {
                if (k) out << ' ';
                out << ds.sequences[u][k];
            }
            out << '\n';
        }
    }
    {
        const auto s = dataset_stats(ds);
        std::ofstream out(dir / "stats.tsv");
        if (!out) throw IoError("cannot write " + (dir / "stats.tsv").string());
        out << "users\t" << s.users << '\n'
            << "items\t" << s.items << '\n'
            << "actions\t" << s.actions << '\n'
            << "avg_length\t" << format_fixed(s.avg_length, 4) << '\n'
            << "density\t" << format_fixed(s.density, 8) << '\n';
    }
}

inline SequenceDataset read_snapshot(const std::filesystem::path& dir) {
    SequenceDataset ds;
    ds.item_raw.emplace_back();
    std::ifstream vocab(dir / "vocab.tsv");
    if (!vocab) throw IoError("cannot read " + (dir / "vocab.tsv").string());
    std::string line;
    while (std::getline(vocab, line)) {
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw FormatError("bad vocab line: " + line);
        const std::string raw = line.substr(0, tab);
        std::size_t id = 0;
        const auto digits = std::string_view(line).substr(tab + 1);
        auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), id);
        if (ec != std::errc{} || ptr != digits.data() + digits.size() || id != ds.item_raw.size()) throw FormatError("vocab ids must be contiguous from 1; got " + line);
        ds.item_index.emplace(raw, id);
        ds.item_raw.push_back(raw);
    }
    std::ifstream seqs(dir / "sequences.tsv");
    if (!seqs) throw IoError("cannot read " + (dir / "sequences.tsv").string());
    while (std::getline(seqs, line)) {
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw FormatError("bad sequence line: " + line);
        const std::string user = line.substr(0, tab);
        std::istringstream ids(line.substr(tab + 1));
        std::vector<std::size_t> seq;
        std::size_t id;
        while (ids >> id) {
            if (id == kPaddingId || id > ds.num_items()) {
                throw FormatError("item id " + std::to_string(id) + " outside vocabulary for user " + user);
            }
            seq.push_back(id);
        }
        if (!ids.eof()) throw FormatError("non-numeric item id in sequence of user " + user);
        ds.user_index.emplace(user, ds.user_raw.size());
        ds.user_raw.push_back(user);
        ds.sequences.push_back(std::move(seq));
    }
    if (ds.sequences.empty()) throw EmptyDatasetError("snapshot " + dir.string() + " has no sequences");
    return ds;
}

}  // namespace fame
