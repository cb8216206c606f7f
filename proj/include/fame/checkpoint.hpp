#pragma once

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "fame/backbone.hpp"
#include "fame/error.hpp"
#include "fame/fame_layer.hpp"

namespace fame {

// Layout (all integers and doubles little-endian):
//   "FAMECKPT" | u32 version | u32 header_len | header (key=value lines)
//   u32 entry_count | entries...
//   entry: u32 name_len | name | u32 rank | u64 extent * rank | f64 * numel
inline constexpr char kCheckpointMagic[8] = {'F', 'A', 'M', 'E', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void put_le(std::ostream& out, T value) {
    static_assert(std::is_unsigned_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) out.put(static_cast<char>((value >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(std::istream& in) {
    static_assert(std::is_unsigned_v<T>);
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        const int c = in.get();
        if (c == std::char_traits<char>::eof()) throw FormatError("checkpoint truncated");
        value |= static_cast<T>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return value;
}

inline std::map<std::string, std::string> parse_header(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("bad checkpoint header line: " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

inline const std::string& header_field(const std::map<std::string, std::string>& kv, const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("checkpoint header lacks " + key);
    return it->second;
}

}  // namespace detail

/// Free-form provenance stored in the header as `meta.<key>=value` lines.
using CheckpointMeta = std::map<std::string, std::string>;

inline std::string checkpoint_header(const Recommender& model, const CheckpointMeta& meta = {}) {
    const auto& c = model.backbone();
    std::ostringstream os;
    os << "kind=" << model.kind() << '\n'
       << "num_items=" << c.num_items << '\n'
       << "d=" << c.d << '\n'
       << "heads=" << c.heads << '\n'
       << "blocks=" << c.blocks << '\n'
       << "max_len=" << c.max_len << '\n'
       << "dropout=" << format_double(c.dropout) << '\n';
    if (const auto* f = dynamic_cast<const FameModel*>(&model)) {
        os << "experts=" << f->fame_config().experts << '\n'
           << "bypass_router=" << (f->fame_config().bypass_router ? 1 : 0) << '\n';
    }
    for (const auto& [k, v] : meta) {
        if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
            throw ContractError("checkpoint meta entries must be single-line key=value");
        }
        os << "meta." << k << '=' << v << '\n';
    }
    return os.str();
}

inline void save_checkpoint(const Recommender& model, std::ostream& out, const CheckpointMeta& meta = {}) {
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put_le<std::uint32_t>(out, kCheckpointVersion);
    const auto header = checkpoint_header(model, meta);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    const auto& entries = model.parameters().entries();
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
    for (const auto& [name, t] : entries) {
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (auto e : t.shape()) detail::put_le<std::uint64_t>(out, e);
        for (double v : t.values()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
}

inline void save_checkpoint(const Recommender& model, const std::filesystem::path& path,
                            const CheckpointMeta& meta = {}) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    save_checkpoint(model, out, meta);
}

namespace detail {

inline std::map<std::string, std::string> read_header(std::istream& in) {
    char magic[sizeof(kCheckpointMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) throw FormatError("not a FAME checkpoint");
    const auto version = get_le<std::uint32_t>(in);
    if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const auto header_len = get_le<std::uint32_t>(in);
    std::string header(header_len, '\0');
    in.read(header.data(), header_len);
    if (!in) throw FormatError("checkpoint truncated in header");
    return parse_header(header);
}

inline std::size_t header_size(const std::map<std::string, std::string>& kv, const std::string& key) {
    const auto& v = header_field(kv, key);
    std::size_t out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) throw FormatError("checkpoint header " + key + " is not an integer: " + v);
    return out;
}

}  // namespace detail

/// The `meta.` entries of a checkpoint header, keys without the prefix.
inline CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint " + path.string());
    CheckpointMeta meta;
    for (const auto& [k, v] : detail::read_header(in)) {
        if (k.rfind("meta.", 0) == 0) meta[k.substr(5)] = v;
    }
    return meta;
}

inline std::unique_ptr<Recommender> load_checkpoint(std::istream& in) {
    const auto kv = detail::read_header(in);

    BackboneConfig cfg;
    cfg.num_items = detail::header_size(kv, "num_items");
    cfg.d = detail::header_size(kv, "d");
    cfg.heads = detail::header_size(kv, "heads");
    cfg.blocks = detail::header_size(kv, "blocks");
    cfg.max_len = detail::header_size(kv, "max_len");
    {
        const auto& v = detail::header_field(kv, "dropout");
        auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), cfg.dropout);
        if (ec != std::errc{} || ptr != v.data() + v.size()) throw FormatError("checkpoint header dropout is not a number: " + v);
    }
    const auto& kind = detail::header_field(kv, "kind");
    std::unique_ptr<Recommender> model;
    if (kind == "sasrec") {
        model = std::make_unique<SasRec>(cfg, 0);
    } else if (kind == "fame") {
        FameConfig fc;
        fc.experts = detail::header_size(kv, "experts");
        fc.bypass_router = detail::header_field(kv, "bypass_router") == "1";
        model = std::make_unique<FameModel>(cfg, fc, 0);
    } else {
        throw FormatError("unknown model kind " + kind);
    }

    auto& params = model->parameters();
    const auto count = detail::get_le<std::uint32_t>(in);
    if (count != params.size()) {
        throw FormatError("checkpoint has " + std::to_string(count) + " tensors, model expects " +
                          std::to_string(params.size()));
    }
    for (std::uint32_t e = 0; e < count; ++e) {
        const auto name_len = detail::get_le<std::uint32_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (!in) throw FormatError("checkpoint truncated in entry names");
        if (!params.contains(name)) throw FormatError("checkpoint tensor " + name + " is not part of a " + kind + " model");
        auto t = params.get(name);
        const auto rank = detail::get_le<std::uint32_t>(in);
        Shape shape(rank);
        for (auto& ext : shape) ext = static_cast<std::size_t>(detail::get_le<std::uint64_t>(in));
        if (shape != t.shape()) {
            throw FormatError("tensor " + name + " has shape " + shape_str(shape) + ", model expects " +
                              shape_str(t.shape()));
        }
        for (auto& v : t.values()) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(in));
    }
    return model;
}

inline std::unique_ptr<Recommender> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint " + path.string());
    return load_checkpoint(in);
}

}  // namespace fame
