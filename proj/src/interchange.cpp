#include "opensat/interchange.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

namespace opensat {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'O', 'S', 'A', 'T'};

class RecordBuilder {
public:
    RecordBuilder(const ImportOptions& options, ImportStats& stats)
        : options_(options), stats_(stats) {}

    EmbeddingRecord build(std::string key, std::vector<float> values,
                          std::optional<std::string> label, const std::string& where) {
        if (values.empty()) {
            throw Error(ErrorCode::ManifestParseError, where + ": empty vector");
        }
        std::size_t expected = options_.expected_dim.value_or(stats_.dim);
        if (expected != 0 && values.size() != expected) {
            throw Error(ErrorCode::DimensionMismatch, where + ": dimension " +
                                                          std::to_string(values.size()) +
                                                          ", expected " + std::to_string(expected));
        }
        if (options_.require_label && !label) {
            throw Error(ErrorCode::ManifestParseError, where + ": missing label");
        }
        for (float v : values) {
            if (!std::isfinite(v)) {
                throw Error(ErrorCode::ManifestParseError, where + ": non-finite vector component");
            }
        }
        stats_.dim = values.size();
        double n = l2_norm(values);
        Embedding embedding = [&] {
            if (std::abs(n - 1.0) <= kUnitNormTolerance) return Embedding::unit(std::move(values));
            if (n < 1e-12) throw Error(ErrorCode::DegenerateVector, where + ": zero vector");
            ++stats_.normalization_fixes;
            return l2_normalize(Embedding(std::move(values)));
        }();
        ++stats_.records;
        return EmbeddingRecord{std::move(key), std::move(embedding), std::move(label)};
    }

private:
    const ImportOptions& options_;
    ImportStats& stats_;
};

void parse_jsonl(std::istream& in, const fs::path& path, const RecordSink& sink,
                 RecordBuilder& builder) {
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::string where = path.filename().string() + ":" + std::to_string(line_no);
        json doc;
        try {
            doc = json::parse(line);
        } catch (const json::parse_error& e) {
            throw Error(ErrorCode::ManifestParseError, where + ": " + e.what());
        }
        if (!doc.is_object() || !doc.contains("key") || !doc["key"].is_string() ||
            !doc.contains("vector") || !doc["vector"].is_array()) {
            throw Error(ErrorCode::ManifestParseError,
                        where + ": record needs a string \"key\" and an array \"vector\"");
        }
        std::vector<float> values;
        values.reserve(doc["vector"].size());
        for (const auto& v : doc["vector"]) {
            if (!v.is_number()) {
                throw Error(ErrorCode::ManifestParseError, where + ": non-numeric vector component");
            }
            values.push_back(v.get<float>());
        }
        std::optional<std::string> label;
        if (auto it = doc.find("label"); it != doc.end() && !it->is_null()) {
            if (!it->is_string()) throw Error(ErrorCode::ManifestParseError, where + ": label must be a string or null");
            label = it->get<std::string>();
        }
        sink(builder.build(doc["key"].get<std::string>(), std::move(values), std::move(label), where));
    }
}

template <typename T>
void put_le(std::ostream& out, T value) {
    std::array<char, sizeof(T)> bytes{};
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        bytes[i] = static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF);
    }
    out.write(bytes.data(), bytes.size());
}

template <typename T>
T get_le(std::istream& in, const char* what) {
    std::array<unsigned char, sizeof(T)> bytes{};
    in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
    if (!in) throw Error(ErrorCode::ManifestParseError, std::string("truncated binary manifest reading ") + what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    return static_cast<T>(v);
}

void put_f32(std::ostream& out, float value) {
    std::uint32_t bits = 0;
    std::memcpy(&bits, &value, sizeof bits);
    put_le(out, bits);
}

float get_f32(std::istream& in) {
    auto bits = get_le<std::uint32_t>(in, "vector");
    float value = 0;
    std::memcpy(&value, &bits, sizeof value);
    return value;
}

void put_string16(std::ostream& out, const std::string& s, const char* what) {
    if (s.size() > 0xFFFF) {
        throw Error(ErrorCode::InvalidArgument, std::string(what) + " longer than 65535 bytes");
    }
    put_le(out, static_cast<std::uint16_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string16(std::istream& in, const char* what) {
    auto len = get_le<std::uint16_t>(in, what);
    std::string s(len, '\0');
    in.read(s.data(), len);
    if (!in) throw Error(ErrorCode::ManifestParseError, std::string("truncated binary manifest reading ") + what);
    return s;
}

void parse_binary(std::istream& in, const RecordSink& sink, RecordBuilder& builder) {
    char magic[4] = {};
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw Error(ErrorCode::ManifestParseError, "bad magic in binary manifest");
    }
    auto version = get_le<std::uint32_t>(in, "version");
    if (version != kBinaryFormatVersion) {
        throw Error(ErrorCode::ManifestParseError, "unsupported binary manifest version " + std::to_string(version));
    }
    auto dim = get_le<std::uint32_t>(in, "dim");
    auto count = get_le<std::uint64_t>(in, "count");
    if (dim == 0 && count > 0) throw Error(ErrorCode::ManifestParseError, "binary manifest declares dim 0");
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string where = "record " + std::to_string(i);
        std::string key = get_string16(in, "key");
        std::vector<float> values(dim);
        for (auto& v : values) v = get_f32(in);
        auto has_label = get_le<std::uint8_t>(in, "label flag");
        std::optional<std::string> label;
        if (has_label == 1) {
            label = get_string16(in, "label");
        } else if (has_label != 0) {
            throw Error(ErrorCode::ManifestParseError, where + ": invalid label flag");
        }
        sink(builder.build(std::move(key), std::move(values), std::move(label), where));
    }
}

}  // namespace

std::string format_float(float value) {
    std::array<char, 32> buf{};
    auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), value);
    (void)ec;
    return std::string(buf.data(), ptr);
}

std::string to_jsonl_line(const EmbeddingRecord& record) {
    std::string line = "{\"key\": ";
    line += json(record.key).dump();
    line += ", \"vector\": [";
    auto values = record.embedding.values();
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) line += ", ";
        line += format_float(values[i]);
    }
    line += "], \"label\": ";
    line += record.label ? json(*record.label).dump() : "null";
    line += "}";
    return line;
}

void write_jsonl(const fs::path& path, std::span<const EmbeddingRecord> records) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
    for (const auto& r : records) out << to_jsonl_line(r) << '\n';
    if (!out) throw Error(ErrorCode::IoError, "short write to " + path.string());
}

void write_binary(std::ostream& out, std::size_t dim, std::span<const EmbeddingRecord> records) {
    out.write(kMagic, 4);
    put_le(out, kBinaryFormatVersion);
    put_le(out, static_cast<std::uint32_t>(dim));
    put_le(out, static_cast<std::uint64_t>(records.size()));
    for (const auto& r : records) {
        require_same_dim(r.embedding.dim(), dim, "write_binary");
        put_string16(out, r.key, "key");
        for (float v : r.embedding.values()) put_f32(out, v);
        put_le(out, static_cast<std::uint8_t>(r.label ? 1 : 0));
        if (r.label) put_string16(out, *r.label, "label");
    }
}

void write_binary(const fs::path& path, std::size_t dim, std::span<const EmbeddingRecord> records) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
    write_binary(out, dim, records);
    out.flush();
    if (!out) throw Error(ErrorCode::IoError, "short write to " + path.string());
}

std::vector<EmbeddingRecord> read_binary(std::istream& in, ImportStats* stats,
                                         const ImportOptions& options) {
    ImportStats local;
    RecordBuilder builder(options, local);
    std::vector<EmbeddingRecord> out;
    parse_binary(in, [&](EmbeddingRecord&& r) { out.push_back(std::move(r)); }, builder);
    if (stats) *stats = local;
    return out;
}

ImportStats import_embeddings(const fs::path& path, const RecordSink& sink,
                              const ImportOptions& options) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::ManifestParseError, "cannot open manifest " + path.string());
    ImportStats stats;
    RecordBuilder builder(options, stats);
    char head[4] = {};
    in.read(head, 4);
    bool binary = in.gcount() == 4 && std::memcmp(head, kMagic, 4) == 0;
    in.clear();
    in.seekg(0);
    if (binary) {
        parse_binary(in, sink, builder);
    } else {
        parse_jsonl(in, path, sink, builder);
    }
    if (stats.normalization_fixes > 0) {
        spdlog::info("{}: normalized {} of {} vectors", path.filename().string(),
                     stats.normalization_fixes, stats.records);
    }
    return stats;
}

std::vector<EmbeddingRecord> import_embeddings(const fs::path& path, ImportStats* stats,
                                               const ImportOptions& options) {
    std::vector<EmbeddingRecord> out;
    auto s = import_embeddings(path, [&](EmbeddingRecord&& r) { out.push_back(std::move(r)); }, options);
    if (stats) *stats = s;
    return out;
}

}  // namespace opensat
