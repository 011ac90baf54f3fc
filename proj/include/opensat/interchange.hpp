#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "opensat/core.hpp"

namespace opensat {

// One line of the JSON Lines interchange format:
//   {"key": string, "vector": [float...], "label": string|null}
// or one record of the binary "OSAT" format (little-endian):
//   "OSAT" u32 version=1, u32 dim, u64 count, then per record
//   u16 key_len, key bytes, dim x f32, u8 has_label, [u16 label_len, label bytes]
struct EmbeddingRecord {
    std::string key;
    Embedding embedding;
    std::optional<std::string> label;
};

inline constexpr std::uint32_t kBinaryFormatVersion = 1;

struct ImportOptions {
    std::optional<std::size_t> expected_dim;
    bool require_label = false;
};

struct ImportStats {
    std::size_t records = 0;
    std::size_t normalization_fixes = 0;
    std::size_t dim = 0;
};

using RecordSink = std::function<void(EmbeddingRecord&&)>;

// Streams every record of a JSONL or binary manifest (detected from the magic
// bytes) into `sink`. Non-unit vectors are normalized and counted.
ImportStats import_embeddings(const std::filesystem::path& path, const RecordSink& sink,
                              const ImportOptions& options = {});
std::vector<EmbeddingRecord> import_embeddings(const std::filesystem::path& path,
                                               ImportStats* stats = nullptr,
                                               const ImportOptions& options = {});

// Shortest decimal representation that parses back to the same float.
std::string format_float(float value);
std::string to_jsonl_line(const EmbeddingRecord& record);
void write_jsonl(const std::filesystem::path& path, std::span<const EmbeddingRecord> records);

void write_binary(std::ostream& out, std::size_t dim, std::span<const EmbeddingRecord> records);
void write_binary(const std::filesystem::path& path, std::size_t dim,
                  std::span<const EmbeddingRecord> records);
std::vector<EmbeddingRecord> read_binary(std::istream& in, ImportStats* stats = nullptr,
                                         const ImportOptions& options = {});

}  // namespace opensat
