#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "opensat/core.hpp"
#include "opensat/tiler.hpp"

namespace opensat {

inline constexpr int kStoreFormatVersion = 1;

struct TileRecord {
    TileId id;
    Embedding embedding;
    TileRect rect;
    std::optional<std::string> label;
    std::optional<std::string> tile_path;  // relative to the store root
};

struct ImageEntry {
    std::string image_id;
    TileGridSpec grid;
    std::size_t tile_count = 0;
    std::string source;
};

struct SegmentEntry {
    std::string file;
    std::size_t count = 0;
};

struct StoreManifest {
    int format_version = kStoreFormatVersion;
    std::size_t dim = 0;
    std::size_t record_count = 0;
    std::size_t imported_records = 0;
    std::string created_at;
    std::vector<ImageEntry> images;
    std::vector<SegmentEntry> segments;
    std::uint64_t labels_bytes = 0;
};

void to_json(nlohmann::json& j, const StoreManifest& m);
void from_json(const nlohmann::json& j, StoreManifest& m);

struct SimilarityRow {
    TileId id;
    TileRect rect;
    double query_sim = 0.0;
    std::vector<double> candidate_sims;
};

struct ScoredTile {
    TileId id;
    SimilarityScore score;
};

struct ScanFilter {
    std::optional<std::string> image_id;
};

// Contiguous block of vectors written by one insert_batch call.
struct Segment {
    std::size_t dim = 0;
    std::vector<TileId> ids;
    std::vector<float> vectors;  // ids.size() * dim
    std::vector<double> norms;
    std::vector<TileRect> rects;
    std::vector<std::optional<std::string>> labels;
    std::vector<std::optional<std::string>> tile_paths;

    [[nodiscard]] std::span<const float> vector(std::size_t i) const {
        return std::span(vectors).subspan(i * dim, dim);
    }
};

// Immutable view of the store; scans hold one for their whole duration.
struct StoreSnapshot {
    struct Slot {
        std::uint32_t segment;
        std::uint32_t row;
    };

    StoreManifest manifest;
    std::vector<std::shared_ptr<const Segment>> segments;
    std::vector<Slot> order;  // sorted by TileId
    std::unordered_map<TileId, Slot> index;

    [[nodiscard]] const TileId& id_at(const Slot& s) const { return segments[s.segment]->ids[s.row]; }
    [[nodiscard]] TileRecord record_at(const Slot& s) const;
};

// Flat (exact) vector index persisted as
//   manifest.json, segments/NNN.vec (binary interchange format), labels.jsonl, tiles/
// Many readers, one writer at a time (flock on LOCK). A committed batch is not
// visible until manifest.json has been atomically replaced.
class Store {
public:
    static Store create(const std::filesystem::path& root, std::size_t dim);
    static Store open(const std::filesystem::path& root);
    static Store open_or_create(const std::filesystem::path& root, std::size_t dim);
    static Store in_memory(std::size_t dim);

    Store(Store&&) noexcept;
    Store& operator=(Store&&) noexcept;
    ~Store();

    // All-or-nothing; durable on return. `image` registers the grid the records came from.
    std::size_t insert_batch(std::vector<TileRecord> records, std::optional<ImageEntry> image = {});

    [[nodiscard]] std::vector<SimilarityRow> scan_similarities(const Embedding& query,
                                                               std::span<const Embedding> candidates,
                                                               const ScanFilter& filter = {}) const;
    [[nodiscard]] std::vector<ScoredTile> top_k(const Embedding& query, std::size_t k,
                                                const ScanFilter& filter = {}) const;

    [[nodiscard]] std::shared_ptr<const StoreSnapshot> snapshot() const;
    [[nodiscard]] std::size_t size() const;
    [[nodiscard]] std::size_t dim() const;
    [[nodiscard]] bool contains(const TileId& id) const;
    [[nodiscard]] std::optional<TileRecord> get(const TileId& id) const;
    [[nodiscard]] std::optional<ImageEntry> image(const std::string& image_id) const;
    [[nodiscard]] StoreManifest manifest() const;
    [[nodiscard]] std::string manifest_digest() const;

    [[nodiscard]] bool persistent() const;
    [[nodiscard]] const std::filesystem::path& root() const;

private:
    struct State;
    explicit Store(std::unique_ptr<State> state);
    std::unique_ptr<State> state_;
};

}  // namespace opensat
