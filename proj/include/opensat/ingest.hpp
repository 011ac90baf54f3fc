#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>

#include "opensat/embed.hpp"
#include "opensat/raster.hpp"
#include "opensat/store.hpp"
#include "opensat/tiler.hpp"

namespace opensat {

enum class IngestStage { Tiling, Embedding, Indexing, Done };

std::string_view to_string(IngestStage stage) noexcept;

using IngestProgress = std::function<void(IngestStage stage, std::size_t done, std::size_t total)>;

struct IngestOptions {
    std::string image_id;
    std::uint32_t tile_size = kDefaultTileSize;
    std::uint32_t stride = 0;  // 0 = tile_size
    std::size_t parallelism = 0;  // 0 = hardware concurrency
    std::size_t batch_size = 64;
    bool write_tiles = true;  // keep tile PNGs under <store>/tiles for evidence serving
    std::optional<std::filesystem::path> dump_tiles;
    std::string source;
    IngestProgress progress;
};

struct IngestReport {
    std::string image_id;
    TileGridSpec spec;
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    std::size_t tiles = 0;
    std::size_t undersized = 0;
};

// Image ids become path components and URL segments.
bool valid_image_id(std::string_view id) noexcept;
std::string default_image_id(const std::filesystem::path& image);

// Relative to the store root.
std::string tile_relative_path(const TileId& id);
std::string dump_tile_name(const TileId& id);

TileGridSpec grid_spec_for(std::uint32_t width, std::uint32_t height, const IngestOptions& options);

IngestReport ingest_raster(const Raster& image, Store& store, const Embedder& embedder,
                           const IngestOptions& options);
IngestReport ingest_file(const std::filesystem::path& image, Store& store, const Embedder& embedder,
                         IngestOptions options);

// World-file / aux.xml files carrying geo-referencing next to an image.
std::vector<std::filesystem::path> geo_sidecars(const std::filesystem::path& image);

}  // namespace opensat
