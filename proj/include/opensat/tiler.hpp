#pragma once

#include <cstdint>
#include <vector>

#include "opensat/raster.hpp"

namespace opensat {

inline constexpr std::uint32_t kDefaultTileSize = 224;

struct TileRect {
    std::uint32_t x = 0;
    std::uint32_t y = 0;
    std::uint32_t width = 0;
    std::uint32_t height = 0;

    bool operator==(const TileRect&) const = default;
};

struct TileGridSpec {
    std::uint32_t image_width = 0;
    std::uint32_t image_height = 0;
    std::uint32_t tile_size = kDefaultTileSize;
    std::uint32_t stride = kDefaultTileSize;

    bool operator==(const TileGridSpec&) const = default;
};

struct PlannedTile {
    std::uint32_t row = 0;
    std::uint32_t col = 0;
    TileRect rect;
    // Set when the image is smaller than the tile along either axis.
    bool undersized = false;
};

struct TileGrid {
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    std::vector<PlannedTile> tiles;  // row-major

    [[nodiscard]] std::size_t count() const noexcept { return tiles.size(); }
};

// Windows start every `stride` pixels; the last row/column is clamped so it
// ends exactly on the image edge, overlapping its neighbour instead of padding.
TileGrid plan_grid(const TileGridSpec& spec);

Raster extract_tile(const Raster& image, const TileRect& rect);

}  // namespace opensat
