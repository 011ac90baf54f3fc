#include "opensat/tiler.hpp"

#include <algorithm>
#include <cstring>

#include "opensat/error.hpp"

namespace opensat {

namespace {

struct Axis {
    std::uint32_t count;
    std::uint32_t extent;
};

Axis plan_axis(std::uint32_t length, std::uint32_t tile, std::uint32_t stride) {
    if (length < tile) return {1, length};
    std::uint32_t span = length - tile;
    return {(span + stride - 1) / stride + 1, tile};
}

std::uint32_t origin(std::uint32_t index, std::uint32_t length, std::uint32_t extent,
                     std::uint32_t stride) {
    auto start = static_cast<std::uint64_t>(index) * stride;
    return static_cast<std::uint32_t>(std::min<std::uint64_t>(start, length - extent));
}

}  // namespace

TileGrid plan_grid(const TileGridSpec& spec) {
    if (spec.image_width == 0 || spec.image_height == 0) {
        throw Error(ErrorCode::EmptyImage, "image has zero width or height");
    }
    if (spec.tile_size == 0) throw Error(ErrorCode::InvalidArgument, "tile size must be positive");
    if (spec.stride == 0) throw Error(ErrorCode::InvalidArgument, "stride must be positive");

    Axis cols = plan_axis(spec.image_width, spec.tile_size, spec.stride);
    Axis rows = plan_axis(spec.image_height, spec.tile_size, spec.stride);
    bool undersized = spec.image_width < spec.tile_size || spec.image_height < spec.tile_size;

    TileGrid grid;
    grid.rows = rows.count;
    grid.cols = cols.count;
    grid.tiles.reserve(static_cast<std::size_t>(rows.count) * cols.count);
    for (std::uint32_t r = 0; r < rows.count; ++r) {
        std::uint32_t y = origin(r, spec.image_height, rows.extent, spec.stride);
        for (std::uint32_t c = 0; c < cols.count; ++c) {
            std::uint32_t x = origin(c, spec.image_width, cols.extent, spec.stride);
            grid.tiles.push_back(PlannedTile{r, c, TileRect{x, y, cols.extent, rows.extent}, undersized});
        }
    }
    return grid;
}

Raster extract_tile(const Raster& image, const TileRect& rect) {
    if (rect.width == 0 || rect.height == 0 ||
        static_cast<std::uint64_t>(rect.x) + rect.width > image.width() ||
        static_cast<std::uint64_t>(rect.y) + rect.height > image.height()) {
        throw Error(ErrorCode::RectOutOfBounds, "tile rect outside image bounds");
    }
    Raster tile(rect.width, rect.height, image.channels(), image.bit_depth());
    std::size_t bpp = image.bytes_per_pixel();
    for (std::uint32_t y = 0; y < rect.height; ++y) {
        auto src = image.row(rect.y + y).subspan(rect.x * bpp, rect.width * bpp);
        std::memcpy(tile.row(y).data(), src.data(), src.size());
    }
    return tile;
}

}  // namespace opensat
