#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace opensat {

enum class ImageFormat { Png, Jpeg, Tiff, Unknown };

std::string_view to_string(ImageFormat format) noexcept;
ImageFormat sniff_format(std::span<const std::uint8_t> head) noexcept;
ImageFormat sniff_format(const std::filesystem::path& path);

struct RasterInfo {
    std::uint32_t width = 0;
    std::uint32_t height = 0;
    std::uint32_t channels = 0;
    std::uint32_t bit_depth = 8;  // 8 or 16
    ImageFormat format = ImageFormat::Unknown;
};

// Interleaved, row-major pixel buffer. 16-bit samples are stored in host order.
class Raster {
public:
    Raster() = default;
    Raster(std::uint32_t width, std::uint32_t height, std::uint32_t channels,
           std::uint32_t bit_depth = 8);
    Raster(std::uint32_t width, std::uint32_t height, std::uint32_t channels,
           std::uint32_t bit_depth, std::vector<std::uint8_t> bytes);

    [[nodiscard]] std::uint32_t width() const noexcept { return width_; }
    [[nodiscard]] std::uint32_t height() const noexcept { return height_; }
    [[nodiscard]] std::uint32_t channels() const noexcept { return channels_; }
    [[nodiscard]] std::uint32_t bit_depth() const noexcept { return bit_depth_; }
    [[nodiscard]] std::size_t bytes_per_pixel() const noexcept {
        return static_cast<std::size_t>(channels_) * (bit_depth_ / 8);
    }
    [[nodiscard]] std::size_t row_bytes() const noexcept { return bytes_per_pixel() * width_; }
    [[nodiscard]] bool empty() const noexcept { return width_ == 0 || height_ == 0; }

    [[nodiscard]] std::span<const std::uint8_t> bytes() const noexcept { return bytes_; }
    [[nodiscard]] std::span<std::uint8_t> bytes() noexcept { return bytes_; }
    [[nodiscard]] std::span<const std::uint8_t> row(std::uint32_t y) const noexcept {
        return std::span(bytes_).subspan(y * row_bytes(), row_bytes());
    }
    [[nodiscard]] std::span<std::uint8_t> row(std::uint32_t y) noexcept {
        return std::span(bytes_).subspan(y * row_bytes(), row_bytes());
    }

    bool operator==(const Raster&) const = default;

private:
    std::uint32_t width_ = 0;
    std::uint32_t height_ = 0;
    std::uint32_t channels_ = 0;
    std::uint32_t bit_depth_ = 8;
    std::vector<std::uint8_t> bytes_;
};

// Header-only probe; does not decode pixel data.
RasterInfo read_raster_info(const std::filesystem::path& path);

Raster load_raster(const std::filesystem::path& path);
Raster decode_raster(std::span<const std::uint8_t> encoded);

// PNG supports 1-4 channels at 8 or 16 bits.
std::vector<std::uint8_t> encode_png(const Raster& raster);
void write_png(const Raster& raster, const std::filesystem::path& path);
void write_tiff(const Raster& raster, const std::filesystem::path& path);

// Nearest-neighbour reduction so the longer side is at most max_side.
Raster downscale(const Raster& raster, std::uint32_t max_side);

}  // namespace opensat
