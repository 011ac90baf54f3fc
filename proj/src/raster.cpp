#include "opensat/raster.hpp"

#include <algorithm>
#include <cstdarg>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

#include <jpeglib.h>
#include <png.h>
#include <tiffio.h>

#include "opensat/error.hpp"

namespace opensat {

namespace fs = std::filesystem;

namespace {

[[noreturn]] void decode_error(const std::string& what) {
    throw Error(ErrorCode::ImageDecodeError, what);
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

bool host_is_little_endian() {
    std::uint16_t probe = 1;
    std::uint8_t first = 0;
    std::memcpy(&first, &probe, 1);
    return first == 1;
}

// ---------------------------------------------------------------- PNG

struct PngReadCursor {
    std::span<const std::uint8_t> data;
    std::size_t pos = 0;
};

void png_read_from_memory(png_structp png, png_bytep out, png_size_t length) {
    auto* cursor = static_cast<PngReadCursor*>(png_get_io_ptr(png));
    if (cursor->pos + length > cursor->data.size()) {
        png_error(png, "truncated PNG stream");
    }
    std::memcpy(out, cursor->data.data() + cursor->pos, length);
    cursor->pos += length;
}

void png_error_to_jmp(png_structp png, png_const_charp message) {
    auto* buffer = static_cast<char*>(png_get_error_ptr(png));
    std::snprintf(buffer, 200, "%s", message);
    png_longjmp(png, 1);
}

void png_silent_warning(png_structp, png_const_charp) {}

Raster decode_png(std::span<const std::uint8_t> data) {
    char message[200] = "PNG decode failed";
    png_structp png =
        png_create_read_struct(PNG_LIBPNG_VER_STRING, message, png_error_to_jmp, png_silent_warning);
    if (png == nullptr) decode_error("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    PngReadCursor cursor{data, 0};
    std::vector<std::uint8_t> pixels;
    std::vector<png_bytep> rows;
    png_uint_32 width = 0;
    png_uint_32 height = 0;
    int depth = 0;
    int channels = 0;

    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        decode_error(message);
    }
    png_set_read_fn(png, &cursor, png_read_from_memory);
    png_read_info(png, info);
    int color = png_get_color_type(png, info);
    depth = png_get_bit_depth(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (depth == 16 && host_is_little_endian()) png_set_swap(png);
    png_read_update_info(png, info);
    width = png_get_image_width(png, info);
    height = png_get_image_height(png, info);
    depth = png_get_bit_depth(png, info);
    channels = png_get_channels(png, info);
    std::size_t stride = png_get_rowbytes(png, info);
    pixels.resize(stride * height);
    rows.resize(height);
    for (png_uint_32 y = 0; y < height; ++y) rows[y] = pixels.data() + y * stride;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return Raster(width, height, static_cast<std::uint32_t>(channels),
                  static_cast<std::uint32_t>(depth), std::move(pixels));
}

void png_write_to_vector(png_structp png, png_bytep data, png_size_t length) {
    auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
    out->insert(out->end(), data, data + length);
}

void png_flush_noop(png_structp) {}

// ---------------------------------------------------------------- JPEG

struct JpegErrorManager {
    jpeg_error_mgr base;
    std::jmp_buf jump;
    char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, err->message);
    std::longjmp(err->jump, 1);
}

void jpeg_silent_output(j_common_ptr) {}

Raster decode_jpeg(std::span<const std::uint8_t> data, bool header_only, RasterInfo* info_out) {
    jpeg_decompress_struct cinfo{};
    JpegErrorManager err{};
    cinfo.err = jpeg_std_error(&err.base);
    err.base.error_exit = jpeg_error_exit;
    err.base.output_message = jpeg_silent_output;
    std::vector<std::uint8_t> pixels;

    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        decode_error(std::string("JPEG decode failed: ") + err.message);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, data.data(), static_cast<unsigned long>(data.size()));
    jpeg_read_header(&cinfo, TRUE);
    if (header_only) {
        info_out->width = cinfo.image_width;
        info_out->height = cinfo.image_height;
        info_out->channels = static_cast<std::uint32_t>(cinfo.num_components);
        info_out->bit_depth = 8;
        jpeg_destroy_decompress(&cinfo);
        return {};
    }
    jpeg_start_decompress(&cinfo);
    std::uint32_t width = cinfo.output_width;
    std::uint32_t height = cinfo.output_height;
    auto channels = static_cast<std::uint32_t>(cinfo.output_components);
    std::size_t stride = static_cast<std::size_t>(width) * channels;
    pixels.resize(stride * height);
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = pixels.data() + cinfo.output_scanline * stride;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return Raster(width, height, channels, 8, std::move(pixels));
}

// ---------------------------------------------------------------- TIFF

thread_local std::string tiff_last_error;

void tiff_error_handler(const char* module, const char* fmt, va_list ap) {
    char buffer[512];
    std::vsnprintf(buffer, sizeof buffer, fmt, ap);
    tiff_last_error = std::string(module ? module : "libtiff") + ": " + buffer;
}

void install_tiff_handlers() {
    static const bool installed = [] {
        TIFFSetErrorHandler(tiff_error_handler);
        TIFFSetWarningHandler(nullptr);
        return true;
    }();
    (void)installed;
}

struct TiffMemory {
    std::span<const std::uint8_t> data;
    toff_t pos = 0;
};

tsize_t tiff_read(thandle_t h, tdata_t buf, tsize_t size) {
    auto* m = static_cast<TiffMemory*>(h);
    if (m->pos >= m->data.size()) return 0;
    auto n = std::min<toff_t>(static_cast<toff_t>(size), m->data.size() - m->pos);
    std::memcpy(buf, m->data.data() + m->pos, n);
    m->pos += n;
    return static_cast<tsize_t>(n);
}
tsize_t tiff_write(thandle_t, tdata_t, tsize_t) { return 0; }
toff_t tiff_seek(thandle_t h, toff_t off, int whence) {
    auto* m = static_cast<TiffMemory*>(h);
    switch (whence) {
        case SEEK_SET: m->pos = off; break;
        case SEEK_CUR: m->pos += off; break;
        case SEEK_END: m->pos = m->data.size() + off; break;
        default: return static_cast<toff_t>(-1);
    }
    return m->pos;
}
int tiff_close(thandle_t) { return 0; }
toff_t tiff_size(thandle_t h) { return static_cast<TiffMemory*>(h)->data.size(); }
int tiff_map(thandle_t, tdata_t*, toff_t*) { return 0; }
void tiff_unmap(thandle_t, tdata_t, toff_t) {}

struct TiffCloser {
    void operator()(TIFF* t) const { TIFFClose(t); }
};
using TiffHandle = std::unique_ptr<TIFF, TiffCloser>;

RasterInfo tiff_info(TIFF* tif) {
    std::uint32_t width = 0;
    std::uint32_t height = 0;
    std::uint16_t spp = 1;
    std::uint16_t bps = 8;
    std::uint16_t sample_format = SAMPLEFORMAT_UINT;
    TIFFGetField(tif, TIFFTAG_IMAGEWIDTH, &width);
    TIFFGetField(tif, TIFFTAG_IMAGELENGTH, &height);
    TIFFGetFieldDefaulted(tif, TIFFTAG_SAMPLESPERPIXEL, &spp);
    TIFFGetFieldDefaulted(tif, TIFFTAG_BITSPERSAMPLE, &bps);
    TIFFGetFieldDefaulted(tif, TIFFTAG_SAMPLEFORMAT, &sample_format);
    if (bps != 8 && bps != 16) decode_error("TIFF: unsupported bits per sample " + std::to_string(bps));
    if (sample_format != SAMPLEFORMAT_UINT) decode_error("TIFF: only unsigned integer samples supported");
    return RasterInfo{width, height, spp, bps, ImageFormat::Tiff};
}

Raster decode_tiff(std::span<const std::uint8_t> data, bool header_only, RasterInfo* info_out) {
    install_tiff_handlers();
    TiffMemory mem{data, 0};
    TiffHandle tif(TIFFClientOpen("memory", "rm", &mem, tiff_read, tiff_write, tiff_seek,
                                  tiff_close, tiff_size, tiff_map, tiff_unmap));
    if (!tif) decode_error("TIFF open failed: " + tiff_last_error);
    RasterInfo info = tiff_info(tif.get());
    if (header_only) {
        *info_out = info;
        return {};
    }
    if (TIFFIsTiled(tif.get())) decode_error("TIFF: tiled layout is not supported, only strips");
    std::uint16_t planar = PLANARCONFIG_CONTIG;
    TIFFGetFieldDefaulted(tif.get(), TIFFTAG_PLANARCONFIG, &planar);

    Raster out(info.width, info.height, info.channels, info.bit_depth);
    std::size_t bytes_per_sample = info.bit_depth / 8;
    std::vector<std::uint8_t> line(static_cast<std::size_t>(TIFFScanlineSize(tif.get())));
    for (std::uint32_t y = 0; y < info.height; ++y) {
        auto dst = out.row(y);
        if (planar == PLANARCONFIG_CONTIG) {
            if (TIFFReadScanline(tif.get(), line.data(), y, 0) < 0) {
                decode_error("TIFF read failed: " + tiff_last_error);
            }
            std::memcpy(dst.data(), line.data(), dst.size());
        } else {
            for (std::uint16_t s = 0; s < info.channels; ++s) {
                if (TIFFReadScanline(tif.get(), line.data(), y, s) < 0) {
                    decode_error("TIFF read failed: " + tiff_last_error);
                }
                for (std::uint32_t x = 0; x < info.width; ++x) {
                    std::memcpy(dst.data() + (x * info.channels + s) * bytes_per_sample,
                                line.data() + x * bytes_per_sample, bytes_per_sample);
                }
            }
        }
    }
    return out;
}

RasterInfo png_header_info(std::span<const std::uint8_t> data) {
    // Signature (8) + IHDR length (4) + "IHDR" (4) + width (4) + height (4) + depth + color.
    if (data.size() < 26 || std::memcmp(data.data() + 12, "IHDR", 4) != 0) {
        decode_error("PNG: missing IHDR chunk");
    }
    auto be32 = [&](std::size_t off) {
        return static_cast<std::uint32_t>(data[off]) << 24 | static_cast<std::uint32_t>(data[off + 1]) << 16 |
               static_cast<std::uint32_t>(data[off + 2]) << 8 | static_cast<std::uint32_t>(data[off + 3]);
    };
    RasterInfo info;
    info.width = be32(16);
    info.height = be32(20);
    info.bit_depth = data[24] == 16 ? 16 : 8;
    switch (data[25]) {
        case 0: info.channels = 1; break;
        case 2: info.channels = 3; break;
        case 3: info.channels = 3; break;
        case 4: info.channels = 2; break;
        case 6: info.channels = 4; break;
        default: decode_error("PNG: invalid color type");
    }
    info.format = ImageFormat::Png;
    return info;
}

}  // namespace

std::string_view to_string(ImageFormat format) noexcept {
    switch (format) {
        case ImageFormat::Png: return "png";
        case ImageFormat::Jpeg: return "jpeg";
        case ImageFormat::Tiff: return "tiff";
        case ImageFormat::Unknown: break;
    }
    return "unknown";
}

ImageFormat sniff_format(std::span<const std::uint8_t> head) noexcept {
    static constexpr std::uint8_t kPng[] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
    if (head.size() >= 8 && std::memcmp(head.data(), kPng, 8) == 0) return ImageFormat::Png;
    if (head.size() >= 3 && head[0] == 0xFF && head[1] == 0xD8 && head[2] == 0xFF) return ImageFormat::Jpeg;
    if (head.size() >= 4 && ((head[0] == 'I' && head[1] == 'I' && head[2] == 42 && head[3] == 0) ||
                             (head[0] == 'M' && head[1] == 'M' && head[2] == 0 && head[3] == 42))) {
        return ImageFormat::Tiff;
    }
    return ImageFormat::Unknown;
}

ImageFormat sniff_format(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
    std::uint8_t head[8] = {};
    in.read(reinterpret_cast<char*>(head), sizeof head);
    return sniff_format(std::span<const std::uint8_t>(head, static_cast<std::size_t>(in.gcount())));
}

Raster::Raster(std::uint32_t width, std::uint32_t height, std::uint32_t channels,
               std::uint32_t bit_depth)
    : Raster(width, height, channels, bit_depth,
             std::vector<std::uint8_t>(static_cast<std::size_t>(width) * height * channels *
                                       (bit_depth / 8))) {}

Raster::Raster(std::uint32_t width, std::uint32_t height, std::uint32_t channels,
               std::uint32_t bit_depth, std::vector<std::uint8_t> bytes)
    : width_(width), height_(height), channels_(channels), bit_depth_(bit_depth),
      bytes_(std::move(bytes)) {
    if (bit_depth != 8 && bit_depth != 16) {
        throw Error(ErrorCode::InvalidArgument, "bit depth must be 8 or 16");
    }
    if (channels == 0) throw Error(ErrorCode::InvalidArgument, "raster needs at least one channel");
    if (bytes_.size() != static_cast<std::size_t>(width) * height * bytes_per_pixel()) {
        throw Error(ErrorCode::InvalidArgument, "raster buffer size does not match dimensions");
    }
}

RasterInfo read_raster_info(const fs::path& path) {
    auto format = sniff_format(path);
    RasterInfo info;
    switch (format) {
        case ImageFormat::Png: {
            std::ifstream in(path, std::ios::binary);
            std::vector<std::uint8_t> head(33);
            in.read(reinterpret_cast<char*>(head.data()), 33);
            head.resize(static_cast<std::size_t>(in.gcount()));
            return png_header_info(head);
        }
        case ImageFormat::Jpeg: {
            auto data = read_file(path);
            decode_jpeg(data, true, &info);
            info.format = ImageFormat::Jpeg;
            return info;
        }
        case ImageFormat::Tiff: {
            auto data = read_file(path);
            decode_tiff(data, true, &info);
            return info;
        }
        case ImageFormat::Unknown: break;
    }
    throw Error(ErrorCode::UnsupportedFormat, "unsupported image format: " + path.string());
}

Raster decode_raster(std::span<const std::uint8_t> encoded) {
    Raster r;
    switch (sniff_format(encoded)) {
        case ImageFormat::Png: r = decode_png(encoded); break;
        case ImageFormat::Jpeg: r = decode_jpeg(encoded, false, nullptr); break;
        case ImageFormat::Tiff: r = decode_tiff(encoded, false, nullptr); break;
        case ImageFormat::Unknown:
            throw Error(ErrorCode::UnsupportedFormat, "unrecognised image container");
    }
    if (r.empty()) throw Error(ErrorCode::EmptyImage, "image has zero width or height");
    return r;
}

Raster load_raster(const fs::path& path) { return decode_raster(read_file(path)); }

std::vector<std::uint8_t> encode_png(const Raster& raster) {
    if (raster.channels() < 1 || raster.channels() > 4) {
        throw Error(ErrorCode::InvalidArgument, "PNG encoding supports 1-4 channels");
    }
    static constexpr int kColor[] = {0, PNG_COLOR_TYPE_GRAY, PNG_COLOR_TYPE_GRAY_ALPHA,
                                     PNG_COLOR_TYPE_RGB, PNG_COLOR_TYPE_RGB_ALPHA};
    char message[200] = "PNG encode failed";
    std::vector<std::uint8_t> out;
    png_structp png =
        png_create_write_struct(PNG_LIBPNG_VER_STRING, message, png_error_to_jmp, png_silent_warning);
    if (png == nullptr) throw Error(ErrorCode::IoError, "png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error(ErrorCode::IoError, message);
    }
    png_set_write_fn(png, &out, png_write_to_vector, png_flush_noop);
    png_set_IHDR(png, info, raster.width(), raster.height(), static_cast<int>(raster.bit_depth()),
                 kColor[raster.channels()], PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_set_compression_level(png, 6);
    png_write_info(png, info);
    if (raster.bit_depth() == 16 && host_is_little_endian()) png_set_swap(png);
    for (std::uint32_t y = 0; y < raster.height(); ++y) {
        png_write_row(png, const_cast<png_bytep>(raster.row(y).data()));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

void write_png(const Raster& raster, const fs::path& path) {
    auto bytes = encode_png(raster);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::IoError, "short write to " + path.string());
}

void write_tiff(const Raster& raster, const fs::path& path) {
    install_tiff_handlers();
    TiffHandle tif(TIFFOpen(path.string().c_str(), "w"));
    if (!tif) throw Error(ErrorCode::IoError, "cannot create " + path.string() + ": " + tiff_last_error);
    TIFFSetField(tif.get(), TIFFTAG_IMAGEWIDTH, raster.width());
    TIFFSetField(tif.get(), TIFFTAG_IMAGELENGTH, raster.height());
    TIFFSetField(tif.get(), TIFFTAG_SAMPLESPERPIXEL, static_cast<std::uint16_t>(raster.channels()));
    TIFFSetField(tif.get(), TIFFTAG_BITSPERSAMPLE, static_cast<std::uint16_t>(raster.bit_depth()));
    TIFFSetField(tif.get(), TIFFTAG_PLANARCONFIG, PLANARCONFIG_CONTIG);
    TIFFSetField(tif.get(), TIFFTAG_PHOTOMETRIC,
                 raster.channels() >= 3 ? PHOTOMETRIC_RGB : PHOTOMETRIC_MINISBLACK);
    TIFFSetField(tif.get(), TIFFTAG_COMPRESSION, COMPRESSION_NONE);
    TIFFSetField(tif.get(), TIFFTAG_ROWSPERSTRIP, TIFFDefaultStripSize(tif.get(), 0));
    for (std::uint32_t y = 0; y < raster.height(); ++y) {
        auto row = raster.row(y);
        if (TIFFWriteScanline(tif.get(), const_cast<std::uint8_t*>(row.data()), y, 0) < 0) {
            throw Error(ErrorCode::IoError, "TIFF write failed: " + tiff_last_error);
        }
    }
}

Raster downscale(const Raster& raster, std::uint32_t max_side) {
    std::uint32_t longer = std::max(raster.width(), raster.height());
    if (max_side == 0 || longer <= max_side) return raster;
    double scale = static_cast<double>(max_side) / longer;
    auto w = std::max<std::uint32_t>(1, static_cast<std::uint32_t>(raster.width() * scale));
    auto h = std::max<std::uint32_t>(1, static_cast<std::uint32_t>(raster.height() * scale));
    Raster out(w, h, raster.channels(), raster.bit_depth());
    std::size_t bpp = raster.bytes_per_pixel();
    for (std::uint32_t y = 0; y < h; ++y) {
        auto src_y = static_cast<std::uint32_t>(static_cast<std::uint64_t>(y) * raster.height() / h);
        auto src = raster.row(src_y);
        auto dst = out.row(y);
        for (std::uint32_t x = 0; x < w; ++x) {
            auto src_x = static_cast<std::size_t>(static_cast<std::uint64_t>(x) * raster.width() / w);
            std::memcpy(dst.data() + x * bpp, src.data() + src_x * bpp, bpp);
        }
    }
    return out;
}

}  // namespace opensat
