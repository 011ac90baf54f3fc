#include "opensat/ingest.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include <spdlog/spdlog.h>

namespace opensat {

namespace fs = std::filesystem;

std::string_view to_string(IngestStage stage) noexcept {
    switch (stage) {
        case IngestStage::Tiling: return "tiling";
        case IngestStage::Embedding: return "embedding";
        case IngestStage::Indexing: return "indexing";
        case IngestStage::Done: return "done";
    }
    return "tiling";
}

bool valid_image_id(std::string_view id) noexcept {
    if (id.empty() || id.size() > 128 || id == "." || id == "..") return false;
    return std::all_of(id.begin(), id.end(), [](char c) {
        return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '-' ||
               c == '_' || c == '.';
    });
}

std::string default_image_id(const fs::path& image) {
    std::string id = image.stem().string();
    for (char& c : id) {
        if (!valid_image_id(std::string_view(&c, 1))) c = '_';
    }
    return id.empty() ? "image" : id;
}

std::string tile_relative_path(const TileId& id) {
    return "tiles/" + id.image_id + "/" + std::to_string(id.row) + "_" + std::to_string(id.col) + ".png";
}

std::string dump_tile_name(const TileId& id) {
    return id.image_id + "_" + std::to_string(id.row) + "_" + std::to_string(id.col) + ".png";
}

TileGridSpec grid_spec_for(std::uint32_t width, std::uint32_t height, const IngestOptions& options) {
    return TileGridSpec{width, height, options.tile_size, options.stride ? options.stride : options.tile_size};
}

namespace {

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
}

}  // namespace

IngestReport ingest_raster(const Raster& image, Store& store, const Embedder& embedder,
                           const IngestOptions& options) {
    if (!valid_image_id(options.image_id)) {
        throw Error(ErrorCode::InvalidArgument, "invalid image id '" + options.image_id + "'");
    }
    require_same_dim(embedder.dim(), store.dim(), "embedder vs store");
    if (store.image(options.image_id)) {
        throw Error(ErrorCode::Conflict, "image '" + options.image_id + "' already indexed");
    }
    auto report_progress = [&](IngestStage stage, std::size_t done, std::size_t total) {
        if (options.progress) options.progress(stage, done, total);
    };

    TileGridSpec spec = grid_spec_for(image.width(), image.height(), options);
    TileGrid grid = plan_grid(spec);
    const std::size_t total = grid.count();
    report_progress(IngestStage::Tiling, 0, total);

    const bool keep_tiles = options.write_tiles && store.persistent();
    if (keep_tiles) fs::create_directories(store.root() / "tiles" / options.image_id);
    if (options.dump_tiles) fs::create_directories(*options.dump_tiles);

    std::vector<TileRecord> records(total, TileRecord{{}, Embedding({0.0f}), {}, {}, {}});
    const std::size_t batch = std::max<std::size_t>(1, options.batch_size);
    const std::size_t batches = (total + batch - 1) / batch;
    std::size_t workers = options.parallelism ? options.parallelism : std::thread::hardware_concurrency();
    workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(1, batches));

    std::atomic<std::size_t> next_batch{0};
    std::atomic<std::size_t> done{0};
    std::mutex progress_mutex;
    std::exception_ptr failure;
    std::mutex failure_mutex;

    auto work = [&] {
        for (;;) {
            std::size_t b = next_batch.fetch_add(1);
            if (b >= batches) return;
            {
                std::lock_guard lock(failure_mutex);
                if (failure) return;
            }
            try {
                std::size_t begin = b * batch;
                std::size_t end = std::min(total, begin + batch);
                std::vector<Raster> pixels;
                pixels.reserve(end - begin);
                for (std::size_t i = begin; i < end; ++i) {
                    const auto& planned = grid.tiles[i];
                    pixels.push_back(extract_tile(image, planned.rect));
                    TileId id{options.image_id, planned.row, planned.col};
                    if (keep_tiles || options.dump_tiles) {
                        auto png = encode_png(pixels.back());
                        if (keep_tiles) write_bytes(store.root() / tile_relative_path(id), png);
                        if (options.dump_tiles) write_bytes(*options.dump_tiles / dump_tile_name(id), png);
                    }
                }
                auto vectors = embedder.embed_image(pixels);
                for (std::size_t i = begin; i < end; ++i) {
                    const auto& planned = grid.tiles[i];
                    TileId id{options.image_id, planned.row, planned.col};
                    std::optional<std::string> path;
                    if (keep_tiles) path = tile_relative_path(id);
                    records[i] = TileRecord{std::move(id), std::move(vectors[i - begin]), planned.rect, {},
                                            std::move(path)};
                }
                std::size_t now = done.fetch_add(end - begin) + (end - begin);
                std::lock_guard lock(progress_mutex);
                report_progress(IngestStage::Embedding, now, total);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                return;
            }
        }
    };

    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);

    report_progress(IngestStage::Indexing, total, total);
    ImageEntry entry{options.image_id, spec, total, options.source};
    store.insert_batch(std::move(records), entry);
    report_progress(IngestStage::Done, total, total);

    IngestReport report;
    report.image_id = options.image_id;
    report.spec = spec;
    report.rows = grid.rows;
    report.cols = grid.cols;
    report.tiles = total;
    report.undersized = static_cast<std::size_t>(
        std::count_if(grid.tiles.begin(), grid.tiles.end(), [](const auto& t) { return t.undersized; }));
    spdlog::info("indexed {}: {} x {} grid, {} tiles", report.image_id, report.cols, report.rows, report.tiles);
    return report;
}

std::vector<fs::path> geo_sidecars(const fs::path& image) {
    std::vector<fs::path> found;
    std::string ext = image.extension().string();
    std::vector<fs::path> candidates;
    fs::path base = image;
    candidates.push_back(base.replace_extension(".tfw"));
    candidates.push_back(base.replace_extension(".wld"));
    if (ext.size() >= 3) {
        // .tif -> .tfw style world file names
        std::string world = std::string(".") + ext[1] + ext.back() + "w";
        candidates.push_back(fs::path(image).replace_extension(world));
    }
    candidates.push_back(fs::path(image.string() + ".aux.xml"));
    for (const auto& c : candidates) {
        std::error_code ec;
        if (fs::is_regular_file(c, ec) && std::find(found.begin(), found.end(), c) == found.end()) {
            found.push_back(c);
        }
    }
    return found;
}

IngestReport ingest_file(const fs::path& image, Store& store, const Embedder& embedder, IngestOptions options) {
    if (options.image_id.empty()) options.image_id = default_image_id(image);
    if (options.source.empty()) options.source = fs::absolute(image).string();
    if (options.progress) options.progress(IngestStage::Tiling, 0, 0);
    Raster raster = load_raster(image);
    auto report = ingest_raster(raster, store, embedder, options);
    if (store.persistent()) {
        auto sidecars = geo_sidecars(image);
        if (!sidecars.empty()) {
            fs::path dir = store.root() / "images" / options.image_id;
            fs::create_directories(dir);
            for (const auto& s : sidecars) fs::copy_file(s, dir / s.filename(), fs::copy_options::overwrite_existing);
        }
    }
    return report;
}

}  // namespace opensat
