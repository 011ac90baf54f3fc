#include "opensat/store.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <mutex>
#include <sstream>
#include <unordered_set>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "opensat/embed.hpp"
#include "opensat/interchange.hpp"

namespace opensat {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr const char* kManifestName = "manifest.json";
constexpr const char* kLabelsName = "labels.jsonl";
constexpr const char* kLockName = "LOCK";

std::string utc_timestamp() {
    auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoError, "cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void fsync_path(const fs::path& path, bool directory = false) {
    int fd = ::open(path.c_str(), directory ? O_RDONLY | O_DIRECTORY : O_RDONLY);
    if (fd < 0) return;
    ::fsync(fd);
    ::close(fd);
}

void write_durably(const fs::path& path, const std::string& bytes) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorCode::IoError, "cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw Error(ErrorCode::IoError, "short write to " + tmp.string());
    }
    fsync_path(tmp);
    fs::rename(tmp, path);
    fsync_path(path.parent_path(), true);
}

std::string digest_hex(const std::string& bytes) {
    auto h = fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

class FileLock {
public:
    explicit FileLock(const fs::path& path) {
        fd_ = ::open(path.c_str(), O_RDWR | O_CREAT, 0644);
        if (fd_ < 0) throw Error(ErrorCode::IoError, "cannot open lock file " + path.string());
        if (::flock(fd_, LOCK_EX) != 0) {
            ::close(fd_);
            throw Error(ErrorCode::StoreLocked, "cannot lock " + path.string());
        }
    }
    ~FileLock() {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
    }
    FileLock(const FileLock&) = delete;
    FileLock& operator=(const FileLock&) = delete;

private:
    int fd_ = -1;
};

bool tile_id_less(const StoreSnapshot& s, const StoreSnapshot::Slot& a, const StoreSnapshot::Slot& b) {
    return s.id_at(a) < s.id_at(b);
}

std::string segment_name(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%03zu.vec", index);
    return buf;
}

}  // namespace

void to_json(json& j, const StoreManifest& m) {
    ordered_json o;
    o["format_version"] = m.format_version;
    o["dim"] = m.dim;
    o["record_count"] = m.record_count;
    o["imported_records"] = m.imported_records;
    o["created_at"] = m.created_at;
    o["images"] = ordered_json::array();
    for (const auto& img : m.images) {
        o["images"].push_back(ordered_json{{"image_id", img.image_id},
                                           {"image_width", img.grid.image_width},
                                           {"image_height", img.grid.image_height},
                                           {"tile_size", img.grid.tile_size},
                                           {"stride", img.grid.stride},
                                           {"tile_count", img.tile_count},
                                           {"source", img.source}});
    }
    o["segments"] = ordered_json::array();
    for (const auto& s : m.segments) o["segments"].push_back(ordered_json{{"file", s.file}, {"count", s.count}});
    o["labels_bytes"] = m.labels_bytes;
    j = json::parse(o.dump());
}

void from_json(const json& j, StoreManifest& m) {
    m.format_version = j.at("format_version").get<int>();
    m.dim = j.at("dim").get<std::size_t>();
    m.record_count = j.at("record_count").get<std::size_t>();
    m.imported_records = j.value("imported_records", std::size_t{0});
    m.created_at = j.value("created_at", std::string{});
    m.images.clear();
    for (const auto& img : j.at("images")) {
        ImageEntry e;
        e.image_id = img.at("image_id").get<std::string>();
        e.grid.image_width = img.at("image_width").get<std::uint32_t>();
        e.grid.image_height = img.at("image_height").get<std::uint32_t>();
        e.grid.tile_size = img.at("tile_size").get<std::uint32_t>();
        e.grid.stride = img.at("stride").get<std::uint32_t>();
        e.tile_count = img.at("tile_count").get<std::size_t>();
        e.source = img.value("source", std::string{});
        m.images.push_back(std::move(e));
    }
    m.segments.clear();
    for (const auto& s : j.at("segments")) {
        m.segments.push_back({s.at("file").get<std::string>(), s.at("count").get<std::size_t>()});
    }
    m.labels_bytes = j.value("labels_bytes", std::uint64_t{0});
}

TileRecord StoreSnapshot::record_at(const Slot& s) const {
    const Segment& seg = *segments[s.segment];
    auto v = seg.vector(s.row);
    return TileRecord{seg.ids[s.row], Embedding::unit(std::vector<float>(v.begin(), v.end())),
                      seg.rects[s.row], seg.labels[s.row], seg.tile_paths[s.row]};
}

struct Store::State {
    fs::path root;
    bool persistent = false;
    std::string digest;
    mutable std::mutex snapshot_mutex;
    std::mutex write_mutex;
    std::shared_ptr<const StoreSnapshot> current;

    std::shared_ptr<const StoreSnapshot> load() const {
        std::lock_guard lock(snapshot_mutex);
        return current;
    }
    void publish(std::shared_ptr<const StoreSnapshot> next) {
        std::lock_guard lock(snapshot_mutex);
        current = std::move(next);
    }
};

namespace {

std::shared_ptr<StoreSnapshot> load_from_disk(const fs::path& root, std::string* digest) {
    std::string manifest_text = read_text(root / kManifestName);
    auto snap = std::make_shared<StoreSnapshot>();
    try {
        snap->manifest = json::parse(manifest_text).get<StoreManifest>();
    } catch (const json::exception& e) {
        throw Error(ErrorCode::ManifestParseError, "corrupt store manifest: " + std::string(e.what()));
    }
    if (snap->manifest.format_version != kStoreFormatVersion) {
        throw Error(ErrorCode::ManifestParseError,
                    "unsupported store format_version " + std::to_string(snap->manifest.format_version));
    }
    if (digest) *digest = digest_hex(manifest_text);

    std::unordered_map<std::string, std::pair<std::uint32_t, std::uint32_t>> by_key;
    for (std::size_t si = 0; si < snap->manifest.segments.size(); ++si) {
        const auto& entry = snap->manifest.segments[si];
        std::ifstream in(root / "segments" / entry.file, std::ios::binary);
        if (!in) throw Error(ErrorCode::IoError, "missing segment " + entry.file);
        ImportOptions options;
        options.expected_dim = snap->manifest.dim;
        auto records = read_binary(in, nullptr, options);
        if (records.size() != entry.count) {
            throw Error(ErrorCode::ManifestParseError, "segment " + entry.file + " record count mismatch");
        }
        auto seg = std::make_shared<Segment>();
        seg->dim = snap->manifest.dim;
        seg->vectors.reserve(records.size() * seg->dim);
        for (std::size_t r = 0; r < records.size(); ++r) {
            auto& rec = records[r];
            seg->ids.push_back(TileId::from_key(rec.key));
            auto v = rec.embedding.values();
            seg->vectors.insert(seg->vectors.end(), v.begin(), v.end());
            seg->norms.push_back(l2_norm(v));
            seg->rects.push_back({});
            seg->labels.push_back(rec.label);
            seg->tile_paths.push_back(std::nullopt);
            by_key.emplace(rec.key, std::pair{static_cast<std::uint32_t>(si), static_cast<std::uint32_t>(r)});
        }
        snap->segments.push_back(std::move(seg));
    }

    // Sidecar rows beyond labels_bytes belong to an uncommitted batch.
    std::ifstream labels(root / kLabelsName, std::ios::binary);
    std::string buffer(snap->manifest.labels_bytes, '\0');
    if (snap->manifest.labels_bytes > 0) {
        labels.read(buffer.data(), static_cast<std::streamsize>(buffer.size()));
        if (static_cast<std::uint64_t>(labels.gcount()) != snap->manifest.labels_bytes) {
            throw Error(ErrorCode::ManifestParseError, "labels.jsonl shorter than manifest records");
        }
    }
    std::istringstream lines(buffer);
    std::string line;
    while (std::getline(lines, line)) {
        if (line.empty()) continue;
        auto doc = json::parse(line);
        auto it = by_key.find(doc.at("key").get<std::string>());
        if (it == by_key.end()) continue;
        auto& seg = const_cast<Segment&>(*snap->segments[it->second.first]);
        const auto& rect = doc.at("rect");
        seg.rects[it->second.second] = TileRect{rect.at(0).get<std::uint32_t>(), rect.at(1).get<std::uint32_t>(),
                                                rect.at(2).get<std::uint32_t>(), rect.at(3).get<std::uint32_t>()};
        if (doc.contains("tile_path") && doc["tile_path"].is_string()) {
            seg.tile_paths[it->second.second] = doc["tile_path"].get<std::string>();
        }
    }

    for (std::uint32_t si = 0; si < snap->segments.size(); ++si) {
        for (std::uint32_t r = 0; r < snap->segments[si]->ids.size(); ++r) {
            StoreSnapshot::Slot slot{si, r};
            snap->order.push_back(slot);
            snap->index.emplace(snap->segments[si]->ids[r], slot);
        }
    }
    std::sort(snap->order.begin(), snap->order.end(),
              [&](const auto& a, const auto& b) { return tile_id_less(*snap, a, b); });
    return snap;
}

std::string serialize_manifest(const StoreManifest& m) {
    return json(m).dump(2) + "\n";
}

}  // namespace

Store::Store(std::unique_ptr<State> state) : state_(std::move(state)) {}
Store::Store(Store&&) noexcept = default;
Store& Store::operator=(Store&&) noexcept = default;
Store::~Store() = default;

Store Store::create(const fs::path& root, std::size_t dim) {
    if (dim == 0) throw Error(ErrorCode::InvalidArgument, "store dimension must be positive");
    if (fs::exists(root / kManifestName)) {
        throw Error(ErrorCode::Conflict, "store already exists at " + root.string());
    }
    fs::create_directories(root / "segments");
    fs::create_directories(root / "tiles");
    FileLock lock(root / kLockName);
    StoreManifest m;
    m.dim = dim;
    m.created_at = utc_timestamp();
    std::ofstream(root / kLabelsName, std::ios::trunc).close();
    std::string text = serialize_manifest(m);
    write_durably(root / kManifestName, text);

    auto state = std::make_unique<State>();
    state->root = root;
    state->persistent = true;
    state->digest = digest_hex(text);
    auto snap = std::make_shared<StoreSnapshot>();
    snap->manifest = m;
    state->current = std::move(snap);
    return Store(std::move(state));
}

Store Store::open(const fs::path& root) {
    if (!fs::exists(root / kManifestName)) {
        throw Error(ErrorCode::NotFound, "no store at " + root.string());
    }
    auto state = std::make_unique<State>();
    state->root = root;
    state->persistent = true;
    state->current = load_from_disk(root, &state->digest);
    return Store(std::move(state));
}

Store Store::open_or_create(const fs::path& root, std::size_t dim) {
    if (fs::exists(root / kManifestName)) {
        Store s = open(root);
        require_same_dim(dim, s.dim(), "store at " + root.string());
        return s;
    }
    return create(root, dim);
}

Store Store::in_memory(std::size_t dim) {
    if (dim == 0) throw Error(ErrorCode::InvalidArgument, "store dimension must be positive");
    auto state = std::make_unique<State>();
    auto snap = std::make_shared<StoreSnapshot>();
    snap->manifest.dim = dim;
    snap->manifest.created_at = utc_timestamp();
    state->current = std::move(snap);
    return Store(std::move(state));
}

std::size_t Store::insert_batch(std::vector<TileRecord> records, std::optional<ImageEntry> image) {
    std::lock_guard writer(state_->write_mutex);
    std::optional<FileLock> lock;
    if (state_->persistent) {
        lock.emplace(state_->root / kLockName);
        // Another process may have committed since we loaded.
        std::string on_disk = digest_hex(read_text(state_->root / kManifestName));
        if (on_disk != state_->digest) state_->publish(load_from_disk(state_->root, &state_->digest));
    }
    auto base = state_->load();
    const std::size_t dim = base->manifest.dim;

    if (image) {
        for (const auto& existing : base->manifest.images) {
            if (existing.image_id == image->image_id) {
                throw Error(ErrorCode::Conflict, "image '" + image->image_id + "' already indexed");
            }
        }
    }
    if (records.empty() && !image) return 0;

    std::unordered_set<TileId> batch_ids;
    for (const auto& r : records) {
        require_same_dim(r.embedding.dim(), dim, "insert_batch");
        if (!r.embedding.normalized() && std::abs(r.embedding.norm() - 1.0) > kUnitNormTolerance) {
            throw Error(ErrorCode::InvalidArgument, "tile " + r.id.key() + " embedding is not unit-norm");
        }
        if (base->index.contains(r.id) || !batch_ids.insert(r.id).second) {
            throw Error(ErrorCode::DuplicateTile, "tile " + r.id.key() + " already stored");
        }
    }

    auto seg = std::make_shared<Segment>();
    seg->dim = dim;
    seg->vectors.reserve(records.size() * dim);
    for (const auto& r : records) {
        seg->ids.push_back(r.id);
        auto v = r.embedding.values();
        seg->vectors.insert(seg->vectors.end(), v.begin(), v.end());
        seg->norms.push_back(l2_norm(v));
        seg->rects.push_back(r.rect);
        seg->labels.push_back(r.label);
        seg->tile_paths.push_back(r.tile_path);
    }

    StoreManifest next = base->manifest;
    std::size_t seg_index = next.segments.size();
    if (!records.empty()) next.segments.push_back({segment_name(seg_index), records.size()});
    next.record_count += records.size();
    if (image) {
        next.images.push_back(*image);
    } else {
        next.imported_records += records.size();
    }

    if (state_->persistent) {
        if (!records.empty()) {
            std::vector<EmbeddingRecord> out;
            out.reserve(records.size());
            std::string sidecar;
            for (auto& r : records) {
                std::string key = r.id.key();
                json row = {{"key", key},
                            {"segment", seg_index},
                            {"rect", {r.rect.x, r.rect.y, r.rect.width, r.rect.height}},
                            {"tile_path", r.tile_path ? json(*r.tile_path) : json(nullptr)}};
                sidecar += row.dump() + "\n";
                out.push_back(EmbeddingRecord{std::move(key), r.embedding, r.label});
            }
            std::ostringstream bin;
            write_binary(bin, dim, out);
            write_durably(state_->root / "segments" / next.segments.back().file, bin.str());

            fs::path labels = state_->root / kLabelsName;
            if (!fs::exists(labels)) std::ofstream(labels).close();
            fs::resize_file(labels, base->manifest.labels_bytes);
            {
                std::ofstream app(labels, std::ios::binary | std::ios::app);
                app.write(sidecar.data(), static_cast<std::streamsize>(sidecar.size()));
                app.flush();
                if (!app) throw Error(ErrorCode::IoError, "cannot append to labels.jsonl");
            }
            fsync_path(labels);
            next.labels_bytes = base->manifest.labels_bytes + sidecar.size();
        }
        std::string text = serialize_manifest(next);
        write_durably(state_->root / kManifestName, text);
        state_->digest = digest_hex(text);
    }

    auto snap = std::make_shared<StoreSnapshot>(*base);
    snap->manifest = std::move(next);
    if (!records.empty()) {
        auto si = static_cast<std::uint32_t>(snap->segments.size());
        snap->segments.push_back(seg);
        std::vector<StoreSnapshot::Slot> added;
        for (std::uint32_t r = 0; r < seg->ids.size(); ++r) {
            added.push_back({si, r});
            snap->index.emplace(seg->ids[r], StoreSnapshot::Slot{si, r});
        }
        auto less = [&](const auto& a, const auto& b) { return tile_id_less(*snap, a, b); };
        std::sort(added.begin(), added.end(), less);
        std::vector<StoreSnapshot::Slot> merged;
        merged.reserve(snap->order.size() + added.size());
        std::merge(snap->order.begin(), snap->order.end(), added.begin(), added.end(),
                   std::back_inserter(merged), less);
        snap->order = std::move(merged);
    }
    state_->publish(std::move(snap));
    return records.size();
}

std::vector<SimilarityRow> Store::scan_similarities(const Embedding& query,
                                                    std::span<const Embedding> candidates,
                                                    const ScanFilter& filter) const {
    auto snap = state_->load();
    if (snap->order.empty()) throw Error(ErrorCode::EmptyStore, "store is empty");
    const std::size_t dim = snap->manifest.dim;
    require_same_dim(query.dim(), dim, "scan query");
    for (const auto& c : candidates) require_same_dim(c.dim(), dim, "scan candidate");

    double query_norm = query.norm();
    if (query_norm < 1e-12) throw Error(ErrorCode::DegenerateVector, "scan query has zero norm");
    std::vector<double> candidate_norms;
    for (const auto& c : candidates) {
        candidate_norms.push_back(c.norm());
        if (candidate_norms.back() < 1e-12) throw Error(ErrorCode::DegenerateVector, "scan candidate has zero norm");
    }

    std::vector<SimilarityRow> rows;
    rows.reserve(snap->order.size());
    for (const auto& slot : snap->order) {
        const Segment& seg = *snap->segments[slot.segment];
        const TileId& id = seg.ids[slot.row];
        if (filter.image_id && id.image_id != *filter.image_id) continue;
        auto v = seg.vector(slot.row);
        double norm = seg.norms[slot.row];
        SimilarityRow row{id, seg.rects[slot.row], cosine_with_norms(v, norm, query.values(), query_norm), {}};
        row.candidate_sims.reserve(candidates.size());
        for (std::size_t c = 0; c < candidates.size(); ++c) {
            row.candidate_sims.push_back(cosine_with_norms(v, norm, candidates[c].values(), candidate_norms[c]));
        }
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw Error(ErrorCode::EmptyStore, "no tiles match the image filter");
    return rows;
}

std::vector<ScoredTile> Store::top_k(const Embedding& query, std::size_t k, const ScanFilter& filter) const {
    if (k == 0) throw Error(ErrorCode::InvalidArgument, "k must be >= 1");
    auto rows = scan_similarities(query, {}, filter);
    auto better = [](const SimilarityRow& a, const SimilarityRow& b) {
        if (a.query_sim != b.query_sim) return a.query_sim > b.query_sim;
        return a.id < b.id;
    };
    std::size_t take = std::min(k, rows.size());
    std::partial_sort(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(take), rows.end(), better);
    std::vector<ScoredTile> out;
    out.reserve(take);
    for (std::size_t i = 0; i < take; ++i) out.push_back({rows[i].id, SimilarityScore(rows[i].query_sim)});
    return out;
}

std::shared_ptr<const StoreSnapshot> Store::snapshot() const { return state_->load(); }
std::size_t Store::size() const { return state_->load()->order.size(); }
std::size_t Store::dim() const { return state_->load()->manifest.dim; }
bool Store::contains(const TileId& id) const { return state_->load()->index.contains(id); }

std::optional<TileRecord> Store::get(const TileId& id) const {
    auto snap = state_->load();
    auto it = snap->index.find(id);
    if (it == snap->index.end()) return std::nullopt;
    return snap->record_at(it->second);
}

std::optional<ImageEntry> Store::image(const std::string& image_id) const {
    auto snap = state_->load();
    for (const auto& img : snap->manifest.images) {
        if (img.image_id == image_id) return img;
    }
    return std::nullopt;
}

StoreManifest Store::manifest() const { return state_->load()->manifest; }

std::string Store::manifest_digest() const {
    if (state_->persistent) return digest_hex(read_text(state_->root / kManifestName));
    return digest_hex(serialize_manifest(manifest()));
}

bool Store::persistent() const { return state_->persistent; }
const fs::path& Store::root() const { return state_->root; }

}  // namespace opensat
