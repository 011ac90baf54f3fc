#include "opensat/embed.hpp"

#include <cmath>
#include <cstring>
#include <numbers>
#include <semaphore>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "opensat/interchange.hpp"

namespace opensat {

using nlohmann::json;

namespace {

constexpr std::uint8_t kTextDomain = 0x54;   // 'T'
constexpr std::uint8_t kImageDomain = 0x49;  // 'I'

std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::vector<std::uint8_t> raster_bytes_with_header(const Raster& tile) {
    std::vector<std::uint8_t> bytes;
    bytes.reserve(16 + tile.bytes().size());
    for (std::uint32_t v : {tile.width(), tile.height(), tile.channels(), tile.bit_depth()}) {
        for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    bytes.insert(bytes.end(), tile.bytes().begin(), tile.bytes().end());
    return bytes;
}

void require_nonempty(std::size_t n) {
    if (n == 0) throw Error(ErrorCode::InvalidArgument, "embedding request needs at least one input");
}

void validate_tile(const Raster& tile) {
    if (tile.empty() || tile.bytes().size() != tile.row_bytes() * tile.height()) {
        throw Error(ErrorCode::ImageDecodeError, "malformed tile buffer");
    }
}

}  // namespace

std::string_view to_string(EmbedderKind kind) noexcept {
    switch (kind) {
        case EmbedderKind::Mock: return "mock";
        case EmbedderKind::File: return "file";
        case EmbedderKind::Remote: return "remote";
    }
    return "mock";
}

EmbedderKind parse_embedder_kind(std::string_view name) {
    if (name == "mock") return EmbedderKind::Mock;
    if (name == "file") return EmbedderKind::File;
    if (name == "remote") return EmbedderKind::Remote;
    throw Error(ErrorCode::ConfigError, "unknown embedder kind '" + std::string(name) + "'");
}

void EmbedderSpec::validate() const {
    if (dim == 0) throw Error(ErrorCode::ConfigError, "embedder dim must be positive");
    if (batch_size == 0) throw Error(ErrorCode::ConfigError, "embedder batch_size must be positive");
    if (max_inflight == 0) throw Error(ErrorCode::ConfigError, "embed.max_inflight must be positive");
    if (kind == EmbedderKind::Remote && (!endpoint || endpoint->empty())) {
        throw Error(ErrorCode::ConfigError, "remote embedder requires an endpoint");
    }
    if (kind == EmbedderKind::File && (!manifest || manifest->empty())) {
        throw Error(ErrorCode::ConfigError, "file embedder requires a manifest path");
    }
}

Embedding Embedder::embed_text(const std::string& text) const {
    return embed_text(std::span<const std::string>(&text, 1)).front();
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t basis) noexcept {
    std::uint64_t h = basis;
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// ---------------------------------------------------------------- mock

MockEmbedder::MockEmbedder(std::size_t dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
    if (dim == 0) throw Error(ErrorCode::InvalidArgument, "mock embedder dim must be positive");
}

std::string MockEmbedder::identity() const {
    return "mock:dim=" + std::to_string(dim_) + ":seed=" + std::to_string(seed_);
}

Embedding MockEmbedder::embed_bytes(std::span<const std::uint8_t> bytes, std::uint8_t domain) const {
    std::uint64_t key = fnv1a64(std::span(&domain, 1));
    key = fnv1a64(bytes, key);
    key = splitmix64(key ^ splitmix64(seed_));
    std::vector<double> draws(dim_);
    for (std::size_t i = 0; i < dim_; i += 2) {
        std::uint64_t counter = key + i / 2 * 0xd1b54a32d192ed03ULL;
        double u1 = (static_cast<double>(splitmix64(counter) >> 11) + 1.0) * 0x1.0p-53;
        double u2 = static_cast<double>(splitmix64(counter ^ 0xa0761d6478bd642fULL) >> 11) * 0x1.0p-53;
        double radius = std::sqrt(-2.0 * std::log(u1));
        draws[i] = radius * std::cos(2.0 * std::numbers::pi * u2);
        if (i + 1 < dim_) draws[i + 1] = radius * std::sin(2.0 * std::numbers::pi * u2);
    }
    auto unit = l2_normalize(draws);
    return l2_normalize(Embedding::from_doubles(unit));
}

std::vector<Embedding> MockEmbedder::embed_text(std::span<const std::string> texts) const {
    require_nonempty(texts.size());
    std::vector<Embedding> out;
    out.reserve(texts.size());
    for (const auto& t : texts) {
        out.push_back(embed_bytes(std::span(reinterpret_cast<const std::uint8_t*>(t.data()), t.size()),
                                  kTextDomain));
    }
    return out;
}

std::vector<Embedding> MockEmbedder::embed_image(std::span<const Raster> tiles) const {
    require_nonempty(tiles.size());
    std::vector<Embedding> out;
    out.reserve(tiles.size());
    for (const auto& tile : tiles) {
        validate_tile(tile);
        out.push_back(embed_bytes(raster_bytes_with_header(tile), kImageDomain));
    }
    return out;
}

// ---------------------------------------------------------------- table

TableEmbedder::TableEmbedder(std::size_t dim, std::unordered_map<std::string, Embedding> table,
                             std::string identity)
    : dim_(dim), table_(std::move(table)), identity_(std::move(identity)) {
    for (auto& [key, e] : table_) {
        require_same_dim(e.dim(), dim_, "table embedder entry '" + key + "'");
        if (!e.normalized()) e = l2_normalize(e);
    }
}

std::unique_ptr<TableEmbedder> TableEmbedder::from_manifest(const std::filesystem::path& manifest,
                                                            std::optional<std::size_t> dim) {
    std::unordered_map<std::string, Embedding> table;
    ImportOptions options;
    options.expected_dim = dim;
    auto stats = import_embeddings(
        manifest, [&](EmbeddingRecord&& r) { table.insert_or_assign(r.key, std::move(r.embedding)); },
        options);
    std::size_t d = dim.value_or(stats.dim);
    if (d == 0) throw Error(ErrorCode::ManifestParseError, "embedding manifest is empty: " + manifest.string());
    return std::make_unique<TableEmbedder>(d, std::move(table), "file:" + manifest.string());
}

std::string TableEmbedder::content_key(const Raster& tile) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "image:%016llx",
                  static_cast<unsigned long long>(fnv1a64(raster_bytes_with_header(tile))));
    return buf;
}

const Embedding& TableEmbedder::lookup(const std::string& key) const {
    auto it = table_.find(key);
    if (it == table_.end()) {
        throw Error(ErrorCode::EmbeddingNotFound, "no precomputed embedding for '" + key + "'");
    }
    return it->second;
}

std::vector<Embedding> TableEmbedder::embed_text(std::span<const std::string> texts) const {
    require_nonempty(texts.size());
    std::vector<Embedding> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(lookup(t));
    return out;
}

std::vector<Embedding> TableEmbedder::embed_image(std::span<const Raster> tiles) const {
    require_nonempty(tiles.size());
    std::vector<Embedding> out;
    out.reserve(tiles.size());
    for (const auto& tile : tiles) {
        validate_tile(tile);
        out.push_back(lookup(content_key(tile)));
    }
    return out;
}

// ---------------------------------------------------------------- remote

struct RemoteEmbedder::Impl {
    explicit Impl(std::size_t inflight) : slots(static_cast<std::ptrdiff_t>(inflight)) {}

    std::counting_semaphore<1024> slots;
    std::string base;  // scheme://host:port
    std::string path_prefix;
};

RemoteEmbedder::RemoteEmbedder(EmbedderSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    impl_ = std::make_unique<Impl>(std::min<std::size_t>(spec_.max_inflight, 1024));
    const std::string& url = *spec_.endpoint;
    auto scheme_end = url.find("://");
    auto path_start = url.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
    impl_->base = url.substr(0, path_start);
    impl_->path_prefix = path_start == std::string::npos ? "" : url.substr(path_start);
    while (!impl_->path_prefix.empty() && impl_->path_prefix.back() == '/') impl_->path_prefix.pop_back();
}

RemoteEmbedder::~RemoteEmbedder() = default;

std::string RemoteEmbedder::identity() const {
    return "remote:" + *spec_.endpoint + ":" + spec_.model_name.value_or("default");
}

namespace {

template <typename Send>
std::vector<Embedding> remote_call(const EmbedderSpec& spec, std::counting_semaphore<1024>& slots,
                                   std::size_t expected, Send&& send) {
    slots.acquire();
    struct Release {
        std::counting_semaphore<1024>& s;
        ~Release() { s.release(); }
    } release{slots};

    std::string last_error;
    for (int attempt = 0; attempt <= spec.max_retries; ++attempt) {
        if (attempt > 0) std::this_thread::sleep_for(spec.backoff_base * (1 << (attempt - 1)));
        httplib::Result res = send();
        if (!res) {
            last_error = "connection failed: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status >= 500) {
            last_error = "server error " + std::to_string(res->status);
            continue;
        }
        if (res->status != 200) {
            throw Error(ErrorCode::ProviderUnavailable,
                        "embedding server rejected request with status " + std::to_string(res->status));
        }
        json body;
        try {
            body = json::parse(res->body);
        } catch (const json::exception& e) {
            throw Error(ErrorCode::ProviderUnavailable, std::string("embedding server sent invalid JSON: ") + e.what());
        }
        if (!body.contains("embeddings") || !body["embeddings"].is_array() ||
            body["embeddings"].size() != expected) {
            throw Error(ErrorCode::ProviderUnavailable, "embedding server response has wrong shape");
        }
        std::vector<Embedding> out;
        out.reserve(expected);
        for (const auto& row : body["embeddings"]) {
            auto values = row.get<std::vector<float>>();
            require_same_dim(values.size(), spec.dim, "remote embedding");
            out.push_back(l2_normalize(Embedding(std::move(values))));
        }
        return out;
    }
    throw Error(ErrorCode::ProviderUnavailable, "embedding server unavailable: " + last_error);
}

httplib::Client make_client(const std::string& base, const EmbedderSpec& spec) {
    httplib::Client client(base);
    auto secs = std::chrono::duration_cast<std::chrono::seconds>(spec.timeout);
    auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(spec.timeout - secs);
    client.set_connection_timeout(secs.count(), usecs.count());
    client.set_read_timeout(secs.count(), usecs.count());
    client.set_write_timeout(secs.count(), usecs.count());
    return client;
}

}  // namespace

std::vector<Embedding> RemoteEmbedder::embed_text(std::span<const std::string> texts) const {
    require_nonempty(texts.size());
    std::vector<Embedding> out;
    out.reserve(texts.size());
    for (std::size_t start = 0; start < texts.size(); start += spec_.batch_size) {
        auto batch = texts.subspan(start, std::min(spec_.batch_size, texts.size() - start));
        json body = {{"model", spec_.model_name.value_or("")},
                     {"inputs", std::vector<std::string>(batch.begin(), batch.end())}};
        std::string payload = body.dump();
        auto part = remote_call(spec_, impl_->slots, batch.size(), [&] {
            auto client = make_client(impl_->base, spec_);
            return client.Post(impl_->path_prefix + "/embed/text", payload, "application/json");
        });
        std::move(part.begin(), part.end(), std::back_inserter(out));
    }
    return out;
}

std::vector<Embedding> RemoteEmbedder::embed_image(std::span<const Raster> tiles) const {
    require_nonempty(tiles.size());
    std::vector<Embedding> out;
    out.reserve(tiles.size());
    for (std::size_t start = 0; start < tiles.size(); start += spec_.batch_size) {
        auto batch = tiles.subspan(start, std::min(spec_.batch_size, tiles.size() - start));
        httplib::MultipartFormDataItems items;
        items.push_back({"model", spec_.model_name.value_or(""), "", ""});
        for (std::size_t i = 0; i < batch.size(); ++i) {
            validate_tile(batch[i]);
            auto png = encode_png(batch[i]);
            items.push_back({"images", std::string(png.begin(), png.end()),
                             "tile_" + std::to_string(start + i) + ".png", "image/png"});
        }
        auto part = remote_call(spec_, impl_->slots, batch.size(), [&] {
            auto client = make_client(impl_->base, spec_);
            return client.Post(impl_->path_prefix + "/embed/image", items);
        });
        std::move(part.begin(), part.end(), std::back_inserter(out));
    }
    return out;
}

std::unique_ptr<Embedder> make_embedder(const EmbedderSpec& spec) {
    spec.validate();
    switch (spec.kind) {
        case EmbedderKind::Mock: return std::make_unique<MockEmbedder>(spec.dim, spec.seed);
        case EmbedderKind::File: return TableEmbedder::from_manifest(*spec.manifest, spec.dim);
        case EmbedderKind::Remote: return std::make_unique<RemoteEmbedder>(spec);
    }
    throw Error(ErrorCode::ConfigError, "unknown embedder kind");
}

}  // namespace opensat
