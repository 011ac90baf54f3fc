#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "opensat/core.hpp"
#include "opensat/raster.hpp"

namespace opensat {

enum class EmbedderKind { Mock, File, Remote };

std::string_view to_string(EmbedderKind kind) noexcept;
EmbedderKind parse_embedder_kind(std::string_view name);

struct EmbedderSpec {
    EmbedderKind kind = EmbedderKind::Mock;
    std::size_t dim = kDefaultDim;
    std::optional<std::string> endpoint;
    std::optional<std::string> model_name;
    std::optional<std::filesystem::path> manifest;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
    std::size_t max_inflight = 4;
    std::chrono::milliseconds timeout{30000};
    int max_retries = 2;
    std::chrono::milliseconds backoff_base{500};

    void validate() const;
};

// Text and image encoder sharing one embedding space. Implementations are
// thread-safe; every returned embedding is unit-norm and order matches input.
class Embedder {
public:
    virtual ~Embedder() = default;

    [[nodiscard]] virtual std::size_t dim() const = 0;
    [[nodiscard]] virtual std::string identity() const = 0;
    virtual std::vector<Embedding> embed_text(std::span<const std::string> texts) const = 0;
    virtual std::vector<Embedding> embed_image(std::span<const Raster> tiles) const = 0;

    Embedding embed_text(const std::string& text) const;
};

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes,
                      std::uint64_t basis = 0xcbf29ce484222325ULL) noexcept;

// Deterministic stand-in for a real encoder: a 64-bit hash of the input bytes
// seeds a counter-based generator that draws `dim` standard normals, which are
// then L2-normalized (a uniform direction on the sphere).
class MockEmbedder final : public Embedder {
public:
    explicit MockEmbedder(std::size_t dim = kDefaultDim, std::uint64_t seed = 0);

    [[nodiscard]] std::size_t dim() const override { return dim_; }
    [[nodiscard]] std::string identity() const override;
    using Embedder::embed_text;
    std::vector<Embedding> embed_text(std::span<const std::string> texts) const override;
    std::vector<Embedding> embed_image(std::span<const Raster> tiles) const override;

    [[nodiscard]] Embedding embed_bytes(std::span<const std::uint8_t> bytes, std::uint8_t domain) const;

private:
    std::size_t dim_;
    std::uint64_t seed_;
};

// Precomputed vectors looked up by key: text inputs by their exact string,
// images by content_key().
class TableEmbedder final : public Embedder {
public:
    TableEmbedder(std::size_t dim, std::unordered_map<std::string, Embedding> table,
                  std::string identity = "table");
    static std::unique_ptr<TableEmbedder> from_manifest(const std::filesystem::path& manifest,
                                                        std::optional<std::size_t> dim = {});

    static std::string content_key(const Raster& tile);

    [[nodiscard]] std::size_t dim() const override { return dim_; }
    [[nodiscard]] std::string identity() const override { return identity_; }
    using Embedder::embed_text;
    std::vector<Embedding> embed_text(std::span<const std::string> texts) const override;
    std::vector<Embedding> embed_image(std::span<const Raster> tiles) const override;

    [[nodiscard]] std::size_t size() const noexcept { return table_.size(); }

private:
    const Embedding& lookup(const std::string& key) const;

    std::size_t dim_;
    std::unordered_map<std::string, Embedding> table_;
    std::string identity_;
};

// HTTP client for an embedding server:
//   POST {endpoint}/embed/text   {"model": ..., "inputs": [...]}
//   POST {endpoint}/embed/image  multipart: "model" field + one "images" part per PNG
// both answering {"embeddings": [[...], ...]}.
class RemoteEmbedder final : public Embedder {
public:
    explicit RemoteEmbedder(EmbedderSpec spec);
    ~RemoteEmbedder() override;

    [[nodiscard]] std::size_t dim() const override { return spec_.dim; }
    [[nodiscard]] std::string identity() const override;
    using Embedder::embed_text;
    std::vector<Embedding> embed_text(std::span<const std::string> texts) const override;
    std::vector<Embedding> embed_image(std::span<const Raster> tiles) const override;

private:
    struct Impl;
    EmbedderSpec spec_;
    std::unique_ptr<Impl> impl_;
};

std::unique_ptr<Embedder> make_embedder(const EmbedderSpec& spec);

}  // namespace opensat
