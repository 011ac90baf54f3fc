#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "opensat/embed.hpp"
#include "opensat/llmctx.hpp"
#include "opensat/refine.hpp"
#include "opensat/store.hpp"

namespace opensat {

inline constexpr double kDefaultThreshold = 0.28;
inline constexpr int kResultSchemaVersion = 1;

enum class RetrievalMethod { Threshold, OpenSatPlain, OpenSatRefined };

std::string_view to_string(RetrievalMethod method) noexcept;
// Accepts the canonical names and the CLI short forms "plain" / "refined".
RetrievalMethod parse_retrieval_method(std::string_view name);

struct RetrievalRequest {
    std::string query;
    RetrievalMethod method = RetrievalMethod::OpenSatRefined;
    double threshold = kDefaultThreshold;
    RefinementConfig cfg;
    std::optional<std::string> image_filter;
    // Skip object extraction and use this object directly.
    std::optional<std::string> object_override;
    // Skip the context provider entirely (requires object_override).
    std::optional<std::vector<std::string>> surroundings_override;

    void validate() const;
};

struct TileDiagnostic {
    TileId id;
    TileRect rect;
    // Empty for threshold-method tiles at or below the threshold.
    std::optional<std::string> winning_label;
    SimilarityScore sim_to_object;
    std::optional<SimilarityScore> max_sim_to_surroundings;
};

struct RetrievalResult {
    std::string query;
    std::string object_of_interest;
    RetrievalMethod method = RetrievalMethod::OpenSatRefined;
    std::vector<TileId> retrieved;  // TileId order
    std::vector<TileDiagnostic> per_tile;
    std::optional<QueryContext> context;
    double threshold = kDefaultThreshold;
    RefinementConfig cfg;
    std::int64_t elapsed_ms = 0;

    [[nodiscard]] std::size_t count() const noexcept { return retrieved.size(); }
};

// Strict "sim > threshold".
RetrievalResult retrieve_threshold(const Store& store, const Embedding& query_embedding, double threshold,
                                   const std::string& object_label = {}, const ScanFilter& filter = {});

// Each tile goes to the label with the highest similarity among the object and
// the surroundings; a tie with the best surrounding goes to the object.
RetrievalResult classify_tiles(const Store& store, const Embedding& object_embedding,
                               std::span<const Embedding> surrounding_embeddings,
                               std::span<const std::string> surrounding_names,
                               const std::string& object_label, const ScanFilter& filter = {});

class Retriever {
public:
    Retriever(const Store& store, std::shared_ptr<const Embedder> embedder,
              std::shared_ptr<ContextDeriver> contexts = {});

    RetrievalResult retrieve(const RetrievalRequest& request) const;

    [[nodiscard]] const Embedder& embedder() const noexcept { return *embedder_; }

private:
    QueryContext context_for(const RetrievalRequest& request) const;

    const Store& store_;
    std::shared_ptr<const Embedder> embedder_;
    std::shared_ptr<ContextDeriver> contexts_;
};

struct ResultJsonOptions {
    bool include_elapsed = true;
    bool include_per_tile = true;
};

// Wire form shared by POST /query and `opensat query --json`.
nlohmann::json result_to_json(const RetrievalResult& result, const ResultJsonOptions& options = {});
std::string tile_url(const TileId& id);

}  // namespace opensat
