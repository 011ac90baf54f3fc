#include "opensat/retriever.hpp"

#include <chrono>
#include <cmath>

#include <nlohmann/json.hpp>

namespace opensat {

using nlohmann::json;

std::string_view to_string(RetrievalMethod method) noexcept {
    switch (method) {
        case RetrievalMethod::Threshold: return "threshold";
        case RetrievalMethod::OpenSatPlain: return "opensat_plain";
        case RetrievalMethod::OpenSatRefined: return "opensat_refined";
    }
    return "opensat_refined";
}

RetrievalMethod parse_retrieval_method(std::string_view name) {
    if (name == "threshold") return RetrievalMethod::Threshold;
    if (name == "opensat_plain" || name == "plain") return RetrievalMethod::OpenSatPlain;
    if (name == "opensat_refined" || name == "refined") return RetrievalMethod::OpenSatRefined;
    throw Error(ErrorCode::InvalidArgument, "unknown retrieval method '" + std::string(name) + "'");
}

void RetrievalRequest::validate() const {
    if (query.empty() && !object_override) throw Error(ErrorCode::InvalidArgument, "query text is empty");
    if (!std::isfinite(threshold) || threshold <= -1.0 - 1e-12 || threshold >= 1.0) {
        // -1 itself is allowed so that "everything" is expressible.
        throw Error(ErrorCode::InvalidArgument, "threshold must lie in [-1, 1)");
    }
    cfg.validate();
    if (surroundings_override && !object_override) {
        throw Error(ErrorCode::InvalidArgument, "surroundings override requires an object override");
    }
}

RetrievalResult retrieve_threshold(const Store& store, const Embedding& query_embedding, double threshold,
                                   const std::string& object_label, const ScanFilter& filter) {
    auto rows = store.scan_similarities(query_embedding, {}, filter);
    RetrievalResult result;
    result.method = RetrievalMethod::Threshold;
    result.threshold = threshold;
    result.object_of_interest = object_label;
    result.per_tile.reserve(rows.size());
    for (auto& row : rows) {
        TileDiagnostic d{row.id, row.rect, {}, SimilarityScore(row.query_sim), {}};
        if (row.query_sim > threshold) {
            d.winning_label = object_label;
            result.retrieved.push_back(row.id);
        }
        result.per_tile.push_back(std::move(d));
    }
    return result;
}

RetrievalResult classify_tiles(const Store& store, const Embedding& object_embedding,
                               std::span<const Embedding> surrounding_embeddings,
                               std::span<const std::string> surrounding_names, const std::string& object_label,
                               const ScanFilter& filter) {
    if (surrounding_embeddings.empty()) {
        throw Error(ErrorCode::InvalidArgument, "classification needs at least one surrounding class");
    }
    if (surrounding_embeddings.size() != surrounding_names.size()) {
        throw Error(ErrorCode::InvalidArgument, "surrounding embeddings and names differ in length");
    }
    auto rows = store.scan_similarities(object_embedding, surrounding_embeddings, filter);
    RetrievalResult result;
    result.method = RetrievalMethod::OpenSatPlain;
    result.object_of_interest = object_label;
    result.per_tile.reserve(rows.size());
    for (auto& row : rows) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < row.candidate_sims.size(); ++c) {
            if (row.candidate_sims[c] > row.candidate_sims[best]) best = c;
        }
        double best_sim = row.candidate_sims[best];
        bool object_wins = row.query_sim >= best_sim;
        TileDiagnostic d{row.id, row.rect, object_wins ? object_label : surrounding_names[best],
                         SimilarityScore(row.query_sim), SimilarityScore(best_sim)};
        if (object_wins) result.retrieved.push_back(row.id);
        result.per_tile.push_back(std::move(d));
    }
    return result;
}

Retriever::Retriever(const Store& store, std::shared_ptr<const Embedder> embedder,
                     std::shared_ptr<ContextDeriver> contexts)
    : store_(store), embedder_(std::move(embedder)), contexts_(std::move(contexts)) {
    if (!embedder_) throw Error(ErrorCode::InvalidArgument, "retriever needs an embedder");
}

QueryContext Retriever::context_for(const RetrievalRequest& request) const {
    const std::size_t n = request.cfg.n;
    if (request.surroundings_override) {
        QueryContext ctx{request.query, *request.object_override,
                         sanitize_surroundings(*request.object_override, *request.surroundings_override, n),
                         ContextSource::UserSupplied};
        ctx.validate(n);
        return ctx;
    }
    if (!contexts_) {
        throw Error(ErrorCode::ProviderUnavailable,
                    "no context provider configured (set OPENSAT_LLM_ENDPOINT or pass a fixture)");
    }
    if (!request.object_override) return contexts_->derive(request.query, n);

    // Known object: only its surroundings are needed from the provider.
    QueryContext derived = contexts_->derive(*request.object_override, n);
    QueryContext ctx{request.query.empty() ? *request.object_override : request.query, *request.object_override,
                     sanitize_surroundings(*request.object_override, derived.surroundings, n), derived.source};
    ctx.validate(n);
    return ctx;
}

RetrievalResult Retriever::retrieve(const RetrievalRequest& request) const {
    auto started = std::chrono::steady_clock::now();
    request.validate();
    require_same_dim(embedder_->dim(), store_.dim(), "embedder vs store");
    ScanFilter filter{request.image_filter};
    if (request.image_filter && !store_.image(*request.image_filter)) {
        throw Error(ErrorCode::NotFound, "image '" + *request.image_filter + "' is not indexed");
    }

    RetrievalResult result;
    if (request.method == RetrievalMethod::Threshold) {
        std::optional<QueryContext> ctx;
        std::string object;
        if (request.object_override) {
            object = *request.object_override;
        } else {
            ctx = context_for(request);
            object = ctx->object_of_interest;
        }
        result = retrieve_threshold(store_, embedder_->embed_text(base_prompt(object)), request.threshold, object,
                                    filter);
        result.context = std::move(ctx);
    } else {
        QueryContext ctx = context_for(request);
        std::vector<std::string> names = ctx.surroundings;
        std::vector<Embedding> backgrounds;
        Embedding object_embedding({0.0f});
        if (request.method == RetrievalMethod::OpenSatRefined) {
            auto set = refine_query(ctx, *embedder_, request.cfg);
            backgrounds = std::move(set.backgrounds);
            object_embedding = std::move(set.refined);
        } else {
            std::vector<std::string> texts{base_prompt(ctx.object_of_interest)};
            for (const auto& y : ctx.surroundings) texts.push_back(surrounding_prompt(y));
            auto embedded = embedder_->embed_text(texts);
            object_embedding = std::move(embedded.front());
            backgrounds.assign(std::make_move_iterator(embedded.begin() + 1),
                               std::make_move_iterator(embedded.end()));
        }
        result = classify_tiles(store_, object_embedding, backgrounds, names, ctx.object_of_interest, filter);
        result.method = request.method;
        result.context = std::move(ctx);
    }
    result.query = request.query;
    result.threshold = request.threshold;
    result.cfg = request.cfg;
    result.elapsed_ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() -
                                                                              started)
                            .count();
    return result;
}

std::string tile_url(const TileId& id) {
    return "/tiles/" + id.image_id + "/" + std::to_string(id.row) + "/" + std::to_string(id.col) + ".png";
}

namespace {

json tile_ref(const TileId& id) {
    return json{{"key", id.key()}, {"image_id", id.image_id}, {"row", id.row}, {"col", id.col}};
}

}  // namespace

json result_to_json(const RetrievalResult& result, const ResultJsonOptions& options) {
    json out;
    out["schema_version"] = kResultSchemaVersion;
    out["query"] = result.query;
    out["method"] = std::string(to_string(result.method));
    out["object_of_interest"] = result.object_of_interest;
    out["count"] = result.retrieved.size();
    out["params"] = json{{"alpha", result.cfg.alpha},
                         {"beta", result.cfg.beta},
                         {"n", result.cfg.n},
                         {"normalize_stage", std::string(to_string(result.cfg.normalize_stage))},
                         {"threshold", result.threshold}};
    out["context"] = result.context ? json(*result.context) : json(nullptr);

    json retrieved = json::array();
    json evidence = json::array();
    for (const auto& id : result.retrieved) {
        retrieved.push_back(id.key());
        json e = tile_ref(id);
        e["url"] = tile_url(id);
        evidence.push_back(std::move(e));
    }
    out["retrieved"] = std::move(retrieved);
    out["evidence"] = std::move(evidence);

    if (options.include_per_tile) {
        json rows = json::array();
        for (const auto& d : result.per_tile) {
            json row = tile_ref(d.id);
            row["rect"] = {d.rect.x, d.rect.y, d.rect.width, d.rect.height};
            row["winning_label"] = d.winning_label ? json(*d.winning_label) : json(nullptr);
            row["sim_to_object"] = d.sim_to_object.value();
            row["max_sim_to_surroundings"] =
                d.max_sim_to_surroundings ? json(d.max_sim_to_surroundings->value()) : json(nullptr);
            rows.push_back(std::move(row));
        }
        out["per_tile"] = std::move(rows);
    }
    if (options.include_elapsed) out["elapsed_ms"] = result.elapsed_ms;
    return out;
}

}  // namespace opensat
