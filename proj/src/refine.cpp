#include "opensat/refine.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace opensat {

namespace {

constexpr double kDegenerateNorm = 1e-9;

void require_unit(const Embedding& e, const char* what) {
    if (std::abs(e.norm() - 1.0) > kUnitNormTolerance) {
        throw Error(ErrorCode::InvalidArgument,
                    std::string(what) + " must be unit-norm when normalizing per term");
    }
}

Embedding normalized_or_degenerate(std::span<const double> values) {
    double acc = 0.0;
    for (double v : values) acc += v * v;
    if (std::sqrt(acc) < kDegenerateNorm) {
        throw Error(ErrorCode::DegenerateVector,
                    "refined embedding cancelled to zero; retry with a smaller beta");
    }
    return l2_normalize(Embedding::from_doubles(l2_normalize(values)));
}

}  // namespace

std::string_view to_string(NormalizeStage stage) noexcept {
    switch (stage) {
        case NormalizeStage::PerTerm: return "per_term";
        case NormalizeStage::PostComposition: return "post_composition";
        case NormalizeStage::Both: return "both";
    }
    return "per_term";
}

NormalizeStage parse_normalize_stage(std::string_view name) {
    if (name == "per_term") return NormalizeStage::PerTerm;
    if (name == "post_composition") return NormalizeStage::PostComposition;
    if (name == "both") return NormalizeStage::Both;
    throw Error(ErrorCode::InvalidArgument, "unknown normalize stage '" + std::string(name) + "'");
}

void RefinementConfig::validate() const {
    if (!std::isfinite(alpha) || alpha < 0) throw Error(ErrorCode::InvalidArgument, "alpha must be >= 0");
    if (!std::isfinite(beta) || beta < 0) throw Error(ErrorCode::InvalidArgument, "beta must be >= 0");
    if (n == 0) throw Error(ErrorCode::InvalidArgument, "n must be positive");
}

std::vector<double> compose_terms(const Embedding& base, const Embedding& composed,
                                  const Embedding& background, double alpha, double beta) {
    require_same_dim(base.dim(), composed.dim(), "refine (composed)");
    require_same_dim(base.dim(), background.dim(), "refine (background)");
    std::vector<double> out(base.dim());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<double>(base[i]) + alpha * static_cast<double>(composed[i]) -
                 beta * static_cast<double>(background[i]);
    }
    return out;
}

Embedding refine_single(const Embedding& base, const Embedding& composed, const Embedding& background,
                        const RefinementConfig& cfg) {
    cfg.validate();
    switch (cfg.normalize_stage) {
        case NormalizeStage::PerTerm: {
            require_unit(base, "base embedding");
            require_unit(composed, "composed embedding");
            require_unit(background, "background embedding");
            return normalized_or_degenerate(compose_terms(base, composed, background, cfg.alpha, cfg.beta));
        }
        case NormalizeStage::Both: {
            return normalized_or_degenerate(compose_terms(l2_normalize(base), l2_normalize(composed),
                                                          l2_normalize(background), cfg.alpha, cfg.beta));
        }
        case NormalizeStage::PostComposition: {
            auto raw = compose_terms(base, composed, background, cfg.alpha, cfg.beta);
            double acc = 0.0;
            for (double v : raw) acc += v * v;
            if (std::sqrt(acc) < kDegenerateNorm) {
                throw Error(ErrorCode::DegenerateVector,
                            "refined embedding cancelled to zero; retry with a smaller beta");
            }
            return Embedding::from_doubles(raw);
        }
    }
    throw Error(ErrorCode::InvalidArgument, "unknown normalize stage");
}

QueryEmbeddingSet refine_embeddings(const Embedding& base, std::span<const Embedding> composed,
                                    std::span<const Embedding> backgrounds, const RefinementConfig& cfg) {
    cfg.validate();
    if (composed.size() != cfg.n || backgrounds.size() != cfg.n) {
        throw Error(ErrorCode::InvalidArgument, "refinement expects " + std::to_string(cfg.n) +
                                                    " composed and background embeddings");
    }
    std::vector<Embedding> adjusted;
    adjusted.reserve(cfg.n);
    for (std::size_t i = 0; i < cfg.n; ++i) {
        adjusted.push_back(refine_single(base, composed[i], backgrounds[i], cfg));
    }

    std::vector<std::size_t> order(cfg.n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        auto va = adjusted[a].values();
        auto vb = adjusted[b].values();
        return std::lexicographical_compare(va.begin(), va.end(), vb.begin(), vb.end());
    });
    std::vector<double> mean(base.dim(), 0.0);
    for (std::size_t idx : order) {
        auto v = adjusted[idx].values();
        for (std::size_t d = 0; d < mean.size(); ++d) mean[d] += static_cast<double>(v[d]);
    }
    for (double& m : mean) m /= static_cast<double>(cfg.n);

    Embedding refined = normalized_or_degenerate(mean);
    return QueryEmbeddingSet{base,
                             {composed.begin(), composed.end()},
                             {backgrounds.begin(), backgrounds.end()},
                             std::move(adjusted),
                             std::move(mean),
                             std::move(refined),
                             {}};
}

QueryEmbeddingSet refine_query(const QueryContext& ctx, const Embedder& embedder,
                               const RefinementConfig& cfg) {
    cfg.validate();
    ctx.validate(cfg.n);
    std::vector<std::string> texts;
    texts.reserve(2 * cfg.n + 1);
    texts.push_back(base_prompt(ctx.object_of_interest));
    for (const auto& y : ctx.surroundings) texts.push_back(composed_prompt(ctx.object_of_interest, y));
    for (const auto& y : ctx.surroundings) texts.push_back(surrounding_prompt(y));

    auto embedded = embedder.embed_text(texts);
    std::span<const Embedding> all(embedded);
    auto set = refine_embeddings(all[0], all.subspan(1, cfg.n), all.subspan(1 + cfg.n, cfg.n), cfg);
    set.surrounding_texts.reserve(cfg.n);
    for (const auto& y : ctx.surroundings) set.surrounding_texts.push_back(surrounding_prompt(y));
    return set;
}

}  // namespace opensat
