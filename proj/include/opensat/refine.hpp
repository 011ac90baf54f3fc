#pragma once

#include <span>
#include <string>
#include <vector>

#include "opensat/core.hpp"
#include "opensat/embed.hpp"
#include "opensat/llmctx.hpp"

namespace opensat {

// Where L2 normalization is applied during refinement.
//   PerTerm:         inputs must already be unit-norm; each adjusted vector is
//                    normalized, and so is their mean.
//   PostComposition: inputs used as given; only the mean is normalized.
//   Both:            inputs are normalized here first, then as PerTerm.
enum class NormalizeStage { PerTerm, PostComposition, Both };

std::string_view to_string(NormalizeStage stage) noexcept;
NormalizeStage parse_normalize_stage(std::string_view name);

struct RefinementConfig {
    double alpha = 1.0;  // weight of the object-with-surrounding term
    double beta = 1.0;   // weight of the subtracted surrounding term
    std::size_t n = kDefaultSurroundings;
    NormalizeStage normalize_stage = NormalizeStage::PerTerm;

    void validate() const;
};

// base + alpha * composed - beta * background, accumulated in double, no normalization.
std::vector<double> compose_terms(const Embedding& base, const Embedding& composed,
                                  const Embedding& background, double alpha, double beta);

// Adjusted object embedding for one surrounding object.
Embedding refine_single(const Embedding& base, const Embedding& composed,
                        const Embedding& background, const RefinementConfig& cfg);

struct QueryEmbeddingSet {
    Embedding base;
    std::vector<Embedding> composed;
    std::vector<Embedding> backgrounds;
    std::vector<Embedding> refined_per_surrounding;
    std::vector<double> mean;  // average of refined_per_surrounding before normalization
    Embedding refined;         // unit-norm
    std::vector<std::string> surrounding_texts;
};

// Averages refine_single over all surroundings. The sum runs in a canonical
// order so the result does not depend on surrounding order.
QueryEmbeddingSet refine_embeddings(const Embedding& base, std::span<const Embedding> composed,
                                    std::span<const Embedding> backgrounds,
                                    const RefinementConfig& cfg);

// Embeds the 2n+1 prompts for ctx and refines the object embedding.
QueryEmbeddingSet refine_query(const QueryContext& ctx, const Embedder& embedder,
                               const RefinementConfig& cfg);

}  // namespace opensat
