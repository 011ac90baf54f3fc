#pragma once

#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "opensat/core.hpp"
#include "opensat/embed.hpp"
#include "opensat/eval.hpp"
#include "opensat/llmctx.hpp"
#include "opensat/raster.hpp"
#include "opensat/store.hpp"

namespace opensat::testing {

using Rng = std::mt19937_64;

std::vector<double> gaussian(std::size_t dim, Rng& rng);
Embedding random_unit(std::size_t dim, Rng& rng);
// Any non-zero vector, not normalized.
Embedding random_vector(std::size_t dim, Rng& rng);
std::vector<Embedding> random_units(std::size_t count, std::size_t dim, Rng& rng);
// `count` mutually orthonormal vectors (Gram-Schmidt in double).
std::vector<std::vector<double>> random_orthonormal(std::size_t count, std::size_t dim, Rng& rng);
Embedding unit_from(const std::vector<double>& v);

std::vector<TileRecord> random_records(std::size_t count, std::size_t dim, Rng& rng,
                                       const std::string& image_id = "img");

// Relevant tiles mix the object concept with weighted surrounding concepts;
// irrelevant tiles contain only the surroundings. Composed captions are
// normalize(object + surrounding).
struct ContextScene {
    std::string object = "object";
    std::vector<std::string> surroundings;
    Embedding object_text{std::vector<float>{1.0f}};
    std::vector<Embedding> surrounding_text;
    std::vector<Embedding> composed_text;
    std::vector<Embedding> relevant;
    std::vector<Embedding> irrelevant;
};

ContextScene make_context_scene(std::uint64_t seed, std::size_t dim = 512, std::size_t n = 5,
                                std::size_t relevant = 40, std::size_t irrelevant = 40, double noise = 0.0);

// Text table answering every prompt the retriever issues for the scene.
std::shared_ptr<TableEmbedder> scene_embedder(const ContextScene& scene);
std::shared_ptr<ContextFixture> scene_fixture(const ContextScene& scene);
// Relevant tiles labelled scene.object, irrelevant ones "scene".
LabeledArchive scene_archive(const ContextScene& scene);

double mean_cosine(const Embedding& query, const std::vector<Embedding>& tiles);

// Minimal PNG generators.
Raster gradient_raster(std::uint32_t width, std::uint32_t height, std::uint32_t channels = 3,
                       std::uint32_t seed = 0);

std::filesystem::path fresh_temp_dir(const std::string& tag);

std::filesystem::path source_dir();

}  // namespace opensat::testing
