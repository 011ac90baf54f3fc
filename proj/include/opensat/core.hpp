#pragma once

#include <compare>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "opensat/error.hpp"

namespace opensat {

inline constexpr std::size_t kDefaultDim = 512;
inline constexpr double kUnitNormTolerance = 1e-6;

// Fixed-dimension float vector with an explicit normalization flag.
// Immutable once constructed; only the factory functions set the flag.
class Embedding {
public:
    explicit Embedding(std::vector<float> values);

    // Validates |norm - 1| <= kUnitNormTolerance before setting the flag.
    static Embedding unit(std::vector<float> values);
    static Embedding from_doubles(std::span<const double> values);

    [[nodiscard]] std::size_t dim() const noexcept { return values_.size(); }
    [[nodiscard]] std::span<const float> values() const noexcept { return values_; }
    [[nodiscard]] bool normalized() const noexcept { return normalized_; }
    [[nodiscard]] double norm() const noexcept;
    [[nodiscard]] float operator[](std::size_t i) const noexcept { return values_[i]; }

    bool operator==(const Embedding& other) const = default;

private:
    Embedding(std::vector<float> values, bool normalized);

    std::vector<float> values_;
    bool normalized_ = false;
};

// Cosine similarity, clamped to [-1, 1].
class SimilarityScore {
public:
    constexpr SimilarityScore() = default;
    explicit SimilarityScore(double value);

    [[nodiscard]] constexpr double value() const noexcept { return value_; }
    constexpr auto operator<=>(const SimilarityScore&) const = default;

private:
    double value_ = 0.0;
};

struct TileId {
    std::string image_id;
    std::uint32_t row = 0;
    std::uint32_t col = 0;

    auto operator<=>(const TileId&) const = default;
    bool operator==(const TileId&) const = default;

    // "{image_id}/{row}/{col}"
    [[nodiscard]] std::string key() const;
    // Inverse of key(). Keys without a trailing "/row/col" map to (key, 0, 0).
    static TileId from_key(std::string_view key);
};

// Sequential double accumulation; the summation order is part of the contract
// because store scans are checked bit-for-bit against a naive loop.
double dot(std::span<const float> a, std::span<const float> b) noexcept;
double l2_norm(std::span<const float> a) noexcept;

SimilarityScore cosine_similarity(const Embedding& a, const Embedding& b);
// Same formula as cosine_similarity with precomputed norms.
double cosine_with_norms(std::span<const float> a, double norm_a,
                         std::span<const float> b, double norm_b) noexcept;

Embedding l2_normalize(const Embedding& a);
std::vector<double> l2_normalize(std::span<const double> a);

void require_same_dim(std::size_t a, std::size_t b, std::string_view what);

}  // namespace opensat

template <>
struct std::hash<opensat::TileId> {
    std::size_t operator()(const opensat::TileId& id) const noexcept;
};
