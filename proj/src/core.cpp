#include "opensat/core.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>

namespace opensat {

namespace {

constexpr double kMinNorm = 1e-12;

void require_finite(std::span<const float> values) {
    for (float v : values) {
        if (!std::isfinite(v)) {
            throw Error(ErrorCode::InvalidArgument, "embedding contains a non-finite value");
        }
    }
}

}  // namespace

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::DimensionMismatch: return "DimensionMismatch";
        case ErrorCode::DegenerateVector: return "DegenerateVector";
        case ErrorCode::EmptyImage: return "EmptyImage";
        case ErrorCode::RectOutOfBounds: return "RectOutOfBounds";
        case ErrorCode::ImageDecodeError: return "ImageDecodeError";
        case ErrorCode::UnsupportedFormat: return "UnsupportedFormat";
        case ErrorCode::ProviderUnavailable: return "ProviderUnavailable";
        case ErrorCode::EmbeddingNotFound: return "EmbeddingNotFound";
        case ErrorCode::ManifestParseError: return "ManifestParseError";
        case ErrorCode::ContextParseError: return "ContextParseError";
        case ErrorCode::DeficientContext: return "DeficientContext";
        case ErrorCode::DuplicateTile: return "DuplicateTile";
        case ErrorCode::EmptyStore: return "EmptyStore";
        case ErrorCode::StoreLocked: return "StoreLocked";
        case ErrorCode::UnknownClass: return "UnknownClass";
        case ErrorCode::NotFound: return "NotFound";
        case ErrorCode::Conflict: return "Conflict";
        case ErrorCode::ConfigError: return "ConfigError";
        case ErrorCode::IoError: return "IoError";
    }
    return "Unknown";
}

Embedding::Embedding(std::vector<float> values) : Embedding(std::move(values), false) {}

Embedding::Embedding(std::vector<float> values, bool normalized)
    : values_(std::move(values)), normalized_(normalized) {
    if (values_.empty()) {
        throw Error(ErrorCode::InvalidArgument, "embedding dimension must be >= 1");
    }
    require_finite(values_);
}

Embedding Embedding::unit(std::vector<float> values) {
    double n = l2_norm(values);
    if (std::abs(n - 1.0) > kUnitNormTolerance) {
        throw Error(ErrorCode::InvalidArgument,
                    "vector is not unit-norm (norm " + std::to_string(n) + ")");
    }
    return Embedding(std::move(values), true);
}

Embedding Embedding::from_doubles(std::span<const double> values) {
    std::vector<float> out(values.begin(), values.end());
    return Embedding(std::move(out));
}

double Embedding::norm() const noexcept { return l2_norm(values_); }

SimilarityScore::SimilarityScore(double value) {
    if (!(value >= -1.0 - 1e-9 && value <= 1.0 + 1e-9)) {
        throw Error(ErrorCode::InvalidArgument,
                    "similarity out of range: " + std::to_string(value));
    }
    value_ = std::clamp(value, -1.0, 1.0);
}

std::string TileId::key() const {
    return image_id + "/" + std::to_string(row) + "/" + std::to_string(col);
}

TileId TileId::from_key(std::string_view key) {
    auto parse = [](std::string_view s, std::uint32_t& out) {
        if (s.empty()) return false;
        auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
        return ec == std::errc() && ptr == s.data() + s.size();
    };
    auto last = key.rfind('/');
    if (last != std::string_view::npos && last > 0) {
        auto prev = key.rfind('/', last - 1);
        if (prev != std::string_view::npos && prev > 0) {
            std::uint32_t row = 0;
            std::uint32_t col = 0;
            if (parse(key.substr(prev + 1, last - prev - 1), row) &&
                parse(key.substr(last + 1), col)) {
                return TileId{std::string(key.substr(0, prev)), row, col};
            }
        }
    }
    return TileId{std::string(key), 0, 0};
}

double dot(std::span<const float> a, std::span<const float> b) noexcept {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    }
    return acc;
}

double l2_norm(std::span<const float> a) noexcept { return std::sqrt(dot(a, a)); }

void require_same_dim(std::size_t a, std::size_t b, std::string_view what) {
    if (a != b) {
        throw Error(ErrorCode::DimensionMismatch, std::string(what) + ": dimension " +
                                                      std::to_string(a) + " vs " +
                                                      std::to_string(b));
    }
}

double cosine_with_norms(std::span<const float> a, double norm_a, std::span<const float> b,
                         double norm_b) noexcept {
    return std::clamp(dot(a, b) / (norm_a * norm_b), -1.0, 1.0);
}

SimilarityScore cosine_similarity(const Embedding& a, const Embedding& b) {
    require_same_dim(a.dim(), b.dim(), "cosine_similarity");
    double na = a.norm();
    double nb = b.norm();
    if (na < kMinNorm || nb < kMinNorm) {
        throw Error(ErrorCode::DegenerateVector, "cosine_similarity of a zero-norm vector");
    }
    return SimilarityScore(cosine_with_norms(a.values(), na, b.values(), nb));
}

Embedding l2_normalize(const Embedding& a) {
    if (a.normalized()) return a;
    double n = a.norm();
    if (n <= kMinNorm) {
        throw Error(ErrorCode::DegenerateVector, "cannot normalize a near-zero vector");
    }
    std::vector<float> out(a.dim());
    for (std::size_t i = 0; i < a.dim(); ++i) {
        out[i] = static_cast<float>(static_cast<double>(a[i]) / n);
    }
    return Embedding::unit(std::move(out));
}

std::vector<double> l2_normalize(std::span<const double> a) {
    double acc = 0.0;
    for (double v : a) acc += v * v;
    double n = std::sqrt(acc);
    if (n <= kMinNorm) {
        throw Error(ErrorCode::DegenerateVector, "cannot normalize a near-zero vector");
    }
    std::vector<double> out(a.begin(), a.end());
    for (double& v : out) v /= n;
    return out;
}

}  // namespace opensat

std::size_t std::hash<opensat::TileId>::operator()(const opensat::TileId& id) const noexcept {
    std::size_t h = std::hash<std::string>{}(id.image_id);
    h ^= (static_cast<std::size_t>(id.row) << 32 | id.col) + 0x9e3779b97f4a7c15ULL + (h << 6) +
         (h >> 2);
    return h;
}
