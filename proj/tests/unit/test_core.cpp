#include <gtest/gtest.h>

#include <cmath>

#include "opensat/core.hpp"
#include "support/synthetic.hpp"

using namespace opensat;
using opensat::testing::Rng;

namespace {

Embedding vec(std::vector<float> v) { return Embedding(std::move(v)); }

ErrorCode code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "expected an opensat::Error";
    return ErrorCode::IoError;
}

}  // namespace

TEST(Cosine, IdenticalUnitVectors) { EXPECT_DOUBLE_EQ(cosine_similarity(vec({1, 0}), vec({1, 0})).value(), 1.0); }

TEST(Cosine, OrthogonalVectors) { EXPECT_DOUBLE_EQ(cosine_similarity(vec({1, 0}), vec({0, 1})).value(), 0.0); }

TEST(Cosine, ThreeFourFive) { EXPECT_NEAR(cosine_similarity(vec({3, 4}), vec({4, 3})).value(), 24.0 / 25.0, 1e-12); }

TEST(Cosine, DimensionMismatch) {
    EXPECT_EQ(code_of([] { (void)cosine_similarity(vec({1, 0}), vec({1, 0, 0})); }), ErrorCode::DimensionMismatch);
}

TEST(Cosine, ZeroNorm) {
    EXPECT_EQ(code_of([] { (void)cosine_similarity(vec({0, 0}), vec({1, 0})); }), ErrorCode::DegenerateVector);
}

TEST(Cosine, ClampedToUnitInterval) {
    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
        auto a = opensat::testing::random_vector(7, rng);
        double s = cosine_similarity(a, a).value();
        EXPECT_LE(s, 1.0);
        EXPECT_NEAR(s, 1.0, 1e-9);
    }
}

TEST(Cosine, Symmetric) {
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
        auto a = opensat::testing::random_vector(64, rng);
        auto b = opensat::testing::random_vector(64, rng);
        EXPECT_EQ(cosine_similarity(a, b).value(), cosine_similarity(b, a).value());
    }
}

TEST(Cosine, ScaleInvariant) {
    Rng rng(7);
    std::uniform_real_distribution<double> k(0.01, 100.0);
    for (int i = 0; i < 200; ++i) {
        auto a = opensat::testing::random_vector(32, rng);
        auto b = opensat::testing::random_vector(32, rng);
        double f = k(rng);
        std::vector<double> scaled;
        for (float x : a.values()) scaled.push_back(f * x);
        EXPECT_NEAR(cosine_similarity(Embedding::from_doubles(scaled), b).value(), cosine_similarity(a, b).value(),
                    1e-6);  // float storage of the scaled copy
    }
}

TEST(Cosine, WithNormsMatchesPlain) {
    Rng rng(9);
    for (int i = 0; i < 100; ++i) {
        auto a = opensat::testing::random_vector(16, rng);
        auto b = opensat::testing::random_vector(16, rng);
        double fast = cosine_with_norms(a.values(), l2_norm(a.values()), b.values(), l2_norm(b.values()));
        EXPECT_EQ(fast, cosine_similarity(a, b).value());
    }
}

TEST(Normalize, ThreeFour) {
    auto n = l2_normalize(vec({3, 4}));
    EXPECT_TRUE(n.normalized());
    EXPECT_NEAR(n[0], 0.6, 1e-7);
    EXPECT_NEAR(n[1], 0.8, 1e-7);
}

TEST(Normalize, Axis) {
    auto n = l2_normalize(vec({0, 0, 5}));
    EXPECT_EQ(n, Embedding::unit({0, 0, 1}));
}

TEST(Normalize, Quarter) {
    auto n = l2_normalize(vec({1, 1, 1, 1}));
    for (float x : n.values()) EXPECT_FLOAT_EQ(x, 0.5f);
}

TEST(Normalize, NearZeroIsDegenerate) {
    EXPECT_EQ(code_of([] { (void)l2_normalize(vec({0, 0, 0})); }), ErrorCode::DegenerateVector);
    EXPECT_EQ(code_of([] { (void)l2_normalize(vec({1e-20f, 0})); }), ErrorCode::DegenerateVector);
}

TEST(Normalize, IdempotentAndUnit) {
    Rng rng(11);
    for (int i = 0; i < 200; ++i) {
        auto a = opensat::testing::random_vector(128, rng);
        auto once = l2_normalize(a);
        auto twice = l2_normalize(once);
        EXPECT_NEAR(once.norm(), 1.0, 1e-6);
        for (std::size_t d = 0; d < a.dim(); ++d) EXPECT_NEAR(once[d], twice[d], 1e-7);
    }
}

TEST(Normalize, DoubleOverload) {
    std::vector<double> v{3, 4};
    auto n = l2_normalize(std::span<const double>(v));
    EXPECT_DOUBLE_EQ(n[0], 0.6);
    EXPECT_DOUBLE_EQ(n[1], 0.8);
}

TEST(Embedding, UnitRejectsNonUnit) {
    EXPECT_EQ(code_of([] { (void)Embedding::unit({1, 1}); }), ErrorCode::InvalidArgument);
    EXPECT_TRUE(Embedding::unit({1, 0}).normalized());
    EXPECT_FALSE(Embedding({1, 0}).normalized());
}

TEST(Embedding, EmptyRejected) {
    EXPECT_EQ(code_of([] { Embedding e(std::vector<float>{}); }), ErrorCode::InvalidArgument);
}

TEST(TileIdKey, RoundTrip) {
    TileId id{"scene-1", 12, 7};
    EXPECT_EQ(id.key(), "scene-1/12/7");
    EXPECT_EQ(TileId::from_key(id.key()), id);
    EXPECT_EQ(TileId::from_key("plain-key"), (TileId{"plain-key", 0, 0}));
}

TEST(TileIdKey, LexicographicOrder) {
    EXPECT_LT((TileId{"a", 9, 9}), (TileId{"b", 0, 0}));
    EXPECT_LT((TileId{"a", 1, 9}), (TileId{"a", 2, 0}));
    EXPECT_LT((TileId{"a", 1, 1}), (TileId{"a", 1, 2}));
}

TEST(Similarity, RejectsOutOfRange) {
    EXPECT_EQ(code_of([] { SimilarityScore s(1.5); }), ErrorCode::InvalidArgument);
    EXPECT_DOUBLE_EQ(SimilarityScore(1.0 + 1e-12).value(), 1.0);
}
