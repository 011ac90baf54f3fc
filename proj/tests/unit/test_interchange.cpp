#include <gtest/gtest.h>

#include <cstring>
#include <fstream>
#include <sstream>

#include "opensat/interchange.hpp"
#include "support/synthetic.hpp"

using namespace opensat;
using opensat::testing::Rng;
namespace fs = std::filesystem;

namespace {

class InterchangeTest : public ::testing::Test {
protected:
    void SetUp() override { dir_ = opensat::testing::fresh_temp_dir("interchange"); }
    void TearDown() override { fs::remove_all(dir_); }

    fs::path write(const std::string& name, const std::string& content) {
        auto p = dir_ / name;
        std::ofstream(p, std::ios::binary) << content;
        return p;
    }

    fs::path dir_;
};

ErrorCode code_of(const std::function<void()>& fn, std::string* message = nullptr) {
    try {
        fn();
    } catch (const Error& e) {
        if (message) *message = e.what();
        return e.code();
    }
    return ErrorCode::IoError;
}

}  // namespace

TEST_F(InterchangeTest, TwoLineJsonlInFileOrder) {
    auto p = write("two.jsonl",
                   "{\"key\":\"b\",\"vector\":[1,0],\"label\":\"x\"}\n"
                   "{\"key\":\"a\",\"vector\":[0,1],\"label\":null}\n");
    ImportStats stats;
    auto recs = import_embeddings(p, &stats);
    ASSERT_EQ(recs.size(), 2u);
    EXPECT_EQ(recs[0].key, "b");
    EXPECT_EQ(recs[0].label, "x");
    EXPECT_EQ(recs[1].key, "a");
    EXPECT_FALSE(recs[1].label);
    EXPECT_EQ(stats.dim, 2u);
    EXPECT_EQ(stats.normalization_fixes, 0u);
}

TEST_F(InterchangeTest, NonUnitVectorNormalizedAndCounted) {
    auto p = write("norm.jsonl", "{\"key\":\"k\",\"vector\":[2,0,0],\"label\":null}\n");
    ImportStats stats;
    auto recs = import_embeddings(p, &stats);
    ASSERT_EQ(recs.size(), 1u);
    EXPECT_EQ(stats.normalization_fixes, 1u);
    EXPECT_TRUE(recs[0].embedding.normalized());
    EXPECT_FLOAT_EQ(recs[0].embedding[0], 1.0f);
}

TEST_F(InterchangeTest, EmptyFileIsEmptyStream) {
    auto p = write("empty.jsonl", "");
    ImportStats stats;
    EXPECT_TRUE(import_embeddings(p, &stats).empty());
    EXPECT_EQ(stats.records, 0u);
}

TEST_F(InterchangeTest, ParseErrorCarriesLineNumber) {
    auto p = write("bad.jsonl",
                   "{\"key\":\"a\",\"vector\":[1,0]}\n"
                   "\n"
                   "{\"key\":\"b\",\"vector\":[1,0}\n");
    std::string msg;
    EXPECT_EQ(code_of([&] { (void)import_embeddings(p); }, &msg), ErrorCode::ManifestParseError);
    EXPECT_NE(msg.find("bad.jsonl:3"), std::string::npos) << msg;
}

TEST_F(InterchangeTest, MissingLabelWhenRequired) {
    auto p = write("nolabel.jsonl", "{\"key\":\"a\",\"vector\":[1,0],\"label\":\"c\"}\n{\"key\":\"b\",\"vector\":[1,0]}\n");
    std::string msg;
    ImportOptions opts;
    opts.require_label = true;
    EXPECT_EQ(code_of([&] { (void)import_embeddings(p, nullptr, opts); }, &msg), ErrorCode::ManifestParseError);
    EXPECT_NE(msg.find(":2"), std::string::npos);
}

TEST_F(InterchangeTest, DimensionInconsistency) {
    auto p = write("dims.jsonl", "{\"key\":\"a\",\"vector\":[1,0]}\n{\"key\":\"b\",\"vector\":[1,0,0]}\n");
    EXPECT_EQ(code_of([&] { (void)import_embeddings(p); }), ErrorCode::DimensionMismatch);
    ImportOptions opts;
    opts.expected_dim = 3;
    auto q = write("dims2.jsonl", "{\"key\":\"a\",\"vector\":[1,0]}\n");
    EXPECT_EQ(code_of([&] { (void)import_embeddings(q, nullptr, opts); }), ErrorCode::DimensionMismatch);
}

TEST_F(InterchangeTest, BinaryLayoutIsBitExact) {
    std::vector<EmbeddingRecord> recs{{"ab", Embedding::unit({1.0f, 0.0f}), std::string("L")},
                                      {"c", Embedding::unit({0.0f, 1.0f}), std::nullopt}};
    std::ostringstream out;
    write_binary(out, 2, recs);
    std::string b = out.str();

    std::string expected;
    auto u16 = [&](std::uint16_t v) { expected += char(v & 0xff), expected += char(v >> 8); };
    auto u32 = [&](std::uint32_t v) { for (int i = 0; i < 4; ++i) expected += char((v >> (8 * i)) & 0xff); };
    auto f32 = [&](float f) { std::uint32_t v; std::memcpy(&v, &f, 4); u32(v); };
    expected += "OSAT";
    u32(1);
    u32(2);
    u32(2), u32(0);  // u64 count
    u16(2), expected += "ab", f32(1.0f), f32(0.0f), expected += char(1), u16(1), expected += "L";
    u16(1), expected += "c", f32(0.0f), f32(1.0f), expected += char(0);
    EXPECT_EQ(b, expected);

    std::istringstream in(b);
    auto back = read_binary(in);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0].key, "ab");
    EXPECT_EQ(back[0].label, "L");
    EXPECT_EQ(back[1].embedding, recs[1].embedding);
}

TEST_F(InterchangeTest, BinaryAndJsonlRoundTripRandom) {
    Rng rng(42);
    std::vector<EmbeddingRecord> recs;
    for (int i = 0; i < 50; ++i) {
        std::optional<std::string> label;
        if (i % 3) label = "class-" + std::to_string(i % 4);
        recs.push_back({"key/" + std::to_string(i), opensat::testing::random_unit(33, rng), label});
    }
    write_binary(dir_ / "r.vec", 33, recs);
    write_jsonl(dir_ / "r.jsonl", recs);
    for (auto name : {"r.vec", "r.jsonl"}) {
        ImportStats stats;
        auto back = import_embeddings(dir_ / name, &stats);
        ASSERT_EQ(back.size(), recs.size()) << name;
        for (std::size_t i = 0; i < recs.size(); ++i) {
            EXPECT_EQ(back[i].key, recs[i].key);
            EXPECT_EQ(back[i].label, recs[i].label);
            auto a = back[i].embedding.values();
            auto b = recs[i].embedding.values();
            EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << name << " record " << i;
        }
    }
}

TEST_F(InterchangeTest, TruncatedBinary) {
    std::vector<EmbeddingRecord> recs{{"a", Embedding::unit({1.0f, 0.0f}), std::nullopt}};
    std::ostringstream out;
    write_binary(out, 2, recs);
    std::string b = out.str();
    b.resize(b.size() - 3);
    std::istringstream in(b);
    EXPECT_EQ(code_of([&] { (void)read_binary(in); }), ErrorCode::ManifestParseError);
}

TEST_F(InterchangeTest, FloatFormatRoundTrips) {
    Rng rng(1);
    std::uniform_real_distribution<float> d(-1.0f, 1.0f);
    for (int i = 0; i < 1000; ++i) {
        float f = d(rng);
        EXPECT_EQ(std::stof(format_float(f)), f);
    }
    EXPECT_EQ(format_float(0.5f), "0.5");
}

TEST_F(InterchangeTest, StreamingSinkSeesEveryRecord) {
    auto p = write("s.jsonl", "{\"key\":\"a\",\"vector\":[1,0]}\n{\"key\":\"b\",\"vector\":[0,3]}\n");
    std::vector<std::string> keys;
    auto stats = import_embeddings(p, [&](EmbeddingRecord&& r) { keys.push_back(r.key); });
    EXPECT_EQ(keys, (std::vector<std::string>{"a", "b"}));
    EXPECT_EQ(stats.normalization_fixes, 1u);
}
