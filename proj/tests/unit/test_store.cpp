#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "opensat/store.hpp"
#include "support/schema.hpp"
#include "support/synthetic.hpp"

using namespace opensat;
using opensat::testing::Rng;
namespace fs = std::filesystem;

namespace {

double oracle_cosine(std::span<const float> a, std::span<const float> b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) ab += double(a[i]) * double(b[i]);
    for (std::size_t i = 0; i < a.size(); ++i) aa += double(a[i]) * double(a[i]);
    for (std::size_t i = 0; i < b.size(); ++i) bb += double(b[i]) * double(b[i]);
    return std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

ErrorCode code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    return ErrorCode::IoError;
}

class StoreTest : public ::testing::Test {
protected:
    void SetUp() override { dir_ = opensat::testing::fresh_temp_dir("store"); }
    void TearDown() override { fs::remove_all(dir_); }
    fs::path root() const { return dir_ / "store"; }
    fs::path dir_;
};

}  // namespace

TEST_F(StoreTest, InsertThree) {
    Rng rng(1);
    auto store = Store::create(root(), 16);
    EXPECT_EQ(store.insert_batch(opensat::testing::random_records(3, 16, rng)), 3u);
    EXPECT_EQ(store.size(), 3u);
    EXPECT_EQ(store.manifest().record_count, 3u);
}

TEST_F(StoreTest, ReinsertIsDuplicate) {
    Rng rng(2);
    auto store = Store::create(root(), 8);
    auto batch = opensat::testing::random_records(3, 8, rng);
    store.insert_batch(batch);
    auto digest = store.manifest_digest();
    EXPECT_EQ(code_of([&] { store.insert_batch(batch); }), ErrorCode::DuplicateTile);
    EXPECT_EQ(store.size(), 3u);
    EXPECT_EQ(store.manifest_digest(), digest);
}

TEST_F(StoreTest, DuplicateWithinBatch) {
    Rng rng(3);
    auto store = Store::create(root(), 8);
    auto batch = opensat::testing::random_records(2, 8, rng);
    batch[1].id = batch[0].id;
    EXPECT_EQ(code_of([&] { store.insert_batch(batch); }), ErrorCode::DuplicateTile);
    EXPECT_EQ(store.size(), 0u);
}

TEST_F(StoreTest, EmptyBatchIsNoop) {
    auto store = Store::create(root(), 8);
    auto digest = store.manifest_digest();
    EXPECT_EQ(store.insert_batch({}), 0u);
    EXPECT_EQ(store.manifest_digest(), digest);
}

TEST_F(StoreTest, DimensionMismatchRejectsWholeBatch) {
    Rng rng(4);
    auto store = Store::create(root(), 8);
    auto batch = opensat::testing::random_records(3, 8, rng);
    batch[2].embedding = opensat::testing::random_unit(9, rng);
    EXPECT_EQ(code_of([&] { store.insert_batch(batch); }), ErrorCode::DimensionMismatch);
    EXPECT_EQ(store.size(), 0u);
}

TEST_F(StoreTest, NonUnitEmbeddingRejected) {
    auto store = Store::in_memory(2);
    TileRecord r{TileId{"a", 0, 0}, Embedding({3, 4}), {}, {}, {}};
    EXPECT_EQ(code_of([&] { store.insert_batch({r}); }), ErrorCode::InvalidArgument);
}

TEST_F(StoreTest, CreateTwiceConflicts) {
    (void)Store::create(root(), 8);
    EXPECT_EQ(code_of([&] { (void)Store::create(root(), 8); }), ErrorCode::Conflict);
    EXPECT_EQ(code_of([&] { (void)Store::open_or_create(root(), 9); }), ErrorCode::DimensionMismatch);
    EXPECT_EQ(code_of([&] { (void)Store::open(dir_ / "missing"); }), ErrorCode::NotFound);
}

TEST_F(StoreTest, CorruptManifest) {
    (void)Store::create(root(), 8);
    std::ofstream(root() / "manifest.json") << "{not json";
    EXPECT_EQ(code_of([&] { (void)Store::open(root()); }), ErrorCode::ManifestParseError);
    std::ofstream(root() / "manifest.json", std::ios::trunc)
        << R"({"format_version": 99, "dim": 8, "record_count": 0, "images": [], "segments": [], "labels_bytes": 0})";
    EXPECT_EQ(code_of([&] { (void)Store::open(root()); }), ErrorCode::ManifestParseError);
}

TEST_F(StoreTest, ScanSingleIdenticalTile) {
    Rng rng(5);
    auto store = Store::in_memory(32);
    auto recs = opensat::testing::random_records(1, 32, rng);
    store.insert_batch(recs);
    auto rows = store.scan_similarities(recs[0].embedding, {});
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_NEAR(rows[0].query_sim, 1.0, 1e-12);
    EXPECT_TRUE(rows[0].candidate_sims.empty());
}

TEST_F(StoreTest, ScanWithoutCandidates) {
    Rng rng(6);
    auto store = Store::in_memory(8);
    store.insert_batch(opensat::testing::random_records(7, 8, rng));
    auto rows = store.scan_similarities(opensat::testing::random_unit(8, rng), {});
    EXPECT_EQ(rows.size(), 7u);
    for (const auto& r : rows) EXPECT_TRUE(r.candidate_sims.empty());
}

TEST_F(StoreTest, ScanMatchesDoubleLoopOracle) {
    Rng rng(7);
    for (std::size_t count : {5u, 1000u}) {
        auto store = Store::in_memory(64);
        auto recs = opensat::testing::random_records(count, 64, rng);
        store.insert_batch(recs);
        auto query = opensat::testing::random_unit(64, rng);
        auto candidates = opensat::testing::random_units(2, 64, rng);
        auto rows = store.scan_similarities(query, candidates);
        std::sort(recs.begin(), recs.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
        ASSERT_EQ(rows.size(), recs.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            ASSERT_EQ(rows[i].id, recs[i].id);
            ASSERT_EQ(rows[i].query_sim, oracle_cosine(recs[i].embedding.values(), query.values()));
            for (std::size_t c = 0; c < 2; ++c) {
                ASSERT_EQ(rows[i].candidate_sims[c], oracle_cosine(recs[i].embedding.values(), candidates[c].values()));
            }
        }
    }
}

TEST_F(StoreTest, EmptyStoreErrors) {
    auto store = Store::in_memory(4);
    auto q = Embedding::unit({1, 0, 0, 0});
    EXPECT_EQ(code_of([&] { (void)store.scan_similarities(q, {}); }), ErrorCode::EmptyStore);
    EXPECT_EQ(code_of([&] { (void)store.top_k(q, 1); }), ErrorCode::EmptyStore);
}

TEST_F(StoreTest, ScanDimensionMismatch) {
    Rng rng(8);
    auto store = Store::in_memory(4);
    store.insert_batch(opensat::testing::random_records(2, 4, rng));
    EXPECT_EQ(code_of([&] { (void)store.scan_similarities(Embedding::unit({1, 0}), {}); }),
              ErrorCode::DimensionMismatch);
}

TEST_F(StoreTest, DeterministicTileIdOrder) {
    auto store = Store::in_memory(2);
    std::vector<TileRecord> recs;
    for (auto [img, row, col] : std::vector<std::tuple<std::string, std::uint32_t, std::uint32_t>>{
             {"b", 0, 0}, {"a", 10, 0}, {"a", 2, 5}, {"a", 2, 1}}) {
        recs.push_back({TileId{img, row, col}, Embedding::unit({1, 0}), {}, {}, {}});
    }
    store.insert_batch({recs[0], recs[1]});
    store.insert_batch({recs[2], recs[3]});
    auto rows = store.scan_similarities(Embedding::unit({0, 1}), {});
    std::vector<std::string> keys;
    for (const auto& r : rows) keys.push_back(r.id.key());
    EXPECT_EQ(keys, (std::vector<std::string>{"a/2/1", "a/2/5", "a/10/0", "b/0/0"}));
}

TEST_F(StoreTest, ImageFilter) {
    Rng rng(9);
    auto store = Store::in_memory(8);
    store.insert_batch(opensat::testing::random_records(4, 8, rng, "one"));
    store.insert_batch(opensat::testing::random_records(3, 8, rng, "two"));
    ScanFilter f{std::string("two")};
    EXPECT_EQ(store.scan_similarities(opensat::testing::random_unit(8, rng), {}, f).size(), 3u);
    ScanFilter none{std::string("three")};
    EXPECT_EQ(code_of([&] { (void)store.scan_similarities(opensat::testing::random_unit(8, rng), {}, none); }),
              ErrorCode::EmptyStore);
}

TEST_F(StoreTest, TopKUniqueMax) {
    auto store = Store::in_memory(2);
    store.insert_batch({{TileId{"a", 0, 0}, Embedding::unit({1, 0}), {}, {}, {}},
                        {TileId{"a", 0, 1}, Embedding::unit({0, 1}), {}, {}, {}}});
    auto top = store.top_k(Embedding::unit({0, 1}), 1);
    ASSERT_EQ(top.size(), 1u);
    EXPECT_EQ(top[0].id, (TileId{"a", 0, 1}));
    EXPECT_EQ(code_of([&] { (void)store.top_k(Embedding::unit({0, 1}), 0); }), ErrorCode::InvalidArgument);
}

TEST_F(StoreTest, TopKLargerThanStore) {
    auto store = Store::in_memory(2);
    store.insert_batch({{TileId{"b", 0, 0}, Embedding::unit({1, 0}), {}, {}, {}},
                        {TileId{"a", 0, 0}, Embedding::unit({1, 0}), {}, {}, {}},
                        {TileId{"c", 0, 0}, Embedding::unit({0, 1}), {}, {}, {}}});
    auto top = store.top_k(Embedding::unit({1, 0}), 10);
    ASSERT_EQ(top.size(), 3u);
    EXPECT_EQ(top[0].id.image_id, "a");  // tie broken by id
    EXPECT_EQ(top[1].id.image_id, "b");
    EXPECT_EQ(top[2].id.image_id, "c");
}

TEST_F(StoreTest, TopKMatchesFullSortOracle) {
    Rng rng(10);
    auto store = Store::in_memory(24);
    auto recs = opensat::testing::random_records(100, 24, rng);
    store.insert_batch(recs);
    auto q = opensat::testing::random_unit(24, rng);
    std::vector<std::pair<double, TileId>> all;
    for (const auto& r : recs) all.emplace_back(oracle_cosine(r.embedding.values(), q.values()), r.id);
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    auto top = store.top_k(q, 10);
    ASSERT_EQ(top.size(), 10u);
    for (std::size_t i = 0; i < 10; ++i) {
        EXPECT_EQ(top[i].id, all[i].second);
        EXPECT_EQ(top[i].score.value(), all[i].first);
    }
}

TEST_F(StoreTest, SurvivesReopen) {
    Rng rng(11);
    std::vector<TileRecord> recs;
    {
        auto store = Store::create(root(), 16);
        recs = opensat::testing::random_records(40, 16, rng);
        recs[3].label = "river";
        recs[4].tile_path = "tiles/img/0/4.png";
        store.insert_batch({recs.begin(), recs.begin() + 20});
        store.insert_batch({recs.begin() + 20, recs.end()});
    }
    auto store = Store::open(root());
    EXPECT_EQ(store.size(), 40u);
    EXPECT_EQ(store.manifest().segments.size(), 2u);
    for (const auto& r : recs) {
        auto got = store.get(r.id);
        ASSERT_TRUE(got);
        EXPECT_EQ(got->embedding.values().size(), 16u);
        EXPECT_TRUE(std::equal(got->embedding.values().begin(), got->embedding.values().end(),
                               r.embedding.values().begin()));
        EXPECT_EQ(got->rect, r.rect);
        EXPECT_EQ(got->label, r.label);
        EXPECT_EQ(got->tile_path, r.tile_path);
    }
    EXPECT_TRUE(fs::exists(root() / "segments" / "000.vec"));
    EXPECT_TRUE(fs::exists(root() / "labels.jsonl"));
}

TEST_F(StoreTest, ImageRegistration) {
    Rng rng(12);
    auto store = Store::create(root(), 8);
    ImageEntry img{"scene", TileGridSpec{448, 448, 224, 224}, 4, "scene.png"};
    auto recs = opensat::testing::random_records(4, 8, rng, "scene");
    store.insert_batch(recs, img);
    auto again = opensat::testing::random_records(1, 8, rng, "other");
    store.insert_batch(again);
    auto m = Store::open(root()).manifest();
    ASSERT_EQ(m.images.size(), 1u);
    EXPECT_EQ(m.images[0].grid, img.grid);
    EXPECT_EQ(m.record_count, 5u);
    EXPECT_EQ(m.imported_records, 1u);
    std::size_t from_images = 0;
    for (const auto& i : m.images) from_images += i.tile_count;
    EXPECT_EQ(m.record_count, from_images + m.imported_records);
    EXPECT_EQ(code_of([&] { store.insert_batch(opensat::testing::random_records(1, 8, rng, "scene2"), img); }),
              ErrorCode::Conflict);
}

TEST_F(StoreTest, ManifestMatchesSchema) {
    Rng rng(13);
    auto store = Store::create(root(), 8);
    store.insert_batch(opensat::testing::random_records(4, 8, rng, "scene"),
                       ImageEntry{"scene", TileGridSpec{448, 448, 224, 224}, 4, "scene.png"});
    std::ifstream in(root() / "manifest.json");
    auto doc = nlohmann::json::parse(in);
    auto errors = opensat::testing::schema_violations(opensat::testing::load_schema("store_manifest.json"), doc);
    EXPECT_TRUE(errors.empty()) << errors.front();
}

TEST_F(StoreTest, UncommittedTailIsIgnored) {
    Rng rng(14);
    {
        auto store = Store::create(root(), 8);
        store.insert_batch(opensat::testing::random_records(3, 8, rng));
    }
    // A crashed writer may leave an orphan segment and a torn labels line behind.
    std::ofstream(root() / "segments" / "001.vec") << "garbage";
    std::ofstream(root() / "labels.jsonl", std::ios::app) << "{\"key\": \"torn";
    auto store = Store::open(root());
    EXPECT_EQ(store.size(), 3u);
    store.insert_batch(opensat::testing::random_records(2, 8, rng, "later"));
    EXPECT_EQ(Store::open(root()).size(), 5u);
}

TEST_F(StoreTest, SecondHandleSeesCommittedBatches) {
    Rng rng(15);
    auto a = Store::create(root(), 8);
    auto b = Store::open(root());
    a.insert_batch(opensat::testing::random_records(2, 8, rng, "x"));
    b.insert_batch(opensat::testing::random_records(2, 8, rng, "y"));
    EXPECT_EQ(b.size(), 4u);
    EXPECT_EQ(Store::open(root()).size(), 4u);
}

TEST_F(StoreTest, ScansSeeConsistentSnapshots) {
    Rng rng(16);
    auto store = Store::in_memory(8);
    store.insert_batch(opensat::testing::random_records(50, 8, rng, "base"));
    auto q = opensat::testing::random_unit(8, rng);
    std::atomic<bool> done{false};
    std::atomic<int> torn{0};
    std::thread reader([&] {
        while (!done) {
            auto n = store.scan_similarities(q, {}).size();
            if ((n - 50) % 10 != 0) ++torn;
        }
    });
    for (int i = 0; i < 20; ++i) {
        store.insert_batch(opensat::testing::random_records(10, 8, rng, "batch" + std::to_string(i)));
    }
    done = true;
    reader.join();
    EXPECT_EQ(torn, 0);
    EXPECT_EQ(store.size(), 250u);
}

TEST_F(StoreTest, QueriesDoNotChangeManifest) {
    Rng rng(17);
    auto store = Store::create(root(), 8);
    store.insert_batch(opensat::testing::random_records(5, 8, rng));
    auto before = store.manifest_digest();
    (void)store.scan_similarities(opensat::testing::random_unit(8, rng), {});
    (void)store.top_k(opensat::testing::random_unit(8, rng), 3);
    EXPECT_EQ(store.manifest_digest(), before);
}
