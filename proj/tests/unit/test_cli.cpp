#include <gtest/gtest.h>

#include <fstream>

#include <nlohmann/json.hpp>

#include "opensat/interchange.hpp"
#include "opensat/raster.hpp"
#include "support/process.hpp"
#include "support/schema.hpp"
#include "support/synthetic.hpp"

using namespace opensat;
using opensat::testing::run_process;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir = opensat::testing::fresh_temp_dir("cli");
        write_png(opensat::testing::gradient_raster(448, 448, 3, 4), dir / "scene.png");
    }
    void TearDown() override { fs::remove_all(dir); }

    opensat::testing::ProcessResult cli(std::vector<std::string> args, bool with_store = true) {
        std::vector<std::string> argv{OPENSAT_CLI_PATH, "--log-level", "warn"};
        if (with_store) {
            argv.push_back("--store");
            argv.push_back((dir / "store").string());
        }
        argv.push_back("--dim");
        argv.push_back("64");
        argv.push_back("--fixture");
        argv.push_back((opensat::testing::source_dir() / "fixtures" / "contexts.json").string());
        argv.insert(argv.end(), args.begin(), args.end());
        return run_process(argv);
    }

    fs::path dir;
};

}  // namespace

TEST_F(CliTest, IngestThenQueryIsDeterministic) {
    auto ingest = cli({"ingest", (dir / "scene.png").string(), "--dump-tiles", (dir / "dump").string()});
    ASSERT_EQ(ingest.exit_code, 0) << ingest.err;
    EXPECT_NE(ingest.out.find("grid 2 x 2, 4 tiles"), std::string::npos) << ingest.out;
    EXPECT_TRUE(fs::exists(dir / "dump" / "scene_1_1.png"));

    auto a = cli({"query", "Find Construction Sites", "--json"});
    auto b = cli({"query", "Find Construction Sites", "--json"});
    ASSERT_EQ(a.exit_code, 0) << a.err;
    EXPECT_EQ(a.out, b.out);
    auto j = json::parse(a.out);
    auto errors = opensat::testing::schema_violations(opensat::testing::load_schema("query_response.json"), j);
    EXPECT_TRUE(errors.empty()) << errors.front();
    EXPECT_FALSE(j.contains("elapsed_ms"));
    EXPECT_EQ(j["object_of_interest"], "construction site");
    EXPECT_EQ(j["per_tile"].size(), 4u);

    auto all = cli({"query", "river", "--method", "threshold", "--threshold", "-1", "--json"});
    ASSERT_EQ(all.exit_code, 0) << all.err;
    EXPECT_EQ(json::parse(all.out)["count"], 4);

    auto table = cli({"query", "river"});
    ASSERT_EQ(table.exit_code, 0) << table.err;
    EXPECT_NE(table.out.find("of 4 tiles"), std::string::npos) << table.out;

    auto again = cli({"ingest", (dir / "scene.png").string()});
    EXPECT_EQ(again.exit_code, 1);
}

TEST_F(CliTest, DryRunDoesNotTouchStore) {
    auto r = cli({"ingest", (dir / "scene.png").string(), "--dry-run", "--stride", "112"});
    ASSERT_EQ(r.exit_code, 0) << r.err;
    EXPECT_NE(r.out.find("grid 3 x 3, 9 tiles"), std::string::npos) << r.out;
    EXPECT_FALSE(fs::exists(dir / "store"));
}

TEST_F(CliTest, ExitCodes) {
    EXPECT_EQ(cli({"query", "river"}).exit_code, 4);  // no store yet
    ASSERT_EQ(cli({"ingest", (dir / "scene.png").string()}).exit_code, 0);
    EXPECT_EQ(cli({"query", "something unheard of"}).exit_code, 3);
    EXPECT_EQ(cli({"query", "river", "--threshold", "1.5", "--method", "threshold"}).exit_code, 2);
    EXPECT_EQ(cli({"query", "river", "--method", "fuzzy"}).exit_code, 2);
    EXPECT_EQ(cli({"ingest", (dir / "missing.png").string()}).exit_code, 2);
    EXPECT_EQ(cli({"bogus"}).exit_code, 2);
    { std::ofstream(dir / "bad.jsonl") << "{oops\n"; }
    EXPECT_EQ(cli({"eval", "--archive", (dir / "bad.jsonl").string()}).exit_code, 5);
    {
        std::ofstream out(dir / "unlabeled.jsonl");
        out << R"({"key":"a/0/0","vector":[1,0],"label":"x"})" << "\n" << R"({"key":"a/0/1","vector":[0,1]})" << "\n";
    }
    auto unlabeled = cli({"eval", "--archive", (dir / "unlabeled.jsonl").string()});
    EXPECT_EQ(unlabeled.exit_code, 5);
    EXPECT_NE(unlabeled.err.find("unlabeled.jsonl:2"), std::string::npos) << unlabeled.err;
}

TEST_F(CliTest, ImportAndEval) {
    opensat::testing::Rng rng(3);
    auto recs = opensat::testing::random_records(40, 64, rng, "arch");
    std::vector<EmbeddingRecord> out;
    const std::vector<std::string> classes{"river", "forest"};
    for (std::size_t i = 0; i < recs.size(); ++i) out.push_back({recs[i].id.key(), recs[i].embedding, classes[i % 2]});
    write_jsonl(dir / "arch.jsonl", out);

    auto imported = cli({"import", (dir / "arch.jsonl").string()});
    ASSERT_EQ(imported.exit_code, 0) << imported.err;
    EXPECT_NE(imported.out.find("imported 40 records"), std::string::npos) << imported.out;

    auto eval = cli({"eval", "--archive", (dir / "arch.jsonl").string(), "--method", "plain", "--out",
                     (dir / "report").string(), "--compare", "threshold"},
                    false);
    ASSERT_EQ(eval.exit_code, 0) << eval.err;
    EXPECT_NE(eval.out.find("recall improved in"), std::string::npos);
    auto metrics = json::parse(std::ifstream(dir / "report" / "metrics.json"));
    EXPECT_EQ(metrics["per_class"].size(), 2u);
    auto errors = opensat::testing::schema_violations(opensat::testing::load_schema("metrics.json"), metrics);
    EXPECT_TRUE(errors.empty()) << errors.front();

    auto unknown = cli({"eval", "--archive", (dir / "arch.jsonl").string(), "--classes", "moon"}, false);
    EXPECT_EQ(unknown.exit_code, 5);
}
