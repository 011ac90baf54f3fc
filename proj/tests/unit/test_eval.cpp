#include <gtest/gtest.h>

#include <fstream>

#include <nlohmann/json.hpp>

#include "opensat/eval.hpp"
#include "opensat/interchange.hpp"
#include "support/schema.hpp"
#include "support/synthetic.hpp"

using namespace opensat;
using opensat::testing::Rng;
namespace fs = std::filesystem;

namespace {

std::set<TileId> ids(std::initializer_list<int> cols) {
    std::set<TileId> out;
    for (int c : cols) out.insert(TileId{"x", 0, static_cast<std::uint32_t>(c)});
    return out;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

// Six classes; each tile is exactly the embedding of its class prompt, and every
// class lists the other five as its surroundings.
struct Separable {
    std::shared_ptr<MockEmbedder> embedder = std::make_shared<MockEmbedder>(64);
    LabeledArchive archive;
    std::shared_ptr<ContextDeriver> contexts;

    Separable() {
        std::vector<std::string> classes{"beach", "crop", "dock", "farm", "lake", "port"};
        std::vector<TileRecord> recs;
        std::map<std::string, std::pair<std::string, std::vector<std::string>>> entries;
        for (std::size_t c = 0; c < classes.size(); ++c) {
            auto e = embedder->embed_text(base_prompt(classes[c]));
            for (std::uint32_t i = 0; i < 3 + c; ++i) {
                recs.push_back({TileId{"sep", static_cast<std::uint32_t>(c), i}, e, {}, classes[c], {}});
            }
            std::vector<std::string> others;
            for (const auto& o : classes) {
                if (o != classes[c]) others.push_back(o);
            }
            entries[classes[c]] = {classes[c], others};
        }
        archive = make_archive("separable", std::move(recs));
        contexts = std::make_shared<ContextDeriver>(std::make_shared<ContextFixture>(entries));
    }
};

}  // namespace

TEST(Metrics, WorkedExample) {
    auto m = metrics_from_counts("c", 2, 1, 2);
    EXPECT_DOUBLE_EQ(m.precision, 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(m.recall, 0.5);
    EXPECT_EQ(m.f1, 4.0 / 7.0);

    auto s = evaluate_sets("c", ids({0, 1, 2, 3}), ids({0, 1, 9}));
    EXPECT_EQ(s, m);
}

TEST(Metrics, EmptyRetrievalIsZero) {
    auto m = evaluate_sets("c", ids({0, 1}), {});
    EXPECT_EQ(m.tp, 0u);
    EXPECT_EQ(m.fn, 2u);
    EXPECT_EQ(m.precision, 0.0);
    EXPECT_EQ(m.recall, 0.0);
    EXPECT_EQ(m.f1, 0.0);
    EXPECT_EQ(metrics_from_counts("c", 0, 0, 0).f1, 0.0);
}

TEST(Metrics, MacroOverTwoClasses) {
    std::vector<ClassMetrics> rows{metrics_from_counts("A", 1, 0, 0), metrics_from_counts("B", 0, 1, 1)};
    auto macro = macro_average(rows);
    EXPECT_DOUBLE_EQ(macro.precision, 0.5);
    EXPECT_DOUBLE_EQ(macro.recall, 0.5);
    EXPECT_DOUBLE_EQ(macro.f1, 0.5);
    auto micro = micro_average(rows);
    EXPECT_DOUBLE_EQ(micro.precision, 0.5);
    EXPECT_DOUBLE_EQ(micro.recall, 0.5);
}

TEST(Metrics, RandomSetsMatchCountingOracle) {
    Rng rng(21);
    std::bernoulli_distribution coin(0.3);
    for (int trial = 0; trial < 500; ++trial) {
        std::set<TileId> labeled, retrieved;
        std::size_t tp = 0, fp = 0, fn = 0;
        for (std::uint32_t i = 0; i < 60; ++i) {
            bool l = coin(rng), r = coin(rng);
            TileId id{"x", 0, i};
            if (l) labeled.insert(id);
            if (r) retrieved.insert(id);
            tp += l && r;
            fp += !l && r;
            fn += l && !r;
        }
        auto m = evaluate_sets("c", labeled, retrieved);
        ASSERT_EQ(m.tp, tp);
        ASSERT_EQ(m.fp, fp);
        ASSERT_EQ(m.fn, fn);
        double p = tp + fp ? double(tp) / double(tp + fp) : 0.0;
        double r = tp + fn ? double(tp) / double(tp + fn) : 0.0;
        double f = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
        ASSERT_NEAR(m.precision, p, 1e-12);
        ASSERT_NEAR(m.recall, r, 1e-12);
        ASSERT_NEAR(m.f1, f, 1e-12);
        ASSERT_EQ(m.tp + m.fn, labeled.size());
    }
}

TEST(Archive, UnknownClassQuery) {
    Separable s;
    RetrievalResult r;
    EXPECT_THROW((void)evaluate_class(s.archive, "moon", r), Error);
    EvalOptions opts;
    opts.query_classes = {"moon"};
    try {
        (void)evaluate_archive(s.archive, opts, s.embedder, s.contexts);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::UnknownClass);
    }
}

TEST(Archive, SeparableScoresPerfectly) {
    Separable s;
    for (auto method : {RetrievalMethod::OpenSatPlain, RetrievalMethod::OpenSatRefined, RetrievalMethod::Threshold}) {
        EvalOptions opts;
        opts.method = method;
        opts.threshold = 0.9;
        auto report = evaluate_archive(s.archive, opts, s.embedder, s.contexts);
        ASSERT_EQ(report.per_class.size(), 6u);
        if (method == RetrievalMethod::OpenSatRefined) {
            // The refined object vector drifts off the class prompt but stays closest to it here.
            for (const auto& m : report.per_class) EXPECT_EQ(m.recall, 1.0) << m.class_name;
            continue;
        }
        EXPECT_EQ(report.summary.f1, 1.0) << to_string(method);
        EXPECT_EQ(report.micro.f1, 1.0);
        for (std::size_t q = 0; q < 6; ++q) EXPECT_EQ(report.distribution[q][q], 1.0);
    }
}

TEST(Archive, ReportInvariants) {
    Rng rng(22);
    std::vector<TileRecord> recs = opensat::testing::random_records(120, 16, rng);
    const std::vector<std::string> classes{"beach", "crop", "dock", "farm", "lake", "port"};
    for (std::size_t i = 0; i < recs.size(); ++i) recs[i].label = classes[i % classes.size()];
    auto archive = make_archive("random", recs);
    std::map<std::string, std::pair<std::string, std::vector<std::string>>> entries;
    for (const auto& c : classes) {
        std::vector<std::string> others;
        for (const auto& o : classes) {
            if (o != c) others.push_back(o);
        }
        entries[c] = {c, others};
    }
    auto contexts = std::make_shared<ContextDeriver>(std::make_shared<ContextFixture>(entries));
    EvalOptions opts;
    opts.method = RetrievalMethod::OpenSatPlain;
    auto report = evaluate_archive(archive, opts, std::make_shared<MockEmbedder>(16), contexts);

    double f1 = 0;
    for (std::size_t q = 0; q < report.per_class.size(); ++q) {
        const auto& m = report.per_class[q];
        EXPECT_EQ(m.tp + m.fn, archive.labeled(m.class_name).size());
        EXPECT_EQ(m.tp + m.fp, report.retrieved_counts[q]);
        double sum = 0;
        for (double v : report.distribution[q]) sum += v;
        if (report.retrieved_counts[q] > 0) EXPECT_NEAR(sum, 1.0, 1e-12);
        else EXPECT_EQ(sum, 0.0);
        f1 += m.f1;
    }
    EXPECT_NEAR(report.macro.f1, f1 / 6.0, 1e-15);
    EXPECT_EQ(report.summary.f1, report.macro.f1);

    auto j = report_to_json(report);
    auto errors = opensat::testing::schema_violations(opensat::testing::load_schema("metrics.json"), j);
    EXPECT_TRUE(errors.empty()) << errors.front();
}

TEST(Archive, TallyCountsStrictImprovements) {
    std::vector<ClassMetrics> base{metrics_from_counts("a", 1, 0, 1), metrics_from_counts("b", 1, 0, 1),
                                   metrics_from_counts("c", 2, 0, 0)};
    std::vector<ClassMetrics> cand{metrics_from_counts("a", 2, 0, 0), metrics_from_counts("b", 1, 5, 1),
                                   metrics_from_counts("c", 2, 0, 0), metrics_from_counts("z", 9, 0, 0)};
    auto t = tally_recall_improvements(cand, base);
    EXPECT_EQ(t.improved, 1u);
    EXPECT_EQ(t.total, 3u);
}

TEST(Report, EmptyReportWritesNothing) {
    auto dir = opensat::testing::fresh_temp_dir("report-empty");
    EvaluationReport empty;
    try {
        emit_report(empty, dir / "out");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::UnknownClass);
    }
    EXPECT_FALSE(fs::exists(dir / "out"));
    fs::remove_all(dir);
}

TEST(Report, RoundTripAndStableBytes) {
    Separable s;
    EvalOptions opts;
    opts.method = RetrievalMethod::OpenSatPlain;
    auto report = evaluate_archive(s.archive, opts, s.embedder, s.contexts);
    auto j = report_to_json(report);
    EXPECT_EQ(report_to_json(report_from_json(j)), j);

    auto dir = opensat::testing::fresh_temp_dir("report");
    emit_report(report, dir / "a");
    emit_report(report_from_json(j), dir / "b");
    for (const char* f : {"metrics.json", "metrics.csv", "per_class_recall.csv", "distribution.csv"}) {
        EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
    }
    auto csv = slurp(dir / "a" / "metrics.csv");
    EXPECT_EQ(csv.rfind("class,tp,fp,fn,precision,recall,f1\n", 0), 0u);
    EXPECT_NE(csv.find("beach,3,0,0,1,1,1\n"), std::string::npos);
    fs::remove_all(dir);
}

TEST(Report, OneRowPerClass) {
    EvaluationReport r;
    for (int i = 0; i < 21; ++i) {
        std::string c = "class" + std::to_string(i);
        r.classes.push_back(c);
        r.query_classes.push_back(c);
        r.per_class.push_back(metrics_from_counts(c, 1, 1, 1));
        r.distribution.push_back(std::vector<double>(21, 0.0));
        r.retrieved_counts.push_back(2);
        r.contexts.emplace_back();
    }
    auto dir = opensat::testing::fresh_temp_dir("report21");
    emit_report(r, dir);
    for (const char* f : {"metrics.csv", "per_class_recall.csv", "distribution.csv"}) {
        auto text = slurp(dir / f);
        EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 22) << f;
    }
    fs::remove_all(dir);
}

TEST(Report, CsvQuoting) {
    EXPECT_EQ(csv_field("plain"), "plain");
    EXPECT_EQ(csv_field("a,b"), "\"a,b\"");
    EXPECT_EQ(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
}

TEST(LoadArchive, RequiresLabels) {
    auto dir = opensat::testing::fresh_temp_dir("archive");
    {
        std::ofstream out(dir / "a.jsonl");
        out << R"({"key":"a/0/0","vector":[1,0],"label":"x"})" << "\n";
        out << R"({"key":"a/0/1","vector":[0,1]})" << "\n";
    }
    try {
        (void)load_archive(dir / "a.jsonl");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ManifestParseError);
    }
    {
        std::ofstream out(dir / "b.jsonl");
        out << R"({"key":"b/0/0","vector":[1,0],"label":"x"})" << "\n";
        out << R"({"key":"b/0/1","vector":[0,1],"label":"y"})" << "\n";
    }
    auto archive = load_archive(dir / "b.jsonl");
    EXPECT_EQ(archive.name, "b");
    EXPECT_EQ(archive.classes, (std::vector<std::string>{"x", "y"}));
    EXPECT_EQ(archive.labeled("y"), (std::set<TileId>{TileId{"b", 0, 1}}));
    fs::remove_all(dir);
}
