#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "opensat/retriever.hpp"
#include "opensat/store.hpp"

namespace opensat {

struct LabeledArchive {
    std::string name;
    std::vector<std::string> classes;  // sorted
    std::vector<TileRecord> records;

    // Every label is a class and every class has a record.
    void validate() const;
    [[nodiscard]] std::set<TileId> labeled(const std::string& class_name) const;
};

// Reads a JSONL/binary embedding manifest whose records all carry labels.
LabeledArchive load_archive(const std::filesystem::path& manifest, std::string name = {});
LabeledArchive make_archive(std::string name, std::vector<TileRecord> records);

struct ClassMetrics {
    std::string class_name;
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;

    bool operator==(const ClassMetrics&) const = default;
};

ClassMetrics metrics_from_counts(std::string class_name, std::size_t tp, std::size_t fp, std::size_t fn);
ClassMetrics evaluate_sets(std::string class_name, const std::set<TileId>& labeled, const std::set<TileId>& retrieved);
ClassMetrics evaluate_class(const LabeledArchive& archive, const std::string& class_name,
                            const RetrievalResult& result);

enum class Averaging { Macro, Micro };

std::string_view to_string(Averaging averaging) noexcept;
Averaging parse_averaging(std::string_view name);

struct Summary {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

Summary macro_average(const std::vector<ClassMetrics>& rows);
Summary micro_average(const std::vector<ClassMetrics>& rows);

struct EvalOptions {
    RetrievalMethod method = RetrievalMethod::OpenSatRefined;
    RefinementConfig cfg;
    double threshold = kDefaultThreshold;
    Averaging averaging = Averaging::Macro;
    // Classes to query; empty means all. Other labels still count as false positives.
    std::vector<std::string> query_classes;
};

struct EvaluationReport {
    std::string archive;
    std::string embedder;
    EvalOptions options;
    std::vector<std::string> classes;        // every archive label, distribution columns
    std::vector<std::string> query_classes;  // rows of per_class and distribution
    std::vector<ClassMetrics> per_class;
    Summary summary;  // per options.averaging
    Summary macro;
    Summary micro;
    // distribution[q][c]: fraction of tiles retrieved for query class q whose true label is c.
    std::vector<std::vector<double>> distribution;
    std::vector<std::size_t> retrieved_counts;
    std::vector<std::optional<QueryContext>> contexts;
};

// One retrieval per class with query "a satellite photo of a {class}".
EvaluationReport evaluate_archive(const LabeledArchive& archive, const EvalOptions& options,
                                  std::shared_ptr<const Embedder> embedder,
                                  std::shared_ptr<ContextDeriver> contexts = {});

struct RecallTally {
    std::size_t improved = 0;
    std::size_t total = 0;
};

// Classes where `candidate` has strictly higher recall than `baseline`.
RecallTally tally_recall_improvements(const std::vector<ClassMetrics>& candidate,
                                      const std::vector<ClassMetrics>& baseline);

nlohmann::json report_to_json(const EvaluationReport& report);
EvaluationReport report_from_json(const nlohmann::json& j);

// metrics.json, metrics.csv, per_class_recall.csv, distribution.csv
void emit_report(const EvaluationReport& report, const std::filesystem::path& out_dir);

std::string csv_field(std::string_view value);

}  // namespace opensat
