#include "opensat/eval.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "opensat/interchange.hpp"

namespace opensat {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

void LabeledArchive::validate() const {
    if (classes.empty()) throw Error(ErrorCode::UnknownClass, "archive '" + name + "' has no classes");
    std::map<std::string, std::size_t> counts;
    for (const auto& c : classes) counts[c] = 0;
    for (const auto& r : records) {
        if (!r.label) throw Error(ErrorCode::ManifestParseError, "record " + r.id.key() + " has no label");
        auto it = counts.find(*r.label);
        if (it == counts.end()) throw Error(ErrorCode::UnknownClass, "label '" + *r.label + "' is not a class");
        ++it->second;
    }
    for (const auto& [c, count] : counts) {
        if (count == 0) throw Error(ErrorCode::UnknownClass, "class '" + c + "' has no records");
    }
}

std::set<TileId> LabeledArchive::labeled(const std::string& class_name) const {
    std::set<TileId> out;
    for (const auto& r : records) {
        if (r.label && *r.label == class_name) out.insert(r.id);
    }
    return out;
}

LabeledArchive make_archive(std::string name, std::vector<TileRecord> records) {
    LabeledArchive archive{std::move(name), {}, std::move(records)};
    std::set<std::string> classes;
    for (const auto& r : archive.records) {
        if (r.label) classes.insert(*r.label);
    }
    archive.classes.assign(classes.begin(), classes.end());
    archive.validate();
    return archive;
}

LabeledArchive load_archive(const fs::path& manifest, std::string name) {
    ImportOptions options;
    options.require_label = true;
    std::vector<TileRecord> records;
    import_embeddings(
        manifest,
        [&](EmbeddingRecord&& rec) {
            records.push_back(TileRecord{TileId::from_key(rec.key), std::move(rec.embedding), {}, rec.label, {}});
        },
        options);
    if (records.empty()) throw Error(ErrorCode::ManifestParseError, manifest.string() + ": archive is empty");
    return make_archive(name.empty() ? manifest.stem().string() : std::move(name), std::move(records));
}

ClassMetrics metrics_from_counts(std::string class_name, std::size_t tp, std::size_t fp, std::size_t fn) {
    ClassMetrics m{std::move(class_name), tp, fp, fn, 0.0, 0.0, 0.0};
    if (tp + fp > 0) m.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    if (tp + fn > 0) m.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    if (tp > 0) m.f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    return m;
}

ClassMetrics evaluate_sets(std::string class_name, const std::set<TileId>& labeled,
                           const std::set<TileId>& retrieved) {
    std::size_t tp = 0;
    for (const auto& id : retrieved) tp += labeled.contains(id) ? 1 : 0;
    return metrics_from_counts(std::move(class_name), tp, retrieved.size() - tp, labeled.size() - tp);
}

ClassMetrics evaluate_class(const LabeledArchive& archive, const std::string& class_name,
                            const RetrievalResult& result) {
    if (!std::binary_search(archive.classes.begin(), archive.classes.end(), class_name)) {
        throw Error(ErrorCode::UnknownClass, "class '" + class_name + "' is not in archive '" + archive.name + "'");
    }
    return evaluate_sets(class_name, archive.labeled(class_name),
                         std::set<TileId>(result.retrieved.begin(), result.retrieved.end()));
}

std::string_view to_string(Averaging averaging) noexcept {
    return averaging == Averaging::Micro ? "micro" : "macro";
}

Averaging parse_averaging(std::string_view name) {
    if (name == "macro") return Averaging::Macro;
    if (name == "micro") return Averaging::Micro;
    throw Error(ErrorCode::InvalidArgument, "unknown averaging mode '" + std::string(name) + "'");
}

Summary macro_average(const std::vector<ClassMetrics>& rows) {
    Summary s;
    if (rows.empty()) return s;
    for (const auto& r : rows) {
        s.precision += r.precision;
        s.recall += r.recall;
        s.f1 += r.f1;
    }
    auto n = static_cast<double>(rows.size());
    s.precision /= n;
    s.recall /= n;
    s.f1 /= n;
    return s;
}

Summary micro_average(const std::vector<ClassMetrics>& rows) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (const auto& r : rows) {
        tp += r.tp;
        fp += r.fp;
        fn += r.fn;
    }
    auto m = metrics_from_counts("", tp, fp, fn);
    return {m.precision, m.recall, m.f1};
}

EvaluationReport evaluate_archive(const LabeledArchive& archive, const EvalOptions& options,
                                  std::shared_ptr<const Embedder> embedder,
                                  std::shared_ptr<ContextDeriver> contexts) {
    archive.validate();
    options.cfg.validate();
    if (!embedder) throw Error(ErrorCode::InvalidArgument, "evaluation needs an embedder");
    const std::size_t dim = archive.records.front().embedding.dim();
    Store store = Store::in_memory(dim);
    store.insert_batch(archive.records);

    std::unordered_map<TileId, std::size_t> label_of;
    for (const auto& r : archive.records) {
        auto it = std::lower_bound(archive.classes.begin(), archive.classes.end(), *r.label);
        label_of.emplace(r.id, static_cast<std::size_t>(it - archive.classes.begin()));
    }

    Retriever retriever(store, embedder, std::move(contexts));
    EvaluationReport report;
    report.archive = archive.name;
    report.embedder = embedder->identity();
    report.options = options;
    report.classes = archive.classes;
    report.query_classes = options.query_classes.empty() ? archive.classes : options.query_classes;
    for (const auto& cls : report.query_classes) {
        if (!std::binary_search(archive.classes.begin(), archive.classes.end(), cls)) {
            throw Error(ErrorCode::UnknownClass, "class '" + cls + "' is not in archive '" + archive.name + "'");
        }
    }
    for (const auto& cls : report.query_classes) {
        RetrievalRequest request;
        request.query = base_prompt(cls);
        request.method = options.method;
        request.threshold = options.threshold;
        request.cfg = options.cfg;
        request.object_override = cls;
        auto result = retriever.retrieve(request);

        report.per_class.push_back(evaluate_class(archive, cls, result));
        std::vector<double> row(archive.classes.size(), 0.0);
        for (const auto& id : result.retrieved) row[label_of.at(id)] += 1.0;
        if (!result.retrieved.empty()) {
            for (double& v : row) v /= static_cast<double>(result.retrieved.size());
        }
        report.distribution.push_back(std::move(row));
        report.retrieved_counts.push_back(result.retrieved.size());
        report.contexts.push_back(std::move(result.context));
    }
    report.macro = macro_average(report.per_class);
    report.micro = micro_average(report.per_class);
    report.summary = options.averaging == Averaging::Macro ? report.macro : report.micro;
    return report;
}

RecallTally tally_recall_improvements(const std::vector<ClassMetrics>& candidate,
                                      const std::vector<ClassMetrics>& baseline) {
    std::map<std::string, double> base;
    for (const auto& m : baseline) base[m.class_name] = m.recall;
    RecallTally tally;
    for (const auto& m : candidate) {
        auto it = base.find(m.class_name);
        if (it == base.end()) continue;
        ++tally.total;
        if (m.recall > it->second) ++tally.improved;
    }
    return tally;
}

namespace {

ordered_json summary_json(const Summary& s) {
    return ordered_json{{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}};
}

Summary summary_from(const json& j) {
    return {j.at("precision").get<double>(), j.at("recall").get<double>(), j.at("f1").get<double>()};
}

std::string number(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
}

}  // namespace

json report_to_json(const EvaluationReport& report) {
    ordered_json o;
    o["schema_version"] = 1;
    o["archive"] = report.archive;
    o["embedder"] = report.embedder;
    o["method"] = std::string(to_string(report.options.method));
    o["averaging"] = std::string(to_string(report.options.averaging));
    o["params"] = ordered_json{{"alpha", report.options.cfg.alpha},
                               {"beta", report.options.cfg.beta},
                               {"n", report.options.cfg.n},
                               {"normalize_stage", std::string(to_string(report.options.cfg.normalize_stage))},
                               {"threshold", report.options.threshold}};
    o["classes"] = report.classes;
    o["query_classes"] = report.query_classes;
    o["summary"] = summary_json(report.summary);
    o["macro"] = summary_json(report.macro);
    o["micro"] = summary_json(report.micro);
    ordered_json rows = ordered_json::array();
    for (std::size_t i = 0; i < report.per_class.size(); ++i) {
        const auto& m = report.per_class[i];
        ordered_json row{{"class", m.class_name}, {"tp", m.tp},         {"fp", m.fp},   {"fn", m.fn},
                         {"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}};
        row["retrieved"] = i < report.retrieved_counts.size() ? report.retrieved_counts[i] : m.tp + m.fp;
        row["distribution"] = i < report.distribution.size() ? ordered_json(report.distribution[i])
                                                              : ordered_json::array();
        if (i < report.contexts.size() && report.contexts[i]) {
            row["surroundings"] = report.contexts[i]->surroundings;
        } else {
            row["surroundings"] = nullptr;
        }
        rows.push_back(std::move(row));
    }
    o["per_class"] = std::move(rows);
    return json::parse(o.dump());
}

EvaluationReport report_from_json(const json& j) {
    EvaluationReport r;
    r.archive = j.at("archive").get<std::string>();
    r.embedder = j.at("embedder").get<std::string>();
    r.options.method = parse_retrieval_method(j.at("method").get<std::string>());
    r.options.averaging = parse_averaging(j.at("averaging").get<std::string>());
    const auto& p = j.at("params");
    r.options.cfg.alpha = p.at("alpha").get<double>();
    r.options.cfg.beta = p.at("beta").get<double>();
    r.options.cfg.n = p.at("n").get<std::size_t>();
    r.options.cfg.normalize_stage = parse_normalize_stage(p.at("normalize_stage").get<std::string>());
    r.options.threshold = p.at("threshold").get<double>();
    r.classes = j.at("classes").get<std::vector<std::string>>();
    r.query_classes = j.at("query_classes").get<std::vector<std::string>>();
    r.options.query_classes = r.query_classes;
    r.summary = summary_from(j.at("summary"));
    r.macro = summary_from(j.at("macro"));
    r.micro = summary_from(j.at("micro"));
    for (const auto& row : j.at("per_class")) {
        ClassMetrics m{row.at("class").get<std::string>(), row.at("tp").get<std::size_t>(),
                       row.at("fp").get<std::size_t>(), row.at("fn").get<std::size_t>(),
                       row.at("precision").get<double>(), row.at("recall").get<double>(),
                       row.at("f1").get<double>()};
        r.per_class.push_back(std::move(m));
        r.retrieved_counts.push_back(row.at("retrieved").get<std::size_t>());
        r.distribution.push_back(row.at("distribution").get<std::vector<double>>());
        if (row.at("surroundings").is_null()) {
            r.contexts.emplace_back();
        } else {
            QueryContext ctx;
            ctx.object_of_interest = r.per_class.back().class_name;
            ctx.surroundings = row.at("surroundings").get<std::vector<std::string>>();
            r.contexts.emplace_back(std::move(ctx));
        }
    }
    return r;
}

std::string csv_field(std::string_view value) {
    bool quote = value.find_first_of(",\"\r\n") != std::string_view::npos;
    if (!quote) return std::string(value);
    std::string out = "\"";
    for (char c : value) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

void emit_report(const EvaluationReport& report, const fs::path& out_dir) {
    if (report.classes.empty() || report.per_class.empty()) {
        throw Error(ErrorCode::UnknownClass, "report has no classes");
    }
    if (report.per_class.size() != report.query_classes.size()) {
        throw Error(ErrorCode::InvalidArgument, "report rows do not match its class list");
    }
    // Render everything before touching the filesystem so a failure leaves no partial output.
    std::string metrics_json = report_to_json(report).dump(2) + "\n";

    std::string metrics_csv = "class,tp,fp,fn,precision,recall,f1\n";
    std::string recall_csv = "class,recall\n";
    for (const auto& m : report.per_class) {
        metrics_csv += csv_field(m.class_name) + "," + std::to_string(m.tp) + "," + std::to_string(m.fp) + "," +
                       std::to_string(m.fn) + "," + number(m.precision) + "," + number(m.recall) + "," +
                       number(m.f1) + "\n";
        recall_csv += csv_field(m.class_name) + "," + number(m.recall) + "\n";
    }

    std::string distribution_csv = "query_class";
    for (const auto& c : report.classes) distribution_csv += "," + csv_field(c);
    distribution_csv += "\n";
    for (std::size_t q = 0; q < report.distribution.size(); ++q) {
        distribution_csv += csv_field(report.query_classes[q]);
        for (double v : report.distribution[q]) distribution_csv += "," + number(v);
        distribution_csv += "\n";
    }

    fs::create_directories(out_dir);
    write_file(out_dir / "metrics.json", metrics_json);
    write_file(out_dir / "metrics.csv", metrics_csv);
    write_file(out_dir / "per_class_recall.csv", recall_csv);
    write_file(out_dir / "distribution.csv", distribution_csv);
}

}  // namespace opensat
