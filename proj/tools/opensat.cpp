// opensat: ingest imagery, query it, evaluate archives, import vectors, serve the REST API.
//
// Exit codes: 0 ok, 1 other failure, 2 configuration / unreadable input,
// 3 embedding or LLM provider failure, 4 empty store, 5 manifest errors.

#include <csignal>
#include <cstdio>
#include <iostream>
#include <thread>

#include <pthread.h>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "opensat/config.hpp"
#include "opensat/eval.hpp"
#include "opensat/ingest.hpp"
#include "opensat/interchange.hpp"
#include "opensat/retriever.hpp"
#include "opensat/service.hpp"

namespace fs = std::filesystem;
using namespace opensat;

namespace {

enum Exit : int {
    kOk = 0,
    kFailure = 1,
    kConfig = 2,
    kProvider = 3,
    kEmptyStore = 4,
    kManifest = 5,
};

int exit_code_for(ErrorCode code) {
    switch (code) {
        case ErrorCode::ConfigError:
        case ErrorCode::InvalidArgument:
        case ErrorCode::IoError:
        case ErrorCode::ImageDecodeError:
        case ErrorCode::UnsupportedFormat:
        case ErrorCode::EmptyImage:
        case ErrorCode::NotFound:
        case ErrorCode::StoreLocked: return kConfig;
        case ErrorCode::ProviderUnavailable:
        case ErrorCode::ContextParseError:
        case ErrorCode::DeficientContext:
        case ErrorCode::EmbeddingNotFound: return kProvider;
        case ErrorCode::EmptyStore: return kEmptyStore;
        case ErrorCode::ManifestParseError:
        case ErrorCode::UnknownClass: return kManifest;
        default: return kFailure;
    }
}

struct GlobalFlags {
    std::optional<std::string> config_file;
    std::optional<std::string> store;
    std::optional<std::string> embedder;
    std::optional<std::size_t> dim;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> manifest;
    std::optional<std::string> endpoint;
    std::optional<std::string> fixture;
    std::optional<std::string> log_level;
};

AppConfig resolve_config(const GlobalFlags& g) {
    AppConfig cfg = load_config(g.config_file ? std::optional<fs::path>(*g.config_file) : std::nullopt);
    if (g.store) cfg.store_path = *g.store;
    if (g.embedder) cfg.embedder.kind = parse_embedder_kind(*g.embedder);
    if (g.dim) cfg.embedder.dim = *g.dim;
    if (g.seed) cfg.embedder.seed = *g.seed;
    if (g.manifest) cfg.embedder.manifest = fs::path(*g.manifest);
    if (g.endpoint) cfg.embedder.endpoint = *g.endpoint;
    if (g.fixture) cfg.fixture = fs::path(*g.fixture);
    if (g.log_level) cfg.log_level = *g.log_level;
    cfg.embedder.validate();
    cfg.refinement.validate();

    auto level = spdlog::level::from_str(cfg.log_level);
    if (level == spdlog::level::off && cfg.log_level != "off") {
        throw Error(ErrorCode::ConfigError, "unknown log level '" + cfg.log_level + "'");
    }
    spdlog::set_level(level);
    return cfg;
}

std::string plural(std::size_t n, const char* word) {
    return std::to_string(n) + " " + word + (n == 1 ? "" : "s");
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        auto comma = s.find(',', start);
        if (comma == std::string::npos) comma = s.size();
        out.push_back(s.substr(start, comma - start));
        start = comma + 1;
    }
    return out;
}

Store open_existing_store(const fs::path& root) {
    if (!fs::exists(root / "manifest.json")) {
        throw Error(ErrorCode::EmptyStore, "no store at " + root.string() + "; ingest or import first");
    }
    return Store::open(root);
}

void print_result_table(const RetrievalResult& result, std::size_t total, std::size_t limit) {
    std::printf("query:   %s\n", result.query.c_str());
    std::printf("method:  %s\n", std::string(to_string(result.method)).c_str());
    std::printf("object:  %s\n", result.object_of_interest.c_str());
    if (result.context && !result.context->surroundings.empty()) {
        std::string joined;
        for (const auto& y : result.context->surroundings) joined += (joined.empty() ? "" : ", ") + y;
        std::printf("context: %s (%s)\n", joined.c_str(), std::string(to_string(result.context->source)).c_str());
    }
    std::printf("retrieved %zu of %s\n", result.count(), plural(total, "tile").c_str());
    if (result.retrieved.empty()) return;

    std::unordered_map<TileId, const TileDiagnostic*> diag;
    for (const auto& d : result.per_tile) diag.emplace(d.id, &d);
    std::printf("\n%-28s %-22s %-18s %9s %9s\n", "TILE", "RECT", "LABEL", "SIM", "MAX_SURR");
    std::size_t shown = 0;
    for (const auto& id : result.retrieved) {
        if (limit && shown == limit) {
            std::printf("... %zu more\n", result.retrieved.size() - shown);
            break;
        }
        const auto& d = *diag.at(id);
        char rect[64];
        std::snprintf(rect, sizeof rect, "%u,%u %ux%u", d.rect.x, d.rect.y, d.rect.width, d.rect.height);
        std::string surr = d.max_sim_to_surroundings ? std::to_string(d.max_sim_to_surroundings->value()) : "-";
        std::printf("%-28s %-22s %-18s %9.6f %9s\n", id.key().c_str(), rect,
                    d.winning_label.value_or("-").c_str(), d.sim_to_object.value(), surr.c_str());
        ++shown;
    }
}

// SIGINT/SIGTERM are blocked in every thread and consumed by one waiter.
class SignalWaiter {
public:
    SignalWaiter() {
        sigemptyset(&set_);
        sigaddset(&set_, SIGINT);
        sigaddset(&set_, SIGTERM);
        pthread_sigmask(SIG_BLOCK, &set_, nullptr);
    }
    void on_signal(std::function<void(int)> handler) {
        thread_ = std::thread([this, handler = std::move(handler)] {
            int sig = 0;
            sigwait(&set_, &sig);
            if (!done_) handler(sig);
        });
    }
    ~SignalWaiter() {
        done_ = true;
        if (thread_.joinable()) {
            pthread_kill(thread_.native_handle(), SIGTERM);
            thread_.join();
        }
    }

private:
    sigset_t set_{};
    std::atomic<bool> done_{false};
    std::thread thread_;
};

}  // namespace

int main(int argc, char** argv) {
    spdlog::set_default_logger(spdlog::stderr_color_mt("opensat"));
    spdlog::set_pattern("%^%l%$: %v");

    CLI::App app{"Open-vocabulary satellite tile retrieval"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_version_flag("--version", "opensat 0.1.0");

    GlobalFlags g;
    app.add_option("-c,--config", g.config_file, "TOML config file");
    app.add_option("-s,--store", g.store, "Store directory (store.path)");
    app.add_option("--embedder", g.embedder, "mock | file | remote (embed.kind)");
    app.add_option("--dim", g.dim, "Embedding dimension (embed.dim)");
    app.add_option("--seed", g.seed, "Mock embedder seed (embed.seed)");
    app.add_option("--embeddings", g.manifest, "Embedding manifest for the file embedder (embed.manifest)");
    app.add_option("--endpoint", g.endpoint, "Remote embedder URL (embed.endpoint)");
    app.add_option("--fixture", g.fixture, "Offline query-context fixture (llm.fixture)");
    app.add_option("--log-level", g.log_level, "trace | debug | info | warn | error | off");

    // ingest
    auto* ingest = app.add_subcommand("ingest", "Tile an image, embed the tiles and add them to the store");
    std::string image_path;
    std::optional<std::uint32_t> tile_size, stride;
    std::optional<std::string> dump_tiles, image_id;
    std::optional<std::size_t> parallelism;
    bool dry_run = false, no_tile_images = false;
    ingest->add_option("image", image_path, "PNG, JPEG or striped TIFF")->required();
    ingest->add_option("--tile-size", tile_size, "Tile edge in pixels (default 224)")->check(CLI::PositiveNumber);
    ingest->add_option("--stride", stride, "Window step in pixels (default = tile size)")->check(CLI::PositiveNumber);
    ingest->add_option("--dump-tiles", dump_tiles, "Also write each tile as {image_id}_{row}_{col}.png here");
    ingest->add_option("--image-id", image_id, "Identifier for the image (default: file stem)");
    ingest->add_option("--parallelism", parallelism, "Worker threads (ingest.parallelism)");
    ingest->add_flag("--dry-run", dry_run, "Only read the image header and print the grid");
    ingest->add_flag("--no-tile-images", no_tile_images, "Do not keep tile PNGs in the store");

    // query
    auto* query = app.add_subcommand("query", "Retrieve tiles for a free-form query");
    std::string query_text, method_name = "refined";
    std::optional<double> alpha, beta, threshold;
    std::optional<std::size_t> n;
    std::optional<std::string> normalize_stage, image_filter, object, surroundings;
    bool as_json = false;
    std::size_t limit = 50;
    query->add_option("text", query_text, "Query text")->required();
    query->add_option("-m,--method", method_name, "threshold | plain | refined")
        ->check(CLI::IsMember({"threshold", "plain", "refined", "opensat_plain", "opensat_refined"}));
    query->add_option("--alpha", alpha, "Weight of the object-with-surrounding term");
    query->add_option("--beta", beta, "Weight of the subtracted surrounding term");
    query->add_option("--n", n, "Number of surrounding objects");
    query->add_option("--threshold", threshold, "Similarity cutoff for --method threshold");
    query->add_option("--normalize-stage", normalize_stage, "per_term | post_composition | both");
    query->add_option("--image", image_filter, "Only search tiles of this image id");
    query->add_option("--object", object, "Use this object of interest instead of extracting it");
    query->add_option("--surroundings", surroundings, "Comma-separated surrounding objects (needs --object)");
    query->add_flag("--json", as_json, "Print the /query response JSON");
    query->add_option("--limit", limit, "Rows in the table output (0 = all)");

    // eval
    auto* eval = app.add_subcommand("eval", "Evaluate a labeled embedding archive");
    std::string archive_path, eval_method = "refined", averaging = "macro";
    std::optional<std::string> out_dir, compare, eval_classes;
    eval->add_option("--archive", archive_path, "Labeled JSONL or binary embedding manifest")->required();
    eval->add_option("-m,--method", eval_method, "threshold | plain | refined")
        ->check(CLI::IsMember({"threshold", "plain", "refined", "opensat_plain", "opensat_refined"}));
    eval->add_option("--alpha", alpha, "Weight of the object-with-surrounding term");
    eval->add_option("--beta", beta, "Weight of the subtracted surrounding term");
    eval->add_option("--n", n, "Number of surrounding objects");
    eval->add_option("--threshold", threshold, "Similarity cutoff for --method threshold");
    eval->add_option("--normalize-stage", normalize_stage, "per_term | post_composition | both");
    eval->add_option("--averaging", averaging, "macro | micro")->check(CLI::IsMember({"macro", "micro"}));
    eval->add_option("--out", out_dir, "Write metrics.json, metrics.csv and plot data here");
    eval->add_option("--classes", eval_classes, "Comma-separated classes to query (default: all labels)");
    eval->add_option("--compare", compare, "Also run this method and count per-class recall gains");

    // import
    auto* import = app.add_subcommand("import", "Add precomputed embeddings to the store");
    std::string import_path;
    import->add_option("manifest", import_path, "JSONL or binary embedding manifest")->required();

    // serve
    auto* serve = app.add_subcommand("serve", "Run the HTTP service");
    std::optional<int> port;
    std::optional<std::string> host, ui_dir;
    serve->add_option("-p,--port", port, "Listen port (service.port)");
    serve->add_option("--host", host, "Listen address (service.host)");
    serve->add_option("--serve-ui", ui_dir, "Serve built web console assets from this directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    try {
        AppConfig cfg = resolve_config(g);
        auto apply_refinement = [&](RefinementConfig& rc) {
            if (alpha) rc.alpha = *alpha;
            if (beta) rc.beta = *beta;
            if (n) rc.n = *n;
            if (normalize_stage) rc.normalize_stage = parse_normalize_stage(*normalize_stage);
            rc.validate();
        };

        if (ingest->parsed()) {
            IngestOptions opts;
            opts.tile_size = tile_size.value_or(cfg.tile_size);
            opts.stride = stride.value_or(cfg.stride);
            opts.parallelism = parallelism.value_or(cfg.ingest_parallelism);
            opts.batch_size = cfg.embedder.batch_size;
            opts.write_tiles = cfg.write_tiles && !no_tile_images;
            if (dump_tiles) opts.dump_tiles = fs::path(*dump_tiles);
            opts.image_id = image_id.value_or(default_image_id(image_path));
            if (!valid_image_id(opts.image_id)) {
                throw Error(ErrorCode::InvalidArgument, "image id may only use letters, digits, '.', '_' and '-'");
            }
            if (!fs::is_regular_file(image_path)) {
                throw Error(ErrorCode::IoError, "cannot read image " + image_path);
            }
            if (dry_run) {
                auto info = read_raster_info(image_path);
                auto grid = plan_grid(grid_spec_for(info.width, info.height, opts));
                std::printf("%s: %ux%u px, grid %u x %u, %s\n", opts.image_id.c_str(), info.width, info.height,
                            grid.cols, grid.rows, plural(grid.count(), "tile").c_str());
                return kOk;
            }
            auto embedder = make_embedder(cfg.embedder);
            Store store = Store::open_or_create(cfg.store_path, embedder->dim());
            auto report = ingest_file(image_path, store, *embedder, opts);
            std::printf("%s: %ux%u px, grid %u x %u, %s\n", report.image_id.c_str(), report.spec.image_width,
                        report.spec.image_height, report.cols, report.rows, plural(report.tiles, "tile").c_str());
            return kOk;
        }

        if (query->parsed()) {
            Store store = open_existing_store(cfg.store_path);
            if (store.size() == 0) throw Error(ErrorCode::EmptyStore, "store at " + cfg.store_path.string() + " is empty");
            std::shared_ptr<const Embedder> embedder = make_embedder(cfg.embedder);
            Retriever retriever(store, embedder, make_context_deriver(cfg));
            RetrievalRequest req;
            req.query = query_text;
            req.method = parse_retrieval_method(method_name);
            req.cfg = cfg.refinement;
            apply_refinement(req.cfg);
            req.threshold = threshold.value_or(cfg.threshold);
            req.image_filter = image_filter;
            req.object_override = object;
            if (surroundings) req.surroundings_override = split_list(*surroundings);
            auto result = retriever.retrieve(req);
            if (as_json) {
                std::cout << result_to_json(result, {.include_elapsed = false, .include_per_tile = true}).dump(2)
                          << "\n";
            } else {
                print_result_table(result, result.per_tile.size(), limit);
            }
            return kOk;
        }

        if (eval->parsed()) {
            auto archive = load_archive(archive_path);
            std::shared_ptr<const Embedder> embedder = make_embedder(cfg.embedder);
            auto contexts = make_context_deriver(cfg);
            EvalOptions opts;
            opts.method = parse_retrieval_method(eval_method);
            opts.cfg = cfg.refinement;
            apply_refinement(opts.cfg);
            opts.threshold = threshold.value_or(cfg.threshold);
            opts.averaging = parse_averaging(averaging);
            if (eval_classes) opts.query_classes = split_list(*eval_classes);
            auto report = evaluate_archive(archive, opts, embedder, contexts);
            if (out_dir) emit_report(report, *out_dir);
            std::printf("%s: %s over %s, %s\n", archive.name.c_str(), std::string(to_string(opts.method)).c_str(),
                        plural(report.query_classes.size(), "class").c_str(), plural(archive.records.size(), "tile").c_str());
            std::printf("%-24s %6s %6s %6s %9s %9s %9s\n", "CLASS", "TP", "FP", "FN", "PREC", "RECALL", "F1");
            for (const auto& m : report.per_class) {
                std::printf("%-24s %6zu %6zu %6zu %9.4f %9.4f %9.4f\n", m.class_name.c_str(), m.tp, m.fp, m.fn,
                            m.precision, m.recall, m.f1);
            }
            std::printf("%s P=%.3f R=%.3f F1=%.3f\n", averaging.c_str(), report.summary.precision,
                        report.summary.recall, report.summary.f1);
            if (compare) {
                EvalOptions other = opts;
                other.method = parse_retrieval_method(*compare);
                auto baseline = evaluate_archive(archive, other, embedder, contexts);
                auto tally = tally_recall_improvements(report.per_class, baseline.per_class);
                std::printf("%s %s P=%.3f R=%.3f F1=%.3f\n", std::string(to_string(other.method)).c_str(),
                            averaging.c_str(), baseline.summary.precision, baseline.summary.recall,
                            baseline.summary.f1);
                std::printf("recall improved in %zu of %zu classes\n", tally.improved, tally.total);
            }
            return kOk;
        }

        if (import->parsed()) {
            ImportStats stats;
            auto records = import_embeddings(import_path, &stats);
            if (records.empty()) {
                std::printf("imported 0 records\n");
                return kOk;
            }
            Store store = Store::open_or_create(cfg.store_path, stats.dim);
            std::vector<TileRecord> tiles;
            tiles.reserve(records.size());
            for (auto& r : records) {
                tiles.push_back(TileRecord{TileId::from_key(r.key), std::move(r.embedding), {}, std::move(r.label), {}});
            }
            store.insert_batch(std::move(tiles));
            std::printf("imported %s (dim %zu, %zu normalized)\n", plural(stats.records, "record").c_str(), stats.dim,
                        stats.normalization_fixes);
            return kOk;
        }

        if (serve->parsed()) {
            if (port) cfg.service.port = *port;
            if (host) cfg.service.host = *host;
            if (ui_dir) cfg.service.ui_dir = fs::path(*ui_dir);
            SignalWaiter signals;
            std::shared_ptr<const Embedder> embedder = make_embedder(cfg.embedder);
            Store store = Store::open_or_create(cfg.store_path, embedder->dim());
            Service service(store, embedder, make_context_deriver(cfg), ServiceOptions::from_config(cfg));
            int bound = service.bind(cfg.service.host, cfg.service.port);
            signals.on_signal([&service](int sig) {
                spdlog::info("received signal {}, draining", sig);
                service.stop();
            });
            spdlog::info("listening on http://{}:{} (store {}, {} records)", cfg.service.host, bound,
                         cfg.store_path.string(), store.size());
            std::fflush(stderr);
            service.listen();
            service.stop();
            return kOk;
        }
    } catch (const Error& e) {
        spdlog::error("{}: {}", to_string(e.code()), e.what());
        return exit_code_for(e.code());
    } catch (const std::filesystem::filesystem_error& e) {
        spdlog::error("IoError: {}", e.what());
        return kConfig;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return kFailure;
    }
    return kOk;
}
