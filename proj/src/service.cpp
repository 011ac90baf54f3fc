#include "opensat/service.hpp"

#include <atomic>
#include <fstream>
#include <map>
#include <mutex>
#include <regex>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "opensat/ingest.hpp"
#include "opensat/raster.hpp"
#include "opensat/retriever.hpp"

namespace opensat {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(JobState state) noexcept {
    switch (state) {
        case JobState::Pending: return "pending";
        case JobState::Tiling: return "tiling";
        case JobState::Embedding: return "embedding";
        case JobState::Indexing: return "indexing";
        case JobState::Done: return "done";
        case JobState::Failed: return "failed";
    }
    return "pending";
}

json job_to_json(const IngestJob& job) {
    return json{{"job_id", job.job_id},
                {"image_id", job.image_id},
                {"state", std::string(to_string(job.state))},
                {"tiles_total", job.tiles_total},
                {"tiles_done", job.tiles_done},
                {"error", job.error ? json(*job.error) : json(nullptr)},
                {"error_code", job.error_code ? json(*job.error_code) : json(nullptr)}};
}

int http_status_for(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::InvalidArgument:
        case ErrorCode::DimensionMismatch:
        case ErrorCode::DegenerateVector:
        case ErrorCode::DeficientContext:
        case ErrorCode::UnknownClass:
        case ErrorCode::ConfigError:
        case ErrorCode::EmbeddingNotFound:
        case ErrorCode::EmptyImage:
        case ErrorCode::ImageDecodeError:
        case ErrorCode::RectOutOfBounds:
        case ErrorCode::ManifestParseError: return 422;
        case ErrorCode::UnsupportedFormat: return 415;
        case ErrorCode::NotFound: return 404;
        case ErrorCode::EmptyStore:
        case ErrorCode::Conflict:
        case ErrorCode::DuplicateTile: return 409;
        case ErrorCode::ContextParseError: return 502;
        case ErrorCode::ProviderUnavailable:
        case ErrorCode::StoreLocked: return 503;
        case ErrorCode::IoError: return 500;
    }
    return 500;
}

ServiceOptions ServiceOptions::from_config(const AppConfig& config) {
    ServiceOptions o;
    o.settings = config.service;
    o.tile_size = config.tile_size;
    o.stride = config.stride;
    o.ingest_parallelism = config.ingest_parallelism;
    o.write_tiles = config.write_tiles;
    o.refinement = config.refinement;
    o.threshold = config.threshold;
    return o;
}

namespace {

std::string status_name(int status) {
    switch (status) {
        case 404: return "NotFound";
        case 405: return "MethodNotAllowed";
        case 413: return "PayloadTooLarge";
        case 415: return "UnsupportedFormat";
        case 422: return "InvalidArgument";
        default: return status >= 500 ? "InternalError" : "BadRequest";
    }
}

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
    send_json(res, status, json{{"code", code}, {"message", message}});
}

void send_error(httplib::Response& res, const Error& e) {
    send_error(res, http_status_for(e.code()), std::string(to_string(e.code())), e.what());
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct UploadedImage {
    std::string image_id;
    fs::path path;
    RasterInfo info;
    std::uint64_t bytes = 0;
};

std::string extension_for(ImageFormat f) {
    switch (f) {
        case ImageFormat::Png: return ".png";
        case ImageFormat::Jpeg: return ".jpg";
        case ImageFormat::Tiff: return ".tif";
        case ImageFormat::Unknown: break;
    }
    return ".bin";
}

// Optional JSON number field; rejects wrong types.
std::optional<double> number_field(const json& body, const char* key) {
    if (!body.contains(key) || body[key].is_null()) return std::nullopt;
    if (!body[key].is_number()) throw Error(ErrorCode::InvalidArgument, std::string(key) + " must be a number");
    return body[key].get<double>();
}

}  // namespace

struct Service::Impl {
    Store& store;
    std::shared_ptr<const Embedder> embedder;
    std::shared_ptr<ContextDeriver> contexts;
    ServiceOptions options;
    Retriever retriever;
    httplib::Server server;
    std::thread listener;
    std::atomic<bool> bound{false};

    std::mutex mutex;  // guards everything below
    std::map<std::string, UploadedImage> uploads;
    std::map<std::string, IngestJob> jobs;
    std::map<std::string, std::string> active_job_for_image;
    std::vector<std::thread> workers;
    std::uint64_t next_image = 1;
    std::uint64_t next_job = 1;
    std::mutex overview_mutex;

    Impl(Store& s, std::shared_ptr<const Embedder> e, std::shared_ptr<ContextDeriver> c, ServiceOptions o)
        : store(s), embedder(std::move(e)), contexts(std::move(c)), options(std::move(o)),
          retriever(store, embedder, contexts) {
        if (!store.persistent()) throw Error(ErrorCode::InvalidArgument, "service needs a persistent store");
        discover_uploads();
        install_routes();
    }

    fs::path images_dir() const { return store.root() / "images"; }

    void discover_uploads() {
        fs::create_directories(images_dir());
        static const std::regex name(R"(img-(\d{6,})\.(png|jpg|tif))");
        for (const auto& entry : fs::directory_iterator(images_dir())) {
            std::smatch m;
            std::string file = entry.path().filename().string();
            if (!entry.is_regular_file() || !std::regex_match(file, m, name)) continue;
            std::uint64_t n = std::stoull(m[1].str());
            next_image = std::max(next_image, n + 1);
            try {
                UploadedImage img{entry.path().stem().string(), entry.path(), read_raster_info(entry.path()),
                                  static_cast<std::uint64_t>(entry.file_size())};
                uploads.emplace(img.image_id, std::move(img));
            } catch (const Error& e) {
                spdlog::warn("ignoring unreadable upload {}: {}", file, e.what());
            }
        }
    }

    json image_json(const std::string& id, const UploadedImage* upload, const std::optional<ImageEntry>& entry,
                    const std::optional<std::string>& job) const {
        json j{{"image_id", id}, {"indexed", entry.has_value()}};
        if (upload) {
            j["width"] = upload->info.width;
            j["height"] = upload->info.height;
            j["format"] = std::string(to_string(upload->info.format));
            j["bytes"] = upload->bytes;
        } else if (entry) {
            j["width"] = entry->grid.image_width;
            j["height"] = entry->grid.image_height;
        }
        if (entry) {
            auto grid = plan_grid(entry->grid);
            j["tile_size"] = entry->grid.tile_size;
            j["stride"] = entry->grid.stride;
            j["rows"] = grid.rows;
            j["cols"] = grid.cols;
            j["tile_count"] = entry->tile_count;
        }
        j["job_id"] = job ? json(*job) : json(nullptr);
        j["overview_url"] = "/images/" + id + "/overview.png";
        return j;
    }

    void install_routes() {
        server.new_task_queue = [threads = options.settings.threads] {
            return new httplib::ThreadPool(std::max<std::size_t>(2, threads));
        };
        server.set_payload_max_length(static_cast<std::size_t>(options.settings.max_upload_bytes));

        server.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
            res.set_header("Access-Control-Allow-Origin", options.settings.cors_origin);
            res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
            res.set_header("Access-Control-Allow-Headers", "Content-Type");
            if (req.method == "OPTIONS") {
                res.status = 204;
                return httplib::Server::HandlerResponse::Handled;
            }
            return httplib::Server::HandlerResponse::Unhandled;
        });
        server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
            if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
            std::string message = res.status == 413 ? "upload exceeds service.max_upload_bytes"
                                                    : httplib::status_message(res.status);
            send_error(res, res.status, status_name(res.status), message);
            return httplib::Server::HandlerResponse::Handled;
        });
        server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
            try {
                std::rethrow_exception(ep);
            } catch (const Error& e) {
                send_error(res, e);
            } catch (const json::exception& e) {
                send_error(res, 422, "InvalidArgument", std::string("malformed JSON: ") + e.what());
            } catch (const std::exception& e) {
                spdlog::error("unhandled error: {}", e.what());
                send_error(res, 500, "InternalError", "internal error");
            } catch (...) {
                send_error(res, 500, "InternalError", "internal error");
            }
        });

        if (options.settings.ui_dir) {
            if (!server.set_mount_point("/", options.settings.ui_dir->string())) {
                throw Error(ErrorCode::ConfigError, "cannot serve UI from " + options.settings.ui_dir->string());
            }
        }

        server.Get("/healthz", [this](const httplib::Request&, httplib::Response& res) {
            auto m = store.manifest();
            send_json(res, 200,
                      json{{"status", "ok"},
                           {"records", m.record_count},
                           {"dim", m.dim},
                           {"images", m.images.size()},
                           {"embedder", embedder->identity()},
                           {"context_provider", contexts ? json(contexts->identity()) : json(nullptr)}});
        });

        server.Get("/images", [this](const httplib::Request&, httplib::Response& res) {
            auto manifest = store.manifest();
            std::map<std::string, std::optional<ImageEntry>> ids;
            std::lock_guard lock(mutex);
            for (const auto& [id, _] : uploads) ids[id];
            for (const auto& e : manifest.images) ids[e.image_id] = e;
            json list = json::array();
            for (const auto& [id, entry] : ids) {
                auto up = uploads.find(id);
                auto job = active_job_for_image.find(id);
                list.push_back(image_json(id, up == uploads.end() ? nullptr : &up->second, entry,
                                          job == active_job_for_image.end() ? std::nullopt
                                                                            : std::optional(job->second)));
            }
            send_json(res, 200, json{{"images", list}});
        });

        server.Post("/images", [this](const httplib::Request& req, httplib::Response& res,
                                      const httplib::ContentReader& reader) { handle_upload(req, res, reader); });

        server.Get(R"(/images/([A-Za-z0-9._-]+))", [this](const httplib::Request& req, httplib::Response& res) {
            std::string id = req.matches[1];
            auto entry = store.image(id);
            std::lock_guard lock(mutex);
            auto up = uploads.find(id);
            if (up == uploads.end() && !entry) return send_error(res, 404, "NotFound", "unknown image '" + id + "'");
            auto job = active_job_for_image.find(id);
            send_json(res, 200,
                      image_json(id, up == uploads.end() ? nullptr : &up->second, entry,
                                 job == active_job_for_image.end() ? std::nullopt : std::optional(job->second)));
        });

        server.Get(R"(/images/([A-Za-z0-9._-]+)/overview\.png)",
                   [this](const httplib::Request& req, httplib::Response& res) { handle_overview(req, res); });

        server.Post(R"(/images/([A-Za-z0-9._-]+)/index)",
                    [this](const httplib::Request& req, httplib::Response& res) { handle_index(req, res); });

        server.Get(R"(/jobs/([A-Za-z0-9._-]+))", [this](const httplib::Request& req, httplib::Response& res) {
            std::lock_guard lock(mutex);
            auto it = jobs.find(req.matches[1]);
            if (it == jobs.end()) {
                return send_error(res, 404, "NotFound", "unknown job '" + std::string(req.matches[1]) + "'");
            }
            send_json(res, 200, job_to_json(it->second));
        });

        server.Post("/query", [this](const httplib::Request& req, httplib::Response& res) { handle_query(req, res); });

        server.Get(R"(/tiles/([A-Za-z0-9._-]+)/(\d+)/(\d+)\.png)",
                   [this](const httplib::Request& req, httplib::Response& res) {
                       TileId id{req.matches[1], 0, 0};
                       try {
                           id.row = static_cast<std::uint32_t>(std::stoul(req.matches[2]));
                           id.col = static_cast<std::uint32_t>(std::stoul(req.matches[3]));
                       } catch (const std::exception&) {
                           return send_error(res, 404, "NotFound", "no such tile");
                       }
                       auto record = store.get(id);
                       if (!record || !record->tile_path) {
                           return send_error(res, 404, "NotFound", "no stored tile " + id.key());
                       }
                       fs::path path = store.root() / *record->tile_path;
                       if (!fs::is_regular_file(path)) {
                           return send_error(res, 404, "NotFound", "tile image missing for " + id.key());
                       }
                       res.set_content(read_file(path), "image/png");
                   });
    }

    void handle_upload(const httplib::Request& req, httplib::Response& res, const httplib::ContentReader& reader) {
        if (!req.is_multipart_form_data()) {
            return send_error(res, 415, "UnsupportedFormat", "expected multipart/form-data with a 'file' field");
        }
        std::string id;
        {
            std::lock_guard lock(mutex);
            char buf[32];
            std::snprintf(buf, sizeof buf, "img-%06llu", static_cast<unsigned long long>(next_image++));
            id = buf;
        }
        fs::path partial = images_dir() / (id + ".upload");
        std::ofstream out;
        bool in_file = false;
        bool seen_file = false;
        std::uint64_t written = 0;
        bool ok = reader(
            [&](const httplib::MultipartFormData& part) {
                in_file = part.name == "file" && !seen_file;
                if (in_file) {
                    seen_file = true;
                    out.open(partial, std::ios::binary | std::ios::trunc);
                }
                return true;
            },
            [&](const char* data, std::size_t len) {
                if (!in_file) return true;
                out.write(data, static_cast<std::streamsize>(len));
                written += len;
                return static_cast<bool>(out);
            });
        if (out.is_open()) out.close();
        auto discard = [&] {
            std::error_code ec;
            fs::remove(partial, ec);
        };
        if (!ok) {
            discard();
            if (res.status == 413) return send_error(res, 413, "PayloadTooLarge", "upload exceeds service.max_upload_bytes");
            return send_error(res, 400, "BadRequest", "upload interrupted");
        }
        if (!seen_file || written == 0) {
            discard();
            return send_error(res, 422, "InvalidArgument", "multipart field 'file' is missing or empty");
        }
        ImageFormat format = sniff_format(partial);
        if (format == ImageFormat::Unknown) {
            discard();
            return send_error(res, 415, "UnsupportedFormat", "upload is not a PNG, JPEG or TIFF image");
        }
        RasterInfo info;
        try {
            info = read_raster_info(partial);
        } catch (const Error& e) {
            discard();
            return send_error(res, e);
        }
        fs::path final_path = images_dir() / (id + extension_for(format));
        fs::rename(partial, final_path);
        UploadedImage img{id, final_path, info, written};
        {
            std::lock_guard lock(mutex);
            uploads.emplace(id, img);
        }
        spdlog::info("uploaded {} ({}x{} {})", id, info.width, info.height, to_string(format));
        send_json(res, 200, image_json(id, &img, std::nullopt, std::nullopt));
    }

    void handle_overview(const httplib::Request& req, httplib::Response& res) {
        std::string id = req.matches[1];
        fs::path source;
        {
            std::lock_guard lock(mutex);
            if (auto up = uploads.find(id); up != uploads.end()) source = up->second.path;
        }
        if (source.empty()) {
            if (auto entry = store.image(id); entry && !entry->source.empty()) source = entry->source;
        }
        if (source.empty() || !fs::is_regular_file(source)) {
            return send_error(res, 404, "NotFound", "no source image for '" + id + "'");
        }
        fs::path cached = images_dir() / (id + ".overview.png");
        std::lock_guard lock(overview_mutex);
        if (!fs::is_regular_file(cached)) {
            Raster full = load_raster(source);
            auto small = downscale(full, static_cast<std::uint32_t>(options.overview_max_side));
            write_png(small, cached);
        }
        res.set_content(read_file(cached), "image/png");
    }

    void handle_index(const httplib::Request& req, httplib::Response& res) {
        std::string id = req.matches[1];
        IngestOptions ingest;
        ingest.image_id = id;
        ingest.tile_size = options.tile_size;
        ingest.stride = options.stride;
        ingest.parallelism = options.ingest_parallelism;
        ingest.write_tiles = options.write_tiles;
        ingest.batch_size = 64;
        if (!req.body.empty()) {
            json body = json::parse(req.body);
            if (auto t = number_field(body, "tile_size")) {
                if (*t < 1) throw Error(ErrorCode::InvalidArgument, "tile_size must be >= 1");
                ingest.tile_size = static_cast<std::uint32_t>(*t);
            }
            if (auto s = number_field(body, "stride")) {
                if (*s < 0) throw Error(ErrorCode::InvalidArgument, "stride must be >= 0");
                ingest.stride = static_cast<std::uint32_t>(*s);
            }
        }

        std::lock_guard lock(mutex);
        auto up = uploads.find(id);
        if (up == uploads.end()) {
            if (store.image(id)) return send_error(res, 409, "Conflict", "image '" + id + "' is already indexed");
            return send_error(res, 404, "NotFound", "unknown image '" + id + "'");
        }
        if (store.image(id)) return send_error(res, 409, "Conflict", "image '" + id + "' is already indexed");
        if (active_job_for_image.contains(id)) {
            return send_error(res, 409, "Conflict",
                              "image '" + id + "' is already being indexed by " + active_job_for_image[id]);
        }
        char buf[32];
        std::snprintf(buf, sizeof buf, "job-%06llu", static_cast<unsigned long long>(next_job++));
        std::string job_id = buf;
        IngestJob job{job_id, id, JobState::Pending, 0, 0, {}, {}};
        jobs.emplace(job_id, job);
        active_job_for_image.emplace(id, job_id);
        ingest.source = up->second.path.string();
        fs::path path = up->second.path;
        workers.emplace_back([this, job_id, path, ingest]() mutable { run_job(job_id, path, std::move(ingest)); });
        send_json(res, 202, job_to_json(job));
    }

    void update_job(const std::string& job_id, JobState state, std::size_t done, std::size_t total) {
        std::lock_guard lock(mutex);
        auto& job = jobs.at(job_id);
        job.state = state;
        job.tiles_total = std::max(job.tiles_total, total);
        job.tiles_done = std::min(job.tiles_total, std::max(job.tiles_done, done));
    }

    void run_job(const std::string& job_id, const fs::path& path, IngestOptions ingest) {
        ingest.progress = [this, &job_id](IngestStage stage, std::size_t done, std::size_t total) {
            switch (stage) {
                case IngestStage::Tiling: update_job(job_id, JobState::Tiling, done, total); break;
                case IngestStage::Embedding: update_job(job_id, JobState::Embedding, done, total); break;
                case IngestStage::Indexing: update_job(job_id, JobState::Indexing, done, total); break;
                case IngestStage::Done: break;
            }
        };
        std::optional<std::string> error;
        std::optional<std::string> code;
        std::size_t tiles = 0;
        try {
            tiles = ingest_file(path, store, *embedder, ingest).tiles;
        } catch (const Error& e) {
            error = e.what();
            code = std::string(to_string(e.code()));
        } catch (const std::exception& e) {
            error = e.what();
            code = "InternalError";
        }
        std::lock_guard lock(mutex);
        auto& job = jobs.at(job_id);
        if (error) {
            job.state = JobState::Failed;
            job.error = error;
            job.error_code = code;
            spdlog::error("{} failed: {}", job_id, *error);
        } else {
            job.tiles_total = tiles;
            job.tiles_done = tiles;
            job.state = JobState::Done;
        }
        active_job_for_image.erase(job.image_id);
    }

    void handle_query(const httplib::Request& req, httplib::Response& res) {
        json body;
        try {
            body = json::parse(req.body);
        } catch (const json::exception&) {
            return send_error(res, 422, "InvalidArgument", "request body must be a JSON object");
        }
        if (!body.is_object()) return send_error(res, 422, "InvalidArgument", "request body must be a JSON object");
        RetrievalRequest request;
        request.cfg = options.refinement;
        request.threshold = options.threshold;
        try {
            if (!body.contains("text") || !body["text"].is_string() || body["text"].get<std::string>().empty()) {
                throw Error(ErrorCode::InvalidArgument, "'text' must be a non-empty string");
            }
            request.query = body["text"].get<std::string>();
            if (body.contains("method") && !body["method"].is_null()) {
                if (!body["method"].is_string()) throw Error(ErrorCode::InvalidArgument, "'method' must be a string");
                request.method = parse_retrieval_method(body["method"].get<std::string>());
            }
            if (auto a = number_field(body, "alpha")) request.cfg.alpha = *a;
            if (auto b = number_field(body, "beta")) request.cfg.beta = *b;
            if (auto n = number_field(body, "n")) {
                if (*n < 1 || *n != static_cast<double>(static_cast<std::size_t>(*n))) {
                    throw Error(ErrorCode::InvalidArgument, "'n' must be a positive integer");
                }
                request.cfg.n = static_cast<std::size_t>(*n);
            }
            if (auto t = number_field(body, "threshold")) request.threshold = *t;
            if (body.contains("normalize_stage") && body["normalize_stage"].is_string()) {
                request.cfg.normalize_stage = parse_normalize_stage(body["normalize_stage"].get<std::string>());
            }
            if (body.contains("image_id") && !body["image_id"].is_null()) {
                if (!body["image_id"].is_string()) throw Error(ErrorCode::InvalidArgument, "'image_id' must be a string");
                request.image_filter = body["image_id"].get<std::string>();
            }
            if (body.contains("object") && !body["object"].is_null()) {
                request.object_override = body["object"].get<std::string>();
            }
            if (body.contains("surroundings") && !body["surroundings"].is_null()) {
                request.surroundings_override = body["surroundings"].get<std::vector<std::string>>();
            }
            request.validate();
        } catch (const Error& e) {
            return send_error(res, 422, std::string(to_string(e.code())), e.what());
        } catch (const json::exception& e) {
            return send_error(res, 422, "InvalidArgument", e.what());
        }
        ResultJsonOptions out;
        if (body.contains("per_tile") && body["per_tile"].is_boolean()) out.include_per_tile = body["per_tile"];
        try {
            auto result = retriever.retrieve(request);
            send_json(res, 200, result_to_json(result, out));
        } catch (const Error& e) {
            send_error(res, e);
        }
    }
};

Service::Service(Store& store, std::shared_ptr<const Embedder> embedder, std::shared_ptr<ContextDeriver> contexts,
                 ServiceOptions options)
    : impl_(std::make_unique<Impl>(store, std::move(embedder), std::move(contexts), std::move(options))) {}

Service::~Service() { stop(); }

int Service::bind(const std::string& host, int port) {
    int bound_port = port;
    bool ok;
    if (port == 0) {
        bound_port = impl_->server.bind_to_any_port(host);
        ok = bound_port > 0;
    } else {
        ok = impl_->server.bind_to_port(host, port);
    }
    if (!ok) {
        throw Error(ErrorCode::IoError, "cannot listen on " + host + ":" + std::to_string(port) +
                                            " (address in use or not permitted)");
    }
    impl_->bound = true;
    return bound_port;
}

void Service::listen() {
    if (!impl_->bound) throw Error(ErrorCode::InvalidArgument, "service is not bound");
    impl_->server.listen_after_bind();
}

int Service::start(const std::string& host, int port) {
    int p = bind(host, port);
    impl_->listener = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
    return p;
}

void Service::stop() {
    if (!impl_) return;
    impl_->server.stop();
    if (impl_->listener.joinable()) impl_->listener.join();
    std::vector<std::thread> workers;
    {
        std::lock_guard lock(impl_->mutex);
        workers.swap(impl_->workers);
    }
    for (auto& t : workers) {
        if (t.joinable()) t.join();
    }
}

bool Service::running() const { return impl_->server.is_running(); }

}  // namespace opensat
