#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include <nlohmann/json_fwd.hpp>

#include "opensat/config.hpp"
#include "opensat/embed.hpp"
#include "opensat/llmctx.hpp"
#include "opensat/store.hpp"

namespace opensat {

enum class JobState { Pending, Tiling, Embedding, Indexing, Done, Failed };

std::string_view to_string(JobState state) noexcept;

struct IngestJob {
    std::string job_id;
    std::string image_id;
    JobState state = JobState::Pending;
    std::size_t tiles_total = 0;
    std::size_t tiles_done = 0;
    std::optional<std::string> error;
    std::optional<std::string> error_code;
};

nlohmann::json job_to_json(const IngestJob& job);

// HTTP status used for each error code in {code, message} responses.
int http_status_for(ErrorCode code) noexcept;

struct ServiceOptions {
    ServiceSettings settings;
    std::uint32_t tile_size = 224;
    std::uint32_t stride = 0;
    std::size_t ingest_parallelism = 0;
    bool write_tiles = true;
    RefinementConfig refinement;
    double threshold = 0.28;
    std::size_t overview_max_side = 1024;

    static ServiceOptions from_config(const AppConfig& config);
};

// REST front end over one persistent store:
//   GET  /healthz
//   GET  /images                     POST /images (multipart field "file")
//   GET  /images/{id}                GET  /images/{id}/overview.png
//   POST /images/{id}/index          GET  /jobs/{job_id}
//   POST /query                      GET  /tiles/{image_id}/{row}/{col}.png
class Service {
public:
    Service(Store& store, std::shared_ptr<const Embedder> embedder, std::shared_ptr<ContextDeriver> contexts,
            ServiceOptions options);
    ~Service();

    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    // Port 0 picks a free port. Returns the bound port; throws IoError on failure.
    int bind(const std::string& host, int port);
    // Blocks until stop(). Requires bind().
    void listen();
    // bind() + listen() on a background thread.
    int start(const std::string& host, int port);
    // Stops accepting, lets in-flight requests finish, waits for ingest jobs.
    void stop();

    [[nodiscard]] bool running() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace opensat
