#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>

#include "opensat/embed.hpp"
#include "opensat/llmctx.hpp"
#include "opensat/refine.hpp"

namespace opensat {

// Flat view of a TOML-style file: "section.key" -> scalar. Supports [section]
// headers, strings, integers, floats, booleans and '#' comments.
using ConfigValue = std::variant<std::string, std::int64_t, double, bool>;
using ConfigTable = std::map<std::string, ConfigValue>;

ConfigTable parse_config_text(std::string_view text, const std::string& origin = "<config>");
ConfigTable parse_config_file(const std::filesystem::path& path);

struct ServiceSettings {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::uint64_t max_upload_bytes = 2ULL << 30;
    std::string cors_origin = "*";
    std::optional<std::filesystem::path> ui_dir;
    std::size_t threads = 8;
};

struct AppConfig {
    std::filesystem::path store_path = "opensat-store";
    EmbedderSpec embedder;
    std::optional<std::filesystem::path> fixture;
    std::optional<std::string> llm_endpoint;
    std::optional<std::string> llm_model;
    std::optional<std::string> llm_key;
    std::size_t llm_max_inflight = 2;
    RefinementConfig refinement;
    double threshold = 0.28;
    std::string log_level = "info";

    std::uint32_t tile_size = 224;
    std::uint32_t stride = 0;
    std::size_t ingest_parallelism = 0;
    bool write_tiles = true;

    ServiceSettings service;

    void apply(const ConfigTable& table);
};

// OPENSAT_<SECTION>_<KEY> for every known key, e.g. OPENSAT_EMBED_KIND,
// OPENSAT_STORE_PATH, OPENSAT_SERVICE_PORT.
ConfigTable environment_overrides();

// Defaults, then the file (if any), then the environment.
AppConfig load_config(const std::optional<std::filesystem::path>& file);

std::shared_ptr<ContextDeriver> make_context_deriver(const AppConfig& config);

}  // namespace opensat
