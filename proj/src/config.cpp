#include "opensat/config.hpp"

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace opensat {

namespace fs = std::filesystem;

namespace {

std::string_view trim_view(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

[[noreturn]] void fail(const std::string& origin, std::size_t line, const std::string& what) {
    throw Error(ErrorCode::ConfigError, origin + ":" + std::to_string(line) + ": " + what);
}

// Strips a trailing comment that is not inside a quoted string.
std::string_view strip_comment(std::string_view s) {
    bool quoted = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '\\' && quoted) {
            ++i;
        } else if (s[i] == '"') {
            quoted = !quoted;
        } else if (s[i] == '#' && !quoted) {
            return s.substr(0, i);
        }
    }
    return s;
}

ConfigValue parse_scalar(std::string_view raw, const std::string& origin, std::size_t line) {
    if (raw.empty()) fail(origin, line, "missing value");
    if (raw.front() == '"') {
        if (raw.size() < 2 || raw.back() != '"') fail(origin, line, "unterminated string");
        std::string out;
        for (std::size_t i = 1; i + 1 < raw.size(); ++i) {
            char c = raw[i];
            if (c != '\\') {
                out += c;
                continue;
            }
            if (++i + 1 > raw.size() - 1) fail(origin, line, "dangling escape");
            switch (raw[i]) {
                case 'n': out += '\n'; break;
                case 't': out += '\t'; break;
                case '"': out += '"'; break;
                case '\\': out += '\\'; break;
                default: fail(origin, line, std::string("unsupported escape \\") + raw[i]);
            }
        }
        return out;
    }
    if (raw == "true") return true;
    if (raw == "false") return false;
    std::string digits;
    for (char c : raw) {
        if (c != '_') digits += c;
    }
    char* end = nullptr;
    errno = 0;
    long long i = std::strtoll(digits.c_str(), &end, 10);
    if (errno == 0 && end && *end == '\0') return static_cast<std::int64_t>(i);
    errno = 0;
    double d = std::strtod(digits.c_str(), &end);
    if (errno == 0 && end && *end == '\0') return d;
    fail(origin, line, "cannot parse value '" + std::string(raw) + "'");
}

std::string as_string(const ConfigValue& v, const std::string& key) {
    if (auto s = std::get_if<std::string>(&v)) return *s;
    throw Error(ErrorCode::ConfigError, key + " must be a string");
}

double as_double(const ConfigValue& v, const std::string& key) {
    if (auto d = std::get_if<double>(&v)) return *d;
    if (auto i = std::get_if<std::int64_t>(&v)) return static_cast<double>(*i);
    throw Error(ErrorCode::ConfigError, key + " must be a number");
}

std::int64_t as_int(const ConfigValue& v, const std::string& key, std::int64_t min = 0) {
    auto i = std::get_if<std::int64_t>(&v);
    if (!i) throw Error(ErrorCode::ConfigError, key + " must be an integer");
    if (*i < min) throw Error(ErrorCode::ConfigError, key + " must be >= " + std::to_string(min));
    return *i;
}

bool as_bool(const ConfigValue& v, const std::string& key) {
    if (auto b = std::get_if<bool>(&v)) return *b;
    throw Error(ErrorCode::ConfigError, key + " must be true or false");
}

enum class Kind { String, Int, Double, Bool };

const std::map<std::string, Kind>& known_keys() {
    static const std::map<std::string, Kind> keys{
        {"store.path", Kind::String},
        {"embed.kind", Kind::String},
        {"embed.dim", Kind::Int},
        {"embed.endpoint", Kind::String},
        {"embed.model", Kind::String},
        {"embed.manifest", Kind::String},
        {"embed.batch_size", Kind::Int},
        {"embed.seed", Kind::Int},
        {"embed.max_inflight", Kind::Int},
        {"embed.timeout_ms", Kind::Int},
        {"embed.max_retries", Kind::Int},
        {"embed.backoff_ms", Kind::Int},
        {"llm.fixture", Kind::String},
        {"llm.endpoint", Kind::String},
        {"llm.model", Kind::String},
        {"llm.key", Kind::String},
        {"llm.max_inflight", Kind::Int},
        {"refine.alpha", Kind::Double},
        {"refine.beta", Kind::Double},
        {"refine.n", Kind::Int},
        {"refine.normalize_stage", Kind::String},
        {"retrieval.threshold", Kind::Double},
        {"log.level", Kind::String},
        {"ingest.tile_size", Kind::Int},
        {"ingest.stride", Kind::Int},
        {"ingest.parallelism", Kind::Int},
        {"ingest.write_tiles", Kind::Bool},
        {"service.host", Kind::String},
        {"service.port", Kind::Int},
        {"service.max_upload_bytes", Kind::Int},
        {"service.cors_origin", Kind::String},
        {"service.ui_dir", Kind::String},
        {"service.threads", Kind::Int},
    };
    return keys;
}

}  // namespace

ConfigTable parse_config_text(std::string_view text, const std::string& origin) {
    ConfigTable table;
    std::string section;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t eol = text.find('\n', pos);
        if (eol == std::string_view::npos) eol = text.size();
        std::string_view line = trim_view(strip_comment(text.substr(pos, eol - pos)));
        pos = eol + 1;
        ++line_no;
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') fail(origin, line_no, "malformed section header");
            section = std::string(trim_view(line.substr(1, line.size() - 2)));
            if (section.empty()) fail(origin, line_no, "empty section name");
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string_view::npos) fail(origin, line_no, "expected key = value");
        std::string key(trim_view(line.substr(0, eq)));
        if (key.empty()) fail(origin, line_no, "empty key");
        std::string full = section.empty() ? key : section + "." + key;
        table[full] = parse_scalar(trim_view(line.substr(eq + 1)), origin, line_no);
    }
    return table;
}

ConfigTable parse_config_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::ConfigError, "cannot read config file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), path.string());
}

ConfigTable environment_overrides() {
    ConfigTable table;
    for (const auto& [key, kind] : known_keys()) {
        std::string env = "OPENSAT_";
        for (char c : key) env += c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
        const char* raw = std::getenv(env.c_str());
        if (!raw) continue;
        std::string value = raw;
        try {
            switch (kind) {
                case Kind::String: table[key] = value; break;
                case Kind::Int: table[key] = static_cast<std::int64_t>(std::stoll(value)); break;
                case Kind::Double: table[key] = std::stod(value); break;
                case Kind::Bool:
                    if (value != "true" && value != "false" && value != "1" && value != "0") {
                        throw std::invalid_argument(value);
                    }
                    table[key] = value == "true" || value == "1";
                    break;
            }
        } catch (const std::logic_error&) {
            throw Error(ErrorCode::ConfigError, env + " has an invalid value '" + value + "'");
        }
    }
    return table;
}

void AppConfig::apply(const ConfigTable& table) {
    for (const auto& [key, value] : table) {
        if (!known_keys().contains(key)) throw Error(ErrorCode::ConfigError, "unknown config key '" + key + "'");
        if (key == "store.path") store_path = as_string(value, key);
        else if (key == "embed.kind") embedder.kind = parse_embedder_kind(as_string(value, key));
        else if (key == "embed.dim") embedder.dim = static_cast<std::size_t>(as_int(value, key, 1));
        else if (key == "embed.endpoint") embedder.endpoint = as_string(value, key);
        else if (key == "embed.model") embedder.model_name = as_string(value, key);
        else if (key == "embed.manifest") embedder.manifest = fs::path(as_string(value, key));
        else if (key == "embed.batch_size") embedder.batch_size = static_cast<std::size_t>(as_int(value, key, 1));
        else if (key == "embed.seed") embedder.seed = static_cast<std::uint64_t>(as_int(value, key));
        else if (key == "embed.max_inflight") embedder.max_inflight = static_cast<std::size_t>(as_int(value, key, 1));
        else if (key == "embed.timeout_ms") embedder.timeout = std::chrono::milliseconds(as_int(value, key, 1));
        else if (key == "embed.max_retries") embedder.max_retries = static_cast<int>(as_int(value, key));
        else if (key == "embed.backoff_ms") embedder.backoff_base = std::chrono::milliseconds(as_int(value, key));
        else if (key == "llm.fixture") fixture = fs::path(as_string(value, key));
        else if (key == "llm.endpoint") llm_endpoint = as_string(value, key);
        else if (key == "llm.model") llm_model = as_string(value, key);
        else if (key == "llm.key") llm_key = as_string(value, key);
        else if (key == "llm.max_inflight") llm_max_inflight = static_cast<std::size_t>(as_int(value, key, 1));
        else if (key == "refine.alpha") refinement.alpha = as_double(value, key);
        else if (key == "refine.beta") refinement.beta = as_double(value, key);
        else if (key == "refine.n") refinement.n = static_cast<std::size_t>(as_int(value, key, 1));
        else if (key == "refine.normalize_stage") {
            try {
                refinement.normalize_stage = parse_normalize_stage(as_string(value, key));
            } catch (const Error& e) {
                throw Error(ErrorCode::ConfigError, e.what());
            }
        }
        else if (key == "retrieval.threshold") threshold = as_double(value, key);
        else if (key == "log.level") log_level = as_string(value, key);
        else if (key == "ingest.tile_size") tile_size = static_cast<std::uint32_t>(as_int(value, key, 1));
        else if (key == "ingest.stride") stride = static_cast<std::uint32_t>(as_int(value, key));
        else if (key == "ingest.parallelism") ingest_parallelism = static_cast<std::size_t>(as_int(value, key));
        else if (key == "ingest.write_tiles") write_tiles = as_bool(value, key);
        else if (key == "service.host") service.host = as_string(value, key);
        else if (key == "service.port") service.port = static_cast<int>(as_int(value, key));
        else if (key == "service.max_upload_bytes") service.max_upload_bytes = static_cast<std::uint64_t>(as_int(value, key, 1));
        else if (key == "service.cors_origin") service.cors_origin = as_string(value, key);
        else if (key == "service.ui_dir") service.ui_dir = fs::path(as_string(value, key));
        else if (key == "service.threads") service.threads = static_cast<std::size_t>(as_int(value, key, 1));
    }
}

AppConfig load_config(const std::optional<fs::path>& file) {
    AppConfig config;
    if (file) config.apply(parse_config_file(*file));
    config.apply(environment_overrides());
    return config;
}

std::shared_ptr<ContextDeriver> make_context_deriver(const AppConfig& config) {
    std::shared_ptr<ContextCache> cache;
    std::error_code ec;
    if (fs::is_directory(config.store_path, ec)) {
        cache = std::make_shared<ContextCache>(config.store_path / "llm_cache.jsonl");
    }
    if (config.fixture) {
        auto fixture = std::make_shared<const ContextFixture>(ContextFixture::load(*config.fixture));
        return std::make_shared<ContextDeriver>(fixture);
    }
    if (config.llm_endpoint && !config.llm_endpoint->empty()) {
        HttpChatConfig chat;
        chat.endpoint = *config.llm_endpoint;
        if (config.llm_model) chat.model = *config.llm_model;
        if (config.llm_key) chat.api_key = *config.llm_key;
        return std::make_shared<ContextDeriver>(std::make_shared<HttpChatClient>(chat), cache,
                                                config.llm_max_inflight);
    }
    return nullptr;
}

}  // namespace opensat
