#include "opensat/llmctx.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <set>

#include <httplib.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "opensat/error.hpp"

namespace opensat {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

std::string trim(std::string_view s) {
    auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    auto last = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(first, last - first + 1));
}

}  // namespace

std::string_view to_string(ContextSource source) noexcept {
    switch (source) {
        case ContextSource::Llm: return "llm";
        case ContextSource::Fixture: return "fixture";
        case ContextSource::UserSupplied: return "user_supplied";
    }
    return "fixture";
}

ContextSource parse_context_source(std::string_view name) {
    if (name == "llm") return ContextSource::Llm;
    if (name == "fixture") return ContextSource::Fixture;
    if (name == "user_supplied") return ContextSource::UserSupplied;
    throw Error(ErrorCode::InvalidArgument, "unknown context source '" + std::string(name) + "'");
}

void QueryContext::validate(std::size_t n) const {
    if (trim(object_of_interest).empty()) {
        throw Error(ErrorCode::InvalidArgument, "object of interest is empty");
    }
    if (n == 0) throw Error(ErrorCode::InvalidArgument, "surrounding count must be positive");
    if (surroundings.size() != n) {
        throw Error(ErrorCode::DeficientContext, "expected " + std::to_string(n) +
                                                     " surrounding objects, got " +
                                                     std::to_string(surroundings.size()));
    }
    std::set<std::string> seen{lower(object_of_interest)};
    for (const auto& s : surroundings) {
        if (trim(s).empty() || !seen.insert(lower(s)).second) {
            throw Error(ErrorCode::DeficientContext,
                        "surrounding object '" + s + "' is empty, duplicated, or equals the object");
        }
    }
}

void to_json(json& j, const QueryContext& ctx) {
    j = json{{"raw_query", ctx.raw_query},
             {"object_of_interest", ctx.object_of_interest},
             {"surroundings", ctx.surroundings},
             {"source", std::string(to_string(ctx.source))}};
}

void from_json(const json& j, QueryContext& ctx) {
    ctx.raw_query = j.at("raw_query").get<std::string>();
    ctx.object_of_interest = j.at("object_of_interest").get<std::string>();
    ctx.surroundings = j.at("surroundings").get<std::vector<std::string>>();
    ctx.source = parse_context_source(j.at("source").get<std::string>());
}

std::string base_prompt(const std::string& object) { return "a satellite photo of a " + object; }

std::string composed_prompt(const std::string& object, const std::string& surrounding) {
    return "a satellite photo of " + object + " with a surrounding " + surrounding;
}

std::string surrounding_prompt(const std::string& surrounding) {
    return "a satellite photo of a " + surrounding;
}

std::vector<PromptTriple> render_prompts(const QueryContext& ctx) {
    std::vector<PromptTriple> out;
    out.reserve(ctx.surroundings.size());
    for (const auto& y : ctx.surroundings) {
        out.push_back({base_prompt(ctx.object_of_interest), composed_prompt(ctx.object_of_interest, y),
                       surrounding_prompt(y)});
    }
    return out;
}

std::vector<std::string> sanitize_surroundings(const std::string& object,
                                               const std::vector<std::string>& raw, std::size_t n) {
    std::set<std::string> seen{lower(trim(object))};
    std::vector<std::string> out;
    for (const auto& entry : raw) {
        std::string s = trim(entry);
        if (s.empty() || !seen.insert(lower(s)).second) continue;
        out.push_back(std::move(s));
        if (out.size() == n) break;
    }
    return out;
}

// ---------------------------------------------------------------- prompting

std::vector<ChatMessage> build_context_prompt(const std::string& query, std::size_t n) {
    std::string count = std::to_string(n);
    return {
        {"system",
         "You assist a satellite image retrieval system. Given a user query, identify the single "
         "object of interest the query asks about. Then list exactly " + count +
             " distinct objects that are typically visible alongside that object when seen from a "
             "satellite or aerial viewpoint. The surrounding objects must differ from the object of "
             "interest. Respond only with JSON of the form "
             "{\"object\": string, \"surroundings\": [string, ...]} and no other text."},
        {"user", "Query: " + query},
    };
}

std::vector<ChatMessage> build_repair_prompt(const std::string& query, std::size_t n,
                                             const std::string& previous_reply,
                                             const std::string& problem) {
    auto messages = build_context_prompt(query, n);
    messages.push_back({"assistant", previous_reply});
    messages.push_back({"user", "That reply could not be used: " + problem +
                                    ". Reply again with only the JSON object, listing exactly " +
                                    std::to_string(n) +
                                    " distinct surrounding objects that differ from the object of interest."});
    return messages;
}

std::pair<std::string, std::vector<std::string>> parse_context_reply(const std::string& reply) {
    std::string text = trim(reply);
    if (text.rfind("```", 0) == 0) {
        auto first_newline = text.find('\n');
        auto fence_end = text.rfind("```");
        if (first_newline != std::string::npos && fence_end > first_newline) {
            text = trim(std::string_view(text).substr(first_newline + 1, fence_end - first_newline - 1));
        }
    }
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::ContextParseError, std::string("reply is not valid JSON: ") + e.what());
    }
    if (!doc.is_object() || !doc.contains("object") || !doc["object"].is_string() ||
        !doc.contains("surroundings") || !doc["surroundings"].is_array()) {
        throw Error(ErrorCode::ContextParseError,
                    "reply must be {\"object\": string, \"surroundings\": [string...]}");
    }
    std::vector<std::string> surroundings;
    for (const auto& s : doc["surroundings"]) {
        if (!s.is_string()) throw Error(ErrorCode::ContextParseError, "surroundings must be strings");
        surroundings.push_back(s.get<std::string>());
    }
    std::string object = trim(doc["object"].get<std::string>());
    if (object.empty()) throw Error(ErrorCode::ContextParseError, "reply has an empty object");
    return {object, surroundings};
}

// ---------------------------------------------------------------- HTTP client

std::optional<HttpChatConfig> HttpChatConfig::from_environment() {
    const char* endpoint = std::getenv("OPENSAT_LLM_ENDPOINT");
    if (endpoint == nullptr || *endpoint == '\0') return std::nullopt;
    HttpChatConfig cfg;
    cfg.endpoint = endpoint;
    if (const char* model = std::getenv("OPENSAT_LLM_MODEL"); model && *model) cfg.model = model;
    if (const char* key = std::getenv("OPENSAT_LLM_KEY"); key) cfg.api_key = key;
    return cfg;
}

HttpChatClient::HttpChatClient(HttpChatConfig config) : config_(std::move(config)) {
    if (config_.endpoint.empty()) throw Error(ErrorCode::ConfigError, "LLM endpoint is empty");
    while (!config_.endpoint.empty() && config_.endpoint.back() == '/') config_.endpoint.pop_back();
}

std::string HttpChatClient::identity() const { return "llm:" + config_.endpoint + ":" + config_.model; }

std::string HttpChatClient::request_body(const std::vector<ChatMessage>& messages) const {
    json msgs = json::array();
    for (const auto& m : messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
    return json{{"model", config_.model}, {"messages", msgs}, {"temperature", 0}}.dump();
}

std::string HttpChatClient::complete(const std::vector<ChatMessage>& messages) {
    auto scheme_end = config_.endpoint.find("://");
    auto path_start = config_.endpoint.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
    std::string base = config_.endpoint.substr(0, path_start);
    std::string prefix = path_start == std::string::npos ? "" : config_.endpoint.substr(path_start);

    httplib::Client client(base);
    client.set_connection_timeout(config_.timeout_seconds, 0);
    client.set_read_timeout(config_.timeout_seconds, 0);
    httplib::Headers headers;
    if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);
    auto res = client.Post(prefix + "/chat/completions", headers, request_body(messages), "application/json");
    if (!res) {
        throw Error(ErrorCode::ProviderUnavailable, "LLM unreachable: " + httplib::to_string(res.error()));
    }
    if (res->status != 200) {
        throw Error(ErrorCode::ProviderUnavailable, "LLM returned status " + std::to_string(res->status));
    }
    try {
        auto doc = json::parse(res->body);
        return doc.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception& e) {
        throw Error(ErrorCode::ContextParseError, std::string("malformed chat completion: ") + e.what());
    }
}

// ---------------------------------------------------------------- fixture

ContextFixture::ContextFixture(
    std::map<std::string, std::pair<std::string, std::vector<std::string>>> entries, std::string identity)
    : entries_(std::move(entries)), identity_(std::move(identity)) {}

ContextFixture ContextFixture::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::ConfigError, "cannot open fixture " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::ConfigError, "fixture " + path.string() + ": " + e.what());
    }
    if (!doc.is_object()) throw Error(ErrorCode::ConfigError, "fixture must be a JSON object");
    std::map<std::string, std::pair<std::string, std::vector<std::string>>> entries;
    for (const auto& [key, value] : doc.items()) {
        try {
            entries.emplace(key, std::pair{value.at("object").get<std::string>(),
                                           value.at("surroundings").get<std::vector<std::string>>()});
        } catch (const json::exception& e) {
            throw Error(ErrorCode::ConfigError, "fixture entry '" + key + "': " + e.what());
        }
    }
    return ContextFixture(std::move(entries), "fixture:" + path.filename().string());
}

std::optional<std::pair<std::string, std::vector<std::string>>>
ContextFixture::find(const std::string& query) const {
    if (auto it = entries_.find(query); it != entries_.end()) return it->second;
    std::string wanted = lower(trim(query));
    for (const auto& [key, value] : entries_) {
        if (lower(trim(key)) == wanted) return value;
    }
    return std::nullopt;
}

// ---------------------------------------------------------------- cache

ContextCache::ContextCache(fs::path file) : file_(std::move(file)) {
    std::ifstream in(*file_);
    std::string line;
    while (std::getline(in, line)) {
        try {
            auto doc = json::parse(line);
            entries_.insert_or_assign(Key{doc.at("query").get<std::string>(), doc.at("n").get<std::size_t>(),
                                          doc.at("provider").get<std::string>()},
                                      doc.at("context").get<QueryContext>());
        } catch (const std::exception&) {
            spdlog::warn("skipping malformed context cache line in {}", file_->string());
        }
    }
}

std::optional<QueryContext> ContextCache::get(const std::string& query, std::size_t n,
                                              const std::string& provider) const {
    std::shared_lock lock(mutex_);
    if (auto it = entries_.find(Key{query, n, provider}); it != entries_.end()) return it->second;
    return std::nullopt;
}

void ContextCache::put(const std::string& query, std::size_t n, const std::string& provider,
                       const QueryContext& ctx) {
    std::unique_lock lock(mutex_);
    entries_.insert_or_assign(Key{query, n, provider}, ctx);
    if (file_) {
        std::ofstream out(*file_, std::ios::app);
        out << json{{"query", query}, {"n", n}, {"provider", provider}, {"context", ctx}}.dump() << '\n';
    }
}

std::size_t ContextCache::size() const {
    std::shared_lock lock(mutex_);
    return entries_.size();
}

// ---------------------------------------------------------------- deriver

ContextDeriver::ContextDeriver(std::shared_ptr<LlmClient> llm, std::shared_ptr<ContextCache> cache,
                               std::size_t max_inflight)
    : llm_(std::move(llm)), cache_(cache ? std::move(cache) : std::make_shared<ContextCache>()),
      inflight_(std::make_unique<std::counting_semaphore<64>>(
          static_cast<std::ptrdiff_t>(std::clamp<std::size_t>(max_inflight, 1, 64)))) {
    if (!llm_) throw Error(ErrorCode::ConfigError, "context deriver needs an LLM client");
}

ContextDeriver::ContextDeriver(std::shared_ptr<const ContextFixture> fixture,
                               std::shared_ptr<ContextCache> cache)
    : fixture_(std::move(fixture)),
      cache_(cache ? std::move(cache) : std::make_shared<ContextCache>()) {
    if (!fixture_) throw Error(ErrorCode::ConfigError, "context deriver needs a fixture");
}

std::string ContextDeriver::identity() const { return llm_ ? llm_->identity() : fixture_->identity(); }

QueryContext ContextDeriver::derive(const std::string& query, std::size_t n) {
    if (trim(query).empty()) throw Error(ErrorCode::InvalidArgument, "query is empty");
    if (n == 0) throw Error(ErrorCode::InvalidArgument, "surrounding count must be positive");
    std::string provider = identity();
    if (auto hit = cache_->get(query, n, provider)) return *hit;
    QueryContext ctx = llm_ ? derive_with_llm(query, n) : derive_with_fixture(query, n);
    ctx.validate(n);
    cache_->put(query, n, provider, ctx);
    return ctx;
}

QueryContext ContextDeriver::derive_with_fixture(const std::string& query, std::size_t n) const {
    auto entry = fixture_->find(query);
    if (!entry) throw Error(ErrorCode::DeficientContext, "fixture has no entry for '" + query + "'");
    auto surroundings = sanitize_surroundings(entry->first, entry->second, n);
    if (surroundings.size() < n) {
        throw Error(ErrorCode::DeficientContext, "fixture entry for '" + query + "' has only " +
                                                     std::to_string(surroundings.size()) +
                                                     " usable surrounding objects");
    }
    return QueryContext{query, trim(entry->first), std::move(surroundings), ContextSource::Fixture};
}

QueryContext ContextDeriver::derive_with_llm(const std::string& query, std::size_t n) {
    inflight_->acquire();
    struct Release {
        std::counting_semaphore<64>& s;
        ~Release() { s.release(); }
    } release{*inflight_};

    std::string reply = llm_->complete(build_context_prompt(query, n));
    std::string problem;
    try {
        auto [object, raw] = parse_context_reply(reply);
        auto surroundings = sanitize_surroundings(object, raw, n);
        if (surroundings.size() == n) {
            return QueryContext{query, object, std::move(surroundings), ContextSource::Llm};
        }
        problem = "it listed only " + std::to_string(surroundings.size()) +
                  " distinct surrounding objects different from the object of interest";
    } catch (const Error& e) {
        if (e.code() != ErrorCode::ContextParseError) throw;
        problem = e.what();
    }

    spdlog::debug("re-prompting LLM for '{}': {}", query, problem);
    reply = llm_->complete(build_repair_prompt(query, n, reply, problem));
    auto [object, raw] = parse_context_reply(reply);
    auto surroundings = sanitize_surroundings(object, raw, n);
    if (surroundings.size() < n) {
        throw Error(ErrorCode::DeficientContext, "LLM supplied " + std::to_string(surroundings.size()) +
                                                     " of " + std::to_string(n) +
                                                     " surrounding objects after repair");
    }
    return QueryContext{query, object, std::move(surroundings), ContextSource::Llm};
}

}  // namespace opensat
