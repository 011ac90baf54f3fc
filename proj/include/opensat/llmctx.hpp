#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <shared_mutex>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace opensat {

inline constexpr std::size_t kDefaultSurroundings = 5;

enum class ContextSource { Llm, Fixture, UserSupplied };

std::string_view to_string(ContextSource source) noexcept;
ContextSource parse_context_source(std::string_view name);

struct QueryContext {
    std::string raw_query;
    std::string object_of_interest;
    std::vector<std::string> surroundings;
    ContextSource source = ContextSource::Fixture;

    bool operator==(const QueryContext&) const = default;

    // Throws DeficientContext / InvalidArgument when an invariant is broken.
    void validate(std::size_t n) const;
};

void to_json(nlohmann::json& j, const QueryContext& ctx);
void from_json(const nlohmann::json& j, QueryContext& ctx);

struct PromptTriple {
    std::string base;         // "a satellite photo of a {object}"
    std::string composed;     // "a satellite photo of {object} with a surrounding {y}"
    std::string surrounding;  // "a satellite photo of a {y}"
};

std::string base_prompt(const std::string& object);
std::string composed_prompt(const std::string& object, const std::string& surrounding);
std::string surrounding_prompt(const std::string& surrounding);
std::vector<PromptTriple> render_prompts(const QueryContext& ctx);

// Trims, drops entries equal to the object and case-insensitive duplicates,
// then keeps the first n.
std::vector<std::string> sanitize_surroundings(const std::string& object,
                                               const std::vector<std::string>& raw, std::size_t n);

struct ChatMessage {
    std::string role;
    std::string content;
};

// OpenAI-compatible chat-completions endpoint.
class LlmClient {
public:
    virtual ~LlmClient() = default;
    virtual std::string complete(const std::vector<ChatMessage>& messages) = 0;
    [[nodiscard]] virtual std::string identity() const = 0;
};

struct HttpChatConfig {
    std::string endpoint;  // e.g. https://api.openai.com/v1
    std::string model = "gpt-4o";
    std::string api_key;
    int timeout_seconds = 60;

    // OPENSAT_LLM_ENDPOINT, OPENSAT_LLM_MODEL, OPENSAT_LLM_KEY
    static std::optional<HttpChatConfig> from_environment();
};

class HttpChatClient final : public LlmClient {
public:
    explicit HttpChatClient(HttpChatConfig config);
    std::string complete(const std::vector<ChatMessage>& messages) override;
    [[nodiscard]] std::string identity() const override;

    // Request body sent to {endpoint}/chat/completions.
    [[nodiscard]] std::string request_body(const std::vector<ChatMessage>& messages) const;

private:
    HttpChatConfig config_;
};

std::vector<ChatMessage> build_context_prompt(const std::string& query, std::size_t n);
std::vector<ChatMessage> build_repair_prompt(const std::string& query, std::size_t n,
                                             const std::string& previous_reply,
                                             const std::string& problem);

// Parses {"object": string, "surroundings": [string...]}, tolerating a
// surrounding markdown code fence. Throws ContextParseError.
std::pair<std::string, std::vector<std::string>> parse_context_reply(const std::string& reply);

// Offline JSON map {"<query or object>": {"object": ..., "surroundings": [...]}}.
class ContextFixture {
public:
    explicit ContextFixture(std::map<std::string, std::pair<std::string, std::vector<std::string>>> entries,
                            std::string identity = "fixture");
    static ContextFixture load(const std::filesystem::path& path);

    // Exact key first, then case-insensitive key match.
    [[nodiscard]] std::optional<std::pair<std::string, std::vector<std::string>>>
    find(const std::string& query) const;
    [[nodiscard]] const std::string& identity() const noexcept { return identity_; }

private:
    std::map<std::string, std::pair<std::string, std::vector<std::string>>> entries_;
    std::string identity_;
};

// Persistent cache keyed by (query, n, provider identity), stored as JSON lines.
class ContextCache {
public:
    ContextCache() = default;
    explicit ContextCache(std::filesystem::path file);

    std::optional<QueryContext> get(const std::string& query, std::size_t n,
                                    const std::string& provider) const;
    void put(const std::string& query, std::size_t n, const std::string& provider,
             const QueryContext& ctx);
    [[nodiscard]] std::size_t size() const;

private:
    using Key = std::tuple<std::string, std::size_t, std::string>;
    mutable std::shared_mutex mutex_;
    std::map<Key, QueryContext> entries_;
    std::optional<std::filesystem::path> file_;
};

class ContextDeriver {
public:
    ContextDeriver(std::shared_ptr<LlmClient> llm, std::shared_ptr<ContextCache> cache = {},
                   std::size_t max_inflight = 2);
    ContextDeriver(std::shared_ptr<const ContextFixture> fixture,
                   std::shared_ptr<ContextCache> cache = {});

    QueryContext derive(const std::string& query, std::size_t n = kDefaultSurroundings);
    [[nodiscard]] std::string identity() const;

private:
    QueryContext derive_with_llm(const std::string& query, std::size_t n);
    QueryContext derive_with_fixture(const std::string& query, std::size_t n) const;

    std::shared_ptr<LlmClient> llm_;
    std::shared_ptr<const ContextFixture> fixture_;
    std::shared_ptr<ContextCache> cache_;
    std::unique_ptr<std::counting_semaphore<64>> inflight_;
};

}  // namespace opensat
