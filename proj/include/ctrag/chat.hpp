#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace ctrag {

enum class Role { system, user, assistant };

std::string_view to_string(Role role);
Role role_from_string(std::string_view text);

struct ChatMessage {
    Role role = Role::user;
    std::string content;
};

/// A chat-completion request. Temperature is pinned to 0.0; construction
/// rejects anything else so a nondeterministic request can never be sent.
class ChatRequest {
public:
    ChatRequest(std::string model, std::vector<ChatMessage> messages,
                double temperature = 0.0,
                std::optional<std::uint32_t> max_tokens = std::nullopt);

    const std::string& model() const { return model_; }
    const std::vector<ChatMessage>& messages() const { return messages_; }
    double temperature() const { return 0.0; }
    std::optional<std::uint32_t> max_tokens() const { return max_tokens_; }

    /// All message contents joined with newlines; the scripted backend
    /// matches fixtures against this text.
    std::string concatenated_content() const;

private:
    std::string model_;
    std::vector<ChatMessage> messages_;
    std::optional<std::uint32_t> max_tokens_;
};

struct TokenUsage {
    std::uint64_t prompt_tokens = 0;
    std::uint64_t completion_tokens = 0;
    std::uint64_t total_tokens = 0;
};

struct ChatResponse {
    std::string content;
    TokenUsage usage;
    double latency_ms = 0.0;
};

/// Number of whitespace-delimited tokens; the scripted backend's synthetic
/// usage metric.
std::uint64_t whitespace_token_count(std::string_view text);

class ChatBackend {
public:
    virtual ~ChatBackend() = default;
    virtual ChatResponse complete(const ChatRequest& request) = 0;
    virtual std::string_view kind() const = 0;
};

/// Deterministic replay backend. Each call consumes the first unconsumed
/// fixture whose matcher is "*" or occurs as a literal substring of the
/// request's concatenated content. Safe for concurrent use; consumption is
/// serialized.
class ScriptedBackend : public ChatBackend {
public:
    struct Fixture {
        std::string matcher;
        std::string response;
    };

    explicit ScriptedBackend(std::vector<Fixture> fixtures);
    ScriptedBackend(std::initializer_list<Fixture> fixtures)
        : ScriptedBackend(std::vector<Fixture>(fixtures)) {}

    /// Loads a JSONL fixture file of {"match":…,"response":…} lines.
    static std::unique_ptr<ScriptedBackend> from_file(const std::filesystem::path& path);

    ChatResponse complete(const ChatRequest& request) override;
    std::string_view kind() const override { return "scripted"; }
    std::size_t remaining() const;

private:
    struct Slot {
        Fixture fixture;
        bool consumed = false;
    };
    mutable std::mutex mutex_;
    std::vector<Slot> slots_;
};

struct HttpBackendConfig {
    std::string base_url;          // e.g. http://localhost:8000/v1
    std::string auth_token;        // optional bearer token
    double timeout_s = 30.0;
    std::uint32_t retries = 2;     // transient-failure retries beyond the first attempt
    double backoff_initial_ms = 250.0;
};

/// Chat-completions wire client: POST {model, messages, temperature,
/// max_tokens?} to <base>/chat/completions and read
/// choices[0].message.content plus optional usage. Transient failures
/// (connect errors, 429, 5xx) are retried with exponential backoff.
class HttpBackend : public ChatBackend {
public:
    explicit HttpBackend(HttpBackendConfig config);

    ChatResponse complete(const ChatRequest& request) override;
    std::string_view kind() const override { return "http"; }

private:
    HttpBackendConfig config_;
    std::string host_;        // scheme://host:port
    std::string path_prefix_; // any path carried by base_url
};

/// Pass-through wrapper that captures every request, for prompt-contract
/// assertions and trace debugging.
class RecordingBackend : public ChatBackend {
public:
    explicit RecordingBackend(ChatBackend& inner) : inner_(inner) {}

    ChatResponse complete(const ChatRequest& request) override;
    std::string_view kind() const override { return inner_.kind(); }

    const std::vector<ChatRequest>& requests() const { return requests_; }

private:
    ChatBackend& inner_;
    std::vector<ChatRequest> requests_;
    std::mutex mutex_;
};

} // namespace ctrag
