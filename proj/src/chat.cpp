#include "ctrag/chat.hpp"

#include <cctype>
#include <chrono>
#include <fstream>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "ctrag/errors.hpp"

namespace ctrag {

std::string_view to_string(Role role) {
    switch (role) {
    case Role::system:
        return "system";
    case Role::user:
        return "user";
    case Role::assistant:
        return "assistant";
    }
    return "user";
}

Role role_from_string(std::string_view text) {
    if (text == "system") return Role::system;
    if (text == "user") return Role::user;
    if (text == "assistant") return Role::assistant;
    throw ValidationError("unknown chat role \"" + std::string(text) + "\"");
}

ChatRequest::ChatRequest(std::string model, std::vector<ChatMessage> messages,
                         double temperature, std::optional<std::uint32_t> max_tokens)
    : model_(std::move(model)), messages_(std::move(messages)), max_tokens_(max_tokens) {
    if (temperature != 0.0) {
        throw ValidationError("temperature must be 0.0 for deterministic runs");
    }
    if (messages_.empty()) {
        throw ValidationError("chat request needs at least one message");
    }
    for (const auto& message : messages_) {
        if (message.content.empty() && message.role != Role::assistant) {
            throw ValidationError("only assistant messages may be empty");
        }
    }
}

std::string ChatRequest::concatenated_content() const {
    std::string joined;
    for (std::size_t i = 0; i < messages_.size(); ++i) {
        if (i > 0) {
            joined += '\n';
        }
        joined += messages_[i].content;
    }
    return joined;
}

std::uint64_t whitespace_token_count(std::string_view text) {
    std::uint64_t count = 0;
    bool in_token = false;
    for (const char c : text) {
        const bool ws = std::isspace(static_cast<unsigned char>(c)) != 0;
        if (!ws && !in_token) {
            ++count;
        }
        in_token = !ws;
    }
    return count;
}

ScriptedBackend::ScriptedBackend(std::vector<Fixture> fixtures) {
    slots_.reserve(fixtures.size());
    for (auto& fixture : fixtures) {
        slots_.push_back(Slot{std::move(fixture), false});
    }
}

std::unique_ptr<ScriptedBackend> ScriptedBackend::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open fixture file \"" + path.string() + "\"");
    }
    std::vector<Fixture> fixtures;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(line);
            fixtures.push_back(Fixture{j.at("match").get<std::string>(),
                                       j.at("response").get<std::string>()});
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("fixture line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return std::make_unique<ScriptedBackend>(std::move(fixtures));
}

ChatResponse ScriptedBackend::complete(const ChatRequest& request) {
    const std::string content = request.concatenated_content();
    std::lock_guard lock(mutex_);
    std::size_t unconsumed = 0;
    for (auto& slot : slots_) {
        if (slot.consumed) {
            continue;
        }
        ++unconsumed;
        if (slot.fixture.matcher == "*" || content.find(slot.fixture.matcher) != std::string::npos) {
            slot.consumed = true;
            ChatResponse response;
            response.content = slot.fixture.response;
            response.usage.prompt_tokens = whitespace_token_count(content);
            response.usage.completion_tokens = whitespace_token_count(response.content);
            response.usage.total_tokens =
                response.usage.prompt_tokens + response.usage.completion_tokens;
            response.latency_ms = 0.0;
            return response;
        }
    }
    throw FixtureError("no matching unconsumed fixture for request (remaining " +
                       std::to_string(unconsumed) + ")");
}

std::size_t ScriptedBackend::remaining() const {
    std::lock_guard lock(mutex_);
    std::size_t count = 0;
    for (const auto& slot : slots_) {
        count += slot.consumed ? 0 : 1;
    }
    return count;
}

namespace {

// Splits scheme://host[:port][/prefix] into client origin and path prefix.
void split_base_url(const std::string& base_url, std::string& origin, std::string& prefix) {
    const auto scheme_end = base_url.find("://");
    std::size_t path_start = std::string::npos;
    if (scheme_end == std::string::npos) {
        path_start = base_url.find('/');
    } else {
        path_start = base_url.find('/', scheme_end + 3);
    }
    if (path_start == std::string::npos) {
        origin = base_url;
        prefix.clear();
    } else {
        origin = base_url.substr(0, path_start);
        prefix = base_url.substr(path_start);
        while (!prefix.empty() && prefix.back() == '/') {
            prefix.pop_back();
        }
    }
}

bool transient_status(int status) {
    return status == 429 || (status >= 500 && status < 600);
}

} // namespace

HttpBackend::HttpBackend(HttpBackendConfig config) : config_(std::move(config)) {
    if (config_.base_url.empty()) {
        throw ValidationError("http backend requires a base URL");
    }
    split_base_url(config_.base_url, host_, path_prefix_);
}

ChatResponse HttpBackend::complete(const ChatRequest& request) {
    nlohmann::ordered_json body;
    body["model"] = request.model();
    auto messages = nlohmann::ordered_json::array();
    for (const auto& message : request.messages()) {
        messages.push_back({{"role", std::string(to_string(message.role))},
                            {"content", message.content}});
    }
    body["messages"] = std::move(messages);
    body["temperature"] = 0.0;
    if (request.max_tokens()) {
        body["max_tokens"] = *request.max_tokens();
    }
    const std::string payload = body.dump();
    const std::string path = path_prefix_ + "/chat/completions";

    const auto started = std::chrono::steady_clock::now();
    std::string last_failure;
    for (std::uint32_t attempt = 0; attempt <= config_.retries; ++attempt) {
        if (attempt > 0) {
            const double backoff_ms = config_.backoff_initial_ms * double(1u << (attempt - 1));
            std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(backoff_ms));
        }
        httplib::Client client(host_);
        client.set_connection_timeout(std::chrono::duration<double>(config_.timeout_s));
        client.set_read_timeout(std::chrono::duration<double>(config_.timeout_s));
        if (!config_.auth_token.empty()) {
            client.set_bearer_token_auth(config_.auth_token);
        }
        auto result = client.Post(path, payload, "application/json");
        if (!result) {
            last_failure = "connection error: " + httplib::to_string(result.error());
            continue;
        }
        if (result->status < 200 || result->status >= 300) {
            last_failure = "HTTP status " + std::to_string(result->status);
            if (transient_status(result->status)) {
                continue;
            }
            throw TransportError("chat completion failed: " + last_failure);
        }

        const auto elapsed = std::chrono::duration<double, std::milli>(
                                 std::chrono::steady_clock::now() - started)
                                 .count();
        nlohmann::json parsed;
        try {
            parsed = nlohmann::json::parse(result->body);
        } catch (const nlohmann::json::parse_error& e) {
            throw TransportError("malformed response JSON: " + std::string(e.what()));
        }
        if (!parsed.contains("choices") || !parsed["choices"].is_array() ||
            parsed["choices"].empty()) {
            throw TransportError("response carries no choices");
        }
        ChatResponse response;
        try {
            response.content =
                parsed["choices"][0].at("message").at("content").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw TransportError("response missing message content: " + std::string(e.what()));
        }
        if (parsed.contains("usage")) {
            const auto& usage = parsed["usage"];
            response.usage.prompt_tokens = usage.value("prompt_tokens", std::uint64_t{0});
            response.usage.completion_tokens = usage.value("completion_tokens", std::uint64_t{0});
            response.usage.total_tokens = usage.value(
                "total_tokens", response.usage.prompt_tokens + response.usage.completion_tokens);
        }
        response.latency_ms = elapsed;
        return response;
    }
    throw TransportError("chat completion failed after " +
                         std::to_string(config_.retries + 1) + " attempts (" + last_failure + ")");
}

ChatResponse RecordingBackend::complete(const ChatRequest& request) {
    {
        std::lock_guard lock(mutex_);
        requests_.push_back(request);
    }
    return inner_.complete(request);
}

} // namespace ctrag
