#include "ctrag/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ctrag/errors.hpp"

namespace ctrag {

namespace {

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open \"" + path.string() + "\"");
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

// nlohmann reports byte offsets; configs deserve line/column.
[[noreturn]] void rethrow_with_position(const std::string& text,
                                        const nlohmann::json::parse_error& e,
                                        const std::string& context) {
    std::size_t line = 1;
    std::size_t column = 1;
    const std::size_t limit = std::min(text.size(), e.byte > 0 ? e.byte - 1 : 0);
    for (std::size_t i = 0; i < limit; ++i) {
        if (text[i] == '\n') {
            ++line;
            column = 1;
        } else {
            ++column;
        }
    }
    throw FormatError(context + " parse error at line " + std::to_string(line) + ", column " +
                      std::to_string(column) + ": " + e.what());
}

void require_exists(const std::filesystem::path& path, const std::string& field) {
    if (!std::filesystem::exists(path)) {
        throw ValidationError("config." + field + ": file \"" + path.string() +
                              "\" does not exist");
    }
}

} // namespace

PipelineConfig load_config(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        rethrow_with_position(text, e, "config");
    }

    PipelineConfig config;
    if (j.contains("registry")) {
        config.registry_path = std::filesystem::path(j.at("registry").get<std::string>());
        require_exists(*config.registry_path, "registry");
    }
    if (j.contains("index")) {
        config.index_path = std::filesystem::path(j.at("index").get<std::string>());
        require_exists(*config.index_path, "index");
    }
    if (j.contains("lexicon")) {
        config.lexicon_path = std::filesystem::path(j.at("lexicon").get<std::string>());
        require_exists(*config.lexicon_path, "lexicon");
    }
    if (j.contains("query")) {
        config.query = j.at("query").get<std::string>();
    }
    if (j.contains("classifier_endpoint")) {
        config.classifier_endpoint = j.at("classifier_endpoint").get<std::string>();
    }

    if (j.contains("backend")) {
        const auto& b = j.at("backend");
        config.backend.kind = b.value("kind", "scripted");
        if (config.backend.kind != "scripted" && config.backend.kind != "http") {
            throw ValidationError("config.backend.kind: must be \"scripted\" or \"http\"");
        }
        config.backend.model = b.value("model", "default");
        if (b.contains("fixture")) {
            config.backend.fixture_path = b.at("fixture").get<std::string>();
        }
        config.backend.http.base_url = b.value("endpoint", "");
        config.backend.http.auth_token = b.value("auth_token", "");
        config.backend.http.timeout_s = b.value("timeout_s", 30.0);
        config.backend.http.retries = b.value("retries", 2u);
        if (b.contains("backoff_initial_ms")) {
            config.backend.http.backoff_initial_ms = b.at("backoff_initial_ms").get<double>();
        }
    }

    if (j.contains("run")) {
        const auto& r = j.at("run");
        if (r.contains("mode")) {
            config.run.mode = agent_mode_from_string(r.at("mode").get<std::string>());
        }
        if (r.contains("k")) {
            const auto k = r.at("k").get<std::int64_t>();
            if (k < 1) {
                throw ValidationError("config.run.k: must be >= 1");
            }
            config.run.k = static_cast<std::size_t>(k);
        }
        if (r.contains("max_steps")) {
            const auto steps = r.at("max_steps").get<std::int64_t>();
            if (steps < 1) {
                throw ValidationError("config.run.max_steps: must be >= 1");
            }
            config.run.max_steps = static_cast<std::size_t>(steps);
        }
        if (r.contains("parse_retries")) {
            const auto retries = r.at("parse_retries").get<std::int64_t>();
            if (retries < 0) {
                throw ValidationError("config.run.parse_retries: must be >= 0");
            }
            config.run.parse_retries = static_cast<std::uint32_t>(retries);
        }
        if (r.contains("model")) {
            config.run.model = r.at("model").get<std::string>();
        }
        if (r.contains("template_text")) {
            config.run.template_text = r.at("template_text").get<std::string>();
        }
        if (r.contains("temperature") && r.at("temperature").get<double>() != 0.0) {
            throw ValidationError("config.run.temperature: must be 0");
        }
    }
    config.backend.model = config.run.model.empty() ? config.backend.model : config.run.model;

    if (const char* endpoint = std::getenv("CTRAG_ENDPOINT")) {
        config.backend.http.base_url = endpoint;
    }
    if (const char* token = std::getenv("CTRAG_AUTH_TOKEN")) {
        config.backend.http.auth_token = token;
    }
    if (const char* timeout = std::getenv("CTRAG_TIMEOUT_S")) {
        try {
            config.backend.http.timeout_s = std::stod(timeout);
        } catch (const std::exception&) {
            throw ValidationError("CTRAG_TIMEOUT_S: not a number");
        }
    }

    if (config.backend.kind == "scripted") {
        if (config.backend.fixture_path.empty()) {
            throw ValidationError("config.backend.fixture: required for the scripted backend");
        }
        require_exists(config.backend.fixture_path, "backend.fixture");
    } else if (config.backend.http.base_url.empty()) {
        throw ValidationError("config.backend.endpoint: required for the http backend");
    }
    return config;
}

std::unique_ptr<ChatBackend> make_backend(const BackendConfig& config) {
    if (config.kind == "scripted") {
        return ScriptedBackend::from_file(config.fixture_path);
    }
    return std::make_unique<HttpBackend>(config.http);
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t hash = 0xcbf29ce484222325ull;
    for (const char c : bytes) {
        hash ^= static_cast<std::uint8_t>(c);
        hash *= 0x100000001b3ull;
    }
    return hash;
}

std::string hex_digest(std::string_view bytes) {
    static constexpr char digits[] = "0123456789abcdef";
    std::uint64_t hash = fnv1a64(bytes);
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[hash & 0xF];
        hash >>= 4;
    }
    return out;
}

void write_manifest(const RunManifest& manifest, const std::filesystem::path& out_dir) {
    nlohmann::ordered_json j;
    j["tool_version"] = std::string(kToolVersion);
    j["command"] = manifest.command;
    j["schema_id"] = manifest.schema_id;
    j["index_stats_digest"] = manifest.index_stats_digest;
    j["k"] = manifest.k ? nlohmann::ordered_json(*manifest.k) : nlohmann::ordered_json(nullptr);
    j["mode"] = manifest.mode;
    j["backend_kind"] = manifest.backend_kind;
    j["config_digest"] = manifest.config_digest;

    std::filesystem::create_directories(out_dir);
    std::ofstream out(out_dir / "manifest.json");
    if (!out) {
        throw IoError("cannot write manifest under \"" + out_dir.string() + "\"");
    }
    out << j.dump(2) << '\n';
}

std::string config_file_digest(const std::filesystem::path& path) {
    if (path.empty()) {
        return hex_digest("");
    }
    return hex_digest(read_file(path));
}

std::string index_stats_digest(const std::filesystem::path& index_path) {
    std::ifstream in(index_path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open index \"" + index_path.string() + "\"");
    }
    std::string first_line;
    std::getline(in, first_line);
    return hex_digest(first_line);
}

} // namespace ctrag
