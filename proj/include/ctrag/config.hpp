#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "ctrag/agent.hpp"
#include "ctrag/chat.hpp"

namespace ctrag {

struct BackendConfig {
    std::string kind = "scripted"; // scripted | http
    std::filesystem::path fixture_path;
    HttpBackendConfig http;
    std::string model = "default";
};

/// Everything a pipeline run needs, loaded from one JSON file. Environment
/// variables CTRAG_ENDPOINT, CTRAG_AUTH_TOKEN, and CTRAG_TIMEOUT_S override
/// the corresponding backend fields.
struct PipelineConfig {
    std::optional<std::filesystem::path> registry_path; // absent: builtin default
    std::optional<std::filesystem::path> index_path;
    std::optional<std::filesystem::path> lexicon_path;
    BackendConfig backend;
    RunConfig run;
    std::string query = "Generate the findings section of the chest CT report.";
    /// When set, cohort label derivation POSTs to this classifier instead of
    /// using the rule-based lexicon.
    std::string classifier_endpoint;
};

PipelineConfig load_config(const std::filesystem::path& path);

std::unique_ptr<ChatBackend> make_backend(const BackendConfig& config);

/// FNV-1a 64-bit digest, hex-encoded; stamps configs and index stats into
/// run manifests.
std::uint64_t fnv1a64(std::string_view bytes);
std::string hex_digest(std::string_view bytes);

inline constexpr std::string_view kToolVersion = "0.1.0";

struct RunManifest {
    std::string command;
    std::string schema_id;
    std::string index_stats_digest;
    std::optional<std::size_t> k;
    std::string mode;
    std::string backend_kind;
    std::string config_digest;
};

void write_manifest(const RunManifest& manifest, const std::filesystem::path& out_dir);

/// Digest of the file the config was loaded from (empty path -> digest of "").
std::string config_file_digest(const std::filesystem::path& path);

/// Digest of an index file's stats line.
std::string index_stats_digest(const std::filesystem::path& index_path);

} // namespace ctrag
