#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "ctrag/config.hpp"
#include "ctrag/errors.hpp"

using namespace ctrag;

namespace {

std::filesystem::path write_temp(const std::string& name, const std::string& text) {
    const auto path = std::filesystem::temp_directory_path() / name;
    std::ofstream out(path);
    out << text;
    return path;
}

} // namespace

TEST_CASE("minimal config fills the documented defaults") {
    const auto fixture = write_temp("ctrag_cfg_fixture.jsonl", "");
    const auto path = write_temp("ctrag_cfg_min.json",
                                 R"({"backend":{"kind":"scripted","fixture":")" +
                                     fixture.string() + R"("}})");
    const PipelineConfig config = load_config(path);
    CHECK(config.run.k == 3);
    CHECK(config.run.parse_retries == 2);
    CHECK(config.run.mode == AgentMode::template_based);
    CHECK_FALSE(config.run.max_steps.has_value());
    CHECK(config.backend.kind == "scripted");
    std::filesystem::remove(path);
    std::filesystem::remove(fixture);
}

TEST_CASE("k = 0 is rejected with the field path") {
    const auto fixture = write_temp("ctrag_cfg_fixture.jsonl", "");
    const auto path = write_temp(
        "ctrag_cfg_bad_k.json", R"({"run":{"k":0},"backend":{"kind":"scripted","fixture":")" +
                                    fixture.string() + R"("}})");
    CHECK_THROWS_WITH_AS(load_config(path), doctest::Contains("config.run.k"),
                         ValidationError);
    std::filesystem::remove(path);
    std::filesystem::remove(fixture);
}

TEST_CASE("nonzero temperature in the config is rejected") {
    const auto fixture = write_temp("ctrag_cfg_fixture.jsonl", "");
    const auto path = write_temp("ctrag_cfg_temp.json",
                                 R"({"run":{"temperature":0.3},)"
                                 R"("backend":{"kind":"scripted","fixture":")" +
                                     fixture.string() + R"("}})");
    CHECK_THROWS_WITH_AS(load_config(path), doctest::Contains("temperature"),
                         ValidationError);
    std::filesystem::remove(path);
    std::filesystem::remove(fixture);
}

TEST_CASE("environment variables override endpoint and auth fields") {
    const auto path = write_temp(
        "ctrag_cfg_env.json",
        R"({"backend":{"kind":"http","endpoint":"http://configured:1/v1","auth_token":"from-file"}})");
    setenv("CTRAG_ENDPOINT", "http://overridden:2/v1", 1);
    setenv("CTRAG_AUTH_TOKEN", "from-env", 1);
    setenv("CTRAG_TIMEOUT_S", "7.5", 1);
    const PipelineConfig config = load_config(path);
    unsetenv("CTRAG_ENDPOINT");
    unsetenv("CTRAG_AUTH_TOKEN");
    unsetenv("CTRAG_TIMEOUT_S");
    CHECK(config.backend.http.base_url == "http://overridden:2/v1");
    CHECK(config.backend.http.auth_token == "from-env");
    CHECK(config.backend.http.timeout_s == 7.5);
    std::filesystem::remove(path);
}

TEST_CASE("parse errors report line and column") {
    const auto path = write_temp("ctrag_cfg_broken.json", "{\n  \"run\": {\n    oops\n}}");
    try {
        load_config(path);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        const std::string what = e.what();
        CHECK(what.find("line 3") != std::string::npos);
        CHECK(what.find("column") != std::string::npos);
    }
    std::filesystem::remove(path);
}

TEST_CASE("referenced files must exist at load") {
    const auto path = write_temp(
        "ctrag_cfg_missing.json",
        R"({"registry":"/nonexistent/registry.json","backend":{"kind":"http","endpoint":"http://x/v1"}})");
    CHECK_THROWS_WITH_AS(load_config(path), doctest::Contains("does not exist"),
                         ValidationError);
    std::filesystem::remove(path);
}

TEST_CASE("scripted backend requires a fixture path") {
    const auto path = write_temp("ctrag_cfg_nofix.json", R"({"backend":{"kind":"scripted"}})");
    CHECK_THROWS_WITH_AS(load_config(path), doctest::Contains("fixture"), ValidationError);
    std::filesystem::remove(path);
}

TEST_CASE("digests are stable and content-sensitive") {
    CHECK(hex_digest("abc") == hex_digest("abc"));
    CHECK(hex_digest("abc") != hex_digest("abd"));
    CHECK(hex_digest("").size() == 16);
    CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
}

TEST_CASE("manifests land in the output directory") {
    const auto dir = std::filesystem::temp_directory_path() / "ctrag_manifest_dir";
    std::filesystem::remove_all(dir);
    RunManifest manifest;
    manifest.command = "agent run";
    manifest.schema_id = "ctrag-tools-v1";
    manifest.k = 3;
    manifest.mode = "template";
    manifest.backend_kind = "scripted";
    manifest.config_digest = hex_digest("cfg");
    write_manifest(manifest, dir);
    std::ifstream in(dir / "manifest.json");
    REQUIRE(in.good());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(text.find("\"schema_id\": \"ctrag-tools-v1\"") != std::string::npos);
    CHECK(text.find("\"k\": 3") != std::string::npos);
    CHECK(text.find("\"backend_kind\": \"scripted\"") != std::string::npos);
    std::filesystem::remove_all(dir);
}
