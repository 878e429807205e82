// End-to-end tests that drive the ctrag binary (path in CTRAG_BIN).
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ctrag/agent.hpp"
#include "ctrag/features.hpp"
#include "ctrag/phantom.hpp"
#include "ctrag/retrieval.hpp"
#include "ctrag/snippets.hpp"

namespace fs = std::filesystem;
using namespace ctrag;

namespace {

struct CommandResult {
    int exit_code = -1;
    std::string output;
};

CommandResult run_cli(const std::string& args) {
    const char* binary = std::getenv("CTRAG_BIN");
    REQUIRE_MESSAGE(binary != nullptr, "CTRAG_BIN must point at the ctrag binary");
    const fs::path log = fs::temp_directory_path() / "ctrag_cli_log.txt";
    const std::string command =
        std::string(binary) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(command.c_str());
    CommandResult result;
    result.exit_code = WEXITSTATUS(status);
    std::ifstream in(log);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    result.output = buffer.str();
    return result;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE_MESSAGE(in.good(), "missing file: ", path.string());
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

void write_file(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    out << text;
}

// One self-contained workspace: phantom spec, registry-backed index built from
// the phantom's own features, scripted fixture, and config.
struct CliWorld {
    fs::path root;
    fs::path spec_path;
    fs::path study_dir;
    fs::path index_path;
    fs::path fixture_path;
    fs::path config_path;

    CliWorld() {
        root = fs::temp_directory_path() / "ctrag_cli_world";
        fs::remove_all(root);
        fs::create_directories(root);
        spec_path = root / "phantom.json";
        study_dir = root / "study";
        index_path = root / "index.jsonl";
        fixture_path = root / "fixture.jsonl";
        config_path = root / "config.json";

        PhantomSpec spec;
        spec.dims = {48, 48, 48};
        spec.spacing_mm = {1.0, 1.0, 1.0};
        spec.organs.push_back(EllipsoidSpec{"lung_left", {33, 24, 24}, {9, 11, 14}, -800.0});
        spec.organs.push_back(EllipsoidSpec{"lung_right", {15, 24, 24}, {9, 11, 14}, -800.0});
        spec.organs.push_back(EllipsoidSpec{"heart", {24, 28, 20}, {6, 6, 8}, 40.0});
        LesionSpec lesion;
        lesion.pathology_id = "PleuralEffusion";
        lesion.shape =
            EllipsoidSpec{"pleural_effusion_region", {38, 24, 22}, {5, 6, 8}, 10.0};
        lesion.intended_laterality = Laterality::left;
        spec.lesions.push_back(lesion);
        save_phantom_spec(spec, spec_path);

        const StudyBundle study = make_phantom(spec);
        const ToolRegistry registry = default_registry();
        const MidPlanes planes = estimate_midplanes(study);
        const FeatureVector effusion = run_tool(study, registry.at("PleuralEffusion"), planes);

        auto entry = [&](std::uint64_t id, double jitter, const std::string& snippet) {
            ReferenceEntry e;
            e.entry_id = id;
            e.pathology_id = "PleuralEffusion";
            e.features = effusion;
            for (std::size_t i = 0; i < e.features.values.size(); ++i) {
                if (!e.features.undefined[i]) {
                    e.features.values[i] += jitter * static_cast<double>(i + 1);
                }
            }
            e.snippet = snippet;
            e.source_id = "ref" + std::to_string(id);
            return e;
        };
        const Index index = Index::build({
            entry(0, 0.0, "Left pleural effusion is observed."),
            entry(1, 3.0, "Minimal right pleural effusion."),
            entry(2, 7.0, "No sign of Pleural effusion was found in the scan."),
        });
        index.save_file(index_path);

        write_file(fixture_path,
                   R"({"match":"*","response":"{\"action\":\"PleuralEffusion\",\"rationale\":\"check\"}"})"
                   "\n"
                   R"({"match":"*","response":"{\"action\":\"STOP\",\"rationale\":\"done\"}"})"
                   "\n"
                   R"({"match":"*","response":"Left pleural effusion is observed."})"
                   "\n");

        nlohmann::ordered_json config;
        config["index"] = index_path.string();
        config["backend"] = {{"kind", "scripted"}, {"fixture", fixture_path.string()}};
        config["run"] = {{"mode", "template"}, {"k", 3}};
        write_file(config_path, config.dump(2));
    }
};

} // namespace

TEST_CASE("unknown subcommands exit 1 with usage text") {
    const auto result = run_cli("definitely-not-a-command");
    CHECK(result.exit_code == 1);
    CHECK(result.output.find("--help") != std::string::npos);
}

TEST_CASE("missing required flags exit 1") {
    const auto result = run_cli("phantom make");
    CHECK(result.exit_code == 1);
    CHECK(result.output.find("--spec") != std::string::npos);
}

TEST_CASE("refine mode without a draft exits 1 naming --draft") {
    CliWorld world;
    const auto result = run_cli("agent run --study " + world.study_dir.string() +
                                " --config " + world.config_path.string() +
                                " --mode refine --out " + (world.root / "out").string());
    CHECK(result.exit_code == 1);
    CHECK(result.output.find("--draft") != std::string::npos);
}

TEST_CASE("phantom make then features extract produces one JSON per tool") {
    CliWorld world;
    auto result = run_cli("phantom make --spec " + world.spec_path.string() + " --study-id s1" +
                          " --out " + world.study_dir.string());
    CHECK(result.exit_code == 0);
    CHECK(fs::exists(world.study_dir / "volume.mvol"));
    CHECK(fs::exists(world.study_dir / "study.json"));
    CHECK(fs::exists(world.study_dir / "manifest.json"));

    const fs::path features_dir = world.root / "features_out";
    result = run_cli("features extract --study " + world.study_dir.string() + " --out " +
                     features_dir.string());
    CHECK(result.exit_code == 0);
    for (const auto id : pathology_ids()) {
        CHECK(fs::exists(features_dir / "features" / (std::string(id) + ".json")));
    }
}

TEST_CASE("index build from an entries file, then query") {
    CliWorld world;
    // Entries JSONL straight from the prebuilt index's entry lines.
    std::string entries;
    {
        std::ifstream in(world.index_path);
        std::string line;
        std::getline(in, line); // drop the stats line
        while (std::getline(in, line)) {
            entries += line + "\n";
        }
    }
    const fs::path entries_path = world.root / "entries.jsonl";
    write_file(entries_path, entries);

    const fs::path out_dir = world.root / "index_build";
    auto result = run_cli("index build --entries " + entries_path.string() + " --out " +
                          out_dir.string());
    CHECK(result.exit_code == 0);
    CHECK(fs::exists(out_dir / "index.jsonl"));
    CHECK(read_file(out_dir / "index.jsonl") == read_file(world.index_path));

    // Query with one of the stored vectors.
    const StudyBundle study = make_phantom(load_phantom_spec(world.spec_path));
    const ToolRegistry registry = default_registry();
    const FeatureVector fv =
        run_tool(study, registry.at("PleuralEffusion"), estimate_midplanes(study));
    const fs::path fv_path = world.root / "query.json";
    write_file(fv_path, feature_vector_to_json(fv));

    result = run_cli("index query --index " + (out_dir / "index.jsonl").string() +
                     " --pathology PleuralEffusion --features " + fv_path.string() + " -k 2");
    CHECK(result.exit_code == 0);
    CHECK(result.output.find("Left pleural effusion is observed.") != std::string::npos);

    result = run_cli("index query --index " + (out_dir / "index.jsonl").string() +
                     " --pathology Nope --features " + fv_path.string());
    CHECK(result.exit_code == 2);
    CHECK(result.output.find("unknown pathology") != std::string::npos);
}

TEST_CASE("index build joins snippets with extracted features") {
    CliWorld world;
    REQUIRE(run_cli("phantom make --spec " + world.spec_path.string() +
                    " --study-id s1 --out " + world.study_dir.string())
                .exit_code == 0);
    const fs::path features_root = world.root / "features";
    REQUIRE(run_cli("features extract --study " + world.study_dir.string() + " --out " +
                    (features_root / "s1").string())
                .exit_code == 0);

    write_file(world.root / "join_snippets.jsonl",
               R"({"source_id":"s1","pathology":"PleuralEffusion","text":"Left pleural effusion is observed.","canonical_negative":false})"
               "\n"
               R"({"source_id":"s1","pathology":"Cardiomegaly","text":"Heart size is normal.","canonical_negative":false})"
               "\n");
    const fs::path out_dir = world.root / "joined_index";
    const auto result = run_cli("index build --snippets " +
                                (world.root / "join_snippets.jsonl").string() +
                                " --features-root " + features_root.string() + " --out " +
                                out_dir.string());
    CHECK(result.exit_code == 0);

    const Index index = Index::load_file(out_dir / "index.jsonl");
    CHECK(index.has_partition("PleuralEffusion"));
    CHECK(index.has_partition("Cardiomegaly"));
    CHECK(index.partition_size("PleuralEffusion") == 1);
    // Entry ids are assigned densely in source order, so the single entry is 0.
    const StudyBundle study = load_study(world.study_dir);
    const ToolRegistry registry = default_registry();
    const FeatureVector fv =
        run_tool(study, registry.at("PleuralEffusion"), estimate_midplanes(study));
    const auto neighbors = index.knn_query("PleuralEffusion", fv, 1);
    REQUIRE(neighbors.neighbors.size() == 1);
    CHECK(neighbors.neighbors[0].entry_id == 0);
    CHECK(neighbors.neighbors[0].snippet == "Left pleural effusion is observed.");
}

TEST_CASE("agent run end-to-end is byte-replayable") {
    CliWorld world;
    REQUIRE(run_cli("phantom make --spec " + world.spec_path.string() + " --out " +
                    world.study_dir.string())
                .exit_code == 0);

    const fs::path out1 = world.root / "run1";
    const fs::path out2 = world.root / "run2";
    auto result = run_cli("agent run --study " + world.study_dir.string() + " --config " +
                          world.config_path.string() + " --out " + out1.string());
    CHECK(result.exit_code == 0);
    CHECK(read_file(out1 / "report.txt") == "Left pleural effusion is observed.\n");

    result = run_cli("agent run --study " + world.study_dir.string() + " --config " +
                     world.config_path.string() + " --out " + out2.string());
    CHECK(result.exit_code == 0);
    CHECK(read_file(out1 / "report.txt") == read_file(out2 / "report.txt"));
    CHECK(read_file(out1 / "trace.json") == read_file(out2 / "trace.json"));

    const auto manifest = nlohmann::json::parse(read_file(out1 / "manifest.json"));
    CHECK(manifest.at("schema_id") == "ctrag-tools-v1");
    CHECK(manifest.at("k") == 3);
    CHECK(manifest.at("mode") == "template");
    CHECK(manifest.at("backend_kind") == "scripted");
    CHECK(manifest.at("index_stats_digest").get<std::string>().size() == 16);
}

TEST_CASE("eval cohort, ksweep, and sensitivity") {
    CliWorld world;
    REQUIRE(run_cli("phantom make --spec " + world.spec_path.string() + " --study-id c1 --out " +
                    world.study_dir.string())
                .exit_code == 0);

    // Per-study fixture so the cohort stays deterministic.
    const fs::path gold_path = world.root / "gold.json";
    nlohmann::ordered_json gold;
    gold["labels"]["PleuralEffusion"] = true;
    gold["laterality"] = "left";
    write_file(gold_path, gold.dump());
    const fs::path reference_path = world.root / "reference.txt";
    write_file(reference_path, "Left pleural effusion is observed.");

    nlohmann::ordered_json line;
    line["study_dir"] = world.study_dir.string();
    line["gold_labels_path"] = gold_path.string();
    line["reference_report_path"] = reference_path.string();
    line["fixture_path"] = world.fixture_path.string();
    const fs::path manifest_path = world.root / "cohort.jsonl";
    write_file(manifest_path, line.dump() + "\n");

    const fs::path out_dir = world.root / "cohort_out";
    auto result = run_cli("eval cohort --manifest " + manifest_path.string() + " --config " +
                          world.config_path.string() + " --out " + out_dir.string());
    CHECK(result.exit_code == 0);
    CHECK(fs::exists(out_dir / "cohort.csv"));
    CHECK(fs::exists(out_dir / "summary.json"));
    CHECK(fs::exists(out_dir / "reports" / "c1.txt"));
    CHECK(fs::exists(out_dir / "traces" / "c1.json"));
    const auto summary = nlohmann::json::parse(read_file(out_dir / "summary.json"));
    CHECK(summary.at("per_pathology").at("PleuralEffusion").at("f1") == 1.0);
    CHECK(summary.at("laterality_f1") == 1.0);

    // k-sweep over a singleton cohort: identical metrics per k row.
    const fs::path sweep_dir = world.root / "sweep_out";
    result = run_cli("eval ksweep --manifest " + manifest_path.string() + " --config " +
                     world.config_path.string() + " --ks 1,3 --out " + sweep_dir.string());
    CHECK(result.exit_code == 0);
    const std::string csv = read_file(sweep_dir / "ksweep.csv");
    CHECK(csv.find("k,macro_f1,bleu1,rouge_l,meteor\n") == 0);
    CHECK(csv.find("\n1,") != std::string::npos);
    CHECK(csv.find("\n3,") != std::string::npos);

    // Sensitivity on two synthetic summaries plus an oversegmentation flag set.
    const fs::path full_path = world.root / "full.json";
    const fs::path subset_path = world.root / "subset.json";
    write_file(full_path, read_file(out_dir / "summary.json"));
    write_file(subset_path, read_file(out_dir / "summary.json"));
    const fs::path volumes_path = world.root / "volumes.json";
    write_file(volumes_path, R"({"a": 1000.0, "b": 2000.0, "c": 1500.0})");

    const fs::path sens_dir = world.root / "sens_out";
    result = run_cli("eval sensitivity --full " + full_path.string() + " --subset " +
                     subset_path.string() + " --lung-volumes " + volumes_path.string() +
                     " --out " + sens_dir.string());
    CHECK(result.exit_code == 0);
    const auto sens = nlohmann::json::parse(read_file(sens_dir / "sensitivity.json"));
    CHECK(sens.at("delta_macro_f1_all") == 0.0);
    CHECK(sens.at("flagged") == nlohmann::json::array({"b"}));
}

TEST_CASE("snippets extract and verify through the CLI") {
    CliWorld world;
    // Prompt set file from the built-in sample.
    const fs::path prompts_path = world.root / "prompt_set.json";
    save_prompt_set(sample_prompt_set(), prompts_path);

    write_file(world.root / "reports.jsonl",
               R"({"source_id":"r1","report":"Findings: calcified plaques in the aorta."})"
               "\n"
               R"({"source_id":"r2","report":"Findings: clear lungs."})"
               "\n");
    write_file(world.root / "snip_fixture.jsonl",
               R"({"match":"calcified plaques","response":"There are calcified atheroma plaques in the aorta."})"
               "\n"
               R"({"match":"clear lungs","response":"No sign of Arterial wall calcification was found in the scan."})"
               "\n");
    nlohmann::ordered_json config;
    config["backend"] = {{"kind", "scripted"},
                         {"fixture", (world.root / "snip_fixture.jsonl").string()}};
    const fs::path config_path = world.root / "snip_config.json";
    write_file(config_path, config.dump());

    const fs::path out_dir = world.root / "snips_out";
    auto result = run_cli("snippets extract --reports " +
                          (world.root / "reports.jsonl").string() + " --prompt-set " +
                          prompts_path.string() + " --config " + config_path.string() +
                          " --out " + out_dir.string());
    CHECK(result.exit_code == 0);
    const std::string snippets_text = read_file(out_dir / "snippets.jsonl");
    CHECK(snippets_text.find("calcified atheroma plaques") != std::string::npos);
    CHECK(snippets_text.find("\"canonical_negative\":true") != std::string::npos);

    write_file(world.root / "labels.json", R"({"r1": true, "r2": false})");
    const fs::path verify_dir = world.root / "verify_out";
    result = run_cli("snippets verify --snippets " + (out_dir / "snippets.jsonl").string() +
                     " --labels " + (world.root / "labels.json").string() + " --out " +
                     verify_dir.string());
    CHECK(result.exit_code == 0);
    const auto verification =
        nlohmann::json::parse(read_file(verify_dir / "verification.json"));
    CHECK(verification.at("template_f1").at("ArterialWallCalcification").at("f1") == 1.0);
}

TEST_CASE("parallel cohort runs are deterministic with per-study fixtures") {
    CliWorld world;
    const fs::path study_a = world.root / "study_a";
    const fs::path study_b = world.root / "study_b";
    REQUIRE(run_cli("phantom make --spec " + world.spec_path.string() + " --study-id a --out " +
                    study_a.string())
                .exit_code == 0);
    REQUIRE(run_cli("phantom make --spec " + world.spec_path.string() + " --study-id b --out " +
                    study_b.string())
                .exit_code == 0);

    const fs::path gold_path = world.root / "gold.json";
    write_file(gold_path, R"({"labels":{"PleuralEffusion":true},"laterality":"left"})");
    const fs::path reference_path = world.root / "reference.txt";
    write_file(reference_path, "Left pleural effusion is observed.");

    std::string manifest;
    for (const auto& dir : {study_a, study_b}) {
        nlohmann::ordered_json line;
        line["study_dir"] = dir.string();
        line["gold_labels_path"] = gold_path.string();
        line["reference_report_path"] = reference_path.string();
        line["fixture_path"] = world.fixture_path.string();
        manifest += line.dump() + "\n";
    }
    const fs::path manifest_path = world.root / "parallel.jsonl";
    write_file(manifest_path, manifest);

    const fs::path out1 = world.root / "parallel1";
    const fs::path out2 = world.root / "parallel2";
    for (const auto& out : {out1, out2}) {
        const auto result =
            run_cli("eval cohort --manifest " + manifest_path.string() + " --config " +
                    world.config_path.string() + " --jobs 2 --out " + out.string());
        CHECK(result.exit_code == 0);
    }
    CHECK(read_file(out1 / "cohort.csv") == read_file(out2 / "cohort.csv"));
    CHECK(read_file(out1 / "summary.json") == read_file(out2 / "summary.json"));
    CHECK(read_file(out1 / "traces" / "a.json") == read_file(out2 / "traces" / "a.json"));
}

TEST_CASE("config validation failures exit 1") {
    CliWorld world;
    const fs::path bad_config = world.root / "bad.json";
    write_file(bad_config, R"({"run":{"k":0},"backend":{"kind":"http","endpoint":"http://x"}})");
    const auto result = run_cli("agent run --study " + world.study_dir.string() +
                                " --config " + bad_config.string() + " --out " +
                                (world.root / "x").string());
    CHECK(result.exit_code == 1);
    CHECK(result.output.find("config.run.k") != std::string::npos);
}
