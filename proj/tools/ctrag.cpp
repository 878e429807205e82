// ctrag: hypothesis-driven CT report generation pipeline.
//
// Subcommands wire the library into the full workflow: phantom generation,
// feature extraction, reference-index construction, snippet extraction and
// verification, agent runs, and cohort evaluation. Every subcommand writes a
// run manifest under --out so runs can be replayed byte-for-byte.

#include <atomic>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ctrag/agent.hpp"
#include "ctrag/config.hpp"
#include "ctrag/errors.hpp"
#include "ctrag/features.hpp"
#include "ctrag/metrics.hpp"
#include "ctrag/phantom.hpp"
#include "ctrag/retrieval.hpp"
#include "ctrag/snippets.hpp"
#include "ctrag/volume.hpp"

namespace {

using namespace ctrag;

/// Flag-contract and config failures exit 1; runtime failures exit 2.
struct UsageFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

PipelineConfig load_config_or_usage(const std::filesystem::path& path) {
    try {
        return load_config(path);
    } catch (const ValidationError& e) {
        throw UsageFailure(e.what());
    } catch (const FormatError& e) {
        throw UsageFailure(e.what());
    }
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open \"" + path.string() + "\"");
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write \"" + path.string() + "\"");
    }
    out << text;
}

ToolRegistry registry_for(const PipelineConfig& config) {
    if (config.registry_path) {
        return load_registry(*config.registry_path);
    }
    return default_registry();
}

Lexicon lexicon_for(const PipelineConfig& config) {
    if (config.lexicon_path) {
        return load_lexicon(*config.lexicon_path);
    }
    return default_lexicon();
}

// -- index build inputs --------------------------------------------------------

FeatureVector features_from_object(const nlohmann::ordered_json& j, const ToolSpec& tool) {
    FeatureVector fv;
    fv.schema_id = tool.schema_id;
    fv.pathology_id = tool.pathology_id;
    for (const auto& [name, value] : j.at("features").items()) {
        fv.names.push_back(name);
        fv.values.push_back(value.get<double>());
        fv.undefined.push_back(false);
    }
    for (const auto& name : j.value("undefined", nlohmann::ordered_json::array())) {
        const auto it = std::find(fv.names.begin(), fv.names.end(), name.get<std::string>());
        if (it != fv.names.end()) {
            fv.undefined[static_cast<std::size_t>(it - fv.names.begin())] = true;
        }
    }
    if (fv.names != tool.feature_list) {
        throw ValidationError("entry features do not match the registry schema for \"" +
                              tool.pathology_id + "\"");
    }
    return fv;
}

std::vector<ReferenceEntry> parse_entries_jsonl(const std::filesystem::path& path,
                                                const ToolRegistry& registry) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open entries \"" + path.string() + "\"");
    }
    std::vector<ReferenceEntry> entries;
    std::map<std::string, std::uint64_t> next_id;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::ordered_json j;
        try {
            j = nlohmann::ordered_json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError("entries line " + std::to_string(line_no) + ": " + e.what());
        }
        ReferenceEntry entry;
        entry.pathology_id = j.at("pathology").get<std::string>();
        const ToolSpec& tool = registry.at(entry.pathology_id);
        entry.features = features_from_object(j, tool);
        entry.snippet = j.at("snippet").get<std::string>();
        entry.source_id = j.value("source_id", std::string{});
        entry.entry_id = j.contains("entry_id") ? j.at("entry_id").get<std::uint64_t>()
                                                : next_id[entry.pathology_id];
        next_id[entry.pathology_id] =
            std::max(next_id[entry.pathology_id], entry.entry_id + 1);
        entries.push_back(std::move(entry));
    }
    return entries;
}

// Joins extracted snippets with their studies' feature vectors
// (<features_root>/<source_id>/features/<pathology>.json). Entry ids are
// assigned in source order per partition.
std::vector<ReferenceEntry> entries_from_snippets(const std::filesystem::path& snippets_path,
                                                  const std::filesystem::path& features_root,
                                                  const ToolRegistry& registry) {
    const auto snippets = load_snippets(snippets_path);
    std::vector<ReferenceEntry> entries;
    std::map<std::string, std::uint64_t> next_id;
    for (const auto& snippet : snippets) {
        const auto feature_path =
            features_root / snippet.source_id / "features" / (snippet.pathology_id + ".json");
        registry.at(snippet.pathology_id); // validates the pathology
        ReferenceEntry entry;
        entry.pathology_id = snippet.pathology_id;
        entry.features = feature_vector_from_json(read_text_file(feature_path));
        entry.snippet = snippet.text;
        entry.source_id = snippet.source_id;
        entry.entry_id = next_id[snippet.pathology_id]++;
        entries.push_back(std::move(entry));
    }
    return entries;
}

// -- cohort runner ---------------------------------------------------------------

struct CohortCaseSpec {
    std::filesystem::path study_dir;
    std::filesystem::path gold_labels_path;
    std::filesystem::path reference_report_path;
    std::filesystem::path draft_path;   // optional
    std::filesystem::path fixture_path; // optional scripted fixture per study
};

std::vector<CohortCaseSpec> load_cohort_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open cohort manifest \"" + path.string() + "\"");
    }
    std::vector<CohortCaseSpec> specs;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError("cohort manifest line " + std::to_string(line_no) + ": " +
                              e.what());
        }
        CohortCaseSpec spec;
        spec.study_dir = j.at("study_dir").get<std::string>();
        spec.gold_labels_path = j.at("gold_labels_path").get<std::string>();
        spec.reference_report_path = j.at("reference_report_path").get<std::string>();
        if (j.contains("draft_path")) spec.draft_path = j.at("draft_path").get<std::string>();
        if (j.contains("fixture_path")) spec.fixture_path = j.at("fixture_path").get<std::string>();
        specs.push_back(std::move(spec));
    }
    if (specs.empty()) {
        throw ValidationError("cohort manifest \"" + path.string() + "\" lists no cases");
    }
    return specs;
}

struct GoldLabels {
    LabelSet labels;
    std::optional<Laterality> laterality;
};

GoldLabels load_gold_labels(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("gold labels \"" + path.string() + "\": " + e.what());
    }
    GoldLabels gold;
    for (const auto& [pathology_id, present] : j.at("labels").items()) {
        gold.labels.set(pathology_id, present.get<bool>());
    }
    if (j.contains("laterality") && !j.at("laterality").is_null()) {
        gold.laterality = laterality_from_string(j.at("laterality").get<std::string>());
    }
    return gold;
}

struct CohortRunOutput {
    std::vector<CohortCase> cases;
    std::vector<std::string> reports;
    std::vector<std::string> traces;
};

CohortRunOutput run_cohort(const PipelineConfig& config, const ToolRegistry& registry,
                           const Index& index, const Lexicon& lexicon,
                           const std::vector<CohortCaseSpec>& specs,
                           std::optional<std::size_t> k_override, std::size_t jobs) {
    RunConfig run_config = config.run;
    if (k_override) {
        run_config.k = *k_override;
    }

    std::unique_ptr<ChatBackend> shared_backend;
    const bool all_have_fixtures =
        std::all_of(specs.begin(), specs.end(),
                    [](const CohortCaseSpec& s) { return !s.fixture_path.empty(); });
    if (!all_have_fixtures) {
        shared_backend = make_backend(config.backend);
        // A single scripted fixture stream is order-dependent; keep it serial.
        if (config.backend.kind == "scripted") {
            jobs = 1;
        }
    }

    CohortRunOutput output;
    output.cases.resize(specs.size());
    output.reports.resize(specs.size());
    output.traces.resize(specs.size());

    std::atomic<std::size_t> cursor{0};
    std::atomic<bool> failed{false};
    std::string failure_message;
    std::mutex failure_mutex;

    auto worker = [&] {
        while (!failed.load()) {
            const std::size_t i = cursor.fetch_add(1);
            if (i >= specs.size()) {
                return;
            }
            try {
                const auto& spec = specs[i];
                const StudyBundle study = load_study(spec.study_dir);
                std::optional<std::string> draft;
                if (run_config.mode == AgentMode::refine) {
                    if (spec.draft_path.empty()) {
                        throw ValidationError("refine mode requires draft_path for study \"" +
                                              study.study_id + "\"");
                    }
                    draft = read_text_file(spec.draft_path);
                }
                std::unique_ptr<ChatBackend> own_backend;
                ChatBackend* backend = shared_backend.get();
                if (!spec.fixture_path.empty()) {
                    own_backend = ScriptedBackend::from_file(spec.fixture_path);
                    backend = own_backend.get();
                }
                const auto result = run_agent(study, config.query, index, registry, *backend,
                                              run_config, std::move(draft));

                const GoldLabels gold = load_gold_labels(spec.gold_labels_path);
                const std::string reference = read_text_file(spec.reference_report_path);

                CohortCase c;
                c.study_id = study.study_id;
                c.predicted = config.classifier_endpoint.empty()
                                  ? derive_labels(result.report, lexicon)
                                  : derive_labels_remote(
                                        result.report,
                                        RemoteClassifier(config.classifier_endpoint));
                c.gold = gold.labels;
                c.bleu1 = bleu1(result.report, reference);
                c.rouge_l = rouge_l(result.report, reference);
                c.meteor = meteor_exact(result.report, reference);
                c.laterality_pred = predict_laterality(result.report);
                c.laterality_gold = gold.laterality;

                output.cases[i] = std::move(c);
                output.reports[i] = result.report;
                output.traces[i] = trace_to_json(result.trace);
            } catch (const std::exception& e) {
                std::lock_guard lock(failure_mutex);
                failed.store(true);
                if (failure_message.empty()) {
                    failure_message = "case " + std::to_string(i) + ": " + e.what();
                }
                return;
            }
        }
    };

    jobs = std::max<std::size_t>(1, jobs);
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < jobs; ++t) {
            pool.emplace_back(worker);
        }
        for (auto& thread : pool) {
            thread.join();
        }
    }
    if (failed.load()) {
        throw Error("cohort run failed: " + failure_message);
    }
    return output;
}

std::vector<std::size_t> parse_k_list(const std::string& text) {
    std::vector<std::size_t> ks;
    std::stringstream stream(text);
    std::string item;
    while (std::getline(stream, item, ',')) {
        if (item.empty()) continue;
        const long value = std::stol(item);
        if (value < 1) {
            throw UsageFailure("--ks entries must be >= 1");
        }
        ks.push_back(static_cast<std::size_t>(value));
    }
    if (ks.empty()) {
        throw UsageFailure("--ks lists no values");
    }
    return ks;
}

// -- subcommand bodies -----------------------------------------------------------

void cmd_phantom_make(const std::filesystem::path& spec_path, const std::string& study_id,
                      const std::filesystem::path& out_dir) {
    const PhantomSpec spec = load_phantom_spec(spec_path);
    StudyBundle study = make_phantom(spec);
    if (!study_id.empty()) {
        study.study_id = study_id;
    }
    save_study(study, out_dir);
    RunManifest manifest;
    manifest.command = "phantom make";
    manifest.config_digest = config_file_digest(spec_path);
    write_manifest(manifest, out_dir);
    std::cout << "wrote study \"" << study.study_id << "\" to " << out_dir.string() << "\n";
}

void cmd_features_extract(const std::filesystem::path& study_dir,
                          const std::optional<std::filesystem::path>& registry_path,
                          const std::filesystem::path& out_dir) {
    const ToolRegistry registry =
        registry_path ? load_registry(*registry_path) : default_registry();
    const StudyBundle study = load_study(study_dir);
    const MidPlanes planes = estimate_midplanes(study);

    std::filesystem::create_directories(out_dir / "features");
    for (const auto& tool : registry.tools()) {
        const FeatureVector fv = run_tool(study, tool, planes);
        write_text_file(out_dir / "features" / (tool.pathology_id + ".json"),
                        feature_vector_to_json(fv) + "\n");
    }
    RunManifest manifest;
    manifest.command = "features extract";
    manifest.schema_id = registry.schema_id();
    manifest.config_digest =
        registry_path ? config_file_digest(*registry_path) : std::string(16, '0');
    write_manifest(manifest, out_dir);
    std::cout << "extracted " << registry.tools().size() << " feature vectors to "
              << (out_dir / "features").string() << "\n";
}

void cmd_index_build(const std::optional<std::filesystem::path>& entries_path,
                     const std::optional<std::filesystem::path>& snippets_path,
                     const std::optional<std::filesystem::path>& features_root,
                     const std::optional<std::filesystem::path>& registry_path,
                     const std::filesystem::path& out_dir) {
    const ToolRegistry registry =
        registry_path ? load_registry(*registry_path) : default_registry();
    std::vector<ReferenceEntry> entries;
    if (entries_path) {
        entries = parse_entries_jsonl(*entries_path, registry);
    } else if (snippets_path && features_root) {
        entries = entries_from_snippets(*snippets_path, *features_root, registry);
    } else {
        throw UsageFailure("index build needs --entries or (--snippets and --features-root)");
    }
    const Index index = Index::build(std::move(entries));
    std::filesystem::create_directories(out_dir);
    const auto index_path = out_dir / "index.jsonl";
    index.save_file(index_path);

    RunManifest manifest;
    manifest.command = "index build";
    manifest.schema_id = index.schema_id();
    manifest.index_stats_digest = index_stats_digest(index_path);
    write_manifest(manifest, out_dir);
    std::cout << "built index with " << index.partition_ids().size() << " partitions at "
              << index_path.string() << "\n";
}

void cmd_index_query(const std::filesystem::path& index_path, const std::string& pathology_id,
                     const std::filesystem::path& features_path, std::size_t k) {
    const Index index = Index::load_file(index_path);
    const FeatureVector fv = feature_vector_from_json(read_text_file(features_path));
    const RetrievalResult result = index.knn_query(pathology_id, fv, k);
    nlohmann::ordered_json j;
    auto neighbors = nlohmann::ordered_json::array();
    for (const auto& neighbor : result.neighbors) {
        neighbors.push_back({{"entry_id", neighbor.entry_id},
                             {"distance", neighbor.distance},
                             {"snippet", neighbor.snippet}});
    }
    j["neighbors"] = std::move(neighbors);
    std::cout << j.dump(2) << "\n";
}

void cmd_snippets_extract(const std::filesystem::path& reports_path,
                          const std::filesystem::path& prompt_set_path,
                          const std::filesystem::path& config_path,
                          const std::filesystem::path& out_dir) {
    const PipelineConfig config = load_config_or_usage(config_path);
    const ExtractionPromptSet prompt_set = load_prompt_set(prompt_set_path);
    const auto backend = make_backend(config.backend);

    std::vector<std::pair<std::string, std::string>> reports;
    std::ifstream in(reports_path);
    if (!in) {
        throw IoError("cannot open reports \"" + reports_path.string() + "\"");
    }
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            reports.emplace_back(j.at("source_id").get<std::string>(),
                                 j.at("report").get<std::string>());
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("reports line " + std::to_string(line_no) + ": " + e.what());
        }
    }

    const ExtractionOutcome outcome =
        extract_snippets(reports, prompt_set, *backend, config.backend.model);
    std::filesystem::create_directories(out_dir);
    save_snippets(outcome.snippets, out_dir / "snippets.jsonl");

    nlohmann::ordered_json failures = nlohmann::ordered_json::array();
    for (const auto& failure : outcome.failures) {
        failures.push_back({{"source_id", failure.source_id}, {"error", failure.error}});
    }
    write_text_file(out_dir / "failures.json", failures.dump(2) + "\n");

    RunManifest manifest;
    manifest.command = "snippets extract";
    manifest.backend_kind = std::string(backend->kind());
    manifest.config_digest = config_file_digest(config_path);
    write_manifest(manifest, out_dir);
    std::cout << "extracted " << outcome.snippets.size() << " snippets ("
              << outcome.failures.size() << " failures)\n";
}

void cmd_snippets_verify(const std::filesystem::path& snippets_path,
                         const std::filesystem::path& labels_path,
                         const std::string& classifier_url,
                         const std::filesystem::path& out_dir) {
    const auto snippets = load_snippets(snippets_path);
    nlohmann::json labels_json;
    try {
        labels_json = nlohmann::json::parse(read_text_file(labels_path));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("labels parse error: " + std::string(e.what()));
    }
    std::map<std::string, bool> labels;
    for (const auto& [source_id, present] : labels_json.items()) {
        labels.emplace(source_id, present.get<bool>());
    }

    nlohmann::ordered_json j;
    auto dump_scores = [](const std::map<std::string, VerificationScore>& scores) {
        nlohmann::ordered_json out;
        for (const auto& [pathology_id, score] : scores) {
            out[pathology_id] = {{"precision", score.precision},
                                 {"recall", score.recall},
                                 {"f1", score.f1},
                                 {"true_positives", score.true_positives},
                                 {"false_positives", score.false_positives},
                                 {"false_negatives", score.false_negatives},
                                 {"no_positives", score.no_positives}};
        }
        return out;
    };
    j["template_f1"] = dump_scores(template_f1_verify(snippets, labels));
    if (!classifier_url.empty()) {
        const RemoteClassifier classifier(classifier_url);
        j["classifier_f1"] = dump_scores(classifier_f1_verify(snippets, labels, classifier));
    }
    std::filesystem::create_directories(out_dir);
    write_text_file(out_dir / "verification.json", j.dump(2) + "\n");

    RunManifest manifest;
    manifest.command = "snippets verify";
    write_manifest(manifest, out_dir);
    std::cout << "wrote " << (out_dir / "verification.json").string() << "\n";
}

void cmd_agent_run(const std::filesystem::path& study_dir,
                   const std::filesystem::path& config_path, const std::string& mode_flag,
                   const std::filesystem::path& draft_path, const std::string& query_flag,
                   std::optional<std::size_t> k_flag, const std::filesystem::path& out_dir) {
    PipelineConfig config = load_config_or_usage(config_path);
    if (!mode_flag.empty()) {
        config.run.mode = agent_mode_from_string(mode_flag);
    }
    if (!query_flag.empty()) {
        config.query = query_flag;
    }
    if (k_flag) {
        config.run.k = *k_flag;
    }
    if (config.run.mode == AgentMode::refine && draft_path.empty()) {
        throw UsageFailure("--draft is required when --mode refine");
    }
    if (!config.index_path) {
        throw UsageFailure("config.index: required for agent run");
    }

    const ToolRegistry registry = registry_for(config);
    const Index index = Index::load_file(*config.index_path);
    const StudyBundle study = load_study(study_dir);
    const auto backend = make_backend(config.backend);
    std::optional<std::string> draft;
    if (!draft_path.empty()) {
        draft = read_text_file(draft_path);
    }

    const auto result = run_agent(study, config.query, index, registry, *backend, config.run,
                                  std::move(draft));

    std::filesystem::create_directories(out_dir);
    write_text_file(out_dir / "report.txt", result.report + "\n");
    write_text_file(out_dir / "trace.json", trace_to_json(result.trace) + "\n");

    RunManifest manifest;
    manifest.command = "agent run";
    manifest.schema_id = registry.schema_id();
    manifest.index_stats_digest = index_stats_digest(*config.index_path);
    manifest.k = config.run.k;
    manifest.mode = std::string(to_string(config.run.mode));
    manifest.backend_kind = std::string(backend->kind());
    manifest.config_digest = config_file_digest(config_path);
    write_manifest(manifest, out_dir);
    std::cout << "report written to " << (out_dir / "report.txt").string() << "\n";
}

void write_cohort_outputs(const CohortRunOutput& output, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir / "reports");
    std::filesystem::create_directories(out_dir / "traces");
    for (std::size_t i = 0; i < output.cases.size(); ++i) {
        const auto& study_id = output.cases[i].study_id;
        write_text_file(out_dir / "reports" / (study_id + ".txt"), output.reports[i] + "\n");
        write_text_file(out_dir / "traces" / (study_id + ".json"), output.traces[i] + "\n");
    }
    write_text_file(out_dir / "cohort.csv", cohort_csv(output.cases));
    save_metrics(evaluate_cohort(output.cases), out_dir / "summary.json");
}

void cmd_eval_cohort(const std::filesystem::path& manifest_path,
                     const std::filesystem::path& config_path, std::size_t jobs,
                     const std::filesystem::path& out_dir) {
    const PipelineConfig config = load_config_or_usage(config_path);
    if (!config.index_path) {
        throw UsageFailure("config.index: required for eval cohort");
    }
    const ToolRegistry registry = registry_for(config);
    const Index index = Index::load_file(*config.index_path);
    const Lexicon lexicon = lexicon_for(config);
    const auto specs = load_cohort_manifest(manifest_path);

    const auto output = run_cohort(config, registry, index, lexicon, specs, std::nullopt, jobs);
    write_cohort_outputs(output, out_dir);

    RunManifest manifest;
    manifest.command = "eval cohort";
    manifest.schema_id = registry.schema_id();
    manifest.index_stats_digest = index_stats_digest(*config.index_path);
    manifest.k = config.run.k;
    manifest.mode = std::string(to_string(config.run.mode));
    manifest.backend_kind = config.backend.kind;
    manifest.config_digest = config_file_digest(config_path);
    write_manifest(manifest, out_dir);
    std::cout << "evaluated " << output.cases.size() << " cases; summary at "
              << (out_dir / "summary.json").string() << "\n";
}

void cmd_eval_ksweep(const std::filesystem::path& manifest_path,
                     const std::filesystem::path& config_path, const std::string& ks_flag,
                     std::size_t jobs, const std::filesystem::path& out_dir) {
    const PipelineConfig config = load_config_or_usage(config_path);
    if (!config.index_path) {
        throw UsageFailure("config.index: required for eval ksweep");
    }
    const ToolRegistry registry = registry_for(config);
    const Index index = Index::load_file(*config.index_path);
    const Lexicon lexicon = lexicon_for(config);
    const auto specs = load_cohort_manifest(manifest_path);

    std::vector<std::size_t> ks{kDefaultKSweep.begin(), kDefaultKSweep.end()};
    if (!ks_flag.empty()) {
        ks = parse_k_list(ks_flag);
    }
    const auto rows = k_sweep(
        [&](std::size_t k) {
            return evaluate_cohort(
                run_cohort(config, registry, index, lexicon, specs, k, jobs).cases);
        },
        ks);

    std::filesystem::create_directories(out_dir);
    write_text_file(out_dir / "ksweep.csv", k_sweep_csv(rows));

    RunManifest manifest;
    manifest.command = "eval ksweep";
    manifest.schema_id = registry.schema_id();
    manifest.index_stats_digest = index_stats_digest(*config.index_path);
    manifest.mode = std::string(to_string(config.run.mode));
    manifest.backend_kind = config.backend.kind;
    manifest.config_digest = config_file_digest(config_path);
    write_manifest(manifest, out_dir);
    std::cout << "wrote " << (out_dir / "ksweep.csv").string() << "\n";
}

void cmd_eval_sensitivity(const std::filesystem::path& full_path,
                          const std::filesystem::path& subset_path,
                          const std::filesystem::path& volumes_path, double decile,
                          const std::filesystem::path& out_dir) {
    const MetricsBundle full = load_metrics(full_path);
    const MetricsBundle subset = load_metrics(subset_path);
    const SensitivityReport report = sensitivity_report(full, subset, lung_pathology_ids());

    nlohmann::ordered_json j;
    j["delta_macro_f1_all"] = report.delta_macro_f1_all;
    j["delta_macro_f1_lung"] = report.delta_macro_f1_lung;
    if (!volumes_path.empty()) {
        nlohmann::json volumes_json;
        try {
            volumes_json = nlohmann::json::parse(read_text_file(volumes_path));
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError("lung volumes parse error: " + std::string(e.what()));
        }
        std::map<std::string, double> volumes;
        for (const auto& [study_id, volume] : volumes_json.items()) {
            volumes.emplace(study_id, volume.get<double>());
        }
        const auto flagged = oversegmentation_flag(volumes, decile);
        j["flagged"] = flagged;
    }
    std::filesystem::create_directories(out_dir);
    write_text_file(out_dir / "sensitivity.json", j.dump(2) + "\n");

    RunManifest manifest;
    manifest.command = "eval sensitivity";
    write_manifest(manifest, out_dir);
    std::cout << "wrote " << (out_dir / "sensitivity.json").string() << "\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"hypothesis-driven CT report generation pipeline"};
    app.require_subcommand(1);

    // phantom make
    auto* phantom = app.add_subcommand("phantom", "synthetic phantom studies");
    phantom->require_subcommand(1);
    auto* phantom_make = phantom->add_subcommand("make", "rasterize a phantom spec");
    std::filesystem::path pm_spec, pm_out;
    std::string pm_study_id;
    phantom_make->add_option("--spec", pm_spec, "phantom spec JSON")->required();
    phantom_make->add_option("--out", pm_out, "output study directory")->required();
    phantom_make->add_option("--study-id", pm_study_id, "override the study id");
    phantom_make->callback([&] { cmd_phantom_make(pm_spec, pm_study_id, pm_out); });

    // features extract
    auto* features = app.add_subcommand("features", "radiomics feature extraction");
    features->require_subcommand(1);
    auto* features_extract = features->add_subcommand("extract", "run every registered tool");
    std::filesystem::path fe_study, fe_out;
    std::string fe_registry;
    features_extract->add_option("--study", fe_study, "study directory")->required();
    features_extract->add_option("--registry", fe_registry, "tool registry JSON");
    features_extract->add_option("--out", fe_out, "output directory")->required();
    features_extract->callback([&] {
        cmd_features_extract(fe_study,
                             fe_registry.empty()
                                 ? std::nullopt
                                 : std::optional<std::filesystem::path>(fe_registry),
                             fe_out);
    });

    // index build | query
    auto* index_cmd = app.add_subcommand("index", "reference retrieval space");
    index_cmd->require_subcommand(1);
    auto* index_build = index_cmd->add_subcommand("build", "build and save the index");
    std::string ib_entries, ib_snippets, ib_features_root, ib_registry;
    std::filesystem::path ib_out;
    index_build->add_option("--entries", ib_entries, "reference entries JSONL");
    index_build->add_option("--snippets", ib_snippets, "extracted snippets JSONL");
    index_build->add_option("--features-root", ib_features_root,
                            "root of per-study feature extractions");
    index_build->add_option("--registry", ib_registry, "tool registry JSON");
    index_build->add_option("--out", ib_out, "output directory")->required();
    index_build->callback([&] {
        auto opt = [](const std::string& s) {
            return s.empty() ? std::nullopt : std::optional<std::filesystem::path>(s);
        };
        cmd_index_build(opt(ib_entries), opt(ib_snippets), opt(ib_features_root),
                        opt(ib_registry), ib_out);
    });
    auto* index_query = index_cmd->add_subcommand("query", "k-NN lookup against the index");
    std::filesystem::path iq_index, iq_features;
    std::string iq_pathology;
    std::size_t iq_k = 3;
    index_query->add_option("--index", iq_index, "index JSONL")->required();
    index_query->add_option("--pathology", iq_pathology, "partition to query")->required();
    index_query->add_option("--features", iq_features, "query feature vector JSON")->required();
    index_query->add_option("-k,--k", iq_k, "neighbors to retrieve");
    index_query->callback([&] { cmd_index_query(iq_index, iq_pathology, iq_features, iq_k); });

    // snippets extract | verify
    auto* snippets_cmd = app.add_subcommand("snippets", "reference snippet pipeline");
    snippets_cmd->require_subcommand(1);
    auto* snippets_extract = snippets_cmd->add_subcommand("extract", "four-shot extraction");
    std::filesystem::path se_reports, se_prompts, se_config, se_out;
    snippets_extract->add_option("--reports", se_reports, "reports JSONL")->required();
    snippets_extract->add_option("--prompt-set", se_prompts, "prompt set JSON")->required();
    snippets_extract->add_option("--config", se_config, "pipeline config")->required();
    snippets_extract->add_option("--out", se_out, "output directory")->required();
    snippets_extract->callback(
        [&] { cmd_snippets_extract(se_reports, se_prompts, se_config, se_out); });
    auto* snippets_verify = snippets_cmd->add_subcommand("verify", "Template-F1 verification");
    std::filesystem::path sv_snippets, sv_labels, sv_out;
    std::string sv_classifier;
    snippets_verify->add_option("--snippets", sv_snippets, "snippets JSONL")->required();
    snippets_verify->add_option("--labels", sv_labels, "per-source labels JSON")->required();
    snippets_verify->add_option("--classifier", sv_classifier, "remote classifier base URL");
    snippets_verify->add_option("--out", sv_out, "output directory")->required();
    snippets_verify->callback(
        [&] { cmd_snippets_verify(sv_snippets, sv_labels, sv_classifier, sv_out); });

    // agent run
    auto* agent_cmd = app.add_subcommand("agent", "evidence-acquisition agent");
    agent_cmd->require_subcommand(1);
    auto* agent_run = agent_cmd->add_subcommand("run", "run the agent on one study");
    std::filesystem::path ar_study, ar_config, ar_out, ar_draft;
    std::string ar_mode, ar_query;
    std::size_t ar_k = 0;
    agent_run->add_option("--study", ar_study, "study directory")->required();
    agent_run->add_option("--config", ar_config, "pipeline config")->required();
    agent_run->add_option("--mode", ar_mode, "template or refine");
    agent_run->add_option("--draft", ar_draft, "draft report (refine mode)");
    agent_run->add_option("--query", ar_query, "reporting query override");
    agent_run->add_option("-k,--k", ar_k, "neighbors per retrieval");
    agent_run->add_option("--out", ar_out, "output directory")->required();
    agent_run->callback([&] {
        cmd_agent_run(ar_study, ar_config, ar_mode, ar_draft, ar_query,
                      ar_k == 0 ? std::nullopt : std::optional<std::size_t>(ar_k), ar_out);
    });

    // eval cohort | ksweep | sensitivity
    auto* eval_cmd = app.add_subcommand("eval", "cohort evaluation");
    eval_cmd->require_subcommand(1);
    auto* eval_cohort_cmd = eval_cmd->add_subcommand("cohort", "run and score a cohort");
    std::filesystem::path ec_manifest, ec_config, ec_out;
    std::size_t ec_jobs = 1;
    eval_cohort_cmd->add_option("--manifest", ec_manifest, "cohort manifest JSONL")->required();
    eval_cohort_cmd->add_option("--config", ec_config, "pipeline config")->required();
    eval_cohort_cmd->add_option("--jobs", ec_jobs, "parallel studies");
    eval_cohort_cmd->add_option("--out", ec_out, "output directory")->required();
    eval_cohort_cmd->callback([&] { cmd_eval_cohort(ec_manifest, ec_config, ec_jobs, ec_out); });

    auto* eval_ksweep_cmd = eval_cmd->add_subcommand("ksweep", "sweep the neighbor count");
    std::filesystem::path ek_manifest, ek_config, ek_out;
    std::string ek_ks;
    std::size_t ek_jobs = 1;
    eval_ksweep_cmd->add_option("--manifest", ek_manifest, "cohort manifest JSONL")->required();
    eval_ksweep_cmd->add_option("--config", ek_config, "pipeline config")->required();
    eval_ksweep_cmd->add_option("--ks", ek_ks, "comma-separated k values");
    eval_ksweep_cmd->add_option("--jobs", ek_jobs, "parallel studies");
    eval_ksweep_cmd->add_option("--out", ek_out, "output directory")->required();
    eval_ksweep_cmd->callback(
        [&] { cmd_eval_ksweep(ek_manifest, ek_config, ek_ks, ek_jobs, ek_out); });

    auto* eval_sens_cmd = eval_cmd->add_subcommand("sensitivity", "segmentation sensitivity");
    std::filesystem::path es_full, es_subset, es_out, es_volumes;
    double es_decile = 0.10;
    eval_sens_cmd->add_option("--full", es_full, "full-cohort summary JSON")->required();
    eval_sens_cmd->add_option("--subset", es_subset, "subset summary JSON")->required();
    eval_sens_cmd->add_option("--lung-volumes", es_volumes, "study_id -> lung volume JSON");
    eval_sens_cmd->add_option("--decile", es_decile, "flagging decile");
    eval_sens_cmd->add_option("--out", es_out, "output directory")->required();
    eval_sens_cmd->callback(
        [&] { cmd_eval_sensitivity(es_full, es_subset, es_volumes, es_decile, es_out); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        std::cerr << "run with --help for usage\n";
        return 1;
    } catch (const UsageFailure& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
