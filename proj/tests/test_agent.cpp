#include <doctest.h>

#include <algorithm>
#include <atomic>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "ctrag/agent.hpp"
#include "ctrag/errors.hpp"
#include "ctrag/phantom.hpp"

using namespace ctrag;

namespace {

StudyBundle make_study() {
    PhantomSpec spec;
    spec.dims = {48, 48, 48};
    spec.spacing_mm = {1.0, 1.0, 1.0};
    spec.organs.push_back(EllipsoidSpec{"lung_left", {33, 24, 24}, {9, 11, 14}, -800.0});
    spec.organs.push_back(EllipsoidSpec{"lung_right", {15, 24, 24}, {9, 11, 14}, -800.0});
    spec.organs.push_back(EllipsoidSpec{"heart", {24, 28, 20}, {6, 6, 8}, 40.0});
    LesionSpec lesion;
    lesion.pathology_id = "PleuralEffusion";
    lesion.shape = EllipsoidSpec{"pleural_effusion_region", {38, 24, 22}, {5, 6, 8}, 10.0};
    lesion.intended_laterality = Laterality::left;
    spec.lesions.push_back(lesion);
    StudyBundle study = make_phantom(spec);
    study.study_id = "agent-study";
    return study;
}

ReferenceEntry jittered_entry(const FeatureVector& base, std::uint64_t id, double jitter,
                              const std::string& snippet) {
    ReferenceEntry entry;
    entry.entry_id = id;
    entry.pathology_id = base.pathology_id;
    entry.features = base;
    for (std::size_t i = 0; i < entry.features.values.size(); ++i) {
        if (!entry.features.undefined[i]) {
            entry.features.values[i] += jitter * static_cast<double>(i + 1);
        }
    }
    entry.snippet = snippet;
    entry.source_id = "ref" + std::to_string(id);
    return entry;
}

struct World {
    StudyBundle study = make_study();
    ToolRegistry registry = default_registry();
    MidPlanes planes = estimate_midplanes(study);
    Index index;

    World() {
        const FeatureVector effusion =
            run_tool(study, registry.at("PleuralEffusion"), planes);
        const FeatureVector heart = run_tool(study, registry.at("Cardiomegaly"), planes);
        index = Index::build({
            jittered_entry(effusion, 0, 0.0, "Left pleural effusion is observed."),
            jittered_entry(effusion, 1, 4.0, "Minimal right pleural effusion."),
            jittered_entry(effusion, 2, 9.0, "No sign of Pleural effusion was found in the scan."),
            jittered_entry(heart, 0, 0.5, "Heart size is normal."),
            jittered_entry(heart, 1, 2.0, "Cardiomegaly is present."),
        });
    }
};

RunConfig quick_config(std::uint32_t parse_retries = 2) {
    RunConfig config;
    config.k = 3;
    config.parse_retries = parse_retries;
    return config;
}

} // namespace

TEST_CASE("init_evidence: template boilerplate, refine draft, missing draft") {
    const auto templ = init_evidence(AgentMode::template_based, "q", std::nullopt);
    CHECK(templ.seed_text == kDefaultTemplateText);
    CHECK(templ.items.empty());

    const auto refine = init_evidence(AgentMode::refine, "q", "Heart size is normal.");
    CHECK(refine.seed_text == "Heart size is normal.");

    CHECK_THROWS_WITH_AS(init_evidence(AgentMode::refine, "q", std::nullopt),
                         doctest::Contains("draft"), ValidationError);
}

TEST_CASE("extract_first_json_object parses embedded and nested objects") {
    CHECK(extract_first_json_object("junk {\"action\": \"STOP\"} trailing") ==
          "{\"action\": \"STOP\"}");
    CHECK(extract_first_json_object("{\"a\": {\"b\": 1}, \"c\": \"}\"}").has_value());
    CHECK_FALSE(extract_first_json_object("no braces here").has_value());
    CHECK_FALSE(extract_first_json_object("{unclosed").has_value());
    const auto nested = extract_first_json_object("pre {not json} {\"x\": 1}");
    REQUIRE(nested.has_value());
    CHECK(*nested == "{\"x\": 1}");
}

TEST_CASE("format_fixed3 renders three decimals and normalizes negative zero") {
    CHECK(format_fixed3(2.5) == "2.500");
    CHECK(format_fixed3(0.12349) == "0.123");
    CHECK(format_fixed3(1.9996) == "2.000");
    CHECK(format_fixed3(-0.0) == "0.000");
    CHECK(format_fixed3(-1234.5678) == "-1234.568");
}

TEST_CASE("decide_action accepts a valid tool reply") {
    const World world;
    ScriptedBackend backend(
        {{"*", R"({"action":"PleuralEffusion","rationale":"check fluid"})"}});
    const auto state = init_evidence(AgentMode::template_based, "q", std::nullopt);
    const std::vector<std::string> unvisited{"PleuralEffusion", "Cardiomegaly"};
    const auto outcome =
        decide_action(state, unvisited, world.registry, backend, quick_config());
    CHECK(outcome.decision.action == "PleuralEffusion");
    CHECK(outcome.decision.rationale == "check fluid");
    CHECK_FALSE(outcome.fallback);
    CHECK(outcome.usage.prompt_tokens > 0);
}

TEST_CASE("decide_action accepts STOP") {
    const World world;
    ScriptedBackend backend({{"*", R"({"action":"STOP","rationale":"sufficient"})"}});
    const auto state = init_evidence(AgentMode::template_based, "q", std::nullopt);
    const auto outcome = decide_action(state, {"PleuralEffusion"}, world.registry, backend,
                                       quick_config());
    CHECK(outcome.decision.is_stop());
}

TEST_CASE("unparseable replies re-ask, then fall back to the schedule") {
    const World world;
    // parse_retries = 1: one initial ask plus one re-ask, both gibberish.
    ScriptedBackend backend({{"*", "gibberish"}, {"*", "more gibberish"}});
    const auto state = init_evidence(AgentMode::template_based, "q", std::nullopt);
    const std::vector<std::string> unvisited{"Cardiomegaly", "PleuralEffusion"};
    const auto outcome =
        decide_action(state, unvisited, world.registry, backend, quick_config(1));
    CHECK(outcome.fallback);
    // Registry order, not unvisited-list order: MedicalMaterial precedes both,
    // but only unvisited tools qualify; Cardiomegaly comes first in the registry.
    CHECK(outcome.decision.action == "Cardiomegaly");
    CHECK(backend.remaining() == 0);
}

TEST_CASE("out-of-set and already-visited actions are treated as invalid") {
    const World world;
    ScriptedBackend backend({{"*", R"({"action":"Cardiomegaly"})"},
                             {"*", R"({"action":"PleuralEffusion","rationale":"ok"})"}});
    const auto state = init_evidence(AgentMode::template_based, "q", std::nullopt);
    // Cardiomegaly is already visited (not in the unvisited list).
    const auto outcome = decide_action(state, {"PleuralEffusion"}, world.registry, backend,
                                       quick_config());
    CHECK(outcome.decision.action == "PleuralEffusion");
    CHECK_FALSE(outcome.fallback);
}

TEST_CASE("correction messages carry the allowed action list") {
    const auto correction = decision_correction_message({"A", "B"});
    CHECK(correction.find("A, B, STOP") != std::string::npos);
    CHECK(correction.find("{\"action\"") != std::string::npos);
}

TEST_CASE("execute_step retrieves min(k, partition size) neighbors") {
    World world;
    auto state = init_evidence(AgentMode::template_based, "q", std::nullopt);
    const auto record =
        execute_step(state, world.study, world.index, world.registry, world.planes,
                     ActionDecision{"Cardiomegaly", "why"}, 3);
    CHECK_FALSE(record.error.has_value());
    CHECK(record.neighbors.neighbors.size() == 2); // partition holds 2 entries
    CHECK(state.items.size() == 1);
    CHECK(state.items[0].step == 1);
    CHECK(state.items[0].pathology_id == "Cardiomegaly");
}

TEST_CASE("execute_step on the effusion tool retrieves the planted snippet first") {
    World world;
    auto state = init_evidence(AgentMode::template_based, "q", std::nullopt);
    const auto record =
        execute_step(state, world.study, world.index, world.registry, world.planes,
                     ActionDecision{"PleuralEffusion", "check"}, 3);
    REQUIRE(record.neighbors.neighbors.size() == 3);
    CHECK(record.neighbors.neighbors[0].snippet == "Left pleural effusion is observed.");
    CHECK(record.neighbors.neighbors[0].distance == 0.0);
}

TEST_CASE("execute_step records index errors as degraded items") {
    World world;
    auto state = init_evidence(AgentMode::template_based, "q", std::nullopt);
    const auto record =
        execute_step(state, world.study, world.index, world.registry, world.planes,
                     ActionDecision{"Emphysema", "why"}, 3);
    REQUIRE(record.error.has_value());
    CHECK(record.neighbors.neighbors.empty());
    CHECK(state.items.size() == 1);
    CHECK(state.items[0].features.all_undefined());
}

TEST_CASE("run_agent: one tool then STOP") {
    World world;
    ScriptedBackend backend({
        {"*", R"({"action":"PleuralEffusion","rationale":"check fluid"})"},
        {"*", R"({"action":"STOP","rationale":"sufficient"})"},
        {"*", "Left pleural effusion is observed. Other structures unremarkable."},
    });
    const auto result = run_agent(world.study, "Report the findings.", world.index,
                                  world.registry, backend, quick_config());
    CHECK(result.report == "Left pleural effusion is observed. Other structures unremarkable.");
    CHECK(result.trace.termination == Termination::stop_action);
    REQUIRE(result.trace.steps.size() == 2); // tool step + STOP record
    CHECK(result.trace.steps[0].decision.action == "PleuralEffusion");
    CHECK(result.trace.steps[1].decision.is_stop());
    CHECK_FALSE(result.trace.aborted);
    CHECK_FALSE(result.trace.fallback_used);

    // Evidence update shape: one item, neighbors = min(k, partition) = 3.
    CHECK(result.trace.steps[0].neighbors.neighbors.size() == 3);
}

TEST_CASE("run_agent: immediate STOP synthesizes from the seed only") {
    World world;
    ScriptedBackend backend({
        {"*", R"({"action":"STOP","rationale":"nothing to check"})"},
        {"*", "Unremarkable chest CT."},
    });
    const auto result = run_agent(world.study, "q", world.index, world.registry, backend,
                                  quick_config());
    CHECK(result.report == "Unremarkable chest CT.");
    CHECK(result.trace.termination == Termination::stop_action);
    CHECK(result.trace.steps.size() == 1);
    CHECK_FALSE(result.trace.steps[0].features.has_value());
}

TEST_CASE("run_agent: all-invalid replies walk the whole registry in order") {
    World world;
    // parse_retries = 0, 18 tools, each decision consumes one fixture; plus synthesis.
    std::vector<ScriptedBackend::Fixture> fixtures(18, {"*", "never valid"});
    fixtures.push_back({"*", "Synthesized report."});
    ScriptedBackend backend(fixtures);

    auto config = quick_config(0);
    const auto result =
        run_agent(world.study, "q", world.index, world.registry, backend, config);

    CHECK(result.trace.termination == Termination::all_tools_visited);
    CHECK(result.trace.fallback_used);
    REQUIRE(result.trace.steps.size() == 18);
    const auto& tools = world.registry.tools();
    for (std::size_t i = 0; i < 18; ++i) {
        CHECK(result.trace.steps[i].decision.action == tools[i].pathology_id);
        CHECK(result.trace.steps[i].fallback);
    }
    CHECK(backend.remaining() == 0);
}

TEST_CASE("run_agent: max_steps bound with fallback reports fallback_schedule") {
    World world;
    std::vector<ScriptedBackend::Fixture> fixtures(3, {"*", "nope"});
    fixtures.push_back({"*", "Short report."});
    ScriptedBackend backend(fixtures);
    auto config = quick_config(0);
    config.max_steps = 3;
    const auto result =
        run_agent(world.study, "q", world.index, world.registry, backend, config);
    CHECK(result.trace.steps.size() == 3);
    CHECK(result.trace.termination == Termination::fallback_schedule);
}

TEST_CASE("run_agent: max_steps without fallback reports max_steps") {
    World world;
    ScriptedBackend backend({
        {"*", R"({"action":"PleuralEffusion","rationale":"r"})"},
        {"*", R"({"action":"Cardiomegaly","rationale":"r"})"},
        {"*", "Report."},
    });
    auto config = quick_config();
    config.max_steps = 2;
    const auto result =
        run_agent(world.study, "q", world.index, world.registry, backend, config);
    CHECK(result.trace.termination == Termination::max_steps);
    CHECK(result.trace.steps.size() == 2);
}

TEST_CASE("run_agent is byte-deterministic with a scripted backend") {
    World world;
    const std::vector<ScriptedBackend::Fixture> fixtures{
        {"*", R"({"action":"PleuralEffusion","rationale":"check fluid"})"},
        {"*", R"({"action":"Cardiomegaly","rationale":"heart next"})"},
        {"*", R"({"action":"STOP","rationale":"done"})"},
        {"*", "Left pleural effusion is observed. Heart size is normal."},
    };
    std::string first_trace;
    std::string first_report;
    for (int run = 0; run < 2; ++run) {
        ScriptedBackend backend(fixtures);
        const auto result = run_agent(world.study, "Report the findings.", world.index,
                                      world.registry, backend, quick_config());
        const std::string trace = trace_to_json(result.trace);
        if (run == 0) {
            first_trace = trace;
            first_report = result.report;
        } else {
            CHECK(trace == first_trace);
            CHECK(result.report == first_report);
        }
    }
}

TEST_CASE("token totals equal the sum of per-step and synthesis usage") {
    World world;
    ScriptedBackend backend({
        {"*", "garbage"},
        {"*", R"({"action":"PleuralEffusion","rationale":"r"})"},
        {"*", R"({"action":"STOP","rationale":"r"})"},
        {"*", "Report text."},
    });
    const auto result = run_agent(world.study, "q", world.index, world.registry, backend,
                                  quick_config());
    std::uint64_t prompt = result.trace.synthesis_usage.prompt_tokens;
    std::uint64_t completion = result.trace.synthesis_usage.completion_tokens;
    for (const auto& step : result.trace.steps) {
        prompt += step.prompt_tokens;
        completion += step.completion_tokens;
    }
    CHECK(result.trace.total_prompt_tokens == prompt);
    CHECK(result.trace.total_completion_tokens == completion);
}

TEST_CASE("LLM call count respects the step bound") {
    World world;
    // Every decision needs 1 + parse_retries asks in the worst case; here all
    // replies are invalid, so calls = steps * (1 + retries) + 1 synthesis.
    const std::uint32_t retries = 1;
    const std::size_t steps = 4;
    std::vector<ScriptedBackend::Fixture> fixtures(steps * (1 + retries), {"*", "bad"});
    fixtures.push_back({"*", "Report."});
    ScriptedBackend backend(fixtures);
    auto config = quick_config(retries);
    config.max_steps = steps;
    const auto result =
        run_agent(world.study, "q", world.index, world.registry, backend, config);
    CHECK(result.trace.steps.size() == steps);
    CHECK(backend.remaining() == 0); // exactly the bound, never more
}

TEST_CASE("aborted runs carry the partial trace") {
    World world;
    ScriptedBackend backend({
        {"*", R"({"action":"PleuralEffusion","rationale":"r"})"},
    }); // exhausted at the second decision
    try {
        run_agent(world.study, "q", world.index, world.registry, backend, quick_config());
        FAIL("expected AbortedRun");
    } catch (const AbortedRun& e) {
        CHECK(e.trace.aborted);
        CHECK(e.trace.steps.size() == 1);
        CHECK(e.trace.report.empty());
    }
}

TEST_CASE("prompt contracts: snippets verbatim, no voxel payloads, draft preserved") {
    World world;
    ScriptedBackend inner({
        {"*", R"({"action":"PleuralEffusion","rationale":"check"})"},
        {"*", R"({"action":"STOP","rationale":"done"})"},
        {"*", "Final text."},
    });
    RecordingBackend recorder(inner);
    auto config = quick_config();
    config.mode = AgentMode::refine;
    const std::string draft = "Draft: heart is unremarkable, trace effusion suspected.";
    const auto result = run_agent(world.study, "Verify the draft.", world.index,
                                  world.registry, recorder, config, draft);
    (void)result;

    REQUIRE(recorder.requests().size() == 3);
    const std::string synthesis_prompt = recorder.requests().back().concatenated_content();
    CHECK(synthesis_prompt.find(draft) != std::string::npos);
    CHECK(synthesis_prompt.find("Left pleural effusion is observed.") != std::string::npos);
    CHECK(synthesis_prompt.find("Minimal right pleural effusion.") != std::string::npos);

    for (const auto& request : recorder.requests()) {
        const std::string content = request.concatenated_content();
        CHECK(content.size() < 64 * 1024);
        CHECK(content.find("MVOL") == std::string::npos);
        CHECK(content.find("MMSK") == std::string::npos);
    }

    // Decision prompts list the unvisited tools.
    const std::string first_decision = recorder.requests()[0].concatenated_content();
    CHECK(first_decision.find("Unvisited tools:") != std::string::npos);
    CHECK(first_decision.find("PleuralEffusion") != std::string::npos);
}

TEST_CASE("evidence rendering: 3-decimal values, n/a flags, numbered snippets") {
    EvidenceSet state;
    state.query = "q";
    state.seed_text = "seed";
    EvidenceItem item;
    item.step = 1;
    item.pathology_id = "PleuralEffusion";
    item.rationale = "why";
    item.features.schema_id = "s";
    item.features.pathology_id = "PleuralEffusion";
    item.features.names = {"absolute_volume_mm3", "left_fraction"};
    item.features.values = {123.4567, 0.0};
    item.features.undefined = {false, true};
    item.neighbors.neighbors.push_back(Neighbor{0, 1.23456, "A snippet."});
    state.items.push_back(item);

    const std::string rendered = render_evidence(state);
    CHECK(rendered.find("absolute_volume_mm3 = 123.457") != std::string::npos);
    CHECK(rendered.find("left_fraction = n/a") != std::string::npos);
    CHECK(rendered.find("1. (distance 1.235) A snippet.") != std::string::npos);

    EvidenceSet empty;
    CHECK(render_evidence(empty).find("(none yet)") != std::string::npos);
}

TEST_CASE("the agent loop runs over the HTTP wire backend") {
    World world;
    // Responses served in call order, mimicking a chat-completions endpoint.
    const std::vector<std::string> replies{
        R"({"action":"PleuralEffusion","rationale":"check fluid"})",
        R"({"action":"STOP","rationale":"enough"})",
        "Left pleural effusion is observed.",
    };
    httplib::Server server;
    std::atomic<std::size_t> hits{0};
    server.Post("/v1/chat/completions",
                [&](const httplib::Request& req, httplib::Response& res) {
                    const auto body = nlohmann::json::parse(req.body);
                    REQUIRE(body.at("temperature") == 0.0);
                    const std::size_t call = hits.fetch_add(1);
                    nlohmann::json reply;
                    reply["choices"][0]["message"]["content"] =
                        replies[std::min(call, replies.size() - 1)];
                    reply["usage"] = {{"prompt_tokens", 10},
                                      {"completion_tokens", 5},
                                      {"total_tokens", 15}};
                    res.set_content(reply.dump(), "application/json");
                });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread thread([&server] { server.listen_after_bind(); });
    server.wait_until_ready();

    HttpBackendConfig http;
    http.base_url = "http://127.0.0.1:" + std::to_string(port) + "/v1";
    http.backoff_initial_ms = 1.0;
    HttpBackend backend(http);
    const auto result =
        run_agent(world.study, "q", world.index, world.registry, backend, quick_config());
    CHECK(result.report == "Left pleural effusion is observed.");
    CHECK(result.trace.steps.size() == 2);
    CHECK(result.trace.total_prompt_tokens == 30); // three calls at 10 each
    CHECK(hits == 3);

    server.stop();
    thread.join();
}

TEST_CASE("trace JSON serialization is stable and complete") {
    World world;
    ScriptedBackend backend({
        {"*", R"({"action":"PleuralEffusion","rationale":"r"})"},
        {"*", R"({"action":"STOP","rationale":"s"})"},
        {"*", "Report."},
    });
    const auto result = run_agent(world.study, "q", world.index, world.registry, backend,
                                  quick_config());
    const std::string json = trace_to_json(result.trace);
    CHECK(json.find("\"steps\"") != std::string::npos);
    CHECK(json.find("\"totals\"") != std::string::npos);
    CHECK(json.find("\"termination\": \"stop_action\"") != std::string::npos);
    CHECK(json.find("\"report\"") != std::string::npos);
    CHECK(json == trace_to_json(result.trace));
}
