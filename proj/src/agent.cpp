#include "ctrag/agent.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>

#include <nlohmann/json.hpp>

#include "ctrag/errors.hpp"

namespace ctrag {

std::string_view to_string(AgentMode mode) {
    return mode == AgentMode::refine ? "refine" : "template";
}

AgentMode agent_mode_from_string(std::string_view text) {
    if (text == "template") return AgentMode::template_based;
    if (text == "refine") return AgentMode::refine;
    throw ValidationError("unknown agent mode \"" + std::string(text) + "\"");
}

std::string_view to_string(Termination reason) {
    switch (reason) {
    case Termination::stop_action:
        return "stop_action";
    case Termination::all_tools_visited:
        return "all_tools_visited";
    case Termination::max_steps:
        return "max_steps";
    case Termination::fallback_schedule:
        return "fallback_schedule";
    }
    return "stop_action";
}

std::string format_fixed3(double value) {
    if (value == 0.0) {
        value = 0.0; // normalize -0
    }
    char buffer[64];
    std::snprintf(buffer, sizeof buffer, "%.3f", value);
    return buffer;
}

std::string render_evidence(const EvidenceSet& state) {
    if (state.items.empty()) {
        return "Evidence:\n(none yet)\n";
    }
    std::string out = "Evidence:\n";
    for (const auto& item : state.items) {
        out += "Step " + std::to_string(item.step) + ": " + item.pathology_id + "\n";
        out += "Rationale: " + item.rationale + "\n";
        out += "Features:\n";
        for (std::size_t i = 0; i < item.features.names.size(); ++i) {
            out += "  " + item.features.names[i] + " = ";
            out += item.features.undefined[i] ? "n/a" : format_fixed3(item.features.values[i]);
            out += '\n';
        }
        out += "Reference cases:\n";
        if (item.neighbors.neighbors.empty()) {
            out += "  (none)\n";
        }
        for (std::size_t i = 0; i < item.neighbors.neighbors.size(); ++i) {
            const auto& neighbor = item.neighbors.neighbors[i];
            out += "  " + std::to_string(i + 1) + ". (distance " +
                   format_fixed3(neighbor.distance) + ") " + neighbor.snippet + "\n";
        }
    }
    return out;
}

namespace {

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i > 0) out += sep;
        out += parts[i];
    }
    return out;
}

std::string tool_catalog(const ToolRegistry& registry) {
    std::string out;
    for (const auto& tool : registry.tools()) {
        out += "  " + tool.pathology_id + ": measures " + tool.display_name +
               " from structures: " + join(tool.required_structures, ", ") + "\n";
    }
    return out;
}

constexpr std::string_view kDecisionContract =
    "Reply with exactly one JSON object and nothing else. Use "
    "{\"action\": \"<tool_id>\", \"rationale\": \"<why>\"} to invoke a tool, or "
    "{\"action\": \"STOP\", \"rationale\": \"<why>\"} once the evidence is sufficient. "
    "Valid actions are the unvisited tools listed in the user message, or STOP.";

std::string trim(std::string_view text) {
    std::size_t begin = 0;
    std::size_t end = text.size();
    while (begin < end && std::isspace(static_cast<unsigned char>(text[begin]))) ++begin;
    while (end > begin && std::isspace(static_cast<unsigned char>(text[end - 1]))) --end;
    return std::string(text.substr(begin, end - begin));
}

} // namespace

std::vector<ChatMessage> build_decision_messages(const EvidenceSet& state,
                                                 const std::vector<std::string>& unvisited,
                                                 const ToolRegistry& registry) {
    std::string system = "You are a radiology reporting agent for chest CT studies. You "
                         "gather quantitative evidence by invoking pathology-specific tools, "
                         "one per step, before the final report is written.\n";
    system += "Tools:\n" + tool_catalog(registry);
    system += kDecisionContract;

    std::string user = "Query: " + state.query + "\n";
    user += "Seed report:\n" + state.seed_text + "\n";
    user += render_evidence(state);
    user += "Unvisited tools: " + join(unvisited, ", ") + "\n";
    user += "Choose the next action.";

    return {ChatMessage{Role::system, std::move(system)},
            ChatMessage{Role::user, std::move(user)}};
}

std::string decision_correction_message(const std::vector<std::string>& unvisited) {
    return "That reply was not a single JSON object with a valid action. Allowed actions: " +
           join(unvisited, ", ") +
           ", STOP. Reply with exactly one JSON object of the form "
           "{\"action\": \"...\", \"rationale\": \"...\"}.";
}

std::vector<ChatMessage> build_synthesis_messages(const EvidenceSet& state, AgentMode mode) {
    std::string system = "You are a radiologist writing the Findings section of a chest CT "
                         "report. Use only the evidence provided: quantitative tool features "
                         "and retrieved reference cases. Do not state findings the evidence "
                         "does not support. ";
    if (mode == AgentMode::refine) {
        system += "A draft report is provided; verify each draft statement against the "
                  "evidence, correct statements the evidence contradicts, and keep "
                  "statements it supports.";
    } else {
        system += "Rewrite the seed report into the final findings text.";
    }

    std::string user = "Query: " + state.query + "\n";
    user += (mode == AgentMode::refine ? "Draft report:\n" : "Seed report:\n");
    user += state.seed_text + "\n";
    user += render_evidence(state);
    user += "Write the final report.";

    return {ChatMessage{Role::system, std::move(system)},
            ChatMessage{Role::user, std::move(user)}};
}

std::optional<std::string> extract_first_json_object(std::string_view text) {
    for (std::size_t start = text.find('{'); start != std::string_view::npos;
         start = text.find('{', start + 1)) {
        int depth = 0;
        bool in_string = false;
        bool escaped = false;
        for (std::size_t i = start; i < text.size(); ++i) {
            const char c = text[i];
            if (in_string) {
                if (escaped) {
                    escaped = false;
                } else if (c == '\\') {
                    escaped = true;
                } else if (c == '"') {
                    in_string = false;
                }
                continue;
            }
            if (c == '"') {
                in_string = true;
            } else if (c == '{') {
                ++depth;
            } else if (c == '}') {
                if (--depth == 0) {
                    auto candidate = std::string(text.substr(start, i - start + 1));
                    if (nlohmann::json::accept(candidate)) {
                        return candidate;
                    }
                    break;
                }
            }
        }
    }
    return std::nullopt;
}

EvidenceSet init_evidence(AgentMode mode, std::string query,
                          std::optional<std::string> draft,
                          std::string_view template_text) {
    EvidenceSet state;
    state.query = std::move(query);
    if (mode == AgentMode::refine) {
        if (!draft) {
            throw ValidationError("refine mode requires a draft report");
        }
        state.seed_text = std::move(*draft); // preserved byte-exact
    } else {
        state.seed_text = std::string(template_text);
    }
    return state;
}

namespace {

std::optional<ActionDecision> parse_decision(const std::string& raw,
                                             const std::vector<std::string>& unvisited) {
    const auto object_text = extract_first_json_object(raw);
    if (!object_text) {
        return std::nullopt;
    }
    const auto j = nlohmann::json::parse(*object_text);
    if (!j.is_object() || !j.contains("action") || !j["action"].is_string()) {
        return std::nullopt;
    }
    ActionDecision decision;
    decision.action = j["action"].get<std::string>();
    decision.rationale = j.value("rationale", std::string{});
    if (decision.action == "STOP") {
        return decision;
    }
    if (std::find(unvisited.begin(), unvisited.end(), decision.action) == unvisited.end()) {
        return std::nullopt; // unknown or already-visited tool
    }
    return decision;
}

} // namespace

DecisionOutcome decide_action(const EvidenceSet& state,
                              const std::vector<std::string>& unvisited,
                              const ToolRegistry& registry, ChatBackend& backend,
                              const RunConfig& config) {
    if (unvisited.empty()) {
        throw ValidationError("decide_action needs at least one unvisited tool");
    }
    auto messages = build_decision_messages(state, unvisited, registry);

    DecisionOutcome outcome;
    for (std::uint32_t attempt = 0; attempt <= config.parse_retries; ++attempt) {
        const auto response = backend.complete(ChatRequest(config.model, messages));
        outcome.raw_text = response.content;
        outcome.usage.prompt_tokens += response.usage.prompt_tokens;
        outcome.usage.completion_tokens += response.usage.completion_tokens;
        outcome.usage.total_tokens += response.usage.total_tokens;
        outcome.latency_ms += response.latency_ms;

        if (auto decision = parse_decision(response.content, unvisited)) {
            outcome.decision = std::move(*decision);
            return outcome;
        }
        messages.push_back(ChatMessage{Role::assistant, response.content});
        messages.push_back(ChatMessage{Role::user, decision_correction_message(unvisited)});
    }

    // Deterministic schedule: the first unvisited tool in registry order.
    for (const auto& tool : registry.tools()) {
        if (std::find(unvisited.begin(), unvisited.end(), tool.pathology_id) != unvisited.end()) {
            outcome.decision.action = tool.pathology_id;
            outcome.decision.rationale = "deterministic fallback: next unvisited tool";
            outcome.fallback = true;
            return outcome;
        }
    }
    throw ValidationError("no unvisited tool found for the fallback schedule");
}

StepRecord execute_step(EvidenceSet& state, const StudyBundle& study, const Index& index,
                        const ToolRegistry& registry, const MidPlanes& planes,
                        const ActionDecision& decision, std::size_t k) {
    if (decision.is_stop()) {
        throw ValidationError("execute_step requires a tool action, not STOP");
    }
    for (const auto& item : state.items) {
        if (item.pathology_id == decision.action) {
            throw ValidationError("pathology \"" + decision.action +
                                  "\" already carries evidence in this run");
        }
    }
    StepRecord record;
    record.step = state.items.size() + 1;
    record.decision = decision;

    EvidenceItem item;
    item.step = record.step;
    item.pathology_id = decision.action;
    item.rationale = decision.rationale;
    try {
        const ToolSpec& tool = registry.at(decision.action);
        item.features = run_tool(study, tool, planes);
        item.neighbors = index.knn_query(decision.action, item.features, k);
    } catch (const Error& e) {
        // Degrade in-trace: all-flagged features, no neighbors.
        const ToolSpec* tool = registry.find(decision.action);
        if (tool != nullptr && item.features.names.empty()) {
            item.features.schema_id = tool->schema_id;
            item.features.pathology_id = tool->pathology_id;
            item.features.names = tool->feature_list;
            item.features.values.assign(tool->feature_list.size(), 0.0);
        }
        item.features.undefined.assign(item.features.names.size(), true);
        item.features.values.assign(item.features.names.size(), 0.0);
        item.neighbors.neighbors.clear();
        record.error = e.what();
    }

    record.features = item.features;
    record.neighbors = item.neighbors;
    state.items.push_back(std::move(item));
    return record;
}

SynthesisOutcome synthesize_report(const EvidenceSet& state, ChatBackend& backend,
                                   const RunConfig& config) {
    const auto messages = build_synthesis_messages(state, config.mode);
    const auto response = backend.complete(ChatRequest(config.model, messages));
    SynthesisOutcome outcome;
    outcome.report = trim(response.content);
    outcome.usage = response.usage;
    outcome.latency_ms = response.latency_ms;
    return outcome;
}

namespace {

nlohmann::ordered_json features_json(const FeatureVector& fv) {
    nlohmann::ordered_json feats;
    for (std::size_t i = 0; i < fv.names.size(); ++i) {
        feats[fv.names[i]] = fv.values[i];
    }
    return feats;
}

nlohmann::ordered_json undefined_json(const FeatureVector& fv) {
    auto undef = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < fv.names.size(); ++i) {
        if (fv.undefined[i]) {
            undef.push_back(fv.names[i]);
        }
    }
    return undef;
}

} // namespace

std::string trace_to_json(const RunTrace& trace) {
    nlohmann::ordered_json j;
    auto steps = nlohmann::ordered_json::array();
    for (const auto& record : trace.steps) {
        nlohmann::ordered_json s;
        s["step"] = record.step;
        s["action"] = record.decision.action;
        s["rationale"] = record.decision.rationale;
        s["fallback"] = record.fallback;
        s["raw_text"] = record.raw_text;
        if (record.features) {
            s["features"] = features_json(*record.features);
            s["undefined"] = undefined_json(*record.features);
        } else {
            s["features"] = nullptr;
            s["undefined"] = nlohmann::ordered_json::array();
        }
        auto neighbors = nlohmann::ordered_json::array();
        for (const auto& neighbor : record.neighbors.neighbors) {
            neighbors.push_back({{"entry_id", neighbor.entry_id},
                                 {"distance", neighbor.distance},
                                 {"snippet", neighbor.snippet}});
        }
        s["neighbors"] = std::move(neighbors);
        s["prompt_tokens"] = record.prompt_tokens;
        s["completion_tokens"] = record.completion_tokens;
        s["latency_ms"] = record.latency_ms;
        s["error"] = record.error ? nlohmann::ordered_json(*record.error)
                                  : nlohmann::ordered_json(nullptr);
        steps.push_back(std::move(s));
    }
    j["steps"] = std::move(steps);
    j["synthesis"] = {{"prompt_tokens", trace.synthesis_usage.prompt_tokens},
                      {"completion_tokens", trace.synthesis_usage.completion_tokens},
                      {"latency_ms", trace.synthesis_latency_ms}};
    j["totals"] = {{"prompt_tokens", trace.total_prompt_tokens},
                   {"completion_tokens", trace.total_completion_tokens},
                   {"wall_ms", trace.total_wall_ms}};
    j["report"] = trace.report;
    j["termination"] = std::string(to_string(trace.termination));
    j["aborted"] = trace.aborted;
    j["fallback_used"] = trace.fallback_used;
    return j.dump(2);
}

AgentRunResult run_agent(const StudyBundle& study, const std::string& query,
                         const Index& index, const ToolRegistry& registry,
                         ChatBackend& backend, const RunConfig& config,
                         std::optional<std::string> draft) {
    if (config.k == 0) {
        throw ValidationError("config k must be >= 1");
    }
    const std::size_t max_steps = config.max_steps.value_or(registry.tools().size());
    if (max_steps == 0) {
        throw ValidationError("config max_steps must be >= 1");
    }

    EvidenceSet state =
        init_evidence(config.mode, query, std::move(draft), config.template_text);
    const MidPlanes planes = estimate_midplanes(study);

    RunTrace trace;
    std::vector<std::string> visited;
    auto unvisited_tools = [&] {
        std::vector<std::string> unvisited;
        for (const auto& tool : registry.tools()) {
            if (std::find(visited.begin(), visited.end(), tool.pathology_id) == visited.end()) {
                unvisited.push_back(tool.pathology_id);
            }
        }
        return unvisited;
    };
    auto add_usage = [&trace](const TokenUsage& usage, double latency_ms) {
        trace.total_prompt_tokens += usage.prompt_tokens;
        trace.total_completion_tokens += usage.completion_tokens;
        trace.total_wall_ms += latency_ms;
    };

    while (true) {
        const auto unvisited = unvisited_tools();
        if (unvisited.empty()) {
            trace.termination = Termination::all_tools_visited;
            break;
        }
        if (state.items.size() >= max_steps) {
            trace.termination = Termination::max_steps;
            break;
        }

        DecisionOutcome outcome;
        try {
            outcome = decide_action(state, unvisited, registry, backend, config);
        } catch (const TransportError& e) {
            trace.aborted = true;
            throw AbortedRun(e.what(), std::move(trace));
        } catch (const FixtureError& e) {
            trace.aborted = true;
            throw AbortedRun(e.what(), std::move(trace));
        }
        trace.fallback_used = trace.fallback_used || outcome.fallback;
        add_usage(outcome.usage, outcome.latency_ms);

        if (outcome.decision.is_stop()) {
            StepRecord record;
            record.step = state.items.size() + 1;
            record.decision = outcome.decision;
            record.fallback = outcome.fallback;
            record.raw_text = outcome.raw_text;
            record.prompt_tokens = outcome.usage.prompt_tokens;
            record.completion_tokens = outcome.usage.completion_tokens;
            record.latency_ms = outcome.latency_ms;
            trace.steps.push_back(std::move(record));
            trace.termination = Termination::stop_action;
            break;
        }

        StepRecord record =
            execute_step(state, study, index, registry, planes, outcome.decision, config.k);
        record.fallback = outcome.fallback;
        record.raw_text = outcome.raw_text;
        record.prompt_tokens = outcome.usage.prompt_tokens;
        record.completion_tokens = outcome.usage.completion_tokens;
        record.latency_ms = outcome.latency_ms;
        visited.push_back(outcome.decision.action);
        trace.steps.push_back(std::move(record));
    }

    if (trace.termination == Termination::max_steps && trace.fallback_used) {
        trace.termination = Termination::fallback_schedule;
    }

    SynthesisOutcome synthesis;
    try {
        synthesis = synthesize_report(state, backend, config);
    } catch (const TransportError& e) {
        trace.aborted = true;
        throw AbortedRun(e.what(), std::move(trace));
    } catch (const FixtureError& e) {
        trace.aborted = true;
        throw AbortedRun(e.what(), std::move(trace));
    }
    trace.synthesis_usage = synthesis.usage;
    trace.synthesis_latency_ms = synthesis.latency_ms;
    add_usage(synthesis.usage, synthesis.latency_ms);
    trace.report = synthesis.report;

    return AgentRunResult{synthesis.report, std::move(trace)};
}

} // namespace ctrag
