#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ctrag/chat.hpp"
#include "ctrag/errors.hpp"
#include "ctrag/features.hpp"
#include "ctrag/retrieval.hpp"
#include "ctrag/volume.hpp"

namespace ctrag {

/// Neutral boilerplate that seeds template-mode runs; overridable via the
/// template_text config key.
inline constexpr std::string_view kDefaultTemplateText =
    "The chest CT examination is reported below. Lungs, pleura, mediastinum, "
    "heart, and vessels were evaluated. Findings: to be determined per "
    "structured evidence.";

enum class AgentMode { template_based, refine };

std::string_view to_string(AgentMode mode);
AgentMode agent_mode_from_string(std::string_view text);

/// One reasoning step's worth of evidence: the tool's features plus the
/// snippets retrieved for them.
struct EvidenceItem {
    std::size_t step = 0; // 1-based, strictly increasing
    std::string pathology_id;
    FeatureVector features;
    RetrievalResult neighbors;
    std::string rationale;
};

struct EvidenceSet {
    std::string query;
    std::string seed_text;
    std::vector<EvidenceItem> items; // at most one per pathology
};

struct ActionDecision {
    std::string action; // pathology_id or "STOP"
    std::string rationale;

    bool is_stop() const { return action == "STOP"; }
};

struct RunConfig {
    AgentMode mode = AgentMode::template_based;
    std::size_t k = 3;
    std::optional<std::size_t> max_steps; // default: number of registered tools
    std::uint32_t parse_retries = 2;
    std::string model = "default";
    std::string template_text = std::string(kDefaultTemplateText);
};

enum class Termination { stop_action, all_tools_visited, max_steps, fallback_schedule };

std::string_view to_string(Termination reason);

struct StepRecord {
    std::size_t step = 0;
    ActionDecision decision;
    bool fallback = false;    // decision came from the deterministic schedule
    std::string raw_text;     // last raw LLM reply for this decision
    std::optional<FeatureVector> features; // absent on the STOP record
    RetrievalResult neighbors;
    std::uint64_t prompt_tokens = 0;
    std::uint64_t completion_tokens = 0;
    double latency_ms = 0.0;
    std::optional<std::string> error; // tool/index failure captured in-trace
};

/// Full audit record of one run; with a scripted backend its JSON form is
/// byte-reproducible.
struct RunTrace {
    std::vector<StepRecord> steps;
    TokenUsage synthesis_usage;
    double synthesis_latency_ms = 0.0;
    std::uint64_t total_prompt_tokens = 0;
    std::uint64_t total_completion_tokens = 0;
    double total_wall_ms = 0.0;
    std::string report;
    Termination termination = Termination::stop_action;
    bool aborted = false;
    bool fallback_used = false;
};

std::string trace_to_json(const RunTrace& trace);

/// Thrown when a transport error aborts a run; carries the partial trace.
struct AbortedRun : Error {
    AbortedRun(const std::string& message, RunTrace partial)
        : Error(message), trace(std::move(partial)) {}
    RunTrace trace;
};

// -- deterministic prompt construction ----------------------------------------

/// Feature/neighbor rendering contract: values at exactly 3 decimals,
/// undefined features as "n/a", neighbors numbered with 3-decimal distances.
std::string format_fixed3(double value);
std::string render_evidence(const EvidenceSet& state);

std::vector<ChatMessage> build_decision_messages(const EvidenceSet& state,
                                                 const std::vector<std::string>& unvisited,
                                                 const ToolRegistry& registry);
std::string decision_correction_message(const std::vector<std::string>& unvisited);
std::vector<ChatMessage> build_synthesis_messages(const EvidenceSet& state, AgentMode mode);

/// First balanced JSON object embedded in free text, if any parses.
std::optional<std::string> extract_first_json_object(std::string_view text);

// -- operations ----------------------------------------------------------------

EvidenceSet init_evidence(AgentMode mode, std::string query,
                          std::optional<std::string> draft,
                          std::string_view template_text = kDefaultTemplateText);

struct DecisionOutcome {
    ActionDecision decision;
    std::string raw_text;
    TokenUsage usage;
    double latency_ms = 0.0;
    bool fallback = false;
};

/// Asks the backend for the next action under the strict single-JSON-object
/// contract; after parse_retries failed re-asks, falls back to the first
/// unvisited tool in registry order.
DecisionOutcome decide_action(const EvidenceSet& state,
                              const std::vector<std::string>& unvisited,
                              const ToolRegistry& registry, ChatBackend& backend,
                              const RunConfig& config);

/// Runs the tool, retrieves neighbors, and appends the EvidenceItem. Tool or
/// index failures are captured in the returned record (all-flagged features,
/// empty neighbors) rather than thrown.
StepRecord execute_step(EvidenceSet& state, const StudyBundle& study, const Index& index,
                        const ToolRegistry& registry, const MidPlanes& planes,
                        const ActionDecision& decision, std::size_t k);

struct SynthesisOutcome {
    std::string report;
    TokenUsage usage;
    double latency_ms = 0.0;
};

SynthesisOutcome synthesize_report(const EvidenceSet& state, ChatBackend& backend,
                                   const RunConfig& config);

struct AgentRunResult {
    std::string report;
    RunTrace trace;
};

/// The full loop: decide -> tool -> retrieve -> update evidence, until STOP,
/// every tool has been visited, or the step budget runs out; then synthesize.
AgentRunResult run_agent(const StudyBundle& study, const std::string& query,
                         const Index& index, const ToolRegistry& registry,
                         ChatBackend& backend, const RunConfig& config,
                         std::optional<std::string> draft = std::nullopt);

} // namespace ctrag
