#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ctrag/chat.hpp"

namespace ctrag {

struct ExtractionExample {
    std::string report;
    std::string extraction;
};

/// Per-pathology four-shot extraction prompt: a shared instruction template
/// parameterized by the pathology display name plus exactly four examples.
struct ExtractionPromptSet {
    std::string pathology_id;
    std::string display_name;
    std::string instruction_template; // contains the {pathology} placeholder
    std::array<ExtractionExample, 4> examples;
};

struct ExtractedSnippet {
    std::string source_id;
    std::string pathology_id;
    std::string text;
    bool is_canonical_negative = false;
};

/// The fixed no-finding sentence for a pathology display name.
std::string canonical_negative(std::string_view pathology_display_name);

/// Shared instruction template with the strict output policy.
std::string_view default_instruction_template();

ExtractionPromptSet load_prompt_set(const std::filesystem::path& path);
void save_prompt_set(const ExtractionPromptSet& prompt_set, const std::filesystem::path& path);

/// Default worked prompt set (arterial wall calcification four-shot).
ExtractionPromptSet sample_prompt_set();

/// System message: the instruction with {pathology} substituted. User
/// message: an [EXAMPLES] block with the four examples, then a [TASK] block
/// ending with "Extraction:". Byte-deterministic.
std::vector<ChatMessage> build_extraction_prompt(const ExtractionPromptSet& prompt_set,
                                                 const std::string& report);

struct ExtractionFailure {
    std::string source_id;
    std::string error;
};

struct ExtractionOutcome {
    std::vector<ExtractedSnippet> snippets;
    std::vector<ExtractionFailure> failures;
};

/// One LLM call per report; empty replies and transport errors are recorded
/// as failures rather than thrown.
ExtractionOutcome extract_snippets(
    const std::vector<std::pair<std::string, std::string>>& reports,
    const ExtractionPromptSet& prompt_set, ChatBackend& backend, const std::string& model);

struct VerificationScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::uint64_t true_positives = 0;
    std::uint64_t false_positives = 0;
    std::uint64_t false_negatives = 0;
    bool no_positives = false; // degenerate: no positives predicted or labeled
};

/// Rule-based Template-F1: predicted present iff the snippet is not the
/// canonical negative; binary P/R/F1 on the present class with 0/0 := 0.
std::map<std::string, VerificationScore> template_f1_verify(
    const std::vector<ExtractedSnippet>& snippets,
    const std::map<std::string, bool>& labels);

// JSONL persistence: {"source_id":…,"pathology":…,"text":…,"canonical_negative":…}
void save_snippets(const std::vector<ExtractedSnippet>& snippets,
                   const std::filesystem::path& path);
std::vector<ExtractedSnippet> load_snippets(const std::filesystem::path& path);

/// HTTP hook for a served snippet classifier: POST {"text":…} to
/// <base>/classify and read {"probabilities":{pathology_id:p}}. Probability
/// >= 0.5 counts as present.
class RemoteClassifier {
public:
    RemoteClassifier(std::string base_url, double timeout_s = 30.0);

    std::map<std::string, double> classify(const std::string& text) const;
    bool predicts_present(const std::string& text, const std::string& pathology_id) const;

private:
    std::string host_;
    std::string path_prefix_;
    double timeout_s_;
};

/// Classifier-F1 counterpart of template_f1_verify, using remote predictions.
std::map<std::string, VerificationScore> classifier_f1_verify(
    const std::vector<ExtractedSnippet>& snippets,
    const std::map<std::string, bool>& labels, const RemoteClassifier& classifier);

} // namespace ctrag
