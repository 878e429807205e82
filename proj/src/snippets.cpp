#include "ctrag/snippets.hpp"

#include <cctype>
#include <fstream>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "ctrag/errors.hpp"
#include "ctrag/features.hpp"

namespace ctrag {

namespace {

std::string trim(std::string_view text) {
    std::size_t begin = 0;
    std::size_t end = text.size();
    while (begin < end && std::isspace(static_cast<unsigned char>(text[begin]))) ++begin;
    while (end > begin && std::isspace(static_cast<unsigned char>(text[end - 1]))) --end;
    return std::string(text.substr(begin, end - begin));
}

std::string substitute_pathology(std::string_view text, std::string_view display_name) {
    static constexpr std::string_view placeholder = "{pathology}";
    std::string out;
    out.reserve(text.size());
    std::size_t pos = 0;
    while (true) {
        const std::size_t hit = text.find(placeholder, pos);
        if (hit == std::string_view::npos) {
            out.append(text.substr(pos));
            return out;
        }
        out.append(text.substr(pos, hit - pos));
        out.append(display_name);
        pos = hit + placeholder.size();
    }
}

constexpr std::string_view kInstructionTemplate =
    "You are a precise radiology report information extractor specialized in "
    "identifying information about {pathology}.\n"
    "Your goal:\n"
    "Extract only the sentences from a chest CT report that describe {pathology}.\n"
    "Rules:\n"
    "- Include both positive findings (presence of {pathology}) and negative findings "
    "(absence of {pathology}).\n"
    "- Extract sentences only from the Findings section of the report.\n"
    "- Do not include unrelated findings.\n"
    "- Return exact sentences from the report — do not paraphrase, summarize, or infer.\n"
    "- If a sentence discusses multiple pathologies, extract only the content related to "
    "{pathology}.\n"
    "- If multiple sentences discuss {pathology}, extract all of them.\n"
    "- If information about {pathology} is not present, output exactly:\n"
    "  No sign of {pathology} was found in the scan.";

} // namespace

std::string canonical_negative(std::string_view pathology_display_name) {
    if (pathology_display_name.empty()) {
        throw ValidationError("canonical_negative requires a non-empty pathology name");
    }
    return "No sign of " + std::string(pathology_display_name) + " was found in the scan.";
}

std::string_view default_instruction_template() {
    return kInstructionTemplate;
}

ExtractionPromptSet load_prompt_set(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open prompt set \"" + path.string() + "\"");
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("prompt set parse error: " + std::string(e.what()));
    }
    ExtractionPromptSet set;
    set.pathology_id = j.at("pathology_id").get<std::string>();
    set.display_name = j.at("display_name").get<std::string>();
    set.instruction_template = j.at("instruction_template").get<std::string>();
    const auto& examples = j.at("examples");
    if (!examples.is_array() || examples.size() != 4) {
        throw ValidationError("prompt set must carry exactly four examples");
    }
    for (std::size_t i = 0; i < 4; ++i) {
        set.examples[i].report = examples[i].at("report").get<std::string>();
        set.examples[i].extraction = examples[i].at("extraction").get<std::string>();
        if (set.examples[i].report.empty() || set.examples[i].extraction.empty()) {
            throw ValidationError("prompt set examples must be non-empty");
        }
    }
    if (set.instruction_template.find("{pathology}") == std::string::npos) {
        throw ValidationError("instruction template must contain the {pathology} placeholder");
    }
    return set;
}

void save_prompt_set(const ExtractionPromptSet& prompt_set, const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    j["pathology_id"] = prompt_set.pathology_id;
    j["display_name"] = prompt_set.display_name;
    j["instruction_template"] = prompt_set.instruction_template;
    auto examples = nlohmann::ordered_json::array();
    for (const auto& example : prompt_set.examples) {
        examples.push_back({{"report", example.report}, {"extraction", example.extraction}});
    }
    j["examples"] = std::move(examples);
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write prompt set \"" + path.string() + "\"");
    }
    out << j.dump(2) << '\n';
}

ExtractionPromptSet sample_prompt_set() {
    ExtractionPromptSet set;
    set.pathology_id = "ArterialWallCalcification";
    set.display_name = "Arterial wall calcification";
    set.instruction_template = std::string(kInstructionTemplate);
    set.examples[0] = {
        "Findings: No lymph node was observed in the supraclavicular fossa. Trachea and "
        "both main bronchi are patent. There are calcified atheroma plaques in the "
        "thoracic and abdominal aorta. Lung parenchyma is normal.",
        "There are calcified atheroma plaques in the thoracic and abdominal aorta."};
    set.examples[1] = {
        "Findings: Trachea, both main bronchi are open. Calcific atheroma plaques are "
        "observed in the aorta and coronary arteries. Heart size is within normal limits.",
        "Calcific atheroma plaques are observed in the aorta."};
    set.examples[2] = {
        "Findings: There is a centrally located primary tumoral lesion in the upper lobe "
        "of the left lung. Mediastinal structures are otherwise unremarkable.",
        "No sign of Arterial wall calcification was found in the scan."};
    set.examples[3] = {
        "Findings: Trachea and both main bronchi are open. There are peripheral and "
        "centrally located ground-glass areas in both lungs. Pleural spaces are clear.",
        "No sign of Arterial wall calcification was found in the scan."};
    return set;
}

std::vector<ChatMessage> build_extraction_prompt(const ExtractionPromptSet& prompt_set,
                                                 const std::string& report) {
    const std::string system =
        substitute_pathology(prompt_set.instruction_template, prompt_set.display_name);

    std::string user = "[EXAMPLES]\n";
    for (std::size_t i = 0; i < prompt_set.examples.size(); ++i) {
        const auto& example = prompt_set.examples[i];
        user += "Example " + std::to_string(i + 1) + ": {\n";
        user += "  \"report\": " + nlohmann::json(example.report).dump() + ",\n";
        user += "  \"extraction\": " + nlohmann::json(example.extraction).dump() + "\n";
        user += "}\n\n";
    }
    user += "[TASK]\n";
    user += "Extract information from the following chest CT report.\n";
    user += "Report:\n" + report + "\n\n";
    user += "Extraction:";

    return {ChatMessage{Role::system, system}, ChatMessage{Role::user, std::move(user)}};
}

ExtractionOutcome extract_snippets(
    const std::vector<std::pair<std::string, std::string>>& reports,
    const ExtractionPromptSet& prompt_set, ChatBackend& backend, const std::string& model) {
    ExtractionOutcome outcome;
    const std::string negative = canonical_negative(prompt_set.display_name);
    for (const auto& [source_id, report] : reports) {
        try {
            const auto messages = build_extraction_prompt(prompt_set, report);
            const auto response = backend.complete(ChatRequest(model, messages));
            const std::string text = trim(response.content);
            if (text.empty()) {
                outcome.failures.push_back({source_id, "empty extraction reply"});
                continue;
            }
            ExtractedSnippet snippet;
            snippet.source_id = source_id;
            snippet.pathology_id = prompt_set.pathology_id;
            snippet.text = text;
            snippet.is_canonical_negative = text == negative;
            outcome.snippets.push_back(std::move(snippet));
        } catch (const Error& e) {
            outcome.failures.push_back({source_id, e.what()});
        }
    }
    return outcome;
}

namespace {

VerificationScore score_counts(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn) {
    VerificationScore score;
    score.true_positives = tp;
    score.false_positives = fp;
    score.false_negatives = fn;
    score.precision = (tp + fp) ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    score.recall = (tp + fn) ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    score.f1 = (score.precision + score.recall > 0.0)
                   ? 2.0 * score.precision * score.recall / (score.precision + score.recall)
                   : 0.0;
    score.no_positives = (tp + fp + fn) == 0;
    return score;
}

template <typename Predict>
std::map<std::string, VerificationScore> verify_with(
    const std::vector<ExtractedSnippet>& snippets, const std::map<std::string, bool>& labels,
    Predict&& predicted_present) {
    std::map<std::string, std::array<std::uint64_t, 3>> counts; // tp, fp, fn
    for (const auto& snippet : snippets) {
        const auto label_it = labels.find(snippet.source_id);
        if (label_it == labels.end()) {
            throw ValidationError("source \"" + snippet.source_id + "\" has no label");
        }
        const bool predicted = predicted_present(snippet);
        const bool actual = label_it->second;
        auto& c = counts[snippet.pathology_id];
        if (predicted && actual) ++c[0];
        if (predicted && !actual) ++c[1];
        if (!predicted && actual) ++c[2];
    }
    std::map<std::string, VerificationScore> scores;
    for (const auto& [pathology_id, c] : counts) {
        scores.emplace(pathology_id, score_counts(c[0], c[1], c[2]));
    }
    return scores;
}

} // namespace

std::map<std::string, VerificationScore> template_f1_verify(
    const std::vector<ExtractedSnippet>& snippets, const std::map<std::string, bool>& labels) {
    return verify_with(snippets, labels,
                       [](const ExtractedSnippet& s) { return !s.is_canonical_negative; });
}

void save_snippets(const std::vector<ExtractedSnippet>& snippets,
                   const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write snippets \"" + path.string() + "\"");
    }
    for (const auto& snippet : snippets) {
        nlohmann::ordered_json j;
        j["source_id"] = snippet.source_id;
        j["pathology"] = snippet.pathology_id;
        j["text"] = snippet.text;
        j["canonical_negative"] = snippet.is_canonical_negative;
        out << j.dump() << '\n';
    }
}

std::vector<ExtractedSnippet> load_snippets(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open snippets \"" + path.string() + "\"");
    }
    std::vector<ExtractedSnippet> snippets;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            ExtractedSnippet snippet;
            snippet.source_id = j.at("source_id").get<std::string>();
            snippet.pathology_id = j.at("pathology").get<std::string>();
            snippet.text = j.at("text").get<std::string>();
            if (j.contains("canonical_negative")) {
                snippet.is_canonical_negative = j.at("canonical_negative").get<bool>();
            } else {
                snippet.is_canonical_negative =
                    trim(snippet.text) ==
                    canonical_negative(pathology_display_name(snippet.pathology_id));
            }
            snippets.push_back(std::move(snippet));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("snippet line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return snippets;
}

namespace {

// Shared with chat.cpp conceptually; small enough to keep local.
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

} // namespace

RemoteClassifier::RemoteClassifier(std::string base_url, double timeout_s)
    : timeout_s_(timeout_s) {
    if (base_url.empty()) {
        throw ValidationError("remote classifier requires a base URL");
    }
    split_base_url(base_url, host_, path_prefix_);
}

std::map<std::string, double> RemoteClassifier::classify(const std::string& text) const {
    httplib::Client client(host_);
    client.set_connection_timeout(std::chrono::duration<double>(timeout_s_));
    client.set_read_timeout(std::chrono::duration<double>(timeout_s_));
    nlohmann::ordered_json body;
    body["text"] = text;
    const auto result = client.Post(path_prefix_ + "/classify", body.dump(), "application/json");
    if (!result) {
        throw TransportError("classifier connection error: " +
                             httplib::to_string(result.error()));
    }
    if (result->status < 200 || result->status >= 300) {
        throw TransportError("classifier HTTP status " + std::to_string(result->status));
    }
    nlohmann::json parsed;
    try {
        parsed = nlohmann::json::parse(result->body);
    } catch (const nlohmann::json::parse_error& e) {
        throw TransportError("classifier returned malformed JSON: " + std::string(e.what()));
    }
    std::map<std::string, double> probabilities;
    for (const auto& [pathology_id, p] : parsed.at("probabilities").items()) {
        probabilities.emplace(pathology_id, p.get<double>());
    }
    return probabilities;
}

bool RemoteClassifier::predicts_present(const std::string& text,
                                        const std::string& pathology_id) const {
    const auto probabilities = classify(text);
    const auto it = probabilities.find(pathology_id);
    return it != probabilities.end() && it->second >= 0.5;
}

std::map<std::string, VerificationScore> classifier_f1_verify(
    const std::vector<ExtractedSnippet>& snippets, const std::map<std::string, bool>& labels,
    const RemoteClassifier& classifier) {
    return verify_with(snippets, labels, [&classifier](const ExtractedSnippet& s) {
        return classifier.predicts_present(s.text, s.pathology_id);
    });
}

} // namespace ctrag
