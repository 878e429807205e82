#include "ctrag/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

#include "ctrag/errors.hpp"
#include "ctrag/snippets.hpp"

namespace ctrag {

namespace {

std::string lowercase(std::string_view text) {
    std::string out(text);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

std::string trim(std::string_view text) {
    std::size_t begin = 0;
    std::size_t end = text.size();
    while (begin < end && std::isspace(static_cast<unsigned char>(text[begin]))) ++begin;
    while (end > begin && std::isspace(static_cast<unsigned char>(text[end - 1]))) --end;
    return std::string(text.substr(begin, end - begin));
}

std::vector<std::string> split_sentences(const std::string& report) {
    std::vector<std::string> sentences;
    std::string current;
    for (const char c : report) {
        if (c == '.' || c == ';' || c == '\n') {
            if (!trim(current).empty()) {
                sentences.push_back(current);
            }
            current.clear();
        } else {
            current += c;
        }
    }
    if (!trim(current).empty()) {
        sentences.push_back(current);
    }
    return sentences;
}

constexpr std::array<std::string_view, 6> kNegationCues{
    "no ", "not ", "without", "absence of", "normal", "unremarkable"};

constexpr std::array<std::string_view, 10> kLungPathologies{
    "Emphysema",          "Atelectasis",
    "Consolidation",      "LungOpacity",
    "LungNodule",         "PulmonaryFibroticSequela",
    "MosaicAttenuationPattern", "PeribronchialThickening",
    "Bronchiectasis",     "InterlobularSeptalThickening"};

PrfScore prf_from_counts(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn) {
    PrfScore s;
    s.precision = (tp + fp) ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    s.recall = (tp + fn) ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    s.f1 = (s.precision + s.recall > 0.0)
               ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
               : 0.0;
    return s;
}

std::string csv_number(double value) {
    char buffer[64];
    std::snprintf(buffer, sizeof buffer, "%.6f", value);
    return buffer;
}

} // namespace

std::size_t LabelSet::index_of(std::string_view pathology_id) {
    const auto ids = pathology_ids();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] == pathology_id) {
            return i;
        }
    }
    throw ValidationError("unknown pathology \"" + std::string(pathology_id) + "\"");
}

bool LabelSet::get(std::string_view pathology_id) const {
    return flags_[index_of(pathology_id)];
}

void LabelSet::set(std::string_view pathology_id, bool value) {
    flags_[index_of(pathology_id)] = value;
}

LabelSet LabelSet::from_ground_truth(const std::map<std::string, GroundTruthFinding>& truth) {
    LabelSet labels;
    for (const auto& [pathology_id, finding] : truth) {
        labels.set(pathology_id, finding.present);
    }
    return labels;
}

Lexicon default_lexicon() {
    Lexicon lexicon;
    lexicon.negation_cues.assign(kNegationCues.begin(), kNegationCues.end());
    lexicon.terms = {
        {"MedicalMaterial",
         {"medical material", "catheter", "sternotomy", "stent", "pacemaker", "surgical clip"}},
        {"ArterialWallCalcification",
         {"arterial wall calcification", "atheroma plaque", "calcified atheroma",
          "aortic calcification"}},
        {"Cardiomegaly", {"cardiomegaly", "enlarged heart", "cardiac enlargement"}},
        {"PericardialEffusion", {"pericardial effusion"}},
        {"CoronaryArteryWallCalcification",
         {"coronary artery wall calcification", "coronary artery calcification",
          "coronary calcification"}},
        {"HiatalHernia", {"hiatal hernia", "hiatus hernia"}},
        {"Lymphadenopathy", {"lymphadenopathy", "enlarged lymph node"}},
        {"Emphysema", {"emphysema", "emphysematous"}},
        {"Atelectasis", {"atelectasis", "atelectatic"}},
        {"LungNodule", {"lung nodule", "pulmonary nodule", "nodule"}},
        {"LungOpacity", {"lung opacity", "ground-glass", "ground glass", "opacity", "opacities"}},
        {"PulmonaryFibroticSequela",
         {"fibrotic sequela", "fibrotic sequelae", "fibrosis", "fibrotic changes"}},
        {"PleuralEffusion", {"pleural effusion", "pleural effusions"}},
        {"MosaicAttenuationPattern", {"mosaic attenuation"}},
        {"PeribronchialThickening", {"peribronchial thickening", "peribronchial wall thickening"}},
        {"Consolidation", {"consolidation", "consolidations"}},
        {"Bronchiectasis", {"bronchiectasis", "bronchiectatic"}},
        {"InterlobularSeptalThickening",
         {"interlobular septal thickening", "septal thickening"}},
    };
    return lexicon;
}

Lexicon load_lexicon(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open lexicon \"" + path.string() + "\"");
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("lexicon parse error: " + std::string(e.what()));
    }
    Lexicon lexicon;
    for (const auto& [pathology_id, terms] : j.at("terms").items()) {
        for (const auto& term : terms) {
            lexicon.terms[pathology_id].push_back(lowercase(term.get<std::string>()));
        }
    }
    if (j.contains("negation_cues")) {
        for (const auto& cue : j.at("negation_cues")) {
            lexicon.negation_cues.push_back(lowercase(cue.get<std::string>()));
        }
    } else {
        lexicon.negation_cues.assign(kNegationCues.begin(), kNegationCues.end());
    }
    return lexicon;
}

LabelSet derive_labels(const std::string& report, const Lexicon& lexicon) {
    for (const auto id : pathology_ids()) {
        if (!lexicon.terms.contains(std::string(id))) {
            throw ValidationError("lexicon is missing terms for \"" + std::string(id) + "\"");
        }
    }

    LabelSet labels;
    const auto sentences = split_sentences(report);
    for (const auto id : pathology_ids()) {
        const auto& terms = lexicon.terms.at(std::string(id));
        const std::string canonical = canonical_negative(pathology_display_name(id));
        const std::string canonical_no_dot = canonical.substr(0, canonical.size() - 1);
        bool present = false;
        for (const auto& sentence : sentences) {
            const std::string trimmed = trim(sentence);
            if (trimmed == canonical || trimmed == canonical_no_dot) {
                continue;
            }
            const std::string lower = lowercase(sentence);
            for (const auto& term : terms) {
                const std::size_t term_pos = lower.find(term);
                if (term_pos == std::string::npos) {
                    continue;
                }
                bool negated = false;
                for (const auto& cue : lexicon.negation_cues) {
                    const std::size_t cue_pos = lower.find(cue);
                    if (cue_pos != std::string::npos && cue_pos < term_pos) {
                        negated = true;
                        break;
                    }
                }
                if (!negated) {
                    present = true;
                    break;
                }
            }
            if (present) {
                break;
            }
        }
        labels.set(id, present);
    }
    return labels;
}

LabelSet derive_labels_remote(const std::string& report, const RemoteClassifier& classifier,
                              double threshold) {
    const auto probabilities = classifier.classify(report);
    LabelSet labels;
    for (const auto id : pathology_ids()) {
        const auto it = probabilities.find(std::string(id));
        labels.set(id, it != probabilities.end() && it->second >= threshold);
    }
    return labels;
}

MetricsBundle prf1(const std::vector<LabelSet>& predicted, const std::vector<LabelSet>& gold) {
    if (predicted.size() != gold.size()) {
        throw ValidationError("predicted/gold length mismatch");
    }
    if (predicted.empty()) {
        throw ValidationError("prf1 requires at least one case");
    }
    MetricsBundle bundle;
    const auto ids = pathology_ids();
    double sum_p = 0.0;
    double sum_r = 0.0;
    double sum_f = 0.0;
    for (std::size_t j = 0; j < ids.size(); ++j) {
        std::uint64_t tp = 0;
        std::uint64_t fp = 0;
        std::uint64_t fn = 0;
        for (std::size_t i = 0; i < predicted.size(); ++i) {
            const bool p = predicted[i].flags()[j];
            const bool g = gold[i].flags()[j];
            if (p && g) ++tp;
            if (p && !g) ++fp;
            if (!p && g) ++fn;
        }
        const PrfScore score = prf_from_counts(tp, fp, fn);
        bundle.per_pathology.emplace(std::string(ids[j]), score);
        sum_p += score.precision;
        sum_r += score.recall;
        sum_f += score.f1;
    }
    const double n = static_cast<double>(ids.size());
    bundle.macro_precision = sum_p / n;
    bundle.macro_recall = sum_r / n;
    bundle.macro_f1 = sum_f / n;
    return bundle;
}

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    for (const char c : text) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
            current += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        } else if (!current.empty()) {
            tokens.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) {
        tokens.push_back(std::move(current));
    }
    return tokens;
}

double bleu1(const std::string& candidate, const std::string& reference) {
    const auto cand = tokenize(candidate);
    const auto ref = tokenize(reference);
    if (cand.empty() || ref.empty()) {
        return 0.0;
    }
    std::map<std::string, std::uint64_t> cand_counts;
    std::map<std::string, std::uint64_t> ref_counts;
    for (const auto& token : cand) ++cand_counts[token];
    for (const auto& token : ref) ++ref_counts[token];
    std::uint64_t clipped = 0;
    for (const auto& [token, count] : cand_counts) {
        const auto it = ref_counts.find(token);
        if (it != ref_counts.end()) {
            clipped += std::min(count, it->second);
        }
    }
    const double c = static_cast<double>(cand.size());
    const double r = static_cast<double>(ref.size());
    const double p1 = static_cast<double>(clipped) / c;
    const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
    return bp * p1;
}

namespace {

std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0);
    std::vector<std::size_t> curr(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            if (a[i - 1] == b[j - 1]) {
                curr[j] = prev[j - 1] + 1;
            } else {
                curr[j] = std::max(prev[j], curr[j - 1]);
            }
        }
        std::swap(prev, curr);
    }
    return prev[b.size()];
}

} // namespace

double rouge_l(const std::string& candidate, const std::string& reference) {
    const auto cand = tokenize(candidate);
    const auto ref = tokenize(reference);
    if (cand.empty() || ref.empty()) {
        return 0.0;
    }
    const double lcs = static_cast<double>(lcs_length(cand, ref));
    if (lcs == 0.0) {
        return 0.0;
    }
    const double p = lcs / static_cast<double>(cand.size());
    const double r = lcs / static_cast<double>(ref.size());
    return 2.0 * p * r / (p + r);
}

double meteor_exact(const std::string& candidate, const std::string& reference) {
    const auto cand = tokenize(candidate);
    const auto ref = tokenize(reference);
    if (cand.empty() || ref.empty()) {
        return 0.0;
    }
    std::vector<bool> used(ref.size(), false);
    std::vector<std::pair<std::size_t, std::size_t>> alignment; // (cand index, ref index)
    for (std::size_t i = 0; i < cand.size(); ++i) {
        for (std::size_t j = 0; j < ref.size(); ++j) {
            if (!used[j] && ref[j] == cand[i]) {
                used[j] = true;
                alignment.emplace_back(i, j);
                break;
            }
        }
    }
    const std::size_t m = alignment.size();
    if (m == 0) {
        return 0.0;
    }
    const double p = static_cast<double>(m) / static_cast<double>(cand.size());
    const double r = static_cast<double>(m) / static_cast<double>(ref.size());
    const double f = 10.0 * p * r / (r + 9.0 * p);

    std::size_t chunks = 1;
    for (std::size_t a = 1; a < alignment.size(); ++a) {
        const bool contiguous = alignment[a].first == alignment[a - 1].first + 1 &&
                                alignment[a].second == alignment[a - 1].second + 1;
        if (!contiguous) {
            ++chunks;
        }
    }
    const double chunk_ratio = static_cast<double>(chunks) / static_cast<double>(m);
    const double penalty = 0.5 * chunk_ratio * chunk_ratio * chunk_ratio;
    return f * (1.0 - penalty);
}

std::optional<Laterality> predict_laterality(const std::string& report) {
    static const std::array<std::string_view, 2> effusion_terms{"pleural effusion",
                                                                "pleural effusions"};
    bool saw_left = false;
    bool saw_right = false;
    bool saw_bilateral = false;
    for (const auto& sentence : split_sentences(report)) {
        const std::string lower = lowercase(sentence);
        const bool mentions_effusion =
            std::any_of(effusion_terms.begin(), effusion_terms.end(),
                        [&lower](std::string_view term) {
                            return lower.find(term) != std::string::npos;
                        });
        if (!mentions_effusion) {
            continue;
        }
        if (lower.find("bilateral") != std::string::npos) saw_bilateral = true;
        if (lower.find("left") != std::string::npos) saw_left = true;
        if (lower.find("right") != std::string::npos) saw_right = true;
    }
    if (saw_bilateral || (saw_left && saw_right)) {
        return Laterality::bilateral;
    }
    if (saw_left) {
        return Laterality::left;
    }
    if (saw_right) {
        return Laterality::right;
    }
    return std::nullopt;
}

namespace {

double laterality_micro_f1(const std::vector<std::optional<Laterality>>& predicted,
                           const std::vector<Laterality>& gold) {
    std::uint64_t tp = 0;
    std::uint64_t predicted_count = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        if (predicted[i]) {
            ++predicted_count;
            if (*predicted[i] == gold[i]) {
                ++tp;
            }
        }
    }
    const double p =
        predicted_count ? static_cast<double>(tp) / static_cast<double>(predicted_count) : 0.0;
    const double r = gold.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(gold.size());
    return (p + r > 0.0) ? 2.0 * p * r / (p + r) : 0.0;
}

} // namespace

double laterality_eval(const std::vector<std::string>& reports,
                       const std::vector<Laterality>& gold) {
    if (reports.size() != gold.size()) {
        throw ValidationError("reports/gold length mismatch");
    }
    std::vector<std::optional<Laterality>> predicted;
    predicted.reserve(reports.size());
    for (const auto& report : reports) {
        predicted.push_back(predict_laterality(report));
    }
    return laterality_micro_f1(predicted, gold);
}

std::set<std::string> oversegmentation_flag(const std::map<std::string, double>& lung_volumes,
                                            double decile) {
    if (lung_volumes.empty()) {
        throw ValidationError("oversegmentation_flag requires a nonempty volume map");
    }
    if (!(decile > 0.0 && decile < 1.0)) {
        throw ValidationError("decile must lie in (0, 1)");
    }
    std::vector<std::pair<std::string, double>> entries(lung_volumes.begin(),
                                                        lung_volumes.end());
    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) {
            return a.second > b.second;
        }
        return a.first < b.first;
    });
    const auto count = static_cast<std::size_t>(
        std::ceil(decile * static_cast<double>(entries.size())));
    std::set<std::string> flagged;
    for (std::size_t i = 0; i < count && i < entries.size(); ++i) {
        flagged.insert(entries[i].first);
    }
    return flagged;
}

std::span<const std::string_view> lung_pathology_ids() {
    return kLungPathologies;
}

SensitivityReport sensitivity_report(const MetricsBundle& full_metrics,
                                     const MetricsBundle& subset_metrics,
                                     std::span<const std::string_view> lung_ids) {
    auto lung_macro = [&lung_ids](const MetricsBundle& bundle) {
        double sum = 0.0;
        for (const auto id : lung_ids) {
            const auto it = bundle.per_pathology.find(std::string(id));
            if (it == bundle.per_pathology.end()) {
                throw ValidationError("metrics bundle is missing pathology \"" +
                                      std::string(id) + "\"");
            }
            sum += it->second.f1;
        }
        return sum / static_cast<double>(lung_ids.size());
    };
    SensitivityReport report;
    report.delta_macro_f1_all = subset_metrics.macro_f1 - full_metrics.macro_f1;
    report.delta_macro_f1_lung = lung_macro(subset_metrics) - lung_macro(full_metrics);
    return report;
}

std::vector<KSweepRow> k_sweep(const std::function<MetricsBundle(std::size_t)>& runner,
                               std::vector<std::size_t> ks) {
    std::sort(ks.begin(), ks.end());
    ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
    std::vector<KSweepRow> rows;
    rows.reserve(ks.size());
    for (const std::size_t k : ks) {
        KSweepRow row;
        row.k = k;
        try {
            row.metrics = runner(k);
        } catch (const std::exception& e) {
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string k_sweep_csv(const std::vector<KSweepRow>& rows) {
    std::string csv = "k,macro_f1,bleu1,rouge_l,meteor\n";
    for (const auto& row : rows) {
        csv += std::to_string(row.k) + ',';
        if (row.error) {
            csv += "error,error,error,error\n";
            continue;
        }
        csv += csv_number(row.metrics.macro_f1) + ',' + csv_number(row.metrics.bleu1) + ',' +
               csv_number(row.metrics.rouge_l) + ',' + csv_number(row.metrics.meteor) + '\n';
    }
    return csv;
}

MetricsBundle evaluate_cohort(const std::vector<CohortCase>& cases) {
    if (cases.empty()) {
        throw ValidationError("evaluate_cohort requires at least one case");
    }
    std::vector<LabelSet> predicted;
    std::vector<LabelSet> gold;
    predicted.reserve(cases.size());
    gold.reserve(cases.size());
    for (const auto& c : cases) {
        predicted.push_back(c.predicted);
        gold.push_back(c.gold);
    }
    MetricsBundle bundle = prf1(predicted, gold);

    double bleu_sum = 0.0;
    double rouge_sum = 0.0;
    double meteor_sum = 0.0;
    for (const auto& c : cases) {
        bleu_sum += c.bleu1;
        rouge_sum += c.rouge_l;
        meteor_sum += c.meteor;
    }
    const double n = static_cast<double>(cases.size());
    bundle.bleu1 = bleu_sum / n;
    bundle.rouge_l = rouge_sum / n;
    bundle.meteor = meteor_sum / n;

    std::vector<std::optional<Laterality>> lat_pred;
    std::vector<Laterality> lat_gold;
    for (const auto& c : cases) {
        if (c.laterality_gold) {
            lat_pred.push_back(c.laterality_pred);
            lat_gold.push_back(*c.laterality_gold);
        }
    }
    if (!lat_gold.empty()) {
        bundle.laterality_f1 = laterality_micro_f1(lat_pred, lat_gold);
    }
    return bundle;
}

std::string cohort_csv(const std::vector<CohortCase>& cases) {
    const auto ids = pathology_ids();
    std::string csv = "study_id";
    for (const auto id : ids) {
        csv += ",pred_" + std::string(id);
    }
    for (const auto id : ids) {
        csv += ",gold_" + std::string(id);
    }
    csv += ",bleu1,rouge_l,meteor,laterality_pred,laterality_gold\n";
    for (const auto& c : cases) {
        csv += c.study_id;
        for (const bool flag : c.predicted.flags()) {
            csv += flag ? ",1" : ",0";
        }
        for (const bool flag : c.gold.flags()) {
            csv += flag ? ",1" : ",0";
        }
        csv += ',' + csv_number(c.bleu1) + ',' + csv_number(c.rouge_l) + ',' +
               csv_number(c.meteor);
        csv += ',';
        csv += c.laterality_pred ? to_string(*c.laterality_pred) : "none";
        csv += ',';
        csv += c.laterality_gold ? to_string(*c.laterality_gold) : "none";
        csv += '\n';
    }
    return csv;
}

std::string metrics_to_json(const MetricsBundle& bundle) {
    nlohmann::ordered_json j;
    nlohmann::ordered_json per;
    for (const auto& [pathology_id, score] : bundle.per_pathology) {
        per[pathology_id] = {{"precision", score.precision},
                             {"recall", score.recall},
                             {"f1", score.f1}};
    }
    j["per_pathology"] = std::move(per);
    j["macro_precision"] = bundle.macro_precision;
    j["macro_recall"] = bundle.macro_recall;
    j["macro_f1"] = bundle.macro_f1;
    j["bleu1"] = bundle.bleu1;
    j["rouge_l"] = bundle.rouge_l;
    j["meteor"] = bundle.meteor;
    j["laterality_f1"] = bundle.laterality_f1 ? nlohmann::ordered_json(*bundle.laterality_f1)
                                              : nlohmann::ordered_json(nullptr);
    return j.dump(2);
}

MetricsBundle metrics_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("metrics parse error: " + std::string(e.what()));
    }
    MetricsBundle bundle;
    for (const auto& [pathology_id, score] : j.at("per_pathology").items()) {
        bundle.per_pathology.emplace(
            pathology_id, PrfScore{score.at("precision").get<double>(),
                                   score.at("recall").get<double>(),
                                   score.at("f1").get<double>()});
    }
    bundle.macro_precision = j.at("macro_precision").get<double>();
    bundle.macro_recall = j.at("macro_recall").get<double>();
    bundle.macro_f1 = j.at("macro_f1").get<double>();
    bundle.bleu1 = j.value("bleu1", 0.0);
    bundle.rouge_l = j.value("rouge_l", 0.0);
    bundle.meteor = j.value("meteor", 0.0);
    if (j.contains("laterality_f1") && !j.at("laterality_f1").is_null()) {
        bundle.laterality_f1 = j.at("laterality_f1").get<double>();
    }
    return bundle;
}

void save_metrics(const MetricsBundle& bundle, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write metrics \"" + path.string() + "\"");
    }
    out << metrics_to_json(bundle) << '\n';
}

MetricsBundle load_metrics(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open metrics \"" + path.string() + "\"");
    }
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return metrics_from_json(text);
}

} // namespace ctrag
