#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "ctrag/features.hpp"
#include "ctrag/volume.hpp"

namespace ctrag {

/// Presence flags for all 18 pathologies, in canonical order.
class LabelSet {
public:
    LabelSet() = default;

    bool get(std::string_view pathology_id) const;
    void set(std::string_view pathology_id, bool value);
    const std::array<bool, 18>& flags() const { return flags_; }

    static LabelSet from_ground_truth(const std::map<std::string, GroundTruthFinding>& truth);

    bool operator==(const LabelSet&) const = default;

private:
    static std::size_t index_of(std::string_view pathology_id);
    std::array<bool, 18> flags_{};
};

/// Term lists + negation cues for the rule-based label deriver that stands in
/// for a served classifier.
struct Lexicon {
    std::map<std::string, std::vector<std::string>> terms; // pathology -> lowercase terms
    std::vector<std::string> negation_cues;
};

Lexicon default_lexicon();
Lexicon load_lexicon(const std::filesystem::path& path);

/// Sentence-level rule: a pathology is present iff some sentence contains one
/// of its terms with no negation cue before the term, and the sentence is not
/// the canonical negative.
LabelSet derive_labels(const std::string& report, const Lexicon& lexicon);

class RemoteClassifier;

/// Served-classifier counterpart of derive_labels: one POST per report,
/// present iff the returned probability clears the threshold. Pathologies the
/// classifier does not score stay absent.
LabelSet derive_labels_remote(const std::string& report, const RemoteClassifier& classifier,
                              double threshold = 0.5);

struct PrfScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

struct MetricsBundle {
    std::map<std::string, PrfScore> per_pathology; // all 18 keys
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double macro_f1 = 0.0;
    double bleu1 = 0.0;
    double rouge_l = 0.0;
    double meteor = 0.0;
    std::optional<double> laterality_f1;
};

/// Per-pathology binary P/R/F1 over the positive class (0/0 := 0) plus
/// unweighted macro averages.
MetricsBundle prf1(const std::vector<LabelSet>& predicted, const std::vector<LabelSet>& gold);

std::vector<std::string> tokenize(std::string_view text);

/// Modified unigram precision with brevity penalty.
double bleu1(const std::string& candidate, const std::string& reference);

/// LCS F-measure over token sequences.
double rouge_l(const std::string& candidate, const std::string& reference);

/// Exact-match METEOR variant: greedy left-to-right unigram alignment,
/// F = 10PR/(R+9P), chunk penalty 0.5*(chunks/m)^3. No stemming or synonyms.
double meteor_exact(const std::string& candidate, const std::string& reference);

/// Laterality read from the report's pleural-effusion sentences; nullopt when
/// no side is stated.
std::optional<Laterality> predict_laterality(const std::string& report);

/// Micro-averaged F1 over {left, right, bilateral}; an unpredicted case
/// counts as wrong (a false negative, not a false positive).
double laterality_eval(const std::vector<std::string>& reports,
                       const std::vector<Laterality>& gold);

/// The ceil(decile*n) studies with the largest lung volume; ties broken by
/// ascending study_id.
std::set<std::string> oversegmentation_flag(const std::map<std::string, double>& lung_volumes,
                                            double decile = 0.10);

/// The 10 lung-specific pathologies used by the sensitivity analysis.
std::span<const std::string_view> lung_pathology_ids();

struct SensitivityReport {
    double delta_macro_f1_all = 0.0;
    double delta_macro_f1_lung = 0.0;
};

/// Macro-F1 deltas (subset minus full), over all pathologies and restricted
/// to the lung-specific list.
SensitivityReport sensitivity_report(const MetricsBundle& full_metrics,
                                     const MetricsBundle& subset_metrics,
                                     std::span<const std::string_view> lung_ids);

inline constexpr std::array<std::size_t, 7> kDefaultKSweep{1, 3, 5, 7, 9, 11, 13};

struct KSweepRow {
    std::size_t k = 0;
    MetricsBundle metrics;
    std::optional<std::string> error;
};

/// One full evaluation per k, ascending; runner failures are recorded per row.
std::vector<KSweepRow> k_sweep(const std::function<MetricsBundle(std::size_t)>& runner,
                               std::vector<std::size_t> ks = {kDefaultKSweep.begin(),
                                                              kDefaultKSweep.end()});

/// CSV: k,macro_f1,bleu1,rouge_l,meteor
std::string k_sweep_csv(const std::vector<KSweepRow>& rows);

// -- cohort assembly -----------------------------------------------------------

struct CohortCase {
    std::string study_id;
    LabelSet predicted;
    LabelSet gold;
    double bleu1 = 0.0;
    double rouge_l = 0.0;
    double meteor = 0.0;
    std::optional<Laterality> laterality_pred;
    std::optional<Laterality> laterality_gold;
};

/// Classification over the label sets, mean text metrics, and laterality F1
/// over the cases that carry a gold laterality.
MetricsBundle evaluate_cohort(const std::vector<CohortCase>& cases);

/// CSV: study_id,<18 pred>,<18 gold>,bleu1,rouge_l,meteor,laterality_pred,laterality_gold
std::string cohort_csv(const std::vector<CohortCase>& cases);

std::string metrics_to_json(const MetricsBundle& bundle);
MetricsBundle metrics_from_json(const std::string& text);
void save_metrics(const MetricsBundle& bundle, const std::filesystem::path& path);
MetricsBundle load_metrics(const std::filesystem::path& path);

} // namespace ctrag
