#pragma once
// Scoring and threshold selection. Four metrics over a result set:
//   E-P    correct top-1 entities over triggered samples
//   NLU-P  byte-exact rewritten hypotheses over triggered samples
//   TR     triggered samples over all samples
//   CTR    correct triggered hypotheses over all samples (= TR x NLU-P)
// Clean sets report TR only; there is nothing to be correct about. The
// theta sweep reuses one ProcessedQuery per sample across all thresholds.

#include <optional>
#include <string>
#include <vector>

#include "kgqr/pipeline.hpp"
#include "kgqr/synthdata.hpp"

namespace kgqr {

struct MetricsReport {
    std::string label;
    bool clean_set = false;
    size_t total = 0;
    size_t triggered = 0;
    size_t entity_correct = 0;      // triggered and top-1 surface == gold target
    size_t hypothesis_correct = 0;  // triggered and rewritten hypothesis == gold
    // Undefined (not zero) when nothing triggered, and on clean sets.
    std::optional<double> entity_precision;
    std::optional<double> nlu_precision;
    double trigger_rate = 0.0;
    double correct_trigger_rate = 0.0;  // hypothesis_correct / total
    std::string note;                   // "empty subset" when total == 0

    bool operator==(const MetricsReport&) const = default;
};

// Gold hypothesis of a friction sample: its corrupted hypothesis with the
// corrupt text swapped for the target surface. Throws on clean samples and
// when the corrupt text matches no slot (the sample is malformed).
NluHypothesis gold_hypothesis(const RephraseSample& s);

// Scores results against the samples they were produced from, aligned by
// index. A set is clean when every sample is clean. Clean samples inside a
// friction-style set count as incorrect whenever they trigger. With
// always_trigger the threshold is ignored: every sample counts as triggered,
// the entity prediction is the top re-ranked surface, and an untriggered
// result predicts the unchanged input hypothesis.
MetricsReport evaluate(const std::vector<RewriteResult>& results,
                       const std::vector<RephraseSample>& samples, std::string label,
                       bool always_trigger = false);

// Encodes each sample's source utterance once; pair with materialize_all to
// sweep thresholds without re-running the models.
std::vector<ProcessedQuery> process_all(const BiEncoder& l1, const EntityIndex& index,
                                        const CrossEncoder& l2, const EntityCatalog& catalog,
                                        const std::vector<RephraseSample>& samples, int k = 10);

std::vector<RewriteResult> materialize_all(const std::vector<ProcessedQuery>& queries,
                                           double theta,
                                           const std::vector<RephraseSample>& samples);

std::vector<double> default_thetas();  // (3, 4, 5, 6, 7)
inline constexpr double kDefaultCleanTrCap = 0.02;

struct ThetaChoice {
    double theta = 0.0;
    bool feasible = true;  // false: every theta broke the clean cap; the
                           // returned theta has the lowest clean trigger rate
    std::vector<double> thetas;
    std::vector<MetricsReport> friction_reports;  // aligned with thetas
    std::vector<MetricsReport> clean_reports;
};

// Evaluates every theta on both sets, discards thetas whose clean trigger
// rate exceeds the cap, and picks the survivor with the highest friction
// correct trigger rate. Ties go to the larger (more conservative) theta.
ThetaChoice sweep_theta(const std::vector<ProcessedQuery>& friction_queries,
                        const std::vector<RephraseSample>& friction_samples,
                        const std::vector<ProcessedQuery>& clean_queries,
                        const std::vector<RephraseSample>& clean_samples,
                        const std::vector<double>& thetas = default_thetas(),
                        double clean_tr_cap = kDefaultCleanTrCap);

// Overall report plus one per tag: zero_shot, few_shot, kg_relation.
// Empty subsets keep their zero counts and are noted, not dropped.
std::vector<MetricsReport> subset_report(const std::vector<RewriteResult>& results,
                                         const std::vector<RephraseSample>& samples,
                                         bool always_trigger = false);

struct AblationDelta {
    std::string subset;
    std::string metric;
    double delta = 0.0;  // first system minus second

    bool operator==(const AblationDelta&) const = default;
};

// Pairs reports by position (labels must match) and emits a delta for every
// metric defined on both sides.
std::vector<AblationDelta> ablation_deltas(const std::vector<MetricsReport>& a,
                                           const std::vector<MetricsReport>& b);

std::string format_table(const std::vector<MetricsReport>& reports);
// One `key=value ...` line per report; undefined precisions print as
// "undefined", clean sets omit precision and CTR keys entirely.
std::string format_records(const std::vector<MetricsReport>& reports);

}  // namespace kgqr
