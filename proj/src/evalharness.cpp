#include "kgqr/evalharness.hpp"

#include <fmt/format.h>

#include <algorithm>

#include "kgqr/common.hpp"

namespace kgqr {

NluHypothesis gold_hypothesis(const RephraseSample& s) {
    if (s.clean) throw Error("evaluate: clean samples have no gold hypothesis");
    bool replaced = false;
    NluHypothesis gold = rewrite_hypothesis(s.hypothesis, s.corrupt_text, s.target_entity,
                                            &replaced);
    if (!replaced)
        throw Error(fmt::format("evaluate: corrupt text '{}' matches no slot of '{}'",
                                s.corrupt_text, s.hypothesis.serialize()));
    return gold;
}

MetricsReport evaluate(const std::vector<RewriteResult>& results,
                       const std::vector<RephraseSample>& samples, std::string label,
                       bool always_trigger) {
    if (results.size() != samples.size())
        throw Error(fmt::format("evaluate: {} results vs {} samples", results.size(),
                                samples.size()));
    MetricsReport rep;
    rep.label = std::move(label);
    rep.total = results.size();
    rep.clean_set = !samples.empty() &&
                    std::all_of(samples.begin(), samples.end(),
                                [](const RephraseSample& s) { return s.clean; });
    if (rep.total == 0) {
        rep.note = "empty subset";
        return rep;
    }

    for (size_t i = 0; i < results.size(); ++i) {
        const RewriteResult& r = results[i];
        const RephraseSample& s = samples[i];
        const bool triggered = always_trigger || r.triggered;
        if (!triggered) continue;
        ++rep.triggered;
        if (rep.clean_set || s.clean) continue;  // a triggered clean sample is just wrong

        const std::string top =
            r.trace.reranked.empty() ? std::string() : r.trace.reranked.front().surface;
        if (!top.empty() && top == s.target_entity) ++rep.entity_correct;

        const std::string gold = gold_hypothesis(s).serialize();
        const std::string predicted = r.rewritten_hypothesis ? r.rewritten_hypothesis->serialize()
                                                             : s.hypothesis.serialize();
        if (predicted == gold) ++rep.hypothesis_correct;
    }

    rep.trigger_rate = static_cast<double>(rep.triggered) / static_cast<double>(rep.total);
    if (!rep.clean_set) {
        rep.correct_trigger_rate =
            static_cast<double>(rep.hypothesis_correct) / static_cast<double>(rep.total);
        if (rep.triggered > 0) {
            rep.entity_precision = static_cast<double>(rep.entity_correct) /
                                   static_cast<double>(rep.triggered);
            rep.nlu_precision = static_cast<double>(rep.hypothesis_correct) /
                                static_cast<double>(rep.triggered);
        }
    }
    return rep;
}

std::vector<ProcessedQuery> process_all(const BiEncoder& l1, const EntityIndex& index,
                                        const CrossEncoder& l2, const EntityCatalog& catalog,
                                        const std::vector<RephraseSample>& samples, int k) {
    std::vector<ProcessedQuery> out;
    out.reserve(samples.size());
    for (const RephraseSample& s : samples)
        out.push_back(process_query(l1, index, l2, catalog, s.source, k));
    return out;
}

std::vector<RewriteResult> materialize_all(const std::vector<ProcessedQuery>& queries,
                                           double theta,
                                           const std::vector<RephraseSample>& samples) {
    if (queries.size() != samples.size())
        throw Error(fmt::format("materialize: {} queries vs {} samples", queries.size(),
                                samples.size()));
    std::vector<RewriteResult> out;
    out.reserve(queries.size());
    for (size_t i = 0; i < queries.size(); ++i)
        out.push_back(materialize(queries[i], theta, &samples[i].hypothesis));
    return out;
}

std::vector<double> default_thetas() { return {3.0, 4.0, 5.0, 6.0, 7.0}; }

ThetaChoice sweep_theta(const std::vector<ProcessedQuery>& friction_queries,
                        const std::vector<RephraseSample>& friction_samples,
                        const std::vector<ProcessedQuery>& clean_queries,
                        const std::vector<RephraseSample>& clean_samples,
                        const std::vector<double>& thetas, double clean_tr_cap) {
    if (thetas.empty()) throw Error("sweep: no thresholds given");
    if (clean_tr_cap < 0.0 || clean_tr_cap > 1.0)
        throw Error(fmt::format("sweep: clean trigger cap {} outside [0, 1]", clean_tr_cap));

    ThetaChoice choice;
    choice.thetas = thetas;
    for (double theta : thetas) {
        choice.friction_reports.push_back(
            evaluate(materialize_all(friction_queries, theta, friction_samples),
                     friction_samples, fmt::format("friction@theta={:g}", theta)));
        choice.clean_reports.push_back(
            evaluate(materialize_all(clean_queries, theta, clean_samples), clean_samples,
                     fmt::format("clean@theta={:g}", theta)));
    }

    int best = -1;
    for (size_t i = 0; i < thetas.size(); ++i) {
        if (choice.clean_reports[i].trigger_rate > clean_tr_cap) continue;
        if (best < 0 ||
            choice.friction_reports[i].correct_trigger_rate >
                choice.friction_reports[static_cast<size_t>(best)].correct_trigger_rate ||
            (choice.friction_reports[i].correct_trigger_rate ==
                 choice.friction_reports[static_cast<size_t>(best)].correct_trigger_rate &&
             thetas[i] > thetas[static_cast<size_t>(best)]))
            best = static_cast<int>(i);
    }
    if (best < 0) {
        choice.feasible = false;  // pick the least bad clean rate anyway
        for (size_t i = 0; i < thetas.size(); ++i) {
            if (best < 0 ||
                choice.clean_reports[i].trigger_rate <
                    choice.clean_reports[static_cast<size_t>(best)].trigger_rate ||
                (choice.clean_reports[i].trigger_rate ==
                     choice.clean_reports[static_cast<size_t>(best)].trigger_rate &&
                 thetas[i] > thetas[static_cast<size_t>(best)]))
                best = static_cast<int>(i);
        }
    }
    choice.theta = thetas[static_cast<size_t>(best)];
    return choice;
}

std::vector<MetricsReport> subset_report(const std::vector<RewriteResult>& results,
                                         const std::vector<RephraseSample>& samples,
                                         bool always_trigger) {
    if (results.size() != samples.size())
        throw Error(fmt::format("subsets: {} results vs {} samples", results.size(),
                                samples.size()));
    std::vector<MetricsReport> out;
    out.push_back(evaluate(results, samples, "overall", always_trigger));

    const std::pair<std::string, bool RephraseSample::*> tags[] = {
        {"zero_shot", &RephraseSample::zero_shot},
        {"few_shot", &RephraseSample::few_shot},
        {"kg_relation", &RephraseSample::kg_relation},
    };
    for (const auto& [name, member] : tags) {
        std::vector<RewriteResult> rs;
        std::vector<RephraseSample> ss;
        for (size_t i = 0; i < samples.size(); ++i) {
            if (!(samples[i].*member)) continue;
            rs.push_back(results[i]);
            ss.push_back(samples[i]);
        }
        out.push_back(evaluate(rs, ss, name, always_trigger));
    }
    return out;
}

std::vector<AblationDelta> ablation_deltas(const std::vector<MetricsReport>& a,
                                           const std::vector<MetricsReport>& b) {
    if (a.size() != b.size())
        throw Error(fmt::format("ablation: {} reports vs {}", a.size(), b.size()));
    std::vector<AblationDelta> out;
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i].label != b[i].label)
            throw Error(fmt::format("ablation: subset '{}' paired with '{}'", a[i].label,
                                    b[i].label));
        out.push_back({a[i].label, "trigger_rate", a[i].trigger_rate - b[i].trigger_rate});
        if (a[i].clean_set || b[i].clean_set) continue;
        out.push_back({a[i].label, "correct_trigger_rate",
                       a[i].correct_trigger_rate - b[i].correct_trigger_rate});
        if (a[i].entity_precision && b[i].entity_precision)
            out.push_back({a[i].label, "entity_precision",
                           *a[i].entity_precision - *b[i].entity_precision});
        if (a[i].nlu_precision && b[i].nlu_precision)
            out.push_back({a[i].label, "nlu_precision",
                           *a[i].nlu_precision - *b[i].nlu_precision});
    }
    return out;
}

namespace {

std::string cell(const std::optional<double>& v) {
    return v ? fmt::format("{:.4f}", *v) : std::string("-");
}

}  // namespace

std::string format_table(const std::vector<MetricsReport>& reports) {
    std::string out = fmt::format("{:<24} {:>7} {:>9} {:>8} {:>8} {:>8} {:>8}\n", "set", "total",
                                  "triggered", "TR", "E-P", "NLU-P", "CTR");
    for (const MetricsReport& r : reports) {
        out += fmt::format("{:<24} {:>7} {:>9} {:>8.4f} {:>8} {:>8} {:>8}", r.label, r.total,
                           r.triggered, r.trigger_rate, cell(r.entity_precision),
                           cell(r.nlu_precision),
                           r.clean_set ? std::string("-")
                                       : fmt::format("{:.4f}", r.correct_trigger_rate));
        if (!r.note.empty()) out += fmt::format("  [{}]", r.note);
        out += '\n';
    }
    return out;
}

std::string format_records(const std::vector<MetricsReport>& reports) {
    std::string out;
    for (const MetricsReport& r : reports) {
        out += fmt::format("set={} total={} triggered={} trigger_rate={:.6f}", r.label, r.total,
                           r.triggered, r.trigger_rate);
        if (!r.clean_set) {
            out += fmt::format(
                " entity_correct={} hypothesis_correct={} entity_precision={} "
                "nlu_precision={} correct_trigger_rate={:.6f}",
                r.entity_correct, r.hypothesis_correct,
                r.entity_precision ? fmt::format("{:.6f}", *r.entity_precision) : "undefined",
                r.nlu_precision ? fmt::format("{:.6f}", *r.nlu_precision) : "undefined",
                r.correct_trigger_rate);
        }
        if (!r.note.empty()) out += fmt::format(" note={}", r.note);
        out += '\n';
    }
    return out;
}

}  // namespace kgqr
