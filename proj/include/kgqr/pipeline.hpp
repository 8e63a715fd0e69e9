#pragma once
// End-to-end rewrite. Dense retrieval proposes candidate entities, the
// cross-encoder re-ranks them and scores the corrupt span, and a textual
// replacement swaps the span for the winning surface. A rewrite triggers
// only when the span is non-null and the winning surface differs from the
// span text; everything else leaves the input untouched.

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kgqr/rerankspan.hpp"

namespace kgqr {

// One pipe-separated line: `Domain | Intent | name: value | name: value`.
// Fields may not contain '|'; slot values keep everything after "name: "
// verbatim, so values with ':' survive the round trip.
struct NluHypothesis {
    std::string domain;
    std::string intent;
    std::vector<std::pair<std::string, std::string>> slots;

    std::string serialize() const;
    static NluHypothesis parse(const std::string& line);

    bool operator==(const NluHypothesis&) const = default;
};

// Replaces span_text with entity in every slot value where it appears as a
// whole-word substring (bounded by spaces or the value's edges). Domain and
// intent are never touched. *replaced reports whether any slot matched; a
// miss returns the hypothesis unchanged.
NluHypothesis rewrite_hypothesis(const NluHypothesis& hyp, const std::string& span_text,
                                 const std::string& entity, bool* replaced = nullptr);

// Theta-independent half of a rewrite: retrieval order, re-rank order, and
// the span score columns of the winning pair. materialize() applies the
// threshold, so a theta sweep encodes each query once.
struct ProcessedQuery {
    std::string utterance;
    std::vector<std::string> utt_tokens;    // kept tokens of the top-1 pair, lowercased
    std::vector<ScoredSurface> retrieved;   // retrieval order, best first
    std::vector<RankedCandidate> reranked;  // re-rank order, best first
    std::vector<double> start_scores;       // sentinel + utterance rows of the top-1 pair
    std::vector<double> end_scores;
    int max_span_len = 0;
    std::string diagnostic;  // non-empty when the model stages were skipped
};

struct RewriteResult {
    bool triggered = false;
    SpanPrediction span;
    std::string entity;  // top-ranked surface; empty when nothing ranked
    std::optional<std::string> rewritten_utterance;     // set only when triggered
    std::optional<NluHypothesis> rewritten_hypothesis;  // set when triggered and a
                                                        // hypothesis was supplied
    ProcessedQuery trace;
};

ProcessedQuery process_query(const BiEncoder& l1, const EntityIndex& index,
                             const CrossEncoder& l2, const EntityCatalog& catalog,
                             const std::string& utterance, int k);

// Decodes the span at theta and applies the trigger rule. The rewritten
// utterance is the input's whitespace tokens rejoined with single spaces,
// with the span's word positions replaced by the winning surface; tokens
// outside the span keep their original bytes. The span text compared against
// the surface (and substituted in the hypothesis) is lowercased, matching
// what the models saw.
RewriteResult materialize(const ProcessedQuery& q, double theta,
                          const NluHypothesis* hypothesis = nullptr);

RewriteResult rewrite(const BiEncoder& l1, const EntityIndex& index, const CrossEncoder& l2,
                      const EntityCatalog& catalog, const std::string& utterance, int k,
                      double theta, const NluHypothesis* hypothesis = nullptr);

}  // namespace kgqr
