#include "kgqr/pipeline.hpp"

#include <algorithm>
#include <numeric>

#include "kgqr/common.hpp"

namespace kgqr {

static void check_field(const std::string& s, const char* what) {
    if (s.find('|') != std::string::npos)
        throw Error(std::string("hypothesis ") + what + " contains '|': " + s);
}

std::string NluHypothesis::serialize() const {
    check_field(domain, "domain");
    check_field(intent, "intent");
    std::string out = domain + " | " + intent;
    for (const auto& [name, value] : slots) {
        check_field(name, "slot name");
        check_field(value, "slot value");
        out += " | ";
        out += name;
        out += ": ";
        out += value;
    }
    return out;
}

NluHypothesis NluHypothesis::parse(const std::string& line) {
    std::vector<std::string> fields = split_char(line, '|');
    if (fields.size() < 2) throw Error("hypothesis needs domain and intent: " + line);
    NluHypothesis h;
    h.domain = trim(fields[0]);
    h.intent = trim(fields[1]);
    for (size_t i = 2; i < fields.size(); ++i) {
        std::string f = trim(fields[i]);
        size_t colon = f.find(':');
        if (colon == std::string::npos) throw Error("slot field without ':': " + f);
        std::string value = f.substr(colon + 1);
        if (!value.empty() && value.front() == ' ') value.erase(0, 1);
        h.slots.emplace_back(f.substr(0, colon), value);
    }
    return h;
}

// Whole-word occurrences are bounded by spaces or the string's edges.
static std::string replace_whole_word(const std::string& text, const std::string& from,
                                      const std::string& to, bool* hit) {
    std::string out;
    size_t i = 0;
    while (i <= text.size()) {
        size_t p = text.find(from, i);
        if (p == std::string::npos) {
            out += text.substr(i);
            break;
        }
        size_t after = p + from.size();
        bool bounded = (p == 0 || text[p - 1] == ' ') && (after == text.size() || text[after] == ' ');
        if (bounded) {
            out += text.substr(i, p - i);
            out += to;
            *hit = true;
            i = after;
        } else {
            out += text.substr(i, p - i + 1);
            i = p + 1;
        }
    }
    return out;
}

NluHypothesis rewrite_hypothesis(const NluHypothesis& hyp, const std::string& span_text,
                                 const std::string& entity, bool* replaced) {
    if (span_text.empty()) throw Error("rewrite_hypothesis: empty span text");
    bool hit = false;
    NluHypothesis out = hyp;
    for (auto& [name, value] : out.slots) value = replace_whole_word(value, span_text, entity, &hit);
    if (replaced) *replaced = hit;
    return hit ? out : hyp;
}

ProcessedQuery process_query(const BiEncoder& l1, const EntityIndex& index,
                             const CrossEncoder& l2, const EntityCatalog& catalog,
                             const std::string& utterance, int k) {
    ProcessedQuery q;
    q.utterance = utterance;
    q.max_span_len = l2.config().max_span_len;
    if (tokenize(utterance).empty()) {
        q.diagnostic = "empty utterance";
        return q;
    }
    q.retrieved = top_k(index, l1, utterance, k);
    if (q.retrieved.empty()) {
        q.diagnostic = "no candidates retrieved";
        return q;
    }

    std::vector<const EntityEntry*> cands;
    cands.reserve(q.retrieved.size());
    for (const auto& s : q.retrieved) {
        const EntityEntry* e = catalog.find(s.surface);
        if (!e) throw Error("pipeline: index surface missing from catalog: " + s.surface);
        cands.push_back(e);
    }

    // Same ordering rule as rerank(); the raw span score columns of the
    // winning pair are kept so theta can be applied later.
    nn::Tape t;
    std::vector<CrossEncoder::Pair> pairs;
    pairs.reserve(cands.size());
    std::vector<double> scores;
    scores.reserve(cands.size());
    for (const EntityEntry* e : cands) {
        pairs.push_back(l2.encode_candidate(t, utterance, *e));
        scores.push_back(t.scalar(pairs.back().score));
    }
    std::vector<size_t> order(cands.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return cands[a]->surface < cands[b]->surface;
    });
    q.reranked.reserve(order.size());
    for (size_t idx : order) q.reranked.push_back({cands[idx]->surface, cands[idx]->ids, scores[idx]});

    const CrossEncoder::Pair& top = pairs[order[0]];
    auto [sn, en] = l2.span_scores(t, top);
    const nn::Mat& sv = t.value(sn);
    const nn::Mat& ev = t.value(en);
    for (int i = 0; i < sv.rows(); ++i) q.start_scores.push_back(sv(i, 0));
    for (int i = 0; i < ev.rows(); ++i) q.end_scores.push_back(ev(i, 0));
    q.utt_tokens = top.enc.tokens;
    return q;
}

RewriteResult materialize(const ProcessedQuery& q, double theta, const NluHypothesis* hypothesis) {
    RewriteResult r;
    r.trace = q;
    if (!q.reranked.empty()) r.entity = q.reranked.front().surface;
    if (!q.diagnostic.empty() || q.reranked.empty()) return r;

    r.span = decode_span(q.start_scores, q.end_scores, theta, q.max_span_len);
    if (r.span.is_null) return r;
    if (r.span.end > static_cast<int>(q.utt_tokens.size()))
        throw Error("materialize: span exceeds kept tokens");

    std::vector<std::string> span_words(q.utt_tokens.begin() + (r.span.start - 1),
                                        q.utt_tokens.begin() + r.span.end);
    std::string span_text = join(span_words, " ");
    if (span_text == r.entity) return r;  // replacing would be a no-op

    r.triggered = true;
    std::vector<std::string> words = split_ws(q.utterance);  // original bytes, not lowercased
    std::vector<std::string> out(words.begin(), words.begin() + (r.span.start - 1));
    out.push_back(r.entity);
    out.insert(out.end(), words.begin() + r.span.end, words.end());
    r.rewritten_utterance = join(out, " ");

    if (hypothesis) {
        bool replaced = false;
        r.rewritten_hypothesis = rewrite_hypothesis(*hypothesis, span_text, r.entity, &replaced);
        if (!replaced) r.trace.diagnostic = "span text not found in any hypothesis slot";
    }
    return r;
}

RewriteResult rewrite(const BiEncoder& l1, const EntityIndex& index, const CrossEncoder& l2,
                      const EntityCatalog& catalog, const std::string& utterance, int k,
                      double theta, const NluHypothesis* hypothesis) {
    return materialize(process_query(l1, index, l2, catalog, utterance, k), theta, hypothesis);
}

}  // namespace kgqr
