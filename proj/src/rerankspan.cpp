#include "kgqr/rerankspan.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace kgqr {

using nn::Mat;

double span_score(const Mat& w_s, const Mat& w_e, const Mat& tokens, int i, int j) {
    if (w_s.rows() != 1 || w_e.rows() != 1 || w_s.cols() != tokens.cols() ||
        w_e.cols() != tokens.cols())
        throw Error("span_score: head vectors must be 1 x H");
    if (i < 0 || j < i || j >= tokens.rows()) throw Error("span_score: span out of range");
    double s = 0.0;
    for (int c = 0; c < tokens.cols(); ++c) s += w_s(0, c) * tokens(i, c);
    for (int c = 0; c < tokens.cols(); ++c) s += w_e(0, c) * tokens(j, c);
    return s;
}

SpanPrediction decode_span(const std::vector<double>& start_scores,
                           const std::vector<double>& end_scores, double theta,
                           int max_span_len) {
    if (start_scores.empty() || start_scores.size() != end_scores.size())
        throw Error("decode_span: score vectors must align and cover the sentinel");
    const int last = static_cast<int>(start_scores.size()) - 1;
    const double null_score = start_scores[0] + end_scores[0];

    double best = -std::numeric_limits<double>::infinity();
    int bi = 0, bj = 0;
    for (int i = 1; i <= last; ++i) {
        const int jmax = std::min(last, i + max_span_len - 1);
        for (int j = i; j <= jmax; ++j) {
            const double s = start_scores[i] + end_scores[j];
            if (s > best) {
                best = s;
                bi = i;
                bj = j;
            }
        }
    }
    if (bi > 0 && best - null_score > theta) return {bi, bj, best, false};
    return {0, 0, null_score, true};
}

CrossEncoder::CrossEncoder(const CrossEncoderConfig& cfg, const Vocab& vocab,
                           const EmbeddingTable* emb, nn::ParamStore* store, std::string prefix)
    : cfg_(cfg),
      vocab_(&vocab),
      emb_(emb),
      store_(store),
      prefix_(std::move(prefix)),
      text_enc_(cfg.text, vocab, store, prefix_ + ".txt") {
    if (cfg_.use_gat) {
        if (!emb_)
            throw Error("cross-encoder: node embeddings required when the GAT tower is on");
        gat_.emplace(cfg_.gat, emb_->dim(), &emb_->rel_vecs, store, prefix_ + ".gat");
    }
    const int joint = cfg_.text.hidden + cfg_.gat.hidden;
    store_->ensure(prefix_ + ".rank.w1", joint, cfg_.rank_hidden, nn::Init::UniformFanIn);
    store_->ensure(prefix_ + ".rank.b1", 1, cfg_.rank_hidden, nn::Init::Zero);
    store_->ensure(prefix_ + ".rank.w2", cfg_.rank_hidden, 1, nn::Init::UniformFanIn);
    store_->ensure(prefix_ + ".rank.b2", 1, 1, nn::Init::Zero);
    store_->ensure(prefix_ + ".span.start", 1, cfg_.text.hidden, nn::Init::UniformFanIn);
    store_->ensure(prefix_ + ".span.end", 1, cfg_.text.hidden, nn::Init::UniformFanIn);
}

CrossEncoder::Pair CrossEncoder::encode_pair_text(nn::Tape& t, const std::string& utterance,
                                                  const std::string& entity_text,
                                                  const Subgraph* sg) const {
    Pair p;
    p.enc = text_enc_.encode_pair(t, utterance, entity_text);
    int pooled = text_enc_.pooled(t, p.enc);
    if (cfg_.use_gat && sg) {
        GatInput in = build_gat_input(*sg, [this](int id) { return emb_->node(id); });
        p.gat = gat_->encode(t, in);
    } else {
        p.gat = t.constant(Mat::Zero(1, cfg_.gat.hidden));
    }
    int joint = t.concat_cols(pooled, p.gat);
    int h = t.leaky_relu(
        t.add_rowvec(t.matmul(joint, t.param(store_->at(prefix_ + ".rank.w1"))),
                     t.param(store_->at(prefix_ + ".rank.b1"))),
        0.0);
    p.score = t.add_rowvec(t.matmul(h, t.param(store_->at(prefix_ + ".rank.w2"))),
                           t.param(store_->at(prefix_ + ".rank.b2")));
    return p;
}

CrossEncoder::Pair CrossEncoder::encode_candidate(nn::Tape& t, const std::string& utterance,
                                                  const EntityEntry& e) const {
    return encode_pair_text(t, utterance, build_entity_text(e.surface, e.descriptions),
                            &e.subgraph);
}

std::pair<int, int> CrossEncoder::span_scores(nn::Tape& t, const Pair& p) const {
    std::vector<int> rows(static_cast<size_t>(p.enc.utt_tokens) + 1);
    std::iota(rows.begin(), rows.end(), 0);
    int window = t.gather_rows(p.enc.seq, rows);
    int s = t.matmul_nt(window, t.param(store_->at(prefix_ + ".span.start")));
    int e = t.matmul_nt(window, t.param(store_->at(prefix_ + ".span.end")));
    return {s, e};
}

static std::vector<double> col_vec(const nn::Tape& t, int node) {
    const Mat& m = t.value(node);
    std::vector<double> v(static_cast<size_t>(m.rows()));
    for (int r = 0; r < m.rows(); ++r) v[static_cast<size_t>(r)] = m(r, 0);
    return v;
}

SpanPrediction CrossEncoder::predict_span_text(const std::string& utterance,
                                               const std::string& entity_text, const Subgraph* sg,
                                               double theta) const {
    nn::Tape t;
    Pair p = encode_pair_text(t, utterance, entity_text, sg);
    auto [s, e] = span_scores(t, p);
    return decode_span(col_vec(t, s), col_vec(t, e), theta, cfg_.max_span_len);
}

SpanPrediction CrossEncoder::predict_span(const std::string& utterance, const EntityEntry& e,
                                          double theta) const {
    return predict_span_text(utterance, build_entity_text(e.surface, e.descriptions),
                             &e.subgraph, theta);
}

double CrossEncoder::pair_score(const std::string& utterance, const EntityEntry& e) const {
    nn::Tape t;
    return t.scalar(encode_candidate(t, utterance, e).score);
}

RerankResult rerank(const CrossEncoder& model, const std::string& utterance,
                    const std::vector<const EntityEntry*>& candidates, double theta) {
    if (candidates.empty()) throw Error("rerank: no candidates");
    nn::Tape t;
    std::vector<CrossEncoder::Pair> pairs;
    pairs.reserve(candidates.size());
    std::vector<double> scores;
    scores.reserve(candidates.size());
    for (const EntityEntry* e : candidates) {
        pairs.push_back(model.encode_candidate(t, utterance, *e));
        scores.push_back(t.scalar(pairs.back().score));
    }

    std::vector<size_t> order(candidates.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return candidates[a]->surface < candidates[b]->surface;
    });

    RerankResult out;
    out.ranked.reserve(order.size());
    for (size_t idx : order)
        out.ranked.push_back({candidates[idx]->surface, candidates[idx]->ids, scores[idx]});

    const CrossEncoder::Pair& top = pairs[order[0]];
    auto [s, e] = model.span_scores(t, top);
    out.span = decode_span(col_vec(t, s), col_vec(t, e), theta, model.config().max_span_len);
    out.utt_tokens = top.enc.tokens;
    return out;
}

int l2_sample_loss(nn::Tape& t, const CrossEncoder& model, const EntityCatalog& catalog,
                   const TrainSampleL2& s, double lambda_rank, double lambda_span) {
    const EntityEntry* pos = catalog.find(s.positive);
    if (!pos) throw Error("l2 sample loss: pairing surface not in catalog: " + s.positive);
    CrossEncoder::Pair p0 = model.encode_candidate(t, s.utterance, *pos);

    int loss = -1;
    if (s.has_span && !s.hard_negatives.empty()) {
        std::vector<int> cand_scores = {p0.score};
        for (const auto& neg : s.hard_negatives) {
            const EntityEntry* e = catalog.find(neg);
            if (e) cand_scores.push_back(model.encode_candidate(t, s.utterance, *e).score);
        }
        if (cand_scores.size() > 1) {
            int row = t.transpose(t.stack_rows(cand_scores));
            loss = t.affine(t.nll_row(row, 0, 0), lambda_rank, 0.0);
        }
    }

    auto [sn, en] = model.span_scores(t, p0);
    const int gold_start = s.has_span ? s.span_start + 1 : 0;
    const int gold_end = s.has_span ? s.span_end + 1 : 0;
    const int window = static_cast<int>(t.value(sn).rows());
    if (s.has_span && (s.span_start < 0 || s.span_start > s.span_end || gold_end >= window))
        throw Error("l2 sample loss: gold span outside the encoded window");
    int span_ce = t.add(t.nll_row(t.transpose(sn), 0, gold_start),
                        t.nll_row(t.transpose(en), 0, gold_end));
    int span_term = t.affine(span_ce, lambda_span, 0.0);
    return loss < 0 ? span_term : t.add(loss, span_term);
}

TrainL2Stats train_l2(CrossEncoder& model, const EntityCatalog& catalog,
                      const std::vector<TrainSampleL2>& samples, const TrainL2Config& cfg) {
    if (cfg.batch <= 0) throw Error("train_l2: batch must be positive");
    TrainL2Stats stats;
    const int max_utt = model.config().text.max_len - 2;
    std::vector<TrainSampleL2> kept;
    kept.reserve(samples.size());
    for (const auto& s : samples) {
        if (!catalog.find(s.positive)) {
            ++stats.dropped_samples;
            continue;
        }
        if (s.has_span) {
            const int tokens = static_cast<int>(tokenize(s.utterance).size());
            const int window = std::min(tokens, max_utt);
            if (s.span_start < 0 || s.span_start > s.span_end || s.span_end >= window) {
                ++stats.dropped_samples;
                continue;
            }
        }
        TrainSampleL2 c = s;
        c.hard_negatives.clear();
        for (const auto& neg : s.hard_negatives) {
            if (catalog.find(neg)) c.hard_negatives.push_back(neg);
            else ++stats.dropped_negatives;
        }
        kept.push_back(std::move(c));
    }
    if (kept.empty() || cfg.epochs <= 0) return stats;

    const int n = static_cast<int>(kept.size());
    const int batches = (n + cfg.batch - 1) / cfg.batch;
    nn::AdamConfig adam{cfg.lr, cfg.epochs * batches};
    nn::ParamStore& store = *model.store();

    Rng rng(cfg.seed);
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double total = 0.0;
        for (int start = 0; start < n; start += cfg.batch) {
            const int end = std::min(n, start + cfg.batch);
            store.zero_grads();
            for (int i = start; i < end; ++i) {
                nn::Tape t;
                int loss = l2_sample_loss(t, model, catalog, kept[static_cast<size_t>(order[i])],
                                          cfg.lambda_rank, cfg.lambda_span);
                total += t.scalar(loss);
                t.backward(t.affine(loss, 1.0 / (end - start), 0.0));
            }
            store.adam_step(adam, stats.steps++);
        }
        stats.epoch_loss.push_back(total / n);
    }
    return stats;
}

}  // namespace kgqr
