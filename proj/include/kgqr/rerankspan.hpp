#pragma once
// Cross-encoder joint model: re-ranks retrieval candidates with an MLP over
// the pair encoding's sentinel vector and the pooled subgraph vector, and
// detects the corrupt entity span with start/end heads over the utterance
// positions. The sentinel position doubles as the null span (0,0); a span
// fires only when its best score beats the null score by more than theta.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kgqr/retrieval.hpp"

namespace kgqr {

struct CrossEncoderConfig {
    EncoderConfig text;   // pair encoder; token hidden size H
    GatConfig gat;
    int rank_hidden = 64;  // MLP width of the rank head
    int max_span_len = 6;  // span length bound, word tokens
    bool use_gat = true;   // false pins the subgraph vector to zero
};

// start = end = 0 is the null span; real spans live on utterance rows
// 1..utt_tokens and score is the winning s_ij (or the null score s_00).
struct SpanPrediction {
    int start = 0;
    int end = 0;
    double score = 0.0;
    bool is_null = true;
};

// W_S . T_i + W_E . T_j for 1 x H head vectors over N x H token rows.
double span_score(const nn::Mat& w_s, const nn::Mat& w_e, const nn::Mat& tokens, int i, int j);

// Argmax over spans i in [1, U], j in [i, min(U, i + max_span_len - 1)] with
// ties to the lexicographically first (i, j); the span wins over null iff
// s* - s_00 > theta. Score vectors are indexed by sequence row (0 = sentinel).
SpanPrediction decode_span(const std::vector<double>& start_scores,
                           const std::vector<double>& end_scores, double theta,
                           int max_span_len);

class CrossEncoder {
public:
    CrossEncoder(const CrossEncoderConfig& cfg, const Vocab& vocab, const EmbeddingTable* emb,
                 nn::ParamStore* store, std::string prefix = "l2");

    struct Pair {
        Encoded enc;     // pair encoding; enc.utt_tokens utterance rows
        int gat = -1;    // pooled subgraph node
        int score = -1;  // 1 x 1 rank score node
    };

    Pair encode_candidate(nn::Tape& t, const std::string& utterance, const EntityEntry& e) const;
    Pair encode_pair_text(nn::Tape& t, const std::string& utterance,
                          const std::string& entity_text, const Subgraph* sg) const;

    // Start/end score columns, (utt_tokens + 1) x 1, over sentinel + utterance
    // rows only; entity-side positions never enter the span softmax.
    std::pair<int, int> span_scores(nn::Tape& t, const Pair& p) const;

    SpanPrediction predict_span(const std::string& utterance, const EntityEntry& e,
                                double theta) const;
    SpanPrediction predict_span_text(const std::string& utterance, const std::string& entity_text,
                                     const Subgraph* sg, double theta) const;

    double pair_score(const std::string& utterance, const EntityEntry& e) const;

    const CrossEncoderConfig& config() const { return cfg_; }
    nn::ParamStore* store() const { return store_; }

private:
    CrossEncoderConfig cfg_;
    const Vocab* vocab_;
    const EmbeddingTable* emb_;
    nn::ParamStore* store_;
    std::string prefix_;
    TextEncoder text_enc_;
    std::optional<GatEncoder> gat_;
};

struct RankedCandidate {
    std::string surface;
    std::vector<int> ids;
    double score = 0.0;
};

struct RerankResult {
    std::vector<RankedCandidate> ranked;    // score desc, surface asc, stable
    SpanPrediction span;                    // decoded on the top-1 pair encoding
    std::vector<std::string> utt_tokens;    // kept utterance tokens of that encoding
};

RerankResult rerank(const CrossEncoder& model, const std::string& utterance,
                    const std::vector<const EntityEntry*>& candidates, double theta);

struct TrainSampleL2 {
    std::string utterance;
    // Pairing surface: the target entity for friction samples; a plausible
    // candidate (miner top-1) for null samples, which learn span only.
    std::string positive;
    std::vector<std::string> hard_negatives;
    bool has_span = false;  // false: gold is the null span (0, 0)
    int span_start = 0;     // word-token indices into the utterance, inclusive
    int span_end = 0;
};

struct TrainL2Config {
    double lr = 5e-4;
    int batch = 32;
    int epochs = 4;
    double lambda_rank = 1.0;
    double lambda_span = 1.0;
    uint64_t seed = 0;
};

struct TrainL2Stats {
    std::vector<double> epoch_loss;  // mean per-sample joint loss
    size_t dropped_samples = 0;      // unresolvable pairing surface or gold span
                                     // outside the encoded window
    size_t dropped_negatives = 0;
    int steps = 0;
};

// lambda_rank * softmax NLL over {positive, hard negatives} (friction samples
// only) + lambda_span * (start + end cross-entropy, gold (0,0) when null).
int l2_sample_loss(nn::Tape& t, const CrossEncoder& model, const EntityCatalog& catalog,
                   const TrainSampleL2& s, double lambda_rank, double lambda_span);

TrainL2Stats train_l2(CrossEncoder& model, const EntityCatalog& catalog,
                      const std::vector<TrainSampleL2>& samples, const TrainL2Config& cfg);

}  // namespace kgqr
