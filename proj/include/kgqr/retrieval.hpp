#pragma once
// Bi-encoder dense retrieval. The utterance tower is a text encoder; the
// entity tower pools description-augmented entity text together with a
// one-hop subgraph vector and projects the pair into the shared similarity
// space. Training is softmax NLL over in-batch positives plus hard negatives;
// serving is an exact maximal-inner-product scan over the entity index.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kgqr/graphenc.hpp"
#include "kgqr/kgpretrain.hpp"
#include "kgqr/kgstore.hpp"
#include "kgqr/nncore.hpp"
#include "kgqr/textenc.hpp"

namespace kgqr {

// Exact dot product; dimensions must match.
double sim(const std::vector<double>& p, const std::vector<double>& q);

struct BiEncoderConfig {
    EncoderConfig text;  // both text towers share this shape
    GatConfig gat;
    int d_sim = 64;
    // false pins the subgraph vector to zero (KG-structure ablation); the
    // parameter set is unchanged so checkpoints stay interchangeable.
    bool use_gat = true;
    // Share one text encoder between the towers and start the entity
    // projection at identity-over-text / zero-over-graph, so equal strings
    // score maximally before any training. Stands in for initializing both
    // towers from a common pretrained encoder, which a from-scratch model
    // cannot otherwise imitate.
    bool tie_towers = false;
};

// One retained surface form: ids ascending, descriptions concatenated across
// those ids in id order, subgraph centered on the lowest id.
struct EntityEntry {
    std::string surface;
    std::vector<int> ids;
    std::vector<std::string> descriptions;
    Subgraph subgraph;
};

// Surface-level view of the KG shared by training and index builds.
class EntityCatalog {
public:
    static EntityCatalog build(const KnowledgeGraph& kg, int neighbor_cap = 32);
    static EntityCatalog from_entries(std::vector<EntityEntry> entries);  // unique surfaces

    const EntityEntry* find(const std::string& surface) const;  // null when absent
    const std::vector<EntityEntry>& entries() const { return entries_; }
    size_t size() const { return entries_.size(); }

private:
    std::vector<EntityEntry> entries_;  // surface ascending
    std::map<std::string, size_t> by_surface_;
};

class BiEncoder {
public:
    // The utterance tower has no projection, so cfg.text.hidden must equal
    // cfg.d_sim. vocab, emb, and store must outlive the encoder; emb supplies
    // the fixed node/relation embeddings and may be null when use_gat is off.
    BiEncoder(const BiEncoderConfig& cfg, const Vocab& vocab, const EmbeddingTable* emb,
              nn::ParamStore* store, std::string prefix = "l1");

    // 1 x d_sim tape nodes.
    int encode_utterance(nn::Tape& t, const std::string& utterance) const;
    int encode_entity(nn::Tape& t, const std::string& surface,
                      const std::vector<std::string>& descriptions, const Subgraph* sg) const;
    int encode_entry(nn::Tape& t, const EntityEntry& e) const;

    // Forward-only convenience rows.
    std::vector<double> utterance_vec(const std::string& utterance) const;
    std::vector<double> entity_vec(const std::string& surface,
                                   const std::vector<std::string>& descriptions,
                                   const Subgraph* sg) const;

    const BiEncoderConfig& config() const { return cfg_; }
    nn::ParamStore* store() const { return store_; }

private:
    BiEncoderConfig cfg_;
    const Vocab* vocab_;
    const EmbeddingTable* emb_;
    nn::ParamStore* store_;
    std::string prefix_;
    TextEncoder utt_enc_;
    TextEncoder ent_enc_;
    std::optional<GatEncoder> gat_;
};

class EntityIndex {
public:
    struct Row {
        std::string surface;
        std::vector<int> ids;
        std::vector<float> vec;  // d_sim, finite
    };
    // The build timestamp travels in the run manifest, not in the index file,
    // so rebuilding from the same checkpoint is byte-identical.
    struct Meta {
        int d_sim = 0;
        uint64_t checkpoint_hash = 0;
        std::string config;  // producing run's config hash; saved with the file
        std::string built_at;
    };

    EntityIndex(std::vector<Row> rows, Meta meta);  // validates; empty is an error

    size_t size() const { return rows_.size(); }
    const std::vector<Row>& rows() const { return rows_; }
    const Meta& meta() const { return meta_; }

    // Header (row count, d_sim, checkpoint hash) then per row: length-prefixed
    // surface, id list, little-endian f32 vector.
    void save(const std::filesystem::path& p) const;
    static EntityIndex load(const std::filesystem::path& p);

private:
    std::vector<Row> rows_;
    Meta meta_;
};

// One vector per catalog entry; meta carries the store's content hash.
EntityIndex build_index(const BiEncoder& model, const EntityCatalog& catalog);

struct ScoredSurface {
    std::string surface;
    std::vector<int> ids;
    double score = 0.0;
};

// Exact scan: top-k rows by (score desc, surface asc); k past the end returns
// every row. Scores accumulate left to right in double, f32 rows widened, so
// independent scorers reproduce them bitwise.
std::vector<ScoredSurface> top_k(const EntityIndex& index, const std::vector<double>& query,
                                 int k = 10);
std::vector<ScoredSurface> top_k(const EntityIndex& index, const BiEncoder& model,
                                 const std::string& utterance, int k = 10);

struct TrainSampleL1 {
    std::string utterance;                     // source utterance (with the corruption)
    std::string positive;                      // target surface form
    std::vector<std::string> hard_negatives;   // surface forms
};

struct TrainL1Config {
    double lr = 8e-4;
    int batch = 64;
    int epochs = 10;
    uint64_t seed = 0;
};

struct TrainL1Stats {
    std::vector<double> epoch_loss;  // mean per-sample NLL
    size_t dropped_samples = 0;      // positive surface absent from the catalog
    size_t dropped_negatives = 0;    // hard negative absent from the catalog
    int steps = 0;
};

// Batch loss on the caller's tape: every row scores its own positive against
// all batch positives plus all batch hard negatives in one softmax. Positives
// must resolve in the catalog; scores_out (optional) receives the B x (B+M)
// score node.
int l1_batch_loss(nn::Tape& t, const BiEncoder& model, const EntityCatalog& catalog,
                  const std::vector<TrainSampleL1>& batch, int* scores_out = nullptr);

// Adam over seed-deterministic shuffled batches; unresolvable positives are
// dropped up front and counted.
TrainL1Stats train_l1(BiEncoder& model, const EntityCatalog& catalog,
                      const std::vector<TrainSampleL1>& samples, const TrainL1Config& cfg);

// Fraction of samples whose positive surface lands in the top-k.
double recall_at_k(const EntityIndex& index, const BiEncoder& model,
                   const std::vector<TrainSampleL1>& samples, int k = 10);

}  // namespace kgqr
