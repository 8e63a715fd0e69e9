#pragma once
// Translational link-prediction pretraining for the fixed node and relation
// embeddings the GAT consumes.

#include <filesystem>
#include <map>
#include <vector>

#include "kgqr/kgstore.hpp"
#include "kgqr/nncore.hpp"

namespace kgqr {

struct EmbeddingTable {
    nn::Mat node_vecs;            // one row per entity, ordered by ascending id
    nn::Mat rel_vecs;             // row index = relation id
    std::map<int, int> node_row;  // entity id -> row

    int dim() const { return static_cast<int>(node_vecs.cols()); }
    nn::Mat node(int id) const;  // 1 x dim
    nn::Mat rel(int r) const;    // 1 x dim

    void save(const std::filesystem::path& p,
              const std::map<std::string, std::string>& meta = {}) const;
    static EmbeddingTable load(const std::filesystem::path& p,
                               std::map<std::string, std::string>* meta = nullptr);
};

// -||node(h) + rel(r) - node(t)||_2; higher is better.
double score_triple(const EmbeddingTable& tbl, int h, int r, int t);

struct PretrainConfig {
    int dim = 32;
    int epochs = 20;
    double margin = 1.0;
    double lr = 0.01;
    int batch = 128;
    int negatives = 4;  // corruptions per positive, hinge averaged
    uint64_t seed = 0;
};

struct PretrainResult {
    EmbeddingTable table;
    std::vector<double> epoch_loss;  // mean margin loss per epoch
};

// Margin ranking over uniform head-or-tail corruptions (resampled when the
// corruption collides with an existing triple); node rows renormalized to
// unit L2 after every epoch.
PretrainResult pretrain(const KnowledgeGraph& kg, const PretrainConfig& cfg);

// Mean reciprocal rank of the true tail against every entity as candidate
// tail. Candidates forming other existing triples are skipped (filtered
// evaluation) so synonymous answers do not count as errors.
double tail_mrr(const EmbeddingTable& tbl, const KnowledgeGraph& kg,
                const std::vector<Triple>& eval);

}  // namespace kgqr
