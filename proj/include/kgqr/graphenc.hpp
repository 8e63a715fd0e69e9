#pragma once
// Graph attention over one-hop subgraphs with non-parametric relation
// composition. Neighbor messages are composed from fixed input embeddings,
// attention normalizes per destination node, and the final node vectors are
// mean-pooled into a single subgraph vector.

#include <functional>
#include <string>
#include <vector>

#include "kgqr/kgstore.hpp"
#include "kgqr/nncore.hpp"

namespace kgqr {

struct GatConfig {
    int layers = 2;
    int heads = 4;
    int hidden = 64;
    double slope = 0.2;  // LeakyReLU inside the attention logits
    enum class Phi { Subtract, Product };
    Phi phi = Phi::Subtract;
    // Attention sees the composed message by default; false restores the
    // raw-neighbor variant where logits use W·h_j directly.
    bool attend_composed = true;
    // false drops relation vectors entirely: messages are raw neighbor rows.
    bool use_relations = true;
};

// Aggregation edge src -> dst over GatInput node rows. rel == -1 marks a
// self-loop, which carries the composition identity instead of a relation.
struct GatEdge {
    int dst = 0;
    int src = 0;
    int rel = -1;
    bool inverse = false;
};

struct GatInput {
    nn::Mat node_vecs;           // unique nodes; row 0 is the center
    std::vector<GatEdge> edges;  // includes both directions and self-loops
};

// Expands a Subgraph into rows (center first, neighbors in first-occurrence
// order) and one aggregation edge into the center per subgraph edge. Nodes
// left without incoming edges get a self-loop so attention never normalizes
// over an empty set. Duplicate subgraph edges stay duplicated while node rows
// stay unique, so attention splits evenly across copies.
GatInput build_gat_input(const Subgraph& sg,
                         const std::function<nn::Mat(int)>& node_vec_of_entity);

class GatEncoder {
public:
    // rel_table holds the fixed forward relation embeddings (one row per
    // relation); learned inverse embeddings are created in the store,
    // initialized to the negated forward rows. rel_table must outlive the
    // encoder and may be null when cfg.use_relations is false.
    GatEncoder(const GatConfig& cfg, int d_in, const nn::Mat* rel_table, nn::ParamStore* store,
               std::string prefix);

    // Per-layer, per-head attention weights (one column, edge order).
    struct Trace {
        std::vector<std::vector<nn::Mat>> alpha;  // [layer][head]
    };

    // Pooled 1 x out_dim subgraph vector.
    int encode(nn::Tape& t, const GatInput& in, Trace* trace = nullptr) const;

    int out_dim() const { return cfg_.hidden; }
    const GatConfig& config() const { return cfg_; }

private:
    int layer_in_dim(int layer) const { return layer == 0 ? d_in_ : cfg_.hidden; }
    int head_out_dim(int layer) const {
        return layer == cfg_.layers - 1 ? cfg_.hidden : cfg_.hidden / cfg_.heads;
    }

    GatConfig cfg_;
    int d_in_;
    const nn::Mat* rel_table_;
    nn::ParamStore* store_;
    std::string prefix_;
};

}  // namespace kgqr
