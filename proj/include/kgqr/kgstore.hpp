#pragma once
// Knowledge-graph storage: TSV ingest, surface-form lookup with polysemy,
// index-entity filtering, and deterministic capped one-hop subgraphs.

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "kgqr/common.hpp"

namespace kgqr {

struct Entity {
    int id = -1;
    std::string surface;                    // lowercase, non-empty
    std::vector<std::string> descriptions;  // file order, deduplicated
};

struct Triple {
    int head = -1;
    int rel = -1;
    int tail = -1;
};

struct Edge {
    int rel = -1;
    bool inverse = false;  // true when the center is the triple's tail
    int neighbor = -1;
};

struct Subgraph {
    int center = -1;
    std::vector<Edge> edges;  // sorted by (rel, neighbor, inverse), capped
};

struct IngestStats {
    size_t entities = 0;
    size_t descriptions = 0;
    size_t triples = 0;
    size_t skipped_lines = 0;
    size_t dropped_triples = 0;
    size_t deduped_descriptions = 0;
};

class KnowledgeGraph {
public:
    static KnowledgeGraph ingest(std::istream& entity_records, std::istream& triple_records,
                                 IngestStats* stats = nullptr);
    static KnowledgeGraph ingest_files(const std::filesystem::path& entities,
                                       const std::filesystem::path& triples,
                                       IngestStats* stats = nullptr);

    // Canonicalized TSVs; load() re-ingests them.
    void save(const std::filesystem::path& dir) const;
    static KnowledgeGraph load(const std::filesystem::path& dir);

    bool has_entity(int id) const { return by_id_.count(id) > 0; }
    const Entity& entity(int id) const;
    size_t entity_count() const { return entities_.size(); }
    std::vector<int> all_ids() const;  // ascending

    const std::string& relation_name(int rel) const;
    int relation_count() const { return static_cast<int>(relations_.size()); }
    int relation_id(const std::string& name) const;  // -1 when unknown

    const std::vector<Triple>& triples() const { return triples_; }
    bool has_triple(int head, int rel, int tail) const;

    // All entity ids sharing this exact surface, ascending; empty if none.
    std::vector<int> ids_for_surface(const std::string& surface) const;
    const std::map<std::string, std::vector<int>>& surfaces() const { return by_surface_; }

    // "surface [des] description [des] description" per the entity's file order.
    std::string entity_text(int id) const;

    Subgraph one_hop(int id, int max_neighbors = 32) const;

private:
    std::vector<Entity> entities_;
    std::unordered_map<int, int> by_id_;  // id -> index into entities_
    std::map<std::string, std::vector<int>> by_surface_;
    std::vector<std::string> relations_;  // rel id -> name, first-appearance order
    std::map<std::string, int> rel_ids_;
    std::vector<Triple> triples_;
    std::unordered_map<int, std::vector<Edge>> adjacency_;  // pre-sorted
};

// One entry per retained surface: (surface, ascending entity ids). A surface
// is dropped iff it contains an ASCII digit, ASCII punctuation (apostrophes
// included), or any non-ASCII byte.
std::vector<std::pair<std::string, std::vector<int>>> filter_index_entities(
    const KnowledgeGraph& kg);

bool surface_passes_filter(const std::string& surface);

}  // namespace kgqr
