#include "kgqr/kgstore.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <fstream>
#include <sstream>

namespace kgqr {

namespace {

bool parse_int(const std::string& s, int* out) {
    if (s.empty()) return false;
    size_t pos = 0;
    try {
        long v = std::stol(s, &pos);
        if (pos != s.size() || v < 0 || v > INT32_MAX) return false;
        *out = static_cast<int>(v);
        return true;
    } catch (...) {
        return false;
    }
}

}  // namespace

KnowledgeGraph KnowledgeGraph::ingest(std::istream& entity_records, std::istream& triple_records,
                                      IngestStats* stats) {
    KnowledgeGraph kg;
    IngestStats st;

    std::string line;
    size_t lineno = 0;
    while (std::getline(entity_records, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto cols = split_char(line, '\t');
        int id = -1;
        if (cols.size() < 2 || cols.size() > 3 || !parse_int(cols[0], &id) ||
            trim(cols[1]).empty()) {
            fmt::print(stderr, "ingest: skipping malformed entity line {}\n", lineno);
            ++st.skipped_lines;
            continue;
        }
        std::string surface = to_lower(trim(cols[1]));
        std::string desc = cols.size() == 3 ? trim(cols[2]) : std::string();
        if (desc.find("[des]") != std::string::npos) {
            fmt::print(stderr, "ingest: skipping malformed entity line {}\n", lineno);
            ++st.skipped_lines;
            continue;
        }
        auto it = kg.by_id_.find(id);
        if (it == kg.by_id_.end()) {
            kg.by_id_[id] = static_cast<int>(kg.entities_.size());
            kg.entities_.push_back(Entity{id, surface, {}});
            kg.by_surface_[surface].push_back(id);
            it = kg.by_id_.find(id);
        }
        Entity& e = kg.entities_[static_cast<size_t>(it->second)];
        if (!desc.empty()) {
            if (std::find(e.descriptions.begin(), e.descriptions.end(), desc) !=
                e.descriptions.end()) {
                ++st.deduped_descriptions;
            } else {
                e.descriptions.push_back(desc);
                ++st.descriptions;
            }
        }
    }
    if (kg.entities_.empty()) throw Error("ingest: no valid entities");
    for (auto& [surface, ids] : kg.by_surface_) std::sort(ids.begin(), ids.end());

    lineno = 0;
    while (std::getline(triple_records, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto cols = split_char(line, '\t');
        int head = -1, tail = -1;
        if (cols.size() != 3 || !parse_int(cols[0], &head) || trim(cols[1]).empty() ||
            !parse_int(cols[2], &tail)) {
            fmt::print(stderr, "ingest: skipping malformed triple line {}\n", lineno);
            ++st.skipped_lines;
            continue;
        }
        if (!kg.has_entity(head) || !kg.has_entity(tail)) {
            ++st.dropped_triples;
            continue;
        }
        std::string rel_name = trim(cols[1]);
        auto rit = kg.rel_ids_.find(rel_name);
        int rel;
        if (rit == kg.rel_ids_.end()) {
            rel = static_cast<int>(kg.relations_.size());
            kg.rel_ids_[rel_name] = rel;
            kg.relations_.push_back(rel_name);
        } else {
            rel = rit->second;
        }
        kg.triples_.push_back(Triple{head, rel, tail});
        kg.adjacency_[head].push_back(Edge{rel, false, tail});
        kg.adjacency_[tail].push_back(Edge{rel, true, head});
    }
    st.entities = kg.entities_.size();
    st.triples = kg.triples_.size();

    for (auto& [id, edges] : kg.adjacency_) {
        std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
            return std::tie(a.rel, a.neighbor, a.inverse) < std::tie(b.rel, b.neighbor, b.inverse);
        });
    }
    if (stats) *stats = st;
    return kg;
}

KnowledgeGraph KnowledgeGraph::ingest_files(const std::filesystem::path& entities,
                                            const std::filesystem::path& triples,
                                            IngestStats* stats) {
    std::ifstream ef(entities);
    if (!ef) throw Error("cannot open entities file: " + entities.string());
    std::ifstream tf(triples);
    if (!tf) throw Error("cannot open triples file: " + triples.string());
    return ingest(ef, tf, stats);
}

void KnowledgeGraph::save(const std::filesystem::path& dir) const {
    std::ostringstream ents;
    std::vector<int> ids = all_ids();
    for (int id : ids) {
        const Entity& e = entity(id);
        if (e.descriptions.empty()) {
            ents << e.id << '\t' << e.surface << '\n';
        } else {
            for (const auto& d : e.descriptions) ents << e.id << '\t' << e.surface << '\t' << d << '\n';
        }
    }
    std::ostringstream trips;
    for (const auto& t : triples_)
        trips << t.head << '\t' << relations_[static_cast<size_t>(t.rel)] << '\t' << t.tail << '\n';
    std::ostringstream rels;
    for (size_t i = 0; i < relations_.size(); ++i) rels << i << '\t' << relations_[i] << '\n';
    write_file_atomic(dir / "entities.tsv", ents.str());
    write_file_atomic(dir / "triples.tsv", trips.str());
    write_file_atomic(dir / "relations.tsv", rels.str());
}

KnowledgeGraph KnowledgeGraph::load(const std::filesystem::path& dir) {
    return ingest_files(dir / "entities.tsv", dir / "triples.tsv");
}

const Entity& KnowledgeGraph::entity(int id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) throw Error(fmt::format("unknown entity id {}", id));
    return entities_[static_cast<size_t>(it->second)];
}

std::vector<int> KnowledgeGraph::all_ids() const {
    std::vector<int> ids;
    ids.reserve(entities_.size());
    for (const auto& e : entities_) ids.push_back(e.id);
    std::sort(ids.begin(), ids.end());
    return ids;
}

const std::string& KnowledgeGraph::relation_name(int rel) const {
    if (rel < 0 || rel >= relation_count()) throw Error(fmt::format("unknown relation id {}", rel));
    return relations_[static_cast<size_t>(rel)];
}

int KnowledgeGraph::relation_id(const std::string& name) const {
    auto it = rel_ids_.find(name);
    return it == rel_ids_.end() ? -1 : it->second;
}

bool KnowledgeGraph::has_triple(int head, int rel, int tail) const {
    auto it = adjacency_.find(head);
    if (it == adjacency_.end()) return false;
    for (const Edge& e : it->second)
        if (!e.inverse && e.rel == rel && e.neighbor == tail) return true;
    return false;
}

std::vector<int> KnowledgeGraph::ids_for_surface(const std::string& surface) const {
    auto it = by_surface_.find(surface);
    return it == by_surface_.end() ? std::vector<int>{} : it->second;
}

std::string KnowledgeGraph::entity_text(int id) const {
    const Entity& e = entity(id);
    std::string out = e.surface;
    for (const auto& d : e.descriptions) {
        out += " [des] ";
        out += d;
    }
    return out;
}

Subgraph KnowledgeGraph::one_hop(int id, int max_neighbors) const {
    if (!has_entity(id)) throw Error(fmt::format("one_hop: unknown entity id {}", id));
    Subgraph sg;
    sg.center = id;
    auto it = adjacency_.find(id);
    if (it != adjacency_.end()) {
        size_t n = std::min(it->second.size(), static_cast<size_t>(max_neighbors));
        sg.edges.assign(it->second.begin(), it->second.begin() + static_cast<long>(n));
    }
    return sg;
}

bool surface_passes_filter(const std::string& surface) {
    for (unsigned char c : surface) {
        if (c >= 0x80) return false;
        if (std::isdigit(c)) return false;
        if (std::ispunct(c)) return false;
    }
    return true;
}

std::vector<std::pair<std::string, std::vector<int>>> filter_index_entities(
    const KnowledgeGraph& kg) {
    std::vector<std::pair<std::string, std::vector<int>>> out;
    for (const auto& [surface, ids] : kg.surfaces()) {
        if (surface_passes_filter(surface)) out.emplace_back(surface, ids);
    }
    return out;
}

}  // namespace kgqr
