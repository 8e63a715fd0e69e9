#pragma once
// Stand-in rephrase corpus: a synthetic knowledge graph, template-based
// utterances with entity fillers drawn from the graph, a corruption model
// simulating ASR noise, zero-shot / few-shot / kg-relation split tags, and
// miner-based hard negatives. Generation is seed-deterministic end to end.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "kgqr/pipeline.hpp"

namespace kgqr {

// ---------------------------------------------------------------------------
// Synthetic knowledge graph

struct SynthKgConfig {
    int songs = 2600;
    int artists = 900;
    int albums = 600;
    int films = 400;
    int cities = 500;
    double polysemy_rate = 0.03;  // chance an entity gains a second sense
    uint64_t seed = 0;
};

// Ingest-ready TSV blobs. A few canonical entities (the "bad romance" song
// and film, "lady gaga", and the carson city / corbin city confusables) are
// always planted with fixed ids so the flagship rewrite is constructible.
struct SynthKg {
    std::string entities_tsv;
    std::string triples_tsv;
};

SynthKg synth_kg(const SynthKgConfig& cfg);

// ---------------------------------------------------------------------------
// Templates

struct Template {
    std::string pattern;  // "play {song} by {artist}"; placeholders are words
    std::string domain;
    std::string intent;
    std::vector<std::pair<std::string, std::string>> slot_names;  // placeholder -> slot
};

// TSV columns: pattern, domain, intent, slots (placeholder=SlotName comma
// list). First line is the header; '#' lines are comments.
std::vector<Template> parse_templates(std::istream& in);
std::vector<Template> parse_templates(const std::string& text);
const std::string& default_templates();  // contents of the shipped fixture

std::vector<std::string> pattern_placeholders(const std::string& pattern);
std::string placeholder_role(const std::string& placeholder);  // "city2" -> "city"

// Role -> index-eligible filler surfaces, drawn from the graph by relation:
// song/artist from performer edges, film from directed_by, album from
// in_album, city from near (either endpoint). Sorted, unique.
std::map<std::string, std::vector<std::string>> role_surfaces(const KnowledgeGraph& kg,
                                                              const EntityCatalog& catalog);

// ---------------------------------------------------------------------------
// Corruption

class Corruptor {
public:
    explicit Corruptor(std::vector<std::string> index_surfaces);

    // Applies one sampled operator: character edit (sub/ins/del), replacement
    // with the nearest other index surface by edit distance, or word
    // split/merge. Never returns the input.
    std::string corrupt(const std::string& surface, Rng& rng);

    // Nearest other surface by edit distance, ties to the lexicographically
    // first. Cached; candidates are pruned by length difference.
    const std::string& nearest(const std::string& surface);

private:
    std::string char_edit(const std::string& s, Rng& rng);
    std::string split_merge(const std::string& s, Rng& rng);

    std::vector<std::string> surfaces_;               // sorted, unique
    std::map<size_t, std::vector<size_t>> by_len_;    // length -> surface indices
    std::map<std::string, std::string> nearest_;
};

std::string corrupt_entity(const std::string& surface, Rng& rng,
                           const std::vector<std::string>& index_surfaces);

// ---------------------------------------------------------------------------
// Samples

struct RephraseSample {
    std::string source;  // corrupted utterance; equals target when clean
    std::string target;
    int span_start = 0;  // word-token inclusive range of the corrupt text in
    int span_end = 0;    // source; meaningful only when !clean
    std::string corrupt_text;    // detokenized span text; empty when clean
    std::string target_entity;   // gold surface; empty when clean
    NluHypothesis hypothesis;    // for the source utterance
    bool clean = false;
    bool zero_shot = false;      // filled by tag_splits on test samples
    bool few_shot = false;
    bool kg_relation = false;
    // Mined by mine_hard_negatives. For clean samples the single entry is the
    // miner's top-1, used as the pairing surface in span-only training.
    std::vector<std::string> hard_negatives;

    bool operator==(const RephraseSample&) const = default;
};

struct GenCounts {
    int l2_train = 20000;
    double clean_fraction = 0.25;  // of l2_train
    int l1_train = 4000;           // friction-only subset of the L2 set
    int friction_test = 2000;
    int clean_test = 500;
};

struct GeneratedData {
    std::vector<RephraseSample> l2_train;
    std::vector<RephraseSample> l1_train;
    std::vector<RephraseSample> friction_test;
    std::vector<RephraseSample> clean_test;
    std::vector<std::string> warnings;  // set when counts could not be met
};

// Friction targets are always index surfaces; test sources are disjoint from
// training sources. 25% of each role's fillers are reserved for test-time
// targets only, which seeds the zero-shot subset; training targets follow a
// head-heavy power law, which seeds the few-shot subset.
GeneratedData generate(const KnowledgeGraph& kg, const EntityCatalog& catalog,
                       const std::vector<Template>& templates, const GenCounts& counts, Rng& rng);

// zero_shot: target entity never a training target; few_shot: a training
// target 1..10 times; kg_relation: some context surface in the source (off
// the corrupt span) shares a triple with the target entity.
void tag_splits(std::vector<RephraseSample>& test, const std::vector<RephraseSample>& train,
                const KnowledgeGraph& kg);

// ---------------------------------------------------------------------------
// Hard negatives

// The miner sees no KG signal: descriptions and subgraphs are dropped.
EntityCatalog strip_kg(const EntityCatalog& catalog);

struct MineStats {
    size_t padded = 0;  // friction samples short of `count` mined negatives
};

// Top-k retrieval per sample; negatives are the retrieved surfaces minus the
// positive, truncated to count, padded from random index surfaces when short.
// Clean samples just record the top-1 pairing surface.
MineStats mine_hard_negatives(const BiEncoder& miner, const EntityIndex& index,
                              std::vector<RephraseSample>& samples, int k, int count, Rng& rng);

// ---------------------------------------------------------------------------
// Conversion and serialization

TrainSampleL1 to_l1_sample(const RephraseSample& s, int negatives = 1);

// Clean samples lacking a mined pairing surface are skipped (counted).
std::vector<TrainSampleL2> to_l2_samples(const std::vector<RephraseSample>& in, int negatives = 4,
                                         size_t* skipped = nullptr);

std::string samples_tsv(const std::vector<RephraseSample>& samples);  // header + rows
std::vector<RephraseSample> parse_samples(const std::string& text);

}  // namespace kgqr
