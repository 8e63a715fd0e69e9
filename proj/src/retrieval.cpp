#include "kgqr/retrieval.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>

namespace kgqr {

static_assert(std::endian::native == std::endian::little,
              "index files are raw little-endian");

using nn::Mat;

double sim(const std::vector<double>& p, const std::vector<double>& q) {
    if (p.size() != q.size()) throw Error("sim: dimension mismatch");
    double s = 0.0;
    for (size_t i = 0; i < p.size(); ++i) s += p[i] * q[i];
    return s;
}

EntityCatalog EntityCatalog::build(const KnowledgeGraph& kg, int neighbor_cap) {
    EntityCatalog cat;
    for (const auto& [surface, ids] : filter_index_entities(kg)) {
        EntityEntry e;
        e.surface = surface;
        e.ids = ids;
        for (int id : ids) {
            const auto& ds = kg.entity(id).descriptions;
            e.descriptions.insert(e.descriptions.end(), ds.begin(), ds.end());
        }
        e.subgraph = kg.one_hop(ids.front(), neighbor_cap);
        cat.by_surface_.emplace(e.surface, cat.entries_.size());
        cat.entries_.push_back(std::move(e));
    }
    return cat;
}

EntityCatalog EntityCatalog::from_entries(std::vector<EntityEntry> entries) {
    std::sort(entries.begin(), entries.end(),
              [](const EntityEntry& a, const EntityEntry& b) { return a.surface < b.surface; });
    EntityCatalog cat;
    for (auto& e : entries) {
        if (!cat.by_surface_.emplace(e.surface, cat.entries_.size()).second)
            throw Error("catalog: duplicate surface: " + e.surface);
        cat.entries_.push_back(std::move(e));
    }
    return cat;
}

const EntityEntry* EntityCatalog::find(const std::string& surface) const {
    auto it = by_surface_.find(surface);
    return it == by_surface_.end() ? nullptr : &entries_[it->second];
}

BiEncoder::BiEncoder(const BiEncoderConfig& cfg, const Vocab& vocab, const EmbeddingTable* emb,
                     nn::ParamStore* store, std::string prefix)
    : cfg_(cfg),
      vocab_(&vocab),
      emb_(emb),
      store_(store),
      prefix_(std::move(prefix)),
      utt_enc_(cfg.text, vocab, store, prefix_ + ".utt"),
      ent_enc_(cfg.text, vocab, store, prefix_ + (cfg.tie_towers ? ".utt" : ".ent")) {
    if (cfg_.text.hidden != cfg_.d_sim)
        throw Error("bi-encoder: the utterance tower is unprojected, so d_sim must equal the "
                    "text hidden size");
    if (cfg_.use_gat) {
        if (!emb_) throw Error("bi-encoder: node embeddings required when the GAT tower is on");
        gat_.emplace(cfg_.gat, emb_->dim(), &emb_->rel_vecs, store, prefix_ + ".gat");
    }
    const bool fresh_proj = !store_->has(prefix_ + ".proj.w");
    nn::Param& proj = store_->ensure(prefix_ + ".proj.w", cfg_.text.hidden + cfg_.gat.hidden,
                                     cfg_.d_sim, nn::Init::UniformFanIn);
    if (cfg_.tie_towers && fresh_proj) {
        proj.value.setZero();
        proj.value.topRows(cfg_.text.hidden).setIdentity();
    }
    store_->ensure(prefix_ + ".proj.b", 1, cfg_.d_sim, nn::Init::Zero);
}

int BiEncoder::encode_utterance(nn::Tape& t, const std::string& utterance) const {
    Encoded e = utt_enc_.encode(t, utterance);
    return utt_enc_.pooled(t, e);
}

int BiEncoder::encode_entity(nn::Tape& t, const std::string& surface,
                             const std::vector<std::string>& descriptions,
                             const Subgraph* sg) const {
    Encoded e = ent_enc_.encode(t, build_entity_text(surface, descriptions));
    int text = ent_enc_.pooled(t, e);
    int graph;
    if (cfg_.use_gat && sg) {
        GatInput in = build_gat_input(*sg, [this](int id) { return emb_->node(id); });
        graph = gat_->encode(t, in);
    } else {
        graph = t.constant(Mat::Zero(1, cfg_.gat.hidden));
    }
    int joint = t.concat_cols(text, graph);
    int proj = t.matmul(joint, t.param(store_->at(prefix_ + ".proj.w")));
    return t.add_rowvec(proj, t.param(store_->at(prefix_ + ".proj.b")));
}

int BiEncoder::encode_entry(nn::Tape& t, const EntityEntry& e) const {
    return encode_entity(t, e.surface, e.descriptions, &e.subgraph);
}

static std::vector<double> row_of(const nn::Tape& t, int node) {
    const Mat& m = t.value(node);
    return std::vector<double>(m.data(), m.data() + m.cols());
}

std::vector<double> BiEncoder::utterance_vec(const std::string& utterance) const {
    nn::Tape t;
    return row_of(t, encode_utterance(t, utterance));
}

std::vector<double> BiEncoder::entity_vec(const std::string& surface,
                                          const std::vector<std::string>& descriptions,
                                          const Subgraph* sg) const {
    nn::Tape t;
    return row_of(t, encode_entity(t, surface, descriptions, sg));
}

EntityIndex::EntityIndex(std::vector<Row> rows, Meta meta)
    : rows_(std::move(rows)), meta_(std::move(meta)) {
    if (rows_.empty()) throw Error("entity index: no rows");
    if (meta_.d_sim <= 0) throw Error("entity index: bad dimension");
    for (const auto& r : rows_) {
        if (static_cast<int>(r.vec.size()) != meta_.d_sim)
            throw Error("entity index: row dimension mismatch for \"" + r.surface + "\"");
        for (float x : r.vec)
            if (!std::isfinite(x))
                throw Error("entity index: non-finite vector for \"" + r.surface + "\"");
    }
}

namespace {

constexpr char kIndexMagic[8] = {'k', 'g', 'q', 'r', 'i', 'd', 'x', '1'};

void put_u32(std::string& out, uint32_t v) {
    out.append(reinterpret_cast<const char*>(&v), 4);
}
void put_u64(std::string& out, uint64_t v) {
    out.append(reinterpret_cast<const char*>(&v), 8);
}

struct Cursor {
    const std::string& buf;
    size_t pos = 0;

    const char* take(size_t n) {
        if (pos + n > buf.size()) throw Error("entity index: truncated file");
        const char* p = buf.data() + pos;
        pos += n;
        return p;
    }
    uint32_t u32() {
        uint32_t v;
        std::memcpy(&v, take(4), 4);
        return v;
    }
    uint64_t u64() {
        uint64_t v;
        std::memcpy(&v, take(8), 8);
        return v;
    }
};

}  // namespace

void EntityIndex::save(const std::filesystem::path& p) const {
    std::string out;
    out.append(kIndexMagic, sizeof kIndexMagic);
    put_u64(out, rows_.size());
    put_u32(out, static_cast<uint32_t>(meta_.d_sim));
    put_u64(out, meta_.checkpoint_hash);
    put_u32(out, static_cast<uint32_t>(meta_.config.size()));
    out += meta_.config;
    for (const auto& r : rows_) {
        put_u32(out, static_cast<uint32_t>(r.surface.size()));
        out += r.surface;
        put_u32(out, static_cast<uint32_t>(r.ids.size()));
        for (int id : r.ids) put_u32(out, static_cast<uint32_t>(id));
        out.append(reinterpret_cast<const char*>(r.vec.data()), r.vec.size() * sizeof(float));
    }
    write_file_atomic(p, out);
}

EntityIndex EntityIndex::load(const std::filesystem::path& p) {
    std::string buf = read_file(p);
    Cursor c{buf};
    if (std::memcmp(c.take(sizeof kIndexMagic), kIndexMagic, sizeof kIndexMagic) != 0)
        throw Error("entity index: bad magic in " + p.string());
    uint64_t n = c.u64();
    Meta meta;
    meta.d_sim = static_cast<int>(c.u32());
    meta.checkpoint_hash = c.u64();
    uint32_t clen = c.u32();
    meta.config.assign(c.take(clen), clen);
    std::vector<Row> rows;
    rows.reserve(n);
    for (uint64_t i = 0; i < n; ++i) {
        Row r;
        uint32_t slen = c.u32();
        r.surface.assign(c.take(slen), slen);
        uint32_t nids = c.u32();
        r.ids.resize(nids);
        for (uint32_t j = 0; j < nids; ++j) r.ids[j] = static_cast<int>(c.u32());
        r.vec.resize(static_cast<size_t>(meta.d_sim));
        std::memcpy(r.vec.data(), c.take(r.vec.size() * sizeof(float)),
                    r.vec.size() * sizeof(float));
        rows.push_back(std::move(r));
    }
    if (c.pos != buf.size()) throw Error("entity index: trailing bytes in " + p.string());
    return EntityIndex(std::move(rows), std::move(meta));
}

EntityIndex build_index(const BiEncoder& model, const EntityCatalog& catalog) {
    if (catalog.entries().empty()) throw Error("build_index: no entries to index");
    std::vector<EntityIndex::Row> rows;
    rows.reserve(catalog.size());
    for (const auto& e : catalog.entries()) {
        std::vector<double> v = model.entity_vec(e.surface, e.descriptions, &e.subgraph);
        EntityIndex::Row r;
        r.surface = e.surface;
        r.ids = e.ids;
        r.vec.assign(v.begin(), v.end());
        rows.push_back(std::move(r));
    }
    EntityIndex::Meta meta;
    meta.d_sim = model.config().d_sim;
    meta.checkpoint_hash = model.store()->content_hash();
    meta.built_at = iso_utc_now();
    return EntityIndex(std::move(rows), std::move(meta));
}

std::vector<ScoredSurface> top_k(const EntityIndex& index, const std::vector<double>& query,
                                 int k) {
    if (static_cast<int>(query.size()) != index.meta().d_sim)
        throw Error("top_k: query dimension mismatch");
    const auto& rows = index.rows();
    if (k <= 0) return {};
    std::vector<std::pair<double, size_t>> scored(rows.size());
    for (size_t i = 0; i < rows.size(); ++i) {
        const auto& v = rows[i].vec;
        double s = 0.0;
        for (size_t j = 0; j < v.size(); ++j) s += query[j] * static_cast<double>(v[j]);
        scored[i] = {s, i};
    }
    std::sort(scored.begin(), scored.end(),
              [&rows](const std::pair<double, size_t>& a, const std::pair<double, size_t>& b) {
                  if (a.first != b.first) return a.first > b.first;
                  return rows[a.second].surface < rows[b.second].surface;
              });
    size_t take = std::min(static_cast<size_t>(k), scored.size());
    std::vector<ScoredSurface> out(take);
    for (size_t i = 0; i < take; ++i) {
        const auto& r = rows[scored[i].second];
        out[i] = {r.surface, r.ids, scored[i].first};
    }
    return out;
}

std::vector<ScoredSurface> top_k(const EntityIndex& index, const BiEncoder& model,
                                 const std::string& utterance, int k) {
    if (model.config().d_sim != index.meta().d_sim)
        throw Error("top_k: index dimension differs from the model");
    return top_k(index, model.utterance_vec(utterance), k);
}

int l1_batch_loss(nn::Tape& t, const BiEncoder& model, const EntityCatalog& catalog,
                  const std::vector<TrainSampleL1>& batch, int* scores_out) {
    if (batch.empty()) throw Error("l1 batch loss: empty batch");
    const int b = static_cast<int>(batch.size());

    // Each distinct surface is encoded once; duplicate columns reuse the node
    // so its gradient accumulates across appearances.
    std::map<std::string, int> node_of;
    auto entity_node = [&](const std::string& surface) {
        auto it = node_of.find(surface);
        if (it != node_of.end()) return it->second;
        const EntityEntry* e = catalog.find(surface);
        int node = e ? model.encode_entry(t, *e) : -1;
        node_of.emplace(surface, node);
        return node;
    };

    std::vector<int> utt_rows;
    utt_rows.reserve(batch.size());
    for (const auto& s : batch) utt_rows.push_back(model.encode_utterance(t, s.utterance));

    std::vector<int> cand_rows;
    for (const auto& s : batch) {
        int node = entity_node(s.positive);
        if (node < 0) throw Error("l1 batch loss: positive not in catalog: " + s.positive);
        cand_rows.push_back(node);
    }
    for (const auto& s : batch)
        for (const auto& neg : s.hard_negatives) {
            int node = entity_node(neg);
            if (node >= 0) cand_rows.push_back(node);
        }

    int scores = t.matmul_nt(t.stack_rows(utt_rows), t.stack_rows(cand_rows));
    if (scores_out) *scores_out = scores;
    std::vector<int> nlls;
    nlls.reserve(batch.size());
    for (int i = 0; i < b; ++i) nlls.push_back(t.nll_row(scores, i, i));
    return t.affine(t.sum_all(t.stack_rows(nlls)), 1.0 / b, 0.0);
}

TrainL1Stats train_l1(BiEncoder& model, const EntityCatalog& catalog,
                      const std::vector<TrainSampleL1>& samples, const TrainL1Config& cfg) {
    if (cfg.batch <= 0) throw Error("train_l1: batch must be positive");
    TrainL1Stats stats;
    std::vector<TrainSampleL1> kept;
    kept.reserve(samples.size());
    for (const auto& s : samples) {
        if (!catalog.find(s.positive)) {
            ++stats.dropped_samples;
            continue;
        }
        TrainSampleL1 c;
        c.utterance = s.utterance;
        c.positive = s.positive;
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
            std::vector<TrainSampleL1> batch;
            batch.reserve(static_cast<size_t>(end - start));
            for (int i = start; i < end; ++i) batch.push_back(kept[static_cast<size_t>(order[i])]);

            store.zero_grads();
            nn::Tape t;
            int loss = l1_batch_loss(t, model, catalog, batch);
            total += t.scalar(loss) * (end - start);
            t.backward(loss);
            store.adam_step(adam, stats.steps++);
        }
        stats.epoch_loss.push_back(total / n);
    }
    return stats;
}

double recall_at_k(const EntityIndex& index, const BiEncoder& model,
                   const std::vector<TrainSampleL1>& samples, int k) {
    if (samples.empty()) return 0.0;
    int hits = 0;
    for (const auto& s : samples) {
        for (const auto& r : top_k(index, model, s.utterance, k)) {
            if (r.surface == s.positive) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(samples.size());
}

}  // namespace kgqr
