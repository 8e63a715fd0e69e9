#include "kgqr/kgpretrain.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <cmath>

namespace kgqr {

nn::Mat EmbeddingTable::node(int id) const {
    auto it = node_row.find(id);
    if (it == node_row.end()) throw Error(fmt::format("no embedding for entity {}", id));
    return node_vecs.row(it->second);
}

nn::Mat EmbeddingTable::rel(int r) const {
    if (r < 0 || r >= rel_vecs.rows()) throw Error(fmt::format("no embedding for relation {}", r));
    return rel_vecs.row(r);
}

void EmbeddingTable::save(const std::filesystem::path& p,
                          const std::map<std::string, std::string>& meta) const {
    nn::ParamStore store(0);
    store.ensure("kg.node", static_cast<int>(node_vecs.rows()), dim(), nn::Init::Zero).value =
        node_vecs;
    store.ensure("kg.rel", static_cast<int>(rel_vecs.rows()), dim(), nn::Init::Zero).value =
        rel_vecs;
    nn::Param& ids = store.ensure("kg.node_ids", 1, static_cast<int>(node_row.size()),
                                  nn::Init::Zero);
    int c = 0;
    for (const auto& [id, row] : node_row) {
        if (row != c) throw Error("embedding table rows out of order");
        if (id >= (1 << 24)) throw Error("entity id too large for checkpoint");
        ids.value(0, c++) = static_cast<double>(id);
    }
    store.save(p, meta);
}

EmbeddingTable EmbeddingTable::load(const std::filesystem::path& p,
                                    std::map<std::string, std::string>* meta) {
    nn::ParamStore store = nn::ParamStore::load(p, meta);
    EmbeddingTable tbl;
    tbl.node_vecs = store.at("kg.node").value;
    tbl.rel_vecs = store.at("kg.rel").value;
    const nn::Mat& ids = store.at("kg.node_ids").value;
    for (int c = 0; c < ids.cols(); ++c) tbl.node_row[static_cast<int>(ids(0, c))] = c;
    if (static_cast<int>(tbl.node_row.size()) != tbl.node_vecs.rows())
        throw Error("embedding table id map inconsistent");
    return tbl;
}

double score_triple(const EmbeddingTable& tbl, int h, int r, int t) {
    return -(tbl.node(h) + tbl.rel(r) - tbl.node(t)).norm();
}

PretrainResult pretrain(const KnowledgeGraph& kg, const PretrainConfig& cfg) {
    std::vector<int> ids = kg.all_ids();
    std::map<int, int> row_of;
    for (size_t i = 0; i < ids.size(); ++i) row_of[ids[i]] = static_cast<int>(i);

    nn::ParamStore store(cfg.seed);
    nn::Param& node = store.ensure("kg.node", static_cast<int>(ids.size()), cfg.dim);
    nn::Param& rel = store.ensure("kg.rel", std::max(1, kg.relation_count()), cfg.dim);

    auto renorm = [&] {
        for (int r = 0; r < node.value.rows(); ++r) {
            double n = node.value.row(r).norm();
            if (n > 0 && std::abs(n - 1.0) > 1e-12) node.value.row(r) /= n;
        }
    };

    PretrainResult out;
    const auto& triples = kg.triples();
    if (triples.empty() || cfg.epochs == 0) {
        renorm();
        out.table.node_vecs = node.value;
        out.table.rel_vecs = rel.value;
        out.table.node_row = row_of;
        return out;
    }

    int steps_per_epoch = static_cast<int>((triples.size() + cfg.batch - 1) /
                                           static_cast<size_t>(cfg.batch));
    nn::AdamConfig adam;
    adam.lr0 = cfg.lr;
    adam.total_steps = cfg.epochs * steps_per_epoch;

    Rng rng(cfg.seed ^ 0x7261696e);
    std::vector<size_t> order(triples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_sum = 0;
        size_t epoch_n = 0;
        for (size_t at = 0; at < order.size(); at += static_cast<size_t>(cfg.batch)) {
            size_t end = std::min(order.size(), at + static_cast<size_t>(cfg.batch));
            std::vector<int> hp, rp, tp, hn, tn;
            for (size_t k = at; k < end; ++k) {
                const Triple& tr = triples[order[k]];
                for (int neg = 0; neg < cfg.negatives; ++neg) {
                    int ch = tr.head, ct = tr.tail;
                    for (int attempt = 0; attempt < 10; ++attempt) {
                        int cand = ids[rng.below(ids.size())];
                        if (rng.coin(0.5)) {
                            if (!kg.has_triple(cand, tr.rel, tr.tail)) {
                                ch = cand;
                                ct = tr.tail;
                                break;
                            }
                        } else {
                            if (!kg.has_triple(tr.head, tr.rel, cand)) {
                                ch = tr.head;
                                ct = cand;
                                break;
                            }
                        }
                    }
                    hp.push_back(row_of[tr.head]);
                    rp.push_back(tr.rel);
                    tp.push_back(row_of[tr.tail]);
                    hn.push_back(row_of[ch]);
                    tn.push_back(row_of[ct]);
                }
            }
            int b = static_cast<int>(hp.size());
            nn::Tape t;
            auto score = [&](const std::vector<int>& h, const std::vector<int>& tl) {
                int diff = t.sub(t.add(t.gather_param(node, h), t.gather_param(rel, rp)),
                                 t.gather_param(node, tl));
                return t.affine(t.l2_norm_rows(diff), -1.0, 0.0);
            };
            int sp = score(hp, tp);
            int sn = score(hn, tn);
            // hinge: max(0, margin - sp + sn)
            int viol = t.leaky_relu(t.affine(t.sub(sn, sp), 1.0, cfg.margin), 0.0);
            int loss = t.affine(t.sum_all(viol), 1.0 / b, 0.0);
            store.zero_grads();
            t.backward(loss);
            store.adam_step(adam, step++);
            epoch_sum += t.scalar(loss) * b;
            epoch_n += static_cast<size_t>(b);
        }
        renorm();
        out.epoch_loss.push_back(epoch_sum / static_cast<double>(epoch_n));
    }

    out.table.node_vecs = node.value;
    out.table.rel_vecs = rel.value;
    out.table.node_row = row_of;
    return out;
}

double tail_mrr(const EmbeddingTable& tbl, const KnowledgeGraph& kg,
                const std::vector<Triple>& eval) {
    if (eval.empty()) return 0.0;
    std::vector<int> ids = kg.all_ids();
    double sum = 0;
    for (const Triple& tr : eval) {
        double true_score = score_triple(tbl, tr.head, tr.rel, tr.tail);
        int better = 0;
        for (int cand : ids) {
            if (cand == tr.tail) continue;
            if (kg.has_triple(tr.head, tr.rel, cand)) continue;
            if (score_triple(tbl, tr.head, tr.rel, cand) > true_score) ++better;
        }
        sum += 1.0 / (1 + better);
    }
    return sum / static_cast<double>(eval.size());
}

}  // namespace kgqr
