#include "kgqr/graphenc.hpp"

#include <fmt/core.h>

#include <map>

namespace kgqr {

GatInput build_gat_input(const Subgraph& sg,
                         const std::function<nn::Mat(int)>& node_vec_of_entity) {
    GatInput in;
    std::map<int, int> row_of;
    std::vector<int> entity_of_row{sg.center};
    row_of[sg.center] = 0;
    for (const Edge& e : sg.edges) {
        if (!row_of.count(e.neighbor)) {
            row_of[e.neighbor] = static_cast<int>(entity_of_row.size());
            entity_of_row.push_back(e.neighbor);
        }
    }
    int n = static_cast<int>(entity_of_row.size());
    nn::Mat center_vec = node_vec_of_entity(sg.center);
    in.node_vecs.resize(n, center_vec.cols());
    in.node_vecs.row(0) = center_vec.row(0);
    for (int i = 1; i < n; ++i) in.node_vecs.row(i) = node_vec_of_entity(entity_of_row[static_cast<size_t>(i)]).row(0);

    for (const Edge& e : sg.edges)
        in.edges.push_back(GatEdge{0, row_of[e.neighbor], e.rel, e.inverse});
    std::vector<bool> has_in(static_cast<size_t>(n), false);
    for (const GatEdge& e : in.edges) has_in[static_cast<size_t>(e.dst)] = true;
    for (int i = 0; i < n; ++i)
        if (!has_in[static_cast<size_t>(i)]) in.edges.push_back(GatEdge{i, i, -1, false});
    return in;
}

GatEncoder::GatEncoder(const GatConfig& cfg, int d_in, const nn::Mat* rel_table,
                       nn::ParamStore* store, std::string prefix)
    : cfg_(cfg), d_in_(d_in), rel_table_(rel_table), store_(store), prefix_(std::move(prefix)) {
    if (cfg_.hidden % cfg_.heads != 0) throw Error("gat hidden not divisible by heads");
    if (cfg_.layers < 1) throw Error("gat needs at least one layer");
    if (cfg_.use_relations) {
        if (!rel_table_) throw Error("gat relation table missing");
        if (rel_table_->cols() != d_in_) throw Error("gat relation dim mismatch");
        std::string name = prefix_ + ".inv_rel";
        bool fresh = !store_->has(name);
        nn::Param& inv = store_->ensure(name, static_cast<int>(rel_table_->rows()), d_in_,
                                        nn::Init::Zero);
        if (fresh) inv.value = -*rel_table_;
    }
    for (int l = 0; l < cfg_.layers; ++l) {
        int din = layer_in_dim(l);
        int f = head_out_dim(l);
        for (int h = 0; h < cfg_.heads; ++h) {
            std::string hp = fmt::format("{}.l{}.h{}", prefix_, l, h);
            store_->ensure(hp + ".w", din, f);
            store_->ensure(hp + ".a_dst", f, 1);
            store_->ensure(hp + ".a_msg", f, 1);
        }
        if (cfg_.use_relations && l < cfg_.layers - 1)
            store_->ensure(fmt::format("{}.l{}.rel.w", prefix_, l), din, cfg_.hidden);
    }
}

int GatEncoder::encode(nn::Tape& t, const GatInput& in, Trace* trace) const {
    int n = static_cast<int>(in.node_vecs.rows());
    if (n < 1) throw Error("gat input has no nodes");
    if (in.node_vecs.cols() != d_in_) throw Error("gat node dim mismatch");
    int e = static_cast<int>(in.edges.size());
    if (e == 0) throw Error("gat input has no edges");

    std::vector<int> dst(static_cast<size_t>(e)), src(static_cast<size_t>(e));
    for (int i = 0; i < e; ++i) {
        dst[static_cast<size_t>(i)] = in.edges[static_cast<size_t>(i)].dst;
        src[static_cast<size_t>(i)] = in.edges[static_cast<size_t>(i)].src;
    }

    int x = t.constant(in.node_vecs);
    int rel = -1;
    if (cfg_.use_relations) {
        // Per-edge relation rows: fixed forward rows, learned inverse rows,
        // and the composition identity on self-loops.
        std::vector<int> fwd_rows, inv_rows, perm(static_cast<size_t>(e), -1);
        int n_self = 0;
        for (int i = 0; i < e; ++i) {
            const GatEdge& ge = in.edges[static_cast<size_t>(i)];
            if (ge.rel >= 0 && !ge.inverse) fwd_rows.push_back(ge.rel);
        }
        for (int i = 0; i < e; ++i)
            if (in.edges[static_cast<size_t>(i)].rel >= 0 && in.edges[static_cast<size_t>(i)].inverse)
                inv_rows.push_back(in.edges[static_cast<size_t>(i)].rel);
        for (int i = 0; i < e; ++i)
            if (in.edges[static_cast<size_t>(i)].rel < 0) ++n_self;

        std::vector<int> parts;
        int at = 0;
        if (!fwd_rows.empty()) parts.push_back(t.gather_table(rel_table_, fwd_rows));
        int fwd_base = 0, inv_base = static_cast<int>(fwd_rows.size());
        if (!inv_rows.empty())
            parts.push_back(t.gather_param(store_->at(prefix_ + ".inv_rel"), inv_rows));
        int self_base = inv_base + static_cast<int>(inv_rows.size());
        if (n_self > 0) {
            nn::Mat ident = cfg_.phi == GatConfig::Phi::Subtract
                                ? nn::Mat::Zero(n_self, d_in_)
                                : nn::Mat::Ones(n_self, d_in_);
            parts.push_back(t.constant(std::move(ident)));
        }
        int fwd_at = fwd_base, inv_at = inv_base, self_at = self_base;
        for (int i = 0; i < e; ++i) {
            const GatEdge& ge = in.edges[static_cast<size_t>(i)];
            if (ge.rel < 0)
                perm[static_cast<size_t>(i)] = self_at++;
            else if (ge.inverse)
                perm[static_cast<size_t>(i)] = inv_at++;
            else
                perm[static_cast<size_t>(i)] = fwd_at++;
        }
        (void)at;
        int stacked = parts.size() == 1 ? parts[0] : t.stack_rows(parts);
        bool identity = true;
        for (int i = 0; i < e; ++i)
            if (perm[static_cast<size_t>(i)] != i) identity = false;
        rel = identity ? stacked : t.gather_rows(stacked, perm);
    }

    if (trace) trace->alpha.assign(static_cast<size_t>(cfg_.layers), {});
    for (int l = 0; l < cfg_.layers; ++l) {
        bool final_layer = l == cfg_.layers - 1;
        int msg_src = t.gather_rows(x, src);
        int msg = msg_src;
        if (cfg_.use_relations)
            msg = cfg_.phi == GatConfig::Phi::Subtract ? t.sub(msg_src, rel)
                                                       : t.mul(msg_src, rel);
        std::vector<int> heads;
        for (int h = 0; h < cfg_.heads; ++h) {
            std::string hp = fmt::format("{}.l{}.h{}", prefix_, l, h);
            int w = t.param(store_->at(hp + ".w"));
            int wx = t.matmul(x, w);
            int wmsg = t.matmul(msg, w);
            int att_in = cfg_.attend_composed ? wmsg
                         : cfg_.use_relations ? t.matmul(msg_src, w)
                                              : wmsg;
            int s_dst = t.matmul(wx, t.param(store_->at(hp + ".a_dst")));
            int s_msg = t.matmul(att_in, t.param(store_->at(hp + ".a_msg")));
            int logits = t.leaky_relu(t.add(t.gather_rows(s_dst, dst), s_msg), cfg_.slope);
            int alpha = t.segment_softmax(logits, dst, n);
            if (trace) trace->alpha[static_cast<size_t>(l)].push_back(t.value(alpha));
            heads.push_back(t.segment_sum(t.mul_colvec(wmsg, alpha), dst, n));
        }
        if (final_layer) {
            int acc = heads[0];
            for (size_t h = 1; h < heads.size(); ++h) acc = t.add(acc, heads[h]);
            x = t.elu(t.affine(acc, 1.0 / cfg_.heads, 0.0));
        } else {
            int cat = t.elu(heads[0]);
            for (size_t h = 1; h < heads.size(); ++h) cat = t.concat_cols(cat, t.elu(heads[h]));
            x = cat;
        }
        if (cfg_.use_relations && !final_layer)
            rel = t.matmul(rel, t.param(store_->at(fmt::format("{}.l{}.rel.w", prefix_, l))));
    }
    return t.mean_rows(x);
}

}  // namespace kgqr
