// Rough throughput probe for the tape on transformer-shaped work.
#include <chrono>
#include <cstdio>

#include "kgqr/nncore.hpp"

using namespace kgqr;
using namespace kgqr::nn;

int main() {
    const int T = 24, H = 64, F = 128, heads = 4, layers = 2;
    ParamStore s(1);
    for (int l = 0; l < layers; ++l) {
        auto n = [l](const char* base) { return std::string(base) + std::to_string(l); };
        s.ensure(n("q"), H, H);
        s.ensure(n("k"), H, H);
        s.ensure(n("v"), H, H);
        s.ensure(n("o"), H, H);
        s.ensure(n("f1"), H, F);
        s.ensure(n("f2"), F, H);
        s.ensure(n("g1"), 1, H, Init::Zero);
        s.ensure(n("b1"), 1, H, Init::Zero);
    }
    Mat x0 = Mat::Random(T, H);

    auto once = [&](bool bwd) {
        Tape t;
        int x = t.constant(x0);
        for (int l = 0; l < layers; ++l) {
            auto n = [l](const char* base) { return std::string(base) + std::to_string(l); };
            int q = t.matmul(x, t.param(s.at(n("q"))));
            int k = t.matmul(x, t.param(s.at(n("k"))));
            int v = t.matmul(x, t.param(s.at(n("v"))));
            std::vector<int> ctx;
            int dh = H / heads;
            for (int h = 0; h < heads; ++h) {
                int qs = t.slice_cols(q, h * dh, dh);
                int ks = t.slice_cols(k, h * dh, dh);
                int vs = t.slice_cols(v, h * dh, dh);
                int att = t.row_softmax(t.affine(t.matmul_nt(qs, ks), 1.0 / std::sqrt(dh), 0.0));
                ctx.push_back(t.matmul(att, vs));
            }
            int cat = ctx[0];
            for (int h = 1; h < heads; ++h) cat = t.concat_cols(cat, ctx[h]);
            int att_out = t.matmul(cat, t.param(s.at(n("o"))));
            x = t.add(x, att_out);
            int gain = t.param(s.at(n("g1")));
            int bias = t.param(s.at(n("b1")));
            int ln = t.layer_norm(x, gain, bias);
            int ff = t.matmul(t.leaky_relu(t.matmul(ln, t.param(s.at(n("f1")))), 0.0),
                              t.param(s.at(n("f2"))));
            x = t.add(x, ff);
        }
        int loss = t.sum_all(t.mul(x, x));
        if (bwd) {
            s.zero_grads();
            t.backward(loss);
        }
        return t.scalar(loss);
    };

    once(true);  // warm up
    const int iters = 300;
    auto t0 = std::chrono::steady_clock::now();
    double acc = 0;
    for (int i = 0; i < iters; ++i) acc += once(true);
    auto t1 = std::chrono::steady_clock::now();
    double sec = std::chrono::duration<double>(t1 - t0).count();
    // MACs per layer: qkv+o 4*T*H*H, attn 2*T*T*H, ffn 2*T*H*F
    double macs = layers * (4.0 * T * H * H + 2.0 * T * T * H + 2.0 * T * H * F);
    double flops_iter = 2.0 * macs * 3.0;  // fwd + ~2x bwd
    std::printf("iters=%d  %.1f us/iter  ~%.2f GFLOP/s  (acc=%g)\n", iters,
                1e6 * sec / iters, flops_iter * iters / sec / 1e9, acc);
    return 0;
}
