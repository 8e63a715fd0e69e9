#include <filesystem>
#include <sstream>

#include "doctest.h"
#include "kgqr/kgpretrain.hpp"

using namespace kgqr;
using nn::Mat;

namespace {

EmbeddingTable manual_table() {
    EmbeddingTable tbl;
    tbl.node_vecs = Mat(2, 2);
    tbl.node_vecs << 0, 0, 1, 1;
    tbl.rel_vecs = Mat(1, 2);
    tbl.rel_vecs << 1, 1;
    tbl.node_row = {{0, 0}, {1, 1}};
    return tbl;
}

// Five friendship clusters, each anchored to its own city. lives_in for the
// last member of every cluster is held out.
struct ToyKg {
    KnowledgeGraph kg;
    std::vector<Triple> held_out;
};

ToyKg toy_kg() {
    std::ostringstream ents, trips;
    for (int c = 0; c < 5; ++c) {
        for (int p = 0; p < 8; ++p) ents << (c * 8 + p) << "\tperson\n";
        ents << (100 + c) << "\tcity\n";
    }
    for (int c = 0; c < 5; ++c) {
        for (int p = 0; p < 8; ++p)
            trips << (c * 8 + p) << "\tfriends_with\t" << (c * 8 + (p + 1) % 8) << "\n";
        for (int p = 0; p < 7; ++p) trips << (c * 8 + p) << "\tlives_in\t" << (100 + c) << "\n";
    }
    std::istringstream e(ents.str()), t(trips.str());
    ToyKg toy{KnowledgeGraph::ingest(e, t), {}};
    int lives_in = toy.kg.relation_id("lives_in");
    for (int c = 0; c < 5; ++c) toy.held_out.push_back(Triple{c * 8 + 7, lives_in, 100 + c});
    return toy;
}

}  // namespace

TEST_CASE("triple scoring is the negative translation residual") {
    EmbeddingTable tbl = manual_table();
    CHECK(score_triple(tbl, 0, 0, 1) == doctest::Approx(0.0));

    tbl.node_vecs(1, 1) = 1.0 + 0.125;
    CHECK(score_triple(tbl, 0, 0, 1) == doctest::Approx(-0.125));

    CHECK_THROWS_AS(score_triple(tbl, 7, 0, 1), Error);
    CHECK_THROWS_AS(score_triple(tbl, 0, 3, 1), Error);
}

TEST_CASE("embedding table save/load round trips") {
    EmbeddingTable tbl = manual_table();
    auto p = std::filesystem::temp_directory_path() / "kgqr_test_embed.ckpt";
    tbl.save(p, {{"seed", "7"}});
    std::map<std::string, std::string> meta;
    EmbeddingTable back = EmbeddingTable::load(p, &meta);
    CHECK(meta.at("seed") == "7");
    CHECK(back.node_vecs == tbl.node_vecs);
    CHECK(back.rel_vecs == tbl.rel_vecs);
    CHECK(back.node_row == tbl.node_row);
    std::filesystem::remove(p);
}

TEST_CASE("inactive hinge leaves the initialization untouched") {
    auto toy = toy_kg();
    PretrainConfig base;
    base.dim = 8;
    base.epochs = 0;
    base.seed = 3;
    EmbeddingTable init = pretrain(toy.kg, base).table;

    PretrainConfig never;
    never.dim = 8;
    never.epochs = 3;
    never.seed = 3;
    never.margin = -1e9;  // hinge can never activate
    PretrainResult r = pretrain(toy.kg, never);
    for (double l : r.epoch_loss) CHECK(l == 0.0);
    CHECK(r.table.node_vecs == init.node_vecs);
    CHECK(r.table.rel_vecs == init.rel_vecs);
}

TEST_CASE("pretraining drives the loss down monotonically on the toy graph") {
    auto toy = toy_kg();
    PretrainConfig cfg;
    cfg.dim = 16;
    cfg.epochs = 15;
    cfg.lr = 0.05;
    cfg.batch = 128;
    cfg.negatives = 8;
    cfg.seed = 1;
    PretrainResult r = pretrain(toy.kg, cfg);
    REQUIRE(r.epoch_loss.size() == 15);
    for (size_t i = 1; i < r.epoch_loss.size(); ++i)
        CHECK(r.epoch_loss[i] <= r.epoch_loss[i - 1]);
    CHECK(r.epoch_loss.back() < r.epoch_loss.front());

    for (int row = 0; row < r.table.node_vecs.rows(); ++row)
        CHECK(r.table.node_vecs.row(row).norm() == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("training beats the untrained table at ranking") {
    auto toy = toy_kg();
    PretrainConfig cfg;
    cfg.dim = 16;
    cfg.epochs = 30;
    cfg.lr = 0.02;
    cfg.batch = 64;
    cfg.seed = 5;
    EmbeddingTable trained = pretrain(toy.kg, cfg).table;

    PretrainConfig zero = cfg;
    zero.epochs = 0;
    EmbeddingTable untrained = pretrain(toy.kg, zero).table;

    // Brute-force rank of true train triples against 50 corrupted tails.
    auto rank_mrr = [&](const EmbeddingTable& tbl) {
        Rng rng(17);
        std::vector<int> ids = toy.kg.all_ids();
        double sum = 0;
        int n = 0;
        for (const Triple& tr : toy.kg.triples()) {
            double true_score = score_triple(tbl, tr.head, tr.rel, tr.tail);
            int better = 0;
            for (int k = 0; k < 50; ++k) {
                int cand = ids[rng.below(ids.size())];
                if (cand == tr.tail || toy.kg.has_triple(tr.head, tr.rel, cand)) continue;
                if (score_triple(tbl, tr.head, tr.rel, cand) > true_score) ++better;
            }
            sum += 1.0 / (1 + better);
            ++n;
        }
        return sum / n;
    };
    CHECK(rank_mrr(trained) > rank_mrr(untrained));

    // Held-out lives_in triples: cluster structure should generalize.
    CHECK(tail_mrr(trained, toy.kg, toy.held_out) > tail_mrr(untrained, toy.kg, toy.held_out));
}

TEST_CASE("pretraining is deterministic under a fixed seed") {
    auto toy = toy_kg();
    PretrainConfig cfg;
    cfg.dim = 8;
    cfg.epochs = 4;
    cfg.seed = 21;
    EmbeddingTable a = pretrain(toy.kg, cfg).table;
    EmbeddingTable b = pretrain(toy.kg, cfg).table;
    CHECK(a.node_vecs == b.node_vecs);
    CHECK(a.rel_vecs == b.rel_vecs);
}
