#include <fmt/format.h>

#include <limits>
#include <sstream>

#include "doctest.h"
#include "kgqr/evalharness.hpp"

using namespace kgqr;
using nn::Mat;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// A friction sample whose corruption sits in the first word of "X by Y".
RephraseSample friction_sample(const std::string& corrupt, const std::string& target) {
    RephraseSample s;
    s.source = "play " + corrupt + " now";
    s.target = "play " + target + " now";
    s.span_start = 1;
    s.span_end = 1;
    s.corrupt_text = corrupt;
    s.target_entity = target;
    s.hypothesis = {"Music", "PlayMusicIntent", {{"SongName", corrupt}}};
    return s;
}

RephraseSample clean_sample(const std::string& text) {
    RephraseSample s;
    s.clean = true;
    s.source = s.target = "play " + text + " now";
    s.hypothesis = {"Music", "PlayMusicIntent", {{"SongName", text}}};
    return s;
}

// A hand-built result: `top` leads the re-rank order; when triggered, the
// hypothesis is rewritten as the pipeline would (span text -> top surface).
RewriteResult result_for(const RephraseSample& s, bool triggered, const std::string& top) {
    RewriteResult r;
    r.trace.utterance = s.source;
    r.trace.reranked = {{top, {1}, 1.0}};
    r.triggered = triggered;
    if (triggered) {
        r.span = {static_cast<int>(s.span_start) + 1, static_cast<int>(s.span_end) + 1, 5.0,
                  false};
        r.entity = top;
        r.rewritten_hypothesis = rewrite_hypothesis(s.hypothesis, s.corrupt_text, top);
    }
    return r;
}

// Margin m means the best span beats null by exactly m; the span covers the
// second word of a three-word utterance.
ProcessedQuery margin_query(double m, const std::string& top, const std::string& utterance) {
    ProcessedQuery q;
    q.utterance = utterance;
    q.utt_tokens = split_ws(to_lower(utterance));
    q.max_span_len = 4;
    q.retrieved = {{top, {1}, 0.5}};
    q.reranked = {{top, {1}, 0.5}};
    q.start_scores.assign(q.utt_tokens.size() + 1, -50.0);
    q.end_scores.assign(q.utt_tokens.size() + 1, -50.0);
    q.start_scores[0] = q.end_scores[0] = 0.0;
    q.start_scores[2] = q.end_scores[2] = m / 2.0;
    return q;
}

}  // namespace

TEST_CASE("metric arithmetic matches hand counts") {
    // ten friction samples: six trigger, of those three rewrite the
    // hypothesis correctly and four rank the right entity first
    std::vector<RephraseSample> samples;
    std::vector<RewriteResult> results;
    for (int i = 0; i < 10; ++i) {
        RephraseSample s = friction_sample("badd romance", "bad romance");
        s.source += fmt::format(" {}", i);  // keep sources distinct
        samples.push_back(s);
    }
    // triggered, entity+hypothesis correct
    for (int i = 0; i < 3; ++i) results.push_back(result_for(samples[results.size()], true, "bad romance"));
    // triggered, wrong entity at rank 1 -> wrong hypothesis too
    for (int i = 0; i < 2; ++i) results.push_back(result_for(samples[results.size()], true, "carson city"));
    // triggered, right entity but the hypothesis rewrite missed the slot
    {
        RewriteResult r = result_for(samples[results.size()], true, "bad romance");
        r.rewritten_hypothesis.reset();
        results.push_back(r);
    }
    while (results.size() < 10) results.push_back(result_for(samples[results.size()], false, "bad romance"));

    MetricsReport rep = evaluate(results, samples, "friction");
    CHECK(rep.label == "friction");
    CHECK_FALSE(rep.clean_set);
    CHECK(rep.total == 10);
    CHECK(rep.triggered == 6);
    CHECK(rep.hypothesis_correct == 3);
    CHECK(rep.entity_correct == 4);
    CHECK(rep.trigger_rate == 6.0 / 10.0);
    REQUIRE(rep.nlu_precision.has_value());
    CHECK(*rep.nlu_precision == 3.0 / 6.0);
    CHECK(rep.correct_trigger_rate == 3.0 / 10.0);
    REQUIRE(rep.entity_precision.has_value());
    CHECK(*rep.entity_precision == 4.0 / 6.0);
    CHECK(evaluate(results, samples, "friction") == rep);  // pure function

    // nothing triggered: precisions are undefined, not zero
    std::vector<RewriteResult> silent(results.size());
    for (size_t i = 0; i < silent.size(); ++i) silent[i] = result_for(samples[i], false, "x");
    MetricsReport none = evaluate(silent, samples, "friction");
    CHECK(none.triggered == 0);
    CHECK(none.trigger_rate == 0.0);
    CHECK(none.correct_trigger_rate == 0.0);
    CHECK_FALSE(none.entity_precision.has_value());
    CHECK_FALSE(none.nlu_precision.has_value());

    // clean sets report the trigger rate only
    std::vector<RephraseSample> clean = {clean_sample("bad romance"), clean_sample("poker face"),
                                         clean_sample("telephone"), clean_sample("alejandro")};
    std::vector<RewriteResult> clean_results;
    for (size_t i = 0; i < clean.size(); ++i) {
        RewriteResult r;
        r.trace.reranked = {{"bad romance", {1}, 1.0}};
        r.triggered = i == 0;
        clean_results.push_back(r);
    }
    MetricsReport crep = evaluate(clean_results, clean, "clean");
    CHECK(crep.clean_set);
    CHECK(crep.triggered == 1);
    CHECK(crep.trigger_rate == 1.0 / 4.0);
    CHECK(crep.correct_trigger_rate == 0.0);
    CHECK_FALSE(crep.entity_precision.has_value());
    CHECK_FALSE(crep.nlu_precision.has_value());
    CHECK(crep.entity_correct == 0);

    // always-trigger mode scores every sample by its rank-1 entity
    MetricsReport at = evaluate(results, samples, "friction", true);
    CHECK(at.triggered == 10);
    CHECK(at.trigger_rate == 1.0);
    CHECK(at.entity_correct == 8);  // the four untriggered results also rank it first
    CHECK(at.hypothesis_correct == 3);

    MetricsReport empty = evaluate({}, {}, "none");
    CHECK(empty.total == 0);
    CHECK(empty.note == "empty subset");
    CHECK_FALSE(empty.entity_precision.has_value());

    CHECK_THROWS_AS(evaluate(results, clean, "bad"), Error);
    CHECK_THROWS_AS(gold_hypothesis(clean_sample("x")), Error);
    RephraseSample broken = friction_sample("badd", "bad");
    broken.hypothesis.slots = {{"SongName", "something else"}};
    CHECK_THROWS_AS(gold_hypothesis(broken), Error);
    CHECK(gold_hypothesis(samples[0]).slots[0].second == "bad romance");
}

TEST_CASE("correct trigger rate is a count-level identity on random outcomes") {
    Rng rng(77);
    std::vector<RephraseSample> samples;
    std::vector<RewriteResult> results;
    size_t want_correct = 0, want_triggered = 0, want_entity = 0;
    for (int i = 0; i < 1000; ++i) {
        RephraseSample s = friction_sample("wrng text", "right text");
        s.source += fmt::format(" {}", i);
        bool triggered = rng.coin(0.55);
        bool entity_right = rng.coin(0.4);
        RewriteResult r = result_for(s, triggered, entity_right ? "right text" : "other text");
        bool hyp_right = triggered && entity_right && rng.coin(0.8);
        if (triggered && !hyp_right) r.rewritten_hypothesis.reset();
        want_triggered += triggered;
        want_correct += hyp_right;
        want_entity += triggered && entity_right;
        samples.push_back(std::move(s));
        results.push_back(std::move(r));
    }
    MetricsReport rep = evaluate(results, samples, "random");
    CHECK(rep.triggered == want_triggered);
    CHECK(rep.hypothesis_correct == want_correct);
    CHECK(rep.entity_correct == want_entity);
    // the identity holds because both sides reduce to the same counts
    CHECK(rep.correct_trigger_rate ==
          static_cast<double>(want_correct) / static_cast<double>(rep.total));
    CHECK(rep.correct_trigger_rate ==
          doctest::Approx(rep.trigger_rate * *rep.nlu_precision).epsilon(1e-12));
}

TEST_CASE("theta sweep keeps the clean cap and maximizes corrected triggers") {
    // friction margins 10, 6.5, 4.5, 3.5, 2; the 3.5 one ranks a wrong entity
    std::vector<RephraseSample> fs;
    std::vector<ProcessedQuery> fq;
    const double margins[] = {10.0, 6.5, 4.5, 3.5, 2.0};
    for (int i = 0; i < 5; ++i) {
        RephraseSample s = friction_sample("wrng", "good");
        s.source = fmt::format("play{} wrng now", i);
        fs.push_back(s);
        fq.push_back(margin_query(margins[static_cast<size_t>(i)], i == 3 ? "evil" : "good",
                                  fs.back().source));
    }
    std::vector<RephraseSample> cs = {clean_sample("alpha"), clean_sample("beta")};
    std::vector<ProcessedQuery> cq = {margin_query(6.5, "gamma", cs[0].source),
                                      margin_query(3.5, "gamma", cs[1].source)};

    ThetaChoice c = sweep_theta(fq, fs, cq, cs, default_thetas(), 0.6);
    CHECK(default_thetas() == std::vector<double>{3, 4, 5, 6, 7});
    REQUIRE(c.friction_reports.size() == 5);
    CHECK(c.friction_reports[0].label == "friction@theta=3");
    CHECK(c.clean_reports[0].label == "clean@theta=3");

    const double want_tr[] = {0.8, 0.6, 0.4, 0.4, 0.2};
    const double want_ctr[] = {0.6, 0.6, 0.4, 0.4, 0.2};
    const double want_clean_tr[] = {1.0, 0.5, 0.5, 0.5, 0.0};
    for (size_t i = 0; i < 5; ++i) {
        CHECK(c.friction_reports[i].trigger_rate == doctest::Approx(want_tr[i]));
        CHECK(c.friction_reports[i].correct_trigger_rate == doctest::Approx(want_ctr[i]));
        CHECK(c.clean_reports[i].trigger_rate == doctest::Approx(want_clean_tr[i]));
        CHECK(c.clean_reports[i].clean_set);
    }
    // trigger rate never increases with theta on either set
    for (size_t i = 1; i < 5; ++i) {
        CHECK(c.friction_reports[i].trigger_rate <= c.friction_reports[i - 1].trigger_rate);
        CHECK(c.clean_reports[i].trigger_rate <= c.clean_reports[i - 1].trigger_rate);
    }
    // survivors of the cap form a suffix of the ascending sweep
    bool seen_survivor = false;
    for (size_t i = 0; i < 5; ++i) {
        bool ok = c.clean_reports[i].trigger_rate <= 0.6;
        if (seen_survivor) CHECK(ok);
        seen_survivor = seen_survivor || ok;
    }
    CHECK(c.feasible);
    CHECK(c.theta == 4.0);  // theta 3 breaks the cap; 4 has the best CTR after it

    // CTR tie between 5 and 6 goes to the more conservative threshold
    ThetaChoice tie = sweep_theta(fq, fs, cq, cs, {5.0, 6.0}, 0.6);
    CHECK(tie.feasible);
    CHECK(tie.theta == 6.0);

    // no survivor: fall back to the lowest clean trigger rate, larger theta on ties
    ThetaChoice bad = sweep_theta(fq, fs, cq, cs, {3.0, 4.0, 5.0}, 0.0);
    CHECK_FALSE(bad.feasible);
    CHECK(bad.theta == 5.0);

    ThetaChoice one = sweep_theta(fq, fs, cq, cs, {4.0}, 0.6);
    CHECK(one.feasible);
    CHECK(one.theta == 4.0);

    CHECK_THROWS_AS(sweep_theta(fq, fs, cq, cs, {}, 0.5), Error);
    CHECK_THROWS_AS(sweep_theta(fq, fs, cq, cs, {4.0}, 1.5), Error);
    CHECK_THROWS_AS(materialize_all(fq, 3.0, cs), Error);  // misaligned sizes
}

TEST_CASE("subset reports partition by tag and ablation deltas are positional") {
    std::vector<RephraseSample> samples;
    std::vector<RewriteResult> results;
    auto add = [&](bool zero, bool few, bool rel, bool triggered, bool correct) {
        RephraseSample s = friction_sample("wrng", "good");
        s.source += fmt::format(" {}", samples.size());
        s.zero_shot = zero;
        s.few_shot = few;
        s.kg_relation = rel;
        samples.push_back(s);
        results.push_back(result_for(samples.back(), triggered, correct ? "good" : "evil"));
    };
    add(true, false, false, true, true);
    add(true, false, true, true, false);
    add(false, true, false, true, true);
    add(false, true, true, false, false);
    add(false, true, false, false, false);
    add(false, false, false, true, true);

    std::vector<MetricsReport> subs = subset_report(results, samples);
    REQUIRE(subs.size() == 4);
    CHECK(subs[0].label == "overall");
    CHECK(subs[1].label == "zero_shot");
    CHECK(subs[2].label == "few_shot");
    CHECK(subs[3].label == "kg_relation");
    CHECK(subs[0].total == 6);
    CHECK(subs[1].total == 2);
    CHECK(subs[2].total == 3);
    CHECK(subs[3].total == 2);
    CHECK(subs[1].total + subs[2].total <= subs[0].total);  // zero/few are disjoint
    CHECK(subs[1].triggered == 2);
    CHECK(subs[1].hypothesis_correct == 1);
    CHECK(subs[2].triggered == 1);
    REQUIRE(subs[2].nlu_precision.has_value());
    CHECK(*subs[2].nlu_precision == 1.0);
    for (const MetricsReport& r : subs)
        CHECK(r.correct_trigger_rate ==
              static_cast<double>(r.hypothesis_correct) / static_cast<double>(r.total));

    // a tag with no members stays in the report, flagged
    std::vector<RephraseSample> untagged(samples.begin() + 4, samples.begin() + 6);
    std::vector<RewriteResult> unres(results.begin() + 4, results.begin() + 6);
    untagged[0].few_shot = false;
    std::vector<MetricsReport> sparse = subset_report(unres, untagged);
    CHECK(sparse[1].total == 0);
    CHECK(sparse[1].note == "empty subset");
    CHECK(sparse[3].note == "empty subset");

    // self-comparison: every delta is exactly zero
    for (const AblationDelta& d : ablation_deltas(subs, subs)) CHECK(d.delta == 0.0);

    std::vector<MetricsReport> worse = subset_report(
        std::vector<RewriteResult>(results.size(), result_for(samples[0], false, "evil")),
        samples);
    std::vector<AblationDelta> deltas = ablation_deltas(subs, worse);
    bool saw_tr = false;
    for (const AblationDelta& d : deltas) {
        if (d.subset == "overall" && d.metric == "trigger_rate") {
            CHECK(d.delta == doctest::Approx(4.0 / 6.0));
            saw_tr = true;
        }
        CHECK(d.metric != "entity_precision");  // undefined on the silent system
    }
    CHECK(saw_tr);

    std::vector<MetricsReport> relabeled = subs;
    relabeled[1].label = "something_else";
    CHECK_THROWS_AS(ablation_deltas(subs, relabeled), Error);
    CHECK_THROWS_AS(ablation_deltas(subs, std::vector<MetricsReport>(subs.begin(), subs.end() - 1)),
                    Error);

    // output formats
    std::string table = format_table(subs);
    CHECK(table.find("zero_shot") != std::string::npos);
    CHECK(table.find("E-P") != std::string::npos);
    std::string records = format_records(sparse);
    CHECK(records.find("set=few_shot") != std::string::npos);
    CHECK(records.find("entity_precision=undefined") != std::string::npos);
    CHECK(records.find("note=empty subset") != std::string::npos);
    MetricsReport clean_rep;
    clean_rep.label = "clean";
    clean_rep.clean_set = true;
    clean_rep.total = 4;
    clean_rep.triggered = 1;
    clean_rep.trigger_rate = 0.25;
    std::string cline = format_records({clean_rep});
    CHECK(cline.find("trigger_rate=0.25") != std::string::npos);
    CHECK(cline.find("nlu_precision") == std::string::npos);  // TR only on clean sets
}

TEST_CASE("trigger rate never increases with theta on random score fixtures") {
    Rng rng(5);
    std::vector<RephraseSample> samples;
    std::vector<ProcessedQuery> queries;
    for (int i = 0; i < 300; ++i) {
        RephraseSample s = friction_sample("wrng", "good");
        s.source = fmt::format("w{} wrng tail", i);
        // a handful of no-op candidates exercise the surface == span guard
        std::string top = rng.coin(0.15) ? "wrng" : (rng.coin(0.5) ? "good" : "evil");
        ProcessedQuery q = margin_query(rng.uniform(-2.0, 12.0), top, s.source);
        for (double& v : q.start_scores) v += rng.uniform(-1.0, 1.0);
        for (double& v : q.end_scores) v += rng.uniform(-1.0, 1.0);
        samples.push_back(std::move(s));
        queries.push_back(std::move(q));
    }
    double last = 2.0;
    for (double theta : default_thetas()) {
        MetricsReport rep = evaluate(materialize_all(queries, theta, samples), samples, "f");
        CHECK(rep.trigger_rate <= last);
        last = rep.trigger_rate;
        // recomputation is bit-identical
        CHECK(evaluate(materialize_all(queries, theta, samples), samples, "f") == rep);
    }
    MetricsReport always = evaluate(materialize_all(queries, -kInf, samples), samples, "f", true);
    CHECK(always.triggered == always.total);
}

TEST_CASE("process_all matches one-at-a-time pipeline runs") {
    std::istringstream ents(
        "10\tbad romance\tsong\n"
        "11\tbad romance\t2011 film\n"
        "12\tlady gaga\tamerican singer\n"
        "13\tcarson city\tcapital of nevada\n"
        "14\tcorbin city\tcity in new jersey\n");
    std::istringstream trips(
        "10\tperformer\t12\n"
        "11\tdirected_by\t12\n"
        "13\tnear\t14\n");
    KnowledgeGraph music = KnowledgeGraph::ingest(ents, trips);
    EntityCatalog cat = EntityCatalog::build(music);

    std::vector<std::string> extra = {"play bad boy dance by lady gaga",
                                      "directions to corbin city"};
    for (int id : music.all_ids()) extra.push_back(music.entity_text(id));
    Vocab vocab = Vocab::build(extra);
    EmbeddingTable emb;
    auto ids = music.all_ids();
    emb.node_vecs = Mat(static_cast<int>(ids.size()), 16);
    emb.rel_vecs = Mat(music.relation_count(), 16);
    Rng trng(7);
    for (int r = 0; r < emb.node_vecs.rows(); ++r)
        for (int c = 0; c < 16; ++c) emb.node_vecs(r, c) = trng.uniform(-0.5, 0.5);
    for (int r = 0; r < emb.rel_vecs.rows(); ++r)
        for (int c = 0; c < 16; ++c) emb.rel_vecs(r, c) = trng.uniform(-0.5, 0.5);
    for (size_t i = 0; i < ids.size(); ++i) emb.node_row[ids[i]] = static_cast<int>(i);

    BiEncoderConfig l1c;
    l1c.text = {.layers = 1, .heads = 2, .hidden = 16, .ffn = 32, .max_len = 16};
    l1c.gat = GatConfig{.layers = 1, .heads = 2, .hidden = 16};
    l1c.d_sim = 16;
    CrossEncoderConfig l2c;
    l2c.text = {.layers = 1, .heads = 2, .hidden = 16, .ffn = 32, .max_len = 24};
    l2c.gat = GatConfig{.layers = 1, .heads = 2, .hidden = 16};
    l2c.rank_hidden = 16;
    nn::ParamStore s1(21), s2(22);
    BiEncoder l1(l1c, vocab, &emb, &s1, "a");
    CrossEncoder l2(l2c, vocab, &emb, &s2, "b");
    EntityIndex index = build_index(l1, cat);

    std::vector<RephraseSample> samples;
    {
        RephraseSample a = friction_sample("bad boy dance", "bad romance");
        a.source = "play bad boy dance by lady gaga";
        samples.push_back(a);
        RephraseSample b = friction_sample("corben city", "corbin city");
        b.source = "directions to corben city";
        samples.push_back(b);
        samples.push_back(clean_sample("bad romance"));
    }

    std::vector<ProcessedQuery> qs = process_all(l1, index, l2, cat, samples, 3);
    REQUIRE(qs.size() == 3);
    for (size_t i = 0; i < qs.size(); ++i) {
        ProcessedQuery one = process_query(l1, index, l2, cat, samples[i].source, 3);
        CHECK(one.reranked.size() == qs[i].reranked.size());
        CHECK(one.start_scores == qs[i].start_scores);  // bitwise: same model, same input
        CHECK(one.end_scores == qs[i].end_scores);
        for (size_t j = 0; j < one.reranked.size(); ++j) {
            CHECK(one.reranked[j].surface == qs[i].reranked[j].surface);
            CHECK(one.reranked[j].score == qs[i].reranked[j].score);
        }
    }

    for (double theta : {-kInf, 0.0, kInf}) {
        std::vector<RewriteResult> rs = materialize_all(qs, theta, samples);
        MetricsReport rep = evaluate(rs, samples, "mixed");
        CHECK(rep.total == 3);
        CHECK(rep.hypothesis_correct <= rep.triggered);
        CHECK(rep.correct_trigger_rate ==
              static_cast<double>(rep.hypothesis_correct) / 3.0);
        for (size_t i = 0; i < rs.size(); ++i) {
            RewriteResult direct = materialize(qs[i], theta, &samples[i].hypothesis);
            CHECK(direct.triggered == rs[i].triggered);
            CHECK(direct.entity == rs[i].entity);
        }
    }
}
