#include <algorithm>
#include <set>
#include <sstream>

#include "doctest.h"
#include "kgqr/synthdata.hpp"

using namespace kgqr;

namespace {

KnowledgeGraph make(const std::string& ents, const std::string& trips) {
    std::istringstream e(ents), t(trips);
    return KnowledgeGraph::ingest(e, t);
}

SynthKgConfig small_kg_cfg(uint64_t seed = 5) {
    SynthKgConfig cfg;
    cfg.songs = 60;
    cfg.artists = 20;
    cfg.albums = 15;
    cfg.films = 10;
    cfg.cities = 16;
    cfg.seed = seed;
    return cfg;
}

KnowledgeGraph small_kg(uint64_t seed = 5) {
    SynthKg raw = synth_kg(small_kg_cfg(seed));
    return make(raw.entities_tsv, raw.triples_tsv);
}

BiEncoderConfig miner_cfg(int d = 16) {
    BiEncoderConfig cfg;
    cfg.text = {.layers = 1, .heads = 2, .hidden = d, .ffn = 2 * d, .max_len = 16};
    cfg.gat = GatConfig{.layers = 1, .heads = 2, .hidden = d};
    cfg.d_sim = d;
    cfg.use_gat = false;
    return cfg;
}

}  // namespace

TEST_CASE("synthetic graph plants the fixture entities and is seed-stable") {
    SynthKg raw = synth_kg(small_kg_cfg());
    KnowledgeGraph kg = make(raw.entities_tsv, raw.triples_tsv);

    CHECK(kg.entity(10).surface == "bad romance");
    CHECK(kg.entity(10).descriptions == std::vector<std::string>{"song"});
    CHECK(kg.entity(11).surface == "bad romance");
    CHECK(kg.entity(11).descriptions == std::vector<std::string>{"2011 film"});
    CHECK(kg.entity(12).surface == "lady gaga");
    CHECK(kg.entity(13).surface == "carson city");
    CHECK(kg.entity(14).surface == "corbin city");
    CHECK(kg.has_triple(10, kg.relation_id("performer"), 12));
    CHECK(kg.has_triple(11, kg.relation_id("directed_by"), 12));
    CHECK(kg.has_triple(13, kg.relation_id("near"), 14));
    CHECK(kg.entity_count() >= 126);  // 121 generated + 5 planted, plus polysemy

    EntityCatalog cat = EntityCatalog::build(kg);
    const EntityEntry* br = cat.find("bad romance");
    REQUIRE(br);
    CHECK(br->descriptions == std::vector<std::string>{"song", "2011 film"});

    SynthKg again = synth_kg(small_kg_cfg());
    CHECK(again.entities_tsv == raw.entities_tsv);
    CHECK(again.triples_tsv == raw.triples_tsv);
    CHECK(synth_kg(small_kg_cfg(6)).entities_tsv != raw.entities_tsv);
}

TEST_CASE("template fixture parses and matches the shipped file") {
    std::vector<Template> ts = parse_templates(default_templates());
    REQUIRE(ts.size() == 13);
    CHECK(ts[0].pattern == "play {song} by {artist}");
    CHECK(ts[0].domain == "Music");
    CHECK(ts[0].intent == "PlayMusicIntent");
    REQUIRE(ts[0].slot_names.size() == 2);
    CHECK(ts[0].slot_names[0] == std::pair<std::string, std::string>{"song", "SongName"});
    CHECK(ts[0].slot_names[1] == std::pair<std::string, std::string>{"artist", "ArtistName"});

    CHECK(pattern_placeholders("navigate from {city} to {city2}") ==
          std::vector<std::string>{"city", "city2"});
    CHECK(placeholder_role("city2") == "city");
    CHECK(placeholder_role("song") == "song");
    CHECK_THROWS_AS(placeholder_role("42"), Error);
    CHECK_THROWS_AS(pattern_placeholders("play {song}s now"), Error);

    CHECK(read_file(std::string(KGQR_SOURCE_DIR) + "/fixtures/templates.tsv") ==
          default_templates());

    CHECK_THROWS_AS(parse_templates("wrong\theader\there\tx\n"), Error);
    std::string h = "pattern\tdomain\tintent\tslots\n";
    CHECK_THROWS_AS(parse_templates(h + "play {a}\tMusic\tX\n"), Error);            // 3 fields
    CHECK_THROWS_AS(parse_templates(h + "play now\tMusic\tX\t\n"), Error);          // no slots
    CHECK_THROWS_AS(parse_templates(h + "play {a}\tMusic\tX\tb=Slot\n"), Error);    // unknown ph
    CHECK_THROWS_AS(parse_templates(h + "play {a} {a}\tM\tX\ta=S\n"), Error);       // duplicate
    CHECK_THROWS_AS(parse_templates(h + "play {a} {b}\tM\tX\ta=S\n"), Error);       // b unmapped
    CHECK_THROWS_AS(parse_templates(h + "play {a}\tM\tX\ta=\n"), Error);            // bad mapping
    CHECK_THROWS_AS(parse_templates(""), Error);
}

TEST_CASE("role fillers come from graph relations and respect the index filter") {
    KnowledgeGraph kg = make(
        "10\tbad romance\tsong\n"
        "11\tbad romance\t2011 film\n"
        "12\tlady gaga\tamerican singer\n"
        "13\tcarson city\tcapital of nevada\n"
        "14\tcorbin city\tcity in new jersey\n"
        "15\t99 balloons\tsong\n",  // digits: not index-eligible
        "10\tperformer\t12\n"
        "11\tdirected_by\t12\n"
        "13\tnear\t14\n"
        "15\tperformer\t12\n");
    EntityCatalog cat = EntityCatalog::build(kg);
    auto roles = role_surfaces(kg, cat);

    CHECK(roles.at("song") == std::vector<std::string>{"bad romance"});
    CHECK(roles.at("artist") == std::vector<std::string>{"lady gaga"});
    CHECK(roles.at("film") == std::vector<std::string>{"bad romance"});
    CHECK(roles.at("city") == std::vector<std::string>{"carson city", "corbin city"});
    CHECK(roles.count("album") == 0);  // no in_album edges
}

TEST_CASE("corruption operators never return the input and stay close to it") {
    std::vector<std::string> surfaces = {"carson city", "corbin city", "carson town",
                                         "bad romance", "lady gaga"};
    Corruptor c(surfaces);

    CHECK(c.nearest("carson city") == "corbin city");  // distance 3 beats "carson town"
    Corruptor tie({"aa", "ab", "ba"});
    CHECK(tie.nearest("aa") == "ab");  // distance 1 twice; lexicographically first wins

    Rng rng(4);
    bool saw_confusable = false;
    for (int i = 0; i < 300; ++i) {
        std::string out = c.corrupt("carson city", rng);
        CHECK(out != "carson city");
        CHECK_FALSE(out.empty());
        CHECK(out == join(split_ws(out), " "));  // normalized spacing
        saw_confusable = saw_confusable || out == "corbin city";
    }
    CHECK(saw_confusable);

    // mean character edit distance over a realistic catalog stays in [1, 4]
    KnowledgeGraph kg = small_kg();
    EntityCatalog cat = EntityCatalog::build(kg);
    std::vector<std::string> all;
    for (const EntityEntry& e : cat.entries()) all.push_back(e.surface);
    Corruptor big(all);
    Rng r2(11);
    double total = 0;
    const int n = 1000;
    for (int i = 0; i < n; ++i) {
        const std::string& s = all[static_cast<size_t>(r2.below(static_cast<int64_t>(all.size())))];
        total += static_cast<double>(edit_distance(s, big.corrupt(s, r2)));
    }
    double mean = total / n;
    CHECK(mean >= 1.0);
    CHECK(mean <= 4.0);

    CHECK_THROWS_AS(c.corrupt("", rng), Error);
    CHECK_THROWS_AS(corrupt_entity("only", rng, {"only"}), Error);  // no other surface
    CHECK(corrupt_entity("carson city", rng, surfaces) != "carson city");
}

TEST_CASE("generation produces valid spans, splits, and is seed-deterministic") {
    KnowledgeGraph kg = small_kg();
    EntityCatalog cat = EntityCatalog::build(kg);
    std::vector<Template> templates = parse_templates(default_templates());
    GenCounts counts;
    counts.l2_train = 300;
    counts.clean_fraction = 0.25;
    counts.l1_train = 80;
    counts.friction_test = 120;
    counts.clean_test = 30;

    Rng rng(9);
    GeneratedData d = generate(kg, cat, templates, counts, rng);
    CHECK(d.warnings.empty());
    CHECK(d.l2_train.size() == 300);
    CHECK(d.l1_train.size() == 80);
    CHECK(d.friction_test.size() == 120);
    CHECK(d.clean_test.size() == 30);

    size_t clean_count = 0;
    for (const RephraseSample& s : d.l2_train) clean_count += s.clean;
    CHECK(clean_count == 75);

    std::set<std::string> train_sources;
    for (const RephraseSample& s : d.l2_train) train_sources.insert(s.source);

    auto check_friction = [&](const RephraseSample& s) {
        REQUIRE_FALSE(s.clean);
        std::vector<std::string> toks = split_ws(s.source);
        REQUIRE(s.span_start >= 0);
        REQUIRE(s.span_end >= s.span_start);
        REQUIRE(s.span_end < static_cast<int>(toks.size()));
        std::string detok = toks[static_cast<size_t>(s.span_start)];
        for (int i = s.span_start + 1; i <= s.span_end; ++i) detok += " " + toks[static_cast<size_t>(i)];
        CHECK(detok == s.corrupt_text);
        CHECK(s.corrupt_text != s.target_entity);
        CHECK(cat.find(s.target_entity) != nullptr);
        CHECK(s.source != s.target);
        bool in_slot = false;
        for (const auto& [name, value] : s.hypothesis.slots) in_slot |= value == s.corrupt_text;
        CHECK(in_slot);
    };
    for (const RephraseSample& s : d.l2_train)
        if (!s.clean) check_friction(s);
    for (const RephraseSample& s : d.friction_test) check_friction(s);

    for (const RephraseSample& s : d.clean_test) {
        CHECK(s.clean);
        CHECK(s.source == s.target);
        CHECK(s.target_entity.empty());
        CHECK(s.corrupt_text.empty());
    }

    // the L1 subset is the friction prefix of the L2 set
    size_t li = 0;
    for (const RephraseSample& s : d.l2_train) {
        if (s.clean || li == d.l1_train.size()) continue;
        CHECK(d.l1_train[li] == s);
        ++li;
    }
    CHECK(li == d.l1_train.size());

    for (const RephraseSample& s : d.friction_test) CHECK(train_sources.count(s.source) == 0);
    for (const RephraseSample& s : d.clean_test) CHECK(train_sources.count(s.source) == 0);

    // tag oracle: recount target occurrences and triple adjacency directly
    std::map<std::string, int> counts_by_target;
    for (const RephraseSample& s : d.l2_train)
        if (!s.clean) ++counts_by_target[s.target_entity];
    size_t zero = 0, few = 0, rel = 0;
    for (const RephraseSample& s : d.friction_test) {
        int c = counts_by_target.count(s.target_entity) ? counts_by_target[s.target_entity] : 0;
        CHECK(s.zero_shot == (c == 0));
        CHECK(s.few_shot == (c >= 1 && c <= 10));
        CHECK_FALSE((s.zero_shot && s.few_shot));
        zero += s.zero_shot;
        few += s.few_shot;
        rel += s.kg_relation;
        if (s.kg_relation) {
            bool found = false;
            std::string src = " " + s.source + " ";
            for (const Triple& tr : kg.triples()) {
                for (int ctx : {tr.head, tr.tail}) {
                    int other = ctx == tr.head ? tr.tail : tr.head;
                    if (kg.entity(other).surface != s.target_entity) continue;
                    const std::string& cs = kg.entity(ctx).surface;
                    if (cs != s.target_entity && src.find(" " + cs + " ") != std::string::npos)
                        found = true;
                }
            }
            CHECK(found);
        }
    }
    CHECK(zero > 0);
    CHECK(few > 0);
    CHECK(rel > 0);

    Rng rng2(9);
    GeneratedData d2 = generate(kg, cat, templates, counts, rng2);
    CHECK(d2.l2_train == d.l2_train);
    CHECK(d2.friction_test == d.friction_test);
    CHECK(d2.clean_test == d.clean_test);
}

TEST_CASE("mined negatives exclude the positive and rank above random surfaces") {
    KnowledgeGraph kg = small_kg(7);
    EntityCatalog cat = EntityCatalog::build(kg);
    EntityCatalog bare = strip_kg(cat);
    REQUIRE(bare.size() == cat.size());
    for (const EntityEntry& e : bare.entries()) {
        CHECK(e.descriptions.empty());
        CHECK(e.subgraph.edges.empty());
        CHECK(e.ids == cat.find(e.surface)->ids);
    }

    std::vector<Template> templates = parse_templates(default_templates());
    GenCounts counts;
    counts.l2_train = 60;
    counts.clean_fraction = 0.2;
    counts.l1_train = 20;
    counts.friction_test = 10;
    counts.clean_test = 5;
    Rng rng(3);
    GeneratedData d = generate(kg, cat, templates, counts, rng);

    std::vector<std::string> vocab_texts;
    for (const EntityEntry& e : bare.entries()) vocab_texts.push_back(e.surface);
    for (const RephraseSample& s : d.l2_train) vocab_texts.push_back(s.source);
    Vocab vocab = Vocab::build(vocab_texts);
    nn::ParamStore store(31);
    BiEncoder miner(miner_cfg(), vocab, nullptr, &store, "nokg");
    EntityIndex idx = build_index(miner, bare);

    Rng mine_rng(5);
    MineStats stats = mine_hard_negatives(miner, idx, d.l2_train, 10, 4, mine_rng);
    CHECK(stats.padded == 0);

    double mined_total = 0, all_total = 0;
    size_t mined_n = 0, checked = 0;
    for (const RephraseSample& s : d.l2_train) {
        auto full = top_k(idx, miner, s.source, static_cast<int>(idx.size()));
        if (s.clean) {
            REQUIRE(s.hard_negatives.size() == 1);
            CHECK(s.hard_negatives[0] == full.front().surface);
            continue;
        }
        REQUIRE(s.hard_negatives.size() == 4);
        std::set<std::string> uniq(s.hard_negatives.begin(), s.hard_negatives.end());
        CHECK(uniq.size() == 4);
        CHECK(uniq.count(s.target_entity) == 0);

        // exclusion rule: skip the positive, keep retrieval order
        std::vector<std::string> expect;
        for (const ScoredSurface& h : full) {
            if (h.surface == s.target_entity) continue;
            if (expect.size() == 4) break;
            expect.push_back(h.surface);
        }
        CHECK(s.hard_negatives == expect);

        if (checked++ < 20) {
            std::map<std::string, double> score_of;
            for (const ScoredSurface& h : full) score_of[h.surface] = h.score;
            for (const std::string& n : s.hard_negatives) {
                mined_total += score_of.at(n);
                ++mined_n;
            }
            for (const ScoredSurface& h : full) all_total += h.score / static_cast<double>(full.size());
        }
    }
    CHECK(mined_total / static_cast<double>(mined_n) > all_total / static_cast<double>(checked));

    // conversions
    const RephraseSample* friction = nullptr;
    const RephraseSample* clean = nullptr;
    for (const RephraseSample& s : d.l2_train) {
        if (!friction && !s.clean) friction = &s;
        if (!clean && s.clean) clean = &s;
    }
    REQUIRE(friction);
    REQUIRE(clean);
    TrainSampleL1 l1 = to_l1_sample(*friction);
    CHECK(l1.utterance == friction->source);
    CHECK(l1.positive == friction->target_entity);
    CHECK(l1.hard_negatives == std::vector<std::string>{friction->hard_negatives[0]});
    CHECK_THROWS_AS(to_l1_sample(*clean), Error);

    size_t skipped = 0;
    std::vector<TrainSampleL2> l2 = to_l2_samples(d.l2_train, 4, &skipped);
    CHECK(skipped == 0);
    CHECK(l2.size() == d.l2_train.size());
    for (size_t i = 0; i < l2.size(); ++i) {
        const RephraseSample& s = d.l2_train[i];
        CHECK(l2[i].utterance == s.source);
        CHECK(l2[i].has_span == !s.clean);
        if (s.clean) {
            CHECK(l2[i].positive == s.hard_negatives[0]);
            CHECK(l2[i].hard_negatives.empty());
        } else {
            CHECK(l2[i].positive == s.target_entity);
            CHECK(l2[i].span_start == s.span_start);
            CHECK(l2[i].span_end == s.span_end);
            CHECK(l2[i].hard_negatives == s.hard_negatives);
        }
    }
    RephraseSample unmined = *clean;
    unmined.hard_negatives.clear();
    std::vector<TrainSampleL2> one = to_l2_samples({unmined}, 4, &skipped);
    CHECK(one.empty());
    CHECK(skipped == 1);

    // a tiny catalog cannot fill four negatives: padding kicks in, no dups
    KnowledgeGraph tiny = make(
        "1\talpha beta\ta\n2\tgamma delta\tb\n3\tepsilon zeta\tc\n4\teta theta\td\n",
        "1\tperformer\t2\n3\tperformer\t4\n");
    EntityCatalog tiny_cat = EntityCatalog::build(tiny);
    BiEncoder tiny_miner(miner_cfg(), vocab, nullptr, &store, "tiny");
    EntityIndex tiny_idx = build_index(tiny_miner, tiny_cat);
    std::vector<RephraseSample> ms(1);
    ms[0].source = "play alpha beta now";
    ms[0].target_entity = "alpha beta";
    Rng pad_rng(1);
    MineStats pad_stats = mine_hard_negatives(tiny_miner, tiny_idx, ms, 10, 4, pad_rng);
    CHECK(pad_stats.padded == 1);
    CHECK(ms[0].hard_negatives.size() == 3);  // only three other surfaces exist
    std::set<std::string> uniq(ms[0].hard_negatives.begin(), ms[0].hard_negatives.end());
    CHECK(uniq.size() == 3);
    CHECK(uniq.count("alpha beta") == 0);
}

TEST_CASE("sample files round-trip through the TSV format") {
    KnowledgeGraph kg = small_kg();
    EntityCatalog cat = EntityCatalog::build(kg);
    GenCounts counts;
    counts.l2_train = 40;
    counts.clean_fraction = 0.25;
    counts.l1_train = 10;
    counts.friction_test = 20;
    counts.clean_test = 5;
    Rng rng(2);
    GeneratedData d = generate(kg, cat, parse_templates(default_templates()), counts, rng);
    Rng mine_rng(8);
    // negatives make the hard_negatives column non-trivial
    std::vector<std::string> texts;
    for (const EntityEntry& e : cat.entries()) texts.push_back(e.surface);
    Vocab vocab = Vocab::build(texts);
    nn::ParamStore store(17);
    BiEncoder miner(miner_cfg(), vocab, nullptr, &store, "m");
    EntityIndex idx = build_index(miner, strip_kg(cat));
    mine_hard_negatives(miner, idx, d.friction_test, 10, 4, mine_rng);

    std::string tsv = samples_tsv(d.friction_test);
    std::vector<RephraseSample> back = parse_samples(tsv);
    CHECK(back == d.friction_test);
    CHECK(samples_tsv(back) == tsv);

    CHECK(parse_samples(samples_tsv({})).empty());
    CHECK_THROWS_AS(parse_samples(""), Error);
    CHECK_THROWS_AS(parse_samples("bogus header\nrow"), Error);
    std::string good = samples_tsv(d.friction_test);
    CHECK_THROWS_AS(parse_samples(good + "short\trow\n"), Error);
    std::string header_only = samples_tsv({});
    CHECK_THROWS_AS(
        parse_samples(header_only +
                      "2\ta\tb\t0\t0\t\t\t0\t0\t0\tMusic | X\t\n"),  // flag must be 0/1
        Error);
}
