// Single entry point for the whole chain:
//   gen-kg -> ingest -> pretrain-kg -> gen-data -> train-l1 --miner ->
//   build-index --miner -> mine-negatives -> train-l1 -> build-index ->
//   train-l2 -> evaluate / sweep-theta / rewrite
// One JSON config drives every stage; artifacts land under config paths and
// each write leaves a manifest recording config hash, input hashes, and wall
// time. Exit codes: 0 ok, 1 usage or config problem, 2 data or artifact
// problem.

#include <CLI11.hpp>
#include <fmt/format.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <sstream>

#include "kgqr/evalharness.hpp"
#include "kgqr/kgpretrain.hpp"
#include "kgqr/runconfig.hpp"

namespace fs = std::filesystem;
using namespace kgqr;

namespace {

enum class Variant { Full, NoGat, NoKg, Miner };

const char* suffix(Variant v) {
    switch (v) {
        case Variant::Full: return "";
        case Variant::NoGat: return "_no_gat";
        case Variant::NoKg: return "_no_kg";
        case Variant::Miner: return "_miner";
    }
    return "";
}

Variant variant_from(const std::string& name) {
    if (name == "full") return Variant::Full;
    if (name == "no-gat") return Variant::NoGat;
    if (name == "no-kg") return Variant::NoKg;
    throw Error(fmt::format("unknown variant '{}' (full | no-gat | no-kg)", name));
}

struct Ctx {
    RunConfig cfg;
    std::string hash;

    fs::path store_entities, store_triples;
    fs::path raw_entities, raw_triples;
    fs::path embeddings;
    fs::path l2_train, l1_train, friction_test, clean_test;
    fs::path l2_mined, l1_mined;

    fs::path l1_ckpt(Variant v) const {
        return fs::path(cfg.paths.checkpoints) / fmt::format("l1{}.ckpt", suffix(v));
    }
    fs::path l1_vocab(Variant v) const {
        return fs::path(cfg.paths.checkpoints) / fmt::format("l1{}.vocab", suffix(v));
    }
    fs::path l2_ckpt(Variant v) const {
        return fs::path(cfg.paths.checkpoints) / fmt::format("l2{}.ckpt", suffix(v));
    }
    fs::path l2_vocab(Variant v) const {
        return fs::path(cfg.paths.checkpoints) / fmt::format("l2{}.vocab", suffix(v));
    }
    fs::path index_path(Variant v) const {
        return fs::path(cfg.paths.index) / fmt::format("index{}.bin", suffix(v));
    }
};

Ctx make_ctx(RunConfig cfg) {
    Ctx c;
    c.hash = cfg.hash();
    fs::path store(cfg.paths.store), data(cfg.paths.data);
    c.store_entities = store / "entities.tsv";
    c.store_triples = store / "triples.tsv";
    c.raw_entities = data / "raw_entities.tsv";
    c.raw_triples = data / "raw_triples.tsv";
    c.embeddings = fs::path(cfg.paths.checkpoints) / "kg_embeddings.bin";
    c.l2_train = data / "l2_train.tsv";
    c.l1_train = data / "l1_train.tsv";
    c.friction_test = data / "friction_test.tsv";
    c.clean_test = data / "clean_test.tsv";
    c.l2_mined = data / "l2_train_mined.tsv";
    c.l1_mined = data / "l1_train_mined.tsv";
    c.cfg = std::move(cfg);
    return c;
}

// Input/output bookkeeping for one stage; finish() stamps a manifest next to
// every output artifact.
struct StageRun {
    StageRun(std::string sub, std::string cfg_hash)
        : sub_(std::move(sub)), hash_(std::move(cfg_hash)) {}

    void input(const fs::path& p) { inputs_[p.generic_string()] = hash_hex(hash_file(p)); }
    void output(const fs::path& p) { outputs_[p.generic_string()] = hash_hex(hash_file(p)); }

    void finish() {
        RunManifest m;
        m.subcommand = sub_;
        m.config_hash = hash_;
        m.inputs = inputs_;
        m.outputs = outputs_;
        m.created = iso_utc_now();
        m.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                        std::chrono::steady_clock::now() - t0_)
                        .count();
        for (const auto& [path, ignored] : outputs_) write_manifest(path, m);
        fmt::print("[kgqr] {} done in {} ms\n", sub_, m.wall_ms);
    }

private:
    std::string sub_, hash_;
    std::map<std::string, std::string> inputs_, outputs_;
    std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

fs::path require(const fs::path& p, const std::string& producer) {
    if (!fs::exists(p))
        throw Error(fmt::format("missing {}: run {} first", p.generic_string(), producer));
    return p;
}

void ensure_parent(const fs::path& p) {
    if (!p.parent_path().empty()) fs::create_directories(p.parent_path());
}

KnowledgeGraph load_store(const Ctx& ctx, StageRun& run) {
    require(ctx.store_entities, "ingest");
    require(ctx.store_triples, "ingest");
    run.input(ctx.store_entities);
    run.input(ctx.store_triples);
    std::istringstream e(read_payload(ctx.store_entities, "entities-tsv"));
    std::istringstream t(read_payload(ctx.store_triples, "triples-tsv"));
    return KnowledgeGraph::ingest(e, t);
}

std::vector<RephraseSample> load_samples(const fs::path& p, const std::string& producer,
                                         StageRun& run) {
    require(p, producer);
    run.input(p);
    return parse_samples(read_payload(p, "samples"));
}

void write_samples(const Ctx& ctx, StageRun& run, const fs::path& p,
                   const std::vector<RephraseSample>& samples,
                   std::map<std::string, std::string> extra = {}) {
    ensure_parent(p);
    extra["rows"] = fmt::format("{}", samples.size());
    write_artifact_file(p, {"samples", ctx.hash, std::move(extra), samples_tsv(samples)});
    run.output(p);
}

EntityCatalog catalog_for(const KnowledgeGraph& kg, Variant v) {
    EntityCatalog cat = EntityCatalog::build(kg);
    if (v == Variant::NoKg || v == Variant::Miner) return strip_kg(cat);
    return cat;
}

bool wants_gat(const Ctx& ctx, Variant v) { return v == Variant::Full && ctx.cfg.model.use_gat; }

BiEncoderConfig l1_config(const Ctx& ctx, Variant v) {
    const auto& m = ctx.cfg.model;
    BiEncoderConfig b;
    b.text = {m.text_layers, m.text_heads, m.text_hidden, m.text_ffn, m.max_len};
    b.gat.layers = m.gat_layers;
    b.gat.heads = m.gat_heads;
    b.gat.hidden = m.gat_hidden;
    b.d_sim = m.text_hidden;  // the utterance tower is unprojected
    b.use_gat = wants_gat(ctx, v);
    b.tie_towers = m.tie_towers;
    return b;
}

CrossEncoderConfig l2_config(const Ctx& ctx, Variant v) {
    const auto& m = ctx.cfg.model;
    CrossEncoderConfig c;
    c.text = {m.text_layers, m.text_heads, m.text_hidden, m.text_ffn, m.max_len};
    c.gat.layers = m.gat_layers;
    c.gat.heads = m.gat_heads;
    c.gat.hidden = m.gat_hidden;
    c.rank_hidden = m.rank_hidden;
    c.max_span_len = m.max_span_len;
    c.use_gat = wants_gat(ctx, v);
    return c;
}

// Corrupt spans are masked out of the word vocabulary: ASR errors are unseen
// at deployment, so they must hit the trigram fallback during training too or
// the model never learns to read it.
std::vector<std::string> vocab_texts(const EntityCatalog& cat,
                                     const std::vector<RephraseSample>& samples) {
    std::vector<std::string> t;
    t.reserve(cat.size() + samples.size());
    for (const EntityEntry& e : cat.entries())
        t.push_back(build_entity_text(e.surface, e.descriptions));
    for (const RephraseSample& s : samples) {
        if (s.clean) {
            t.push_back(s.source);
            continue;
        }
        std::vector<std::string> kept;
        std::vector<std::string> toks = split_ws(s.source);
        for (int i = 0; i < static_cast<int>(toks.size()); ++i)
            if (i < s.span_start || i > s.span_end) kept.push_back(toks[i]);
        if (!kept.empty()) t.push_back(join(kept, " "));
    }
    return t;
}

Vocab build_vocab(const Ctx& ctx, const EntityCatalog& cat,
                  const std::vector<RephraseSample>& samples) {
    if (ctx.cfg.model.word_vocab)
        return Vocab::build(vocab_texts(cat, samples), ctx.cfg.model.trigram_buckets);
    return Vocab::build({}, ctx.cfg.model.trigram_buckets);
}

std::unique_ptr<EmbeddingTable> load_embeddings(const Ctx& ctx, StageRun& run) {
    require(ctx.embeddings, "pretrain-kg");
    run.input(ctx.embeddings);
    return std::make_unique<EmbeddingTable>(EmbeddingTable::load(ctx.embeddings));
}

// A reconstructed encoder stack; the unique_ptrs pin the addresses the
// models hold on to.
struct L1Parts {
    std::unique_ptr<Vocab> vocab;
    std::unique_ptr<EmbeddingTable> emb;
    std::unique_ptr<nn::ParamStore> store;
    std::unique_ptr<BiEncoder> model;
};

L1Parts load_l1(const Ctx& ctx, StageRun& run, Variant v) {
    L1Parts p;
    fs::path ck = ctx.l1_ckpt(v), vo = ctx.l1_vocab(v);
    std::string producer = v == Variant::Miner ? "train-l1 --miner" : "train-l1";
    require(ck, producer);
    require(vo, producer);
    run.input(ck);
    run.input(vo);
    p.vocab = std::make_unique<Vocab>(Vocab::load(vo, ctx.cfg.model.trigram_buckets));
    if (wants_gat(ctx, v)) p.emb = load_embeddings(ctx, run);
    p.store = std::make_unique<nn::ParamStore>(nn::ParamStore::load(ck));
    p.model = std::make_unique<BiEncoder>(l1_config(ctx, v), *p.vocab, p.emb.get(),
                                          p.store.get(), "l1");
    return p;
}

struct L2Parts {
    std::unique_ptr<Vocab> vocab;
    std::unique_ptr<EmbeddingTable> emb;
    std::unique_ptr<nn::ParamStore> store;
    std::unique_ptr<CrossEncoder> model;
};

L2Parts load_l2(const Ctx& ctx, StageRun& run, Variant v) {
    L2Parts p;
    fs::path ck = ctx.l2_ckpt(v), vo = ctx.l2_vocab(v);
    require(ck, "train-l2");
    require(vo, "train-l2");
    run.input(ck);
    run.input(vo);
    p.vocab = std::make_unique<Vocab>(Vocab::load(vo, ctx.cfg.model.trigram_buckets));
    if (wants_gat(ctx, v)) p.emb = load_embeddings(ctx, run);
    p.store = std::make_unique<nn::ParamStore>(nn::ParamStore::load(ck));
    p.model = std::make_unique<CrossEncoder>(l2_config(ctx, v), *p.vocab, p.emb.get(),
                                             p.store.get(), "l2");
    return p;
}

EntityIndex load_index(const Ctx& ctx, StageRun& run, Variant v,
                       const nn::ParamStore& l1_store) {
    fs::path ip = ctx.index_path(v);
    require(ip, v == Variant::Miner ? "build-index --miner" : "build-index");
    run.input(ip);
    EntityIndex idx = EntityIndex::load(ip);
    if (idx.meta().checkpoint_hash != l1_store.content_hash())
        throw Error(fmt::format(
            "{} was built from a different checkpoint than {}: run build-index first",
            ip.generic_string(), ctx.l1_ckpt(v).generic_string()));
    return idx;
}

// ---------------------------------------------------------------- stages

int cmd_gen_kg(Ctx& ctx) {
    StageRun run("gen-kg", ctx.hash);
    SynthKgConfig kc;
    kc.songs = ctx.cfg.data.songs;
    kc.artists = ctx.cfg.data.artists;
    kc.albums = ctx.cfg.data.albums;
    kc.films = ctx.cfg.data.films;
    kc.cities = ctx.cfg.data.cities;
    kc.polysemy_rate = ctx.cfg.data.polysemy_rate;
    kc.seed = ctx.cfg.seed;
    SynthKg kg = synth_kg(kc);
    ensure_parent(ctx.raw_entities);
    write_artifact_file(ctx.raw_entities, {"entities-tsv", ctx.hash, {}, kg.entities_tsv});
    write_artifact_file(ctx.raw_triples, {"triples-tsv", ctx.hash, {}, kg.triples_tsv});
    run.output(ctx.raw_entities);
    run.output(ctx.raw_triples);
    run.finish();
    return 0;
}

int cmd_ingest(Ctx& ctx, const std::string& entities_arg, const std::string& triples_arg) {
    StageRun run("ingest", ctx.hash);
    fs::path ein = entities_arg.empty() ? ctx.raw_entities : fs::path(entities_arg);
    fs::path tin = triples_arg.empty() ? ctx.raw_triples : fs::path(triples_arg);
    require(ein, "gen-kg (or pass --entities)");
    require(tin, "gen-kg (or pass --triples)");
    run.input(ein);
    run.input(tin);
    std::istringstream e(read_payload(ein, "entities-tsv"));
    std::istringstream t(read_payload(tin, "triples-tsv"));
    KnowledgeGraph kg = KnowledgeGraph::ingest(e, t);

    fs::path tmpd = fs::path(ctx.cfg.paths.store) / ".ingest-tmp";
    fs::create_directories(tmpd);
    kg.save(tmpd);
    std::string ce = read_file(tmpd / "entities.tsv");
    std::string ct = read_file(tmpd / "triples.tsv");
    fs::remove_all(tmpd);
    write_artifact_file(ctx.store_entities, {"entities-tsv", ctx.hash, {}, ce});
    write_artifact_file(ctx.store_triples, {"triples-tsv", ctx.hash, {}, ct});
    run.output(ctx.store_entities);
    run.output(ctx.store_triples);
    fmt::print("[kgqr] ingested {} entities, {} triples\n", kg.entity_count(),
               kg.triples().size());
    run.finish();
    return 0;
}

int cmd_pretrain_kg(Ctx& ctx) {
    StageRun run("pretrain-kg", ctx.hash);
    KnowledgeGraph kg = load_store(ctx, run);
    PretrainConfig pc;
    pc.dim = ctx.cfg.pretrain.dim;
    pc.epochs = ctx.cfg.pretrain.epochs;
    pc.margin = ctx.cfg.pretrain.margin;
    pc.lr = ctx.cfg.pretrain.lr;
    pc.batch = ctx.cfg.pretrain.batch;
    pc.negatives = ctx.cfg.pretrain.negatives;
    pc.seed = ctx.cfg.seed;
    PretrainResult res = pretrain(kg, pc);
    ensure_parent(ctx.embeddings);
    res.table.save(ctx.embeddings, {{"config", ctx.hash}, {"kind", "kg-embeddings"}});
    run.output(ctx.embeddings);
    fmt::print("[kgqr] pretrain loss {:.4f} -> {:.4f} over {} epochs\n", res.epoch_loss.front(),
               res.epoch_loss.back(), res.epoch_loss.size());
    run.finish();
    return 0;
}

int cmd_gen_data(Ctx& ctx, const std::string& templates_arg) {
    StageRun run("gen-data", ctx.hash);
    KnowledgeGraph kg = load_store(ctx, run);
    EntityCatalog cat = EntityCatalog::build(kg);
    std::vector<Template> templates;
    if (templates_arg.empty()) {
        templates = parse_templates(default_templates());
    } else {
        require(templates_arg, "nothing (a templates file was named but does not exist)");
        run.input(templates_arg);
        templates = parse_templates(read_payload(templates_arg, "templates-tsv"));
    }
    GenCounts counts;
    counts.l2_train = ctx.cfg.data.l2_train;
    counts.clean_fraction = ctx.cfg.data.clean_fraction;
    counts.l1_train = ctx.cfg.data.l1_train;
    counts.friction_test = ctx.cfg.data.friction_test;
    counts.clean_test = ctx.cfg.data.clean_test;
    Rng rng(ctx.cfg.seed);
    GeneratedData d = generate(kg, cat, templates, counts, rng);
    for (const std::string& w : d.warnings) fmt::print(stderr, "[kgqr] warning: {}\n", w);
    write_samples(ctx, run, ctx.l2_train, d.l2_train);
    write_samples(ctx, run, ctx.l1_train, d.l1_train);
    write_samples(ctx, run, ctx.friction_test, d.friction_test);
    write_samples(ctx, run, ctx.clean_test, d.clean_test);
    fmt::print("[kgqr] generated {} l2 / {} l1 train, {} friction / {} clean test\n",
               d.l2_train.size(), d.l1_train.size(), d.friction_test.size(),
               d.clean_test.size());
    run.finish();
    return 0;
}

int cmd_train_l1(Ctx& ctx, Variant v) {
    StageRun run(v == Variant::Miner ? "train-l1 --miner" : "train-l1", ctx.hash);
    KnowledgeGraph kg = load_store(ctx, run);
    EntityCatalog cat = catalog_for(kg, v);

    // the miner bootstraps negatives, so it trains on the unmined file
    std::vector<RephraseSample> samples =
        v == Variant::Miner ? load_samples(ctx.l1_train, "gen-data", run)
                            : load_samples(ctx.l1_mined, "mine-negatives", run);
    std::vector<TrainSampleL1> train;
    train.reserve(samples.size());
    for (const RephraseSample& s : samples)
        if (!s.clean) train.push_back(to_l1_sample(s));

    L1Parts p;
    p.vocab = std::make_unique<Vocab>(build_vocab(ctx, cat, samples));
    if (wants_gat(ctx, v)) p.emb = load_embeddings(ctx, run);
    p.store = std::make_unique<nn::ParamStore>(ctx.cfg.seed);
    p.model = std::make_unique<BiEncoder>(l1_config(ctx, v), *p.vocab, p.emb.get(),
                                          p.store.get(), "l1");
    TrainL1Config tc;
    tc.lr = ctx.cfg.l1.lr;
    tc.batch = ctx.cfg.l1.batch;
    tc.epochs = ctx.cfg.l1.epochs;
    tc.seed = ctx.cfg.seed;
    TrainL1Stats st = train_l1(*p.model, cat, train, tc);

    ensure_parent(ctx.l1_ckpt(v));
    p.store->save(ctx.l1_ckpt(v), {{"config", ctx.hash}, {"kind", "l1-checkpoint"}});
    p.vocab->save(ctx.l1_vocab(v), {{"config", ctx.hash}, {"kind", "l1-vocab"}});
    run.output(ctx.l1_ckpt(v));
    run.output(ctx.l1_vocab(v));
    fmt::print("[kgqr] l1 loss {:.4f} -> {:.4f}; {} samples, {} dropped\n",
               st.epoch_loss.empty() ? 0.0 : st.epoch_loss.front(),
               st.epoch_loss.empty() ? 0.0 : st.epoch_loss.back(), train.size(),
               st.dropped_samples);
    run.finish();
    return 0;
}

int cmd_build_index(Ctx& ctx, Variant v) {
    StageRun run(v == Variant::Miner ? "build-index --miner" : "build-index", ctx.hash);
    KnowledgeGraph kg = load_store(ctx, run);
    EntityCatalog cat = catalog_for(kg, v);
    L1Parts p = load_l1(ctx, run, v);
    EntityIndex built = build_index(*p.model, cat);
    EntityIndex::Meta meta = built.meta();
    meta.config = ctx.hash;
    meta.built_at.clear();  // timestamps belong to the manifest
    EntityIndex out(built.rows(), meta);
    ensure_parent(ctx.index_path(v));
    out.save(ctx.index_path(v));
    run.output(ctx.index_path(v));
    fmt::print("[kgqr] indexed {} surfaces at d={}\n", out.size(), out.meta().d_sim);
    run.finish();
    return 0;
}

int cmd_mine_negatives(Ctx& ctx) {
    StageRun run("mine-negatives", ctx.hash);
    std::vector<RephraseSample> l2 = load_samples(ctx.l2_train, "gen-data", run);
    std::vector<RephraseSample> l1 = load_samples(ctx.l1_train, "gen-data", run);
    L1Parts p = load_l1(ctx, run, Variant::Miner);
    EntityIndex idx = load_index(ctx, run, Variant::Miner, *p.store);

    Rng rng(ctx.cfg.seed);
    MineStats stats =
        mine_hard_negatives(*p.model, idx, l2, ctx.cfg.mining.k, ctx.cfg.mining.count, rng);

    // the l1 subset is the friction prefix of the l2 order; re-derive it so
    // the mined copies stay identical row-for-row
    std::vector<RephraseSample> l1_mined;
    for (const RephraseSample& s : l2) {
        if (s.clean || l1_mined.size() == l1.size()) continue;
        l1_mined.push_back(s);
    }
    if (l1_mined.size() != l1.size())
        throw Error("mine-negatives: l1_train.tsv is not the friction prefix of l2_train.tsv");

    write_samples(ctx, run, ctx.l2_mined, l2, {{"padded", fmt::format("{}", stats.padded)}});
    write_samples(ctx, run, ctx.l1_mined, l1_mined);
    fmt::print("[kgqr] mined negatives for {} samples ({} padded)\n", l2.size(), stats.padded);
    run.finish();
    return 0;
}

int cmd_train_l2(Ctx& ctx, Variant v) {
    StageRun run("train-l2", ctx.hash);
    KnowledgeGraph kg = load_store(ctx, run);
    EntityCatalog cat = catalog_for(kg, v);
    std::vector<RephraseSample> samples = load_samples(ctx.l2_mined, "mine-negatives", run);
    size_t skipped = 0;
    std::vector<TrainSampleL2> train = to_l2_samples(samples, ctx.cfg.mining.count, &skipped);
    if (skipped) fmt::print(stderr, "[kgqr] warning: {} unmined clean samples skipped\n", skipped);

    L2Parts p;
    p.vocab = std::make_unique<Vocab>(build_vocab(ctx, cat, samples));
    if (wants_gat(ctx, v)) p.emb = load_embeddings(ctx, run);
    p.store = std::make_unique<nn::ParamStore>(ctx.cfg.seed + 1);
    p.model = std::make_unique<CrossEncoder>(l2_config(ctx, v), *p.vocab, p.emb.get(),
                                             p.store.get(), "l2");
    TrainL2Config tc;
    tc.lr = ctx.cfg.l2.lr;
    tc.batch = ctx.cfg.l2.batch;
    tc.epochs = ctx.cfg.l2.epochs;
    tc.lambda_rank = ctx.cfg.l2.lambda_rank;
    tc.lambda_span = ctx.cfg.l2.lambda_span;
    tc.seed = ctx.cfg.seed;
    TrainL2Stats st = train_l2(*p.model, cat, train, tc);

    ensure_parent(ctx.l2_ckpt(v));
    p.store->save(ctx.l2_ckpt(v), {{"config", ctx.hash}, {"kind", "l2-checkpoint"}});
    p.vocab->save(ctx.l2_vocab(v), {{"config", ctx.hash}, {"kind", "l2-vocab"}});
    run.output(ctx.l2_ckpt(v));
    run.output(ctx.l2_vocab(v));
    fmt::print("[kgqr] l2 loss {:.4f} -> {:.4f}; {} samples, {} dropped\n",
               st.epoch_loss.empty() ? 0.0 : st.epoch_loss.front(),
               st.epoch_loss.empty() ? 0.0 : st.epoch_loss.back(), train.size(),
               st.dropped_samples);
    run.finish();
    return 0;
}

struct EvalSetup {
    KnowledgeGraph kg;
    EntityCatalog cat;
    L1Parts l1;
    L2Parts l2;
    std::unique_ptr<EntityIndex> idx;
};

EvalSetup load_eval(Ctx& ctx, StageRun& run, Variant v) {
    EvalSetup s{load_store(ctx, run), {}, load_l1(ctx, run, v), load_l2(ctx, run, v), nullptr};
    s.cat = catalog_for(s.kg, v);
    s.idx = std::make_unique<EntityIndex>(load_index(ctx, run, v, *s.l1.store));
    return s;
}

int cmd_evaluate(Ctx& ctx, Variant v, bool always_trigger, double theta_flag, bool has_theta) {
    StageRun run("evaluate", ctx.hash);
    EvalSetup s = load_eval(ctx, run, v);
    std::vector<RephraseSample> friction = load_samples(ctx.friction_test, "gen-data", run);
    std::vector<RephraseSample> clean = load_samples(ctx.clean_test, "gen-data", run);

    double theta = has_theta ? theta_flag : ctx.cfg.theta;
    if (always_trigger) theta = -std::numeric_limits<double>::infinity();

    std::vector<ProcessedQuery> fq =
        process_all(*s.l1.model, *s.idx, *s.l2.model, s.cat, friction, ctx.cfg.k);
    std::vector<ProcessedQuery> cq =
        process_all(*s.l1.model, *s.idx, *s.l2.model, s.cat, clean, ctx.cfg.k);

    std::vector<MetricsReport> reports =
        subset_report(materialize_all(fq, theta, friction), friction, always_trigger);
    reports.push_back(
        evaluate(materialize_all(cq, theta, clean), clean, "clean", always_trigger));

    fmt::print("{}", format_table(reports));
    fs::path out = fs::path(ctx.cfg.paths.data) /
                   fmt::format("eval{}{}.txt", suffix(v), always_trigger ? "_always" : "");
    ensure_parent(out);
    write_artifact_file(out, {"eval-records", ctx.hash,
                              {{"theta", fmt::format("{:g}", theta)},
                               {"variant", suffix(v)[0] ? suffix(v) + 1 : "full"}},
                              format_records(reports)});
    run.output(out);
    run.finish();
    return 0;
}

int cmd_sweep_theta(Ctx& ctx, Variant v) {
    StageRun run("sweep-theta", ctx.hash);
    EvalSetup s = load_eval(ctx, run, v);
    std::vector<RephraseSample> friction = load_samples(ctx.friction_test, "gen-data", run);
    std::vector<RephraseSample> clean = load_samples(ctx.clean_test, "gen-data", run);

    std::vector<ProcessedQuery> fq =
        process_all(*s.l1.model, *s.idx, *s.l2.model, s.cat, friction, ctx.cfg.k);
    std::vector<ProcessedQuery> cq =
        process_all(*s.l1.model, *s.idx, *s.l2.model, s.cat, clean, ctx.cfg.k);
    ThetaChoice choice =
        sweep_theta(fq, friction, cq, clean, ctx.cfg.thetas, ctx.cfg.clean_tr_cap);

    std::vector<MetricsReport> all = choice.friction_reports;
    all.insert(all.end(), choice.clean_reports.begin(), choice.clean_reports.end());
    fmt::print("{}", format_table(all));
    fmt::print("[kgqr] chosen theta = {:g}{}\n", choice.theta,
               choice.feasible ? "" : " (constraint-infeasible: no theta met the clean cap)");

    std::string records = format_records(all);
    records += fmt::format("chosen_theta={:g} feasible={}\n", choice.theta,
                           choice.feasible ? 1 : 0);
    fs::path out = fs::path(ctx.cfg.paths.data) / fmt::format("sweep{}.txt", suffix(v));
    ensure_parent(out);
    write_artifact_file(out, {"sweep-records", ctx.hash,
                              {{"chosen_theta", fmt::format("{:g}", choice.theta)},
                               {"feasible", choice.feasible ? "1" : "0"}},
                              records});
    run.output(out);
    run.finish();
    return choice.feasible ? 0 : 2;
}

int cmd_rewrite(Ctx& ctx, Variant v, const std::string& utterance, const std::string& hyp_line,
                double theta_flag, bool has_theta) {
    StageRun run("rewrite", ctx.hash);
    EvalSetup s = load_eval(ctx, run, v);
    double theta = has_theta ? theta_flag : ctx.cfg.theta;

    NluHypothesis hyp;
    const NluHypothesis* hp = nullptr;
    if (!hyp_line.empty()) {
        hyp = NluHypothesis::parse(hyp_line);
        hp = &hyp;
    }
    RewriteResult r =
        rewrite(*s.l1.model, *s.idx, *s.l2.model, s.cat, utterance, ctx.cfg.k, theta, hp);
    if (r.triggered) {
        fmt::print("triggered=1 span={}..{} entity={}\n", r.span.start, r.span.end, r.entity);
        fmt::print("utterance: {}\n", *r.rewritten_utterance);
        if (r.rewritten_hypothesis)
            fmt::print("hypothesis: {}\n", r.rewritten_hypothesis->serialize());
    } else {
        fmt::print("triggered=0\n");
        fmt::print("utterance: {}\n", utterance);
        if (hp) fmt::print("hypothesis: {}\n", hyp_line);
    }
    if (!r.trace.diagnostic.empty()) fmt::print("note: {}\n", r.trace.diagnostic);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"knowledge-graph enhanced entity correction for spoken queries"};
    app.require_subcommand(1);

    std::string config_path, entities_arg, triples_arg, templates_arg, variant_arg = "full";
    std::string utterance, hyp_line;
    std::vector<std::string> sets;
    uint64_t seed_arg = 0;
    double theta_arg = 0.0;
    bool miner = false, always_trigger = false;

    std::vector<CLI::Option*> seed_opts;
    CLI::Option* theta_opt = nullptr;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON config file");
        sub->add_option("--set", sets, "dotted override, e.g. --set l1.lr=0.002");
        seed_opts.push_back(sub->add_option("--seed", seed_arg, "override the run seed"));
        return sub;
    };

    CLI::App* c_gen_kg = common(app.add_subcommand("gen-kg", "write a synthetic KG"));
    CLI::App* c_ingest = common(app.add_subcommand("ingest", "canonicalize entity/triple TSVs"));
    c_ingest->add_option("--entities", entities_arg, "entity TSV (default: gen-kg output)");
    c_ingest->add_option("--triples", triples_arg, "triple TSV (default: gen-kg output)");
    CLI::App* c_pretrain = common(app.add_subcommand("pretrain-kg", "train KG embeddings"));
    CLI::App* c_gen_data = common(app.add_subcommand("gen-data", "generate training corpora"));
    c_gen_data->add_option("--templates", templates_arg, "utterance template TSV");

    CLI::App* c_train_l1 = common(app.add_subcommand("train-l1", "train the retrieval encoder"));
    c_train_l1->add_flag("--miner", miner, "bootstrap variant used for negative mining");
    c_train_l1->add_option("--variant", variant_arg, "full | no-gat | no-kg");
    CLI::App* c_build_index = common(app.add_subcommand("build-index", "encode the catalog"));
    c_build_index->add_flag("--miner", miner, "index for the mining encoder");
    c_build_index->add_option("--variant", variant_arg, "full | no-gat | no-kg");
    CLI::App* c_mine = common(app.add_subcommand("mine-negatives", "attach hard negatives"));
    CLI::App* c_train_l2 = common(app.add_subcommand("train-l2", "train the re-ranker"));
    c_train_l2->add_option("--variant", variant_arg, "full | no-gat | no-kg");

    CLI::App* c_eval = common(app.add_subcommand("evaluate", "score the test sets"));
    c_eval->add_option("--variant", variant_arg, "full | no-gat | no-kg");
    c_eval->add_flag("--always-trigger", always_trigger, "ignore the null threshold");
    theta_opt = c_eval->add_option("--theta", theta_arg, "null threshold (default: config)");
    CLI::Option* eval_theta = theta_opt;
    CLI::App* c_sweep = common(app.add_subcommand("sweep-theta", "pick the operating point"));
    c_sweep->add_option("--variant", variant_arg, "full | no-gat | no-kg");
    CLI::App* c_rewrite = common(app.add_subcommand("rewrite", "rewrite one utterance"));
    c_rewrite->add_option("--variant", variant_arg, "full | no-gat | no-kg");
    c_rewrite->add_option("utterance", utterance, "query text")->required();
    c_rewrite->add_option("--hypothesis", hyp_line, "pipe-separated NLU hypothesis");
    theta_opt = c_rewrite->add_option("--theta", theta_arg, "null threshold (default: config)");
    CLI::Option* rewrite_theta = theta_opt;

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    Ctx ctx;
    try {
        RunConfig cfg;
        if (!config_path.empty()) cfg = RunConfig::from_file(config_path);
        for (const std::string& kv : sets) {
            size_t eq = kv.find('=');
            if (eq == std::string::npos || eq == 0)
                throw Error(fmt::format("--set expects key=value, got '{}'", kv));
            cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
        }
        for (const CLI::Option* o : seed_opts)
            if (o->count()) cfg.set("seed", fmt::format("{}", seed_arg));
        ctx = make_ctx(std::move(cfg));
    } catch (const std::exception& e) {
        fmt::print(stderr, "kgqr: {}\n", e.what());
        return 1;
    }

    CLI::App* sub = app.get_subcommands().front();
    fmt::print("[kgqr] {} config_hash={}\n{}", sub->get_name(), ctx.hash, ctx.cfg.to_json());

    try {
        Variant v = miner ? Variant::Miner : variant_from(variant_arg);
        if (sub == c_gen_kg) return cmd_gen_kg(ctx);
        if (sub == c_ingest) return cmd_ingest(ctx, entities_arg, triples_arg);
        if (sub == c_pretrain) return cmd_pretrain_kg(ctx);
        if (sub == c_gen_data) return cmd_gen_data(ctx, templates_arg);
        if (sub == c_train_l1) return cmd_train_l1(ctx, v);
        if (sub == c_build_index) return cmd_build_index(ctx, v);
        if (sub == c_mine) return cmd_mine_negatives(ctx);
        if (sub == c_train_l2) return cmd_train_l2(ctx, v);
        if (sub == c_eval)
            return cmd_evaluate(ctx, v, always_trigger, theta_arg, eval_theta->count() > 0);
        if (sub == c_sweep) return cmd_sweep_theta(ctx, v);
        if (sub == c_rewrite)
            return cmd_rewrite(ctx, v, utterance, hyp_line, theta_arg,
                               rewrite_theta->count() > 0);
        fmt::print(stderr, "kgqr: unhandled subcommand\n");
        return 1;
    } catch (const std::exception& e) {
        fmt::print(stderr, "kgqr: {}\n", e.what());
        return 2;
    }
}
