#include "kgqr/runconfig.hpp"

#include <fmt/format.h>

#include <fstream>
#include <json.hpp>

#include "kgqr/common.hpp"

namespace kgqr {

using nlohmann::json;

namespace {

json to_j(const RunConfig& c) {
    json j;
    j["paths"] = {{"store", c.paths.store},
                  {"checkpoints", c.paths.checkpoints},
                  {"index", c.paths.index},
                  {"data", c.paths.data}};
    j["model"] = {{"text_layers", c.model.text_layers}, {"text_heads", c.model.text_heads},
                  {"text_hidden", c.model.text_hidden}, {"text_ffn", c.model.text_ffn},
                  {"max_len", c.model.max_len},         {"gat_layers", c.model.gat_layers},
                  {"gat_heads", c.model.gat_heads},     {"gat_hidden", c.model.gat_hidden},
                  {"rank_hidden", c.model.rank_hidden}, {"max_span_len", c.model.max_span_len},
                  {"use_gat", c.model.use_gat},         {"tie_towers", c.model.tie_towers},
                  {"word_vocab", c.model.word_vocab},   {"trigram_buckets", c.model.trigram_buckets}};
    j["l1"] = {{"lr", c.l1.lr}, {"batch", c.l1.batch}, {"epochs", c.l1.epochs}};
    j["l2"] = {{"lr", c.l2.lr},
               {"batch", c.l2.batch},
               {"epochs", c.l2.epochs},
               {"lambda_rank", c.l2.lambda_rank},
               {"lambda_span", c.l2.lambda_span}};
    j["pretrain"] = {{"dim", c.pretrain.dim},       {"epochs", c.pretrain.epochs},
                     {"margin", c.pretrain.margin}, {"lr", c.pretrain.lr},
                     {"batch", c.pretrain.batch},   {"negatives", c.pretrain.negatives}};
    j["data"] = {{"songs", c.data.songs},
                 {"artists", c.data.artists},
                 {"albums", c.data.albums},
                 {"films", c.data.films},
                 {"cities", c.data.cities},
                 {"polysemy_rate", c.data.polysemy_rate},
                 {"l2_train", c.data.l2_train},
                 {"clean_fraction", c.data.clean_fraction},
                 {"l1_train", c.data.l1_train},
                 {"friction_test", c.data.friction_test},
                 {"clean_test", c.data.clean_test}};
    j["mining"] = {{"k", c.mining.k}, {"count", c.mining.count}};
    j["k"] = c.k;
    j["theta"] = c.theta;
    j["thetas"] = c.thetas;
    j["clean_tr_cap"] = c.clean_tr_cap;
    j["seed"] = c.seed;
    return j;
}

RunConfig from_j(const json& j) {
    RunConfig c;
    const json& p = j.at("paths");
    c.paths.store = p.at("store").get<std::string>();
    c.paths.checkpoints = p.at("checkpoints").get<std::string>();
    c.paths.index = p.at("index").get<std::string>();
    c.paths.data = p.at("data").get<std::string>();
    const json& m = j.at("model");
    c.model.text_layers = m.at("text_layers").get<int>();
    c.model.text_heads = m.at("text_heads").get<int>();
    c.model.text_hidden = m.at("text_hidden").get<int>();
    c.model.text_ffn = m.at("text_ffn").get<int>();
    c.model.max_len = m.at("max_len").get<int>();
    c.model.gat_layers = m.at("gat_layers").get<int>();
    c.model.gat_heads = m.at("gat_heads").get<int>();
    c.model.gat_hidden = m.at("gat_hidden").get<int>();
    c.model.rank_hidden = m.at("rank_hidden").get<int>();
    c.model.max_span_len = m.at("max_span_len").get<int>();
    c.model.use_gat = m.at("use_gat").get<bool>();
    c.model.tie_towers = m.at("tie_towers").get<bool>();
    c.model.word_vocab = m.at("word_vocab").get<bool>();
    c.model.trigram_buckets = m.at("trigram_buckets").get<int>();
    const json& l1 = j.at("l1");
    c.l1.lr = l1.at("lr").get<double>();
    c.l1.batch = l1.at("batch").get<int>();
    c.l1.epochs = l1.at("epochs").get<int>();
    const json& l2 = j.at("l2");
    c.l2.lr = l2.at("lr").get<double>();
    c.l2.batch = l2.at("batch").get<int>();
    c.l2.epochs = l2.at("epochs").get<int>();
    c.l2.lambda_rank = l2.at("lambda_rank").get<double>();
    c.l2.lambda_span = l2.at("lambda_span").get<double>();
    const json& pt = j.at("pretrain");
    c.pretrain.dim = pt.at("dim").get<int>();
    c.pretrain.epochs = pt.at("epochs").get<int>();
    c.pretrain.margin = pt.at("margin").get<double>();
    c.pretrain.lr = pt.at("lr").get<double>();
    c.pretrain.batch = pt.at("batch").get<int>();
    c.pretrain.negatives = pt.at("negatives").get<int>();
    const json& d = j.at("data");
    c.data.songs = d.at("songs").get<int>();
    c.data.artists = d.at("artists").get<int>();
    c.data.albums = d.at("albums").get<int>();
    c.data.films = d.at("films").get<int>();
    c.data.cities = d.at("cities").get<int>();
    c.data.polysemy_rate = d.at("polysemy_rate").get<double>();
    c.data.l2_train = d.at("l2_train").get<int>();
    c.data.clean_fraction = d.at("clean_fraction").get<double>();
    c.data.l1_train = d.at("l1_train").get<int>();
    c.data.friction_test = d.at("friction_test").get<int>();
    c.data.clean_test = d.at("clean_test").get<int>();
    const json& mn = j.at("mining");
    c.mining.k = mn.at("k").get<int>();
    c.mining.count = mn.at("count").get<int>();
    c.k = j.at("k").get<int>();
    c.theta = j.at("theta").get<double>();
    c.thetas = j.at("thetas").get<std::vector<double>>();
    c.clean_tr_cap = j.at("clean_tr_cap").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

// Every patch key must exist in the schema with a compatible type.
void check_patch(const json& patch, const json& schema, const std::string& prefix) {
    if (!patch.is_object())
        throw Error(fmt::format("config: expected an object at '{}'",
                                prefix.empty() ? "<root>" : prefix));
    for (const auto& [key, value] : patch.items()) {
        std::string path = prefix + key;
        if (!schema.contains(key)) throw Error(fmt::format("config: unknown key '{}'", path));
        const json& want = schema.at(key);
        if (want.is_object()) {
            check_patch(value, want, path + ".");
        } else if (want.is_boolean()) {
            if (!value.is_boolean())
                throw Error(fmt::format("config: '{}' must be a boolean", path));
        } else if (want.is_string()) {
            if (!value.is_string()) throw Error(fmt::format("config: '{}' must be a string", path));
        } else if (want.is_array()) {
            if (!value.is_array()) throw Error(fmt::format("config: '{}' must be an array", path));
            for (const json& e : value)
                if (!e.is_number())
                    throw Error(fmt::format("config: '{}' must hold numbers", path));
        } else if (want.is_number_integer()) {  // covers the unsigned seed too
            if (!value.is_number_integer())
                throw Error(fmt::format("config: '{}' must be an integer", path));
            if (want.is_number_unsigned() && value.get<int64_t>() < 0)
                throw Error(fmt::format("config: '{}' must be non-negative", path));
        } else {  // float
            if (!value.is_number()) throw Error(fmt::format("config: '{}' must be a number", path));
        }
    }
}

void validate(const RunConfig& c) {
    auto positive = [](int v, const char* name) {
        if (v < 1) throw Error(fmt::format("config: '{}' must be >= 1", name));
    };
    positive(c.model.text_layers, "model.text_layers");
    positive(c.model.text_heads, "model.text_heads");
    positive(c.model.text_hidden, "model.text_hidden");
    positive(c.model.max_len, "model.max_len");
    positive(c.model.gat_layers, "model.gat_layers");
    positive(c.model.gat_heads, "model.gat_heads");
    positive(c.model.gat_hidden, "model.gat_hidden");
    positive(c.model.rank_hidden, "model.rank_hidden");
    positive(c.model.max_span_len, "model.max_span_len");
    positive(c.model.trigram_buckets, "model.trigram_buckets");
    positive(c.l1.batch, "l1.batch");
    positive(c.l2.batch, "l2.batch");
    positive(c.pretrain.dim, "pretrain.dim");
    positive(c.pretrain.batch, "pretrain.batch");
    positive(c.k, "k");
    positive(c.mining.k, "mining.k");
    positive(c.mining.count, "mining.count");
    if (c.thetas.empty()) throw Error("config: 'thetas' must not be empty");
    if (c.clean_tr_cap < 0.0 || c.clean_tr_cap > 1.0)
        throw Error("config: 'clean_tr_cap' must lie in [0, 1]");
    if (c.data.clean_fraction < 0.0 || c.data.clean_fraction > 1.0)
        throw Error("config: 'data.clean_fraction' must lie in [0, 1]");
}

RunConfig apply_patch(const json& patch) {
    json base = to_j(RunConfig{});
    check_patch(patch, base, "");
    base.merge_patch(patch);
    RunConfig c = from_j(base);
    validate(c);
    return c;
}

}  // namespace

std::string RunConfig::to_json(int indent) const { return to_j(*this).dump(indent) + "\n"; }

std::string RunConfig::hash() const { return hash_hex(fnv1a(to_j(*this).dump())); }

RunConfig RunConfig::parse(const std::string& json_text) {
    json patch;
    try {
        patch = json::parse(json_text);
    } catch (const json::exception& e) {
        throw Error(fmt::format("config: {}", e.what()));
    }
    return apply_patch(patch);
}

RunConfig RunConfig::from_file(const std::filesystem::path& p) {
    try {
        return parse(read_file(p));
    } catch (const Error& e) {
        throw Error(fmt::format("{}: {}", p.string(), e.what()));
    }
}

void RunConfig::set(const std::string& dotted_key, const std::string& value) {
    if (dotted_key.empty()) throw Error("config: empty override key");
    json leaf;
    try {
        leaf = json::parse(value);
        if (leaf.is_object() || leaf.is_null())
            leaf = value;  // objects/null make no sense as scalars
    } catch (const json::exception&) {
        leaf = value;  // unquoted strings, e.g. paths
    }
    json patch = leaf;
    std::vector<std::string> parts = split_char(dotted_key, '.');
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
        if (it->empty()) throw Error(fmt::format("config: bad override key '{}'", dotted_key));
        patch = json{{*it, std::move(patch)}};
    }
    json merged = to_j(*this);
    check_patch(patch, merged, "");
    merged.merge_patch(patch);
    RunConfig next = from_j(merged);
    validate(next);
    *this = next;
}

namespace {

constexpr std::string_view kEnvelopeMagic = "kgqr-artifact v1\n";

void check_header_token(const std::string& s, const char* what) {
    if (s.empty() || s.find_first_of(":\n") != std::string::npos)
        throw Error(fmt::format("artifact: bad {} '{}'", what, s));
}

}  // namespace

bool is_artifact_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error("cannot read " + p.string());
    std::string head(kEnvelopeMagic.size(), '\0');
    in.read(head.data(), static_cast<std::streamsize>(head.size()));
    return in.gcount() == static_cast<std::streamsize>(head.size()) && head == kEnvelopeMagic;
}

void write_artifact_file(const std::filesystem::path& p, const Artifact& a) {
    check_header_token(a.kind, "kind");
    check_header_token(a.config, "config hash");
    std::string out{kEnvelopeMagic};
    out += "kind: " + a.kind + "\n";
    out += "config: " + a.config + "\n";
    for (const auto& [k, v] : a.extra) {
        check_header_token(k, "header key");
        if (v.find('\n') != std::string::npos)
            throw Error(fmt::format("artifact: newline in header value for '{}'", k));
        out += k + ": " + v + "\n";
    }
    out += "\n";
    out += a.payload;
    write_file_atomic(p, out);
}

Artifact read_artifact_file(const std::filesystem::path& p, const std::string& expect_kind) {
    std::string buf = read_file(p);
    if (buf.substr(0, kEnvelopeMagic.size()) != kEnvelopeMagic)
        throw Error(fmt::format("artifact: {} is not an artifact file", p.string()));
    size_t blank = buf.find("\n\n", kEnvelopeMagic.size() - 1);
    if (blank == std::string::npos)
        throw Error(fmt::format("artifact: {} has no header terminator", p.string()));
    Artifact a;
    size_t pos = kEnvelopeMagic.size();
    while (pos <= blank) {
        size_t eol = buf.find('\n', pos);
        std::string line = buf.substr(pos, eol - pos);
        pos = eol + 1;
        if (line.empty()) break;
        size_t colon = line.find(": ");
        if (colon == std::string::npos)
            throw Error(fmt::format("artifact: bad header line '{}' in {}", line, p.string()));
        std::string key = line.substr(0, colon), value = line.substr(colon + 2);
        if (key == "kind")
            a.kind = value;
        else if (key == "config")
            a.config = value;
        else
            a.extra[key] = value;
    }
    a.payload = buf.substr(blank + 2);
    if (a.kind.empty() || a.config.empty())
        throw Error(fmt::format("artifact: {} lacks kind or config", p.string()));
    if (!expect_kind.empty() && a.kind != expect_kind)
        throw Error(fmt::format("artifact: {} holds '{}', expected '{}'", p.string(), a.kind,
                                expect_kind));
    return a;
}

std::string read_payload(const std::filesystem::path& p, const std::string& expect_kind) {
    if (is_artifact_file(p)) return read_artifact_file(p, expect_kind).payload;
    return read_file(p);
}

std::string RunManifest::to_json() const {
    json j;
    j["subcommand"] = subcommand;
    j["config_hash"] = config_hash;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["timestamps"] = {{"created", created}, {"wall_ms", wall_ms}};
    return j.dump(2) + "\n";
}

RunManifest RunManifest::parse(const std::string& text) {
    try {
        json j = json::parse(text);
        RunManifest m;
        m.subcommand = j.at("subcommand").get<std::string>();
        m.config_hash = j.at("config_hash").get<std::string>();
        m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
        m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
        m.created = j.at("timestamps").at("created").get<std::string>();
        m.wall_ms = j.at("timestamps").at("wall_ms").get<int64_t>();
        return m;
    } catch (const json::exception& e) {
        throw Error(fmt::format("manifest: {}", e.what()));
    }
}

void write_manifest(const std::filesystem::path& artifact_path, const RunManifest& m) {
    write_file_atomic(artifact_path.string() + ".manifest.json", m.to_json());
}

}  // namespace kgqr
