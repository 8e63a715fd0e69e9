#pragma once
// Run configuration and artifact plumbing for the CLI. One JSON config file
// drives every stage; overrides arrive as dotted `key=value` pairs. Artifacts
// are either native binary formats that carry the producing config hash in
// their own headers, or text payloads wrapped in a small envelope that does.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace kgqr {

struct RunConfig {
    struct Paths {
        std::string store = "artifacts/store";
        std::string checkpoints = "artifacts/checkpoints";
        std::string index = "artifacts/index";
        std::string data = "artifacts/data";
    } paths;

    // GAT shape defaults follow the reference setup (4 layers, 8 heads,
    // hidden 400); the text encoder stands in for a production model that is
    // not public, so its dims are ours. Desk-scale runs override via file.
    struct Model {
        int text_layers = 2;
        int text_heads = 4;
        int text_hidden = 64;
        int text_ffn = 128;
        int max_len = 32;
        int gat_layers = 4;
        int gat_heads = 8;
        int gat_hidden = 400;
        int rank_hidden = 64;
        int max_span_len = 6;
        bool use_gat = true;
        // From-scratch substitutes for pretrained-encoder behavior: shared
        // retrieval towers, and an all-trigram vocabulary so unseen
        // corruptions land in trained feature space. word_vocab=true instead
        // builds word ids from catalog text and corruption-masked sources.
        bool tie_towers = true;
        bool word_vocab = false;
        int trigram_buckets = 2048;
    } model;

    struct L1 {
        double lr = 8e-4;
        int batch = 64;
        int epochs = 10;
    } l1;

    struct L2 {
        double lr = 5e-4;
        int batch = 32;
        int epochs = 4;
        double lambda_rank = 1.0;
        double lambda_span = 1.0;
    } l2;

    struct Pretrain {
        int dim = 32;
        int epochs = 20;
        double margin = 1.0;
        double lr = 0.01;
        int batch = 128;
        int negatives = 4;
    } pretrain;

    struct Data {
        int songs = 2600;
        int artists = 900;
        int albums = 600;
        int films = 400;
        int cities = 500;
        double polysemy_rate = 0.03;
        int l2_train = 20000;
        double clean_fraction = 0.25;
        int l1_train = 4000;
        int friction_test = 2000;
        int clean_test = 500;
    } data;

    struct Mining {
        int k = 10;
        int count = 4;
    } mining;

    int k = 10;          // retrieval depth fed to the re-ranker
    double theta = 5.0;  // operating threshold until sweep-theta picks one
    std::vector<double> thetas = {3, 4, 5, 6, 7};
    double clean_tr_cap = 0.02;
    uint64_t seed = 0;

    // Canonical form: sorted keys, so equal configs hash equally.
    std::string to_json(int indent = 2) const;
    std::string hash() const;

    // Unknown keys and type mismatches are rejected with the dotted path.
    static RunConfig parse(const std::string& json_text);
    static RunConfig from_file(const std::filesystem::path& p);
    void set(const std::string& dotted_key, const std::string& value);
};

// Text artifact envelope: a few `key: value` header lines, a blank line,
// then the payload verbatim. `kind` and `config` are mandatory.
struct Artifact {
    std::string kind;
    std::string config;
    std::map<std::string, std::string> extra;  // e.g. parent artifact hashes
    std::string payload;
};

bool is_artifact_file(const std::filesystem::path& p);
void write_artifact_file(const std::filesystem::path& p, const Artifact& a);
Artifact read_artifact_file(const std::filesystem::path& p, const std::string& expect_kind);
// Payload of an enveloped file, or the raw bytes of a plain one.
std::string read_payload(const std::filesystem::path& p, const std::string& expect_kind);

// One manifest JSON per artifact (`<artifact>.manifest.json`). Everything
// that varies between identical re-runs lives under `timestamps`.
struct RunManifest {
    std::string subcommand;
    std::string config_hash;
    std::map<std::string, std::string> inputs;   // path -> content hash
    std::map<std::string, std::string> outputs;  // path -> content hash
    std::string created;
    int64_t wall_ms = 0;

    std::string to_json() const;
    static RunManifest parse(const std::string& text);
};

void write_manifest(const std::filesystem::path& artifact_path, const RunManifest& m);

}  // namespace kgqr
