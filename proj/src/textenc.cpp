#include "kgqr/textenc.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <cmath>
#include <set>

namespace kgqr {

std::string build_entity_text(const std::string& surface,
                              const std::vector<std::string>& descriptions) {
    std::string out = surface;
    for (const auto& d : descriptions) {
        out += " [des] ";
        out += d;
    }
    return out;
}

std::vector<std::string> tokenize(const std::string& text) { return split_ws(to_lower(text)); }

// ---------------------------------------------------------------------------
// Vocab

Vocab Vocab::build(const std::vector<std::string>& texts, int trigram_buckets) {
    Vocab v;
    v.trigram_buckets_ = trigram_buckets;
    std::set<std::string> seen;
    for (const auto& text : texts)
        for (const auto& w : tokenize(text))
            if (w != "[des]") seen.insert(w);
    v.words_.assign(seen.begin(), seen.end());
    for (size_t i = 0; i < v.words_.size(); ++i)
        v.ids_[v.words_[i]] = kFirstWord + static_cast<int>(i);
    return v;
}

void Vocab::save(const std::filesystem::path& p,
                 const std::map<std::string, std::string>& meta) const {
    std::string out;
    for (const auto& [k, v] : meta) {
        if (k.find_first_of(":\n") != std::string::npos || v.find('\n') != std::string::npos)
            throw Error("vocab meta: ':' or newline in '" + k + "'");
        out += "#" + k + ": " + v + "\n";
    }
    out += "<pad>\n<s>\n<sep>\n[des]\n";
    for (const auto& w : words_) {
        out += w;
        out += '\n';
    }
    write_file_atomic(p, out);
}

Vocab Vocab::load(const std::filesystem::path& p, int trigram_buckets,
                  std::map<std::string, std::string>* meta) {
    auto lines = read_lines(p);
    size_t first = 0;
    while (first < lines.size() && !lines[first].empty() && lines[first][0] == '#') {
        size_t colon = lines[first].find(": ");
        if (colon == std::string::npos) throw Error("bad vocab meta line: " + lines[first]);
        if (meta) (*meta)[lines[first].substr(1, colon - 1)] = lines[first].substr(colon + 2);
        ++first;
    }
    if (lines.size() < first + 4 || lines[first] != "<pad>" || lines[first + 1] != "<s>" ||
        lines[first + 2] != "<sep>" || lines[first + 3] != "[des]")
        throw Error("bad vocab file: " + p.string());
    Vocab v;
    v.trigram_buckets_ = trigram_buckets;
    v.words_.assign(lines.begin() + static_cast<long>(first) + 4, lines.end());
    for (size_t i = 0; i < v.words_.size(); ++i)
        v.ids_[v.words_[i]] = kFirstWord + static_cast<int>(i);
    return v;
}

int Vocab::word_id(const std::string& word) const {
    if (word == "[des]") return kDes;
    auto it = ids_.find(word);
    return it == ids_.end() ? -1 : it->second;
}

std::vector<int> Vocab::trigram_rows(const std::string& word) const {
    std::string s = "^" + word + "$";
    std::vector<int> rows;
    for (size_t i = 0; i + 3 <= s.size(); ++i)
        rows.push_back(static_cast<int>(fnv1a(std::string_view(s).substr(i, 3)) %
                                        static_cast<uint64_t>(trigram_buckets_)));
    return rows;
}

// ---------------------------------------------------------------------------
// TextEncoder

namespace {

nn::Mat sinusoidal_positions(int max_len, int hidden) {
    nn::Mat pe(max_len, hidden);
    for (int p = 0; p < max_len; ++p)
        for (int i = 0; i < hidden; ++i) {
            double rate = std::pow(10000.0, -2.0 * (i / 2) / hidden);
            pe(p, i) = (i % 2 == 0) ? std::sin(p * rate) : std::cos(p * rate);
        }
    return pe;
}

}  // namespace

TextEncoder::TextEncoder(const EncoderConfig& cfg, const Vocab& vocab, nn::ParamStore* store,
                         std::string prefix)
    : cfg_(cfg), vocab_(&vocab), store_(store), prefix_(std::move(prefix)) {
    if (cfg_.hidden % cfg_.heads != 0) throw Error("encoder hidden not divisible by heads");
    pos_ = sinusoidal_positions(cfg_.max_len, cfg_.hidden);
    int h = cfg_.hidden;
    store_->ensure(prefix_ + ".tok_emb", vocab.table_size(), h);
    store_->ensure(prefix_ + ".tri_emb", vocab.trigram_buckets(), h);
    for (int l = 0; l < cfg_.layers; ++l) {
        std::string lp = fmt::format("{}.l{}", prefix_, l);
        store_->ensure(lp + ".ln1.g", 1, h, nn::Init::One);
        store_->ensure(lp + ".ln1.b", 1, h, nn::Init::Zero);
        store_->ensure(lp + ".wq", h, h);
        store_->ensure(lp + ".wk", h, h);
        store_->ensure(lp + ".wv", h, h);
        store_->ensure(lp + ".wo", h, h);
        store_->ensure(lp + ".ln2.g", 1, h, nn::Init::One);
        store_->ensure(lp + ".ln2.b", 1, h, nn::Init::Zero);
        store_->ensure(lp + ".ff1.w", h, cfg_.ffn);
        store_->ensure(lp + ".ff1.b", 1, cfg_.ffn, nn::Init::Zero);
        store_->ensure(lp + ".ff2.w", cfg_.ffn, h);
        store_->ensure(lp + ".ff2.b", 1, h, nn::Init::Zero);
    }
    store_->ensure(prefix_ + ".lnf.g", 1, h, nn::Init::One);
    store_->ensure(prefix_ + ".lnf.b", 1, h, nn::Init::Zero);
}

TextEncoder::Slot TextEncoder::slot_for(const std::string& word) const {
    Slot s;
    s.table_row = vocab_->word_id(word);
    if (s.table_row < 0) s.oov = word;
    return s;
}

int TextEncoder::embed(nn::Tape& t, const std::vector<Slot>& slots) const {
    nn::Param& tok = store_->at(prefix_ + ".tok_emb");
    nn::Param& tri = store_->at(prefix_ + ".tri_emb");
    std::vector<int> iv_rows;
    std::vector<int> perm(slots.size(), -1);
    for (size_t i = 0; i < slots.size(); ++i) {
        if (slots[i].table_row >= 0) {
            perm[i] = static_cast<int>(iv_rows.size());
            iv_rows.push_back(slots[i].table_row);
        }
    }
    std::vector<int> parts;
    if (!iv_rows.empty()) parts.push_back(t.gather_param(tok, iv_rows));
    int at = static_cast<int>(iv_rows.size());
    for (size_t i = 0; i < slots.size(); ++i) {
        if (slots[i].table_row < 0) {
            parts.push_back(t.mean_rows(t.gather_param(tri, vocab_->trigram_rows(slots[i].oov))));
            perm[i] = at++;
        }
    }
    int stacked = parts.size() == 1 ? parts[0] : t.stack_rows(parts);
    bool identity = true;
    for (size_t i = 0; i < perm.size(); ++i)
        if (perm[i] != static_cast<int>(i)) identity = false;
    int emb = identity ? stacked : t.gather_rows(stacked, perm);
    int n = static_cast<int>(slots.size());
    return t.add(emb, t.constant(pos_.topRows(n)));
}

int TextEncoder::run_layers(nn::Tape& t, int x) const {
    int h = cfg_.hidden;
    int dh = h / cfg_.heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int l = 0; l < cfg_.layers; ++l) {
        std::string lp = fmt::format("{}.l{}", prefix_, l);
        int ln1 = t.layer_norm(x, t.param(store_->at(lp + ".ln1.g")),
                               t.param(store_->at(lp + ".ln1.b")));
        int q = t.matmul(ln1, t.param(store_->at(lp + ".wq")));
        int k = t.matmul(ln1, t.param(store_->at(lp + ".wk")));
        int v = t.matmul(ln1, t.param(store_->at(lp + ".wv")));
        int cat = -1;
        for (int hd = 0; hd < cfg_.heads; ++hd) {
            int qs = t.slice_cols(q, hd * dh, dh);
            int ks = t.slice_cols(k, hd * dh, dh);
            int vs = t.slice_cols(v, hd * dh, dh);
            int att = t.row_softmax(t.affine(t.matmul_nt(qs, ks), scale, 0.0));
            int ctx = t.matmul(att, vs);
            cat = hd == 0 ? ctx : t.concat_cols(cat, ctx);
        }
        x = t.add(x, t.matmul(cat, t.param(store_->at(lp + ".wo"))));
        int ln2 = t.layer_norm(x, t.param(store_->at(lp + ".ln2.g")),
                               t.param(store_->at(lp + ".ln2.b")));
        int f1 = t.leaky_relu(
            t.add_rowvec(t.matmul(ln2, t.param(store_->at(lp + ".ff1.w"))),
                         t.param(store_->at(lp + ".ff1.b"))),
            0.0);
        int f2 = t.add_rowvec(t.matmul(f1, t.param(store_->at(lp + ".ff2.w"))),
                              t.param(store_->at(lp + ".ff2.b")));
        x = t.add(x, f2);
    }
    return t.layer_norm(x, t.param(store_->at(prefix_ + ".lnf.g")),
                        t.param(store_->at(prefix_ + ".lnf.b")));
}

Encoded TextEncoder::encode(nn::Tape& t, const std::string& text) const {
    Encoded enc;
    auto toks = tokenize(text);
    if (static_cast<int>(toks.size()) > cfg_.max_len - 1) {
        toks.resize(static_cast<size_t>(cfg_.max_len - 1));
        enc.truncated = true;
    }
    std::vector<Slot> slots;
    slots.push_back(Slot{Vocab::kSentinel, {}});
    for (const auto& w : toks) slots.push_back(slot_for(w));
    enc.seq = run_layers(t, embed(t, slots));
    enc.rows = static_cast<int>(slots.size());
    enc.utt_tokens = static_cast<int>(toks.size());
    enc.tokens = std::move(toks);
    return enc;
}

Encoded TextEncoder::encode_pair(nn::Tape& t, const std::string& utterance,
                                 const std::string& entity_text) const {
    Encoded enc;
    auto utt = tokenize(utterance);
    auto ent = tokenize(entity_text);
    if (static_cast<int>(utt.size()) > cfg_.max_len - 2) {
        utt.resize(static_cast<size_t>(cfg_.max_len - 2));
        enc.truncated = true;
    }
    int room = cfg_.max_len - 2 - static_cast<int>(utt.size());
    if (static_cast<int>(ent.size()) > room) {
        ent.resize(static_cast<size_t>(room));
        enc.truncated = true;
    }
    std::vector<Slot> slots;
    slots.push_back(Slot{Vocab::kSentinel, {}});
    for (const auto& w : utt) slots.push_back(slot_for(w));
    slots.push_back(Slot{Vocab::kSep, {}});
    for (const auto& w : ent) slots.push_back(slot_for(w));
    enc.seq = run_layers(t, embed(t, slots));
    enc.rows = static_cast<int>(slots.size());
    enc.utt_tokens = static_cast<int>(utt.size());
    enc.tokens = std::move(utt);
    return enc;
}

}  // namespace kgqr
