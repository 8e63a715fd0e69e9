#pragma once
// Whitespace tokenizer with a word vocabulary plus hashed character-trigram
// fallback, and a small pre-LN self-attention encoder producing per-token
// hidden vectors and a pooled sentinel vector.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "kgqr/nncore.hpp"

namespace kgqr {

// `surface [des] d1 [des] d2 ...`; empty description list gives the surface.
std::string build_entity_text(const std::string& surface,
                              const std::vector<std::string>& descriptions);

// Lowercased whitespace word tokens.
std::vector<std::string> tokenize(const std::string& text);

class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kSentinel = 1;
    static constexpr int kSep = 2;
    static constexpr int kDes = 3;
    static constexpr int kFirstWord = 4;
    static constexpr int kDefaultTrigramBuckets = 256;

    static Vocab build(const std::vector<std::string>& texts,
                       int trigram_buckets = kDefaultTrigramBuckets);

    // Optional `#key: value` meta lines precede the word list.
    void save(const std::filesystem::path& p,
              const std::map<std::string, std::string>& meta = {}) const;
    static Vocab load(const std::filesystem::path& p,
                      int trigram_buckets = kDefaultTrigramBuckets,
                      std::map<std::string, std::string>* meta = nullptr);

    // -1 when out of vocabulary.
    int word_id(const std::string& word) const;
    // Hashed trigram rows (relative to the trigram table) for an OOV word.
    std::vector<int> trigram_rows(const std::string& word) const;

    int word_count() const { return static_cast<int>(words_.size()); }
    int trigram_buckets() const { return trigram_buckets_; }
    // Embedding-table rows: specials + words.
    int table_size() const { return kFirstWord + word_count(); }
    const std::vector<std::string>& words() const { return words_; }

private:
    std::vector<std::string> words_;  // sorted
    std::map<std::string, int> ids_;  // word -> table row
    int trigram_buckets_ = kDefaultTrigramBuckets;
};

struct EncoderConfig {
    int layers = 2;
    int heads = 4;
    int hidden = 64;
    int ffn = 128;
    int max_len = 48;
};

// Per-call encoding result; node ids live on the caller's tape.
struct Encoded {
    int seq = -1;                // (rows x hidden); row 0 is the sentinel
    int rows = 0;                // sequence length including specials
    int utt_tokens = 0;          // utterance tokens kept (encode_pair / encode)
    bool truncated = false;
    std::vector<std::string> tokens;  // kept utterance tokens, in order
};

class TextEncoder {
public:
    // Creates (or binds, when the store was loaded) all parameters under
    // `prefix`. The store must outlive the encoder.
    TextEncoder(const EncoderConfig& cfg, const Vocab& vocab, nn::ParamStore* store,
                std::string prefix);

    Encoded encode(nn::Tape& t, const std::string& text) const;
    Encoded encode_pair(nn::Tape& t, const std::string& utterance,
                        const std::string& entity_text) const;

    // 1 x hidden sentinel vector.
    int pooled(nn::Tape& t, const Encoded& e) const { return t.gather_rows(e.seq, {0}); }

    const EncoderConfig& config() const { return cfg_; }

    // Utterance token k sits at sequence row k + 1.
    static int utt_row(int k) { return k + 1; }

private:
    struct Slot {
        int table_row = -1;  // >= 0 for specials and in-vocab words
        std::string oov;     // set when table_row < 0
    };
    int embed(nn::Tape& t, const std::vector<Slot>& slots) const;
    int run_layers(nn::Tape& t, int x) const;
    Slot slot_for(const std::string& word) const;

    EncoderConfig cfg_;
    const Vocab* vocab_;
    nn::ParamStore* store_;
    std::string prefix_;
    nn::Mat pos_;  // sinusoidal, max_len x hidden
};

}  // namespace kgqr
