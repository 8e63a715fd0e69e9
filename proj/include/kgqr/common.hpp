#pragma once
// Shared plumbing: errors, deterministic RNG, hashing, string and file helpers.

#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace kgqr {

// Data/usage failure surfaced to the CLI as a nonzero exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Deterministic RNG. Wraps mt19937_64 but owns the uniform/normal mapping so
// sequences do not depend on libstdc++'s distribution internals.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), gen_(seed) {}

    uint64_t seed() const { return seed_; }
    uint64_t next() { return gen_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    int64_t below(int64_t n) { return n <= 0 ? 0 : static_cast<int64_t>(next() % static_cast<uint64_t>(n)); }

    bool coin(double p) { return uniform() < p; }

    double normal();

    // Derive an independent stream; stable across runs for a fixed salt.
    Rng fork(uint64_t salt) const;

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(static_cast<int64_t>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

    template <typename T>
    const T& choice(const std::vector<T>& v) {
        if (v.empty()) throw Error("Rng::choice on empty vector");
        return v[static_cast<size_t>(below(static_cast<int64_t>(v.size())))];
    }

private:
    uint64_t seed_;
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// FNV-1a, used for artifact/config fingerprints (not security).
uint64_t fnv1a_bytes(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull);
uint64_t fnv1a(std::string_view s);
uint64_t fnv1a(std::string_view s, uint64_t h);
std::string hash_hex(uint64_t h);
uint64_t hash_file(const std::filesystem::path& p);

// String helpers (ASCII-oriented; utterances and surfaces are lowercase ASCII).
std::string to_lower(std::string_view s);
std::vector<std::string> split_ws(std::string_view s);
std::vector<std::string> split_char(std::string_view s, char sep);
std::string join(const std::vector<std::string>& words, std::string_view sep);
std::string trim(std::string_view s);
bool contains_digit(std::string_view s);
bool contains_punct(std::string_view s);
bool contains_non_ascii(std::string_view s);

// Levenshtein distance over bytes.
int edit_distance(std::string_view a, std::string_view b);

// File helpers. Writes go through a temp file + rename so readers never see
// partial artifacts.
std::string read_file(const std::filesystem::path& p);
void write_file_atomic(const std::filesystem::path& p, std::string_view bytes);
std::vector<std::string> read_lines(const std::filesystem::path& p);

// "2026-08-15T12:00:00Z"; informational metadata only, never hashed.
std::string iso_utc_now();

}  // namespace kgqr
