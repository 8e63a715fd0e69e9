#include "kgqr/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <sstream>

namespace kgqr {

// ---------------------------------------------------------------------------
// Synthetic knowledge graph

namespace {

const char* kOnsets[] = {"b",  "c",  "d",  "f",  "g",  "h",  "j",  "k",  "l",  "m",  "n",
                         "p",  "r",  "s",  "t",  "v",  "w",  "z",  "br", "ch", "cl", "cr",
                         "dr", "fl", "gr", "pl", "pr", "sh", "sl", "st", "tr", "th"};
const char* kVowels[] = {"a",  "e",  "i",  "o",  "u",  "ar", "el", "en",
                         "in", "io", "on", "or", "ou", "ay", "ee", "ia"};
const char* kCitySuffixes[] = {"city", "springs", "falls", "port", "creek", "bay", "heights",
                               "junction"};

std::string pseudo_word(Rng& rng) {
    int syllables = 2 + static_cast<int>(rng.below(2));
    std::string w;
    for (int i = 0; i < syllables; ++i) {
        w += kOnsets[rng.below(static_cast<int64_t>(std::size(kOnsets)))];
        w += kVowels[rng.below(static_cast<int64_t>(std::size(kVowels)))];
    }
    return w;
}

enum class Kind { Song, Artist, Album, Film, City };

std::string fresh_surface(Kind kind, Rng& rng, std::set<std::string>& taken) {
    for (;;) {
        std::string s;
        switch (kind) {
            case Kind::Song: {
                int64_t r = rng.below(10);
                int words = r < 3 ? 1 : r < 8 ? 2 : 3;
                for (int i = 0; i < words; ++i) s += (i ? " " : "") + pseudo_word(rng);
                break;
            }
            case Kind::Artist:
                if (rng.coin(0.3)) s = "the " + pseudo_word(rng);
                else if (rng.coin(0.5)) s = pseudo_word(rng) + " " + pseudo_word(rng);
                else s = pseudo_word(rng);
                break;
            case Kind::Album:
            case Kind::Film:
                s = pseudo_word(rng);
                if (rng.coin(0.4)) s += " " + pseudo_word(rng);
                break;
            case Kind::City:
                s = pseudo_word(rng) + " " +
                    kCitySuffixes[rng.below(static_cast<int64_t>(std::size(kCitySuffixes)))];
                break;
        }
        if (taken.insert(s).second) return s;
    }
}

const std::vector<std::string>& kind_descs(Kind kind) {
    static const std::vector<std::string> song = {"song", "single", "hit single", "track"};
    static const std::vector<std::string> artist = {"american singer", "band", "rapper",
                                                    "singer songwriter"};
    static const std::vector<std::string> album = {"album", "studio album"};
    static const std::vector<std::string> film = {"film", "movie", "drama film"};
    static const std::vector<std::string> city = {"city", "capital city", "coastal city",
                                                  "mountain town"};
    switch (kind) {
        case Kind::Song: return song;
        case Kind::Artist: return artist;
        case Kind::Album: return album;
        case Kind::Film: return film;
        case Kind::City: return city;
    }
    throw Error("unreachable");
}

}  // namespace

SynthKg synth_kg(const SynthKgConfig& cfg) {
    Rng rng(cfg.seed);
    std::set<std::string> taken = {"bad romance", "lady gaga", "carson city", "corbin city"};

    std::string ents =
        "10\tbad romance\tsong\n"
        "11\tbad romance\t2011 film\n"
        "12\tlady gaga\tamerican singer\n"
        "13\tcarson city\tcapital of nevada\n"
        "14\tcorbin city\tcity in new jersey\n";
    std::string trips =
        "10\tperformer\t12\n"
        "11\tdirected_by\t12\n"
        "13\tnear\t14\n";

    int next_id = 100;
    auto emit = [&](Kind kind, int count) {
        std::vector<int> ids;
        ids.reserve(static_cast<size_t>(count));
        for (int i = 0; i < count; ++i) {
            std::string surface = fresh_surface(kind, rng, taken);
            int id = next_id++;
            ids.push_back(id);
            ents += std::to_string(id) + "\t" + surface + "\t" +
                    rng.choice(kind_descs(kind)) + "\n";
            if (rng.coin(cfg.polysemy_rate)) {  // a second sense of another kind
                Kind other = kind == Kind::Song ? Kind::Film : Kind::Song;
                ents += std::to_string(next_id++) + "\t" + surface + "\t" +
                        rng.choice(kind_descs(other)) + "\n";
            }
        }
        return ids;
    };

    std::vector<int> songs = emit(Kind::Song, cfg.songs);
    std::vector<int> artists = emit(Kind::Artist, cfg.artists);
    std::vector<int> albums = emit(Kind::Album, cfg.albums);
    std::vector<int> films = emit(Kind::Film, cfg.films);
    std::vector<int> cities = emit(Kind::City, cfg.cities);

    auto triple = [&](int h, const char* r, int t) {
        trips += std::to_string(h) + "\t" + r + "\t" + std::to_string(t) + "\n";
    };
    if (!artists.empty()) {
        for (int s : songs) triple(s, "performer", rng.choice(artists));
        for (int f : films) triple(f, "directed_by", rng.choice(artists));
    }
    if (!albums.empty())
        for (int s : songs)
            if (rng.coin(0.6)) triple(s, "in_album", rng.choice(albums));
    for (size_t i = 0; i + 1 < cities.size(); ++i)
        if (rng.coin(0.5)) triple(cities[i], "near", cities[i + 1]);

    return {std::move(ents), std::move(trips)};
}

// ---------------------------------------------------------------------------
// Templates

const std::string& default_templates() {
    static const std::string text =
        "pattern\tdomain\tintent\tslots\n"
        "play {song} by {artist}\tMusic\tPlayMusicIntent\tsong=SongName,artist=ArtistName\n"
        "play {song}\tMusic\tPlayMusicIntent\tsong=SongName\n"
        "play the album {album}\tMusic\tPlayMusicIntent\talbum=AlbumName\n"
        "add {song} to my playlist\tMusic\tAddToPlaylistIntent\tsong=SongName\n"
        "who sings {song}\tMusic\tQAIntent\tsong=SongName\n"
        "play {song} from {album}\tMusic\tPlayMusicIntent\tsong=SongName,album=AlbumName\n"
        "play something by {artist}\tMusic\tPlayMusicIntent\tartist=ArtistName\n"
        "directions to {city}\tNavigation\tDirectionsIntent\tcity=Destination\n"
        "navigate from {city} to {city2}\tNavigation\tDirectionsIntent\t"
        "city=Origin,city2=Destination\n"
        "what is the weather in {city}\tWeather\tGetWeatherIntent\tcity=Location\n"
        "show me the film {film}\tVideo\tPlayVideoIntent\tfilm=VideoName\n"
        "show me {film} directed by {artist}\tVideo\tPlayVideoIntent\t"
        "film=VideoName,artist=DirectorName\n"
        "who directed {film}\tVideo\tQAIntent\tfilm=VideoName\n";
    return text;
}

std::vector<std::string> pattern_placeholders(const std::string& pattern) {
    std::vector<std::string> out;
    for (const std::string& tok : split_ws(pattern)) {
        bool braced = tok.size() > 2 && tok.front() == '{' && tok.back() == '}';
        if (braced) {
            std::string name = tok.substr(1, tok.size() - 2);
            if (name.find('{') != std::string::npos || name.find('}') != std::string::npos)
                throw Error("bad placeholder token: " + tok);
            out.push_back(name);
        } else if (tok.find('{') != std::string::npos || tok.find('}') != std::string::npos) {
            throw Error("placeholders must be whole words: " + tok);
        }
    }
    return out;
}

std::string placeholder_role(const std::string& placeholder) {
    size_t end = placeholder.size();
    while (end > 0 && std::isdigit(static_cast<unsigned char>(placeholder[end - 1]))) --end;
    if (end == 0) throw Error("placeholder has no role name: " + placeholder);
    return placeholder.substr(0, end);
}

std::vector<Template> parse_templates(std::istream& in) {
    std::string line;
    std::vector<Template> out;
    bool saw_header = false;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        if (!saw_header) {
            if (line != "pattern\tdomain\tintent\tslots")
                throw Error("template file: bad header: " + line);
            saw_header = true;
            continue;
        }
        std::vector<std::string> f = split_char(line, '\t');
        if (f.size() != 4) throw Error("template line needs 4 fields: " + line);
        Template t;
        t.pattern = f[0];
        t.domain = f[1];
        t.intent = f[2];
        std::vector<std::string> phs = pattern_placeholders(t.pattern);
        if (phs.empty()) throw Error("template has no placeholders: " + t.pattern);
        std::set<std::string> ph_set(phs.begin(), phs.end());
        if (ph_set.size() != phs.size()) throw Error("duplicate placeholder in: " + t.pattern);
        for (const std::string& part : split_char(f[3], ',')) {
            size_t eq = part.find('=');
            if (eq == std::string::npos || eq == 0 || eq + 1 == part.size())
                throw Error("bad slot mapping: " + part);
            t.slot_names.emplace_back(part.substr(0, eq), part.substr(eq + 1));
        }
        std::set<std::string> mapped;
        for (const auto& [ph, slot] : t.slot_names) {
            if (!ph_set.count(ph)) throw Error("slot maps unknown placeholder: " + ph);
            if (!mapped.insert(ph).second) throw Error("placeholder mapped twice: " + ph);
        }
        if (mapped.size() != ph_set.size())
            throw Error("every placeholder needs a slot name: " + t.pattern);
        out.push_back(std::move(t));
    }
    if (!saw_header) throw Error("template file: missing header");
    return out;
}

std::vector<Template> parse_templates(const std::string& text) {
    std::istringstream in(text);
    return parse_templates(in);
}

std::map<std::string, std::vector<std::string>> role_surfaces(const KnowledgeGraph& kg,
                                                              const EntityCatalog& catalog) {
    struct Rule {
        const char* role;
        const char* relation;
        bool head, tail;
    };
    static constexpr Rule kRules[] = {
        {"song", "performer", true, false},    {"artist", "performer", false, true},
        {"film", "directed_by", true, false},  {"artist", "directed_by", false, true},
        {"song", "in_album", true, false},     {"album", "in_album", false, true},
        {"city", "near", true, true},
    };
    std::map<std::string, std::set<std::string>> sets;
    for (const Rule& rule : kRules) {
        int rel = kg.relation_id(rule.relation);
        if (rel < 0) continue;
        for (const Triple& tr : kg.triples()) {
            if (tr.rel != rel) continue;
            if (rule.head) sets[rule.role].insert(kg.entity(tr.head).surface);
            if (rule.tail) sets[rule.role].insert(kg.entity(tr.tail).surface);
        }
    }
    std::map<std::string, std::vector<std::string>> out;
    for (auto& [role, surfaces] : sets) {
        std::vector<std::string> keep;
        for (const std::string& s : surfaces)
            if (catalog.find(s)) keep.push_back(s);
        if (!keep.empty()) out.emplace(role, std::move(keep));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Corruption

Corruptor::Corruptor(std::vector<std::string> index_surfaces) : surfaces_(std::move(index_surfaces)) {
    std::sort(surfaces_.begin(), surfaces_.end());
    surfaces_.erase(std::unique(surfaces_.begin(), surfaces_.end()), surfaces_.end());
    for (size_t i = 0; i < surfaces_.size(); ++i) by_len_[surfaces_[i].size()].push_back(i);
}

const std::string& Corruptor::nearest(const std::string& surface) {
    auto hit = nearest_.find(surface);
    if (hit != nearest_.end()) return hit->second;
    if (by_len_.empty()) throw Error("nearest: no index surfaces");

    size_t len = surface.size();
    size_t lo = by_len_.begin()->first, hi = by_len_.rbegin()->first;
    size_t max_delta = std::max(hi > len ? hi - len : 0, len > lo ? len - lo : 0);
    size_t best_d = SIZE_MAX;
    const std::string* best = nullptr;
    // edit distance is at least the length difference, so buckets further out
    // than the best distance cannot win or retie
    for (size_t delta = 0; delta <= max_delta; ++delta) {
        if (best && delta > best_d) break;
        for (int sign = 0; sign < (delta == 0 ? 1 : 2); ++sign) {
            if (sign == 1 && delta > len) continue;
            auto bucket = by_len_.find(sign == 0 ? len + delta : len - delta);
            if (bucket == by_len_.end()) continue;
            for (size_t idx : bucket->second) {
                const std::string& c = surfaces_[idx];
                if (c == surface) continue;
                size_t d = edit_distance(surface, c);
                if (d < best_d || (d == best_d && (!best || c < *best))) {
                    best_d = d;
                    best = &c;
                }
            }
        }
    }
    if (!best) throw Error("nearest: no other surface than: " + surface);
    return nearest_.emplace(surface, *best).first->second;
}

std::string Corruptor::char_edit(const std::string& s, Rng& rng) {
    for (int attempt = 0; attempt < 20; ++attempt) {
        std::string w = s;
        std::vector<size_t> letters;
        for (size_t i = 0; i < w.size(); ++i)
            if (w[i] != ' ') letters.push_back(i);
        if (letters.empty()) break;
        int64_t op = rng.below(3);
        if (op == 0) {
            size_t pos = letters[rng.below(static_cast<int64_t>(letters.size()))];
            w[pos] = static_cast<char>('a' + (w[pos] - 'a' + 1 + rng.below(25)) % 26);
        } else if (op == 1) {
            size_t pos = static_cast<size_t>(rng.below(static_cast<int64_t>(w.size()) + 1));
            w.insert(w.begin() + static_cast<ptrdiff_t>(pos),
                     static_cast<char>('a' + rng.below(26)));
        } else {
            size_t pos = letters[rng.below(static_cast<int64_t>(letters.size()))];
            w.erase(pos, 1);
        }
        w = join(split_ws(w), " ");
        if (!w.empty() && w != s) return w;
    }
    return nearest(s);  // pathological input
}

std::string Corruptor::split_merge(const std::string& s, Rng& rng) {
    std::vector<std::string> words = split_ws(s);
    std::vector<size_t> splittable;
    for (size_t i = 0; i < words.size(); ++i)
        if (words[i].size() >= 4) splittable.push_back(i);
    bool can_merge = words.size() >= 2;
    if (splittable.empty() && !can_merge) return char_edit(s, rng);

    bool do_split = !splittable.empty() && (!can_merge || rng.coin(0.5));
    if (do_split) {
        size_t i = splittable[rng.below(static_cast<int64_t>(splittable.size()))];
        std::string w = words[i];
        size_t cut = 2 + static_cast<size_t>(rng.below(static_cast<int64_t>(w.size()) - 3));
        words[i] = w.substr(0, cut);
        words.insert(words.begin() + static_cast<ptrdiff_t>(i) + 1, w.substr(cut));
    } else {
        size_t i = static_cast<size_t>(rng.below(static_cast<int64_t>(words.size()) - 1));
        words[i] += words[i + 1];
        words.erase(words.begin() + static_cast<ptrdiff_t>(i) + 1);
    }
    return join(words, " ");
}

std::string Corruptor::corrupt(const std::string& surface, Rng& rng) {
    if (split_ws(surface).empty()) throw Error("corrupt: empty surface");
    int64_t op = rng.below(4);
    if (op <= 1) return char_edit(surface, rng);
    if (op == 2) return nearest(surface);
    return split_merge(surface, rng);
}

std::string corrupt_entity(const std::string& surface, Rng& rng,
                           const std::vector<std::string>& index_surfaces) {
    Corruptor c(index_surfaces);
    return c.corrupt(surface, rng);
}

// ---------------------------------------------------------------------------
// Generation

namespace {

struct PairRule {
    const char* role_a;
    const char* role_b;
    const char* relation;
};
constexpr PairRule kPairRules[] = {
    {"song", "artist", "performer"},
    {"film", "artist", "directed_by"},
    {"song", "album", "in_album"},
    {"city", "city", "near"},
};

size_t zipf_idx(Rng& rng, size_t n) {
    auto idx = static_cast<size_t>(static_cast<double>(n) * std::pow(rng.uniform(), 2.5));
    return std::min(idx, n - 1);
}

}  // namespace

GeneratedData generate(const KnowledgeGraph& kg, const EntityCatalog& catalog,
                       const std::vector<Template>& templates, const GenCounts& counts, Rng& rng) {
    GeneratedData out;
    auto roles = role_surfaces(kg, catalog);

    std::vector<const Template*> usable;
    for (const Template& t : templates) {
        bool ok = true;
        for (const std::string& ph : pattern_placeholders(t.pattern))
            ok = ok && roles.count(placeholder_role(ph)) > 0;
        if (ok) usable.push_back(&t);
    }
    if (usable.empty()) throw Error("generate: no template is fillable from this graph");

    // 25% of each role is reserved for test-only targets (zero-shot pool);
    // canonical fixture entities always stay trainable.
    struct Pool {
        std::vector<std::string> train, all;
        std::set<std::string> reserved;
    };
    std::map<std::string, Pool> pools;
    for (const auto& [role, list] : roles) {
        Pool p;
        p.all = list;
        std::vector<std::string> shuffled = list;
        rng.shuffle(shuffled);
        size_t reserve = shuffled.size() / 4;
        p.train.assign(shuffled.begin(), shuffled.end() - static_cast<ptrdiff_t>(reserve));
        for (size_t i = shuffled.size() - reserve; i < shuffled.size(); ++i) {
            const std::string& s = shuffled[i];
            if (s == "bad romance" || s == "lady gaga" || s == "carson city") p.train.push_back(s);
            else p.reserved.insert(s);
        }
        pools[role] = std::move(p);
    }

    // pre-resolved surface pairs per pairing relation
    std::map<std::string, std::vector<std::pair<std::string, std::string>>> rel_pairs;
    for (const PairRule& rule : kPairRules) {
        int rel = kg.relation_id(rule.relation);
        if (rel < 0) continue;
        for (const Triple& tr : kg.triples()) {
            if (tr.rel != rel) continue;
            const std::string& h = kg.entity(tr.head).surface;
            const std::string& t = kg.entity(tr.tail).surface;
            if (catalog.find(h) && catalog.find(t) && h != t)
                rel_pairs[rule.relation].emplace_back(h, t);
        }
    }

    std::vector<std::string> index_surfaces;
    index_surfaces.reserve(catalog.size());
    for (const EntityEntry& e : catalog.entries()) index_surfaces.push_back(e.surface);
    Corruptor corruptor(std::move(index_surfaces));

    struct Filled {
        const Template* tpl = nullptr;
        std::map<std::string, std::string> fills;
        std::string target_ph;
    };

    auto fill_template = [&](bool for_train) -> std::optional<Filled> {
        Filled f;
        f.tpl = usable[rng.below(static_cast<int64_t>(usable.size()))];
        std::vector<std::string> phs = pattern_placeholders(f.tpl->pattern);

        // with probability 1/2, fill a related pair straight from a triple
        for (const PairRule& rule : kPairRules) {
            auto pairs = rel_pairs.find(rule.relation);
            if (pairs == rel_pairs.end()) continue;
            std::string ph_a, ph_b;
            for (const std::string& ph : phs) {
                std::string role = placeholder_role(ph);
                if (ph_a.empty() && role == rule.role_a) ph_a = ph;
                else if (ph_b.empty() && role == rule.role_b) ph_b = ph;
            }
            if (ph_a.empty() || ph_b.empty()) continue;
            if (rng.coin(0.5)) {
                const auto& [h, t] = rng.choice(pairs->second);
                f.fills[ph_a] = h;
                f.fills[ph_b] = t;
            }
            break;
        }

        f.target_ph = phs[rng.below(static_cast<int64_t>(phs.size()))];
        for (const std::string& ph : phs) {
            if (f.fills.count(ph)) continue;
            const Pool& pool = pools.at(placeholder_role(ph));
            if (ph != f.target_ph) {
                f.fills[ph] = pool.all[rng.below(static_cast<int64_t>(pool.all.size()))];
            } else if (!for_train && !pool.reserved.empty() && rng.coin(0.25)) {
                auto it = pool.reserved.begin();
                std::advance(it, rng.below(static_cast<int64_t>(pool.reserved.size())));
                f.fills[ph] = *it;
            } else {
                f.fills[ph] = pool.train[zipf_idx(rng, pool.train.size())];
            }
        }

        // training targets must stay out of the zero-shot pool
        const std::string& target = f.fills.at(f.target_ph);
        if (for_train && pools.at(placeholder_role(f.target_ph)).reserved.count(target))
            return std::nullopt;
        for (const auto& [p1, s1] : f.fills)
            for (const auto& [p2, s2] : f.fills)
                if (p1 < p2 && s1 == s2) return std::nullopt;
        return f;
    };

    auto realize = [&](const Filled& f, bool corrupting) {
        RephraseSample s;
        s.clean = !corrupting;
        std::string corrupt;
        if (corrupting) {
            s.target_entity = f.fills.at(f.target_ph);
            corrupt = corruptor.corrupt(s.target_entity, rng);
            s.corrupt_text = corrupt;
        }
        std::vector<std::string> src, tgt;
        for (const std::string& tok : split_ws(f.tpl->pattern)) {
            if (tok.front() == '{') {
                const std::string& name = tok.substr(1, tok.size() - 2);
                const std::string& fill = f.fills.at(name);
                bool corrupted_here = corrupting && name == f.target_ph;
                const std::string& src_text = corrupted_here ? corrupt : fill;
                if (corrupted_here) {
                    s.span_start = static_cast<int>(src.size());
                    s.span_end = s.span_start + static_cast<int>(split_ws(src_text).size()) - 1;
                }
                for (const std::string& w : split_ws(src_text)) src.push_back(w);
                for (const std::string& w : split_ws(fill)) tgt.push_back(w);
            } else {
                src.push_back(tok);
                tgt.push_back(tok);
            }
        }
        s.source = join(src, " ");
        s.target = join(tgt, " ");
        s.hypothesis.domain = f.tpl->domain;
        s.hypothesis.intent = f.tpl->intent;
        for (const auto& [ph, slot] : f.tpl->slot_names) {
            bool corrupted_here = corrupting && ph == f.target_ph;
            s.hypothesis.slots.emplace_back(slot, corrupted_here ? corrupt : f.fills.at(ph));
        }
        return s;
    };

    std::set<std::string> train_sources;
    auto gen_into = [&](std::vector<RephraseSample>& dst, int want, bool make_clean,
                        bool for_train, const char* label) {
        long attempts = static_cast<long>(want) * 40 + 200;
        while (static_cast<int>(dst.size()) < want && attempts-- > 0) {
            std::optional<Filled> f = fill_template(for_train);
            if (!f) continue;
            RephraseSample s = realize(*f, !make_clean);
            if (for_train) train_sources.insert(s.source);
            else if (train_sources.count(s.source)) continue;
            dst.push_back(std::move(s));
        }
        if (static_cast<int>(dst.size()) < want)
            out.warnings.push_back(std::string(label) + ": generated " +
                                   std::to_string(dst.size()) + " of " + std::to_string(want));
    };

    int want_clean = static_cast<int>(std::llround(counts.l2_train * counts.clean_fraction));
    int want_friction = counts.l2_train - want_clean;
    gen_into(out.l2_train, want_friction, false, true, "l2 friction");
    std::vector<RephraseSample> clean_train;
    gen_into(clean_train, want_clean, true, true, "l2 clean");
    out.l2_train.insert(out.l2_train.end(), clean_train.begin(), clean_train.end());
    rng.shuffle(out.l2_train);

    for (const RephraseSample& s : out.l2_train) {
        if (s.clean || static_cast<int>(out.l1_train.size()) >= counts.l1_train) continue;
        out.l1_train.push_back(s);
    }
    if (static_cast<int>(out.l1_train.size()) < counts.l1_train)
        out.warnings.push_back("l1 subset: only " + std::to_string(out.l1_train.size()) +
                               " friction samples available");

    gen_into(out.friction_test, counts.friction_test, false, false, "friction test");
    gen_into(out.clean_test, counts.clean_test, true, false, "clean test");
    tag_splits(out.friction_test, out.l2_train, kg);
    return out;
}

void tag_splits(std::vector<RephraseSample>& test, const std::vector<RephraseSample>& train,
                const KnowledgeGraph& kg) {
    std::map<std::string, int> target_count;
    for (const RephraseSample& s : train)
        if (!s.clean) ++target_count[s.target_entity];

    std::set<std::pair<int, int>> adjacent;
    for (const Triple& tr : kg.triples()) adjacent.insert(std::minmax(tr.head, tr.tail));

    for (RephraseSample& s : test) {
        s.zero_shot = s.few_shot = s.kg_relation = false;
        if (s.clean) continue;
        auto it = target_count.find(s.target_entity);
        int c = it == target_count.end() ? 0 : it->second;
        s.zero_shot = c == 0;
        s.few_shot = c >= 1 && c <= 10;

        std::vector<int> target_ids = kg.ids_for_surface(s.target_entity);
        std::vector<std::string> toks = split_ws(s.source);
        for (int n = 4; n >= 1 && !s.kg_relation; --n) {
            for (int i = 0; i + n <= static_cast<int>(toks.size()); ++i) {
                if (i <= s.span_end && s.span_start <= i + n - 1) continue;  // overlaps the span
                std::string gram = toks[static_cast<size_t>(i)];
                for (int j = 1; j < n; ++j) gram += " " + toks[static_cast<size_t>(i + j)];
                if (gram == s.target_entity) continue;
                for (int ctx : kg.ids_for_surface(gram)) {
                    for (int tid : target_ids)
                        if (adjacent.count(std::minmax(ctx, tid))) s.kg_relation = true;
                }
                if (s.kg_relation) break;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Hard negatives

EntityCatalog strip_kg(const EntityCatalog& catalog) {
    std::vector<EntityEntry> entries;
    entries.reserve(catalog.size());
    for (const EntityEntry& e : catalog.entries()) {
        EntityEntry bare;
        bare.surface = e.surface;
        bare.ids = e.ids;
        entries.push_back(std::move(bare));
    }
    return EntityCatalog::from_entries(std::move(entries));
}

MineStats mine_hard_negatives(const BiEncoder& miner, const EntityIndex& index,
                              std::vector<RephraseSample>& samples, int k, int count, Rng& rng) {
    if (count < 1) throw Error("mine: count must be positive");
    MineStats stats;
    for (RephraseSample& s : samples) {
        std::vector<ScoredSurface> hits = top_k(index, miner, s.source, k);
        if (hits.empty()) throw Error("mine: empty retrieval for: " + s.source);
        s.hard_negatives.clear();
        if (s.clean) {  // pairing surface only
            s.hard_negatives.push_back(hits.front().surface);
            continue;
        }
        for (const ScoredSurface& h : hits) {
            if (h.surface == s.target_entity) continue;
            if (static_cast<int>(s.hard_negatives.size()) == count) break;
            s.hard_negatives.push_back(h.surface);
        }
        if (static_cast<int>(s.hard_negatives.size()) < count) {
            ++stats.padded;
            int guard = 200;
            while (static_cast<int>(s.hard_negatives.size()) < count && guard-- > 0) {
                const auto& row = index.rows()[rng.below(static_cast<int64_t>(index.size()))];
                bool dup = row.surface == s.target_entity ||
                           std::count(s.hard_negatives.begin(), s.hard_negatives.end(),
                                      row.surface) > 0;
                if (!dup) s.hard_negatives.push_back(row.surface);
            }
        }
    }
    return stats;
}

// ---------------------------------------------------------------------------
// Conversion and serialization

TrainSampleL1 to_l1_sample(const RephraseSample& s, int negatives) {
    if (s.clean) throw Error("to_l1_sample: clean samples have no positive");
    TrainSampleL1 t;
    t.utterance = s.source;
    t.positive = s.target_entity;
    for (const std::string& n : s.hard_negatives) {
        if (static_cast<int>(t.hard_negatives.size()) == negatives) break;
        t.hard_negatives.push_back(n);
    }
    return t;
}

std::vector<TrainSampleL2> to_l2_samples(const std::vector<RephraseSample>& in, int negatives,
                                         size_t* skipped) {
    std::vector<TrainSampleL2> out;
    out.reserve(in.size());
    size_t dropped = 0;
    for (const RephraseSample& s : in) {
        TrainSampleL2 t;
        t.utterance = s.source;
        if (s.clean) {
            if (s.hard_negatives.empty()) {
                ++dropped;
                continue;
            }
            t.positive = s.hard_negatives.front();
        } else {
            t.positive = s.target_entity;
            t.has_span = true;
            t.span_start = s.span_start;
            t.span_end = s.span_end;
            for (const std::string& n : s.hard_negatives) {
                if (static_cast<int>(t.hard_negatives.size()) == negatives) break;
                t.hard_negatives.push_back(n);
            }
        }
        out.push_back(std::move(t));
    }
    if (skipped) *skipped = dropped;
    return out;
}

static const char* kSampleHeader =
    "clean\tsource\ttarget\tspan_start\tspan_end\tcorrupt_text\ttarget_entity\t"
    "zero_shot\tfew_shot\tkg_relation\thypothesis\thard_negatives";

std::string samples_tsv(const std::vector<RephraseSample>& samples) {
    std::string out = kSampleHeader;
    out += '\n';
    for (const RephraseSample& s : samples) {
        out += s.clean ? '1' : '0';
        out += '\t' + s.source + '\t' + s.target + '\t' + std::to_string(s.span_start) + '\t' +
               std::to_string(s.span_end) + '\t' + s.corrupt_text + '\t' + s.target_entity +
               '\t';
        out += s.zero_shot ? '1' : '0';
        out += '\t';
        out += s.few_shot ? '1' : '0';
        out += '\t';
        out += s.kg_relation ? '1' : '0';
        out += '\t' + s.hypothesis.serialize() + '\t' + join(s.hard_negatives, ";") + '\n';
    }
    return out;
}

static bool parse_flag(const std::string& f, const std::string& line) {
    if (f == "1") return true;
    if (f == "0") return false;
    throw Error("bad flag field '" + f + "' in: " + line);
}

std::vector<RephraseSample> parse_samples(const std::string& text) {
    std::vector<std::string> lines = split_char(text, '\n');
    while (!lines.empty() && lines.back().empty()) lines.pop_back();
    if (lines.empty() || lines.front() != kSampleHeader)
        throw Error("sample file: missing or bad header");
    std::vector<RephraseSample> out;
    for (size_t li = 1; li < lines.size(); ++li) {
        const std::string& line = lines[li];
        std::vector<std::string> f = split_char(line, '\t');
        if (f.size() != 12) throw Error("sample line needs 12 fields: " + line);
        RephraseSample s;
        s.clean = parse_flag(f[0], line);
        s.source = f[1];
        s.target = f[2];
        try {
            s.span_start = std::stoi(f[3]);
            s.span_end = std::stoi(f[4]);
        } catch (const std::exception&) {
            throw Error("bad span fields in: " + line);
        }
        s.corrupt_text = f[5];
        s.target_entity = f[6];
        s.zero_shot = parse_flag(f[7], line);
        s.few_shot = parse_flag(f[8], line);
        s.kg_relation = parse_flag(f[9], line);
        s.hypothesis = NluHypothesis::parse(f[10]);
        for (const std::string& n : split_char(f[11], ';'))
            if (!n.empty()) s.hard_negatives.push_back(n);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace kgqr
