#include "smlm/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include "smlm/common.hpp"

namespace smlm::tok {

// ---------------------------------------------------------------------------
// UTF-8 helpers

static std::vector<std::uint32_t> utf8_decode(const std::string& s) {
    std::vector<std::uint32_t> cps;
    std::size_t i = 0;
    while (i < s.size()) {
        const unsigned char c = static_cast<unsigned char>(s[i]);
        std::uint32_t cp = 0;
        std::size_t len = 1;
        if (c < 0x80) {
            cp = c;
        } else if ((c >> 5) == 0x6) {
            cp = c & 0x1f;
            len = 2;
        } else if ((c >> 4) == 0xe) {
            cp = c & 0x0f;
            len = 3;
        } else if ((c >> 3) == 0x1e) {
            cp = c & 0x07;
            len = 4;
        } else {
            // invalid lead byte, keep as replacement to stay total
            cps.push_back(0xFFFD);
            ++i;
            continue;
        }
        if (i + len > s.size()) {
            cps.push_back(0xFFFD);
            break;
        }
        bool ok = true;
        for (std::size_t k = 1; k < len; ++k) {
            const unsigned char cc = static_cast<unsigned char>(s[i + k]);
            if ((cc >> 6) != 0x2) {
                ok = false;
                break;
            }
            cp = (cp << 6) | (cc & 0x3f);
        }
        if (!ok) {
            cps.push_back(0xFFFD);
            ++i;
            continue;
        }
        cps.push_back(cp);
        i += len;
    }
    return cps;
}

static void utf8_append(std::string& out, std::uint32_t cp) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xc0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xe0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    } else {
        out.push_back(static_cast<char>(0xf0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3f)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    }
}

static std::string utf8_encode(const std::vector<std::uint32_t>& cps) {
    std::string out;
    for (auto cp : cps) utf8_append(out, cp);
    return out;
}

// Latin-1 supplement accent decomposition: precomposed letter -> base letter.
// Covers the corpus languages at desk scale; combining marks 0300-036F are
// stripped in uncased mode.
static std::uint32_t strip_accent(std::uint32_t cp) {
    struct Range {
        std::uint32_t lo, hi, base;
    };
    static const Range kRanges[] = {
        {0xC0, 0xC5, 'A'}, {0xC8, 0xCB, 'E'}, {0xCC, 0xCF, 'I'},
        {0xD2, 0xD6, 'O'}, {0xD9, 0xDC, 'U'}, {0xE0, 0xE5, 'a'},
        {0xE8, 0xEB, 'e'}, {0xEC, 0xEF, 'i'}, {0xF2, 0xF6, 'o'},
        {0xF9, 0xFC, 'u'},
    };
    for (const auto& r : kRanges) {
        if (cp >= r.lo && cp <= r.hi) return r.base;
    }
    switch (cp) {
        case 0xC7: return 'C';
        case 0xE7: return 'c';
        case 0xD1: return 'N';
        case 0xF1: return 'n';
        case 0xDD: return 'Y';
        case 0xFD: case 0xFF: return 'y';
        default: return cp;
    }
}

static std::uint32_t to_lower_cp(std::uint32_t cp) {
    if (cp < 0x80) return static_cast<std::uint32_t>(std::tolower(static_cast<int>(cp)));
    if (cp >= 0xC0 && cp <= 0xDE && cp != 0xD7) return cp + 0x20;  // Latin-1 uppercase
    return cp;
}

static bool is_combining_mark(std::uint32_t cp) { return cp >= 0x300 && cp <= 0x36F; }

std::string normalize(const std::string& text, Casing casing) {
    if (casing == Casing::cased) return text;
    auto cps = utf8_decode(text);
    std::vector<std::uint32_t> out;
    out.reserve(cps.size());
    for (auto cp : cps) {
        if (is_combining_mark(cp)) continue;
        out.push_back(to_lower_cp(strip_accent(cp)));
    }
    return utf8_encode(out);
}

static bool is_punct_cp(std::uint32_t cp) {
    return cp < 0x80 && std::ispunct(static_cast<int>(cp)) != 0;
}

static bool is_space_cp(std::uint32_t cp) {
    return cp < 0x80 && std::isspace(static_cast<int>(cp)) != 0;
}

std::vector<std::string> pretokenize(const std::string& text, Casing casing) {
    const std::string norm = normalize(text, casing);
    auto cps = utf8_decode(norm);
    std::vector<std::string> words;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            words.push_back(cur);
            cur.clear();
        }
    };
    for (auto cp : cps) {
        if (is_space_cp(cp)) {
            flush();
        } else if (is_punct_cp(cp)) {
            flush();
            std::string p;
            utf8_append(p, cp);
            words.push_back(p);
        } else {
            utf8_append(cur, cp);
        }
    }
    flush();
    return words;
}

// ---------------------------------------------------------------------------
// Vocab

Vocab::Vocab(std::vector<std::string> tokens, Casing casing)
    : tokens_(std::move(tokens)), casing_(casing) {
    if (tokens_.size() < kNumSpecials || tokens_[0] != kPadTok || tokens_[1] != kUnkTok ||
        tokens_[2] != kClsTok || tokens_[3] != kSepTok || tokens_[4] != kMaskTok) {
        throw DataError("vocab: specials must occupy ids 0-4 in fixed order");
    }
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
            throw DataError("vocab: duplicate token '" + tokens_[i] + "'");
        }
    }
}

const std::string& Vocab::token(int id) const {
    if (id < 0 || id >= size()) throw DataError("vocab: id out of range");
    return tokens_[static_cast<std::size_t>(id)];
}

int Vocab::id_of(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? -1 : it->second;
}

std::uint64_t Vocab::hash() const {
    std::uint64_t h = fnv1a(casing_ == Casing::cased ? "cased" : "uncased");
    for (const auto& t : tokens_) {
        h = fnv1a(t, h);
        h = fnv1a("\n", h);
    }
    return h;
}

void Vocab::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);  // binary: force LF endings
    if (!os) throw DataError("cannot open for writing: " + path);
    for (const auto& t : tokens_) os << t << '\n';
}

Vocab Vocab::load(const std::string& path, Casing casing) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        tokens.push_back(line);
    }
    return Vocab(std::move(tokens), casing);
}

// ---------------------------------------------------------------------------
// Counting

WordCounts count_words(const corpus::CorpusStore& corpus, Casing casing) {
    WordCounts counts;
    for (const auto& d : corpus.docs) {
        for (auto& w : pretokenize(d.text, casing)) ++counts[w];
    }
    return counts;
}

WordCounts merge_counts(const WordCounts& a, const WordCounts& b) {
    WordCounts out = a;
    for (const auto& [w, c] : b) out[w] += c;
    return out;
}

// Width-limited accumulator: wraps (or saturates) at 2^width_bits.
namespace {
class Counter {
public:
    explicit Counter(const CounterConfig& cfg) : cfg_(cfg) {
        mask_ = cfg.width_bits >= 64 ? ~0ULL : ((1ULL << cfg.width_bits) - 1);
    }
    void add(std::uint64_t& slot, std::uint64_t amount) const {
        if (cfg_.saturating) {
            slot = (amount >= mask_ - slot) ? mask_ : slot + amount;
        } else {
            slot = (slot + amount) & mask_;
        }
    }

private:
    CounterConfig cfg_;
    std::uint64_t mask_;
};
}  // namespace

Vocab train_vocab_from_counts(const WordCounts& counts, int target_size, Casing casing,
                              const CounterConfig& counter_cfg, TrainStats* stats) {
    if (counter_cfg.width_bits != 8 && counter_cfg.width_bits != 16 &&
        counter_cfg.width_bits != 32 && counter_cfg.width_bits != 64) {
        throw ConfigError("train_vocab: counter width must be 8, 16, 32, or 64");
    }
    if (counts.empty()) throw ConfigError("train_vocab: empty corpus");
    const Counter counter(counter_cfg);

    // Word -> symbol sequence: first char plain, rest "##"-prefixed.
    struct Entry {
        std::vector<std::string> symbols;
        std::uint64_t count;
    };
    std::vector<Entry> entries;
    std::map<std::string, bool> alphabet;  // char string -> seen non-initial
    for (const auto& [word, cnt] : counts) {
        auto cps = utf8_decode(word);
        Entry e;
        e.count = cnt;
        for (std::size_t i = 0; i < cps.size(); ++i) {
            std::string ch;
            utf8_append(ch, cps[i]);
            auto it = alphabet.find(ch);
            if (it == alphabet.end()) {
                alphabet[ch] = i > 0;
            } else if (i > 0) {
                it->second = true;
            }
            e.symbols.push_back(i == 0 ? ch : "##" + ch);
        }
        entries.push_back(std::move(e));
    }

    std::vector<std::string> tokens = {kPadTok, kUnkTok, kClsTok, kSepTok, kMaskTok};
    for (const auto& [ch, non_initial] : alphabet) {
        tokens.push_back(ch);
        if (non_initial) tokens.push_back("##" + ch);
    }
    if (stats) stats->distinct_chars = alphabet.size();
    if (target_size < static_cast<int>(tokens.size())) {
        throw ConfigError("train_vocab: target_size " + std::to_string(target_size) +
                          " below floor of " + std::to_string(tokens.size()) +
                          " (specials + observed characters)");
    }

    std::size_t merges = 0;
    while (static_cast<int>(tokens.size()) < target_size) {
        // Symbol and adjacent-pair counts under the configured counter width.
        std::map<std::string, std::uint64_t> sym_counts;
        std::map<std::pair<std::string, std::string>, std::uint64_t> pair_counts;
        for (const auto& e : entries) {
            for (const auto& s : e.symbols) counter.add(sym_counts[s], e.count);
            for (std::size_t i = 0; i + 1 < e.symbols.size(); ++i) {
                counter.add(pair_counts[{e.symbols[i], e.symbols[i + 1]}], e.count);
            }
        }
        // WordPiece criterion: pair_count / (count(left) * count(right)),
        // ties by higher pair count then lexicographic pair.
        bool found = false;
        std::pair<std::string, std::string> best;
        double best_score = 0.0;
        std::uint64_t best_count = 0;
        for (const auto& [pair, pc] : pair_counts) {
            if (pc == 0) continue;  // wrapped or absent: unmergeable
            const std::uint64_t lc = sym_counts[pair.first];
            const std::uint64_t rc = sym_counts[pair.second];
            if (lc == 0 || rc == 0) continue;
            const double score = static_cast<double>(pc) /
                                 (static_cast<double>(lc) * static_cast<double>(rc));
            if (!found || score > best_score ||
                (score == best_score &&
                 (pc > best_count || (pc == best_count && pair < best)))) {
                found = true;
                best = pair;
                best_score = score;
                best_count = pc;
            }
        }
        if (!found) break;  // nothing left to merge

        std::string merged = best.first;
        merged += best.second.substr(2);  // drop the continuation prefix
        tokens.push_back(merged);
        ++merges;
        for (auto& e : entries) {
            for (std::size_t i = 0; i + 1 < e.symbols.size();) {
                if (e.symbols[i] == best.first && e.symbols[i + 1] == best.second) {
                    e.symbols[i] = merged;
                    e.symbols.erase(e.symbols.begin() +
                                    static_cast<std::ptrdiff_t>(i + 1));
                } else {
                    ++i;
                }
            }
        }
    }
    if (stats) stats->merges_performed = merges;
    return Vocab(std::move(tokens), casing);
}

Vocab train_vocab(const corpus::CorpusStore& corpus, int target_size, Casing casing,
                  const CounterConfig& counter, TrainStats* stats) {
    if (corpus.empty()) throw ConfigError("train_vocab: empty corpus");
    return train_vocab_from_counts(count_words(corpus, casing), target_size, casing,
                                   counter, stats);
}

// ---------------------------------------------------------------------------
// Tokenization

static constexpr std::size_t kMaxWordChars = 100;

static bool greedy_match(const std::string& word, const Vocab& vocab,
                         std::vector<std::string>* out) {
    const auto cps = utf8_decode(word);
    if (cps.size() > kMaxWordChars) return false;
    std::size_t start = 0;
    while (start < cps.size()) {
        std::size_t end = cps.size();
        int match = -1;
        std::string match_tok;
        while (end > start) {
            std::string piece;
            if (start > 0) piece = "##";
            for (std::size_t i = start; i < end; ++i) utf8_append(piece, cps[i]);
            const int id = vocab.id_of(piece);
            if (id >= 0) {
                match = id;
                match_tok = std::move(piece);
                break;
            }
            --end;
        }
        if (match < 0) return false;
        out->push_back(match_tok);
        start = end;
    }
    return true;
}

std::vector<std::string> tokenize(const std::string& text, const Vocab& vocab) {
    std::vector<std::string> out;
    for (const auto& word : pretokenize(text, vocab.casing())) {
        std::vector<std::string> pieces;
        if (greedy_match(word, vocab, &pieces)) {
            out.insert(out.end(), pieces.begin(), pieces.end());
        } else {
            out.push_back(kUnkTok);
        }
    }
    return out;
}

std::string detokenize(const std::vector<std::string>& tokens) {
    std::string out;
    for (const auto& t : tokens) {
        if (t.size() > 2 && t.compare(0, 2, "##") == 0) {
            out += t.substr(2);
        } else {
            if (!out.empty()) out += ' ';
            out += t;
        }
    }
    return out;
}

std::vector<int> encode(const std::vector<std::string>& tokens, const Vocab& vocab) {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) {
        const int id = vocab.id_of(t);
        if (id < 0) throw DataError("encode: token not in vocab: '" + t + "'");
        ids.push_back(id);
    }
    return ids;
}

std::vector<std::string> decode(const std::vector<int>& ids, const Vocab& vocab) {
    std::vector<std::string> tokens;
    tokens.reserve(ids.size());
    for (int id : ids) tokens.push_back(vocab.token(id));
    return tokens;
}

std::vector<int> encode_text(const std::string& text, const Vocab& vocab) {
    return encode(tokenize(text, vocab), vocab);
}

double vocab_diff(const Vocab& a, const Vocab& b) {
    if (a.casing() != b.casing()) {
        throw ConfigError("vocab_diff: casing modes differ");
    }
    // Fraction of non-special tokens not shared: 0 for identical vocabs,
    // 1 for disjoint ones. Symmetric in its arguments.
    std::size_t common = 0;
    for (std::size_t i = kNumSpecials; i < a.tokens().size(); ++i) {
        if (b.contains(a.tokens()[i])) ++common;
    }
    const std::size_t na = a.tokens().size() - kNumSpecials;
    const std::size_t nb = b.tokens().size() - kNumSpecials;
    const std::size_t denom = std::max(na, nb);
    return denom == 0 ? 0.0
                      : 1.0 - static_cast<double>(common) / static_cast<double>(denom);
}

}  // namespace smlm::tok
