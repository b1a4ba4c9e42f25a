#pragma once

// WordPiece vocabulary training with configurable frequency-counter width,
// plus greedy longest-match tokenization and id mapping.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "smlm/corpus.hpp"

namespace smlm::tok {

enum class Casing { cased, uncased };

// Reserved special-token layout; line number = id in the vocab file.
inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kClsId = 2;
inline constexpr int kSepId = 3;
inline constexpr int kMaskId = 4;
inline constexpr int kNumSpecials = 5;

inline constexpr const char* kPadTok = "[PAD]";
inline constexpr const char* kUnkTok = "[UNK]";
inline constexpr const char* kClsTok = "[CLS]";
inline constexpr const char* kSepTok = "[SEP]";
inline constexpr const char* kMaskTok = "[MASK]";

class Vocab {
public:
    Vocab() = default;
    Vocab(std::vector<std::string> tokens, Casing casing);

    int size() const { return static_cast<int>(tokens_.size()); }
    Casing casing() const { return casing_; }
    const std::vector<std::string>& tokens() const { return tokens_; }
    const std::string& token(int id) const;
    // -1 when absent
    int id_of(const std::string& token) const;
    bool contains(const std::string& token) const { return id_of(token) >= 0; }
    bool is_special(int id) const { return id >= 0 && id < kNumSpecials; }

    std::uint64_t hash() const;

    // UTF-8, one token per line, LF endings, specials on lines 0-4.
    void save(const std::string& path) const;
    static Vocab load(const std::string& path, Casing casing);

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
    Casing casing_ = Casing::cased;
};

// Frequency-counter arithmetic. width_bits < 64 with saturating=false wraps
// counts modulo 2^width, which reproduces the missing-common-token bug.
struct CounterConfig {
    int width_bits = 64;  // one of {8, 16, 32, 64}
    bool saturating = false;
};

struct TrainStats {
    std::size_t merges_performed = 0;
    std::size_t distinct_chars = 0;
};

Vocab train_vocab(const corpus::CorpusStore& corpus, int target_size, Casing casing,
                  const CounterConfig& counter = {}, TrainStats* stats = nullptr);

// Word-frequency interface used by sharded counting and tests.
using WordCounts = std::unordered_map<std::string, std::uint64_t>;
WordCounts count_words(const corpus::CorpusStore& corpus, Casing casing);
WordCounts merge_counts(const WordCounts& a, const WordCounts& b);
Vocab train_vocab_from_counts(const WordCounts& counts, int target_size, Casing casing,
                              const CounterConfig& counter = {},
                              TrainStats* stats = nullptr);

// Pre-tokenization: whitespace split, punctuation split into single-char
// words; uncased mode lowercases and strips accents first.
std::vector<std::string> pretokenize(const std::string& text, Casing casing);
std::string normalize(const std::string& text, Casing casing);

// Greedy longest-match-first within each word; any unmatchable remainder
// maps the whole word to [UNK]. Words longer than 100 chars map to [UNK].
std::vector<std::string> tokenize(const std::string& text, const Vocab& vocab);
std::string detokenize(const std::vector<std::string>& tokens);

std::vector<int> encode(const std::vector<std::string>& tokens, const Vocab& vocab);
std::vector<std::string> decode(const std::vector<int>& ids, const Vocab& vocab);
std::vector<int> encode_text(const std::string& text, const Vocab& vocab);

// Fraction of non-special tokens differing: 0 identical, 1 disjoint.
double vocab_diff(const Vocab& a, const Vocab& b);

}  // namespace smlm::tok
