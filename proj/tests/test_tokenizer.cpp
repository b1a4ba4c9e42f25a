#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <sstream>

#include "smlm/common.hpp"
#include "smlm/corpus.hpp"
#include "smlm/tokenizer.hpp"

using namespace smlm;
using namespace smlm::tok;

static corpus::CorpusStore text_store(const std::vector<std::string>& texts) {
    std::string jsonl;
    for (std::size_t i = 0; i < texts.size(); ++i) {
        jsonl += R"({"id":"d)" + std::to_string(i) + R"(","text":")" + texts[i] +
                 R"("})" + "\n";
    }
    std::istringstream is(jsonl);
    return corpus::ingest(is);
}

static Vocab manual_vocab(std::vector<std::string> extra, Casing casing = Casing::cased) {
    std::vector<std::string> toks = {kPadTok, kUnkTok, kClsTok, kSepTok, kMaskTok};
    toks.insert(toks.end(), extra.begin(), extra.end());
    return Vocab(std::move(toks), casing);
}

TEST_CASE("train_vocab merges 'ab' from a repeated-word corpus") {
    // hand-enumerated merge steps: alphabet {a, b(##)} then (a,##b) -> ab
    auto store = text_store({"ab ab ab"});
    auto vocab = train_vocab(store, 9, Casing::cased);
    CHECK(vocab.contains("a"));
    CHECK(vocab.contains("##b"));
    CHECK(vocab.contains("ab"));
}

TEST_CASE("counter width 8 wraps a 256-count pair and loses the merged token") {
    // the word occurs exactly 256 times: pair count 256 mod 2^8 == 0
    std::vector<std::string> texts;
    std::string t;
    for (int i = 0; i < 256; ++i) t += "the ";
    texts.push_back(t);
    auto store = text_store(texts);

    auto narrow = train_vocab(store, 20, Casing::cased, {8, false});
    CHECK(!narrow.contains("th"));
    CHECK(!narrow.contains("the"));

    auto wide = train_vocab(store, 20, Casing::cased, {64, false});
    CHECK(wide.contains("the"));

    // saturating arithmetic pins the count at the maximum instead of losing it
    auto sat = train_vocab(store, 20, Casing::cased, {8, true});
    CHECK(sat.contains("the"));
}

TEST_CASE("train_vocab rejects empty corpus and tiny targets") {
    corpus::CorpusStore empty;
    CHECK_THROWS_AS(train_vocab(empty, 100, Casing::cased), ConfigError);

    auto store = text_store({"abc abc"});
    try {
        train_vocab(store, 3, Casing::cased);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        // error names the floor
        CHECK(std::string(e.what()).find("floor") != std::string::npos);
    }
}

TEST_CASE("training is deterministic") {
    auto store = text_store({"alpha beta gamma alpha beta", "beta gamma delta"});
    auto v1 = train_vocab(store, 40, Casing::cased);
    auto v2 = train_vocab(store, 40, Casing::cased);
    CHECK(v1.tokens() == v2.tokens());
    CHECK(v1.hash() == v2.hash());
}

TEST_CASE("sharded counting merges to the single-pass counts in any order") {
    auto s1 = text_store({"aa bb aa"});
    auto s2 = text_store({"bb cc"});
    auto s3 = text_store({"aa cc cc"});
    auto full = text_store({"aa bb aa", "bb cc", "aa cc cc"});

    auto c1 = count_words(s1, Casing::cased);
    auto c2 = count_words(s2, Casing::cased);
    auto c3 = count_words(s3, Casing::cased);
    auto direct = count_words(full, Casing::cased);

    auto m123 = merge_counts(merge_counts(c1, c2), c3);
    auto m321 = merge_counts(c3, merge_counts(c2, c1));
    CHECK(m123 == direct);
    CHECK(m321 == direct);
}

TEST_CASE("vocab file round-trips with reserved special lines") {
    auto store = text_store({"ab ab ab cd cd"});
    auto vocab = train_vocab(store, 16, Casing::cased);
    const std::string path = "/tmp/smlm_test_vocab.txt";
    vocab.save(path);
    auto loaded = Vocab::load(path, Casing::cased);
    CHECK(loaded.tokens() == vocab.tokens());
    CHECK(loaded.token(kPadId) == kPadTok);
    CHECK(loaded.token(kMaskId) == kMaskTok);
}

TEST_CASE("tokenize applies greedy longest-match-first") {
    auto vocab = manual_vocab({"ab", "##a", "a", "b", "##b"});
    auto toks = tokenize("aba", vocab);
    REQUIRE(toks.size() == 2);
    CHECK(toks[0] == "ab");
    CHECK(toks[1] == "##a");
}

TEST_CASE("tokenize maps uncovered words to UNK") {
    auto vocab = manual_vocab({"a", "b", "##b"});
    auto toks = tokenize("azb", vocab);  // 'z' unmatchable -> single UNK
    REQUIRE(toks.size() == 1);
    CHECK(toks[0] == kUnkTok);

    // word longer than 100 chars maps to UNK even when covered
    std::string longword(150, 'a');
    auto vocab2 = manual_vocab({"a", "##a"});
    auto toks2 = tokenize(longword, vocab2);
    REQUIRE(toks2.size() == 1);
    CHECK(toks2[0] == kUnkTok);
}

TEST_CASE("uncased normalization lowercases and strips accents") {
    CHECK(normalize("\xC3\x89t\xC3\xA9", Casing::uncased) == "ete");  // Été
    CHECK(normalize("ABC", Casing::uncased) == "abc");
    CHECK(normalize("ABC", Casing::cased) == "ABC");

    auto vocab = manual_vocab({"ete"}, Casing::uncased);
    auto toks = tokenize("\xC3\x89T\xC3\xA9", vocab);
    REQUIRE(toks.size() == 1);
    CHECK(toks[0] == "ete");
}

TEST_CASE("round trip over random covered strings") {
    auto vocab = manual_vocab({"a", "b", "c", "##a", "##b", "##c"});
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        std::string w;
        const int len = 1 + static_cast<int>(rng.below(12));
        for (int i = 0; i < len; ++i) w += static_cast<char>('a' + rng.below(3));
        CHECK(detokenize(tokenize(w, vocab)) == w);
    }
}

TEST_CASE("tokenize invariants: count bound and vocab membership") {
    auto store = text_store({"the quick brown fox jumps over the lazy dog"});
    auto vocab = train_vocab(store, 60, Casing::cased);
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        std::string text;
        const int n = 1 + static_cast<int>(rng.below(8));
        for (int i = 0; i < n; ++i) {
            const int len = 1 + static_cast<int>(rng.below(10));
            for (int k = 0; k < len; ++k) text += static_cast<char>('a' + rng.below(26));
            text += ' ';
        }
        auto toks = tokenize(text, vocab);
        CHECK(toks.size() <= text.size());
        for (const auto& t : toks) CHECK(vocab.contains(t));
    }
}

TEST_CASE("encode/decode reserved layout and round trip") {
    auto vocab = manual_vocab({"x", "y"});
    CHECK(encode({}, vocab).empty());
    auto ids = encode({kClsTok}, vocab);
    REQUIRE(ids.size() == 1);
    CHECK(ids[0] == 2);

    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<std::string> toks;
        const int n = static_cast<int>(rng.below(20));
        for (int i = 0; i < n; ++i) {
            toks.push_back(vocab.token(static_cast<int>(rng.below(vocab.size()))));
        }
        CHECK(decode(encode(toks, vocab), vocab) == toks);
    }
}

TEST_CASE("encode/decode error paths") {
    auto vocab = manual_vocab({"x"});
    CHECK_THROWS_AS(encode({"nope"}, vocab), DataError);
    CHECK_THROWS_AS(decode({99}, vocab), DataError);
    CHECK_THROWS_AS(decode({-1}, vocab), DataError);
}

TEST_CASE("vocab_diff endpoints and symmetry") {
    auto v = manual_vocab({"a", "b", "c"});
    CHECK(vocab_diff(v, v) == doctest::Approx(0.0));

    auto w = manual_vocab({"x", "y", "z"});
    CHECK(vocab_diff(v, w) == doctest::Approx(1.0));
    CHECK(vocab_diff(v, w) == doctest::Approx(vocab_diff(w, v)));

    auto u = manual_vocab({"a", "b", "q"});
    CHECK(vocab_diff(v, u) == doctest::Approx(1.0 / 3.0));

    auto uncased = manual_vocab({"a"}, Casing::uncased);
    CHECK_THROWS_AS(vocab_diff(v, uncased), ConfigError);
}

TEST_CASE("two subset vocabularies report a diff without a pinned value") {
    auto store = text_store({
        "the cat sat on the mat and the dog ran",
        "a cat and a dog met on a mat in the sun",
        "dogs chase cats and cats chase mice all day",
        "the sun set and the day was done for all",
    });
    auto sub1 = corpus::sample_subset(store, {0.5, 1, corpus::SubsetUnit::documents});
    auto sub2 = corpus::sample_subset(store, {0.5, 2, corpus::SubsetUnit::documents});
    auto v1 = train_vocab(sub1, 48, Casing::cased);
    auto v2 = train_vocab(sub2, 48, Casing::cased);
    const double d = vocab_diff(v1, v2);
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
}
