#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "smlm/eval.hpp"
#include "smlm/tasks.hpp"

using namespace smlm;
using namespace smlm::tasks;

namespace {

tok::Vocab test_vocab() {
    std::vector<std::string> toks = {tok::kPadTok, tok::kUnkTok, tok::kClsTok,
                                     tok::kSepTok, tok::kMaskTok};
    for (char c = 'a'; c <= 'z'; ++c) toks.push_back(std::string(1, c));
    for (char c = 'a'; c <= 'z'; ++c) toks.push_back("##" + std::string(1, c));
    for (char c = 'A'; c <= 'Z'; ++c) toks.push_back(std::string(1, c));
    toks.push_back(".");
    return tok::Vocab(std::move(toks), tok::Casing::cased);
}

trainer::Checkpoint toy_checkpoint(const tok::Vocab& vocab) {
    model::ModelConfig cfg;
    cfg.layers = 2;
    cfg.hidden = 32;
    cfg.heads = 2;
    cfg.vocab_size = static_cast<int>(vocab.size());
    cfg.max_positions = 64;
    cfg.dropout = 0.0;
    trainer::Checkpoint ckpt;
    ckpt.params = model::init_model(cfg, 17);
    ckpt.model_hash = cfg.hash();
    ckpt.vocab_hash = vocab.hash();
    return ckpt;
}

// Tags perfectly predictable from token identity, so a toy model can overfit.
NerDataset toy_ner() {
    std::istringstream in(
        "aa B-X\n"
        "ab I-X\n"
        "cc O\n"
        "\n"
        "dd O\n"
        "aa B-X\n"
        "\n"
        "ee B-Y\n"
        "cc O\n"
        "dd O\n"
        "\n"
        "cc O\n"
        "ee B-Y\n"
        "ab I-X\n"  // becomes B-X after normalization (orphan I)
        "\n");
    return load_conll(in);
}

ClsDataset toy_cls() {
    std::istringstream in(
        "pos\taa bb\n"
        "neg\tcc dd\n"
        "pos\taa ee\n"
        "neg\tcc ff\n"
        "pos\taa gg\n"
        "neg\tcc hh\n");
    return load_cls_tsv(in);
}

}  // namespace

TEST_CASE("load_conll: sizes, inventory, blank-line separation") {
    std::istringstream in(
        "John B-PER\n"
        "lives O\n"
        "\n"
        "in O\n"
        "Paris B-LOC\n");
    auto ds = load_conll(in);
    REQUIRE(ds.sentences.size() == 2);
    CHECK(ds.token_count() == 4);
    CHECK(ds.sentences[0].tokens == std::vector<std::string>{"John", "lives"});
    CHECK(ds.tag_inventory == std::vector<std::string>{"B-PER", "O", "B-LOC"});
}

TEST_CASE("load_conll: IOB1 is normalized to IOB2") {
    std::istringstream in(
        "a I-A\n"
        "b I-A\n"
        "c O\n"
        "d I-B\n"
        "e I-A\n");
    auto ds = load_conll(in);
    CHECK(ds.sentences[0].tags ==
          std::vector<std::string>{"B-A", "I-A", "O", "B-B", "B-A"});
}

TEST_CASE("load_conll: structured errors carry line numbers") {
    std::istringstream ragged("a B-A\nb\n");
    CHECK_THROWS_WITH_AS(load_conll(ragged), doctest::Contains("line 2"), DataError);
    std::istringstream three("a B-A extra\n");
    CHECK_THROWS_WITH_AS(load_conll(three), doctest::Contains("two columns"), DataError);
    std::istringstream badtag("a Q-A\n");
    CHECK_THROWS_WITH_AS(load_conll(badtag), doctest::Contains("unknown tag prefix"),
                         DataError);
}

TEST_CASE("load_conll: write then load round-trips normalized data") {
    auto ds = toy_ner();
    std::ostringstream out;
    write_conll(ds, out);
    std::istringstream back(out.str());
    auto again = load_conll(back);
    REQUIRE(again.sentences.size() == ds.sentences.size());
    for (std::size_t i = 0; i < ds.sentences.size(); ++i) {
        CHECK(again.sentences[i].tokens == ds.sentences[i].tokens);
        CHECK(again.sentences[i].tags == ds.sentences[i].tags);
    }
}

TEST_CASE("load_cls_tsv: inventory, duplicates, errors") {
    std::istringstream in("x\thello there\ny\tsecond\nx\thello there\n");
    auto ds = load_cls_tsv(in);
    CHECK(ds.examples.size() == 3);
    CHECK(ds.label_inventory == std::vector<std::string>{"x", "y"});
    CHECK(ds.examples[0].text == ds.examples[2].text);  // duplicates preserved

    std::istringstream empty("");
    CHECK(load_cls_tsv(empty).examples.empty());

    std::istringstream notab("x hello\n");
    CHECK_THROWS_WITH_AS(load_cls_tsv(notab), doctest::Contains("line 1"), DataError);
}

TEST_CASE("finetune_ner overfits the toy set to perfect F1") {
    auto vocab = test_vocab();
    auto ckpt = toy_checkpoint(vocab);
    auto ds = toy_ner();
    FinetuneConfig cfg;
    cfg.epochs = 120;  // 4 sentences, one batch per epoch
    cfg.batch_size = 4;
    cfg.lr = 1e-3;
    cfg.max_seq_len = 16;
    cfg.seed = 3;
    auto res = finetune_ner(ckpt, vocab, ds, ds, cfg);
    REQUIRE(res.epoch_dev_f1.size() == 120);
    CHECK(res.epoch_dev_f1.back() == doctest::Approx(1.0));
    CHECK(res.truncated_tokens == 0);

    // predictions equal gold on the overfit set, with one tag per token
    for (const auto& s : ds.sentences) {
        auto tags = predict_tags(res.params, vocab, ds.tag_inventory, s.tokens,
                                 cfg.max_seq_len);
        REQUIRE(tags.size() == s.tokens.size());
        CHECK(tags == s.tags);
        CHECK(predict_tags(res.params, vocab, ds.tag_inventory, s.tokens,
                           cfg.max_seq_len) == tags);  // deterministic repeat
    }
    CHECK(predict_tags(res.params, vocab, ds.tag_inventory, {}, cfg.max_seq_len)
              .empty());

    // the source checkpoint was not touched
    bool same = true;
    auto fresh = toy_checkpoint(vocab);
    ckpt.params.for_each([&](const std::string& name, const model::Tensor& t) {
        fresh.params.for_each([&](const std::string& n2, const model::Tensor& t2) {
            if (n2 == name && t.v != t2.v) same = false;
        });
    });
    CHECK(same);
}

TEST_CASE("finetune_cls overfits a toy classification set") {
    auto vocab = test_vocab();
    auto ckpt = toy_checkpoint(vocab);
    auto ds = toy_cls();
    FinetuneConfig cfg;
    cfg.epochs = 60;
    cfg.batch_size = 6;
    cfg.lr = 1e-3;
    cfg.max_seq_len = 16;
    cfg.seed = 5;
    auto res = finetune_cls(ckpt, vocab, ds, ds, cfg);
    CHECK(res.epoch_dev_f1.back() == doctest::Approx(1.0));
    CHECK(predict_label(res.params, vocab, ds.label_inventory, "aa zz",
                        cfg.max_seq_len) == "pos");
}

TEST_CASE("finetuning is deterministic per seed and varies across seeds") {
    auto vocab = test_vocab();
    auto ckpt = toy_checkpoint(vocab);
    auto ds = toy_ner();
    FinetuneConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 2;
    cfg.lr = 5e-4;
    cfg.max_seq_len = 16;
    cfg.seed = 9;
    auto a = finetune_ner(ckpt, vocab, ds, ds, cfg);
    auto b = finetune_ner(ckpt, vocab, ds, ds, cfg);
    CHECK(a.epoch_dev_f1 == b.epoch_dev_f1);

    cfg.runs = 3;
    auto runs = finetune_ner_runs(ckpt, vocab, ds, ds, cfg);
    REQUIRE(runs.size() == 3);
    CHECK(runs[0].seed == 9);
    CHECK(runs[1].seed == 10);
    CHECK(runs[2].seed == 11);
    CHECK(runs[0].epoch_dev_f1 == a.epoch_dev_f1);  // same seed, same trajectory
}

TEST_CASE("over-long sentences are truncated and counted") {
    auto vocab = test_vocab();
    auto ckpt = toy_checkpoint(vocab);
    NerDataset ds;
    NerSentence s;
    for (int i = 0; i < 30; ++i) {
        s.tokens.push_back("aa");
        s.tags.push_back(i == 0 ? "B-X" : "O");
    }
    ds.sentences.push_back(s);
    ds.tag_inventory = {"B-X", "O"};
    FinetuneConfig cfg;
    cfg.epochs = 1;
    cfg.max_seq_len = 12;
    auto res = finetune_ner(ckpt, vocab, ds, {}, cfg);
    CHECK(res.truncated_tokens > 0);
    // prediction still yields one tag per original token
    auto tags = predict_tags(res.params, vocab, ds.tag_inventory, s.tokens,
                             cfg.max_seq_len);
    CHECK(tags.size() == s.tokens.size());
}

TEST_CASE("finetune preconditions") {
    auto vocab = test_vocab();
    auto ckpt = toy_checkpoint(vocab);
    FinetuneConfig cfg;
    CHECK_THROWS_AS(finetune_ner(ckpt, vocab, {}, {}, cfg), DataError);
    auto bad_cfg = cfg;
    bad_cfg.runs = 0;
    CHECK_THROWS_AS(finetune_ner_runs(ckpt, vocab, toy_ner(), {}, bad_cfg), ConfigError);
    // vocabulary mismatch is refused
    auto other = ckpt;
    other.vocab_hash ^= 1;
    CHECK_THROWS_AS(finetune_ner(other, vocab, toy_ner(), {}, cfg), ConfigError);
}
