#include "smlm/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include "smlm/eval.hpp"
#include "smlm/optim.hpp"

namespace smlm::tasks {

std::size_t NerDataset::token_count() const {
    std::size_t n = 0;
    for (const auto& s : sentences) n += s.tokens.size();
    return n;
}

// ---------------------------------------------------------------------------
// Loading

namespace {

bool well_formed_tag(const std::string& tag) {
    if (tag == "O") return true;
    return tag.size() >= 3 && (tag[0] == 'B' || tag[0] == 'I') && tag[1] == '-';
}

void note_tag(NerDataset& ds, const std::string& tag) {
    if (std::find(ds.tag_inventory.begin(), ds.tag_inventory.end(), tag) ==
        ds.tag_inventory.end()) {
        ds.tag_inventory.push_back(tag);
    }
}

}  // namespace

NerDataset load_conll(std::istream& in) {
    NerDataset ds;
    NerSentence cur;
    std::string line;
    std::size_t lineno = 0;
    auto flush = [&]() {
        if (cur.tokens.empty()) return;
        // IOB1 -> IOB2: an I-X run not continuing a same-type entity starts one
        for (std::size_t i = 0; i < cur.tags.size(); ++i) {
            auto& tag = cur.tags[i];
            if (tag[0] != 'I') continue;
            const std::string type = tag.substr(2);
            const bool continues =
                i > 0 && cur.tags[i - 1] != "O" && cur.tags[i - 1].substr(2) == type;
            if (!continues) tag = "B-" + type;
        }
        for (const auto& tag : cur.tags) note_tag(ds, tag);
        ds.sentences.push_back(std::move(cur));
        cur = {};
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::istringstream cols(line);
        std::string token, tag, extra;
        if (!(cols >> token)) {  // blank line: sentence boundary
            flush();
            continue;
        }
        if (!(cols >> tag) || (cols >> extra)) {
            throw DataError("conll: line " + std::to_string(lineno) +
                            ": expected exactly two columns");
        }
        if (!well_formed_tag(tag)) {
            throw DataError("conll: line " + std::to_string(lineno) +
                            ": unknown tag prefix in '" + tag + "'");
        }
        cur.tokens.push_back(std::move(token));
        cur.tags.push_back(std::move(tag));
    }
    flush();
    return ds;
}

NerDataset load_conll(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("conll: cannot open " + path);
    return load_conll(in);
}

void write_conll(const NerDataset& ds, std::ostream& out) {
    for (const auto& s : ds.sentences) {
        for (std::size_t i = 0; i < s.tokens.size(); ++i) {
            out << s.tokens[i] << ' ' << s.tags[i] << '\n';
        }
        out << '\n';
    }
}

ClsDataset load_cls_tsv(std::istream& in) {
    ClsDataset ds;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw DataError("cls_tsv: line " + std::to_string(lineno) + ": missing tab");
        }
        ClsExample ex{line.substr(0, tab), line.substr(tab + 1)};
        if (std::find(ds.label_inventory.begin(), ds.label_inventory.end(), ex.label) ==
            ds.label_inventory.end()) {
            ds.label_inventory.push_back(ex.label);
        }
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

ClsDataset load_cls_tsv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cls_tsv: cannot open " + path);
    return load_cls_tsv(in);
}

void FinetuneConfig::validate() const {
    if (epochs < 1) throw ConfigError("finetune: epochs must be positive");
    if (batch_size < 1) throw ConfigError("finetune: batch_size must be positive");
    if (lr <= 0.0) throw ConfigError("finetune: lr must be positive");
    if (max_seq_len < 4) throw ConfigError("finetune: max_seq_len too small");
    if (runs < 1) throw ConfigError("finetune: runs must be >= 1");
}

// ---------------------------------------------------------------------------
// Encoding

namespace {

struct Encoded {
    std::vector<int> input_ids;
    std::vector<int> token_labels;  // NER only, -1 elsewhere
    int cls_label = -1;             // classification only
    std::int64_t dropped_tokens = 0;
};

std::vector<std::string> word_pieces(const std::string& word, const tok::Vocab& vocab) {
    auto pieces = tok::tokenize(word, vocab);
    if (pieces.empty()) pieces.push_back(tok::kUnkTok);  // keep label alignment
    return pieces;
}

// [CLS] pieces... [SEP], first piece of each token carrying its tag id.
Encoded encode_ner(const NerSentence& s, const tok::Vocab& vocab,
                   const std::vector<std::string>& inventory, int max_seq_len) {
    Encoded e;
    e.input_ids.push_back(tok::kClsId);
    e.token_labels.push_back(-1);
    const int budget = max_seq_len - 1;  // room must remain for [SEP]
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
        const auto pieces = word_pieces(s.tokens[i], vocab);
        if (static_cast<int>(e.input_ids.size() + pieces.size()) > budget) {
            e.dropped_tokens += static_cast<std::int64_t>(s.tokens.size() - i);
            break;
        }
        const auto it = std::find(inventory.begin(), inventory.end(), s.tags[i]);
        if (it == inventory.end()) {
            throw DataError("finetune: tag '" + s.tags[i] + "' not in the inventory");
        }
        bool first = true;
        for (const auto& piece : pieces) {
            e.input_ids.push_back(vocab.id_of(piece) >= 0 ? vocab.id_of(piece)
                                                          : tok::kUnkId);
            e.token_labels.push_back(
                first ? static_cast<int>(it - inventory.begin()) : -1);
            first = false;
        }
    }
    e.input_ids.push_back(tok::kSepId);
    e.token_labels.push_back(-1);
    return e;
}

Encoded encode_cls(const std::string& text, int label, const tok::Vocab& vocab,
                   int max_seq_len) {
    Encoded e;
    auto ids = tok::encode_text(text, vocab);
    const std::size_t budget = static_cast<std::size_t>(max_seq_len - 2);
    if (ids.size() > budget) {
        e.dropped_tokens += static_cast<std::int64_t>(ids.size() - budget);
        ids.resize(budget);
    }
    e.input_ids.push_back(tok::kClsId);
    e.input_ids.insert(e.input_ids.end(), ids.begin(), ids.end());
    e.input_ids.push_back(tok::kSepId);
    e.token_labels.assign(e.input_ids.size(), -1);
    e.cls_label = label;
    return e;
}

model::ModelBatch pack(const std::vector<const Encoded*>& group, bool token_task) {
    model::ModelBatch mb;
    mb.batch = static_cast<int>(group.size());
    int max_len = 0;
    for (const auto* e : group) {
        max_len = std::max(max_len, static_cast<int>(e->input_ids.size()));
    }
    mb.seq = max_len;
    for (const auto* e : group) {
        const auto n = e->input_ids.size();
        for (std::size_t i = 0; i < static_cast<std::size_t>(max_len); ++i) {
            mb.input_ids.push_back(i < n ? e->input_ids[i] : tok::kPadId);
            mb.segment_ids.push_back(0);
            mb.attention.push_back(i < n ? 1 : 0);
            mb.mlm_labels.push_back(-1);
            mb.token_labels.push_back(token_task && i < n ? e->token_labels[i] : -1);
        }
        mb.nsp_labels.push_back(e->cls_label);
    }
    return mb;
}

struct Prepared {
    std::vector<Encoded> examples;
    std::int64_t truncated = 0;
};

model::Parameters head_initialized(const trainer::Checkpoint& ckpt,
                                   const tok::Vocab& vocab, model::HeadKind kind,
                                   int classes, std::uint64_t seed) {
    if (ckpt.vocab_hash != vocab.hash()) {
        throw ConfigError(
            "finetune: checkpoint was pretrained with a different vocabulary");
    }
    model::Parameters params = ckpt.params;  // the checkpoint itself stays intact
    model::attach_head(params, kind, classes, seed);
    return params;
}

FinetuneResult train_loop(model::Parameters params, Prepared prep,
                          model::LossKind kind, const FinetuneConfig& cfg,
                          std::uint64_t seed,
                          const std::function<double(const model::Parameters&)>& dev_metric) {
    if (prep.examples.empty()) throw DataError("finetune: empty train split");
    optim::Hyper hyper;
    hyper.lr = cfg.lr;
    auto st = optim::OptimState::for_params(params);
    const bool token_task = kind == model::LossKind::token_cls;
    FinetuneResult result;
    result.seed = seed;
    result.truncated_tokens = prep.truncated;
    std::vector<std::size_t> order(prep.examples.size());
    std::iota(order.begin(), order.end(), 0);
    std::uint64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(epoch)));
        rng.shuffle(order);
        for (std::size_t at = 0; at < order.size();
             at += static_cast<std::size_t>(cfg.batch_size)) {
            std::vector<const Encoded*> group;
            const auto hi =
                std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_size));
            for (std::size_t i = at; i < hi; ++i) {
                group.push_back(&prep.examples[order[i]]);
            }
            const auto mb = pack(group, token_task);
            auto grads = model::zeros_like(params);
            model::forward_backward(params, mb, kind, &grads, {}, /*train_mode=*/true,
                                    mix_seed(seed, 0xF17E + step));
            optim::adamw_step(params, grads, st, hyper, cfg.lr);
            ++step;
        }
        result.epoch_dev_f1.push_back(dev_metric(params));
    }
    result.params = std::move(params);
    return result;
}

}  // namespace

// ---------------------------------------------------------------------------
// Finetuning

FinetuneResult finetune_ner(const trainer::Checkpoint& ckpt, const tok::Vocab& vocab,
                            const NerDataset& train, const NerDataset& dev,
                            const FinetuneConfig& cfg) {
    cfg.validate();
    if (train.sentences.empty()) throw DataError("finetune: empty train split");
    auto params = head_initialized(ckpt, vocab, model::HeadKind::token_cls,
                                   static_cast<int>(train.tag_inventory.size()),
                                   mix_seed(cfg.seed, 0x4EAD));
    Prepared prep;
    for (const auto& s : train.sentences) {
        auto e = encode_ner(s, vocab, train.tag_inventory, cfg.max_seq_len);
        prep.truncated += e.dropped_tokens;
        prep.examples.push_back(std::move(e));
    }
    const auto& inventory = train.tag_inventory;
    auto dev_metric = [&dev, &vocab, &inventory, &cfg](const model::Parameters& p) {
        if (dev.sentences.empty()) return 0.0;
        std::vector<std::vector<std::string>> gold, pred;
        for (const auto& s : dev.sentences) {
            gold.push_back(s.tags);
            pred.push_back(predict_tags(p, vocab, inventory, s.tokens, cfg.max_seq_len));
        }
        return eval::conll_f1(gold, pred).f1;
    };
    return train_loop(std::move(params), std::move(prep), model::LossKind::token_cls,
                      cfg, cfg.seed, dev_metric);
}

FinetuneResult finetune_cls(const trainer::Checkpoint& ckpt, const tok::Vocab& vocab,
                            const ClsDataset& train, const ClsDataset& dev,
                            const FinetuneConfig& cfg) {
    cfg.validate();
    if (train.examples.empty()) throw DataError("finetune: empty train split");
    auto params = head_initialized(ckpt, vocab, model::HeadKind::seq_cls,
                                   static_cast<int>(train.label_inventory.size()),
                                   mix_seed(cfg.seed, 0x4EAD));
    Prepared prep;
    for (const auto& ex : train.examples) {
        const auto it = std::find(train.label_inventory.begin(),
                                  train.label_inventory.end(), ex.label);
        auto e = encode_cls(ex.text, static_cast<int>(it - train.label_inventory.begin()),
                            vocab, cfg.max_seq_len);
        prep.truncated += e.dropped_tokens;
        prep.examples.push_back(std::move(e));
    }
    const auto& inventory = train.label_inventory;
    auto dev_metric = [&dev, &vocab, &inventory, &cfg](const model::Parameters& p) {
        if (dev.examples.empty()) return 0.0;
        std::vector<std::string> gold, pred;
        for (const auto& ex : dev.examples) {
            gold.push_back(ex.label);
            pred.push_back(predict_label(p, vocab, inventory, ex.text, cfg.max_seq_len));
        }
        return eval::cls_f1(gold, pred, eval::Averaging::micro).f1;
    };
    return train_loop(std::move(params), std::move(prep), model::LossKind::seq_cls, cfg,
                      cfg.seed, dev_metric);
}

std::vector<FinetuneResult> finetune_ner_runs(const trainer::Checkpoint& ckpt,
                                              const tok::Vocab& vocab,
                                              const NerDataset& train,
                                              const NerDataset& dev,
                                              const FinetuneConfig& cfg) {
    cfg.validate();
    std::vector<FinetuneResult> out;
    for (int r = 0; r < cfg.runs; ++r) {
        FinetuneConfig one = cfg;
        one.seed = cfg.seed + static_cast<std::uint64_t>(r);
        out.push_back(finetune_ner(ckpt, vocab, train, dev, one));
    }
    return out;
}

std::vector<FinetuneResult> finetune_cls_runs(const trainer::Checkpoint& ckpt,
                                              const tok::Vocab& vocab,
                                              const ClsDataset& train,
                                              const ClsDataset& dev,
                                              const FinetuneConfig& cfg) {
    cfg.validate();
    std::vector<FinetuneResult> out;
    for (int r = 0; r < cfg.runs; ++r) {
        FinetuneConfig one = cfg;
        one.seed = cfg.seed + static_cast<std::uint64_t>(r);
        out.push_back(finetune_cls(ckpt, vocab, train, dev, one));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Prediction

std::vector<std::string> predict_tags(const model::Parameters& params,
                                      const tok::Vocab& vocab,
                                      const std::vector<std::string>& tag_inventory,
                                      const std::vector<std::string>& tokens,
                                      int max_seq_len) {
    if (params.head_kind != model::HeadKind::token_cls) {
        throw ConfigError("predict_tags: model has no token-classification head");
    }
    if (tokens.empty()) return {};
    NerSentence s;
    s.tokens = tokens;
    s.tags.assign(tokens.size(), tag_inventory.front());  // placeholder labels
    const auto e = encode_ner(s, vocab, tag_inventory, max_seq_len);
    const auto mb = pack({&e}, true);
    const auto res = model::forward_token_cls(params, mb,
                                              static_cast<int>(tag_inventory.size()));
    const int classes = static_cast<int>(tag_inventory.size());
    std::vector<std::string> tags;
    for (std::size_t row = 0; row < res.logit_positions.size(); ++row) {
        const double* logits = res.logits.data() + row * static_cast<std::size_t>(classes);
        int best = 0;
        for (int c = 1; c < classes; ++c) {
            if (logits[c] > logits[best]) best = c;
        }
        tags.push_back(tag_inventory[static_cast<std::size_t>(best)]);
    }
    // tokens dropped by truncation default to O when available
    const auto o_it = std::find(tag_inventory.begin(), tag_inventory.end(), "O");
    const std::string& filler = o_it != tag_inventory.end() ? *o_it : tag_inventory.front();
    while (tags.size() < tokens.size()) tags.push_back(filler);
    return tags;
}

std::string predict_label(const model::Parameters& params, const tok::Vocab& vocab,
                          const std::vector<std::string>& label_inventory,
                          const std::string& text, int max_seq_len) {
    if (params.head_kind != model::HeadKind::seq_cls) {
        throw ConfigError("predict_label: model has no sequence-classification head");
    }
    const auto e = encode_cls(text, 0, vocab, max_seq_len);
    const auto mb = pack({&e}, false);
    const auto res = model::forward_seq_cls(params, mb,
                                            static_cast<int>(label_inventory.size()));
    int best = 0;
    for (std::size_t c = 1; c < label_inventory.size(); ++c) {
        if (res.logits[c] > res.logits[static_cast<std::size_t>(best)]) {
            best = static_cast<int>(c);
        }
    }
    return label_inventory[static_cast<std::size_t>(best)];
}

}  // namespace smlm::tasks
