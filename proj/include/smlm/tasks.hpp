#pragma once

// Labeled task data (CoNLL NER, TSV classification) and finetuning of
// pretrained checkpoints with a fresh task head.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "smlm/model.hpp"
#include "smlm/tokenizer.hpp"
#include "smlm/trainer.hpp"

namespace smlm::tasks {

struct NerSentence {
    std::vector<std::string> tokens;
    std::vector<std::string> tags;  // IOB2 after load normalization
};

struct NerDataset {
    std::vector<NerSentence> sentences;
    std::vector<std::string> tag_inventory;  // distinct tags, first-seen order
    std::size_t token_count() const;
};

struct ClsExample {
    std::string label;
    std::string text;
};

struct ClsDataset {
    std::vector<ClsExample> examples;
    std::vector<std::string> label_inventory;  // distinct labels, file order
};

// Two whitespace-separated columns (token tag), blank line between
// sentences. IOB1 input is normalized to IOB2.
NerDataset load_conll(std::istream& in);
NerDataset load_conll(const std::string& path);
void write_conll(const NerDataset& ds, std::ostream& out);

// Lines of "label<TAB>text".
ClsDataset load_cls_tsv(std::istream& in);
ClsDataset load_cls_tsv(const std::string& path);

struct FinetuneConfig {
    int epochs = 3;
    int batch_size = 16;
    double lr = 3e-5;
    int max_seq_len = 128;
    std::uint64_t seed = 0;
    int runs = 5;

    void validate() const;
};

struct FinetuneResult {
    model::Parameters params;
    std::vector<double> epoch_dev_f1;  // one entry per epoch
    std::int64_t truncated_tokens = 0;  // original tokens dropped by length
    std::uint64_t seed = 0;
};

// Encoder weights come from the checkpoint (which must match the vocabulary
// hash); the task head is freshly initialized. NER uses first-subtoken
// labeling: continuation pieces are ignored by the loss.
FinetuneResult finetune_ner(const trainer::Checkpoint& ckpt, const tok::Vocab& vocab,
                            const NerDataset& train, const NerDataset& dev,
                            const FinetuneConfig& cfg);
FinetuneResult finetune_cls(const trainer::Checkpoint& ckpt, const tok::Vocab& vocab,
                            const ClsDataset& train, const ClsDataset& dev,
                            const FinetuneConfig& cfg);

// cfg.runs independent runs with seeds cfg.seed, cfg.seed+1, ...
std::vector<FinetuneResult> finetune_ner_runs(const trainer::Checkpoint& ckpt,
                                              const tok::Vocab& vocab,
                                              const NerDataset& train,
                                              const NerDataset& dev,
                                              const FinetuneConfig& cfg);
std::vector<FinetuneResult> finetune_cls_runs(const trainer::Checkpoint& ckpt,
                                              const tok::Vocab& vocab,
                                              const ClsDataset& train,
                                              const ClsDataset& dev,
                                              const FinetuneConfig& cfg);

// One IOB2 tag per original token (argmax over first sub-tokens).
std::vector<std::string> predict_tags(const model::Parameters& params,
                                      const tok::Vocab& vocab,
                                      const std::vector<std::string>& tag_inventory,
                                      const std::vector<std::string>& tokens,
                                      int max_seq_len);
std::string predict_label(const model::Parameters& params, const tok::Vocab& vocab,
                          const std::vector<std::string>& label_inventory,
                          const std::string& text, int max_seq_len);

}  // namespace smlm::tasks
