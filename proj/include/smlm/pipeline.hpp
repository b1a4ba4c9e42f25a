#pragma once

// Pretraining example construction under two regimes: sentence-pair NSP
// examples with static masking (bert) and single-document packed examples
// with dynamic masking (scholar), plus batching and an on-disk cache.

#include <cstdint>
#include <string>
#include <vector>

#include "smlm/common.hpp"
#include "smlm/corpus.hpp"
#include "smlm/tokenizer.hpp"

namespace smlm::pipeline {

// mlm_labels sentinel: outside any valid vocab id range.
inline constexpr int kIgnoreLabel = -1;

enum class MaskMode { static_mask, dynamic_mask };

struct MaskingPolicy {
    double select_prob = 0.15;
    double mask_frac = 0.80;
    double random_frac = 0.10;
    double keep_frac = 0.10;
    MaskMode mode = MaskMode::dynamic_mask;
    int duplication = 10;  // static mode only

    void validate() const;
};

enum class NspLabel : int { is_next = 0, not_next = 1, none = -1 };

struct PretrainExample {
    std::vector<int> input_ids;    // begins with CLS, SEP-terminated segments
    std::vector<int> segment_ids;  // 0 or 1
    std::vector<int> mlm_labels;   // original ids at selected positions
    NspLabel nsp_label = NspLabel::none;
    std::uint32_t doc_index = 0;  // source document (packing provenance)

    bool operator==(const PretrainExample&) const = default;
};

enum class Regime { bert, scholar };

struct PipelineConfig {
    Regime regime = Regime::scholar;
    int max_seq_len = 512;
    int phase1_len = 128;
    double phase1_fraction = 0.90;  // bert regime only
    double short_seq_prob = 0.1;
    int batch_size = 32;

    void validate() const;
    std::uint64_t hash() const;
};

// Independent per-position selection with select_prob; selected positions
// rewritten MASK/random/keep per policy. CLS/SEP/PAD are never selected.
struct MaskedIds {
    std::vector<int> input_ids;
    std::vector<int> mlm_labels;
};
MaskedIds apply_masking(const std::vector<int>& input_ids, const MaskingPolicy& policy,
                        Rng& rng, const tok::Vocab& vocab);

// NSP sentence-pair stream; policy.mode must be static, and each of the
// `duplication` copies carries a distinct static mask.
std::vector<PretrainExample> build_bert_examples(const corpus::CorpusStore& corpus,
                                                 const tok::Vocab& vocab,
                                                 const PipelineConfig& cfg,
                                                 const MaskingPolicy& policy,
                                                 std::uint64_t seed);

// Single-document packing, no NSP; masking is deferred to batch time.
std::vector<PretrainExample> build_packed_examples(const corpus::CorpusStore& corpus,
                                                   const tok::Vocab& vocab,
                                                   const PipelineConfig& cfg,
                                                   const MaskingPolicy& policy,
                                                   std::uint64_t seed);

struct Batch {
    // rectangular: examples padded to the longest sequence in the batch
    std::vector<PretrainExample> examples;
    std::vector<std::vector<int>> attention_mask;  // 1 real, 0 PAD
    int seq_len = 0;
};

// Dynamic mode applies a fresh mask per draw (seeded by `seed` and the
// example's stream position); static mode passes examples through.
std::vector<Batch> make_batches(const std::vector<PretrainExample>& stream,
                                const PipelineConfig& cfg, const MaskingPolicy& policy,
                                const tok::Vocab& vocab, std::uint64_t seed);

Batch assemble_batch(std::vector<PretrainExample> examples);

// Truncate to a phase-1 length, keeping the leading CLS and re-terminating
// with SEP; labels beyond the cut are dropped.
PretrainExample truncate_example(const PretrainExample& ex, int max_len);

// On-disk cache: magic "SEXC", version, vocab/config hashes (mismatch on
// load is an error), then length-prefixed records.
void save_examples(const std::vector<PretrainExample>& examples,
                   const PipelineConfig& cfg, const tok::Vocab& vocab,
                   const std::string& path);
std::vector<PretrainExample> load_examples(const PipelineConfig& cfg,
                                           const tok::Vocab& vocab,
                                           const std::string& path);

}  // namespace smlm::pipeline
