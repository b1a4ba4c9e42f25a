#pragma once

// Pretraining loop: deterministic batch scheduling, simulated data-parallel
// gradient averaging, LAMB updates on a warmup/decay schedule, JSONL metrics,
// and binary checkpoints that resume training bit-exactly.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "smlm/corpus.hpp"
#include "smlm/model.hpp"
#include "smlm/optim.hpp"
#include "smlm/pipeline.hpp"
#include "smlm/tokenizer.hpp"

namespace smlm::trainer {

struct TrainConfig {
    std::int64_t total_iters = 0;
    int batch_size = 32;
    std::vector<std::int64_t> checkpoint_iters;  // sorted, each <= total_iters
    std::int64_t log_every = 10;
    int workers = 1;
    std::uint64_t seed = 0;
    double warmup_fraction = 0.06;
    std::string out_dir;

    void validate() const;
};

struct Checkpoint {
    std::int64_t iteration = 0;
    model::Parameters params;
    optim::OptimState opt_state;
    std::string rng_state;
    std::uint64_t model_hash = 0;
    std::uint64_t pipeline_hash = 0;
    std::uint64_t vocab_hash = 0;
    std::uint64_t metrics_cursor = 0;  // metric records emitted so far
    std::uint64_t tokens_seen = 0;
};

struct MetricRecord {
    std::int64_t iter = 0;
    double loss = 0.0;
    double lr = 0.0;
    std::uint64_t tokens = 0;
};

// Binary file: magic "SMLM", version u16, then length-prefixed sections
// (header, model config, parameters, optimizer state).
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Fixed-order pairwise-tree mean; all workers must share one layout.
model::Parameters allreduce_gradients(std::vector<model::Parameters> workers);

// Runs exactly total_iters optimizer steps (resuming from the latest valid
// checkpoint found in out_dir, if any). Writes out_dir/metrics.jsonl and
// out_dir/checkpoint_<iter>.bin at each listed iteration; returns the final
// state. A non-finite loss aborts with the last written checkpoint intact.
Checkpoint pretrain(const corpus::CorpusStore& corpus, const tok::Vocab& vocab,
                    const model::ModelConfig& model_cfg,
                    const pipeline::PipelineConfig& pipeline_cfg,
                    const pipeline::MaskingPolicy& policy, const TrainConfig& train_cfg,
                    const optim::Hyper& hyper);

std::vector<MetricRecord> read_metrics(const std::string& path);

// Pads/flattens a pipeline batch; phase-1 steps pass truncate_len > 0 to
// shorten every example first.
model::ModelBatch to_model_batch(const pipeline::Batch& batch, int truncate_len = 0);

double average_seq_len(const std::vector<pipeline::PretrainExample>& stream);

// floor(iters * batch_size * avg_seq_len / corpus_tokens)
std::int64_t epochs_completed(std::int64_t iters, std::int64_t batch_size,
                              double avg_seq_len, std::int64_t corpus_tokens);

std::string checkpoint_path(const std::string& out_dir, std::int64_t iter);

}  // namespace smlm::trainer
