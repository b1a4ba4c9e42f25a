#pragma once

// Bidirectional transformer encoder (post-layer-norm, BERT layout) with
// MLM, NSP, token-classification, and sequence-classification heads.
// Forward and backward are written out by hand; gradients are exact and
// checked against finite differences in the tests.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "smlm/common.hpp"

namespace smlm::model {

enum class Preset { tiny, mini, base, large, xl };

struct ModelConfig {
    int layers = 2;
    int hidden = 128;
    int heads = 2;
    int vocab_size = 1000;
    int max_positions = 512;
    int segment_types = 2;
    double dropout = 0.1;
    bool tie_mlm_weights = true;

    int ffn_dim() const { return 4 * hidden; }
    int head_dim() const { return hidden / heads; }

    static ModelConfig from_preset(Preset p, int vocab_size);
    static Preset preset_by_name(const std::string& name);
    void validate() const;
    std::uint64_t hash() const;
};

struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<std::int64_t> s);
    std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }
    double* data() { return v.data(); }
    const double* data() const { return v.data(); }
};

struct LayerParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // attention projections [H,H],[H]
    Tensor ln1_g, ln1_b;                    // post-attention layer norm
    Tensor w1, b1;                          // FFN expand [F,H],[F]
    Tensor w2, b2;                          // FFN contract [H,F],[H]
    Tensor ln2_g, ln2_b;                    // post-FFN layer norm
};

enum class HeadKind { none, token_cls, seq_cls };

struct Parameters {
    ModelConfig cfg;
    Tensor tok_emb;              // [V,H]
    Tensor pos_emb;              // [P,H]
    Tensor seg_emb;              // [S,H]
    Tensor emb_ln_g, emb_ln_b;
    std::vector<LayerParams> layers;
    // MLM head: transform + layer norm + output bias (decoder tied to
    // tok_emb unless configured off)
    Tensor mlm_w, mlm_b, mlm_ln_g, mlm_ln_b, mlm_out_bias;
    Tensor mlm_dec;  // [V,H], untied mode only
    Tensor nsp_w, nsp_b;  // [2,H],[2]
    // finetuning head, absent during pretraining
    HeadKind head_kind = HeadKind::none;
    int head_classes = 0;
    Tensor head_w, head_b;

    // Fixed-order enumeration of every learnable tensor; the order defines
    // serialization, optimizer-state alignment, and reduction order.
    void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
    void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;
    std::int64_t parameter_count() const;
};

Parameters init_model(const ModelConfig& cfg, std::uint64_t seed);
void attach_head(Parameters& params, HeadKind kind, int num_classes, std::uint64_t seed);

// Closed-form learnable-scalar count including the pretraining heads.
std::int64_t count_params(const ModelConfig& cfg);

// Gradients share the Parameters layout, zero-initialized.
Parameters zeros_like(const Parameters& params);

// Zero-valued parameter set of the given shape, for deserialization.
Parameters allocate_params(const ModelConfig& cfg, HeadKind head_kind = HeadKind::none,
                           int head_classes = 0);

// Flattened rectangular batch. Label conventions: -1 means "no label".
struct ModelBatch {
    int batch = 0;
    int seq = 0;
    std::vector<int> input_ids;     // [B*T]
    std::vector<int> segment_ids;   // [B*T]
    std::vector<int> attention;     // [B*T], 1 real / 0 PAD
    std::vector<int> mlm_labels;    // [B*T]
    std::vector<int> nsp_labels;    // [B] (doubles as seq-cls labels)
    std::vector<int> token_labels;  // [B*T] (token-cls finetuning)
};

enum class LossKind { mlm, mlm_nsp, token_cls, seq_cls };

struct ForwardResult {
    double loss = 0.0;       // the optimized objective
    double mlm_loss = 0.0;   // mean CE over labeled positions
    double nsp_loss = 0.0;   // mean CE over labeled examples
    std::int64_t mlm_positions = 0;
    std::int64_t cls_examples = 0;
    double mlm_ce_sum = 0.0;  // unnormalized sums, for data-parallel weighting
    double cls_ce_sum = 0.0;
    std::vector<double> logits;        // layout depends on the loss kind
    std::vector<int> logit_positions;  // flat b*T+t per MLM logit row
};

// Divisors for distributed loss weighting; 0 means "use this batch's own
// label counts" (the single-process case).
struct LossNorm {
    double mlm_divisor = 0.0;
    double cls_divisor = 0.0;
    double loss_scale = 1.0;
};

// One pass; when `grads` is non-null a full backward pass accumulates into
// it. Dropout is active only when train_mode is set, keyed by dropout_seed.
ForwardResult forward_backward(const Parameters& params, const ModelBatch& batch,
                               LossKind kind, Parameters* grads = nullptr,
                               const LossNorm& norm = {}, bool train_mode = false,
                               std::uint64_t dropout_seed = 0,
                               bool want_logits = false);

// Spec-surface wrappers.
ForwardResult forward_mlm(const Parameters& params, const ModelBatch& batch,
                          bool with_nsp = false);
ForwardResult forward_token_cls(const Parameters& params, const ModelBatch& batch,
                                int num_tags);
ForwardResult forward_seq_cls(const Parameters& params, const ModelBatch& batch,
                              int num_classes);
Parameters backward(const Parameters& params, const ModelBatch& batch, LossKind kind,
                    const LossNorm& norm = {});

// Attention probabilities of the last forward, exposed for the row-sum
// invariant test: [B*heads*T*T] per layer.
std::vector<std::vector<double>> attention_probe(const Parameters& params,
                                                 const ModelBatch& batch);

}  // namespace smlm::model
