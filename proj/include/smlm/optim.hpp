#pragma once

// Optimizers for pretraining (LAMB) and finetuning (AdamW), plus the
// linear warmup / linear decay learning-rate schedule. Optimizer state is
// kept in the tensor enumeration order of Parameters::for_each so it can
// be serialized into checkpoints and restored bit-exactly.

#include <cstdint>
#include <string>
#include <vector>

#include "smlm/common.hpp"
#include "smlm/model.hpp"

namespace smlm::optim {

struct Hyper {
    double lr = 4e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-6;
    double weight_decay = 0.01;
    // trust-ratio clip range, LAMB only
    double trust_clip_lo = 0.0;
    double trust_clip_hi = 10.0;

    void validate() const;
};

// Linear warmup from 0 to peak_lr over warmup_fraction of the run, then
// linear decay back to 0 at total_steps.
struct Schedule {
    std::int64_t total_steps = 0;
    double warmup_fraction = 0.06;
    double peak_lr = 4e-4;

    std::int64_t warmup_steps() const;
    double lr_at(std::int64_t step) const;
    void validate() const;
};

// Weight decay applies to weight matrices only; biases, layer-norm
// parameters, and embedding tables are excluded.
bool decay_applies(const std::string& name, const model::Tensor& t);

struct OptimState {
    std::int64_t step = 0;  // completed update count
    std::vector<std::vector<double>> m;  // first moments, enumeration order
    std::vector<std::vector<double>> v;  // second moments

    static OptimState for_params(const model::Parameters& params);
    void save(BinaryWriter& w) const;
    static OptimState load(BinaryReader& r);
};

// One update each; `lr` is the already-scheduled step size. Gradients must
// share the parameter layout. LAMB scales each tensor's Adam update by the
// clipped trust ratio ||w|| / ||update||; AdamW applies the raw update with
// decoupled weight decay.
void lamb_step(model::Parameters& params, const model::Parameters& grads,
               OptimState& state, const Hyper& hyper, double lr);
void adamw_step(model::Parameters& params, const model::Parameters& grads,
                OptimState& state, const Hyper& hyper, double lr);

}  // namespace smlm::optim
