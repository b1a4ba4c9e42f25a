#include "smlm/optim.hpp"

#include <cmath>

namespace smlm::optim {

void Hyper::validate() const {
    if (lr <= 0.0) throw ConfigError("optim: lr must be positive");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
        throw ConfigError("optim: betas must be in [0, 1)");
    }
    if (eps <= 0.0) throw ConfigError("optim: eps must be positive");
    if (weight_decay < 0.0) throw ConfigError("optim: weight_decay must be >= 0");
    if (trust_clip_lo < 0.0 || trust_clip_hi < trust_clip_lo) {
        throw ConfigError("optim: trust clip range invalid");
    }
}

std::int64_t Schedule::warmup_steps() const {
    return static_cast<std::int64_t>(
        std::llround(warmup_fraction * static_cast<double>(total_steps)));
}

void Schedule::validate() const {
    if (total_steps < 1) throw ConfigError("schedule: total_steps must be positive");
    if (warmup_fraction < 0.0 || warmup_fraction >= 1.0) {
        throw ConfigError("schedule: warmup_fraction must be in [0, 1)");
    }
    if (peak_lr <= 0.0) throw ConfigError("schedule: peak_lr must be positive");
}

double Schedule::lr_at(std::int64_t step) const {
    validate();
    if (step < 0 || step > total_steps) {
        throw ConfigError("schedule: step outside [0, total_steps]");
    }
    const std::int64_t w = warmup_steps();
    if (step <= w) {
        return w == 0 ? peak_lr : peak_lr * static_cast<double>(step) / static_cast<double>(w);
    }
    return peak_lr * static_cast<double>(total_steps - step) /
           static_cast<double>(total_steps - w);
}

bool decay_applies(const std::string& name, const model::Tensor& t) {
    if (t.shape.size() < 2) return false;  // biases, layer-norm scales/offsets
    if (name.size() >= 4 && name.compare(name.size() - 4, 4, "_emb") == 0) return false;
    return true;
}

OptimState OptimState::for_params(const model::Parameters& params) {
    OptimState s;
    params.for_each([&](const std::string&, const model::Tensor& t) {
        s.m.emplace_back(t.v.size(), 0.0);
        s.v.emplace_back(t.v.size(), 0.0);
    });
    return s;
}

void OptimState::save(BinaryWriter& w) const {
    w.u64(static_cast<std::uint64_t>(step));
    w.u64(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) {
        w.f64_vec(m[i]);
        w.f64_vec(v[i]);
    }
}

OptimState OptimState::load(BinaryReader& r) {
    OptimState s;
    s.step = static_cast<std::int64_t>(r.u64());
    const std::uint64_t n = r.u64();
    s.m.resize(n);
    s.v.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        s.m[i] = r.f64_vec();
        s.v[i] = r.f64_vec();
    }
    return s;
}

namespace {

void step_impl(model::Parameters& params, const model::Parameters& grads,
               OptimState& state, const Hyper& hyper, double lr, bool lamb) {
    hyper.validate();
    if (lr < 0.0) throw ConfigError("optim: negative learning rate");
    std::vector<std::pair<std::string, model::Tensor*>> ws;
    std::vector<const model::Tensor*> gs;
    params.for_each(
        [&](const std::string& n, model::Tensor& t) { ws.emplace_back(n, &t); });
    grads.for_each(
        [&](const std::string&, const model::Tensor& t) { gs.push_back(&t); });
    if (ws.size() != gs.size() || ws.size() != state.m.size()) {
        throw ConfigError("optim: parameter/gradient/state layouts disagree");
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));

    for (std::size_t ti = 0; ti < ws.size(); ++ti) {
        auto& w = ws[ti].second->v;
        const auto& g = gs[ti]->v;
        if (g.size() != w.size()) {
            throw ConfigError("optim: gradient tensor shape mismatch at " + ws[ti].first);
        }
        auto& m = state.m[ti];
        auto& v = state.v[ti];
        const double wd =
            decay_applies(ws[ti].first, *ws[ti].second) ? hyper.weight_decay : 0.0;

        if (lamb) {
            // update direction includes the decay term; trust ratio rescales it
            std::vector<double> u(w.size());
            double wn = 0.0, un = 0.0;
            for (std::size_t i = 0; i < w.size(); ++i) {
                m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
                v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                u[i] = mhat / (std::sqrt(vhat) + hyper.eps) + wd * w[i];
                wn += w[i] * w[i];
                un += u[i] * u[i];
            }
            wn = std::sqrt(wn);
            un = std::sqrt(un);
            double trust = 1.0;
            if (wn > 0.0 && un > 0.0) {
                trust = wn / un;
                trust = std::min(std::max(trust, hyper.trust_clip_lo), hyper.trust_clip_hi);
            }
            for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * trust * u[i];
        } else {
            for (std::size_t i = 0; i < w.size(); ++i) {
                m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
                v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                w[i] -= lr * (mhat / (std::sqrt(vhat) + hyper.eps) + wd * w[i]);
            }
        }
        for (double x : w) {
            if (!std::isfinite(x)) {
                throw NumericError("optim: non-finite parameter after update in " +
                                   ws[ti].first);
            }
        }
    }
}

}  // namespace

void lamb_step(model::Parameters& params, const model::Parameters& grads,
               OptimState& state, const Hyper& hyper, double lr) {
    step_impl(params, grads, state, hyper, lr, true);
}

void adamw_step(model::Parameters& params, const model::Parameters& grads,
                OptimState& state, const Hyper& hyper, double lr) {
    step_impl(params, grads, state, hyper, lr, false);
}

}  // namespace smlm::optim
