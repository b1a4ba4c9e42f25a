#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "smlm/optim.hpp"

using namespace smlm;
using namespace smlm::model;
using namespace smlm::optim;

namespace {

ModelConfig micro_config() {
    ModelConfig cfg;
    cfg.layers = 1;
    cfg.hidden = 8;
    cfg.heads = 2;
    cfg.vocab_size = 12;
    cfg.max_positions = 8;
    cfg.dropout = 0.0;
    return cfg;
}

std::vector<double> flatten(const Parameters& p) {
    std::vector<double> out;
    p.for_each([&](const std::string&, const Tensor& t) {
        out.insert(out.end(), t.v.begin(), t.v.end());
    });
    return out;
}

Parameters random_grads(const Parameters& p, std::uint64_t seed) {
    Parameters g = zeros_like(p);
    Rng rng(seed);
    g.for_each([&](const std::string&, Tensor& t) {
        for (auto& x : t.v) x = rng.normal();
    });
    return g;
}

}  // namespace

TEST_CASE("schedule: linear warmup then linear decay") {
    Schedule s;
    s.total_steps = 1000;
    s.warmup_fraction = 0.06;
    s.peak_lr = 4e-4;
    CHECK(s.warmup_steps() == 60);
    CHECK(s.lr_at(0) == 0.0);
    CHECK(s.lr_at(60) == doctest::Approx(4e-4).epsilon(1e-12));
    CHECK(s.lr_at(30) == doctest::Approx(2e-4).epsilon(1e-12));
    CHECK(s.lr_at(530) == doctest::Approx(2e-4).epsilon(1e-12));
    CHECK(s.lr_at(1000) == 0.0);
    // monotone up then down
    for (int i = 1; i <= 60; ++i) CHECK(s.lr_at(i) > s.lr_at(i - 1));
    for (int i = 61; i <= 1000; ++i) CHECK(s.lr_at(i) < s.lr_at(i - 1));
    CHECK_THROWS_AS(s.lr_at(-1), ConfigError);
    CHECK_THROWS_AS(s.lr_at(1001), ConfigError);
    Schedule bad = s;
    bad.total_steps = 0;
    CHECK_THROWS_AS(bad.lr_at(0), ConfigError);
}

TEST_CASE("adamw: first two updates match the hand-derived values") {
    auto cfg = micro_config();
    auto p = init_model(cfg, 1);
    std::fill(p.layers[0].w1.v.begin(), p.layers[0].w1.v.end(), 0.0);
    p.layers[0].w1.v[0] = 1.0;
    auto g = zeros_like(p);
    g.layers[0].w1.v[0] = 0.5;
    Hyper h;
    h.eps = 1e-6;
    h.weight_decay = 0.0;
    auto st = OptimState::for_params(p);
    const auto before = flatten(p);

    adamw_step(p, g, st, h, 0.1);
    // m=0.05, v=2.5e-4; bias-corrected: mhat=0.5, vhat=0.25
    // step = 0.1 * 0.5/(0.5+1e-6) = 0.0999998000004
    CHECK(p.layers[0].w1.v[0] == doctest::Approx(0.9000001999996).epsilon(1e-12));

    adamw_step(p, g, st, h, 0.1);
    // the same bias-corrected moments reappear, so the same step is taken
    CHECK(p.layers[0].w1.v[0] == doctest::Approx(0.8000003999992).epsilon(1e-12));

    // nothing else moved: every other gradient was zero and decay was off
    const auto after = flatten(p);
    int moved = 0;
    for (std::size_t i = 0; i < after.size(); ++i) {
        if (after[i] != before[i]) ++moved;
    }
    CHECK(moved == 1);
}

TEST_CASE("adamw: decoupled weight decay acts even with zero gradient") {
    auto cfg = micro_config();
    auto p = init_model(cfg, 2);
    std::fill(p.layers[0].w1.v.begin(), p.layers[0].w1.v.end(), 0.0);
    p.layers[0].w1.v[0] = 1.0;
    const double emb0 = p.tok_emb.v[0];
    const double bias_before = p.layers[0].b1.v[0];
    auto g = zeros_like(p);
    Hyper h;
    h.weight_decay = 0.01;
    auto st = OptimState::for_params(p);
    adamw_step(p, g, st, h, 0.1);
    CHECK(p.layers[0].w1.v[0] == doctest::Approx(1.0 - 0.1 * 0.01).epsilon(1e-12));
    CHECK(p.tok_emb.v[0] == emb0);           // embeddings exempt from decay
    CHECK(p.layers[0].b1.v[0] == bias_before);  // biases exempt
    CHECK(p.layers[0].ln1_g.v[0] == 1.0);       // layer norm exempt
}

TEST_CASE("lamb: trust ratio equals weight norm over update norm") {
    auto cfg = micro_config();
    auto p = init_model(cfg, 3);
    std::fill(p.layers[0].w1.v.begin(), p.layers[0].w1.v.end(), 0.0);
    p.layers[0].w1.v[0] = 3.0;
    p.layers[0].w1.v[1] = 4.0;
    auto g = zeros_like(p);
    g.layers[0].w1.v[0] = 0.3;
    g.layers[0].w1.v[1] = 0.4;
    Hyper h;
    h.eps = 1e-6;
    h.weight_decay = 0.0;
    auto st = OptimState::for_params(p);
    lamb_step(p, g, st, h, 0.01);
    // first step: bias-corrected moments give u_i = g_i / (|g_i| + eps)
    const double u0 = 0.3 / (0.3 + 1e-6);
    const double u1 = 0.4 / (0.4 + 1e-6);
    const double trust = 5.0 / std::sqrt(u0 * u0 + u1 * u1);
    CHECK(trust > 3.5);
    CHECK(trust < 3.6);
    CHECK(p.layers[0].w1.v[0] == doctest::Approx(3.0 - 0.01 * trust * u0).epsilon(1e-12));
    CHECK(p.layers[0].w1.v[1] == doctest::Approx(4.0 - 0.01 * trust * u1).epsilon(1e-12));
}

TEST_CASE("lamb: trust ratio is clipped at the configured ceiling") {
    auto cfg = micro_config();
    auto p = init_model(cfg, 4);
    std::fill(p.layers[0].w1.v.begin(), p.layers[0].w1.v.end(), 0.0);
    p.layers[0].w1.v[0] = 1000.0;  // huge weight, tiny update -> raw ratio >> 10
    auto g = zeros_like(p);
    g.layers[0].w1.v[0] = 0.5;
    Hyper h;
    h.eps = 1e-6;
    h.weight_decay = 0.0;
    auto st = OptimState::for_params(p);
    lamb_step(p, g, st, h, 0.01);
    const double u0 = 0.5 / (0.5 + 1e-6);
    CHECK(p.layers[0].w1.v[0] == doctest::Approx(1000.0 - 0.01 * 10.0 * u0).epsilon(1e-12));
}

TEST_CASE("lamb with unit trust clip reproduces adamw exactly") {
    auto cfg = micro_config();
    auto a = init_model(cfg, 5);
    auto b = a;
    Hyper ha;  // adamw hyper
    ha.weight_decay = 0.01;
    Hyper hl = ha;  // lamb hyper with the trust ratio pinned to 1
    hl.trust_clip_lo = 1.0;
    hl.trust_clip_hi = 1.0;
    auto sa = OptimState::for_params(a);
    auto sb = OptimState::for_params(b);
    for (int step = 0; step < 5; ++step) {
        auto g = random_grads(a, 100 + static_cast<std::uint64_t>(step));
        adamw_step(a, g, sa, ha, 1e-3);
        lamb_step(b, g, sb, hl, 1e-3);
    }
    CHECK(flatten(a) == flatten(b));
}

TEST_CASE("optimizer state round-trips through serialization") {
    auto cfg = micro_config();
    auto p = init_model(cfg, 6);
    Hyper h;
    auto st = OptimState::for_params(p);
    for (int step = 0; step < 3; ++step) {
        lamb_step(p, random_grads(p, 7 + static_cast<std::uint64_t>(step)), st, h, 1e-3);
    }
    std::ostringstream os;
    {
        BinaryWriter w(os);
        st.save(w);
    }
    auto p2 = p;
    std::istringstream is(os.str());
    BinaryReader r(is);
    auto st2 = OptimState::load(r);
    CHECK(st2.step == st.step);
    for (int step = 3; step < 6; ++step) {
        auto g = random_grads(p, 7 + static_cast<std::uint64_t>(step));
        lamb_step(p, g, st, h, 1e-3);
        lamb_step(p2, g, st2, h, 1e-3);
    }
    CHECK(flatten(p) == flatten(p2));
}

TEST_CASE("lamb drives a convex quadratic to its minimum") {
    auto cfg = micro_config();
    auto p = init_model(cfg, 8);
    // f(w) = sum over one tensor of (w - t)^2, everything else untouched
    std::vector<double> target(p.layers[0].w1.v.size());
    Rng rng(9);
    for (auto& t : target) t = 0.5 * rng.normal();
    auto objective = [&]() {
        double s = 0.0;
        for (std::size_t i = 0; i < target.size(); ++i) {
            const double d = p.layers[0].w1.v[i] - target[i];
            s += d * d;
        }
        return s;
    };
    Hyper h;
    h.weight_decay = 0.0;
    Schedule sched;
    sched.total_steps = 400;
    sched.peak_lr = 0.05;
    auto st = OptimState::for_params(p);
    const double start = objective();
    double prev = start;
    int increases = 0;
    for (std::int64_t step = 1; step <= sched.total_steps; ++step) {
        auto g = zeros_like(p);
        for (std::size_t i = 0; i < target.size(); ++i) {
            g.layers[0].w1.v[i] = 2.0 * (p.layers[0].w1.v[i] - target[i]);
        }
        lamb_step(p, g, st, h, sched.lr_at(step));
        const double cur = objective();
        if (cur > prev + 1e-12) ++increases;
        prev = cur;
    }
    CHECK(objective() < 1e-4 * start);
    CHECK(increases < 40);  // overwhelmingly monotone descent
}

TEST_CASE("hyperparameter validation") {
    Hyper h;
    h.lr = 0.0;
    auto cfg = micro_config();
    auto p = init_model(cfg, 10);
    auto g = zeros_like(p);
    auto st = OptimState::for_params(p);
    CHECK_THROWS_AS(adamw_step(p, g, st, h, 1e-3), ConfigError);
    h = Hyper{};
    h.beta2 = 1.0;
    CHECK_THROWS_AS(lamb_step(p, g, st, h, 1e-3), ConfigError);
    h = Hyper{};
    h.trust_clip_hi = -1.0;
    CHECK_THROWS_AS(lamb_step(p, g, st, h, 1e-3), ConfigError);
}
