#include "smlm/model.hpp"

#include <algorithm>
#include <cmath>

namespace smlm::model {

namespace {
constexpr double kLnEps = 1e-12;
constexpr double kInitStd = 0.02;
constexpr double kInitTruncStds = 2.0;
constexpr double kGeluC = 0.044715;
const double kGeluK = std::sqrt(2.0 / M_PI);
}  // namespace

// ---------------------------------------------------------------------------
// Config / presets

ModelConfig ModelConfig::from_preset(Preset p, int vocab_size) {
    ModelConfig cfg;
    switch (p) {
        case Preset::tiny:
            cfg.layers = 2; cfg.hidden = 128; cfg.heads = 2;
            break;
        case Preset::mini:
            cfg.layers = 4; cfg.hidden = 256; cfg.heads = 4;
            break;
        case Preset::base:
            cfg.layers = 12; cfg.hidden = 768; cfg.heads = 12;
            break;
        case Preset::large:
            cfg.layers = 24; cfg.hidden = 1024; cfg.heads = 16;
            break;
        case Preset::xl:
            cfg.layers = 36; cfg.hidden = 1280; cfg.heads = 20;
            break;
    }
    cfg.vocab_size = vocab_size;
    cfg.validate();
    return cfg;
}

Preset ModelConfig::preset_by_name(const std::string& name) {
    if (name == "tiny") return Preset::tiny;
    if (name == "mini") return Preset::mini;
    if (name == "base") return Preset::base;
    if (name == "large") return Preset::large;
    if (name == "xl") return Preset::xl;
    throw ConfigError("unknown model preset: " + name);
}

void ModelConfig::validate() const {
    if (layers < 1 || hidden < 1 || heads < 1) {
        throw ConfigError("model: layers/hidden/heads must be positive");
    }
    if (hidden % heads != 0) {
        throw ConfigError("model: hidden must be divisible by heads");
    }
    if (vocab_size <= 5) throw ConfigError("model: vocab_size too small");
    if (max_positions < 1 || segment_types < 1) {
        throw ConfigError("model: max_positions/segment_types must be positive");
    }
    if (dropout < 0.0 || dropout >= 1.0) {
        throw ConfigError("model: dropout must be in [0, 1)");
    }
}

std::uint64_t ModelConfig::hash() const {
    std::string repr = std::to_string(layers) + '|' + std::to_string(hidden) + '|' +
                       std::to_string(heads) + '|' + std::to_string(vocab_size) + '|' +
                       std::to_string(max_positions) + '|' +
                       std::to_string(segment_types) + '|' + std::to_string(dropout) +
                       '|' + std::to_string(tie_mlm_weights ? 1 : 0);
    return fnv1a(repr);
}

// ---------------------------------------------------------------------------
// Tensors and parameter layout

Tensor::Tensor(std::vector<std::int64_t> s) : shape(std::move(s)) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    v.assign(static_cast<std::size_t>(n), 0.0);
}

template <typename Self, typename Fn>
static void visit_tensors(Self& p, Fn&& fn) {
    fn("tok_emb", p.tok_emb);
    fn("pos_emb", p.pos_emb);
    fn("seg_emb", p.seg_emb);
    fn("emb_ln_g", p.emb_ln_g);
    fn("emb_ln_b", p.emb_ln_b);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        auto& L = p.layers[l];
        const std::string pre = "layer" + std::to_string(l) + ".";
        fn(pre + "wq", L.wq); fn(pre + "bq", L.bq);
        fn(pre + "wk", L.wk); fn(pre + "bk", L.bk);
        fn(pre + "wv", L.wv); fn(pre + "bv", L.bv);
        fn(pre + "wo", L.wo); fn(pre + "bo", L.bo);
        fn(pre + "ln1_g", L.ln1_g); fn(pre + "ln1_b", L.ln1_b);
        fn(pre + "w1", L.w1); fn(pre + "b1", L.b1);
        fn(pre + "w2", L.w2); fn(pre + "b2", L.b2);
        fn(pre + "ln2_g", L.ln2_g); fn(pre + "ln2_b", L.ln2_b);
    }
    fn("mlm_w", p.mlm_w);
    fn("mlm_b", p.mlm_b);
    fn("mlm_ln_g", p.mlm_ln_g);
    fn("mlm_ln_b", p.mlm_ln_b);
    fn("mlm_out_bias", p.mlm_out_bias);
    if (!p.cfg.tie_mlm_weights) fn("mlm_dec", p.mlm_dec);
    fn("nsp_w", p.nsp_w);
    fn("nsp_b", p.nsp_b);
    if (p.head_kind != HeadKind::none) {
        fn("head_w", p.head_w);
        fn("head_b", p.head_b);
    }
}

void Parameters::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
    visit_tensors(*this, fn);
}

void Parameters::for_each(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
    visit_tensors(*this, fn);
}

std::int64_t Parameters::parameter_count() const {
    std::int64_t n = 0;
    for_each([&](const std::string&, const Tensor& t) { n += t.numel(); });
    return n;
}

static void allocate(Parameters& p) {
    const auto& c = p.cfg;
    const std::int64_t H = c.hidden, V = c.vocab_size, F = c.ffn_dim();
    p.tok_emb = Tensor({V, H});
    p.pos_emb = Tensor({c.max_positions, H});
    p.seg_emb = Tensor({c.segment_types, H});
    p.emb_ln_g = Tensor({H});
    p.emb_ln_b = Tensor({H});
    p.layers.resize(static_cast<std::size_t>(c.layers));
    for (auto& L : p.layers) {
        L.wq = Tensor({H, H}); L.bq = Tensor({H});
        L.wk = Tensor({H, H}); L.bk = Tensor({H});
        L.wv = Tensor({H, H}); L.bv = Tensor({H});
        L.wo = Tensor({H, H}); L.bo = Tensor({H});
        L.ln1_g = Tensor({H}); L.ln1_b = Tensor({H});
        L.w1 = Tensor({F, H}); L.b1 = Tensor({F});
        L.w2 = Tensor({H, F}); L.b2 = Tensor({H});
        L.ln2_g = Tensor({H}); L.ln2_b = Tensor({H});
    }
    p.mlm_w = Tensor({H, H});
    p.mlm_b = Tensor({H});
    p.mlm_ln_g = Tensor({H});
    p.mlm_ln_b = Tensor({H});
    p.mlm_out_bias = Tensor({V});
    if (!c.tie_mlm_weights) p.mlm_dec = Tensor({V, H});
    p.nsp_w = Tensor({2, H});
    p.nsp_b = Tensor({2});
    if (p.head_kind != HeadKind::none) {
        p.head_w = Tensor({p.head_classes, H});
        p.head_b = Tensor({p.head_classes});
    }
}

Parameters init_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Parameters p;
    p.cfg = cfg;
    allocate(p);
    Rng rng(mix_seed(seed, 0x1417));
    p.for_each([&](const std::string& name, Tensor& t) {
        if (name.size() >= 2 && name.compare(name.size() - 2, 2, "_g") == 0) {
            std::fill(t.v.begin(), t.v.end(), 1.0);  // layer-norm scales
        } else if (t.shape.size() == 1) {
            std::fill(t.v.begin(), t.v.end(), 0.0);  // biases and offsets
        } else {
            for (auto& x : t.v) x = rng.truncated_normal(kInitStd, kInitTruncStds);
        }
    });
    return p;
}

void attach_head(Parameters& params, HeadKind kind, int num_classes, std::uint64_t seed) {
    if (kind == HeadKind::none) throw ConfigError("attach_head: head kind required");
    if (num_classes < 2) throw ConfigError("attach_head: need at least 2 classes");
    params.head_kind = kind;
    params.head_classes = num_classes;
    params.head_w = Tensor({num_classes, params.cfg.hidden});
    params.head_b = Tensor({num_classes});
    Rng rng(mix_seed(seed, 0x4ead));
    for (auto& x : params.head_w.v) x = rng.truncated_normal(kInitStd, kInitTruncStds);
}

std::int64_t count_params(const ModelConfig& cfg) {
    cfg.validate();
    const std::int64_t H = cfg.hidden, V = cfg.vocab_size, F = cfg.ffn_dim();
    const std::int64_t emb =
        V * H + cfg.max_positions * H + cfg.segment_types * H + 2 * H;
    const std::int64_t per_layer = 4 * (H * H + H)      // attention projections
                                   + (F * H + F)        // FFN expand
                                   + (H * F + H)        // FFN contract
                                   + 4 * H;             // two layer norms
    const std::int64_t mlm =
        H * H + H + 2 * H + V + (cfg.tie_mlm_weights ? 0 : V * H);
    const std::int64_t nsp = 2 * H + 2;
    return emb + cfg.layers * per_layer + mlm + nsp;
}

Parameters zeros_like(const Parameters& params) {
    Parameters g;
    g.cfg = params.cfg;
    g.head_kind = params.head_kind;
    g.head_classes = params.head_classes;
    allocate(g);
    return g;
}

Parameters allocate_params(const ModelConfig& cfg, HeadKind head_kind, int head_classes) {
    cfg.validate();
    Parameters p;
    p.cfg = cfg;
    p.head_kind = head_kind;
    p.head_classes = head_classes;
    allocate(p);
    return p;
}

// ---------------------------------------------------------------------------
// Primitive ops

namespace {

// Y[M,N] = X[M,K] @ W[N,K]^T + b[N]
void linear_forward(const double* x, const double* w, const double* b, double* y,
                    std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* xi = x + i * k;
        double* yi = y + i * n;
        for (std::int64_t o = 0; o < n; ++o) {
            const double* wo = w + o * k;
            double acc = b ? b[o] : 0.0;
            for (std::int64_t j = 0; j < k; ++j) acc += xi[j] * wo[j];
            yi[o] = acc;
        }
    }
}

// dX[M,K] += dY @ W ; dW[N,K] += dY^T @ X ; db[N] += colsum(dY)
void linear_backward(const double* x, const double* w, const double* dy, double* dx,
                     double* dw, double* db, std::int64_t m, std::int64_t k,
                     std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* dyi = dy + i * n;
        const double* xi = x + i * k;
        if (dx) {
            double* dxi = dx + i * k;
            for (std::int64_t o = 0; o < n; ++o) {
                const double d = dyi[o];
                if (d == 0.0) continue;
                const double* wo = w + o * k;
                for (std::int64_t j = 0; j < k; ++j) dxi[j] += d * wo[j];
            }
        }
        for (std::int64_t o = 0; o < n; ++o) {
            const double d = dyi[o];
            if (d == 0.0) continue;
            if (db) db[o] += d;
            double* dwo = dw + o * k;
            for (std::int64_t j = 0; j < k; ++j) dwo[j] += d * xi[j];
        }
    }
}

struct LnCache {
    std::vector<double> mean, rstd;
};

void ln_forward(const double* x, const double* g, const double* b, double* y,
                std::int64_t rows, std::int64_t width, LnCache& cache) {
    cache.mean.resize(static_cast<std::size_t>(rows));
    cache.rstd.resize(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = x + r * width;
        double mean = 0.0;
        for (std::int64_t h = 0; h < width; ++h) mean += xr[h];
        mean /= static_cast<double>(width);
        double var = 0.0;
        for (std::int64_t h = 0; h < width; ++h) {
            const double d = xr[h] - mean;
            var += d * d;
        }
        var /= static_cast<double>(width);
        const double rstd = 1.0 / std::sqrt(var + kLnEps);
        cache.mean[static_cast<std::size_t>(r)] = mean;
        cache.rstd[static_cast<std::size_t>(r)] = rstd;
        double* yr = y + r * width;
        for (std::int64_t h = 0; h < width; ++h) {
            yr[h] = g[h] * (xr[h] - mean) * rstd + b[h];
        }
    }
}

// dx is overwritten; dg/db accumulate.
void ln_backward(const double* x, const double* g, const LnCache& cache,
                 const double* dy, double* dx, double* dg, double* db,
                 std::int64_t rows, std::int64_t width) {
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = x + r * width;
        const double* dyr = dy + r * width;
        double* dxr = dx + r * width;
        const double mean = cache.mean[static_cast<std::size_t>(r)];
        const double rstd = cache.rstd[static_cast<std::size_t>(r)];
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (std::int64_t h = 0; h < width; ++h) {
            const double xhat = (xr[h] - mean) * rstd;
            const double dxhat = dyr[h] * g[h];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dg[h] += dyr[h] * xhat;
            db[h] += dyr[h];
        }
        const double inv_w = 1.0 / static_cast<double>(width);
        for (std::int64_t h = 0; h < width; ++h) {
            const double xhat = (xr[h] - mean) * rstd;
            const double dxhat = dyr[h] * g[h];
            dxr[h] = rstd * (dxhat - inv_w * sum_dxhat - xhat * inv_w * sum_dxhat_xhat);
        }
    }
}

double gelu(double x) {
    const double u = kGeluK * (x + kGeluC * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
    const double u = kGeluK * (x + kGeluC * x * x * x);
    const double t = std::tanh(u);
    const double du = kGeluK * (1.0 + 3.0 * kGeluC * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

void softmax_row(double* z, std::int64_t n) {
    double mx = z[0];
    for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, z[i]);
    double sum = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        z[i] = std::exp(z[i] - mx);
        sum += z[i];
    }
    for (std::int64_t i = 0; i < n; ++i) z[i] /= sum;
}

// cross-entropy of one row; returns loss, writes softmax into probs
double ce_row(const double* logits, std::int64_t n, int label, double* probs) {
    double mx = logits[0];
    for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, logits[i]);
    double sum = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        probs[i] = std::exp(logits[i] - mx);
        sum += probs[i];
    }
    for (std::int64_t i = 0; i < n; ++i) probs[i] /= sum;
    const double p = probs[label];
    return -std::log(std::max(p, 1e-300));
}

struct Dropout {
    std::vector<double> mask;  // 0 or 1/(1-p); empty when inactive
    void apply(std::vector<double>& x, double p, bool active, Rng& rng) {
        if (!active || p <= 0.0) return;
        mask.resize(x.size());
        const double scale = 1.0 / (1.0 - p);
        for (std::size_t i = 0; i < x.size(); ++i) {
            mask[i] = rng.bernoulli(p) ? 0.0 : scale;
            x[i] *= mask[i];
        }
    }
    void backward(std::vector<double>& dx) const {
        if (mask.empty()) return;
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= mask[i];
    }
};

struct LayerCache {
    std::vector<double> x_in, q, k, v, att, ctx, attn_proj, resid1, x_mid;
    std::vector<double> ffn_pre, ffn_act, ffn_proj, resid2, x_out;
    Dropout drop1, drop2;
    LnCache ln1, ln2;
};

struct ForwardCache {
    std::vector<double> emb_sum, x0;
    Dropout drop0;
    LnCache ln0;
    std::vector<LayerCache> layers;
};

void check_finite(const Parameters& grads) {
    grads.for_each([](const std::string& name, const Tensor& t) {
        for (double x : t.v) {
            if (!std::isfinite(x)) {
                throw NumericError("non-finite gradient in tensor " + name);
            }
        }
    });
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward / backward

static void validate_batch(const Parameters& p, const ModelBatch& batch) {
    const auto bt = static_cast<std::size_t>(batch.batch) *
                    static_cast<std::size_t>(batch.seq);
    if (batch.batch < 1 || batch.seq < 1) throw ConfigError("batch: empty");
    if (batch.seq > p.cfg.max_positions) {
        throw ConfigError("batch: sequence longer than max_positions");
    }
    if (batch.input_ids.size() != bt || batch.segment_ids.size() != bt ||
        batch.attention.size() != bt) {
        throw ConfigError("batch: field shapes inconsistent with batch/seq");
    }
    for (int id : batch.input_ids) {
        if (id < 0 || id >= p.cfg.vocab_size) throw DataError("batch: token id out of range");
    }
    for (int s : batch.segment_ids) {
        if (s < 0 || s >= p.cfg.segment_types) throw DataError("batch: segment id out of range");
    }
}

ForwardResult forward_backward(const Parameters& params, const ModelBatch& batch,
                               LossKind kind, Parameters* grads, const LossNorm& norm,
                               bool train_mode, std::uint64_t dropout_seed,
                               bool want_logits) {
    validate_batch(params, batch);
    const auto& cfg = params.cfg;
    const std::int64_t B = batch.batch, T = batch.seq, H = cfg.hidden;
    const std::int64_t BT = B * T, F = cfg.ffn_dim();
    const std::int64_t nh = cfg.heads, dh = cfg.head_dim();
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Rng drop_rng(mix_seed(dropout_seed, 0xd409));
    const bool dropping = train_mode && cfg.dropout > 0.0;

    ForwardCache fc;
    fc.layers.resize(static_cast<std::size_t>(cfg.layers));

    // --- embeddings
    fc.emb_sum.assign(static_cast<std::size_t>(BT * H), 0.0);
    for (std::int64_t i = 0; i < BT; ++i) {
        const std::int64_t t = i % T;
        const double* te = params.tok_emb.data() +
                           static_cast<std::int64_t>(batch.input_ids[i]) * H;
        const double* pe = params.pos_emb.data() + t * H;
        const double* se = params.seg_emb.data() +
                           static_cast<std::int64_t>(batch.segment_ids[i]) * H;
        double* out = fc.emb_sum.data() + i * H;
        for (std::int64_t h = 0; h < H; ++h) out[h] = te[h] + pe[h] + se[h];
    }
    fc.x0.resize(fc.emb_sum.size());
    ln_forward(fc.emb_sum.data(), params.emb_ln_g.data(), params.emb_ln_b.data(),
               fc.x0.data(), BT, H, fc.ln0);
    fc.drop0.apply(fc.x0, cfg.dropout, dropping, drop_rng);

    // --- encoder layers
    const std::vector<double>* x = &fc.x0;
    for (std::int64_t l = 0; l < cfg.layers; ++l) {
        auto& L = params.layers[static_cast<std::size_t>(l)];
        auto& c = fc.layers[static_cast<std::size_t>(l)];
        c.x_in = *x;
        const std::size_t bth = static_cast<std::size_t>(BT * H);
        c.q.assign(bth, 0.0);
        c.k.assign(bth, 0.0);
        c.v.assign(bth, 0.0);
        linear_forward(c.x_in.data(), L.wq.data(), L.bq.data(), c.q.data(), BT, H, H);
        linear_forward(c.x_in.data(), L.wk.data(), L.bk.data(), c.k.data(), BT, H, H);
        linear_forward(c.x_in.data(), L.wv.data(), L.bv.data(), c.v.data(), BT, H, H);

        c.att.assign(static_cast<std::size_t>(B * nh * T * T), 0.0);
        c.ctx.assign(bth, 0.0);
        for (std::int64_t b = 0; b < B; ++b) {
            for (std::int64_t h = 0; h < nh; ++h) {
                for (std::int64_t t1 = 0; t1 < T; ++t1) {
                    double* row = c.att.data() + ((b * nh + h) * T + t1) * T;
                    const double* qv = c.q.data() + (b * T + t1) * H + h * dh;
                    double mx = -1e300;
                    for (std::int64_t t2 = 0; t2 < T; ++t2) {
                        if (batch.attention[static_cast<std::size_t>(b * T + t2)] == 0) {
                            row[t2] = -1e300;
                            continue;
                        }
                        const double* kv = c.k.data() + (b * T + t2) * H + h * dh;
                        double s = 0.0;
                        for (std::int64_t d = 0; d < dh; ++d) s += qv[d] * kv[d];
                        row[t2] = s * att_scale;
                        mx = std::max(mx, row[t2]);
                    }
                    double sum = 0.0;
                    for (std::int64_t t2 = 0; t2 < T; ++t2) {
                        if (row[t2] <= -1e299) {
                            row[t2] = 0.0;
                        } else {
                            row[t2] = std::exp(row[t2] - mx);
                            sum += row[t2];
                        }
                    }
                    // at least the example's own CLS is always attendable
                    for (std::int64_t t2 = 0; t2 < T; ++t2) row[t2] /= sum;
                    double* ctx = c.ctx.data() + (b * T + t1) * H + h * dh;
                    for (std::int64_t t2 = 0; t2 < T; ++t2) {
                        const double pr = row[t2];
                        if (pr == 0.0) continue;
                        const double* vv = c.v.data() + (b * T + t2) * H + h * dh;
                        for (std::int64_t d = 0; d < dh; ++d) ctx[d] += pr * vv[d];
                    }
                }
            }
        }

        c.attn_proj.assign(bth, 0.0);
        linear_forward(c.ctx.data(), L.wo.data(), L.bo.data(), c.attn_proj.data(), BT, H,
                       H);
        c.drop1.apply(c.attn_proj, cfg.dropout, dropping, drop_rng);
        c.resid1.resize(bth);
        for (std::size_t i = 0; i < bth; ++i) c.resid1[i] = c.x_in[i] + c.attn_proj[i];
        c.x_mid.resize(bth);
        ln_forward(c.resid1.data(), L.ln1_g.data(), L.ln1_b.data(), c.x_mid.data(), BT, H,
                   c.ln1);

        c.ffn_pre.assign(static_cast<std::size_t>(BT * F), 0.0);
        linear_forward(c.x_mid.data(), L.w1.data(), L.b1.data(), c.ffn_pre.data(), BT, H,
                       F);
        c.ffn_act.resize(c.ffn_pre.size());
        for (std::size_t i = 0; i < c.ffn_pre.size(); ++i) {
            c.ffn_act[i] = gelu(c.ffn_pre[i]);
        }
        c.ffn_proj.assign(bth, 0.0);
        linear_forward(c.ffn_act.data(), L.w2.data(), L.b2.data(), c.ffn_proj.data(), BT,
                       F, H);
        c.drop2.apply(c.ffn_proj, cfg.dropout, dropping, drop_rng);
        c.resid2.resize(bth);
        for (std::size_t i = 0; i < bth; ++i) c.resid2[i] = c.x_mid[i] + c.ffn_proj[i];
        c.x_out.resize(bth);
        ln_forward(c.resid2.data(), L.ln2_g.data(), L.ln2_b.data(), c.x_out.data(), BT, H,
                   c.ln2);
        x = &c.x_out;
    }
    const std::vector<double>& enc = *x;

    // --- heads
    ForwardResult res;
    const double* dec_w =
        cfg.tie_mlm_weights ? params.tok_emb.data() : params.mlm_dec.data();
    const std::int64_t V = cfg.vocab_size;

    // gradient buffer for the encoder output
    std::vector<double> d_enc;
    if (grads) d_enc.assign(enc.size(), 0.0);

    // MLM branch caches (needed again in backward)
    std::vector<std::int64_t> mlm_pos;
    std::vector<double> mlm_gathered, mlm_pre, mlm_act, mlm_norm, mlm_dlogits;
    LnCache mlm_ln_cache;

    if (kind == LossKind::mlm || kind == LossKind::mlm_nsp) {
        if (batch.mlm_labels.size() != static_cast<std::size_t>(BT)) {
            throw ConfigError("batch: mlm_labels missing");
        }
        for (std::int64_t i = 0; i < BT; ++i) {
            if (batch.mlm_labels[static_cast<std::size_t>(i)] >= 0) mlm_pos.push_back(i);
        }
        const std::int64_t np = static_cast<std::int64_t>(mlm_pos.size());
        if (np == 0 && norm.mlm_divisor <= 0.0) {
            // a lone batch cannot define a loss; a shard under an explicit
            // global divisor legitimately contributes nothing
            throw NumericError("forward_mlm: batch has zero labeled positions");
        }
        mlm_gathered.resize(static_cast<std::size_t>(np * H));
        for (std::int64_t r = 0; r < np; ++r) {
            std::copy_n(enc.data() + mlm_pos[static_cast<std::size_t>(r)] * H, H,
                        mlm_gathered.data() + r * H);
        }
        mlm_pre.assign(static_cast<std::size_t>(np * H), 0.0);
        linear_forward(mlm_gathered.data(), params.mlm_w.data(), params.mlm_b.data(),
                       mlm_pre.data(), np, H, H);
        mlm_act.resize(mlm_pre.size());
        for (std::size_t i = 0; i < mlm_pre.size(); ++i) mlm_act[i] = gelu(mlm_pre[i]);
        mlm_norm.resize(mlm_act.size());
        ln_forward(mlm_act.data(), params.mlm_ln_g.data(), params.mlm_ln_b.data(),
                   mlm_norm.data(), np, H, mlm_ln_cache);

        std::vector<double> logits(static_cast<std::size_t>(V));
        std::vector<double> probs(static_cast<std::size_t>(V));
        if (grads) mlm_dlogits.assign(static_cast<std::size_t>(np * V), 0.0);
        const double divisor =
            norm.mlm_divisor > 0.0 ? norm.mlm_divisor : static_cast<double>(np);
        for (std::int64_t r = 0; r < np; ++r) {
            linear_forward(mlm_norm.data() + r * H, dec_w, params.mlm_out_bias.data(),
                           logits.data(), 1, H, V);
            const int label =
                batch.mlm_labels[static_cast<std::size_t>(mlm_pos[static_cast<std::size_t>(r)])];
            res.mlm_ce_sum += ce_row(logits.data(), V, label, probs.data());
            if (want_logits) {
                res.logits.insert(res.logits.end(), logits.begin(), logits.end());
                res.logit_positions.push_back(mlm_pos[static_cast<std::size_t>(r)]);
            }
            if (grads) {
                double* dl = mlm_dlogits.data() + r * V;
                const double w = norm.loss_scale / divisor;
                for (std::int64_t j = 0; j < V; ++j) dl[j] = probs[j] * w;
                dl[label] -= w;
            }
        }
        res.mlm_positions = np;
        res.mlm_loss = np > 0 ? res.mlm_ce_sum / static_cast<double>(np) : 0.0;
        res.loss += norm.loss_scale * res.mlm_ce_sum / divisor;
    }

    // classifier branch: NSP (pretraining) or a finetuning head
    std::vector<double> cls_in, cls_dlogits;
    std::vector<std::int64_t> cls_rows;  // encoder row per classifier row
    const Tensor* cls_w = nullptr;
    const Tensor* cls_b = nullptr;
    std::int64_t n_cls = 0;

    if (kind == LossKind::mlm_nsp || kind == LossKind::seq_cls) {
        if (batch.nsp_labels.size() != static_cast<std::size_t>(B)) {
            throw ConfigError("batch: per-example labels missing");
        }
        if (kind == LossKind::mlm_nsp) {
            cls_w = &params.nsp_w;
            cls_b = &params.nsp_b;
            n_cls = 2;
        } else {
            if (params.head_kind != HeadKind::seq_cls) {
                throw ConfigError("forward_seq_cls: no sequence head attached");
            }
            cls_w = &params.head_w;
            cls_b = &params.head_b;
            n_cls = params.head_classes;
        }
        for (std::int64_t b = 0; b < B; ++b) {
            if (batch.nsp_labels[static_cast<std::size_t>(b)] >= 0) {
                cls_rows.push_back(b * T);  // CLS position representation
            }
        }
    } else if (kind == LossKind::token_cls) {
        if (params.head_kind != HeadKind::token_cls) {
            throw ConfigError("forward_token_cls: no token head attached");
        }
        if (batch.token_labels.size() != static_cast<std::size_t>(BT)) {
            throw ConfigError("batch: token_labels missing");
        }
        cls_w = &params.head_w;
        cls_b = &params.head_b;
        n_cls = params.head_classes;
        for (std::int64_t i = 0; i < BT; ++i) {
            if (batch.token_labels[static_cast<std::size_t>(i)] >= 0) cls_rows.push_back(i);
        }
    }

    if (cls_w) {
        const std::int64_t nr = static_cast<std::int64_t>(cls_rows.size());
        if (nr == 0 && norm.cls_divisor <= 0.0) {
            throw NumericError("forward: batch has zero labeled examples");
        }
        cls_in.resize(static_cast<std::size_t>(nr * H));
        for (std::int64_t r = 0; r < nr; ++r) {
            std::copy_n(enc.data() + cls_rows[static_cast<std::size_t>(r)] * H, H,
                        cls_in.data() + r * H);
        }
        std::vector<double> logits(static_cast<std::size_t>(nr * n_cls), 0.0);
        linear_forward(cls_in.data(), cls_w->data(), cls_b->data(), logits.data(), nr, H,
                       n_cls);
        std::vector<double> probs(static_cast<std::size_t>(n_cls));
        if (grads) cls_dlogits.assign(logits.size(), 0.0);
        const double divisor =
            norm.cls_divisor > 0.0 ? norm.cls_divisor : static_cast<double>(nr);
        for (std::int64_t r = 0; r < nr; ++r) {
            int label;
            if (kind == LossKind::token_cls) {
                label = batch.token_labels[static_cast<std::size_t>(
                    cls_rows[static_cast<std::size_t>(r)])];
            } else {
                label = batch.nsp_labels[static_cast<std::size_t>(
                    cls_rows[static_cast<std::size_t>(r)] / T)];
            }
            if (label < 0 || label >= n_cls) throw DataError("forward: label out of range");
            res.cls_ce_sum += ce_row(logits.data() + r * n_cls, n_cls, label, probs.data());
            if (grads) {
                double* dl = cls_dlogits.data() + r * n_cls;
                const double w = norm.loss_scale / divisor;
                for (std::int64_t j = 0; j < n_cls; ++j) dl[j] = probs[j] * w;
                dl[label] -= w;
            }
        }
        if (want_logits && kind != LossKind::mlm && kind != LossKind::mlm_nsp) {
            res.logits = logits;
            for (auto rrow : cls_rows) res.logit_positions.push_back(rrow);
        } else if (want_logits && kind == LossKind::mlm_nsp) {
            // NSP logits appended after the MLM block
            res.logits.insert(res.logits.end(), logits.begin(), logits.end());
        }
        res.cls_examples = nr;
        res.nsp_loss = nr > 0 ? res.cls_ce_sum / static_cast<double>(nr) : 0.0;
        res.loss += norm.loss_scale * res.cls_ce_sum / divisor;
    }

    if (!std::isfinite(res.loss)) throw NumericError("forward: non-finite loss");
    if (!grads) return res;

    // ------------------------------------------------------------------
    // Backward

    // MLM head
    if (!mlm_pos.empty()) {
        const std::int64_t np = static_cast<std::int64_t>(mlm_pos.size());
        std::vector<double> d_norm(static_cast<std::size_t>(np * H), 0.0);
        double* d_dec =
            cfg.tie_mlm_weights ? grads->tok_emb.data() : grads->mlm_dec.data();
        linear_backward(mlm_norm.data(), dec_w, mlm_dlogits.data(), d_norm.data(), d_dec,
                        grads->mlm_out_bias.data(), np, H, V);
        std::vector<double> d_act(d_norm.size(), 0.0);
        ln_backward(mlm_act.data(), params.mlm_ln_g.data(), mlm_ln_cache, d_norm.data(),
                    d_act.data(), grads->mlm_ln_g.data(), grads->mlm_ln_b.data(), np, H);
        for (std::size_t i = 0; i < d_act.size(); ++i) d_act[i] *= gelu_grad(mlm_pre[i]);
        std::vector<double> d_gathered(static_cast<std::size_t>(np * H), 0.0);
        linear_backward(mlm_gathered.data(), params.mlm_w.data(), d_act.data(),
                        d_gathered.data(), grads->mlm_w.data(), grads->mlm_b.data(), np, H,
                        H);
        for (std::int64_t r = 0; r < np; ++r) {
            double* dst = d_enc.data() + mlm_pos[static_cast<std::size_t>(r)] * H;
            const double* src = d_gathered.data() + r * H;
            for (std::int64_t h = 0; h < H; ++h) dst[h] += src[h];
        }
    }

    // classifier head
    if (cls_w && !cls_rows.empty()) {
        const std::int64_t nr = static_cast<std::int64_t>(cls_rows.size());
        std::vector<double> d_in(static_cast<std::size_t>(nr * H), 0.0);
        Tensor* gw;
        Tensor* gb;
        if (kind == LossKind::mlm_nsp) {
            gw = &grads->nsp_w;
            gb = &grads->nsp_b;
        } else {
            gw = &grads->head_w;
            gb = &grads->head_b;
        }
        linear_backward(cls_in.data(), cls_w->data(), cls_dlogits.data(), d_in.data(),
                        gw->data(), gb->data(), nr, H, n_cls);
        for (std::int64_t r = 0; r < nr; ++r) {
            double* dst = d_enc.data() + cls_rows[static_cast<std::size_t>(r)] * H;
            const double* src = d_in.data() + r * H;
            for (std::int64_t h = 0; h < H; ++h) dst[h] += src[h];
        }
    }

    // encoder layers, last to first
    std::vector<double> dx = std::move(d_enc);
    for (std::int64_t l = cfg.layers - 1; l >= 0; --l) {
        auto& L = params.layers[static_cast<std::size_t>(l)];
        auto& G = grads->layers[static_cast<std::size_t>(l)];
        auto& c = fc.layers[static_cast<std::size_t>(l)];
        const std::size_t bth = c.x_in.size();

        std::vector<double> d_resid2(bth, 0.0);
        ln_backward(c.resid2.data(), L.ln2_g.data(), c.ln2, dx.data(), d_resid2.data(),
                    G.ln2_g.data(), G.ln2_b.data(), BT, H);
        std::vector<double> d_ffn_proj = d_resid2;
        c.drop2.backward(d_ffn_proj);
        std::vector<double> d_ffn_act(static_cast<std::size_t>(BT * F), 0.0);
        linear_backward(c.ffn_act.data(), L.w2.data(), d_ffn_proj.data(),
                        d_ffn_act.data(), G.w2.data(), G.b2.data(), BT, F, H);
        for (std::size_t i = 0; i < d_ffn_act.size(); ++i) {
            d_ffn_act[i] *= gelu_grad(c.ffn_pre[i]);
        }
        std::vector<double> d_x_mid(bth, 0.0);
        linear_backward(c.x_mid.data(), L.w1.data(), d_ffn_act.data(), d_x_mid.data(),
                        G.w1.data(), G.b1.data(), BT, H, F);
        for (std::size_t i = 0; i < bth; ++i) d_x_mid[i] += d_resid2[i];

        std::vector<double> d_resid1(bth, 0.0);
        ln_backward(c.resid1.data(), L.ln1_g.data(), c.ln1, d_x_mid.data(),
                    d_resid1.data(), G.ln1_g.data(), G.ln1_b.data(), BT, H);
        std::vector<double> d_attn_proj = d_resid1;
        c.drop1.backward(d_attn_proj);
        std::vector<double> d_ctx(bth, 0.0);
        linear_backward(c.ctx.data(), L.wo.data(), d_attn_proj.data(), d_ctx.data(),
                        G.wo.data(), G.bo.data(), BT, H, H);

        std::vector<double> dq(bth, 0.0), dk(bth, 0.0), dv(bth, 0.0);
        for (std::int64_t b = 0; b < B; ++b) {
            for (std::int64_t h = 0; h < nh; ++h) {
                for (std::int64_t t1 = 0; t1 < T; ++t1) {
                    const double* p = c.att.data() + ((b * nh + h) * T + t1) * T;
                    const double* dctx = d_ctx.data() + (b * T + t1) * H + h * dh;
                    // dp and the softmax Jacobian contraction
                    double dot = 0.0;
                    std::vector<double> dp(static_cast<std::size_t>(T), 0.0);
                    for (std::int64_t t2 = 0; t2 < T; ++t2) {
                        if (p[t2] == 0.0) continue;
                        const double* vv = c.v.data() + (b * T + t2) * H + h * dh;
                        double s = 0.0;
                        for (std::int64_t d = 0; d < dh; ++d) s += dctx[d] * vv[d];
                        dp[static_cast<std::size_t>(t2)] = s;
                        dot += s * p[t2];
                        double* dvv = dv.data() + (b * T + t2) * H + h * dh;
                        for (std::int64_t d = 0; d < dh; ++d) {
                            dvv[d] += p[t2] * dctx[d];
                        }
                    }
                    const double* qv = c.q.data() + (b * T + t1) * H + h * dh;
                    double* dqv = dq.data() + (b * T + t1) * H + h * dh;
                    for (std::int64_t t2 = 0; t2 < T; ++t2) {
                        if (p[t2] == 0.0) continue;
                        const double ds =
                            p[t2] * (dp[static_cast<std::size_t>(t2)] - dot) * att_scale;
                        const double* kv = c.k.data() + (b * T + t2) * H + h * dh;
                        double* dkv = dk.data() + (b * T + t2) * H + h * dh;
                        for (std::int64_t d = 0; d < dh; ++d) {
                            dqv[d] += ds * kv[d];
                            dkv[d] += ds * qv[d];
                        }
                    }
                }
            }
        }

        std::vector<double> d_x_in(bth, 0.0);
        linear_backward(c.x_in.data(), L.wq.data(), dq.data(), d_x_in.data(), G.wq.data(),
                        G.bq.data(), BT, H, H);
        linear_backward(c.x_in.data(), L.wk.data(), dk.data(), d_x_in.data(), G.wk.data(),
                        G.bk.data(), BT, H, H);
        linear_backward(c.x_in.data(), L.wv.data(), dv.data(), d_x_in.data(), G.wv.data(),
                        G.bv.data(), BT, H, H);
        for (std::size_t i = 0; i < bth; ++i) d_x_in[i] += d_resid1[i];
        dx = std::move(d_x_in);
    }

    // embeddings
    fc.drop0.backward(dx);
    std::vector<double> d_emb_sum(dx.size(), 0.0);
    ln_backward(fc.emb_sum.data(), params.emb_ln_g.data(), fc.ln0, dx.data(),
                d_emb_sum.data(), grads->emb_ln_g.data(), grads->emb_ln_b.data(), BT, H);
    for (std::int64_t i = 0; i < BT; ++i) {
        const std::int64_t t = i % T;
        const double* src = d_emb_sum.data() + i * H;
        double* dte = grads->tok_emb.data() +
                      static_cast<std::int64_t>(batch.input_ids[i]) * H;
        double* dpe = grads->pos_emb.data() + t * H;
        double* dse = grads->seg_emb.data() +
                      static_cast<std::int64_t>(batch.segment_ids[i]) * H;
        for (std::int64_t h = 0; h < H; ++h) {
            dte[h] += src[h];
            dpe[h] += src[h];
            dse[h] += src[h];
        }
    }

    check_finite(*grads);
    return res;
}

ForwardResult forward_mlm(const Parameters& params, const ModelBatch& batch,
                          bool with_nsp) {
    return forward_backward(params, batch, with_nsp ? LossKind::mlm_nsp : LossKind::mlm,
                            nullptr, {}, false, 0, true);
}

ForwardResult forward_token_cls(const Parameters& params, const ModelBatch& batch,
                                int num_tags) {
    if (num_tags < 2) throw ConfigError("forward_token_cls: num_tags must be >= 2");
    if (params.head_classes != num_tags) {
        throw ConfigError("forward_token_cls: head size mismatch");
    }
    return forward_backward(params, batch, LossKind::token_cls, nullptr, {}, false, 0,
                            true);
}

ForwardResult forward_seq_cls(const Parameters& params, const ModelBatch& batch,
                              int num_classes) {
    if (num_classes < 2) throw ConfigError("forward_seq_cls: num_classes must be >= 2");
    if (params.head_classes != num_classes) {
        throw ConfigError("forward_seq_cls: head size mismatch");
    }
    return forward_backward(params, batch, LossKind::seq_cls, nullptr, {}, false, 0, true);
}

Parameters backward(const Parameters& params, const ModelBatch& batch, LossKind kind,
                    const LossNorm& norm) {
    Parameters grads = zeros_like(params);
    forward_backward(params, batch, kind, &grads, norm, false, 0, false);
    return grads;
}

std::vector<std::vector<double>> attention_probe(const Parameters& params,
                                                 const ModelBatch& batch) {
    // lightweight re-run of the forward encoder, capturing attention rows
    validate_batch(params, batch);
    const auto& cfg = params.cfg;
    const std::int64_t B = batch.batch, T = batch.seq, H = cfg.hidden;
    const std::int64_t BT = B * T, F = cfg.ffn_dim();
    const std::int64_t nh = cfg.heads, dh = cfg.head_dim();
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<double> emb(static_cast<std::size_t>(BT * H));
    for (std::int64_t i = 0; i < BT; ++i) {
        const std::int64_t t = i % T;
        const double* te =
            params.tok_emb.data() + static_cast<std::int64_t>(batch.input_ids[i]) * H;
        const double* pe = params.pos_emb.data() + t * H;
        const double* se =
            params.seg_emb.data() + static_cast<std::int64_t>(batch.segment_ids[i]) * H;
        double* out = emb.data() + i * H;
        for (std::int64_t h = 0; h < H; ++h) out[h] = te[h] + pe[h] + se[h];
    }
    LnCache ln0;
    std::vector<double> x(emb.size());
    ln_forward(emb.data(), params.emb_ln_g.data(), params.emb_ln_b.data(), x.data(), BT, H,
               ln0);

    std::vector<std::vector<double>> probes;
    for (std::int64_t l = 0; l < cfg.layers; ++l) {
        const auto& L = params.layers[static_cast<std::size_t>(l)];
        const std::size_t bth = x.size();
        std::vector<double> q(bth, 0.0), k(bth, 0.0), v(bth, 0.0);
        linear_forward(x.data(), L.wq.data(), L.bq.data(), q.data(), BT, H, H);
        linear_forward(x.data(), L.wk.data(), L.bk.data(), k.data(), BT, H, H);
        linear_forward(x.data(), L.wv.data(), L.bv.data(), v.data(), BT, H, H);
        std::vector<double> att(static_cast<std::size_t>(B * nh * T * T), 0.0);
        std::vector<double> ctx(bth, 0.0);
        for (std::int64_t b = 0; b < B; ++b) {
            for (std::int64_t h = 0; h < nh; ++h) {
                for (std::int64_t t1 = 0; t1 < T; ++t1) {
                    double* row = att.data() + ((b * nh + h) * T + t1) * T;
                    const double* qv = q.data() + (b * T + t1) * H + h * dh;
                    for (std::int64_t t2 = 0; t2 < T; ++t2) {
                        if (batch.attention[static_cast<std::size_t>(b * T + t2)] == 0) {
                            row[t2] = -1e300;
                            continue;
                        }
                        const double* kv = k.data() + (b * T + t2) * H + h * dh;
                        double s = 0.0;
                        for (std::int64_t d = 0; d < dh; ++d) s += qv[d] * kv[d];
                        row[t2] = s * att_scale;
                    }
                    softmax_row(row, T);
                    double* cx = ctx.data() + (b * T + t1) * H + h * dh;
                    for (std::int64_t t2 = 0; t2 < T; ++t2) {
                        const double pr = row[t2];
                        if (pr == 0.0) continue;
                        const double* vv = v.data() + (b * T + t2) * H + h * dh;
                        for (std::int64_t d = 0; d < dh; ++d) cx[d] += pr * vv[d];
                    }
                }
            }
        }
        probes.push_back(att);

        std::vector<double> proj(bth, 0.0);
        linear_forward(ctx.data(), L.wo.data(), L.bo.data(), proj.data(), BT, H, H);
        for (std::size_t i = 0; i < bth; ++i) proj[i] += x[i];
        LnCache ln1;
        std::vector<double> mid(bth);
        ln_forward(proj.data(), L.ln1_g.data(), L.ln1_b.data(), mid.data(), BT, H, ln1);
        std::vector<double> pre(static_cast<std::size_t>(BT * F), 0.0);
        linear_forward(mid.data(), L.w1.data(), L.b1.data(), pre.data(), BT, H, F);
        for (auto& e : pre) e = gelu(e);
        std::vector<double> out(bth, 0.0);
        linear_forward(pre.data(), L.w2.data(), L.b2.data(), out.data(), BT, F, H);
        for (std::size_t i = 0; i < bth; ++i) out[i] += mid[i];
        LnCache ln2;
        ln_forward(out.data(), L.ln2_g.data(), L.ln2_b.data(), x.data(), BT, H, ln2);
    }
    return probes;
}

}  // namespace smlm::model
