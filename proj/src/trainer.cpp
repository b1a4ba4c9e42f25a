#include "smlm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace smlm::trainer {

void TrainConfig::validate() const {
    if (total_iters < 1) throw ConfigError("train: total_iters must be positive");
    if (batch_size < 1) throw ConfigError("train: batch_size must be positive");
    if (log_every < 1) throw ConfigError("train: log_every must be positive");
    if (workers < 1) throw ConfigError("train: workers must be positive");
    if (warmup_fraction < 0.0 || warmup_fraction >= 1.0) {
        throw ConfigError("train: warmup_fraction must be in [0, 1)");
    }
    if (!std::is_sorted(checkpoint_iters.begin(), checkpoint_iters.end())) {
        throw ConfigError("train: checkpoint_iters must be sorted");
    }
    for (auto it : checkpoint_iters) {
        if (it < 1 || it > total_iters) {
            throw ConfigError("train: checkpoint iteration outside [1, total_iters]");
        }
    }
    if (out_dir.empty()) throw ConfigError("train: out_dir required");
}

std::string checkpoint_path(const std::string& out_dir, std::int64_t iter) {
    return (fs::path(out_dir) / ("checkpoint_" + std::to_string(iter) + ".bin")).string();
}

// ---------------------------------------------------------------------------
// Checkpoint format

namespace {
constexpr char kMagic[4] = {'S', 'M', 'L', 'M'};
constexpr std::uint16_t kVersion = 1;

void write_section(std::ostream& out, const std::string& payload) {
    BinaryWriter w(out);
    w.u64(payload.size());
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
}

std::string read_section(std::istream& in) {
    BinaryReader r(in);
    const std::uint64_t n = r.u64();
    if (n > (1ULL << 33)) throw DataError("checkpoint: implausible section length");
    std::string payload(static_cast<std::size_t>(n), '\0');
    in.read(payload.data(), static_cast<std::streamsize>(n));
    if (static_cast<std::uint64_t>(in.gcount()) != n) {
        throw DataError("checkpoint: truncated section");
    }
    return payload;
}
}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ostringstream header;
    {
        BinaryWriter w(header);
        w.u64(static_cast<std::uint64_t>(ckpt.iteration));
        w.u64(ckpt.model_hash);
        w.u64(ckpt.pipeline_hash);
        w.u64(ckpt.vocab_hash);
        w.u64(ckpt.metrics_cursor);
        w.u64(ckpt.tokens_seen);
        w.str(ckpt.rng_state);
    }
    std::ostringstream cfg;
    {
        const auto& c = ckpt.params.cfg;
        BinaryWriter w(cfg);
        w.u32(static_cast<std::uint32_t>(c.layers));
        w.u32(static_cast<std::uint32_t>(c.hidden));
        w.u32(static_cast<std::uint32_t>(c.heads));
        w.u32(static_cast<std::uint32_t>(c.vocab_size));
        w.u32(static_cast<std::uint32_t>(c.max_positions));
        w.u32(static_cast<std::uint32_t>(c.segment_types));
        w.f64(c.dropout);
        w.u8(c.tie_mlm_weights ? 1 : 0);
        w.u8(static_cast<std::uint8_t>(ckpt.params.head_kind));
        w.u32(static_cast<std::uint32_t>(ckpt.params.head_classes));
    }
    std::ostringstream tensors;
    {
        BinaryWriter w(tensors);
        std::uint64_t count = 0;
        ckpt.params.for_each(
            [&](const std::string&, const model::Tensor&) { ++count; });
        w.u64(count);
        ckpt.params.for_each([&](const std::string& name, const model::Tensor& t) {
            w.str(name);
            w.u64(t.shape.size());
            for (auto d : t.shape) w.i64(d);
            w.f64_vec(t.v);
        });
    }
    std::ostringstream opt;
    {
        BinaryWriter w(opt);
        ckpt.opt_state.save(w);
    }

    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("checkpoint: cannot open " + tmp + " for writing");
        out.write(kMagic, 4);
        BinaryWriter w(out);
        w.u16(kVersion);
        write_section(out, header.str());
        write_section(out, cfg.str());
        write_section(out, tensors.str());
        write_section(out, opt.str());
        if (!out) throw DataError("checkpoint: write failure on " + tmp);
    }
    fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) {
        throw DataError("checkpoint: bad magic in " + path);
    }
    BinaryReader top(in);
    const std::uint16_t version = top.u16();
    if (version != kVersion) {
        throw DataError("checkpoint: unsupported version " + std::to_string(version));
    }
    Checkpoint ckpt;
    {
        std::istringstream is(read_section(in));
        BinaryReader r(is);
        ckpt.iteration = static_cast<std::int64_t>(r.u64());
        ckpt.model_hash = r.u64();
        ckpt.pipeline_hash = r.u64();
        ckpt.vocab_hash = r.u64();
        ckpt.metrics_cursor = r.u64();
        ckpt.tokens_seen = r.u64();
        ckpt.rng_state = r.str();
    }
    model::ModelConfig cfg;
    model::HeadKind head_kind;
    int head_classes;
    {
        std::istringstream is(read_section(in));
        BinaryReader r(is);
        cfg.layers = static_cast<int>(r.u32());
        cfg.hidden = static_cast<int>(r.u32());
        cfg.heads = static_cast<int>(r.u32());
        cfg.vocab_size = static_cast<int>(r.u32());
        cfg.max_positions = static_cast<int>(r.u32());
        cfg.segment_types = static_cast<int>(r.u32());
        cfg.dropout = r.f64();
        cfg.tie_mlm_weights = r.u8() != 0;
        head_kind = static_cast<model::HeadKind>(r.u8());
        head_classes = static_cast<int>(r.u32());
    }
    ckpt.params = model::allocate_params(cfg, head_kind, head_classes);
    {
        std::istringstream is(read_section(in));
        BinaryReader r(is);
        const std::uint64_t count = r.u64();
        std::uint64_t seen = 0;
        ckpt.params.for_each([&](const std::string& name, model::Tensor& t) {
            const std::string stored = r.str();
            if (stored != name) {
                throw DataError("checkpoint: tensor order mismatch, expected " + name +
                                " found " + stored);
            }
            const std::uint64_t rank = r.u64();
            std::vector<std::int64_t> shape(rank);
            for (auto& d : shape) d = r.i64();
            if (shape != t.shape) {
                throw DataError("checkpoint: shape mismatch for tensor " + name);
            }
            t.v = r.f64_vec();
            ++seen;
        });
        if (seen != count) throw DataError("checkpoint: tensor count mismatch");
    }
    {
        std::istringstream is(read_section(in));
        BinaryReader r(is);
        ckpt.opt_state = optim::OptimState::load(r);
    }
    return ckpt;
}

// ---------------------------------------------------------------------------
// Gradient reduction

model::Parameters allreduce_gradients(std::vector<model::Parameters> workers) {
    if (workers.empty()) throw ConfigError("allreduce: no workers");
    const std::size_t w = workers.size();
    // shape agreement
    std::vector<std::size_t> sizes;
    workers[0].for_each([&](const std::string&, const model::Tensor& t) {
        sizes.push_back(t.v.size());
    });
    for (std::size_t i = 1; i < w; ++i) {
        std::size_t k = 0;
        bool ok = true;
        workers[i].for_each([&](const std::string&, const model::Tensor& t) {
            if (k >= sizes.size() || t.v.size() != sizes[k]) ok = false;
            ++k;
        });
        if (!ok || k != sizes.size()) {
            throw ConfigError("allreduce: worker gradient layouts disagree");
        }
    }
    // pairwise tree: (0+1), (2+3), ... repeated until one remains
    std::size_t n = w;
    while (n > 1) {
        std::size_t out = 0;
        for (std::size_t i = 0; i + 1 < n; i += 2) {
            std::vector<model::Tensor*> a, b;
            workers[i].for_each(
                [&](const std::string&, model::Tensor& t) { a.push_back(&t); });
            workers[i + 1].for_each(
                [&](const std::string&, model::Tensor& t) { b.push_back(&t); });
            for (std::size_t ti = 0; ti < a.size(); ++ti) {
                for (std::size_t j = 0; j < a[ti]->v.size(); ++j) {
                    a[ti]->v[j] += b[ti]->v[j];
                }
            }
            if (out != i) workers[out] = std::move(workers[i]);
            ++out;
        }
        if (n % 2 == 1) {
            workers[out] = std::move(workers[n - 1]);
            ++out;
        }
        n = out;
    }
    model::Parameters mean = std::move(workers[0]);
    const double inv = 1.0 / static_cast<double>(w);
    mean.for_each([&](const std::string&, model::Tensor& t) {
        for (auto& x : t.v) x *= inv;
    });
    return mean;
}

// ---------------------------------------------------------------------------
// Batch conversion and accounting

model::ModelBatch to_model_batch(const pipeline::Batch& batch, int truncate_len) {
    if (truncate_len > 0) {
        std::vector<pipeline::PretrainExample> shortened;
        for (std::size_t e = 0; e < batch.examples.size(); ++e) {
            pipeline::PretrainExample ex = batch.examples[e];
            // strip batch padding back off before truncating
            std::size_t real = 0;
            for (int bit : batch.attention_mask[e]) real += static_cast<std::size_t>(bit);
            ex.input_ids.resize(real);
            ex.segment_ids.resize(real);
            if (!ex.mlm_labels.empty()) ex.mlm_labels.resize(real);
            shortened.push_back(pipeline::truncate_example(ex, truncate_len));
        }
        return to_model_batch(pipeline::assemble_batch(std::move(shortened)), 0);
    }
    model::ModelBatch mb;
    mb.batch = static_cast<int>(batch.examples.size());
    mb.seq = batch.seq_len;
    const std::size_t bt =
        static_cast<std::size_t>(mb.batch) * static_cast<std::size_t>(mb.seq);
    mb.input_ids.reserve(bt);
    mb.segment_ids.reserve(bt);
    mb.attention.reserve(bt);
    mb.mlm_labels.reserve(bt);
    for (std::size_t e = 0; e < batch.examples.size(); ++e) {
        const auto& ex = batch.examples[e];
        mb.input_ids.insert(mb.input_ids.end(), ex.input_ids.begin(), ex.input_ids.end());
        mb.segment_ids.insert(mb.segment_ids.end(), ex.segment_ids.begin(),
                              ex.segment_ids.end());
        mb.attention.insert(mb.attention.end(), batch.attention_mask[e].begin(),
                            batch.attention_mask[e].end());
        if (ex.mlm_labels.empty()) {
            mb.mlm_labels.insert(mb.mlm_labels.end(), static_cast<std::size_t>(mb.seq),
                                 pipeline::kIgnoreLabel);
        } else {
            mb.mlm_labels.insert(mb.mlm_labels.end(), ex.mlm_labels.begin(),
                                 ex.mlm_labels.end());
        }
        mb.nsp_labels.push_back(static_cast<int>(ex.nsp_label));
    }
    return mb;
}

double average_seq_len(const std::vector<pipeline::PretrainExample>& stream) {
    if (stream.empty()) return 0.0;
    double total = 0.0;
    for (const auto& ex : stream) total += static_cast<double>(ex.input_ids.size());
    return total / static_cast<double>(stream.size());
}

std::int64_t epochs_completed(std::int64_t iters, std::int64_t batch_size,
                              double avg_seq_len, std::int64_t corpus_tokens) {
    if (corpus_tokens <= 0) throw ConfigError("epochs: corpus_tokens must be positive");
    return static_cast<std::int64_t>(
        std::floor(static_cast<double>(iters) * static_cast<double>(batch_size) *
                   avg_seq_len / static_cast<double>(corpus_tokens)));
}

// ---------------------------------------------------------------------------
// Metrics log

std::vector<MetricRecord> read_metrics(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("metrics: cannot open " + path);
    std::vector<MetricRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError("metrics: line " + std::to_string(lineno) + ": " + e.what());
        }
        MetricRecord r;
        r.iter = j.at("iter").get<std::int64_t>();
        r.loss = j.at("loss").get<double>();
        r.lr = j.at("lr").get<double>();
        r.tokens = j.at("tokens").get<std::uint64_t>();
        out.push_back(r);
    }
    return out;
}

namespace {

std::string metric_line(const MetricRecord& r) {
    json j;
    j["iter"] = r.iter;
    j["loss"] = r.loss;
    j["lr"] = r.lr;
    j["tokens"] = r.tokens;
    return j.dump();
}

model::ModelBatch slice_batch(const model::ModelBatch& mb, int lo, int hi) {
    model::ModelBatch s;
    s.batch = hi - lo;
    s.seq = mb.seq;
    const auto T = static_cast<std::size_t>(mb.seq);
    const auto a = static_cast<std::size_t>(lo) * T;
    const auto b = static_cast<std::size_t>(hi) * T;
    s.input_ids.assign(mb.input_ids.begin() + a, mb.input_ids.begin() + b);
    s.segment_ids.assign(mb.segment_ids.begin() + a, mb.segment_ids.begin() + b);
    s.attention.assign(mb.attention.begin() + a, mb.attention.begin() + b);
    s.mlm_labels.assign(mb.mlm_labels.begin() + a, mb.mlm_labels.begin() + b);
    if (!mb.nsp_labels.empty()) {
        s.nsp_labels.assign(mb.nsp_labels.begin() + lo, mb.nsp_labels.begin() + hi);
    }
    return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Pretraining loop

Checkpoint pretrain(const corpus::CorpusStore& corpus, const tok::Vocab& vocab,
                    const model::ModelConfig& model_cfg,
                    const pipeline::PipelineConfig& pipeline_cfg,
                    const pipeline::MaskingPolicy& policy, const TrainConfig& train_cfg,
                    const optim::Hyper& hyper) {
    train_cfg.validate();
    model_cfg.validate();
    hyper.validate();
    if (model_cfg.vocab_size != static_cast<int>(vocab.size())) {
        throw ConfigError("pretrain: model vocab_size does not match the vocabulary");
    }
    pipeline::PipelineConfig pcfg = pipeline_cfg;
    pcfg.batch_size = train_cfg.batch_size;
    pcfg.validate();

    fs::create_directories(train_cfg.out_dir);

    const std::uint64_t data_seed = mix_seed(train_cfg.seed, 0xDA7A);
    const bool bert = pcfg.regime == pipeline::Regime::bert;
    auto stream = bert
        ? pipeline::build_bert_examples(corpus, vocab, pcfg, policy, data_seed)
        : pipeline::build_packed_examples(corpus, vocab, pcfg, policy, data_seed);
    if (stream.empty()) throw DataError("pretrain: corpus produced no examples");
    const std::int64_t batches_per_epoch = static_cast<std::int64_t>(
        (stream.size() + static_cast<std::size_t>(train_cfg.batch_size) - 1) /
        static_cast<std::size_t>(train_cfg.batch_size));

    optim::Schedule sched;
    sched.total_steps = train_cfg.total_iters;
    sched.warmup_fraction = train_cfg.warmup_fraction;
    sched.peak_lr = hyper.lr;
    sched.validate();

    const std::int64_t phase1_iters =
        bert ? static_cast<std::int64_t>(
                   std::llround(pcfg.phase1_fraction *
                                static_cast<double>(train_cfg.total_iters)))
             : 0;

    Checkpoint state;
    state.model_hash = model_cfg.hash();
    state.pipeline_hash = pcfg.hash();
    state.vocab_hash = vocab.hash();

    // resume from the newest on-disk checkpoint, if one exists
    bool resumed = false;
    for (auto it = train_cfg.checkpoint_iters.rbegin();
         it != train_cfg.checkpoint_iters.rend(); ++it) {
        const std::string path = checkpoint_path(train_cfg.out_dir, *it);
        if (!fs::exists(path)) continue;
        Checkpoint loaded = load_checkpoint(path);
        if (loaded.model_hash != state.model_hash ||
            loaded.pipeline_hash != state.pipeline_hash ||
            loaded.vocab_hash != state.vocab_hash) {
            throw ConfigError("pretrain: checkpoint " + path +
                              " belongs to a different configuration");
        }
        state = std::move(loaded);
        resumed = true;
        break;
    }
    if (!resumed) {
        state.params = model::init_model(model_cfg, mix_seed(train_cfg.seed, 0x11717));
        state.opt_state = optim::OptimState::for_params(state.params);
    }

    // metrics log: on resume keep exactly the records the checkpoint saw
    const std::string metrics_path =
        (fs::path(train_cfg.out_dir) / "metrics.jsonl").string();
    std::vector<std::string> kept;
    if (resumed && fs::exists(metrics_path)) {
        std::ifstream in(metrics_path);
        std::string line;
        while (kept.size() < state.metrics_cursor && std::getline(in, line)) {
            kept.push_back(line);
        }
        if (kept.size() != state.metrics_cursor) {
            throw DataError("pretrain: metrics log shorter than checkpoint cursor");
        }
    }
    std::ofstream metrics(metrics_path, std::ios::trunc);
    if (!metrics) throw DataError("pretrain: cannot write " + metrics_path);
    for (const auto& line : kept) metrics << line << '\n';
    metrics.flush();

    const auto kind = bert ? model::LossKind::mlm_nsp : model::LossKind::mlm;
    std::int64_t cached_epoch = -1;
    std::vector<pipeline::Batch> batches;

    for (std::int64_t iter = state.iteration + 1; iter <= train_cfg.total_iters; ++iter) {
        const std::int64_t epoch = (iter - 1) / batches_per_epoch;
        const std::int64_t index = (iter - 1) % batches_per_epoch;
        if (epoch != cached_epoch) {
            batches = pipeline::make_batches(stream, pcfg, policy, vocab,
                                             mix_seed(train_cfg.seed, epoch));
            cached_epoch = epoch;
        }
        const int truncate_len =
            (bert && iter <= phase1_iters) ? pcfg.phase1_len : 0;
        const model::ModelBatch mb =
            to_model_batch(batches[static_cast<std::size_t>(index)], truncate_len);

        std::int64_t mlm_count = 0;
        for (int l : mb.mlm_labels) mlm_count += l >= 0 ? 1 : 0;
        if (mlm_count == 0) throw NumericError("pretrain: batch selected no MLM targets");
        std::int64_t cls_count = 0;
        for (int l : mb.nsp_labels) cls_count += l >= 0 ? 1 : 0;
        if (bert && cls_count == 0) {
            throw NumericError("pretrain: batch carries no next-sentence labels");
        }

        const int W = std::min(train_cfg.workers, mb.batch);
        const int per = (mb.batch + W - 1) / W;
        model::LossNorm norm;
        norm.mlm_divisor = static_cast<double>(mlm_count);
        norm.cls_divisor = bert ? static_cast<double>(cls_count) : 0.0;
        norm.loss_scale = static_cast<double>(W);

        std::vector<model::Parameters> worker_grads;
        std::vector<model::ForwardResult> worker_res(static_cast<std::size_t>(W));
        worker_grads.reserve(static_cast<std::size_t>(W));
        for (int w = 0; w < W; ++w) worker_grads.push_back(model::zeros_like(state.params));
        std::vector<std::exception_ptr> worker_err(static_cast<std::size_t>(W));
        {
            std::vector<std::thread> threads;
            for (int w = 0; w < W; ++w) {
                threads.emplace_back([&, w]() {
                    try {
                        const int lo = w * per;
                        const int hi = std::min(mb.batch, lo + per);
                        const auto shard = slice_batch(mb, lo, hi);
                        worker_res[static_cast<std::size_t>(w)] = model::forward_backward(
                            state.params, shard, kind,
                            &worker_grads[static_cast<std::size_t>(w)], norm,
                            /*train_mode=*/true,
                            mix_seed(mix_seed(train_cfg.seed, iter),
                                     0xD0 + static_cast<std::uint64_t>(w)));
                    } catch (...) {
                        worker_err[static_cast<std::size_t>(w)] = std::current_exception();
                    }
                });
            }
            for (auto& t : threads) t.join();
        }
        for (auto& e : worker_err) {
            if (e) std::rethrow_exception(e);
        }

        double mlm_ce = 0.0, cls_ce = 0.0;
        for (const auto& r : worker_res) {
            mlm_ce += r.mlm_ce_sum;
            cls_ce += r.cls_ce_sum;
        }
        double loss = mlm_ce / static_cast<double>(mlm_count);
        if (bert) loss += cls_ce / static_cast<double>(cls_count);
        if (!std::isfinite(loss)) throw NumericError("pretrain: non-finite loss");

        auto mean = allreduce_gradients(std::move(worker_grads));
        const double lr = sched.lr_at(iter);
        optim::lamb_step(state.params, mean, state.opt_state, hyper, lr);

        for (int bit : mb.attention) state.tokens_seen += bit != 0 ? 1u : 0u;
        state.iteration = iter;
        state.rng_state = std::to_string(mix_seed(train_cfg.seed, iter));

        if (iter % train_cfg.log_every == 0 || iter == train_cfg.total_iters) {
            MetricRecord rec{iter, loss, lr, state.tokens_seen};
            metrics << metric_line(rec) << '\n';
            metrics.flush();
            state.metrics_cursor += 1;
        }
        if (std::binary_search(train_cfg.checkpoint_iters.begin(),
                               train_cfg.checkpoint_iters.end(), iter)) {
            save_checkpoint(state, checkpoint_path(train_cfg.out_dir, iter));
        }
    }
    return state;
}

}  // namespace smlm::trainer
