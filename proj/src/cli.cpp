#include "smlm/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "smlm/common.hpp"
#include "smlm/corpus.hpp"
#include "smlm/eval.hpp"
#include "smlm/model.hpp"
#include "smlm/optim.hpp"
#include "smlm/pipeline.hpp"
#include "smlm/report.hpp"
#include "smlm/tasks.hpp"
#include "smlm/tokenizer.hpp"
#include "smlm/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace smlm::cli {

namespace {

// ---------------------------------------------------------------------------
// Config schema

// Array elements validated against these exemplars (path with indices
// stripped). Arrays not listed here hold numbers.
const std::map<std::string, json>& array_element_schemas() {
    static const std::map<std::string, json> schemas = {
        {"/grid/models",
         {{"name", ""}, {"dir", ""}, {"checkpoints", json::array()}}},
        {"/grid/tasks",
         {{"name", ""}, {"kind", "ner"}, {"train", ""}, {"dev", ""}, {"domain", ""}}},
        {"/report/runs",
         {{"name", ""}, {"metrics", ""}, {"checkpoints", json::array()}}},
    };
    return schemas;
}

std::string type_name(const json& v) {
    if (v.is_object()) return "object";
    if (v.is_array()) return "array";
    if (v.is_string()) return "string";
    if (v.is_boolean()) return "boolean";
    if (v.is_number()) return "number";
    return "null";
}

void check_node(const json& user, const json& schema, const std::string& path) {
    if (schema.is_object()) {
        if (!user.is_object()) {
            throw ConfigError("config: " + path + " must be an object, got " +
                              type_name(user));
        }
        for (const auto& [key, value] : user.items()) {
            if (!schema.contains(key)) {
                throw ConfigError("config: unknown key " + path + "/" + key);
            }
            check_node(value, schema.at(key), path + "/" + key);
        }
        return;
    }
    if (schema.is_array()) {
        if (!user.is_array()) {
            throw ConfigError("config: " + path + " must be an array, got " +
                              type_name(user));
        }
        const auto& schemas = array_element_schemas();
        const auto it = schemas.find(path);
        for (std::size_t i = 0; i < user.size(); ++i) {
            const std::string elem_path = path + "/" + std::to_string(i);
            if (it != schemas.end()) {
                check_node(user[i], it->second, path);
            } else if (!user[i].is_number()) {
                throw ConfigError("config: " + elem_path + " must be a number, got " +
                                  type_name(user[i]));
            }
        }
        return;
    }
    if (schema.is_string() && !user.is_string()) {
        throw ConfigError("config: " + path + " must be a string, got " +
                          type_name(user));
    }
    if (schema.is_boolean() && !user.is_boolean()) {
        throw ConfigError("config: " + path + " must be a boolean, got " +
                          type_name(user));
    }
    if (schema.is_number() && !user.is_number()) {
        throw ConfigError("config: " + path + " must be a number, got " +
                          type_name(user));
    }
}

json merge_node(json base, const json& user) {
    if (base.is_object() && user.is_object()) {
        for (const auto& [key, value] : user.items()) {
            base[key] = merge_node(base.at(key), value);
        }
        return base;
    }
    return user;  // arrays and scalars replace the default wholesale
}

// ---------------------------------------------------------------------------
// Parsing helpers for enum-like config strings

tok::Casing parse_casing(const std::string& s) {
    if (s == "cased") return tok::Casing::cased;
    if (s == "uncased") return tok::Casing::uncased;
    throw ConfigError("config: casing must be \"cased\" or \"uncased\", got \"" + s +
                      "\"");
}

pipeline::Regime parse_regime(const std::string& s) {
    if (s == "bert") return pipeline::Regime::bert;
    if (s == "scholar") return pipeline::Regime::scholar;
    throw ConfigError("config: regime must be \"bert\" or \"scholar\", got \"" + s +
                      "\"");
}

pipeline::MaskMode parse_mask_mode(const std::string& s) {
    if (s == "static") return pipeline::MaskMode::static_mask;
    if (s == "dynamic") return pipeline::MaskMode::dynamic_mask;
    throw ConfigError("config: masking mode must be \"static\" or \"dynamic\", got \"" +
                      s + "\"");
}

eval::Averaging parse_averaging(const std::string& s) {
    if (s == "micro") return eval::Averaging::micro;
    if (s == "macro") return eval::Averaging::macro;
    throw ConfigError("config: averaging must be \"micro\" or \"macro\", got \"" + s +
                      "\"");
}

eval::MeanKind parse_mean_kind(const std::string& s) {
    if (s == "domains") return eval::MeanKind::of_domains;
    if (s == "tasks") return eval::MeanKind::of_tasks;
    throw ConfigError("config: mean_kind must be \"domains\" or \"tasks\", got \"" + s +
                      "\"");
}

// ---------------------------------------------------------------------------
// Section -> struct conversions

pipeline::PipelineConfig pipeline_from(const json& cfg) {
    const json& p = cfg.at("pipeline");
    pipeline::PipelineConfig out;
    out.regime = parse_regime(p.at("regime").get<std::string>());
    out.max_seq_len = p.at("max_seq_len").get<int>();
    out.phase1_len = p.at("phase1_len").get<int>();
    out.phase1_fraction = p.at("phase1_fraction").get<double>();
    out.short_seq_prob = p.at("short_seq_prob").get<double>();
    out.batch_size = p.at("batch_size").get<int>();
    return out;
}

pipeline::MaskingPolicy masking_from(const json& cfg) {
    const json& m = cfg.at("masking");
    pipeline::MaskingPolicy out;
    out.select_prob = m.at("select_prob").get<double>();
    out.mask_frac = m.at("mask_frac").get<double>();
    out.random_frac = m.at("random_frac").get<double>();
    out.keep_frac = m.at("keep_frac").get<double>();
    out.mode = parse_mask_mode(m.at("mode").get<std::string>());
    out.duplication = m.at("duplication").get<int>();
    return out;
}

model::ModelConfig model_from(const json& cfg, int vocab_size) {
    const json& m = cfg.at("model");
    auto preset = model::ModelConfig::preset_by_name(m.at("preset").get<std::string>());
    auto out = model::ModelConfig::from_preset(preset, vocab_size);
    // nonzero values override the preset dimensions
    if (int v = m.at("layers").get<int>(); v > 0) out.layers = v;
    if (int v = m.at("hidden").get<int>(); v > 0) out.hidden = v;
    if (int v = m.at("heads").get<int>(); v > 0) out.heads = v;
    out.max_positions = m.at("max_positions").get<int>();
    out.dropout = m.at("dropout").get<double>();
    out.tie_mlm_weights = m.at("tie_mlm_weights").get<bool>();
    return out;
}

optim::Hyper hyper_from(const json& cfg) {
    const json& o = cfg.at("optim");
    optim::Hyper h;
    h.lr = o.at("lr").get<double>();
    h.beta1 = o.at("beta1").get<double>();
    h.beta2 = o.at("beta2").get<double>();
    h.eps = o.at("eps").get<double>();
    h.weight_decay = o.at("weight_decay").get<double>();
    h.trust_clip_lo = o.at("trust_clip_lo").get<double>();
    h.trust_clip_hi = o.at("trust_clip_hi").get<double>();
    return h;
}

trainer::TrainConfig train_from(const json& cfg) {
    const json& t = cfg.at("train");
    trainer::TrainConfig out;
    out.total_iters = t.at("total_iters").get<std::int64_t>();
    out.batch_size = t.at("batch_size").get<int>();
    for (const auto& it : t.at("checkpoint_iters")) {
        out.checkpoint_iters.push_back(it.get<std::int64_t>());
    }
    out.log_every = t.at("log_every").get<std::int64_t>();
    out.workers = cfg.at("workers").get<int>();
    out.seed = cfg.at("seed").get<std::uint64_t>();
    out.warmup_fraction = t.at("warmup_fraction").get<double>();
    out.out_dir = cfg.at("out_dir").get<std::string>();
    return out;
}

tasks::FinetuneConfig finetune_from(const json& section, std::uint64_t seed) {
    tasks::FinetuneConfig out;
    out.epochs = section.at("epochs").get<int>();
    out.batch_size = section.at("batch_size").get<int>();
    out.lr = section.at("lr").get<double>();
    out.max_seq_len = section.at("max_seq_len").get<int>();
    out.runs = section.at("runs").get<int>();
    out.seed = seed;
    return out;
}

// ---------------------------------------------------------------------------
// File helpers

std::string require_str(const json& section, const std::string& key,
                        const std::string& what) {
    const std::string v = section.at(key).get<std::string>();
    if (v.empty()) throw ConfigError("config: " + what + "/" + key + " is required");
    return v;
}

// Output paths in the config are taken relative to out_dir.
std::string out_path(const json& cfg, const std::string& rel) {
    fs::path p(rel);
    if (p.is_absolute()) return p.string();
    return (fs::path(cfg.at("out_dir").get<std::string>()) / p).string();
}

void write_text_file(const std::string& path, const std::string& content) {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        os << content;
        if (!os) throw DataError("cannot write " + path);
    }
    fs::rename(tmp, path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

json read_json_file(const std::string& path) {
    const std::string text = read_text_file(path);
    json parsed = json::parse(text, nullptr, false);
    if (parsed.is_discarded()) throw DataError("malformed JSON in " + path);
    return parsed;
}

std::string file_hash_hex(const std::string& path) {
    const std::string bytes = read_text_file(path);
    std::ostringstream os;
    os << std::hex << fnv1a(bytes);
    return os.str();
}

std::vector<std::string> predicted_label_lines(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open " + path);
    std::vector<std::string> labels;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) labels.push_back(line);
    }
    return labels;
}

json report_to_json(const eval::F1Report& rep) {
    json per_type = json::object();
    for (const auto& [type, st] : rep.per_type) {
        per_type[type] = {{"gold", st.gold},         {"predicted", st.predicted},
                          {"correct", st.correct},   {"precision", st.precision},
                          {"recall", st.recall},     {"f1", st.f1}};
    }
    return {{"precision", rep.precision},
            {"recall", rep.recall},
            {"f1", rep.f1},
            {"support", rep.support},
            {"per_type", per_type}};
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_defaults() {
    std::cout << default_config().dump(2) << "\n";
    return 0;
}

int cmd_vocab_train(const json& cfg) {
    const json& section = cfg.at("vocab_train");
    const auto store =
        corpus::ingest_file(require_str(section, "corpus", "vocab_train"));
    if (store.empty()) throw DataError("vocab-train: corpus has no documents");
    tok::CounterConfig counter;
    counter.width_bits = section.at("counter_width_bits").get<int>();
    counter.saturating = section.at("saturating").get<bool>();
    tok::TrainStats stats;
    const auto vocab = tok::train_vocab(store, section.at("target_size").get<int>(),
                                        parse_casing(section.at("casing").get<std::string>()),
                                        counter, &stats);
    const std::string out = out_path(cfg, section.at("vocab_out").get<std::string>());
    fs::create_directories(fs::path(out).parent_path().empty()
                               ? fs::path(".")
                               : fs::path(out).parent_path());
    vocab.save(out);
    record_artifacts(cfg.at("out_dir").get<std::string>(), {out});
    std::cout << "vocab-train: " << vocab.size() << " tokens ("
              << stats.merges_performed << " merges) -> " << out << "\n";
    return 0;
}

int cmd_tokenize(const json& cfg) {
    const json& section = cfg.at("tokenize");
    const auto vocab =
        tok::Vocab::load(require_str(section, "vocab", "tokenize"),
                         parse_casing(section.at("casing").get<std::string>()));
    std::ifstream is(require_str(section, "input", "tokenize"));
    if (!is) throw DataError("tokenize: cannot open input file");
    std::ostringstream out;
    std::string line;
    while (std::getline(is, line)) {
        const auto toks = tok::tokenize(line, vocab);
        for (std::size_t i = 0; i < toks.size(); ++i) {
            if (i) out << ' ';
            out << toks[i];
        }
        out << '\n';
    }
    const std::string path = out_path(cfg, section.at("output").get<std::string>());
    write_text_file(path, out.str());
    record_artifacts(cfg.at("out_dir").get<std::string>(), {path});
    std::cout << "tokenize: wrote " << path << "\n";
    return 0;
}

int cmd_build_data(const json& cfg) {
    const json& section = cfg.at("build_data");
    const auto store =
        corpus::ingest_file(require_str(section, "corpus", "build_data"));
    const auto vocab =
        tok::Vocab::load(require_str(section, "vocab", "build_data"),
                         parse_casing(section.at("casing").get<std::string>()));
    const auto pipe = pipeline_from(cfg);
    const auto policy = masking_from(cfg);
    // same derivation the trainer uses, so cached examples match a live run
    const std::uint64_t data_seed =
        mix_seed(cfg.at("seed").get<std::uint64_t>(), 0xDA7A);
    const auto examples =
        pipe.regime == pipeline::Regime::bert
            ? pipeline::build_bert_examples(store, vocab, pipe, policy, data_seed)
            : pipeline::build_packed_examples(store, vocab, pipe, policy, data_seed);
    if (examples.empty()) throw DataError("build-data: corpus produced no examples");
    const std::string path =
        out_path(cfg, section.at("examples_out").get<std::string>());
    if (fs::path(path).has_parent_path()) {
        fs::create_directories(fs::path(path).parent_path());
    }
    pipeline::save_examples(examples, pipe, vocab, path);
    record_artifacts(cfg.at("out_dir").get<std::string>(), {path});
    std::cout << "build-data: " << examples.size() << " examples -> " << path << "\n";
    return 0;
}

int cmd_pretrain(const json& cfg) {
    const json& section = cfg.at("pretrain");
    const auto store = corpus::ingest_file(require_str(section, "corpus", "pretrain"));
    const auto vocab =
        tok::Vocab::load(require_str(section, "vocab", "pretrain"),
                         parse_casing(section.at("casing").get<std::string>()));
    const auto model_cfg = model_from(cfg, vocab.size());
    const auto pipe = pipeline_from(cfg);
    const auto policy = masking_from(cfg);
    const auto train_cfg = train_from(cfg);
    const auto hyper = hyper_from(cfg);

    const auto final_state =
        trainer::pretrain(store, vocab, model_cfg, pipe, policy, train_cfg, hyper);

    std::vector<std::string> artifacts = {
        (fs::path(train_cfg.out_dir) / "metrics.jsonl").string()};
    for (auto it : train_cfg.checkpoint_iters) {
        const std::string path = trainer::checkpoint_path(train_cfg.out_dir, it);
        if (fs::exists(path)) artifacts.push_back(path);
    }
    record_artifacts(train_cfg.out_dir, artifacts);
    const auto metrics = trainer::read_metrics(
        (fs::path(train_cfg.out_dir) / "metrics.jsonl").string());
    std::cout << "pretrain: " << final_state.iteration << " iterations, "
              << final_state.tokens_seen << " tokens";
    if (!metrics.empty()) std::cout << ", final loss " << metrics.back().loss;
    std::cout << "\n";
    return 0;
}

// Shared by `finetune` and the grid: runs one checkpoint against one task
// and reports per-run final dev F-1.
struct CellResult {
    std::vector<std::uint64_t> seeds;
    std::vector<double> final_f1;
    std::vector<std::vector<double>> epoch_f1;
    std::vector<std::int64_t> truncated;
    eval::RunStats stats;
};

CellResult run_finetune_cell(const trainer::Checkpoint& ckpt, const tok::Vocab& vocab,
                             const std::string& kind, const std::string& train_path,
                             const std::string& dev_path,
                             const tasks::FinetuneConfig& ft_cfg,
                             std::vector<model::Parameters>* out_params = nullptr) {
    std::vector<tasks::FinetuneResult> results;
    if (kind == "ner") {
        const auto train = tasks::load_conll(train_path);
        const auto dev = tasks::load_conll(dev_path);
        results = tasks::finetune_ner_runs(ckpt, vocab, train, dev, ft_cfg);
    } else if (kind == "cls") {
        const auto train = tasks::load_cls_tsv(train_path);
        const auto dev = tasks::load_cls_tsv(dev_path);
        results = tasks::finetune_cls_runs(ckpt, vocab, train, dev, ft_cfg);
    } else {
        throw ConfigError("config: task kind must be \"ner\" or \"cls\", got \"" +
                          kind + "\"");
    }
    CellResult cell;
    for (auto& r : results) {
        cell.seeds.push_back(r.seed);
        cell.final_f1.push_back(r.epoch_dev_f1.empty() ? 0.0 : r.epoch_dev_f1.back());
        cell.epoch_f1.push_back(r.epoch_dev_f1);
        cell.truncated.push_back(r.truncated_tokens);
        if (out_params) out_params->push_back(std::move(r.params));
    }
    cell.stats = eval::aggregate_runs(cell.final_f1);
    return cell;
}

int cmd_finetune(const json& cfg) {
    const json& section = cfg.at("finetune");
    const auto ckpt =
        trainer::load_checkpoint(require_str(section, "checkpoint", "finetune"));
    const auto vocab =
        tok::Vocab::load(require_str(section, "vocab", "finetune"),
                         parse_casing(section.at("casing").get<std::string>()));
    const std::string kind = section.at("task").get<std::string>();
    const std::string train_path = require_str(section, "train", "finetune");
    const std::string dev_path = require_str(section, "dev", "finetune");
    const auto ft_cfg = finetune_from(section, cfg.at("seed").get<std::uint64_t>());

    std::vector<model::Parameters> run_params;
    const auto cell = run_finetune_cell(ckpt, vocab, kind, train_path, dev_path,
                                        ft_cfg, &run_params);

    // per-run dev-set predictions, evaluable by the `evaluate` subcommand
    std::vector<std::string> artifacts;
    const std::string pred_prefix = section.at("predictions_out").get<std::string>();
    if (!pred_prefix.empty()) {
        for (std::size_t r = 0; r < run_params.size(); ++r) {
            std::ostringstream out;
            if (kind == "ner") {
                const auto dev = tasks::load_conll(dev_path);
                for (const auto& s : dev.sentences) {
                    const auto tags = tasks::predict_tags(
                        run_params[r], vocab, dev.tag_inventory, s.tokens,
                        ft_cfg.max_seq_len);
                    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
                        out << s.tokens[i] << ' ' << tags[i] << '\n';
                    }
                    out << '\n';
                }
            } else {
                const auto dev = tasks::load_cls_tsv(dev_path);
                for (const auto& ex : dev.examples) {
                    out << tasks::predict_label(run_params[r], vocab,
                                                dev.label_inventory, ex.text,
                                                ft_cfg.max_seq_len)
                        << '\n';
                }
            }
            const std::string ext = kind == "ner" ? ".conll" : ".txt";
            const std::string path = out_path(
                cfg, pred_prefix + "_run" + std::to_string(r) + ext);
            write_text_file(path, out.str());
            artifacts.push_back(path);
        }
    }

    json runs = json::array();
    for (std::size_t r = 0; r < cell.seeds.size(); ++r) {
        runs.push_back({{"seed", cell.seeds[r]},
                        {"final_f1", cell.final_f1[r]},
                        {"epoch_dev_f1", cell.epoch_f1[r]},
                        {"truncated_tokens", cell.truncated[r]}});
    }
    const json results = {{"task", kind},
                          {"train", train_path},
                          {"dev", dev_path},
                          {"mean", cell.stats.mean},
                          {"sd", cell.stats.sd},
                          {"runs", runs}};
    const std::string results_path =
        out_path(cfg, section.at("results_out").get<std::string>());
    write_text_file(results_path, results.dump(2) + "\n");
    artifacts.push_back(results_path);
    record_artifacts(cfg.at("out_dir").get<std::string>(), artifacts);
    std::cout << "finetune: dev F1 " << report::format_percent(cell.stats.mean)
              << " +- " << report::format_percent(cell.stats.sd) << " over "
              << cell.seeds.size() << " runs -> " << results_path << "\n";
    return 0;
}

int cmd_evaluate(const json& cfg) {
    const json& section = cfg.at("evaluate");
    const std::string kind = section.at("task").get<std::string>();
    const std::string gold_path = require_str(section, "gold", "evaluate");
    const std::string pred_path = require_str(section, "pred", "evaluate");
    eval::F1Report rep;
    if (kind == "ner") {
        const auto gold = tasks::load_conll(gold_path);
        const auto pred = tasks::load_conll(pred_path);
        if (gold.sentences.size() != pred.sentences.size()) {
            throw DataError("evaluate: gold and pred sentence counts differ");
        }
        std::vector<std::vector<std::string>> gold_tags, pred_tags;
        for (std::size_t i = 0; i < gold.sentences.size(); ++i) {
            if (gold.sentences[i].tokens.size() != pred.sentences[i].tokens.size()) {
                throw DataError("evaluate: sentence " + std::to_string(i) +
                                " token counts differ between gold and pred");
            }
            gold_tags.push_back(gold.sentences[i].tags);
            pred_tags.push_back(pred.sentences[i].tags);
        }
        rep = eval::conll_f1(gold_tags, pred_tags);
    } else if (kind == "cls") {
        const auto gold = tasks::load_cls_tsv(gold_path);
        const auto pred = predicted_label_lines(pred_path);
        if (gold.examples.size() != pred.size()) {
            throw DataError("evaluate: gold and pred example counts differ");
        }
        std::vector<std::string> gold_labels;
        for (const auto& ex : gold.examples) gold_labels.push_back(ex.label);
        rep = eval::cls_f1(gold_labels, pred,
                           parse_averaging(section.at("averaging").get<std::string>()));
    } else {
        throw ConfigError("config: evaluate/task must be \"ner\" or \"cls\", got \"" +
                          kind + "\"");
    }
    json out = report_to_json(rep);
    out["task"] = kind;
    const std::string results_path =
        out_path(cfg, section.at("results_out").get<std::string>());
    write_text_file(results_path, out.dump(2) + "\n");
    record_artifacts(cfg.at("out_dir").get<std::string>(), {results_path});
    std::cout << "evaluate: precision " << report::format_percent(rep.precision)
              << " recall " << report::format_percent(rep.recall) << " f1 "
              << report::format_percent(rep.f1) << " (support " << rep.support
              << ")\n";
    return 0;
}

// ---------------------------------------------------------------------------
// Sensitivity grid

struct GridCellKey {
    std::string model;
    std::string model_dir;
    std::int64_t checkpoint = 0;
    std::string task;
    std::string kind;
    std::string train;
    std::string dev;

    std::string file_name() const {
        return model + "_" + std::to_string(checkpoint) + "_" + task + ".json";
    }
};

json compute_grid_cell(const GridCellKey& key, const tok::Vocab& vocab,
                       const tasks::FinetuneConfig& ft_cfg,
                       std::int64_t corpus_tokens) {
    const std::string ckpt_path =
        trainer::checkpoint_path(key.model_dir, key.checkpoint);
    json cell = {{"model", key.model},
                 {"checkpoint", key.checkpoint},
                 {"task", key.task}};
    if (!fs::exists(ckpt_path)) {
        cell["error"] = "checkpoint not found: " + ckpt_path;
        return cell;
    }
    try {
        const auto ckpt = trainer::load_checkpoint(ckpt_path);
        const auto res =
            run_finetune_cell(ckpt, vocab, key.kind, key.train, key.dev, ft_cfg);
        json runs = json::array();
        for (std::size_t r = 0; r < res.seeds.size(); ++r) {
            runs.push_back({{"seed", res.seeds[r]}, {"final_f1", res.final_f1[r]}});
        }
        cell["mean"] = res.stats.mean;
        cell["sd"] = res.stats.sd;
        cell["runs"] = runs;
        cell["epochs"] = corpus_tokens > 0
                             ? static_cast<std::int64_t>(ckpt.tokens_seen) /
                                   corpus_tokens
                             : 0;
    } catch (const std::exception& e) {
        cell["error"] = e.what();
    }
    return cell;
}

int cmd_grid(const json& cfg) {
    const json& section = cfg.at("grid");
    const auto& models = section.at("models");
    const auto& task_specs = section.at("tasks");
    if (models.empty()) throw ConfigError("config: grid/models is empty");
    if (task_specs.empty()) throw ConfigError("config: grid/tasks is empty");
    const auto vocab =
        tok::Vocab::load(require_str(section, "vocab", "grid"),
                         parse_casing(section.at("casing").get<std::string>()));
    const auto ft_cfg = finetune_from(section, cfg.at("seed").get<std::uint64_t>());
    const std::int64_t corpus_tokens = section.at("corpus_tokens").get<std::int64_t>();

    std::vector<GridCellKey> keys;
    for (const auto& m : models) {
        for (const auto& it : m.at("checkpoints")) {
            for (const auto& t : task_specs) {
                GridCellKey key;
                key.model = m.at("name").get<std::string>();
                key.model_dir = m.at("dir").get<std::string>();
                key.checkpoint = it.get<std::int64_t>();
                key.task = t.at("name").get<std::string>();
                key.kind = t.at("kind").get<std::string>();
                key.train = t.at("train").get<std::string>();
                key.dev = t.at("dev").get<std::string>();
                keys.push_back(std::move(key));
            }
        }
    }

    const fs::path cells_dir =
        fs::path(cfg.at("out_dir").get<std::string>()) / "grid" / "cells";
    fs::create_directories(cells_dir);

    // Completed cells are skipped so an interrupted grid resumes; error cells
    // are retried.
    std::vector<std::size_t> pending;
    for (std::size_t i = 0; i < keys.size(); ++i) {
        const std::string path = (cells_dir / keys[i].file_name()).string();
        if (fs::exists(path)) {
            json cell = json::parse(read_text_file(path), nullptr, false);
            if (!cell.is_discarded() && !cell.contains("error")) continue;
        }
        pending.push_back(i);
    }

    const int workers =
        std::max(1, std::min<int>(cfg.at("workers").get<int>(),
                                  static_cast<int>(pending.size())));
    std::atomic<std::size_t> next{0};
    std::mutex io_mutex;
    auto work = [&] {
        for (;;) {
            const std::size_t slot = next.fetch_add(1);
            if (slot >= pending.size()) break;
            const auto& key = keys[pending[slot]];
            const json cell = compute_grid_cell(key, vocab, ft_cfg, corpus_tokens);
            std::lock_guard<std::mutex> lock(io_mutex);
            write_text_file((cells_dir / key.file_name()).string(),
                            cell.dump(2) + "\n");
        }
    };
    if (workers <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }

    // Assemble one row per (model, checkpoint) from the cell files.
    std::vector<std::string> task_names;
    std::map<std::string, std::string> task_domain;
    for (const auto& t : task_specs) {
        task_names.push_back(t.at("name").get<std::string>());
        task_domain[t.at("name").get<std::string>()] =
            t.at("domain").get<std::string>();
    }
    json rows = json::array();
    std::vector<std::string> artifacts;
    for (const auto& m : models) {
        for (const auto& it : m.at("checkpoints")) {
            json row = {{"model", m.at("name").get<std::string>()},
                        {"checkpoint", it.get<std::int64_t>()},
                        {"epochs", nullptr},
                        {"tasks", json::object()}};
            for (const auto& name : task_names) {
                const std::string path =
                    (cells_dir / (m.at("name").get<std::string>() + "_" +
                                  std::to_string(it.get<std::int64_t>()) + "_" +
                                  name + ".json"))
                        .string();
                const json cell = read_json_file(path);
                artifacts.push_back(path);
                if (cell.contains("error")) {
                    row["tasks"][name] = {{"error", cell.at("error")}};
                } else {
                    row["tasks"][name] = {{"mean", cell.at("mean")},
                                          {"sd", cell.at("sd")},
                                          {"runs", cell.at("runs")}};
                    row["epochs"] = cell.at("epochs");
                }
            }
            rows.push_back(std::move(row));
        }
    }
    const json results = {{"mean_kind", section.at("mean_kind")},
                          {"corpus_tokens", corpus_tokens},
                          {"tasks", task_names},
                          {"task_domain", task_domain},
                          {"rows", rows}};
    const std::string results_path = out_path(cfg, "grid/results.json");
    write_text_file(results_path, results.dump(2) + "\n");
    artifacts.push_back(results_path);

    // Markdown rendering of the same rows (values live in results.json).
    std::vector<std::string> headers = {"Model", "Iterations", "Epochs"};
    headers.insert(headers.end(), task_names.begin(), task_names.end());
    std::vector<std::vector<std::string>> md_rows;
    for (const auto& row : rows) {
        std::vector<std::string> r = {
            row.at("model").get<std::string>(),
            std::to_string(row.at("checkpoint").get<std::int64_t>()),
            row.at("epochs").is_null()
                ? std::string("-")
                : std::to_string(row.at("epochs").get<std::int64_t>())};
        for (const auto& name : task_names) {
            const json& cell = row.at("tasks").at(name);
            if (cell.contains("error")) {
                r.push_back("error");
            } else {
                r.push_back(report::format_percent(cell.at("mean").get<double>()) +
                            " ± " +
                            report::format_percent(cell.at("sd").get<double>()));
            }
        }
        md_rows.push_back(std::move(r));
    }
    const std::string table_path = out_path(cfg, "grid/results.md");
    write_text_file(table_path, report::markdown_table(headers, md_rows));
    artifacts.push_back(table_path);

    // Per-domain averages when the tasks carry domain labels.
    bool has_domains = false;
    for (const auto& [task, domain] : task_domain) has_domains |= !domain.empty();
    if (has_domains) {
        const auto mean_kind =
            parse_mean_kind(section.at("mean_kind").get<std::string>());
        std::vector<std::string> domains;
        std::vector<std::vector<std::string>> domain_rows;
        for (const auto& row : rows) {
            std::map<std::string, double> scores;
            for (const auto& name : task_names) {
                const json& cell = row.at("tasks").at(name);
                if (!cell.contains("error")) {
                    scores[name] = cell.at("mean").get<double>();
                }
            }
            if (scores.empty()) continue;
            const auto averaged = eval::domain_average(scores, task_domain, mean_kind);
            if (domains.empty()) {
                for (const auto& [d, v] : averaged) {
                    if (d != "Mean") domains.push_back(d);
                }
                domains.push_back("Mean");
            }
            std::vector<std::string> r = {
                row.at("model").get<std::string>(),
                std::to_string(row.at("checkpoint").get<std::int64_t>())};
            for (const auto& d : domains) {
                const auto it = averaged.find(d);
                r.push_back(it == averaged.end()
                                ? std::string("-")
                                : report::format_percent(it->second));
            }
            domain_rows.push_back(std::move(r));
        }
        if (!domain_rows.empty()) {
            std::vector<std::string> dh = {"Model", "Iterations"};
            dh.insert(dh.end(), domains.begin(), domains.end());
            const std::string domains_path = out_path(cfg, "grid/domains.md");
            write_text_file(domains_path, report::markdown_table(dh, domain_rows));
            artifacts.push_back(domains_path);
        }
    }

    record_artifacts(cfg.at("out_dir").get<std::string>(), artifacts);
    std::cout << "grid: " << rows.size() << " rows (" << pending.size()
              << " cells computed, " << keys.size() - pending.size()
              << " reused) -> " << results_path << "\n";
    return 0;
}

int cmd_report(const json& cfg) {
    const json& section = cfg.at("report");
    const auto& runs = section.at("runs");
    const std::string grid_results = section.at("grid_results").get<std::string>();
    if (runs.empty() && grid_results.empty()) {
        throw DataError("report: no metrics logs and no grid results to render");
    }
    std::vector<std::string> artifacts;
    for (const auto& run : runs) {
        const std::string name = run.at("name").get<std::string>();
        const auto metrics =
            trainer::read_metrics(run.at("metrics").get<std::string>());
        std::vector<std::int64_t> checkpoints;
        for (const auto& it : run.at("checkpoints")) {
            checkpoints.push_back(it.get<std::int64_t>());
        }
        const std::string path = out_path(cfg, "report/loss_" + name + ".svg");
        write_text_file(path,
                        report::loss_curve_svg(metrics, checkpoints, name));
        artifacts.push_back(path);
    }
    if (!grid_results.empty()) {
        const json results = read_json_file(grid_results);
        for (const auto& task : results.at("tasks")) {
            const std::string name = task.get<std::string>();
            std::vector<report::ErrorBar> bars;
            for (const auto& row : results.at("rows")) {
                const json& cell = row.at("tasks").at(name);
                if (cell.contains("error")) continue;
                bars.push_back({row.at("model").get<std::string>() + "@" +
                                    std::to_string(
                                        row.at("checkpoint").get<std::int64_t>()),
                                cell.at("mean").get<double>(),
                                cell.at("sd").get<double>()});
            }
            if (bars.empty()) continue;
            const std::string svg_path = out_path(cfg, "report/f1_" + name + ".svg");
            const std::string csv_path = out_path(cfg, "report/f1_" + name + ".csv");
            write_text_file(svg_path, report::error_bar_svg(bars, name));
            write_text_file(csv_path, report::error_bar_csv(bars));
            artifacts.push_back(svg_path);
            artifacts.push_back(csv_path);
        }
    }
    if (artifacts.empty()) throw DataError("report: inputs produced no artifacts");
    record_artifacts(cfg.at("out_dir").get<std::string>(), artifacts);
    std::cout << "report: wrote " << artifacts.size() << " files\n";
    return 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// Public surface

json default_config() {
    return json{
        {"seed", 0},
        {"out_dir", "out"},
        {"workers", 1},
        {"vocab_train",
         {{"corpus", ""},
          {"target_size", 1000},
          {"casing", "cased"},
          {"counter_width_bits", 64},
          {"saturating", false},
          {"vocab_out", "vocab.txt"}}},
        {"tokenize",
         {{"vocab", ""}, {"casing", "cased"}, {"input", ""}, {"output", "tokens.txt"}}},
        {"build_data",
         {{"corpus", ""},
          {"vocab", ""},
          {"casing", "cased"},
          {"examples_out", "examples.bin"}}},
        {"pipeline",
         {{"regime", "scholar"},
          {"max_seq_len", 128},
          {"phase1_len", 32},
          {"phase1_fraction", 0.9},
          {"short_seq_prob", 0.1},
          {"batch_size", 8}}},
        {"masking",
         {{"select_prob", 0.15},
          {"mask_frac", 0.8},
          {"random_frac", 0.1},
          {"keep_frac", 0.1},
          {"mode", "dynamic"},
          {"duplication", 10}}},
        {"model",
         {{"preset", "tiny"},
          {"layers", 0},
          {"hidden", 0},
          {"heads", 0},
          {"max_positions", 512},
          {"dropout", 0.1},
          {"tie_mlm_weights", true}}},
        {"train",
         {{"total_iters", 100},
          {"batch_size", 8},
          {"checkpoint_iters", json::array()},
          {"log_every", 10},
          {"warmup_fraction", 0.06}}},
        {"optim",
         {{"lr", 4e-4},
          {"beta1", 0.9},
          {"beta2", 0.999},
          {"eps", 1e-6},
          {"weight_decay", 0.01},
          {"trust_clip_lo", 0.0},
          {"trust_clip_hi", 10.0}}},
        {"pretrain", {{"corpus", ""}, {"vocab", ""}, {"casing", "cased"}}},
        {"finetune",
         {{"checkpoint", ""},
          {"vocab", ""},
          {"casing", "cased"},
          {"task", "ner"},
          {"train", ""},
          {"dev", ""},
          {"epochs", 3},
          {"batch_size", 16},
          {"lr", 3e-5},
          {"max_seq_len", 128},
          {"runs", 5},
          {"results_out", "finetune.json"},
          {"predictions_out", "pred"}}},
        {"evaluate",
         {{"task", "ner"},
          {"gold", ""},
          {"pred", ""},
          {"averaging", "micro"},
          {"results_out", "eval.json"}}},
        {"grid",
         {{"vocab", ""},
          {"casing", "cased"},
          {"corpus_tokens", 0},
          {"mean_kind", "domains"},
          {"models", json::array()},
          {"tasks", json::array()},
          {"epochs", 3},
          {"batch_size", 16},
          {"lr", 3e-5},
          {"max_seq_len", 128},
          {"runs", 2}}},
        {"report", {{"runs", json::array()}, {"grid_results", ""}}},
    };
}

void validate_config(const json& user) {
    check_node(user, default_config(), "");
}

json merge_config(const json& user) {
    validate_config(user);
    return merge_node(default_config(), user);
}

void record_artifacts(const std::string& out_dir,
                      const std::vector<std::string>& paths) {
    fs::create_directories(out_dir);
    const std::string manifest_path = (fs::path(out_dir) / "manifest.json").string();
    json manifest = {{"artifacts", json::object()}};
    if (fs::exists(manifest_path)) {
        json existing = json::parse(read_text_file(manifest_path), nullptr, false);
        if (!existing.is_discarded() && existing.contains("artifacts")) {
            manifest = std::move(existing);
        }
    }
    for (const auto& path : paths) {
        manifest["artifacts"][path] = file_hash_hex(path);
    }
    write_text_file(manifest_path, manifest.dump(2) + "\n");
}

int run(const std::vector<std::string>& args) {
    CLI::App app{"masked-language-model pretraining and evaluation toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("--config", config_path, "JSON config file")->expected(1);
    std::int64_t seed = -1;
    app.add_option("--seed", seed, "override config seed");
    std::string out_dir;
    app.add_option("--out-dir", out_dir, "override config out_dir");
    int workers = 0;
    app.add_option("--workers", workers, "override config workers");

    const std::vector<std::string> names = {"defaults", "vocab-train", "tokenize",
                                            "build-data", "pretrain",  "finetune",
                                            "evaluate",   "grid",      "report"};
    for (const auto& name : names) app.add_subcommand(name)->fallthrough();

    // CLI11 wants argv in reverse without the program name.
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        const std::string sub = app.get_subcommands().front()->get_name();
        if (sub == "defaults") return cmd_defaults();

        json user = json::object();
        if (!config_path.empty()) {
            json parsed = json::parse(read_text_file(config_path), nullptr, false);
            if (parsed.is_discarded()) {
                throw ConfigError("config: malformed JSON in " + config_path);
            }
            user = std::move(parsed);
        }
        json cfg = merge_config(user);
        if (seed >= 0) cfg["seed"] = seed;
        if (!out_dir.empty()) cfg["out_dir"] = out_dir;
        if (workers > 0) cfg["workers"] = workers;
        fs::create_directories(cfg.at("out_dir").get<std::string>());

        if (sub == "vocab-train") return cmd_vocab_train(cfg);
        if (sub == "tokenize") return cmd_tokenize(cfg);
        if (sub == "build-data") return cmd_build_data(cfg);
        if (sub == "pretrain") return cmd_pretrain(cfg);
        if (sub == "finetune") return cmd_finetune(cfg);
        if (sub == "evaluate") return cmd_evaluate(cfg);
        if (sub == "grid") return cmd_grid(cfg);
        if (sub == "report") return cmd_report(cfg);
        throw ConfigError("unknown subcommand: " + sub);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

int run(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args);
}

}  // namespace smlm::cli
