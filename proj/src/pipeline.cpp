#include "smlm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace smlm::pipeline {

using tok::kClsId;
using tok::kMaskId;
using tok::kNumSpecials;
using tok::kPadId;
using tok::kSepId;

void MaskingPolicy::validate() const {
    if (select_prob < 0.0 || select_prob > 1.0) {
        throw ConfigError("masking: select_prob must be in [0, 1]");
    }
    if (std::abs(mask_frac + random_frac + keep_frac - 1.0) > 1e-9) {
        throw ConfigError("masking: mask/random/keep fractions must sum to 1");
    }
    if (mode == MaskMode::static_mask && duplication < 1) {
        throw ConfigError("masking: duplication must be >= 1");
    }
}

void PipelineConfig::validate() const {
    if (max_seq_len < 8) throw ConfigError("pipeline: max_seq_len too small");
    if (phase1_len < 8) throw ConfigError("pipeline: phase1_len too small");
    if (regime == Regime::bert && phase1_len >= max_seq_len) {
        throw ConfigError("pipeline: phase1_len must be < max_seq_len");
    }
    if (phase1_fraction < 0.0 || phase1_fraction > 1.0) {
        throw ConfigError("pipeline: phase1_fraction must be in [0, 1]");
    }
    if (short_seq_prob < 0.0 || short_seq_prob > 1.0) {
        throw ConfigError("pipeline: short_seq_prob must be in [0, 1]");
    }
    if (batch_size < 1) throw ConfigError("pipeline: batch_size must be >= 1");
}

std::uint64_t PipelineConfig::hash() const {
    std::string repr = std::to_string(static_cast<int>(regime)) + '|' +
                       std::to_string(max_seq_len) + '|' + std::to_string(phase1_len) +
                       '|' + std::to_string(phase1_fraction) + '|' +
                       std::to_string(short_seq_prob) + '|' + std::to_string(batch_size);
    return fnv1a(repr);
}

static bool maskable(int id) { return id != kPadId && id != kClsId && id != kSepId; }

MaskedIds apply_masking(const std::vector<int>& input_ids, const MaskingPolicy& policy,
                        Rng& rng, const tok::Vocab& vocab) {
    policy.validate();
    if (vocab.size() < 6) {
        throw ConfigError("apply_masking: vocab too small for random replacement");
    }
    MaskedIds out;
    out.input_ids = input_ids;
    out.mlm_labels.assign(input_ids.size(), kIgnoreLabel);
    for (std::size_t i = 0; i < input_ids.size(); ++i) {
        if (!maskable(input_ids[i])) continue;
        if (!rng.bernoulli(policy.select_prob)) continue;
        out.mlm_labels[i] = input_ids[i];
        const double r = rng.uniform();
        if (r < policy.mask_frac) {
            out.input_ids[i] = kMaskId;
        } else if (r < policy.mask_frac + policy.random_frac) {
            out.input_ids[i] =
                kNumSpecials + static_cast<int>(rng.below(
                                   static_cast<std::uint64_t>(vocab.size() - kNumSpecials)));
        }  // else: keep original
    }
    return out;
}

// ---------------------------------------------------------------------------
// Example construction

namespace {

// Tokenized sentences per document, dropping empties.
std::vector<std::vector<std::vector<int>>> tokenize_docs(
    const corpus::CorpusStore& corpus, const tok::Vocab& vocab) {
    std::vector<std::vector<std::vector<int>>> docs;
    docs.reserve(corpus.size());
    for (const auto& d : corpus.docs) {
        std::vector<std::vector<int>> sents;
        for (const auto& s : corpus::split_sentences(d.text)) {
            auto ids = tok::encode_text(s, vocab);
            if (!ids.empty()) sents.push_back(std::move(ids));
        }
        docs.push_back(std::move(sents));
    }
    return docs;
}

int pick_target_len(int budget, double short_seq_prob, Rng& rng) {
    if (budget > 16 && rng.bernoulli(short_seq_prob)) {
        return 16 + static_cast<int>(rng.below(static_cast<std::uint64_t>(budget - 15)));
    }
    return budget;
}

std::vector<int> concat_sents(const std::vector<std::vector<int>>& sents, std::size_t lo,
                              std::size_t hi) {
    std::vector<int> out;
    for (std::size_t i = lo; i < hi; ++i) {
        out.insert(out.end(), sents[i].begin(), sents[i].end());
    }
    return out;
}

PretrainExample make_pair_example(std::vector<int> a, std::vector<int> b,
                                  NspLabel label, int max_seq_len,
                                  std::uint32_t doc_index) {
    // trim to budget: B first, then the tail of A
    const int budget = max_seq_len - 3;
    while (static_cast<int>(a.size() + b.size()) > budget) {
        if (b.size() > a.size()) {
            b.pop_back();
        } else {
            a.pop_back();
        }
    }
    PretrainExample ex;
    ex.nsp_label = label;
    ex.doc_index = doc_index;
    ex.input_ids.push_back(kClsId);
    ex.segment_ids.push_back(0);
    for (int id : a) {
        ex.input_ids.push_back(id);
        ex.segment_ids.push_back(0);
    }
    ex.input_ids.push_back(kSepId);
    ex.segment_ids.push_back(0);
    for (int id : b) {
        ex.input_ids.push_back(id);
        ex.segment_ids.push_back(1);
    }
    ex.input_ids.push_back(kSepId);
    ex.segment_ids.push_back(1);
    return ex;
}

}  // namespace

std::vector<PretrainExample> build_bert_examples(const corpus::CorpusStore& corpus,
                                                 const tok::Vocab& vocab,
                                                 const PipelineConfig& cfg,
                                                 const MaskingPolicy& policy,
                                                 std::uint64_t seed) {
    cfg.validate();
    policy.validate();
    if (cfg.regime != Regime::bert) {
        throw ConfigError("build_bert_examples: config regime is not bert");
    }
    if (policy.mode != MaskMode::static_mask) {
        throw ConfigError("build_bert_examples: bert regime requires static masking");
    }
    const auto docs = tokenize_docs(corpus, vocab);

    // random-sentence donor pool
    std::vector<std::pair<std::size_t, std::size_t>> donor;  // (doc, sent)
    for (std::size_t d = 0; d < docs.size(); ++d) {
        for (std::size_t s = 0; s < docs[d].size(); ++s) donor.emplace_back(d, s);
    }

    Rng rng(mix_seed(seed, 0xb0d7));
    std::vector<PretrainExample> pairs;
    for (std::size_t d = 0; d < docs.size(); ++d) {
        const auto& sents = docs[d];
        if (sents.empty()) continue;
        const int budget = cfg.max_seq_len - 3;
        int target = pick_target_len(budget, cfg.short_seq_prob, rng);

        std::vector<std::vector<int>> chunk;
        int chunk_len = 0;
        for (std::size_t i = 0; i < sents.size(); ++i) {
            chunk.push_back(sents[i]);
            chunk_len += static_cast<int>(sents[i].size());
            if (chunk_len < target && i + 1 < sents.size()) continue;

            const std::size_t a_end =
                chunk.size() >= 2 ? 1 + rng.below(chunk.size() - 1) : 1;
            std::vector<int> a = concat_sents(chunk, 0, a_end);
            const bool can_continue = a_end < chunk.size();
            const bool other_docs_exist = donor.size() > sents.size();
            bool next = can_continue && (!other_docs_exist || rng.bernoulli(0.5));
            if (!can_continue && !other_docs_exist) {
                // nothing usable as segment B
                chunk.clear();
                chunk_len = 0;
                continue;
            }
            std::vector<int> b;
            if (next) {
                b = concat_sents(chunk, a_end, chunk.size());
            } else {
                // draw from a different document
                std::pair<std::size_t, std::size_t> pick;
                do {
                    pick = donor[rng.below(donor.size())];
                } while (pick.first == d);
                const int fill = std::max(1, target - static_cast<int>(a.size()));
                for (std::size_t s = pick.second;
                     s < docs[pick.first].size() && static_cast<int>(b.size()) < fill; ++s) {
                    b.insert(b.end(), docs[pick.first][s].begin(),
                             docs[pick.first][s].end());
                }
                // unused continuation sentences go back for the next chunk
                if (can_continue) {
                    i -= chunk.size() - a_end;
                }
            }
            if (!b.empty()) {
                pairs.push_back(make_pair_example(
                    std::move(a), std::move(b),
                    next ? NspLabel::is_next : NspLabel::not_next, cfg.max_seq_len,
                    static_cast<std::uint32_t>(d)));
            }
            chunk.clear();
            chunk_len = 0;
            target = pick_target_len(budget, cfg.short_seq_prob, rng);
        }
    }

    // static masking: `duplication` copies, each with its own seed
    std::vector<PretrainExample> out;
    out.reserve(pairs.size() * static_cast<std::size_t>(policy.duplication));
    for (int copy = 0; copy < policy.duplication; ++copy) {
        for (std::size_t e = 0; e < pairs.size(); ++e) {
            PretrainExample ex = pairs[e];
            Rng mask_rng(mix_seed(mix_seed(seed, static_cast<std::uint64_t>(copy)),
                                  static_cast<std::uint64_t>(e)));
            auto masked = apply_masking(ex.input_ids, policy, mask_rng, vocab);
            ex.input_ids = std::move(masked.input_ids);
            ex.mlm_labels = std::move(masked.mlm_labels);
            out.push_back(std::move(ex));
        }
    }
    return out;
}

std::vector<PretrainExample> build_packed_examples(const corpus::CorpusStore& corpus,
                                                   const tok::Vocab& vocab,
                                                   const PipelineConfig& cfg,
                                                   const MaskingPolicy& policy,
                                                   std::uint64_t seed) {
    cfg.validate();
    policy.validate();
    if (cfg.regime != Regime::scholar) {
        throw ConfigError("build_packed_examples: config regime is not scholar");
    }
    const auto docs = tokenize_docs(corpus, vocab);
    Rng rng(mix_seed(seed, 0x5c01));

    std::vector<PretrainExample> out;
    for (std::size_t d = 0; d < docs.size(); ++d) {
        // flatten the document's token stream, then cut into examples; no
        // example ever crosses into the next document
        std::vector<int> stream;
        for (const auto& s : docs[d]) stream.insert(stream.end(), s.begin(), s.end());
        std::size_t pos = 0;
        while (pos < stream.size()) {
            const int budget = cfg.max_seq_len - 2;  // CLS ... SEP
            const int target = pick_target_len(budget, cfg.short_seq_prob, rng);
            const std::size_t take =
                std::min(static_cast<std::size_t>(target), stream.size() - pos);
            PretrainExample ex;
            ex.doc_index = static_cast<std::uint32_t>(d);
            ex.input_ids.push_back(kClsId);
            ex.input_ids.insert(ex.input_ids.end(), stream.begin() + pos,
                                stream.begin() + pos + take);
            ex.input_ids.push_back(kSepId);
            ex.segment_ids.assign(ex.input_ids.size(), 0);
            out.push_back(std::move(ex));
            pos += take;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batching

PretrainExample truncate_example(const PretrainExample& ex, int max_len) {
    if (static_cast<int>(ex.input_ids.size()) <= max_len) return ex;
    PretrainExample out;
    out.nsp_label = ex.nsp_label;
    out.doc_index = ex.doc_index;
    const std::size_t keep = static_cast<std::size_t>(max_len) - 1;
    out.input_ids.assign(ex.input_ids.begin(),
                         ex.input_ids.begin() + static_cast<std::ptrdiff_t>(keep));
    out.segment_ids.assign(ex.segment_ids.begin(),
                           ex.segment_ids.begin() + static_cast<std::ptrdiff_t>(keep));
    if (!ex.mlm_labels.empty()) {
        out.mlm_labels.assign(ex.mlm_labels.begin(),
                              ex.mlm_labels.begin() + static_cast<std::ptrdiff_t>(keep));
        out.mlm_labels.push_back(kIgnoreLabel);
    }
    out.input_ids.push_back(kSepId);
    out.segment_ids.push_back(out.segment_ids.back());
    return out;
}

Batch assemble_batch(std::vector<PretrainExample> examples) {
    Batch batch;
    int max_len = 0;
    for (const auto& ex : examples) {
        max_len = std::max(max_len, static_cast<int>(ex.input_ids.size()));
    }
    batch.seq_len = max_len;
    for (auto& ex : examples) {
        const std::size_t n = ex.input_ids.size();
        std::vector<int> mask(static_cast<std::size_t>(max_len), 0);
        std::fill(mask.begin(), mask.begin() + static_cast<std::ptrdiff_t>(n), 1);
        ex.input_ids.resize(static_cast<std::size_t>(max_len), kPadId);
        ex.segment_ids.resize(static_cast<std::size_t>(max_len), 0);
        if (!ex.mlm_labels.empty()) {
            ex.mlm_labels.resize(static_cast<std::size_t>(max_len), kIgnoreLabel);
        }
        batch.attention_mask.push_back(std::move(mask));
        batch.examples.push_back(std::move(ex));
    }
    return batch;
}

std::vector<Batch> make_batches(const std::vector<PretrainExample>& stream,
                                const PipelineConfig& cfg, const MaskingPolicy& policy,
                                const tok::Vocab& vocab, std::uint64_t seed) {
    cfg.validate();
    policy.validate();
    std::vector<Batch> batches;
    std::vector<PretrainExample> cur;
    for (std::size_t i = 0; i < stream.size(); ++i) {
        PretrainExample ex = stream[i];
        if (policy.mode == MaskMode::dynamic_mask) {
            Rng rng(mix_seed(seed, i));
            auto masked = apply_masking(ex.input_ids, policy, rng, vocab);
            ex.input_ids = std::move(masked.input_ids);
            ex.mlm_labels = std::move(masked.mlm_labels);
        }
        cur.push_back(std::move(ex));
        if (static_cast<int>(cur.size()) == cfg.batch_size) {
            batches.push_back(assemble_batch(std::move(cur)));
            cur.clear();
        }
    }
    if (!cur.empty()) batches.push_back(assemble_batch(std::move(cur)));
    return batches;
}

// ---------------------------------------------------------------------------
// Example cache

static constexpr char kCacheMagic[4] = {'S', 'E', 'X', 'C'};
static constexpr std::uint16_t kCacheVersion = 1;

static void write_ivec(BinaryWriter& w, const std::vector<int>& v) {
    w.u64(v.size());
    for (int x : v) w.i64(x);
}

static std::vector<int> read_ivec(BinaryReader& r) {
    const std::uint64_t n = r.u64();
    if (n > (1ULL << 28)) throw DataError("example cache: implausible record length");
    std::vector<int> v(n);
    for (auto& x : v) x = static_cast<int>(r.i64());
    return v;
}

void save_examples(const std::vector<PretrainExample>& examples,
                   const PipelineConfig& cfg, const tok::Vocab& vocab,
                   const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + path);
    BinaryWriter w(os);
    w.bytes(kCacheMagic, 4);
    w.u16(kCacheVersion);
    w.u64(vocab.hash());
    w.u64(cfg.hash());
    w.u64(examples.size());
    for (const auto& ex : examples) {
        write_ivec(w, ex.input_ids);
        write_ivec(w, ex.segment_ids);
        write_ivec(w, ex.mlm_labels);
        w.i64(static_cast<int>(ex.nsp_label));
        w.u32(ex.doc_index);
    }
}

std::vector<PretrainExample> load_examples(const PipelineConfig& cfg,
                                           const tok::Vocab& vocab,
                                           const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path);
    BinaryReader r(is);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kCacheMagic, 4) != 0) {
        throw DataError("example cache: bad magic");
    }
    if (r.u16() != kCacheVersion) throw DataError("example cache: unsupported version");
    if (r.u64() != vocab.hash()) {
        throw DataError("example cache: vocab hash mismatch");
    }
    if (r.u64() != cfg.hash()) {
        throw DataError("example cache: pipeline config hash mismatch");
    }
    const std::uint64_t n = r.u64();
    std::vector<PretrainExample> out;
    out.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        PretrainExample ex;
        ex.input_ids = read_ivec(r);
        ex.segment_ids = read_ivec(r);
        ex.mlm_labels = read_ivec(r);
        ex.nsp_label = static_cast<NspLabel>(r.i64());
        ex.doc_index = r.u32();
        out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace smlm::pipeline
