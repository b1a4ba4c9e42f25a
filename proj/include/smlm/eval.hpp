#pragma once

// Entity-level NER scoring (conlleval semantics), multi-class classification
// F-1, multi-run mean/SD aggregation, and per-domain score averaging.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "smlm/common.hpp"

namespace smlm::eval {

struct EntitySpan {
    int start = 0;  // token index
    int end = 0;    // inclusive
    std::string type;

    bool operator==(const EntitySpan&) const = default;
    auto operator<=>(const EntitySpan&) const = default;
};

struct TypeStats {
    std::int64_t gold = 0;
    std::int64_t predicted = 0;
    std::int64_t correct = 0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

struct F1Report {
    double precision = 0.0;  // in [0,1]
    double recall = 0.0;
    double f1 = 0.0;
    std::int64_t support = 0;  // gold entity / example count
    std::map<std::string, TypeStats> per_type;
};

// Maximal B-X (I-X)* runs; an orphan I-X (after O, a different type, or at
// sentence start) opens a new entity, matching the CoNLL evaluation script.
std::vector<EntitySpan> extract_entities(const std::vector<std::string>& tags);

// Exact span-and-type matching, micro-averaged, with per-type breakdown.
F1Report conll_f1(const std::vector<std::vector<std::string>>& gold,
                  const std::vector<std::vector<std::string>>& pred);

enum class Averaging { micro, macro };

F1Report cls_f1(const std::vector<std::string>& gold,
                const std::vector<std::string>& pred, Averaging averaging);

struct RunStats {
    double mean = 0.0;
    double sd = 0.0;  // sample standard deviation (n-1)
};

RunStats aggregate_runs(const std::vector<double>& values);

struct AggregateReport {
    RunStats precision, recall, f1;
};

AggregateReport aggregate_runs(const std::vector<F1Report>& reports);

enum class MeanKind { of_domains, of_tasks };

// Unweighted mean of task scores per domain; the returned map additionally
// carries a "Mean" entry that averages domain means (or raw task scores
// under MeanKind::of_tasks).
std::map<std::string, double> domain_average(
    const std::map<std::string, double>& task_scores,
    const std::map<std::string, std::string>& task_domain,
    MeanKind mean_kind = MeanKind::of_domains);

}  // namespace smlm::eval
