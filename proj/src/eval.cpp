#include "smlm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace smlm::eval {

namespace {

double harmonic(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

struct Tag {
    char prefix = 'O';  // 'B', 'I', or 'O'
    std::string type;
};

Tag parse_tag(const std::string& tag) {
    if (tag == "O") return {};
    if (tag.size() < 3 || (tag[0] != 'B' && tag[0] != 'I') || tag[1] != '-') {
        throw DataError("eval: malformed IOB2 tag '" + tag + "'");
    }
    return {tag[0], tag.substr(2)};
}

void fill_rates(TypeStats& s) {
    s.precision = s.predicted > 0
                      ? static_cast<double>(s.correct) / static_cast<double>(s.predicted)
                      : 0.0;
    s.recall =
        s.gold > 0 ? static_cast<double>(s.correct) / static_cast<double>(s.gold) : 0.0;
    s.f1 = harmonic(s.precision, s.recall);
}

}  // namespace

std::vector<EntitySpan> extract_entities(const std::vector<std::string>& tags) {
    std::vector<EntitySpan> spans;
    bool open = false;
    EntitySpan cur;
    auto close = [&](int end) {
        if (open) {
            cur.end = end;
            spans.push_back(cur);
            open = false;
        }
    };
    for (int i = 0; i < static_cast<int>(tags.size()); ++i) {
        const Tag t = parse_tag(tags[static_cast<std::size_t>(i)]);
        if (t.prefix == 'O') {
            close(i - 1);
        } else if (t.prefix == 'B') {
            close(i - 1);
            open = true;
            cur.start = i;
            cur.type = t.type;
        } else {  // I-X continues a same-type entity, otherwise opens one
            if (!open || cur.type != t.type) {
                close(i - 1);
                open = true;
                cur.start = i;
                cur.type = t.type;
            }
        }
    }
    close(static_cast<int>(tags.size()) - 1);
    return spans;
}

F1Report conll_f1(const std::vector<std::vector<std::string>>& gold,
                  const std::vector<std::vector<std::string>>& pred) {
    if (gold.size() != pred.size()) {
        throw DataError("conll_f1: sentence counts differ (" + std::to_string(gold.size()) +
                        " vs " + std::to_string(pred.size()) + ")");
    }
    F1Report rep;
    std::int64_t gold_total = 0, pred_total = 0, correct_total = 0;
    for (std::size_t s = 0; s < gold.size(); ++s) {
        if (gold[s].size() != pred[s].size()) {
            throw DataError("conll_f1: token counts differ in sentence " +
                            std::to_string(s));
        }
        const auto g = extract_entities(gold[s]);
        const auto p = extract_entities(pred[s]);
        const std::set<EntitySpan> gset(g.begin(), g.end());
        for (const auto& e : g) {
            ++rep.per_type[e.type].gold;
            ++gold_total;
        }
        for (const auto& e : p) {
            auto& row = rep.per_type[e.type];
            ++row.predicted;
            ++pred_total;
            if (gset.count(e)) {
                ++row.correct;
                ++correct_total;
            }
        }
    }
    for (auto& [type, row] : rep.per_type) fill_rates(row);
    rep.support = gold_total;
    rep.precision = pred_total > 0 ? static_cast<double>(correct_total) /
                                         static_cast<double>(pred_total)
                                   : 0.0;
    rep.recall = gold_total > 0 ? static_cast<double>(correct_total) /
                                      static_cast<double>(gold_total)
                                : 0.0;
    rep.f1 = harmonic(rep.precision, rep.recall);
    return rep;
}

F1Report cls_f1(const std::vector<std::string>& gold,
                const std::vector<std::string>& pred, Averaging averaging) {
    if (gold.empty()) throw DataError("cls_f1: empty input");
    if (gold.size() != pred.size()) {
        throw DataError("cls_f1: label counts differ (" + std::to_string(gold.size()) +
                        " vs " + std::to_string(pred.size()) + ")");
    }
    F1Report rep;
    rep.support = static_cast<std::int64_t>(gold.size());
    for (std::size_t i = 0; i < gold.size(); ++i) {
        ++rep.per_type[gold[i]].gold;
        ++rep.per_type[pred[i]].predicted;
        if (gold[i] == pred[i]) ++rep.per_type[gold[i]].correct;
    }
    std::int64_t tp = 0, gold_total = 0, pred_total = 0;
    for (auto& [label, row] : rep.per_type) {
        fill_rates(row);
        tp += row.correct;
        gold_total += row.gold;
        pred_total += row.predicted;
    }
    if (averaging == Averaging::micro) {
        rep.precision =
            pred_total > 0 ? static_cast<double>(tp) / static_cast<double>(pred_total) : 0.0;
        rep.recall =
            gold_total > 0 ? static_cast<double>(tp) / static_cast<double>(gold_total) : 0.0;
        rep.f1 = harmonic(rep.precision, rep.recall);
    } else {
        double p = 0.0, r = 0.0, f = 0.0;
        for (const auto& [label, row] : rep.per_type) {
            p += row.precision;
            r += row.recall;
            f += row.f1;
        }
        const double n = static_cast<double>(rep.per_type.size());
        rep.precision = p / n;
        rep.recall = r / n;
        rep.f1 = f / n;
    }
    return rep;
}

RunStats aggregate_runs(const std::vector<double>& values) {
    if (values.empty()) throw DataError("aggregate_runs: no values");
    RunStats s;
    for (double v : values) s.mean += v;
    s.mean /= static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - s.mean) * (v - s.mean);
        s.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    return s;
}

AggregateReport aggregate_runs(const std::vector<F1Report>& reports) {
    std::vector<double> p, r, f;
    for (const auto& rep : reports) {
        p.push_back(rep.precision);
        r.push_back(rep.recall);
        f.push_back(rep.f1);
    }
    return {aggregate_runs(p), aggregate_runs(r), aggregate_runs(f)};
}

std::map<std::string, double> domain_average(
    const std::map<std::string, double>& task_scores,
    const std::map<std::string, std::string>& task_domain, MeanKind mean_kind) {
    std::map<std::string, std::pair<double, int>> acc;
    for (const auto& [task, score] : task_scores) {
        auto it = task_domain.find(task);
        if (it == task_domain.end()) {
            throw DataError("domain_average: task '" + task + "' has no domain mapping");
        }
        auto& [sum, n] = acc[it->second];
        sum += score;
        n += 1;
    }
    std::map<std::string, double> out;
    for (const auto& [domain, sn] : acc) out[domain] = sn.first / sn.second;
    if (mean_kind == MeanKind::of_domains) {
        double s = 0.0;
        for (const auto& [domain, mean] : out) s += mean;
        out["Mean"] = out.empty() ? 0.0 : s / static_cast<double>(out.size());
    } else {
        double s = 0.0;
        for (const auto& [task, score] : task_scores) s += score;
        out["Mean"] =
            task_scores.empty() ? 0.0 : s / static_cast<double>(task_scores.size());
    }
    return out;
}

}  // namespace smlm::eval
