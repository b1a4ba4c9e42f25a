#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <regex>

#include "smlm/eval.hpp"

using namespace smlm;
using namespace smlm::eval;

namespace {

const std::vector<std::string> kTagAlphabet = {"O", "B-A", "I-A", "B-B", "I-B"};

std::vector<std::string> random_tags(Rng& rng, int len) {
    std::vector<std::string> tags;
    for (int i = 0; i < len; ++i) {
        tags.push_back(kTagAlphabet[rng.below(kTagAlphabet.size())]);
    }
    return tags;
}

// Independent oracle: encode the tag sequence as one character per token and
// find entities with regular expressions instead of a state machine.
std::vector<EntitySpan> regex_oracle(const std::vector<std::string>& tags) {
    std::string s;
    for (const auto& t : tags) {
        if (t == "B-A") s += 'P';
        else if (t == "I-A") s += 'p';
        else if (t == "B-B") s += 'Q';
        else if (t == "I-B") s += 'q';
        else s += '.';
    }
    std::vector<EntitySpan> spans;
    const std::pair<std::regex, std::string> patterns[] = {
        {std::regex("[Pp]p*"), "A"},
        {std::regex("[Qq]q*"), "B"},
    };
    for (const auto& [re, type] : patterns) {
        for (auto it = std::sregex_iterator(s.begin(), s.end(), re);
             it != std::sregex_iterator(); ++it) {
            EntitySpan e;
            e.start = static_cast<int>(it->position());
            e.end = e.start + static_cast<int>(it->length()) - 1;
            e.type = type;
            spans.push_back(e);
        }
    }
    std::sort(spans.begin(), spans.end());
    return spans;
}

// Second oracle: micro precision/recall/F1 computed from the regex spans,
// compared at conlleval's printed two-decimal percent precision.
struct OracleScores {
    double precision, recall, f1;
};
OracleScores script_oracle(const std::vector<std::vector<std::string>>& gold,
                           const std::vector<std::vector<std::string>>& pred) {
    long g = 0, p = 0, ok = 0;
    for (std::size_t s = 0; s < gold.size(); ++s) {
        auto gs = regex_oracle(gold[s]);
        auto ps = regex_oracle(pred[s]);
        g += static_cast<long>(gs.size());
        p += static_cast<long>(ps.size());
        for (const auto& e : ps) {
            if (std::find(gs.begin(), gs.end(), e) != gs.end()) ++ok;
        }
    }
    OracleScores o{};
    o.precision = p > 0 ? 100.0 * ok / p : 0.0;
    o.recall = g > 0 ? 100.0 * ok / g : 0.0;
    o.f1 = o.precision + o.recall > 0
               ? 2 * o.precision * o.recall / (o.precision + o.recall)
               : 0.0;
    return o;
}

double printed(double percent) { return std::round(percent * 100.0) / 100.0; }

}  // namespace

TEST_CASE("extract_entities: basic runs") {
    CHECK(extract_entities({"B-A", "I-A", "O", "B-B"}) ==
          std::vector<EntitySpan>{{0, 1, "A"}, {3, 3, "B"}});
    CHECK(extract_entities({"O", "O", "O"}).empty());
    CHECK(extract_entities({}).empty());
    // B starts a fresh entity even directly after another entity
    CHECK(extract_entities({"B-A", "B-A"}) ==
          std::vector<EntitySpan>{{0, 0, "A"}, {1, 1, "A"}});
}

TEST_CASE("extract_entities: orphan I opens an entity") {
    CHECK(extract_entities({"O", "I-A", "I-A"}) == std::vector<EntitySpan>{{1, 2, "A"}});
    CHECK(extract_entities({"I-A"}) == std::vector<EntitySpan>{{0, 0, "A"}});
    // a type change inside an I run splits the entity
    CHECK(extract_entities({"I-A", "I-B"}) ==
          std::vector<EntitySpan>{{0, 0, "A"}, {1, 1, "B"}});
}

TEST_CASE("extract_entities rejects malformed tags") {
    CHECK_THROWS_AS(extract_entities({"X-A"}), DataError);
    CHECK_THROWS_AS(extract_entities({"B"}), DataError);
}

TEST_CASE("extract_entities agrees with the regex oracle on 1000 random sequences") {
    Rng rng(42);
    for (int trial = 0; trial < 1000; ++trial) {
        const int len = 1 + static_cast<int>(rng.below(20));
        auto tags = random_tags(rng, len);
        auto got = extract_entities(tags);
        std::sort(got.begin(), got.end());
        CHECK(got == regex_oracle(tags));
    }
}

TEST_CASE("conll_f1: worked example") {
    auto rep = conll_f1({{"B-DIS", "I-DIS", "O", "B-CHEM"}},
                        {{"B-DIS", "I-DIS", "O", "O"}});
    CHECK(rep.precision == doctest::Approx(1.0));
    CHECK(rep.recall == doctest::Approx(0.5));
    CHECK(rep.f1 == doctest::Approx(2.0 / 3.0));
    CHECK(rep.support == 2);
    CHECK(rep.per_type.at("DIS").f1 == doctest::Approx(1.0));
    CHECK(rep.per_type.at("CHEM").recall == doctest::Approx(0.0));
}

TEST_CASE("conll_f1: perfect prediction scores 1") {
    std::vector<std::vector<std::string>> g = {{"B-A", "I-A"}, {"O", "B-B", "I-B"}};
    auto rep = conll_f1(g, g);
    CHECK(rep.precision == 1.0);
    CHECK(rep.recall == 1.0);
    CHECK(rep.f1 == 1.0);
}

TEST_CASE("conll_f1: swapping gold and prediction swaps precision and recall") {
    Rng rng(7);
    std::vector<std::vector<std::string>> g, p;
    for (int s = 0; s < 20; ++s) {
        const int len = 3 + static_cast<int>(rng.below(10));
        g.push_back(random_tags(rng, len));
        p.push_back(random_tags(rng, len));
    }
    auto a = conll_f1(g, p);
    auto b = conll_f1(p, g);
    CHECK(a.precision == doctest::Approx(b.recall).epsilon(1e-12));
    CHECK(a.recall == doctest::Approx(b.precision).epsilon(1e-12));
    CHECK(a.f1 == doctest::Approx(b.f1).epsilon(1e-12));
    // harmonic mean never exceeds the arithmetic mean
    CHECK(a.f1 <= (a.precision + a.recall) / 2.0 + 1e-12);
}

TEST_CASE("conll_f1: shape errors name the offender") {
    CHECK_THROWS_WITH_AS(conll_f1({{"O"}}, {{"O"}, {"O"}}),
                         doctest::Contains("sentence counts differ"), DataError);
    CHECK_THROWS_WITH_AS(conll_f1({{"O"}, {"O", "O"}}, {{"O"}, {"O"}}),
                         doctest::Contains("sentence 1"), DataError);
}

TEST_CASE("conll_f1 matches the reference scorer on 500 random instances") {
    Rng rng(11);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<std::vector<std::string>> g, p;
        const int sentences = 1 + static_cast<int>(rng.below(4));
        for (int s = 0; s < sentences; ++s) {
            const int len = 1 + static_cast<int>(rng.below(12));
            g.push_back(random_tags(rng, len));
            p.push_back(random_tags(rng, len));
        }
        auto rep = conll_f1(g, p);
        auto oracle = script_oracle(g, p);
        CHECK(printed(100.0 * rep.precision) == printed(oracle.precision));
        CHECK(printed(100.0 * rep.recall) == printed(oracle.recall));
        CHECK(printed(100.0 * rep.f1) == printed(oracle.f1));
    }
}

TEST_CASE("cls_f1: trivial cases") {
    auto perfect = cls_f1({"x", "y", "x"}, {"x", "y", "x"}, Averaging::micro);
    CHECK(perfect.f1 == 1.0);
    // binary case engineered so both precision and recall are 0.5
    auto half = cls_f1({"a", "a", "b", "b"}, {"a", "b", "a", "b"}, Averaging::micro);
    CHECK(half.precision == doctest::Approx(0.5));
    CHECK(half.recall == doctest::Approx(0.5));
    CHECK(half.f1 == doctest::Approx(0.5));
    CHECK_THROWS_AS(cls_f1({}, {}, Averaging::micro), DataError);
    CHECK_THROWS_AS(cls_f1({"a"}, {"a", "b"}, Averaging::micro), DataError);
}

TEST_CASE("cls_f1 equals a confusion-matrix hand computation") {
    Rng rng(13);
    const std::vector<std::string> labels = {"u", "v", "w"};
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<std::string> g, p;
        const int n = 5 + static_cast<int>(rng.below(30));
        for (int i = 0; i < n; ++i) {
            g.push_back(labels[rng.below(3)]);
            p.push_back(labels[rng.below(3)]);
        }
        // brute force per class
        double macro_f1 = 0.0;
        long correct = 0;
        std::size_t classes = 0;
        for (const auto& c : labels) {
            long tp = 0, fp = 0, fn = 0;
            for (int i = 0; i < n; ++i) {
                const bool gc = g[static_cast<std::size_t>(i)] == c;
                const bool pc = p[static_cast<std::size_t>(i)] == c;
                if (gc && pc) ++tp;
                if (!gc && pc) ++fp;
                if (gc && !pc) ++fn;
            }
            if (tp + fp + fn == 0) continue;  // class absent from this sample
            ++classes;
            correct += tp;
            const double prec = tp + fp > 0 ? double(tp) / (tp + fp) : 0.0;
            const double rec = tp + fn > 0 ? double(tp) / (tp + fn) : 0.0;
            macro_f1 += prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
        }
        macro_f1 /= static_cast<double>(classes);
        auto micro = cls_f1(g, p, Averaging::micro);
        auto macro = cls_f1(g, p, Averaging::macro);
        CHECK(micro.f1 == doctest::Approx(double(correct) / n).epsilon(1e-12));
        CHECK(macro.per_type.size() == classes);
        CHECK(macro.f1 == doctest::Approx(macro_f1).epsilon(1e-12));
    }
}

TEST_CASE("aggregate_runs: mean and sample standard deviation") {
    auto two = aggregate_runs(std::vector<double>{86.0, 88.0});
    CHECK(two.mean == doctest::Approx(87.0));
    CHECK(two.sd == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));
    auto same = aggregate_runs(std::vector<double>{5.0, 5.0, 5.0});
    CHECK(same.sd == 0.0);
    CHECK_THROWS_AS(aggregate_runs(std::vector<double>{}), DataError);

    Rng rng(17);
    std::vector<double> vals;
    for (int i = 0; i < 5; ++i) vals.push_back(rng.uniform() * 100.0);
    auto st = aggregate_runs(vals);
    double mean = 0.0;
    for (double v : vals) mean += v;
    mean /= 5.0;
    double ss = 0.0;
    for (double v : vals) ss += (v - mean) * (v - mean);
    CHECK(st.mean == doctest::Approx(mean).epsilon(1e-12));
    CHECK(st.sd == doctest::Approx(std::sqrt(ss / 4.0)).epsilon(1e-12));

    std::vector<F1Report> reps(3);
    reps[0].f1 = 0.8;
    reps[1].f1 = 0.9;
    reps[2].f1 = 1.0;
    auto agg = aggregate_runs(reps);
    CHECK(agg.f1.mean == doctest::Approx(0.9).epsilon(1e-12));
}

TEST_CASE("domain_average groups tasks and averages domain means") {
    const std::map<std::string, std::string> domains = {
        {"BC5CDR", "Biomedical"},    {"JNLPBA", "Biomedical"},
        {"NCBI-Disease", "Biomedical"}, {"ChemDNER", "Biomedical"},
        {"SciERC", "Computer Science"},
    };
    const std::map<std::string, double> scores = {
        {"BC5CDR", 90.0}, {"JNLPBA", 70.0},       {"NCBI-Disease", 80.0},
        {"ChemDNER", 60.0}, {"SciERC", 50.0},
    };
    auto by_domain = domain_average(scores, domains);
    CHECK(by_domain.at("Biomedical") == doctest::Approx(75.0));
    CHECK(by_domain.at("Computer Science") == doctest::Approx(50.0));
    CHECK(by_domain.at("Mean") == doctest::Approx(62.5));  // mean of domain means

    auto of_tasks = domain_average(scores, domains, MeanKind::of_tasks);
    CHECK(of_tasks.at("Mean") == doctest::Approx(70.0));  // mean of task scores

    // one task per domain: identity
    auto ident = domain_average({{"t", 42.0}}, {{"t", "D"}});
    CHECK(ident.at("D") == 42.0);

    CHECK_THROWS_AS(domain_average({{"missing", 1.0}}, {{"other", "D"}}), DataError);
}
