#include "smlm/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "smlm/common.hpp"

namespace smlm::corpus {

using nlohmann::json;

std::int64_t count_words(const std::string& text) {
    std::int64_t n = 0;
    bool in_word = false;
    for (unsigned char c : text) {
        const bool ws = std::isspace(c) != 0;
        if (!ws && !in_word) ++n;
        in_word = !ws;
    }
    return n;
}

static void recount(CorpusStore& store) {
    store.token_count = 0;
    store.sentence_count = 0;
    for (const auto& d : store.docs) {
        store.token_count += count_words(d.text);
        store.sentence_count += static_cast<std::int64_t>(split_sentences(d.text).size());
    }
}

CorpusStore ingest(std::istream& jsonl, IngestReport* report) {
    CorpusStore store;
    IngestReport local;
    IngestReport& rep = report ? *report : local;
    std::unordered_set<std::string> seen_ids;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(jsonl, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json rec = json::parse(line, nullptr, false);
        if (rec.is_discarded() || !rec.is_object() || !rec.contains("id") ||
            !rec.contains("text") || !rec["id"].is_string() || !rec["text"].is_string()) {
            ++rep.dropped_malformed;
            rep.errors.push_back("line " + std::to_string(line_no) + ": malformed record");
            continue;
        }
        Document d;
        d.id = rec["id"].get<std::string>();
        d.text = rec["text"].get<std::string>();
        d.title = rec.value("title", std::string{});
        d.domain = rec.value("domain", std::string{"Unknown"});
        if (d.domain.empty()) d.domain = "Unknown";
        if (d.text.find_first_not_of(" \t\r\n") == std::string::npos) {
            ++rep.dropped_empty;
            continue;
        }
        if (!seen_ids.insert(d.id).second) {
            ++rep.dropped_duplicate;
            rep.errors.push_back("line " + std::to_string(line_no) + ": duplicate id '" +
                                 d.id + "'");
            continue;
        }
        store.docs.push_back(std::move(d));
        ++rep.accepted;
    }
    recount(store);
    return store;
}

CorpusStore ingest_file(const std::string& path, IngestReport* report) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open corpus file: " + path);
    return ingest(in, report);
}

const std::vector<std::string>& sentence_abbreviations() {
    static const std::vector<std::string> kAbbrev = {
        "e.g.", "i.e.", "et al.", "etc.", "cf.", "vs.", "Fig.", "fig.",
        "Eq.",  "eq.",  "Dr.",    "Mr.",  "Mrs.", "Ms.", "Prof.", "No.",
        "Vol.", "pp.",  "approx.",
    };
    return kAbbrev;
}

static bool ends_with_abbreviation(const std::string& text, std::size_t end_idx) {
    // end_idx points at the terminator character
    for (const auto& abbr : sentence_abbreviations()) {
        const std::size_t n = abbr.size();
        if (end_idx + 1 < n) continue;
        const std::size_t start = end_idx + 1 - n;
        if (text.compare(start, n, abbr) != 0) continue;
        // must begin at a word boundary
        if (start == 0 || std::isspace(static_cast<unsigned char>(text[start - 1])) ||
            text[start - 1] == '(') {
            return true;
        }
    }
    return false;
}

std::vector<std::string> split_sentences(const std::string& text) {
    std::vector<std::string> out;
    std::size_t start = 0;
    const std::size_t n = text.size();
    auto flush = [&](std::size_t end) {  // [start, end)
        std::size_t a = start, b = end;
        while (a < b && std::isspace(static_cast<unsigned char>(text[a]))) ++a;
        while (b > a && std::isspace(static_cast<unsigned char>(text[b - 1]))) --b;
        if (b > a) out.push_back(text.substr(a, b - a));
        start = end;
    };
    for (std::size_t i = 0; i < n; ++i) {
        const char c = text[i];
        if (c != '.' && c != '!' && c != '?') continue;
        // lookahead: whitespace then uppercase/digit
        std::size_t j = i + 1;
        if (j >= n || !std::isspace(static_cast<unsigned char>(text[j]))) continue;
        while (j < n && std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        if (j >= n) continue;
        const unsigned char next = static_cast<unsigned char>(text[j]);
        if (!std::isupper(next) && !std::isdigit(next)) continue;
        if (c == '.' && ends_with_abbreviation(text, i)) continue;
        flush(i + 1);
    }
    flush(n);
    return out;
}

static std::int64_t unit_size(const Document& d, SubsetUnit unit) {
    switch (unit) {
        case SubsetUnit::documents: return 1;
        case SubsetUnit::sentences:
            return static_cast<std::int64_t>(split_sentences(d.text).size());
        case SubsetUnit::tokens: return count_words(d.text);
    }
    return 1;
}

CorpusStore sample_subset(const CorpusStore& store, const SubsetSpec& spec) {
    if (spec.fraction <= 0.0 || spec.fraction > 1.0) {
        throw ConfigError("sample_subset: fraction must be in (0, 1]");
    }
    if (store.empty()) throw ConfigError("sample_subset: empty store");

    std::int64_t total = 0;
    for (const auto& d : store.docs) total += unit_size(d, spec.target_unit);
    const double target = spec.fraction * static_cast<double>(total);

    std::vector<std::size_t> order(store.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(spec.seed);
    rng.shuffle(order);

    CorpusStore subset;
    std::int64_t cum = 0;
    for (std::size_t idx : order) {
        if (static_cast<double>(cum) >= target) break;
        subset.docs.push_back(store.docs[idx]);
        cum += unit_size(store.docs[idx], spec.target_unit);
    }
    recount(subset);
    return subset;
}

std::vector<DomainRow> domain_histogram(const CorpusStore& store) {
    std::vector<DomainRow> rows;
    if (store.empty()) return rows;
    // preserve first-seen order
    for (const auto& d : store.docs) {
        auto it = std::find_if(rows.begin(), rows.end(),
                               [&](const DomainRow& r) { return r.domain == d.domain; });
        if (it == rows.end()) {
            rows.push_back({d.domain, 1, 0.0});
        } else {
            ++it->count;
        }
    }
    for (auto& r : rows) {
        r.pct = 100.0 * static_cast<double>(r.count) / static_cast<double>(store.size());
    }
    return rows;
}

std::string histogram_csv(const std::vector<DomainRow>& rows) {
    std::ostringstream os;
    os << "domain,count,pct\n";
    for (const auto& r : rows) {
        os << r.domain << ',' << r.count << ',';
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.4f", r.pct);
        os << buf << '\n';
    }
    return os.str();
}

static constexpr char kStoreMagic[4] = {'S', 'C', 'R', 'P'};
static constexpr std::uint8_t kStoreVersion = 1;

void save_store(const CorpusStore& store, std::ostream& os) {
    BinaryWriter w(os);
    w.bytes(kStoreMagic, 4);
    w.u8(kStoreVersion);
    w.u64(store.size());
    w.i64(store.token_count);
    w.i64(store.sentence_count);
    for (const auto& d : store.docs) {
        w.str(d.id);
        w.str(d.title);
        w.str(d.domain);
        w.str(d.text);
    }
}

CorpusStore load_store(std::istream& is) {
    BinaryReader r(is);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kStoreMagic, 4) != 0) {
        throw DataError("corpus store: bad magic");
    }
    if (r.u8() != kStoreVersion) throw DataError("corpus store: unsupported version");
    CorpusStore store;
    const std::uint64_t n = r.u64();
    store.token_count = r.i64();
    store.sentence_count = r.i64();
    store.docs.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        Document d;
        d.id = r.str();
        d.title = r.str();
        d.domain = r.str();
        d.text = r.str();
        store.docs.push_back(std::move(d));
    }
    CorpusStore check = store;
    recount(check);
    if (check.token_count != store.token_count ||
        check.sentence_count != store.sentence_count) {
        throw DataError("corpus store: counts do not match contents");
    }
    return store;
}

void save_store_file(const CorpusStore& store, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + path);
    save_store(store, os);
}

CorpusStore load_store_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path);
    return load_store(is);
}

CorpusStore concat(const CorpusStore& a, const CorpusStore& b) {
    CorpusStore out = a;
    out.docs.insert(out.docs.end(), b.docs.begin(), b.docs.end());
    out.token_count = a.token_count + b.token_count;
    out.sentence_count = a.sentence_count + b.sentence_count;
    return out;
}

}  // namespace smlm::corpus
