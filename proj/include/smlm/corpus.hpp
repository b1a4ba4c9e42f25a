#pragma once

// Document ingestion, sentence splitting, reproducible subsetting, and
// domain distribution reporting.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace smlm::corpus {

struct Document {
    std::string id;
    std::string title;
    std::string domain;  // metadata label, "Unknown" when absent
    std::string text;
};

struct CorpusStore {
    std::vector<Document> docs;
    std::int64_t token_count = 0;     // whitespace-delimited words
    std::int64_t sentence_count = 0;  // per split_sentences

    std::size_t size() const { return docs.size(); }
    bool empty() const { return docs.empty(); }
};

enum class SubsetUnit { documents, sentences, tokens };

struct SubsetSpec {
    double fraction = 1.0;  // in (0, 1]
    std::uint64_t seed = 0;
    SubsetUnit target_unit = SubsetUnit::documents;
};

struct IngestReport {
    std::size_t accepted = 0;
    std::size_t dropped_empty = 0;
    std::size_t dropped_duplicate = 0;
    std::size_t dropped_malformed = 0;
    // one message per rejected line, with line numbers
    std::vector<std::string> errors;
};

// JSONL, one document per line, fields {"id","title","domain","text"}.
// Records with empty text are dropped and counted; a duplicate id rejects
// the later record. Malformed lines are reported with their line number.
CorpusStore ingest(std::istream& jsonl, IngestReport* report = nullptr);
CorpusStore ingest_file(const std::string& path, IngestReport* report = nullptr);

// Rule-based splitter: sentence ends at {. ! ?} followed by whitespace and
// an uppercase letter or digit, except after a fixed abbreviation allowlist.
std::vector<std::string> split_sentences(const std::string& text);
const std::vector<std::string>& sentence_abbreviations();

std::int64_t count_words(const std::string& text);

// Seeded Fisher-Yates prefix: documents are taken in permuted order until
// the cumulative size (in the spec'd unit) reaches fraction * total.
CorpusStore sample_subset(const CorpusStore& store, const SubsetSpec& spec);

struct DomainRow {
    std::string domain;
    std::size_t count = 0;
    double pct = 0.0;
};
std::vector<DomainRow> domain_histogram(const CorpusStore& store);
std::string histogram_csv(const std::vector<DomainRow>& rows);

// Length-prefixed binary container, magic "SCRP" + version byte.
void save_store(const CorpusStore& store, std::ostream& os);
CorpusStore load_store(std::istream& is);
void save_store_file(const CorpusStore& store, const std::string& path);
CorpusStore load_store_file(const std::string& path);

CorpusStore concat(const CorpusStore& a, const CorpusStore& b);

}  // namespace smlm::corpus
