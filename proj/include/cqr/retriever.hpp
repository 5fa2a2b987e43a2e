#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cqr/corpus.hpp"

namespace cqr {

/// Okapi BM25 parameters. Defaults follow the common 0.9 / 0.4 setting.
struct IndexParams {
    double k1 = 0.9;
    double b = 0.4;

    void validate() const;
};

/// Ranked result list, scores non-increasing, ties by ascending passage
/// position. Never longer than the requested top_n.
struct RankedRetrieval {
    struct Entry {
        std::string passage_id;
        double score = 0.0;
    };
    std::vector<Entry> entries;
    std::string query_echo;

    std::vector<std::string> ids() const;
};

/// Lowercases and splits on any non-alphanumeric byte. Bytes >= 0x80 are kept
/// as term characters so multi-byte scripts survive; no stemming, no stopwords.
std::vector<std::string> tokenize(const std::string& text);

/// Inverted index over a Corpus.
///
/// score(q, d) = sum over query tokens t of
///   idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * |d| / avgdl)),
/// idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5)).
/// A token appearing twice in the query contributes twice.
class Bm25Index {
public:
    Bm25Index() = default;
    Bm25Index(const Corpus& corpus, IndexParams params);

    RankedRetrieval retrieve(const std::string& query, std::size_t top_n) const;

    std::size_t doc_count() const { return doc_ids_.size(); }
    double avg_doc_length() const { return avg_doc_length_; }
    const IndexParams& params() const { return params_; }

    /// Versioned binary dump; load rejects unknown magic or version.
    void save(const std::filesystem::path& dest) const;
    static Bm25Index load(const std::filesystem::path& source);

private:
    struct Posting {
        std::uint32_t doc = 0;
        std::uint32_t tf = 0;
    };

    IndexParams params_;
    std::vector<std::string> doc_ids_;
    std::vector<std::uint32_t> doc_lengths_;
    double avg_doc_length_ = 0.0;
    std::map<std::string, std::vector<Posting>> postings_;  // sorted terms, sorted doc positions
};

/// Abstraction the pipeline retrieves through.
class Retriever {
public:
    virtual ~Retriever() = default;
    virtual RankedRetrieval retrieve(const std::string& query, std::size_t top_n) const = 0;
};

class Bm25Retriever : public Retriever {
public:
    Bm25Retriever(const Corpus& corpus, IndexParams params) : index_(corpus, params) {}
    explicit Bm25Retriever(Bm25Index index) : index_(std::move(index)) {}

    RankedRetrieval retrieve(const std::string& query, std::size_t top_n) const override {
        return index_.retrieve(query, top_n);
    }
    const Bm25Index& index() const { return index_; }

private:
    Bm25Index index_;
};

/// Test double: answers configured query strings exactly, everything else empty.
class MockRetriever : public Retriever {
public:
    void set(const std::string& query, std::vector<RankedRetrieval::Entry> entries);
    RankedRetrieval retrieve(const std::string& query, std::size_t top_n) const override;

private:
    std::map<std::string, std::vector<RankedRetrieval::Entry>> table_;
};

/// Dense retrieval is out of scope; the stub keeps the seam visible.
class DenseRetrieverStub : public Retriever {
public:
    explicit DenseRetrieverStub(std::string model_ref = "gtr") : model_ref_(std::move(model_ref)) {}
    [[noreturn]] RankedRetrieval retrieve(const std::string& query, std::size_t top_n) const override;

private:
    std::string model_ref_;
};

}  // namespace cqr
