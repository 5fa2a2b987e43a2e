#include "cqr/retriever.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include "cqr/errors.hpp"

namespace cqr {

void IndexParams::validate() const {
    if (!(k1 > 0.0)) throw ParameterError("k1 must be > 0");
    if (!(b >= 0.0 && b <= 1.0)) throw ParameterError("b must be in [0, 1]");
}

std::vector<std::string> RankedRetrieval::ids() const {
    std::vector<std::string> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(e.passage_id);
    return out;
}

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> terms;
    std::string current;
    for (unsigned char c : text) {
        bool term_char = (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c >= 0x80;
        if (c >= 'A' && c <= 'Z') {
            current.push_back(static_cast<char>(c - 'A' + 'a'));
        } else if (term_char) {
            current.push_back(static_cast<char>(c));
        } else if (!current.empty()) {
            terms.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) terms.push_back(std::move(current));
    return terms;
}

Bm25Index::Bm25Index(const Corpus& corpus, IndexParams params) : params_(params) {
    params_.validate();
    doc_ids_.reserve(corpus.size());
    doc_lengths_.reserve(corpus.size());

    std::uint64_t total_len = 0;
    for (std::uint32_t d = 0; d < corpus.size(); ++d) {
        const auto& passage = corpus.at(d);
        doc_ids_.push_back(passage.id);
        auto terms = tokenize(passage.text);
        doc_lengths_.push_back(static_cast<std::uint32_t>(terms.size()));
        total_len += terms.size();

        std::unordered_map<std::string, std::uint32_t> tf;
        for (auto& t : terms) ++tf[t];
        for (auto& [term, count] : tf) postings_[term].push_back({d, count});
    }
    for (auto& [term, list] : postings_) {
        std::sort(list.begin(), list.end(),
                  [](const Posting& a, const Posting& b) { return a.doc < b.doc; });
    }
    avg_doc_length_ = doc_ids_.empty() ? 0.0 : static_cast<double>(total_len) / doc_ids_.size();
}

RankedRetrieval Bm25Index::retrieve(const std::string& query, std::size_t top_n) const {
    if (top_n == 0) throw ParameterError("top_n must be >= 1");
    RankedRetrieval result;
    result.query_echo = query;

    auto terms = tokenize(query);
    if (terms.empty() || doc_ids_.empty()) return result;

    const double n_docs = static_cast<double>(doc_ids_.size());
    std::vector<double> scores(doc_ids_.size(), 0.0);
    for (const auto& term : terms) {
        auto it = postings_.find(term);
        if (it == postings_.end()) continue;
        const auto& list = it->second;
        const double df = static_cast<double>(list.size());
        const double idf = std::log(1.0 + (n_docs - df + 0.5) / (df + 0.5));
        for (const auto& p : list) {
            const double tf = static_cast<double>(p.tf);
            const double norm =
                params_.k1 * (1.0 - params_.b + params_.b * doc_lengths_[p.doc] / avg_doc_length_);
            scores[p.doc] += idf * tf * (params_.k1 + 1.0) / (tf + norm);
        }
    }

    std::vector<std::uint32_t> hit_docs;
    for (std::uint32_t d = 0; d < scores.size(); ++d) {
        if (scores[d] > 0.0) hit_docs.push_back(d);
    }
    // stable ranking: score descending, position ascending on ties
    std::sort(hit_docs.begin(), hit_docs.end(), [&](std::uint32_t a, std::uint32_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    if (hit_docs.size() > top_n) hit_docs.resize(top_n);

    result.entries.reserve(hit_docs.size());
    for (auto d : hit_docs) result.entries.push_back({doc_ids_[d], scores[d]});
    return result;
}

namespace {

constexpr std::uint32_t kIndexMagic = 0x43515258;  // "CQRX"
constexpr std::uint32_t kIndexVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw ParseError("truncated index file");
    return v;
}

void write_string(std::ofstream& out, const std::string& s) {
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::ifstream& in) {
    auto len = read_pod<std::uint32_t>(in);
    std::string s(len, '\0');
    in.read(s.data(), len);
    if (!in) throw ParseError("truncated index file");
    return s;
}

}  // namespace

void Bm25Index::save(const std::filesystem::path& dest) const {
    std::ofstream out(dest, std::ios::binary);
    if (!out) throw ParseError("cannot write index file " + dest.string());
    write_pod(out, kIndexMagic);
    write_pod(out, kIndexVersion);
    write_pod(out, params_.k1);
    write_pod(out, params_.b);
    write_pod<std::uint64_t>(out, doc_ids_.size());
    for (std::size_t d = 0; d < doc_ids_.size(); ++d) {
        write_string(out, doc_ids_[d]);
        write_pod(out, doc_lengths_[d]);
    }
    write_pod<std::uint64_t>(out, postings_.size());
    for (const auto& [term, list] : postings_) {
        write_string(out, term);
        write_pod<std::uint64_t>(out, list.size());
        for (const auto& p : list) {
            write_pod(out, p.doc);
            write_pod(out, p.tf);
        }
    }
}

Bm25Index Bm25Index::load(const std::filesystem::path& source) {
    std::ifstream in(source, std::ios::binary);
    if (!in) throw ParseError("cannot open index file " + source.string());
    if (read_pod<std::uint32_t>(in) != kIndexMagic)
        throw ParseError("not an index file: " + source.string());
    if (auto v = read_pod<std::uint32_t>(in); v != kIndexVersion)
        throw ParseError("unsupported index version " + std::to_string(v));

    Bm25Index index;
    index.params_.k1 = read_pod<double>(in);
    index.params_.b = read_pod<double>(in);
    auto n_docs = read_pod<std::uint64_t>(in);
    std::uint64_t total_len = 0;
    for (std::uint64_t d = 0; d < n_docs; ++d) {
        index.doc_ids_.push_back(read_string(in));
        index.doc_lengths_.push_back(read_pod<std::uint32_t>(in));
        total_len += index.doc_lengths_.back();
    }
    index.avg_doc_length_ = n_docs ? static_cast<double>(total_len) / n_docs : 0.0;
    auto n_terms = read_pod<std::uint64_t>(in);
    for (std::uint64_t t = 0; t < n_terms; ++t) {
        std::string term = read_string(in);
        auto n_postings = read_pod<std::uint64_t>(in);
        auto& list = index.postings_[term];
        list.reserve(n_postings);
        for (std::uint64_t p = 0; p < n_postings; ++p) {
            auto doc = read_pod<std::uint32_t>(in);
            auto tf = read_pod<std::uint32_t>(in);
            if (doc >= n_docs) throw ParseError("posting references invalid document");
            list.push_back({doc, tf});
        }
    }
    return index;
}

void MockRetriever::set(const std::string& query, std::vector<RankedRetrieval::Entry> entries) {
    table_[query] = std::move(entries);
}

RankedRetrieval MockRetriever::retrieve(const std::string& query, std::size_t top_n) const {
    RankedRetrieval result;
    result.query_echo = query;
    auto it = table_.find(query);
    if (it == table_.end()) return result;
    result.entries = it->second;
    if (result.entries.size() > top_n) result.entries.resize(top_n);
    return result;
}

RankedRetrieval DenseRetrieverStub::retrieve(const std::string&, std::size_t) const {
    throw CapabilityError("dense retrieval (" + model_ref_ + ") is not implemented");
}

}  // namespace cqr
