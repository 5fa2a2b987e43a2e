#include "cqr/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "cqr/errors.hpp"
#include "cqr/util.hpp"
#include "json.hpp"

namespace cqr {

using nlohmann::json;

Corpus::Corpus(std::vector<Passage> passages) : passages_(std::move(passages)) {
    by_id_.reserve(passages_.size());
    for (std::size_t i = 0; i < passages_.size(); ++i) {
        const auto& p = passages_[i];
        if (p.id.empty()) throw ValidationError("passage at position " + std::to_string(i) + " has empty id");
        if (trim(p.text).empty())
            throw ValidationError("passage '" + p.id + "' has empty text");
        auto [it, inserted] = by_id_.emplace(p.id, i);
        if (!inserted) throw ValidationError("duplicate passage id '" + p.id + "'");
    }
}

std::optional<std::size_t> Corpus::position_of(const std::string& id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) return std::nullopt;
    return it->second;
}

std::size_t Dataset::turn_count() const {
    std::size_t n = 0;
    for (const auto& s : sessions) n += s.size();
    return n;
}

namespace {

// Byte offsets of Unicode scalar starts. A malformed byte counts as one
// scalar so slicing always reassembles the original bytes.
std::vector<std::size_t> scalar_offsets(const std::string& text) {
    std::vector<std::size_t> starts;
    starts.reserve(text.size());
    std::size_t i = 0;
    while (i < text.size()) {
        starts.push_back(i);
        unsigned char c = static_cast<unsigned char>(text[i]);
        std::size_t len = 1;
        if ((c & 0x80u) == 0x00u) len = 1;
        else if ((c & 0xE0u) == 0xC0u) len = 2;
        else if ((c & 0xF0u) == 0xE0u) len = 3;
        else if ((c & 0xF8u) == 0xF0u) len = 4;
        std::size_t j = i + 1;
        while (j < i + len && j < text.size() &&
               (static_cast<unsigned char>(text[j]) & 0xC0u) == 0x80u) {
            ++j;
        }
        i = j;
    }
    return starts;
}

std::string padded_ordinal(std::size_t n) {
    std::string s = std::to_string(n);
    if (s.size() < 4) s.insert(0, 4 - s.size(), '0');
    return s;
}

}  // namespace

std::vector<Passage> chunk_text(const std::string& parent_id, const std::string& text,
                                std::size_t size, std::size_t overlap) {
    if (size == 0) throw ParameterError("chunk size must be positive");
    if (overlap >= size)
        throw ParameterError("chunk overlap (" + std::to_string(overlap) +
                             ") must be smaller than size (" + std::to_string(size) + ")");
    if (text.empty()) throw ValidationError("cannot chunk empty text");

    const auto starts = scalar_offsets(text);
    const std::size_t n_scalars = starts.size();
    const std::size_t stride = size - overlap;

    std::vector<Passage> chunks;
    std::size_t begin = 0;
    for (;;) {
        std::size_t end = std::min(begin + size, n_scalars);
        std::size_t byte_begin = starts[begin];
        std::size_t byte_end = end < n_scalars ? starts[end] : text.size();
        chunks.push_back({parent_id + "-" + padded_ordinal(chunks.size()),
                          text.substr(byte_begin, byte_end - byte_begin)});
        if (begin + size >= n_scalars) break;
        begin += stride;
    }
    return chunks;
}

namespace {

json parse_record(const std::string& line, std::size_t line_no) {
    json rec = json::parse(line, nullptr, false);
    if (rec.is_discarded() || !rec.is_object())
        throw ParseError("malformed record", line_no);
    return rec;
}

std::string require_string(const json& rec, const char* field, std::size_t line_no) {
    auto it = rec.find(field);
    if (it == rec.end() || !it->is_string())
        throw ParseError(std::string("missing or non-string field \"") + field + "\"", line_no);
    return it->get<std::string>();
}

}  // namespace

Corpus load_passages(const std::filesystem::path& source) {
    std::ifstream in(source);
    if (!in) throw ParseError("cannot open passage file " + source.string());

    std::vector<Passage> passages;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        json rec = parse_record(line, line_no);
        Passage p{require_string(rec, "id", line_no), require_string(rec, "text", line_no)};
        if (trim(p.text).empty())
            throw ValidationError("passage '" + p.id + "' has empty text (line " +
                                  std::to_string(line_no) + ")");
        passages.push_back(std::move(p));
    }
    return Corpus(std::move(passages));  // Corpus ctor rejects duplicate ids
}

void save_passages(const Corpus& corpus, const std::filesystem::path& dest) {
    std::ofstream out(dest);
    if (!out) throw ParseError("cannot write passage file " + dest.string());
    for (const auto& p : corpus.passages()) {
        json rec{{"id", p.id}, {"text", p.text}};
        out << rec.dump() << '\n';
    }
}

Dataset load_conversations(const std::filesystem::path& source, const Corpus* corpus,
                           Split split) {
    std::ifstream in(source);
    if (!in) throw ParseError("cannot open conversation file " + source.string());

    // session id -> turn_index -> Turn; sessions keep file order of first appearance
    std::vector<std::string> session_order;
    std::map<std::string, std::map<int, Turn>> by_session;

    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        json rec = parse_record(line, line_no);

        Turn t;
        t.session_id = require_string(rec, "session_id", line_no);
        auto turn_it = rec.find("turn");
        if (turn_it == rec.end() || !turn_it->is_number_integer())
            throw ParseError("missing or non-integer field \"turn\"", line_no);
        t.turn_index = turn_it->get<int>();
        t.query = require_string(rec, "query", line_no);
        t.response = require_string(rec, "response", line_no);
        if (auto it = rec.find("gold_ref_ids"); it != rec.end()) {
            if (!it->is_array()) throw ParseError("\"gold_ref_ids\" must be an array", line_no);
            for (const auto& g : *it) {
                if (!g.is_string()) throw ParseError("gold_ref_ids entries must be strings", line_no);
                t.gold_ref_ids.push_back(g.get<std::string>());
            }
        }

        if (t.turn_index < 1)
            throw ValidationError("turn index must be >= 1 in session '" + t.session_id +
                                  "' (line " + std::to_string(line_no) + ")");
        if (trim(t.query).empty() || trim(t.response).empty())
            throw ValidationError("empty query or response at (" + t.session_id + ", " +
                                  std::to_string(t.turn_index) + ")");
        if (corpus) {
            for (const auto& g : t.gold_ref_ids) {
                if (!corpus->contains(g))
                    throw ValidationError("gold ref id '" + g + "' at (" + t.session_id + ", " +
                                          std::to_string(t.turn_index) + ") not in corpus");
            }
        }

        auto sess_it = by_session.find(t.session_id);
        if (sess_it == by_session.end()) {
            session_order.push_back(t.session_id);
            sess_it = by_session.emplace(t.session_id, std::map<int, Turn>{}).first;
        }
        auto [_, inserted] = sess_it->second.emplace(t.turn_index, std::move(t));
        if (!inserted)
            throw ValidationError("duplicate turn key (" + sess_it->first + ", " +
                                  std::to_string(turn_it->get<int>()) + ")");
    }

    Dataset ds;
    ds.split = split;
    ds.sessions.reserve(session_order.size());
    for (const auto& sid : session_order) {
        auto& turns = by_session.at(sid);
        int expected = 1;
        std::vector<Turn> session;
        session.reserve(turns.size());
        for (auto& [idx, turn] : turns) {
            if (idx != expected)
                throw ValidationError("session '" + sid + "' has gap at t=" +
                                      std::to_string(expected));
            ++expected;
            session.push_back(std::move(turn));
        }
        ds.sessions.push_back(std::move(session));
    }
    return ds;
}

void save_conversations(const Dataset& dataset, const std::filesystem::path& dest) {
    std::ofstream out(dest);
    if (!out) throw ParseError("cannot write conversation file " + dest.string());
    for (const auto& session : dataset.sessions) {
        for (const auto& t : session) {
            json rec{{"session_id", t.session_id},
                     {"turn", t.turn_index},
                     {"query", t.query},
                     {"response", t.response}};
            if (!t.gold_ref_ids.empty()) rec["gold_ref_ids"] = t.gold_ref_ids;
            out << rec.dump() << '\n';
        }
    }
}

DialogueContext context(const std::vector<Turn>& session, int t) {
    if (t < 1 || static_cast<std::size_t>(t) > session.size())
        throw std::out_of_range("turn index " + std::to_string(t) + " out of range for session of " +
                                std::to_string(session.size()) + " turns");
    DialogueContext ctx;
    ctx.history.reserve(static_cast<std::size_t>(t) - 1);
    for (int i = 0; i < t - 1; ++i) {
        ctx.history.emplace_back(session[static_cast<std::size_t>(i)].query,
                                 session[static_cast<std::size_t>(i)].response);
    }
    ctx.current_query = session[static_cast<std::size_t>(t) - 1].query;
    return ctx;
}

std::string serialize_context(const DialogueContext& ctx) {
    std::ostringstream out;
    for (const auto& [q, a] : ctx.history) out << "Q: " << q << "\nA: " << a << "\n";
    out << "Q: " << ctx.current_query;
    return out.str();
}

}  // namespace cqr
