#pragma once

#include <compare>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace cqr {

/// One retrievable unit.
struct Passage {
    std::string id;
    std::string text;
};

/// Key identifying a conversation turn everywhere in the pipeline.
struct TurnKey {
    std::string session_id;
    int turn = 0;

    auto operator<=>(const TurnKey&) const = default;
};

/// Immutable passage collection with stable iteration order and id lookup.
class Corpus {
public:
    Corpus() = default;
    explicit Corpus(std::vector<Passage> passages);

    std::size_t size() const { return passages_.size(); }
    bool empty() const { return passages_.empty(); }
    const Passage& at(std::size_t pos) const { return passages_.at(pos); }
    const std::vector<Passage>& passages() const { return passages_; }

    std::optional<std::size_t> position_of(const std::string& id) const;
    bool contains(const std::string& id) const { return position_of(id).has_value(); }

private:
    std::vector<Passage> passages_;
    std::unordered_map<std::string, std::size_t> by_id_;
};

/// One query-response turn; gold_ref_ids may be empty (the unsupervised setting).
struct Turn {
    std::string session_id;
    int turn_index = 0;  // 1-based, consecutive within a session
    std::string query;
    std::string response;
    std::vector<std::string> gold_ref_ids;

    TurnKey key() const { return {session_id, turn_index}; }
};

/// Conversation prefix a reformulator sees: prior (query, response) pairs
/// plus the query being asked now.
struct DialogueContext {
    std::vector<std::pair<std::string, std::string>> history;
    std::string current_query;
};

enum class Split { train, test };

struct Dataset {
    std::vector<std::vector<Turn>> sessions;
    Split split = Split::train;

    std::size_t turn_count() const;
};

/// Splits text into windows of `size` Unicode scalar values advancing by
/// size - overlap, the last window ending exactly at the text end. Chunk ids
/// are parent_id + "-" + zero-padded ordinal. Consecutive windows share
/// `overlap` scalars, so dropping the first `overlap` scalars of every window
/// after the first reconstructs the input.
std::vector<Passage> chunk_text(const std::string& parent_id, const std::string& text,
                                std::size_t size, std::size_t overlap);

/// Reads a passage file (one JSON record {"id","text"} per line).
Corpus load_passages(const std::filesystem::path& source);
void save_passages(const Corpus& corpus, const std::filesystem::path& dest);

/// Reads a conversation file (one JSON record per line: session_id, turn,
/// query, response, optional gold_ref_ids). Turn indices must be consecutive
/// from 1 within each session; gold ids are verified when a corpus is given.
Dataset load_conversations(const std::filesystem::path& source,
                           const Corpus* corpus = nullptr, Split split = Split::train);
void save_conversations(const Dataset& dataset, const std::filesystem::path& dest);

/// Dialogue context for turn t (1-based) of a session.
DialogueContext context(const std::vector<Turn>& session, int t);

/// Canonical "Q: ...\nA: ..." rendering of a context; used verbatim in
/// refinement prompts, candidate prompts, and training-data exports.
std::string serialize_context(const DialogueContext& ctx);

}  // namespace cqr
