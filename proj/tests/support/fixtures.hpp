// Synthetic corpus/dataset pair for pipeline-level tests, built so the
// effect of response refinement on pseudo references is fully controlled:
//
//   - gold passage for turn g: "topic{g} topic{g} shared"  -- its topic term
//     appears nowhere else; "shared" appears in every gold passage.
//   - three distractor passages per turn, each holding one of the response's
//     "fdj{...}" terms; the raw response shares no term with its gold passage
//     except the low-idf "shared", so raw-response retrieval ranks the three
//     distractors on top and the gold passage stays out of the top 3.
//   - an oracle refiner that answers the refinement prompt with the gold
//     topic term lifts the gold passage to rank 1.
//
// The FixtureClient also serves candidate generation: per sampling seed it
// emits a distinct candidate in one of three quality tiers (hits the gold
// passage / hits a distractor / hits nothing), giving every turn a spread of
// retrieval scores and therefore non-empty preference pairs.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cqr/corpus.hpp"
#include "cqr/lm_client.hpp"

namespace fixtures {

inline constexpr int kSessions = 20;
inline constexpr int kTurnsPerSession = 3;
inline constexpr int kDistractorPool = 120;
inline constexpr int kPadPassages = 20;

inline int global_turn(int session, int turn_index) {
    return session * kTurnsPerSession + (turn_index - 1);
}

inline std::string gold_id(int g) { return "gold" + std::to_string(g); }

inline cqr::Corpus make_corpus() {
    std::vector<cqr::Passage> passages;
    const int turns = kSessions * kTurnsPerSession;
    for (int g = 0; g < turns; ++g) {
        passages.push_back({gold_id(g), "topic" + std::to_string(g) + " topic" +
                                            std::to_string(g) + " shared"});
    }
    for (int j = 0; j < kDistractorPool; ++j) {
        passages.push_back({"dist" + std::to_string(j),
                            "fdj" + std::to_string(j) + " pad" + std::to_string(j % 5)});
    }
    for (int p = 0; p < kPadPassages; ++p) {
        passages.push_back({"pad" + std::to_string(p), "pad" + std::to_string(p % 5) + " filler"});
    }
    return cqr::Corpus(std::move(passages));
}

inline std::vector<std::string> distractor_ids(int g) {
    return {"dist" + std::to_string((3 * g) % kDistractorPool),
            "dist" + std::to_string((3 * g + 1) % kDistractorPool),
            "dist" + std::to_string((3 * g + 2) % kDistractorPool)};
}

inline std::string response_text(int g) {
    return "rtag" + std::to_string(g) + " fdj" + std::to_string((3 * g) % kDistractorPool) +
           " fdj" + std::to_string((3 * g + 1) % kDistractorPool) + " fdj" +
           std::to_string((3 * g + 2) % kDistractorPool) + " shared";
}

inline cqr::Dataset make_dataset() {
    cqr::Dataset ds;
    for (int s = 0; s < kSessions; ++s) {
        std::vector<cqr::Turn> session;
        for (int t = 1; t <= kTurnsPerSession; ++t) {
            const int g = global_turn(s, t);
            cqr::Turn turn;
            turn.session_id = "sess" + std::to_string(s);
            turn.turn_index = t;
            turn.query = "qtag" + std::to_string(g) + " tell me more about it";
            turn.response = response_text(g);
            turn.gold_ref_ids = {gold_id(g)};
            session.push_back(std::move(turn));
        }
        ds.sessions.push_back(std::move(session));
    }
    return ds;
}

// last occurrence: prompts embed earlier turns' tags in the history
inline std::optional<int> find_tag(const std::string& text, const std::string& prefix) {
    auto pos = text.rfind(prefix);
    if (pos == std::string::npos) return std::nullopt;
    pos += prefix.size();
    std::size_t end = pos;
    while (end < text.size() && std::isdigit(static_cast<unsigned char>(text[end]))) ++end;
    if (end == pos) return std::nullopt;
    return std::stoi(text.substr(pos, end - pos));
}

/// Installs the fixture behavior on a mock client: refinement answers are the
/// gold topic terms; candidate answers vary in retrieval quality by sampling
/// seed.
inline void install_fixture_hook(cqr::MockLmClient& client) {
    client.set_hook([](const std::string& prompt,
                       const cqr::GenerationParams& params) -> std::optional<std::string> {
        if (prompt.find("state the main points") != std::string::npos) {
            if (auto g = find_tag(prompt, "rtag"))
                return "topic" + std::to_string(*g) + " topic" + std::to_string(*g);
            return std::nullopt;
        }
        auto g = find_tag(prompt, "qtag");
        if (!g) return std::nullopt;
        const std::uint64_t s = params.seed.value_or(0);
        const std::string uniq = " uniq" + std::to_string(s % 1000000);
        switch (s % 3) {
            case 0: return "topic" + std::to_string(*g) + uniq;
            case 1: return "fdj" + std::to_string((3 * *g) % kDistractorPool) + uniq;
            default: return "unrelated" + uniq;
        }
    });
}

}  // namespace fixtures
