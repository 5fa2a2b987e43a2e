#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cqr/corpus.hpp"
#include "cqr/lm_client.hpp"
#include "cqr/metrics.hpp"
#include "cqr/pseudo_ref.hpp"
#include "cqr/retriever.hpp"

namespace cqr {

/// One candidate reformulation of a query. Indices are 1-based and unique
/// within a turn; rewrites precede expansions.
struct CandidateQuery {
    enum class Kind { rewrite, expansion };
    int index = 0;
    std::string text;
    Kind kind = Kind::rewrite;
};

const char* to_string(CandidateQuery::Kind kind);

/// Editable prompt texts with {placeholder} substitution. Files named
/// rewrite.txt / expand.txt override the built-in wording.
struct PromptTemplates {
    std::string rewrite;  // placeholders: {context}
    std::string expand;   // placeholders: {context}, {rewrite}

    static PromptTemplates defaults();
    static PromptTemplates from_dir(const std::filesystem::path& dir);

    std::string render_rewrite(const std::string& context_serialized) const;
    std::string render_expand(const std::string& context_serialized,
                              const std::string& rewrite_text) const;
};

struct CandidateGenConfig {
    int n_rewrite = 12;
    int n_expand = 3;
    std::string model_ref = "candidate-lm";
    GenerationParams params;
    std::uint64_t seed = 0;
    int max_attempts_per_slot = 5;  // resampling budget when duplicates come back
    PromptTemplates prompts = PromptTemplates::defaults();
};

/// Samples rewrite candidates from the rewriting prompt and expansion
/// candidates by applying the expansion prompt to sampled rewrite outputs.
/// Exact duplicates are resampled up to the per-slot budget; the result may
/// be shorter than n_rewrite + n_expand when attempts exhaust. Failed
/// completions are skipped and counted in *failed_attempts.
std::vector<CandidateQuery> generate_candidates(const DialogueContext& ctx, LmClient& client,
                                                const CandidateGenConfig& config = {},
                                                std::size_t* failed_attempts = nullptr);

/// Candidates sorted by descending retrieval score against the pseudo
/// references; ties keep ascending candidate index.
struct PreferenceFeedback {
    struct Entry {
        CandidateQuery candidate;
        double score = 0.0;
        ScoreComponents components;
    };
    TurnKey key;
    std::vector<Entry> entries;
};

/// Scores each candidate by retrieving with it and comparing against the
/// pseudo reference ids. Requires at least two candidates and a non-empty
/// pseudo reference set.
PreferenceFeedback score_candidates(const std::vector<CandidateQuery>& candidates,
                                    const PseudoReferenceSet& pseudo_refs,
                                    const Retriever& retriever, const ScoreWeights& weights,
                                    std::size_t top_n = 100);

/// The supervised fine-tuning target: the top-ranked candidate.
const CandidateQuery& sft_target(const PreferenceFeedback& feedback);

/// Winner/loser pair with a strictly positive score gap.
struct PreferencePair {
    TurnKey key;
    DialogueContext context;
    std::string winner;
    std::string loser;
    double score_gap = 0.0;
};

/// Cross product of the top n_top entries with the bottom n_bottom entries,
/// equal-score pairs dropped, truncated to max_pairs by descending gap.
std::vector<PreferencePair> sample_pairs(const PreferenceFeedback& feedback,
                                         const DialogueContext& ctx, int n_top = 3,
                                         int n_bottom = 3, int max_pairs = 6);

/// Negative log-likelihood of a scored completion.
double sft_loss(const ScoredCompletion& scored);

struct LossHyperparams {
    double beta = 0.5;

    void validate() const;
};

/// Pairwise preference loss -ln sigmoid(beta * margin) where margin is the
/// policy-vs-reference log-probability advantage of the winner over the
/// loser. Strictly decreasing in the margin; ln 2 at zero margin.
double dpo_loss(double lp_policy_w, double lp_policy_l, double lp_ref_w, double lp_ref_l,
                const LossHyperparams& hp);

struct SftExample {
    TurnKey key;
    std::string context_serialized;
    std::string target;
};

struct ExportPaths {
    std::filesystem::path sft;
    std::filesystem::path dpo;
    std::filesystem::path manifest;
};

/// Writes sft.jsonl ({context_serialized, target}), dpo.jsonl
/// ({context_serialized, chosen, rejected}) and a manifest with counts, the
/// config hash and the iteration index. Records are ordered by turn key, so
/// re-export of identical inputs is byte-identical.
ExportPaths export_training_data(std::vector<SftExample> sft_targets,
                                 std::vector<PreferencePair> pairs,
                                 const std::filesystem::path& destination,
                                 std::uint64_t config_hash, int iteration);

void save_candidates(const std::map<TurnKey, std::vector<CandidateQuery>>& by_turn,
                     const std::filesystem::path& dest);
std::map<TurnKey, std::vector<CandidateQuery>> load_candidates(const std::filesystem::path& source);

void save_feedback(const std::vector<PreferenceFeedback>& feedback,
                   const std::filesystem::path& dest);
std::vector<PreferenceFeedback> load_feedback(const std::filesystem::path& source);

}  // namespace cqr
