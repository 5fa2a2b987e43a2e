#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cqr/corpus.hpp"
#include "cqr/lm_client.hpp"
#include "cqr/retriever.hpp"

namespace cqr {

/// Identifier recorded in manifests for the refinement prompt layout.
inline constexpr const char* kRefinementPromptFormat = "qa-pairs-v1";

/// Pseudo reference passages for one turn: the top-k retrieval hits for the
/// raw response concatenated with its refined counterpart.
struct PseudoReferenceSet {
    TurnKey key;
    std::vector<std::string> ref_ids;  // distinct, length <= k_pseudo
    std::vector<double> scores;        // non-increasing, parallel to ref_ids
    std::string source_query;          // exact string sent to the retriever

    bool unsupervised() const { return ref_ids.empty(); }
};

/// Wraps a raw response in the fixed query-forming template so the
/// reformulation model can process it as a query.
std::string form_refinement_query(const std::string& response);

/// Refined response for one turn. Returns the empty string when no trained
/// model is available (iteration 0). Otherwise prompts `client` with the
/// serialized dialogue, the current turn, and the templated query.
/// Transport failures propagate; an empty completion is a refinement error.
std::string refine_response(const DialogueContext& ctx, const std::string& response,
                            const std::optional<std::string>& model_ref, LmClient& client,
                            const GenerationParams& params = {});

/// Degrading variant used per turn by the pipeline: any failure falls back to
/// the empty refinement and is reported through `warning`.
std::string refine_response_or_empty(const DialogueContext& ctx, const std::string& response,
                                     const std::optional<std::string>& model_ref, LmClient& client,
                                     const GenerationParams& params, std::string* warning);

/// Retrieves pseudo references for `response` + `refined` (single-space
/// concatenation; no trailing space when refined is empty). Retrieval pool is
/// max(k_pseudo, 100), truncated to k_pseudo.
PseudoReferenceSet generate_pseudo_refs(const TurnKey& key, const std::string& response,
                                        const std::string& refined, const Retriever& retriever,
                                        std::size_t k_pseudo = 3);

/// Per-iteration dump, one record per turn.
void save_pseudo_refs(const std::vector<PseudoReferenceSet>& sets, int iteration,
                      const std::filesystem::path& dest);
std::vector<PseudoReferenceSet> load_pseudo_refs(const std::filesystem::path& source);

}  // namespace cqr
