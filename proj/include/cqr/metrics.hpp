#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "cqr/corpus.hpp"
#include "cqr/retriever.hpp"

namespace cqr {

/// Weights for the composite retrieval score plus the recall cutoffs feeding
/// its coverage component. Weights must be non-negative and sum to 1.
struct ScoreWeights {
    double w_cov = 1.0 / 3.0;
    double w_imm = 1.0 / 3.0;
    double w_con = 1.0 / 3.0;
    std::vector<int> cutoffs = {5, 20};  // sorted ascending, distinct

    void validate() const;
};

/// Fraction of gold ids found in the top k entries.
double recall_at_k(const RankedRetrieval& ranked, const std::set<std::string>& gold, int k);

/// Reciprocal rank of the first gold passage over the whole list; 0 if absent.
double mrr(const RankedRetrieval& ranked, const std::set<std::string>& gold);

/// Binary-gain NDCG at cutoff k. The ideal ordering places min(|gold|, k)
/// gold passages first.
double ndcg_at(const RankedRetrieval& ranked, const std::set<std::string>& gold, int k = 3);

/// Mean of Recall@k over the cutoff set.
double coverage_score(const RankedRetrieval& ranked, const std::set<std::string>& gold,
                      const std::vector<int>& cutoffs);

struct ScoreComponents {
    double coverage = 0.0;
    double immediacy = 0.0;   // MRR
    double concordance = 0.0; // NDCG@3
};

ScoreComponents score_components(const RankedRetrieval& ranked, const std::set<std::string>& gold,
                                 const ScoreWeights& weights);

/// w_cov * coverage + w_imm * MRR + w_con * NDCG@3.
double retrieval_score(const RankedRetrieval& ranked, const std::set<std::string>& gold,
                       const ScoreWeights& weights);
double retrieval_score(const ScoreComponents& c, const ScoreWeights& weights);

/// Per-turn metric values plus macro means. Turns with empty gold are
/// excluded from the means and counted in skipped_turns.
struct MetricReport {
    struct TurnRow {
        TurnKey key;
        double mrr = 0.0;
        double ndcg3 = 0.0;
        std::map<int, double> recall;  // cutoff -> value
    };

    std::vector<int> cutoffs;
    std::vector<TurnRow> rows;       // sorted by turn key
    std::size_t skipped_turns = 0;   // empty-gold turns
    double mean_mrr = 0.0;
    double mean_ndcg3 = 0.0;
    std::map<int, double> mean_recall;

    /// One JSON record per turn followed by a summary record.
    void save_jsonl(const std::filesystem::path& dest, const std::string& header_note = {}) const;
    /// Summary-last CSV for tables.
    void save_csv(const std::filesystem::path& dest) const;
};

/// Builds a MetricReport from per-turn rankings against per-turn gold sets.
/// Keys present in `ranked` but absent from `gold` (or with empty gold) are
/// skipped and counted. Throws MetricError when no turn is evaluable.
MetricReport pseudo_reference_accuracy(const std::map<TurnKey, RankedRetrieval>& ranked,
                                       const std::map<TurnKey, std::set<std::string>>& gold,
                                       const std::vector<int>& report_cutoffs = {5, 20});

}  // namespace cqr
