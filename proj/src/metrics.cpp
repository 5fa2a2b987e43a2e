#include "cqr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "cqr/errors.hpp"
#include "json.hpp"

namespace cqr {

using nlohmann::json;

void ScoreWeights::validate() const {
    if (w_cov < 0.0 || w_imm < 0.0 || w_con < 0.0)
        throw ParameterError("score weights must be non-negative");
    if (std::abs(w_cov + w_imm + w_con - 1.0) > 1e-12)
        throw ParameterError("score weights must sum to 1");
    if (cutoffs.empty()) throw ParameterError("cutoff set must be non-empty");
    for (std::size_t i = 0; i < cutoffs.size(); ++i) {
        if (cutoffs[i] < 1) throw ParameterError("cutoffs must be positive");
        if (i > 0 && cutoffs[i] <= cutoffs[i - 1])
            throw ParameterError("cutoffs must be ascending and distinct");
    }
}

namespace {

void require_gold(const std::set<std::string>& gold) {
    if (gold.empty()) throw MetricError("metric undefined for empty gold set");
}

}  // namespace

double recall_at_k(const RankedRetrieval& ranked, const std::set<std::string>& gold, int k) {
    require_gold(gold);
    if (k < 1) throw ParameterError("k must be >= 1");
    std::size_t hits = 0;
    const std::size_t limit = std::min<std::size_t>(ranked.entries.size(), static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < limit; ++i) {
        if (gold.count(ranked.entries[i].passage_id)) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(gold.size());
}

double mrr(const RankedRetrieval& ranked, const std::set<std::string>& gold) {
    require_gold(gold);
    for (std::size_t i = 0; i < ranked.entries.size(); ++i) {
        if (gold.count(ranked.entries[i].passage_id)) return 1.0 / static_cast<double>(i + 1);
    }
    return 0.0;
}

double ndcg_at(const RankedRetrieval& ranked, const std::set<std::string>& gold, int k) {
    require_gold(gold);
    if (k < 1) throw ParameterError("k must be >= 1");
    double dcg = 0.0;
    const std::size_t limit = std::min<std::size_t>(ranked.entries.size(), static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < limit; ++i) {
        if (gold.count(ranked.entries[i].passage_id)) dcg += 1.0 / std::log2(static_cast<double>(i + 2));
    }
    double idcg = 0.0;
    const std::size_t ideal = std::min<std::size_t>(gold.size(), static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < ideal; ++i) idcg += 1.0 / std::log2(static_cast<double>(i + 2));
    return std::clamp(dcg / idcg, 0.0, 1.0);
}

double coverage_score(const RankedRetrieval& ranked, const std::set<std::string>& gold,
                      const std::vector<int>& cutoffs) {
    require_gold(gold);
    if (cutoffs.empty()) throw ParameterError("cutoff set must be non-empty");
    double sum = 0.0;
    for (int k : cutoffs) sum += recall_at_k(ranked, gold, k);
    return sum / static_cast<double>(cutoffs.size());
}

ScoreComponents score_components(const RankedRetrieval& ranked, const std::set<std::string>& gold,
                                 const ScoreWeights& weights) {
    weights.validate();
    return {coverage_score(ranked, gold, weights.cutoffs), mrr(ranked, gold),
            ndcg_at(ranked, gold, 3)};
}

double retrieval_score(const ScoreComponents& c, const ScoreWeights& weights) {
    weights.validate();
    return weights.w_cov * c.coverage + weights.w_imm * c.immediacy + weights.w_con * c.concordance;
}

double retrieval_score(const RankedRetrieval& ranked, const std::set<std::string>& gold,
                       const ScoreWeights& weights) {
    return retrieval_score(score_components(ranked, gold, weights), weights);
}

MetricReport pseudo_reference_accuracy(const std::map<TurnKey, RankedRetrieval>& ranked,
                                       const std::map<TurnKey, std::set<std::string>>& gold,
                                       const std::vector<int>& report_cutoffs) {
    if (report_cutoffs.empty()) throw ParameterError("report cutoffs must be non-empty");
    MetricReport report;
    report.cutoffs = report_cutoffs;

    for (const auto& [key, ranking] : ranked) {
        auto git = gold.find(key);
        if (git == gold.end() || git->second.empty()) {
            ++report.skipped_turns;
            continue;
        }
        MetricReport::TurnRow row;
        row.key = key;
        row.mrr = mrr(ranking, git->second);
        row.ndcg3 = ndcg_at(ranking, git->second, 3);
        for (int k : report_cutoffs) row.recall[k] = recall_at_k(ranking, git->second, k);
        report.rows.push_back(std::move(row));
    }
    if (report.rows.empty()) throw MetricError("no evaluable turns (all gold sets empty)");

    for (const auto& row : report.rows) {
        report.mean_mrr += row.mrr;
        report.mean_ndcg3 += row.ndcg3;
        for (const auto& [k, v] : row.recall) report.mean_recall[k] += v;
    }
    const double n = static_cast<double>(report.rows.size());
    report.mean_mrr /= n;
    report.mean_ndcg3 /= n;
    for (auto& [k, v] : report.mean_recall) v /= n;
    return report;
}

namespace {

json row_json(const MetricReport::TurnRow& row) {
    json recalls;
    for (const auto& [k, v] : row.recall) recalls["recall@" + std::to_string(k)] = v;
    return json{{"session_id", row.key.session_id},
                {"turn", row.key.turn},
                {"mrr", row.mrr},
                {"ndcg@3", row.ndcg3},
                {"recall", recalls}};
}

}  // namespace

void MetricReport::save_jsonl(const std::filesystem::path& dest, const std::string& header_note) const {
    std::ofstream out(dest);
    if (!out) throw ParseError("cannot write report file " + dest.string());
    for (const auto& row : rows) out << row_json(row).dump() << '\n';
    json summary{{"record", "summary"},
                 {"turns", rows.size()},
                 {"skipped_turns", skipped_turns},
                 {"mean_mrr", mean_mrr},
                 {"mean_ndcg@3", mean_ndcg3}};
    for (const auto& [k, v] : mean_recall) summary["mean_recall@" + std::to_string(k)] = v;
    if (!header_note.empty()) summary["note"] = header_note;
    out << summary.dump() << '\n';
}

void MetricReport::save_csv(const std::filesystem::path& dest) const {
    std::ofstream out(dest);
    if (!out) throw ParseError("cannot write report file " + dest.string());
    out << "session_id,turn,mrr,ndcg@3";
    for (int k : cutoffs) out << ",recall@" << k;
    out << '\n';
    out.precision(10);
    for (const auto& row : rows) {
        out << row.key.session_id << ',' << row.key.turn << ',' << row.mrr << ',' << row.ndcg3;
        for (int k : cutoffs) out << ',' << row.recall.at(k);
        out << '\n';
    }
    out << "mean," << rows.size() << ',' << mean_mrr << ',' << mean_ndcg3;
    for (int k : cutoffs) out << ',' << mean_recall.at(k);
    out << '\n';
}

}  // namespace cqr
