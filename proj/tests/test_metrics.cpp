#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <random>

#include "cqr/errors.hpp"
#include "cqr/metrics.hpp"
#include "support/oracles.hpp"

using namespace cqr;

namespace {

RankedRetrieval make_ranked(const std::vector<std::string>& ids) {
    RankedRetrieval r;
    double score = static_cast<double>(ids.size());
    for (const auto& id : ids) r.entries.push_back({id, score--});
    return r;
}

}  // namespace

TEST_CASE("recall_at_k") {
    CHECK(recall_at_k(make_ranked({"A", "B", "C"}), {"A"}, 1) == doctest::Approx(1.0));
    CHECK(recall_at_k(make_ranked({"B", "A", "C", "D", "E"}), {"A", "C", "F"}, 5) ==
          doctest::Approx(2.0 / 3.0));
    CHECK(recall_at_k(make_ranked({}), {"A"}, 5) == doctest::Approx(0.0));
    CHECK_THROWS_AS(recall_at_k(make_ranked({"A"}), {}, 5), MetricError);
}

TEST_CASE("mrr") {
    CHECK(mrr(make_ranked({"A", "B"}), {"A"}) == doctest::Approx(1.0));
    CHECK(mrr(make_ranked({"B", "A"}), {"A"}) == doctest::Approx(0.5));
    CHECK(mrr(make_ranked({"B", "C"}), {"A"}) == doctest::Approx(0.0));
}

TEST_CASE("ndcg_at") {
    CHECK(ndcg_at(make_ranked({"A", "B", "C"}), {"A"}, 3) == doctest::Approx(1.0));
    CHECK(ndcg_at(make_ranked({"B", "A", "C"}), {"A"}, 3) ==
          doctest::Approx(1.0 / std::log2(3.0)).epsilon(1e-9));
    CHECK(ndcg_at(make_ranked({"A", "B", "C"}), {"A", "B"}, 3) == doctest::Approx(1.0));
}

TEST_CASE("coverage_score") {
    // K={5,20}: one of two gold found -> both recalls 0.5
    auto ranked = make_ranked({"X", "A", "Y"});
    CHECK(coverage_score(ranked, {"A", "Z"}, {5, 20}) == doctest::Approx(0.5));
    CHECK(coverage_score(make_ranked({"A"}), {"A"}, {5, 20}) == doctest::Approx(1.0));
    CHECK(coverage_score(make_ranked({"X"}), {"A"}, {5, 20}) == doctest::Approx(0.0));
}

TEST_CASE("retrieval_score") {
    ScoreWeights thirds;
    CHECK(retrieval_score(ScoreComponents{0.6, 0.3, 0.9}, thirds) == doctest::Approx(0.6));

    ScoreWeights cov_only{1.0, 0.0, 0.0, {5, 20}};
    auto ranked = make_ranked({"X", "A", "Y"});
    CHECK(retrieval_score(ranked, {"A", "Z"}, cov_only) ==
          doctest::Approx(coverage_score(ranked, {"A", "Z"}, {5, 20})));

    ScoreWeights imm_only{0.0, 1.0, 0.0, {5, 20}};
    CHECK(retrieval_score(make_ranked({"X", "Y", "Z", "A"}), {"A"}, imm_only) ==
          doctest::Approx(0.25));

    ScoreWeights bad{0.5, 0.2, 0.2, {5, 20}};
    CHECK_THROWS_AS(bad.validate(), ParameterError);
    CHECK_THROWS_AS(retrieval_score(ranked, {"A"}, bad), ParameterError);
}

TEST_CASE("metrics match brute-force oracles on 1000 random instances") {
    std::mt19937_64 rng(12345);
    std::uniform_int_distribution<int> list_len(0, 100);
    std::uniform_int_distribution<int> gold_len(1, 5);
    std::uniform_int_distribution<int> id_dist(0, 149);

    for (int round = 0; round < 1000; ++round) {
        std::vector<std::string> ids;
        std::set<std::string> used;
        const int n = list_len(rng);
        while (static_cast<int>(ids.size()) < n) {
            std::string id = "p" + std::to_string(id_dist(rng));
            if (used.insert(id).second) ids.push_back(id);
        }
        std::set<std::string> gold;
        const int g = gold_len(rng);
        while (static_cast<int>(gold.size()) < g) gold.insert("p" + std::to_string(id_dist(rng)));

        auto ranked = make_ranked(ids);
        for (int k : {1, 3, 5, 20, 100}) {
            CHECK(recall_at_k(ranked, gold, k) ==
                  doctest::Approx(oracle::recall_at_k(ids, gold, k)).epsilon(1e-9));
        }
        CHECK(mrr(ranked, gold) == doctest::Approx(oracle::mrr(ids, gold)).epsilon(1e-9));
        CHECK(ndcg_at(ranked, gold, 3) ==
              doctest::Approx(oracle::ndcg_at(ids, gold, 3)).epsilon(1e-9));
        CHECK(coverage_score(ranked, gold, {5, 20}) ==
              doctest::Approx(oracle::coverage(ids, gold, {5, 20})).epsilon(1e-9));
        ScoreWeights w{0.5, 0.25, 0.25, {5, 20}};
        CHECK(retrieval_score(ranked, gold, w) ==
              doctest::Approx(oracle::retrieval_score(ids, gold, 0.5, 0.25, 0.25, {5, 20}))
                  .epsilon(1e-9));
    }
}

TEST_CASE("metric invariance under id renaming") {
    std::vector<std::string> ids{"a", "b", "c", "d"};
    std::set<std::string> gold{"b", "d"};
    std::vector<std::string> renamed{"x1", "x2", "x3", "x4"};
    std::set<std::string> renamed_gold{"x2", "x4"};
    CHECK(mrr(make_ranked(ids), gold) == mrr(make_ranked(renamed), renamed_gold));
    CHECK(ndcg_at(make_ranked(ids), gold, 3) == ndcg_at(make_ranked(renamed), renamed_gold, 3));
    CHECK(recall_at_k(make_ranked(ids), gold, 3) ==
          recall_at_k(make_ranked(renamed), renamed_gold, 3));
}

TEST_CASE("recall non-decreasing in k; coverage bounded by recall extremes") {
    std::mt19937_64 rng(77);
    for (int round = 0; round < 50; ++round) {
        std::vector<std::string> ids;
        for (int i = 0; i < 30; ++i) ids.push_back("p" + std::to_string(rng() % 60));
        std::sort(ids.begin(), ids.end());
        ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
        std::set<std::string> gold{"p1", "p7", "p13"};
        auto ranked = make_ranked(ids);
        double prev = 0.0;
        for (int k = 1; k <= 30; ++k) {
            double r = recall_at_k(ranked, gold, k);
            CHECK(r >= prev);
            prev = r;
        }
        double cov = coverage_score(ranked, gold, {5, 20});
        CHECK(cov >= std::min(recall_at_k(ranked, gold, 5), recall_at_k(ranked, gold, 20)));
        CHECK(cov <= std::max(recall_at_k(ranked, gold, 5), recall_at_k(ranked, gold, 20)));
    }
}

TEST_CASE("retrieval_score is Pareto monotone in its components") {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int round = 0; round < 200; ++round) {
        ScoreComponents lo{unit(rng), unit(rng), unit(rng)};
        ScoreComponents hi{lo.coverage + unit(rng) * (1 - lo.coverage),
                           lo.immediacy + unit(rng) * (1 - lo.immediacy),
                           lo.concordance + unit(rng) * (1 - lo.concordance)};
        double w1 = unit(rng), w2 = unit(rng), w3 = unit(rng);
        const double sum = w1 + w2 + w3;
        ScoreWeights w{w1 / sum, w2 / sum, w3 / sum, {5, 20}};
        CHECK(retrieval_score(hi, w) >= retrieval_score(lo, w));
        if (hi.coverage > lo.coverage && hi.immediacy == lo.immediacy &&
            hi.concordance == lo.concordance && w.w_cov > 0) {
            CHECK(retrieval_score(hi, w) > retrieval_score(lo, w));
        }
    }
}

TEST_CASE("pseudo_reference_accuracy") {
    SUBCASE("perfect rankings give MRR 1") {
        std::map<TurnKey, RankedRetrieval> ranked{{{"s", 1}, make_ranked({"g1", "x"})},
                                                  {{"s", 2}, make_ranked({"g2", "y"})}};
        std::map<TurnKey, std::set<std::string>> gold{{{"s", 1}, {"g1"}}, {{"s", 2}, {"g2"}}};
        auto report = pseudo_reference_accuracy(ranked, gold, {5});
        CHECK(report.mean_mrr == doctest::Approx(1.0));
        CHECK(report.rows.size() == 2);
        CHECK(report.skipped_turns == 0);
    }
    SUBCASE("gold never retrieved gives zero means") {
        std::map<TurnKey, RankedRetrieval> ranked{{{"s", 1}, make_ranked({"x", "y"})}};
        std::map<TurnKey, std::set<std::string>> gold{{{"s", 1}, {"g"}}};
        auto report = pseudo_reference_accuracy(ranked, gold, {5});
        CHECK(report.mean_mrr == doctest::Approx(0.0));
        CHECK(report.mean_ndcg3 == doctest::Approx(0.0));
    }
    SUBCASE("mixed ranks average and empty-gold turns are counted") {
        std::map<TurnKey, RankedRetrieval> ranked{{{"s", 1}, make_ranked({"g1", "x"})},
                                                  {{"s", 2}, make_ranked({"x", "g2"})},
                                                  {{"s", 3}, make_ranked({"x", "y"})}};
        std::map<TurnKey, std::set<std::string>> gold{
            {{"s", 1}, {"g1"}}, {{"s", 2}, {"g2"}}, {{"s", 3}, {}}};
        auto report = pseudo_reference_accuracy(ranked, gold, {5});
        CHECK(report.mean_mrr == doctest::Approx(0.75));
        CHECK(report.skipped_turns == 1);
    }
    SUBCASE("no evaluable turns is an error") {
        std::map<TurnKey, RankedRetrieval> ranked{{{"s", 1}, make_ranked({"x"})}};
        std::map<TurnKey, std::set<std::string>> gold{{{"s", 1}, {}}};
        CHECK_THROWS_AS(pseudo_reference_accuracy(ranked, gold, {5}), MetricError);
    }
}

TEST_CASE("report serialization") {
    std::map<TurnKey, RankedRetrieval> ranked{{{"s", 1}, make_ranked({"g1", "x"})}};
    std::map<TurnKey, std::set<std::string>> gold{{{"s", 1}, {"g1"}}};
    auto report = pseudo_reference_accuracy(ranked, gold, {5, 20});
    auto dir = std::filesystem::temp_directory_path();
    CHECK_NOTHROW(
        report.save_jsonl(dir / "cqr_test_report.jsonl", "weights=(1/3,1/3,1/3) K={5,20}"));
    CHECK_NOTHROW(report.save_csv(dir / "cqr_test_report.csv"));
    CHECK(std::filesystem::file_size(dir / "cqr_test_report.jsonl") > 0);
    CHECK(std::filesystem::file_size(dir / "cqr_test_report.csv") > 0);
}
