#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cqr/errors.hpp"
#include "cqr/pipeline.hpp"
#include "support/fixtures.hpp"

using namespace cqr;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

PipelineConfig fixture_config(std::uint64_t seed = 11) {
    PipelineConfig cfg;
    cfg.n_iters = 3;
    cfg.seed = seed;
    cfg.threads = 4;
    return cfg;
}

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    return dir;
}

/// Delegates to an inner trainer but throws once on a chosen call.
class FailOnceTrainer : public Trainer {
public:
    FailOnceTrainer(Trainer& inner, std::size_t fail_on_call)
        : inner_(inner), fail_on_call_(fail_on_call) {}
    std::string optimize(const std::string& model_ref_in, const fs::path& sft_path,
                         const fs::path& dpo_path, const TrainerHyperparams& hp) override {
        if (++calls_ == fail_on_call_ && !failed_) {
            failed_ = true;
            throw TransportError("simulated trainer crash");
        }
        return inner_.optimize(model_ref_in, sft_path, dpo_path, hp);
    }

private:
    Trainer& inner_;
    std::size_t fail_on_call_;
    std::size_t calls_ = 0;
    bool failed_ = false;
};

}  // namespace

TEST_CASE("config file round-trip and hashing") {
    auto cfg = fixture_config();
    cfg.beta = 0.25;
    cfg.weights.cutoffs = {3, 10};
    auto path = fs::temp_directory_path() / "cqr_test_config.json";
    cfg.save(path);
    auto loaded = PipelineConfig::from_file(path);
    CHECK(loaded.beta == doctest::Approx(0.25));
    CHECK(loaded.weights.cutoffs == std::vector<int>{3, 10});
    CHECK(loaded.hash() == cfg.hash());
    loaded.k_pseudo = 5;
    CHECK(loaded.hash() != cfg.hash());
}

TEST_CASE("run: iteration 0 pseudo references equal raw-response retrieval") {
    auto corpus = fixtures::make_corpus();
    auto dataset = fixtures::make_dataset();
    cqr::MockLmClient client(7);
    fixtures::install_fixture_hook(client);
    IdentityTrainer trainer;
    auto cfg = fixture_config();
    cfg.n_iters = 1;
    cfg.initial_model_ref = "cqr-oracle";  // must still be ignored at iteration 0

    auto dir = fresh_dir("cqr_test_run_iter0");
    auto artifacts = run(cfg, dataset, corpus, client, trainer, dir);
    REQUIRE(artifacts.size() == 1);

    Bm25Retriever retriever(corpus, cfg.index_params);
    for (const auto& set : artifacts[0].pseudo_refs) {
        CHECK(set.source_query ==
              fixtures::response_text(fixtures::global_turn(
                  std::stoi(set.key.session_id.substr(4)), set.key.turn)));
        auto direct = retriever.retrieve(set.source_query, 100);
        REQUIRE(set.ref_ids.size() <= 3);
        for (std::size_t i = 0; i < set.ref_ids.size(); ++i) {
            CHECK(set.ref_ids[i] == direct.entries[i].passage_id);
            CHECK(set.scores[i] == direct.entries[i].score);
        }
        // by construction the top 3 are the distractors, not the gold passage
        const int g = fixtures::global_turn(std::stoi(set.key.session_id.substr(4)), set.key.turn);
        for (const auto& id : set.ref_ids) CHECK(id != fixtures::gold_id(g));
    }
}

TEST_CASE("run: trainer invoked once per iteration, model chain threads through") {
    auto corpus = fixtures::make_corpus();
    auto dataset = fixtures::make_dataset();
    cqr::MockLmClient client(7);
    fixtures::install_fixture_hook(client);
    IdentityTrainer trainer;
    auto cfg = fixture_config();
    cfg.initial_model_ref = "cqr-oracle";

    auto dir = fresh_dir("cqr_test_run_chain");
    auto artifacts = run(cfg, dataset, corpus, client, trainer, dir);
    REQUIRE(artifacts.size() == 3);
    CHECK(trainer.calls() == 3);
    CHECK(artifacts[0].model_ref_in == "cqr-oracle");
    for (const auto& art : artifacts) CHECK(art.model_ref_out == "cqr-oracle");
    CHECK(artifacts[2].model_ref_in == artifacts[1].model_ref_out);
}

TEST_CASE("run: oracle refiner lifts pseudo recall from iteration 1 on") {
    auto corpus = fixtures::make_corpus();
    auto dataset = fixtures::make_dataset();
    cqr::MockLmClient client(7);
    fixtures::install_fixture_hook(client);
    IdentityTrainer trainer;
    auto cfg = fixture_config();
    cfg.initial_model_ref = "cqr-oracle";

    auto dir = fresh_dir("cqr_test_run_oracle");
    run(cfg, dataset, corpus, client, trainer, dir);

    Bm25Retriever retriever(corpus, cfg.index_params);
    auto reports = evaluate_pseudo(dir, dataset, retriever, {3});
    REQUIRE(reports.size() == 3);
    double prev = -1.0;
    for (const auto& r : reports) {
        CHECK(r.mean_recall.at(3) >= prev);
        prev = r.mean_recall.at(3);
    }
    CHECK(reports[0].mean_recall.at(3) == doctest::Approx(0.0));  // distractors only
    CHECK(reports[2].mean_recall.at(3) == doctest::Approx(1.0));  // gold lifted to the top
    CHECK(reports[2].mean_recall.at(3) >= reports[0].mean_recall.at(3));
}

TEST_CASE("run: identical seeds give byte-identical exports") {
    auto corpus = fixtures::make_corpus();
    auto dataset = fixtures::make_dataset();
    IdentityTrainer trainer;
    auto cfg = fixture_config(23);
    cfg.initial_model_ref = "cqr-oracle";

    auto dir_a = fresh_dir("cqr_test_det_a");
    auto dir_b = fresh_dir("cqr_test_det_b");
    {
        cqr::MockLmClient client(7);
        fixtures::install_fixture_hook(client);
        run(cfg, dataset, corpus, client, trainer, dir_a);
    }
    {
        cqr::MockLmClient client(7);
        fixtures::install_fixture_hook(client);
        run(cfg, dataset, corpus, client, trainer, dir_b);
    }
    for (int i = 0; i < cfg.n_iters; ++i) {
        const std::string iter = "iter_" + std::to_string(i);
        for (const std::string file :
             {"sft.jsonl", "dpo.jsonl", "pseudo_refs.jsonl", "feedback.jsonl"}) {
            CAPTURE(iter + "/" + file);
            CHECK(slurp(dir_a / iter / file) == slurp(dir_b / iter / file));
        }
        CHECK(!slurp(dir_a / iter / "dpo.jsonl").empty());
        CHECK(!slurp(dir_a / iter / "sft.jsonl").empty());
    }
    CHECK(slurp(dir_a / "candidates.jsonl") == slurp(dir_b / "candidates.jsonl"));
}

TEST_CASE("run: export integrity (winners strictly outrank losers, target is head)") {
    auto corpus = fixtures::make_corpus();
    auto dataset = fixtures::make_dataset();
    cqr::MockLmClient client(7);
    fixtures::install_fixture_hook(client);
    IdentityTrainer trainer;
    auto cfg = fixture_config();
    cfg.n_iters = 1;

    auto dir = fresh_dir("cqr_test_integrity");
    auto artifacts = run(cfg, dataset, corpus, client, trainer, dir);
    REQUIRE(artifacts.size() == 1);
    const auto& art = artifacts[0];
    CHECK(!art.feedback.empty());

    std::size_t pairs_checked = 0;
    for (const auto& fb : art.feedback) {
        // score map for this turn
        std::map<std::string, double> score_of;
        for (const auto& e : fb.entries) score_of[e.candidate.text] = e.score;
        DialogueContext ctx;  // context irrelevant for the integrity check
        for (const auto& pair : sample_pairs(fb, ctx, cfg.n_top, cfg.n_bottom, cfg.max_pairs)) {
            CHECK(score_of.at(pair.winner) > score_of.at(pair.loser));
            ++pairs_checked;
        }
        // the SFT target must head every feedback list
        CHECK(sft_target(fb).text == fb.entries.front().candidate.text);
    }
    CHECK(pairs_checked > 0);
}

TEST_CASE("resume") {
    auto corpus = fixtures::make_corpus();
    auto dataset = fixtures::make_dataset();
    IdentityTrainer identity;
    auto cfg = fixture_config(37);
    cfg.initial_model_ref = "cqr-oracle";

    SUBCASE("crash mid-run leaves a resumable prefix") {
        auto dir = fresh_dir("cqr_test_resume_crash");
        {
            cqr::MockLmClient client(7);
            fixtures::install_fixture_hook(client);
            FailOnceTrainer failing(identity, 2);  // dies inside iteration 1
            CHECK_THROWS_AS(run(cfg, dataset, corpus, client, failing, dir), TransportError);
        }
        CHECK(fs::exists(dir / "iter_0" / "manifest.json"));
        CHECK(!fs::exists(dir / "iter_1" / "manifest.json"));
        const auto iter0_sft = slurp(dir / "iter_0" / "sft.jsonl");

        cqr::MockLmClient client(7);
        fixtures::install_fixture_hook(client);
        auto artifacts = resume(cfg, dataset, corpus, client, identity, dir);
        REQUIRE(artifacts.size() == 3);
        CHECK(artifacts[0].iteration == 0);
        CHECK(artifacts[2].iteration == 2);
        CHECK(slurp(dir / "iter_0" / "sft.jsonl") == iter0_sft);  // untouched
        CHECK(fs::exists(dir / "iter_2" / "manifest.json"));
        // one delegated call before the crash, two for the resumed iterations
        CHECK(identity.calls() == 3);
    }
    SUBCASE("resume of a complete run is a no-op") {
        auto dir = fresh_dir("cqr_test_resume_noop");
        IdentityTrainer trainer;
        {
            cqr::MockLmClient client(7);
            fixtures::install_fixture_hook(client);
            run(cfg, dataset, corpus, client, trainer, dir);
        }
        CHECK(trainer.calls() == 3);
        cqr::MockLmClient client(7);
        fixtures::install_fixture_hook(client);
        auto artifacts = resume(cfg, dataset, corpus, client, trainer, dir);
        REQUIRE(artifacts.size() == 3);
        CHECK(trainer.calls() == 3);  // nothing recomputed
        CHECK(artifacts[1].pseudo_refs.size() == dataset.turn_count());
    }
    SUBCASE("config hash mismatch is a resume error") {
        auto dir = fresh_dir("cqr_test_resume_hash");
        IdentityTrainer trainer;
        {
            cqr::MockLmClient client(7);
            fixtures::install_fixture_hook(client);
            run(cfg, dataset, corpus, client, trainer, dir);
        }
        auto other = cfg;
        other.k_pseudo = 5;
        cqr::MockLmClient client(7);
        fixtures::install_fixture_hook(client);
        CHECK_THROWS_AS(resume(other, dataset, corpus, client, trainer, dir), ResumeError);
    }
    SUBCASE("corrupt iteration manifest is a resume error naming the file") {
        auto dir = fresh_dir("cqr_test_resume_corrupt");
        IdentityTrainer trainer;
        {
            cqr::MockLmClient client(7);
            fixtures::install_fixture_hook(client);
            run(cfg, dataset, corpus, client, trainer, dir);
        }
        {
            std::ofstream out(dir / "iter_1" / "manifest.json");
            out << "{ not json";
        }
        cqr::MockLmClient client(7);
        fixtures::install_fixture_hook(client);
        CHECK_THROWS_WITH_AS(resume(cfg, dataset, corpus, client, trainer, dir),
                             doctest::Contains("iter_1"), ResumeError);
    }
}

TEST_CASE("evaluate_retrieval") {
    Corpus corpus({{"p1", "quantum entanglement"}, {"p2", "sourdough bread"}});
    Bm25Retriever retriever(corpus, {});
    Dataset dataset;
    dataset.sessions.push_back({{"s", 1, "q1", "a1", {"p1"}}, {"s", 2, "q2", "a2", {"p2"}}});

    SUBCASE("verbatim passage text retrieves at rank 1") {
        std::map<TurnKey, std::string> reforms{{{"s", 1}, "quantum entanglement"},
                                               {{"s", 2}, "sourdough bread"}};
        auto report = evaluate_retrieval(reforms, dataset, retriever, {5});
        CHECK(report.mean_mrr == doctest::Approx(1.0));
    }
    SUBCASE("reformulations sharing no corpus terms score zero") {
        std::map<TurnKey, std::string> reforms{{{"s", 1}, "zzz yyy"}, {{"s", 2}, "xxx www"}};
        auto report = evaluate_retrieval(reforms, dataset, retriever, {5});
        CHECK(report.mean_mrr == doctest::Approx(0.0));
        CHECK(report.mean_recall.at(5) == doctest::Approx(0.0));
    }
    SUBCASE("mixed two-turn macro mean") {
        std::map<TurnKey, std::string> reforms{{{"s", 1}, "quantum entanglement"},
                                               {{"s", 2}, "zzz"}};
        auto report = evaluate_retrieval(reforms, dataset, retriever, {5});
        CHECK(report.mean_mrr == doctest::Approx(0.5));
    }
    SUBCASE("no gold anywhere is an error") {
        Dataset no_gold;
        no_gold.sessions.push_back({{"s", 1, "q1", "a1", {}}});
        std::map<TurnKey, std::string> reforms{{{"s", 1}, "quantum"}};
        CHECK_THROWS_AS(evaluate_retrieval(reforms, no_gold, retriever, {5}), MetricError);
    }
}

TEST_CASE("command trainer runs a shell command and reads the model ref") {
    // appended args become the script's positional parameters
    CommandTrainer trainer("sh -c 'echo log line >&2; echo trained-$1' trainer");
    auto out = trainer.optimize("model-v1", "/tmp/sft.jsonl", "/tmp/dpo.jsonl", {});
    CHECK(out == "trained-model-v1");

    CommandTrainer failing("sh -c 'exit 3' trainer");
    CHECK_THROWS_AS(failing.optimize("m", "/tmp/a", "/tmp/b", {}), TransportError);

    CommandTrainer silent("true");
    CHECK_THROWS_AS(silent.optimize("m", "/tmp/a", "/tmp/b", {}), ProtocolError);
}
