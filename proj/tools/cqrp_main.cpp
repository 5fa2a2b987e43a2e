// cqrp: conversational query reformulation preference pipeline CLI.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cqr/bounds_sim.hpp"
#include "cqr/corpus.hpp"
#include "cqr/errors.hpp"
#include "cqr/lm_client.hpp"
#include "cqr/metrics.hpp"
#include "cqr/pipeline.hpp"
#include "cqr/preference.hpp"
#include "cqr/pseudo_ref.hpp"
#include "cqr/retriever.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct BackendFlags {
    std::string backend = "mock";
    std::string base_url = "http://127.0.0.1:8080";
    std::string request_log;
    std::uint64_t seed = 0;

    void attach(CLI::App* cmd) {
        cmd->add_option("--backend", backend, "LM backend: mock or http")
            ->check(CLI::IsMember({"mock", "http"}));
        cmd->add_option("--base-url", base_url, "chat-completions base URL (http backend)");
        cmd->add_option("--request-log", request_log, "request log file (http backend)");
        cmd->add_option("--seed", seed, "seed for the mock backend and sampling");
    }

    std::unique_ptr<cqr::LmClient> make() const {
        if (backend == "http") {
            cqr::HttpLmClient::Options opt;
            opt.base_url = base_url;
            auto client = std::make_unique<cqr::HttpLmClient>(opt);
            if (!request_log.empty()) {
                client->set_log(std::make_shared<cqr::RequestLog>(
                    request_log, "run-" + std::to_string(seed)));
            }
            return client;
        }
        return std::make_unique<cqr::MockLmClient>(seed);
    }
};

struct RetrieverFlags {
    std::string passages_path;
    std::string index_path;
    double k1 = 0.9;
    double b = 0.4;

    void attach(CLI::App* cmd) {
        auto* p = cmd->add_option("--passages", passages_path, "passage file (jsonl)");
        auto* i = cmd->add_option("--index", index_path, "serialized index file");
        p->excludes(i);
        cmd->add_option("--k1", k1, "BM25 k1");
        cmd->add_option("--b", b, "BM25 b");
    }

    cqr::Bm25Retriever make() const {
        if (!index_path.empty()) return cqr::Bm25Retriever(cqr::Bm25Index::load(index_path));
        if (passages_path.empty()) throw cqr::ParameterError("provide --passages or --index");
        auto corpus = cqr::load_passages(passages_path);
        return cqr::Bm25Retriever(corpus, {k1, b});
    }
};

std::map<cqr::TurnKey, cqr::DialogueContext> contexts_by_key(const cqr::Dataset& dataset) {
    std::map<cqr::TurnKey, cqr::DialogueContext> out;
    for (const auto& session : dataset.sessions) {
        for (int t = 1; t <= static_cast<int>(session.size()); ++t) {
            out.emplace(session[static_cast<std::size_t>(t) - 1].key(), cqr::context(session, t));
        }
    }
    return out;
}

int cmd_chunk(const std::string& in, const std::string& out, std::size_t size,
              std::size_t overlap) {
    std::ifstream docs(in);
    if (!docs) throw cqr::ParseError("cannot open " + in);
    std::ofstream dest(out);
    if (!dest) throw cqr::ParseError("cannot write " + out);

    std::string line;
    std::size_t line_no = 0, n_docs = 0, n_chunks = 0;
    while (std::getline(docs, line)) {
        ++line_no;
        if (line.empty()) continue;
        json rec = json::parse(line, nullptr, false);
        if (rec.is_discarded() || !rec.contains("id") || !rec.contains("text"))
            throw cqr::ParseError("malformed document record", line_no);
        ++n_docs;
        for (const auto& chunk : cqr::chunk_text(rec["id"].get<std::string>(),
                                                 rec["text"].get<std::string>(), size, overlap)) {
            dest << json{{"id", chunk.id}, {"text", chunk.text}}.dump() << '\n';
            ++n_chunks;
        }
    }
    std::cout << "chunked " << n_docs << " documents into " << n_chunks << " passages\n";
    return 0;
}

struct RunFlags {
    std::string conversations, passages, out_dir, config_path;
    std::string trainer = "identity", trainer_cmd;
    std::optional<int> n_iters;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> model_ref;
    BackendFlags backend;

    void attach(CLI::App* cmd) {
        cmd->add_option("--conversations", conversations, "conversation file")->required();
        cmd->add_option("--passages", passages, "passage file")->required();
        cmd->add_option("--out-dir", out_dir, "artifact directory")->required();
        cmd->add_option("--config", config_path, "pipeline config file (json)");
        cmd->add_option("--trainer", trainer, "trainer: identity or command")
            ->check(CLI::IsMember({"identity", "command"}));
        cmd->add_option("--trainer-cmd", trainer_cmd, "external trainer command");
        cmd->add_option("--n-iters", n_iters, "iteration count override");
        cmd->add_option("--run-seed", seed, "pipeline seed override");
        cmd->add_option("--model-ref", model_ref, "initial reformulation model override");
        backend.attach(cmd);
    }

    int execute(bool resuming) const {
        cqr::PipelineConfig cfg;
        if (!config_path.empty()) cfg = cqr::PipelineConfig::from_file(config_path);
        if (n_iters) cfg.n_iters = *n_iters;
        if (seed) cfg.seed = *seed;
        if (model_ref) cfg.initial_model_ref = *model_ref;

        auto corpus = cqr::load_passages(passages);
        auto dataset = cqr::load_conversations(conversations, &corpus);
        auto client = backend.make();

        std::unique_ptr<cqr::Trainer> tr;
        if (trainer == "command") {
            if (trainer_cmd.empty())
                throw cqr::ParameterError("--trainer command requires --trainer-cmd");
            tr = std::make_unique<cqr::CommandTrainer>(trainer_cmd);
        } else {
            tr = std::make_unique<cqr::IdentityTrainer>();
        }

        auto artifacts = resuming ? cqr::resume(cfg, dataset, corpus, *client, *tr, out_dir)
                                  : cqr::run(cfg, dataset, corpus, *client, *tr, out_dir);
        for (const auto& art : artifacts) {
            std::cout << "iteration " << art.iteration << ": " << art.feedback.size()
                      << " feedback turns, model '" << art.model_ref_in << "' -> '"
                      << art.model_ref_out << "'";
            if (!art.warnings.empty()) std::cout << " (" << art.warnings.size() << " warnings)";
            std::cout << '\n';
        }
        return 0;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Reference-free preference-data pipeline for conversational query reformulation"};
    app.require_subcommand(1);

    // ---- chunk ----
    std::string chunk_in, chunk_out;
    std::size_t chunk_size = 500, chunk_overlap = 100;
    auto* chunk = app.add_subcommand("chunk", "split raw documents into overlapping passages");
    chunk->add_option("--in", chunk_in, "document file (jsonl: id, text)")->required();
    chunk->add_option("--out", chunk_out, "passage output file")->required();
    chunk->add_option("--size", chunk_size, "window size in characters");
    chunk->add_option("--overlap", chunk_overlap, "window overlap in characters");

    // ---- index ----
    std::string index_passages, index_out;
    double index_k1 = 0.9, index_b = 0.4;
    auto* index = app.add_subcommand("index", "build and save a BM25 index");
    index->add_option("--passages", index_passages, "passage file")->required();
    index->add_option("--out", index_out, "index output file")->required();
    index->add_option("--k1", index_k1, "BM25 k1");
    index->add_option("--b", index_b, "BM25 b");

    // ---- candidates ----
    std::string cand_conv, cand_out, cand_model = "candidate-lm", cand_prompts;
    int cand_rewrite = 12, cand_expand = 3;
    BackendFlags cand_backend;
    auto* candidates = app.add_subcommand("candidates", "sample candidate reformulations per turn");
    candidates->add_option("--conversations", cand_conv, "conversation file")->required();
    candidates->add_option("--out", cand_out, "candidate output file")->required();
    candidates->add_option("--model", cand_model, "candidate model reference");
    candidates->add_option("--n-rewrite", cand_rewrite, "rewriting samples per turn");
    candidates->add_option("--n-expand", cand_expand, "expansion samples per turn");
    candidates->add_option("--prompt-dir", cand_prompts, "directory with rewrite.txt/expand.txt");
    cand_backend.attach(candidates);

    // ---- pseudo ----
    std::string pseudo_conv, pseudo_out, pseudo_model;
    std::size_t pseudo_k = 3;
    int pseudo_iter = 0;
    RetrieverFlags pseudo_retr;
    BackendFlags pseudo_backend;
    auto* pseudo = app.add_subcommand("pseudo", "retrieve pseudo reference passages per turn");
    pseudo->add_option("--conversations", pseudo_conv, "conversation file")->required();
    pseudo->add_option("--out", pseudo_out, "pseudo reference output file")->required();
    pseudo->add_option("--k", pseudo_k, "pseudo references per turn");
    pseudo->add_option("--model-ref", pseudo_model,
                       "reformulation model for response refinement (empty: none)");
    pseudo->add_option("--iteration", pseudo_iter, "iteration tag written to records");
    pseudo_retr.attach(pseudo);
    pseudo_backend.attach(pseudo);

    // ---- prefs ----
    std::string prefs_cands, prefs_pseudo, prefs_out;
    std::vector<double> prefs_weights{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
    std::vector<int> prefs_cutoffs{5, 20};
    std::size_t prefs_top_n = 100;
    RetrieverFlags prefs_retr;
    auto* prefs = app.add_subcommand("prefs", "rank candidates against pseudo references");
    prefs->add_option("--candidates", prefs_cands, "candidate file")->required();
    prefs->add_option("--pseudo", prefs_pseudo, "pseudo reference file")->required();
    prefs->add_option("--out", prefs_out, "feedback output file")->required();
    prefs->add_option("--weights", prefs_weights, "coverage,immediacy,concordance weights")
        ->expected(3);
    prefs->add_option("--cutoffs", prefs_cutoffs, "recall cutoffs for the coverage score");
    prefs->add_option("--top-n", prefs_top_n, "retrieval depth per candidate");
    prefs_retr.attach(prefs);

    // ---- export ----
    std::string export_feedback, export_conv, export_dir;
    int export_iter = 0, export_top = 3, export_bottom = 3, export_max_pairs = 6;
    auto* exp = app.add_subcommand("export", "write SFT/DPO training files from feedback");
    exp->add_option("--feedback", export_feedback, "feedback file")->required();
    exp->add_option("--conversations", export_conv, "conversation file")->required();
    exp->add_option("--out-dir", export_dir, "output directory")->required();
    exp->add_option("--iteration", export_iter, "iteration index for the manifest");
    exp->add_option("--n-top", export_top, "winners sampled from the top");
    exp->add_option("--n-bottom", export_bottom, "losers sampled from the bottom");
    exp->add_option("--max-pairs", export_max_pairs, "pair cap per turn");

    // ---- run / resume ----
    RunFlags run_flags, resume_flags;
    auto* run_cmd = app.add_subcommand("run", "execute the full self-training loop");
    run_flags.attach(run_cmd);
    auto* resume_cmd =
        app.add_subcommand("resume", "continue a run from its last complete iteration");
    resume_flags.attach(resume_cmd);

    // ---- eval-retrieval ----
    std::string evr_reforms, evr_conv, evr_out;
    std::vector<int> evr_cutoffs{5, 20};
    RetrieverFlags evr_retr;
    auto* evr =
        app.add_subcommand("eval-retrieval", "score reformulations against gold references");
    evr->add_option("--reformulations", evr_reforms,
                    "reformulation file (jsonl: session_id, turn, query)")
        ->required();
    evr->add_option("--conversations", evr_conv, "conversation file with gold ids")->required();
    evr->add_option("--out", evr_out, "report output prefix (.jsonl and .csv)")->required();
    evr->add_option("--cutoffs", evr_cutoffs, "recall cutoffs to report");
    evr_retr.attach(evr);

    // ---- eval-pseudo ----
    std::string evp_dir, evp_conv, evp_out;
    std::vector<int> evp_cutoffs{5, 20};
    RetrieverFlags evp_retr;
    auto* evp = app.add_subcommand("eval-pseudo",
                                   "per-iteration pseudo reference accuracy from run artifacts");
    evp->add_option("--artifacts", evp_dir, "run artifact directory")->required();
    evp->add_option("--conversations", evp_conv, "conversation file with gold ids")->required();
    evp->add_option("--out", evp_out, "report output prefix")->required();
    evp->add_option("--cutoffs", evp_cutoffs, "recall cutoffs to report");
    evp_retr.attach(evp);

    // ---- simulate-bounds ----
    std::size_t sim_n = 2000;
    double sim_c = 6.0, sim_mu = 0.01, sim_err = 0.3;
    int sim_labels = 4, sim_seeds = 30;
    std::string sim_out;
    auto* sim = app.add_subcommand("simulate-bounds",
                                   "denoising simulation plus the closed-form error bounds");
    sim->add_option("--n", sim_n, "node count");
    sim->add_option("--c", sim_c, "target mean degree (> 3)");
    sim->add_option("--mu", sim_mu, "cross-label fraction target");
    sim->add_option("--err", sim_err, "labeler error rate");
    sim->add_option("--labels", sim_labels, "cluster count");
    sim->add_option("--seeds", sim_seeds, "number of paired runs");
    sim->add_option("--out", sim_out, "CSV output file")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*chunk) return cmd_chunk(chunk_in, chunk_out, chunk_size, chunk_overlap);

        if (*index) {
            auto corpus = cqr::load_passages(index_passages);
            cqr::Bm25Index idx(corpus, {index_k1, index_b});
            idx.save(index_out);
            std::cout << "indexed " << idx.doc_count() << " passages (avg length "
                      << idx.avg_doc_length() << ")\n";
            return 0;
        }

        if (*candidates) {
            auto dataset = cqr::load_conversations(cand_conv);
            auto client = cand_backend.make();
            cqr::CandidateGenConfig gen;
            gen.n_rewrite = cand_rewrite;
            gen.n_expand = cand_expand;
            gen.model_ref = cand_model;
            gen.seed = cand_backend.seed;
            if (!cand_prompts.empty()) gen.prompts = cqr::PromptTemplates::from_dir(cand_prompts);

            std::map<cqr::TurnKey, std::vector<cqr::CandidateQuery>> by_turn;
            for (const auto& [key, ctx] : contexts_by_key(dataset)) {
                by_turn.emplace(key, cqr::generate_candidates(ctx, *client, gen));
            }
            cqr::save_candidates(by_turn, cand_out);
            std::cout << "wrote candidates for " << by_turn.size() << " turns\n";
            return 0;
        }

        if (*pseudo) {
            auto dataset = cqr::load_conversations(pseudo_conv);
            auto retriever = pseudo_retr.make();
            auto client = pseudo_backend.make();
            const std::optional<std::string> model_ref =
                pseudo_model.empty() ? std::nullopt : std::optional<std::string>(pseudo_model);

            std::vector<cqr::PseudoReferenceSet> sets;
            std::size_t warned = 0;
            for (const auto& session : dataset.sessions) {
                for (int t = 1; t <= static_cast<int>(session.size()); ++t) {
                    const auto& turn = session[static_cast<std::size_t>(t) - 1];
                    std::string warning;
                    auto refined = cqr::refine_response_or_empty(
                        cqr::context(session, t), turn.response, model_ref, *client, {}, &warning);
                    if (!warning.empty()) ++warned;
                    sets.push_back(cqr::generate_pseudo_refs(turn.key(), turn.response, refined,
                                                             retriever, pseudo_k));
                }
            }
            cqr::save_pseudo_refs(sets, pseudo_iter, pseudo_out);
            std::cout << "wrote pseudo references for " << sets.size() << " turns";
            if (warned) std::cout << " (" << warned << " refinement warnings)";
            std::cout << '\n';
            return 0;
        }

        if (*prefs) {
            auto by_turn = cqr::load_candidates(prefs_cands);
            auto pseudo_sets = cqr::load_pseudo_refs(prefs_pseudo);
            auto retriever = prefs_retr.make();
            cqr::ScoreWeights weights{prefs_weights[0], prefs_weights[1], prefs_weights[2],
                                      prefs_cutoffs};

            std::vector<cqr::PreferenceFeedback> feedback;
            std::size_t skipped = 0;
            for (const auto& set : pseudo_sets) {
                auto it = by_turn.find(set.key);
                if (it == by_turn.end() || it->second.size() < 2 || set.unsupervised()) {
                    ++skipped;
                    continue;
                }
                feedback.push_back(
                    cqr::score_candidates(it->second, set, retriever, weights, prefs_top_n));
            }
            cqr::save_feedback(feedback, prefs_out);
            std::cout << "wrote feedback for " << feedback.size() << " turns (" << skipped
                      << " skipped)\n";
            return 0;
        }

        if (*exp) {
            auto dataset = cqr::load_conversations(export_conv);
            auto feedback = cqr::load_feedback(export_feedback);
            auto contexts = contexts_by_key(dataset);

            std::vector<cqr::SftExample> sft;
            std::vector<cqr::PreferencePair> pairs;
            for (const auto& fb : feedback) {
                auto ctx_it = contexts.find(fb.key);
                if (ctx_it == contexts.end() || fb.entries.empty()) continue;
                sft.push_back(
                    {fb.key, cqr::serialize_context(ctx_it->second), cqr::sft_target(fb).text});
                auto turn_pairs = cqr::sample_pairs(fb, ctx_it->second, export_top, export_bottom,
                                                    export_max_pairs);
                pairs.insert(pairs.end(), turn_pairs.begin(), turn_pairs.end());
            }
            auto paths =
                cqr::export_training_data(std::move(sft), std::move(pairs), export_dir, 0,
                                          export_iter);
            std::cout << "wrote " << paths.sft << " and " << paths.dpo << '\n';
            return 0;
        }

        if (*run_cmd) return run_flags.execute(false);
        if (*resume_cmd) return resume_flags.execute(true);

        if (*evr) {
            auto retriever = evr_retr.make();
            auto dataset = cqr::load_conversations(evr_conv);

            std::map<cqr::TurnKey, std::string> reforms;
            std::ifstream in(evr_reforms);
            if (!in) throw cqr::ParseError("cannot open " + evr_reforms);
            std::string line;
            std::size_t line_no = 0;
            while (std::getline(in, line)) {
                ++line_no;
                if (line.empty()) continue;
                json rec = json::parse(line, nullptr, false);
                if (rec.is_discarded()) throw cqr::ParseError("malformed record", line_no);
                reforms[{rec.at("session_id").get<std::string>(), rec.at("turn").get<int>()}] =
                    rec.at("query").get<std::string>();
            }
            auto report = cqr::evaluate_retrieval(reforms, dataset, retriever, evr_cutoffs);
            std::string note = "cutoffs=";
            for (std::size_t i = 0; i < evr_cutoffs.size(); ++i)
                note += (i ? "," : "") + std::to_string(evr_cutoffs[i]);
            report.save_jsonl(evr_out + ".jsonl", note);
            report.save_csv(evr_out + ".csv");
            std::cout << "MRR " << report.mean_mrr << ", NDCG@3 " << report.mean_ndcg3;
            for (const auto& [k, v] : report.mean_recall) std::cout << ", R@" << k << " " << v;
            std::cout << " over " << report.rows.size() << " turns (" << report.skipped_turns
                      << " skipped)\n";
            return 0;
        }

        if (*evp) {
            auto retriever = evp_retr.make();
            auto dataset = cqr::load_conversations(evp_conv);
            auto reports = cqr::evaluate_pseudo(evp_dir, dataset, retriever, evp_cutoffs);
            std::string note = "cutoffs=";
            for (std::size_t i = 0; i < evp_cutoffs.size(); ++i)
                note += (i ? "," : "") + std::to_string(evp_cutoffs[i]);
            for (std::size_t i = 0; i < reports.size(); ++i) {
                reports[i].save_jsonl(evp_out + ".iter" + std::to_string(i) + ".jsonl", note);
                std::cout << "iteration " << i << ": MRR " << reports[i].mean_mrr << ", NDCG@3 "
                          << reports[i].mean_ndcg3;
                for (const auto& [k, v] : reports[i].mean_recall)
                    std::cout << ", R@" << k << " " << v;
                std::cout << '\n';
            }
            return 0;
        }

        if (*sim) {
            std::vector<std::uint64_t> seeds;
            for (int s = 0; s < sim_seeds; ++s) seeds.push_back(static_cast<std::uint64_t>(s));
            auto summary = cqr::run_simulation(sim_n, sim_c, sim_mu, sim_labels, sim_err, seeds);
            cqr::BoundParams params(sim_err, sim_c, sim_mu);
            cqr::save_simulation_csv(summary, params, sim_out);
            std::cout << "mean labeler error " << summary.mean_labeler << ", single-role "
                      << summary.mean_single << ", dual-role " << summary.mean_dual
                      << "; bounds: single " << cqr::bound_single(params) << ", dual "
                      << cqr::bound_dual(params) << '\n';
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
