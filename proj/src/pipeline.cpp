#include "cqr/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cqr/errors.hpp"
#include "cqr/util.hpp"
#include "json.hpp"

namespace cqr {

using nlohmann::json;

void PipelineConfig::validate() const {
    if (n_iters < 1) throw ParameterError("n_iters must be >= 1");
    if (k_pseudo < 1) throw ParameterError("k_pseudo must be >= 1");
    if (top_n < 1) throw ParameterError("top_n must be >= 1");
    if (!(beta > 0.0)) throw ParameterError("beta must be > 0");
    if (n_rewrite + n_expand < 2) throw ParameterError("need at least two candidates per turn");
    if (n_top < 1 || n_bottom < 1 || max_pairs < 1)
        throw ParameterError("pair sampling counts must be >= 1");
    weights.validate();
    index_params.validate();
    generation.validate();
}

namespace {

json config_to_json(const PipelineConfig& c) {
    return json{{"n_iters", c.n_iters},
                {"k_pseudo", c.k_pseudo},
                {"top_n", c.top_n},
                {"weights", {{"w_cov", c.weights.w_cov},
                             {"w_imm", c.weights.w_imm},
                             {"w_con", c.weights.w_con},
                             {"cutoffs", c.weights.cutoffs}}},
                {"beta", c.beta},
                {"n_rewrite", c.n_rewrite},
                {"n_expand", c.n_expand},
                {"n_top", c.n_top},
                {"n_bottom", c.n_bottom},
                {"max_pairs", c.max_pairs},
                {"index", {{"k1", c.index_params.k1}, {"b", c.index_params.b}}},
                {"seed", c.seed},
                {"initial_model_ref", c.initial_model_ref},
                {"reference_model_ref", c.reference_model_ref},
                {"candidate_model_ref", c.candidate_model_ref},
                {"generation", {{"temperature", c.generation.temperature},
                                {"top_p", c.generation.top_p},
                                {"max_tokens", c.generation.max_tokens}}},
                {"trainer", {{"epochs_sft", c.trainer.epochs_sft},
                             {"lr", c.trainer.lr},
                             {"batch", c.trainer.batch},
                             {"epochs_dpo", c.trainer.epochs_dpo}}},
                {"regenerate_candidates", c.regenerate_candidates},
                {"prompt_dir", c.prompt_dir.string()}};
}

void config_from_json(const json& j, PipelineConfig& c) {
    if (j.contains("n_iters")) c.n_iters = j["n_iters"].get<int>();
    if (j.contains("k_pseudo")) c.k_pseudo = j["k_pseudo"].get<std::size_t>();
    if (j.contains("top_n")) c.top_n = j["top_n"].get<std::size_t>();
    if (j.contains("weights")) {
        const auto& w = j["weights"];
        if (w.contains("w_cov")) c.weights.w_cov = w["w_cov"].get<double>();
        if (w.contains("w_imm")) c.weights.w_imm = w["w_imm"].get<double>();
        if (w.contains("w_con")) c.weights.w_con = w["w_con"].get<double>();
        if (w.contains("cutoffs")) c.weights.cutoffs = w["cutoffs"].get<std::vector<int>>();
    }
    if (j.contains("beta")) c.beta = j["beta"].get<double>();
    if (j.contains("n_rewrite")) c.n_rewrite = j["n_rewrite"].get<int>();
    if (j.contains("n_expand")) c.n_expand = j["n_expand"].get<int>();
    if (j.contains("n_top")) c.n_top = j["n_top"].get<int>();
    if (j.contains("n_bottom")) c.n_bottom = j["n_bottom"].get<int>();
    if (j.contains("max_pairs")) c.max_pairs = j["max_pairs"].get<int>();
    if (j.contains("index")) {
        if (j["index"].contains("k1")) c.index_params.k1 = j["index"]["k1"].get<double>();
        if (j["index"].contains("b")) c.index_params.b = j["index"]["b"].get<double>();
    }
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("initial_model_ref")) c.initial_model_ref = j["initial_model_ref"].get<std::string>();
    if (j.contains("reference_model_ref"))
        c.reference_model_ref = j["reference_model_ref"].get<std::string>();
    if (j.contains("candidate_model_ref"))
        c.candidate_model_ref = j["candidate_model_ref"].get<std::string>();
    if (j.contains("generation")) {
        const auto& g = j["generation"];
        if (g.contains("temperature")) c.generation.temperature = g["temperature"].get<double>();
        if (g.contains("top_p")) c.generation.top_p = g["top_p"].get<double>();
        if (g.contains("max_tokens")) c.generation.max_tokens = g["max_tokens"].get<int>();
    }
    if (j.contains("trainer")) {
        const auto& t = j["trainer"];
        if (t.contains("epochs_sft")) c.trainer.epochs_sft = t["epochs_sft"].get<int>();
        if (t.contains("lr")) c.trainer.lr = t["lr"].get<double>();
        if (t.contains("batch")) c.trainer.batch = t["batch"].get<int>();
        if (t.contains("epochs_dpo")) c.trainer.epochs_dpo = t["epochs_dpo"].get<int>();
    }
    if (j.contains("regenerate_candidates"))
        c.regenerate_candidates = j["regenerate_candidates"].get<bool>();
    if (j.contains("prompt_dir")) c.prompt_dir = j["prompt_dir"].get<std::string>();
}

}  // namespace

std::uint64_t PipelineConfig::hash() const {
    return fnv1a64(config_to_json(*this).dump());
}

PipelineConfig PipelineConfig::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open config file " + path.string());
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        throw ParseError("config file is not a JSON object: " + path.string());
    PipelineConfig c;
    config_from_json(j, c);
    c.validate();
    return c;
}

void PipelineConfig::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot write config file " + path.string());
    out << config_to_json(*this).dump(2) << '\n';
}

std::string CommandTrainer::optimize(const std::string& model_ref_in,
                                     const std::filesystem::path& sft_path,
                                     const std::filesystem::path& dpo_path,
                                     const TrainerHyperparams& hp) {
    json hp_json{{"epochs_sft", hp.epochs_sft},
                 {"lr", hp.lr},
                 {"batch", hp.batch},
                 {"epochs_dpo", hp.epochs_dpo}};
    std::string cmd = command_ + " '" + model_ref_in + "' '" + sft_path.string() + "' '" +
                      dpo_path.string() + "' '" + hp_json.dump() + "'";
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) throw TransportError("cannot launch trainer command: " + command_);
    std::string output;
    char buf[4096];
    while (std::size_t got = fread(buf, 1, sizeof(buf), pipe)) output.append(buf, got);
    int status = pclose(pipe);
    if (status != 0)
        throw TransportError("trainer command exited with status " + std::to_string(status));

    std::istringstream lines(output);
    std::string line, model_ref_out;
    while (std::getline(lines, line)) {
        if (!trim(line).empty()) model_ref_out = trim(line);
    }
    if (model_ref_out.empty()) throw ProtocolError("trainer printed no model reference");
    return model_ref_out;
}

std::uint64_t corpus_fingerprint(const Corpus& corpus) {
    std::uint64_t h = 0x636f7270ULL;
    for (const auto& p : corpus.passages()) h = fnv1a64(p.text, fnv1a64(p.id, h));
    return h;
}

std::uint64_t dataset_fingerprint(const Dataset& dataset) {
    std::uint64_t h = 0x64617461ULL;
    for (const auto& session : dataset.sessions) {
        for (const auto& t : session) {
            h = fnv1a64(t.query, fnv1a64(t.session_id, h));
            h = fnv1a64(t.response, h ^ static_cast<std::uint64_t>(t.turn_index));
            for (const auto& g : t.gold_ref_ids) h = fnv1a64(g, h);
        }
    }
    return h;
}

namespace {

struct TurnRef {
    TurnKey key;
    DialogueContext ctx;
    const Turn* turn = nullptr;
};

std::vector<TurnRef> enumerate_turns(const Dataset& dataset) {
    std::vector<TurnRef> turns;
    for (const auto& session : dataset.sessions) {
        for (int t = 1; t <= static_cast<int>(session.size()); ++t) {
            const Turn& turn = session[static_cast<std::size_t>(t) - 1];
            turns.push_back({turn.key(), context(session, t), &turn});
        }
    }
    return turns;
}

std::string iter_dir_name(int i) { return "iter_" + std::to_string(i); }

json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path.string());
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ParseError("invalid JSON in " + path.string());
    return j;
}

void write_json_file(const json& j, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

struct RunContext {
    const PipelineConfig* config;
    const Dataset* dataset;
    const Corpus* corpus;
    LmClient* client;
    Trainer* trainer;
    std::filesystem::path artifact_dir;
    std::vector<TurnRef> turns;
    std::uint64_t config_hash = 0;
    Bm25Retriever retriever{Bm25Index{}};
};

std::map<TurnKey, std::vector<CandidateQuery>> generate_all_candidates(RunContext& rc) {
    const auto& cfg = *rc.config;
    CandidateGenConfig gen;
    gen.n_rewrite = cfg.n_rewrite;
    gen.n_expand = cfg.n_expand;
    gen.model_ref = cfg.candidate_model_ref;
    gen.params = cfg.generation;
    gen.seed = mix_seeds(cfg.seed, 0x63616e64ULL);
    if (!cfg.prompt_dir.empty()) gen.prompts = PromptTemplates::from_dir(cfg.prompt_dir);

    std::vector<std::vector<CandidateQuery>> slots(rc.turns.size());
    parallel_for(rc.turns.size(), cfg.threads, [&](std::size_t i) {
        try {
            slots[i] = generate_candidates(rc.turns[i].ctx, *rc.client, gen);
        } catch (const std::exception&) {
            slots[i].clear();  // turn excluded later for lack of candidates
        }
    });
    std::map<TurnKey, std::vector<CandidateQuery>> by_turn;
    for (std::size_t i = 0; i < rc.turns.size(); ++i)
        by_turn.emplace(rc.turns[i].key, std::move(slots[i]));
    return by_turn;
}

IterationArtifact run_iteration(RunContext& rc, int iteration, const std::string& model_ref_in,
                                const std::map<TurnKey, std::vector<CandidateQuery>>& candidates) {
    const auto& cfg = *rc.config;
    IterationArtifact art;
    art.iteration = iteration;
    art.model_ref_in = model_ref_in;
    art.dir = rc.artifact_dir / iter_dir_name(iteration);
    std::filesystem::create_directories(art.dir);

    // Step I: response refinement (empty at iteration 0) and pseudo references
    const std::optional<std::string> refine_model =
        iteration > 0 && !model_ref_in.empty() ? std::optional<std::string>(model_ref_in)
                                               : std::nullopt;
    std::vector<std::string> refined(rc.turns.size());
    std::vector<std::string> turn_warnings(rc.turns.size());
    if (refine_model) {
        parallel_for(rc.turns.size(), cfg.threads, [&](std::size_t i) {
            refined[i] = refine_response_or_empty(rc.turns[i].ctx, rc.turns[i].turn->response,
                                                  refine_model, *rc.client, cfg.generation,
                                                  &turn_warnings[i]);
        });
    }

    art.pseudo_refs.resize(rc.turns.size());
    parallel_for(rc.turns.size(), cfg.threads, [&](std::size_t i) {
        art.pseudo_refs[i] = generate_pseudo_refs(rc.turns[i].key, rc.turns[i].turn->response,
                                                  refined[i], rc.retriever, cfg.k_pseudo);
    });
    for (std::size_t i = 0; i < rc.turns.size(); ++i) {
        if (!turn_warnings[i].empty())
            art.warnings.push_back("(" + rc.turns[i].key.session_id + ", " +
                                   std::to_string(rc.turns[i].key.turn) + "): " + turn_warnings[i]);
        if (art.pseudo_refs[i].unsupervised())
            art.warnings.push_back("(" + rc.turns[i].key.session_id + ", " +
                                   std::to_string(rc.turns[i].key.turn) +
                                   "): no pseudo references retrieved; turn unsupervised");
    }
    save_pseudo_refs(art.pseudo_refs, iteration, art.dir / "pseudo_refs.jsonl");

    // Step II: preference feedback over the fixed candidate pool
    std::vector<PreferenceFeedback> slots(rc.turns.size());
    std::vector<char> has_feedback(rc.turns.size(), 0);
    std::vector<std::string> feedback_warnings(rc.turns.size());
    parallel_for(rc.turns.size(), cfg.threads, [&](std::size_t i) {
        const auto it = candidates.find(rc.turns[i].key);
        if (it == candidates.end() || it->second.size() < 2) {
            feedback_warnings[i] = "fewer than two distinct candidates; turn excluded";
            return;
        }
        if (art.pseudo_refs[i].unsupervised()) return;  // already warned above
        try {
            slots[i] = score_candidates(it->second, art.pseudo_refs[i], rc.retriever, cfg.weights,
                                        cfg.top_n);
            has_feedback[i] = 1;
        } catch (const std::exception& e) {
            feedback_warnings[i] = std::string("candidate scoring failed: ") + e.what();
        }
    });

    std::vector<SftExample> sft_examples;
    std::vector<PreferencePair> pairs;
    for (std::size_t i = 0; i < rc.turns.size(); ++i) {
        if (!feedback_warnings[i].empty())
            art.warnings.push_back("(" + rc.turns[i].key.session_id + ", " +
                                   std::to_string(rc.turns[i].key.turn) +
                                   "): " + feedback_warnings[i]);
        if (!has_feedback[i]) continue;
        art.feedback.push_back(slots[i]);
        sft_examples.push_back({rc.turns[i].key, serialize_context(rc.turns[i].ctx),
                                sft_target(slots[i]).text});
        auto turn_pairs =
            sample_pairs(slots[i], rc.turns[i].ctx, cfg.n_top, cfg.n_bottom, cfg.max_pairs);
        pairs.insert(pairs.end(), turn_pairs.begin(), turn_pairs.end());
    }
    save_feedback(art.feedback, art.dir / "feedback.jsonl");

    art.exports = export_training_data(std::move(sft_examples), std::move(pairs), art.dir,
                                       rc.config_hash, iteration);

    // Step III: optimization through the pluggable trainer
    art.model_ref_out =
        rc.trainer->optimize(model_ref_in, art.exports.sft, art.exports.dpo, cfg.trainer);

    {
        std::ofstream out(art.dir / "warnings.jsonl");
        for (const auto& w : art.warnings) out << json{{"warning", w}}.dump() << '\n';
    }

    json manifest_counts;
    {
        std::size_t unsupervised = 0;
        for (const auto& p : art.pseudo_refs) unsupervised += p.unsupervised();
        std::size_t n_pairs = 0;
        std::ifstream dpo(art.exports.dpo);
        for (std::string l; std::getline(dpo, l);) n_pairs += !trim(l).empty();
        manifest_counts = json{{"turns", rc.turns.size()},
                               {"unsupervised_turns", unsupervised},
                               {"feedback_turns", art.feedback.size()},
                               {"sft_examples", art.feedback.size()},
                               {"dpo_pairs", n_pairs},
                               {"warnings", art.warnings.size()}};
    }
    // manifest written last: its presence marks the iteration complete
    write_json_file(json{{"iteration", iteration},
                         {"config_hash", rc.config_hash},
                         {"model_ref_in", model_ref_in},
                         {"model_ref_out", art.model_ref_out},
                         {"prompt_format", kRefinementPromptFormat},
                         {"counts", manifest_counts},
                         {"files", {{"pseudo_refs", "pseudo_refs.jsonl"},
                                    {"feedback", "feedback.jsonl"},
                                    {"sft", "sft.jsonl"},
                                    {"dpo", "dpo.jsonl"}}}},
                    art.dir / "manifest.json");
    return art;
}

RunContext make_run_context(const PipelineConfig& config, const Dataset& dataset,
                            const Corpus& corpus, LmClient& client, Trainer& trainer,
                            const std::filesystem::path& artifact_dir) {
    config.validate();
    RunContext rc;
    rc.config = &config;
    rc.dataset = &dataset;
    rc.corpus = &corpus;
    rc.client = &client;
    rc.trainer = &trainer;
    rc.artifact_dir = artifact_dir;
    rc.turns = enumerate_turns(dataset);
    rc.config_hash = config.hash();
    rc.retriever = Bm25Retriever(corpus, config.index_params);
    if (rc.turns.empty()) throw ValidationError("dataset has no turns");
    return rc;
}

void write_run_manifest(const RunContext& rc) {
    write_json_file(json{{"config", config_to_json(*rc.config)},
                         {"config_hash", rc.config_hash},
                         {"corpus_fingerprint", corpus_fingerprint(*rc.corpus)},
                         {"dataset_fingerprint", dataset_fingerprint(*rc.dataset)},
                         {"prompt_format", kRefinementPromptFormat}},
                    rc.artifact_dir / "run.json");
}

}  // namespace

std::vector<IterationArtifact> run(const PipelineConfig& config, const Dataset& dataset,
                                   const Corpus& corpus, LmClient& client, Trainer& trainer,
                                   const std::filesystem::path& artifact_dir) {
    RunContext rc = make_run_context(config, dataset, corpus, client, trainer, artifact_dir);
    std::filesystem::create_directories(artifact_dir);
    write_run_manifest(rc);

    auto candidates = generate_all_candidates(rc);
    save_candidates(candidates, artifact_dir / "candidates.jsonl");

    std::vector<IterationArtifact> artifacts;
    std::string model_ref = config.initial_model_ref;
    for (int i = 0; i < config.n_iters; ++i) {
        if (config.regenerate_candidates && i > 0) candidates = generate_all_candidates(rc);
        artifacts.push_back(run_iteration(rc, i, model_ref, candidates));
        model_ref = artifacts.back().model_ref_out;
    }
    return artifacts;
}

namespace {

IterationArtifact load_iteration(const std::filesystem::path& dir, int iteration,
                                 std::uint64_t expected_hash) {
    const auto manifest_path = dir / "manifest.json";
    json manifest;
    try {
        manifest = read_json_file(manifest_path);
    } catch (const ParseError& e) {
        throw ResumeError("corrupt manifest " + manifest_path.string() + ": " + e.what());
    }
    if (!manifest.contains("config_hash") || !manifest.contains("iteration") ||
        manifest["iteration"].get<int>() != iteration)
        throw ResumeError("corrupt manifest " + manifest_path.string() + ": bad fields");
    if (manifest["config_hash"].get<std::uint64_t>() != expected_hash)
        throw ResumeError("config hash mismatch in " + manifest_path.string());

    IterationArtifact art;
    art.iteration = iteration;
    art.dir = dir;
    art.model_ref_in = manifest["model_ref_in"].get<std::string>();
    art.model_ref_out = manifest["model_ref_out"].get<std::string>();
    art.pseudo_refs = load_pseudo_refs(dir / "pseudo_refs.jsonl");
    art.feedback = load_feedback(dir / "feedback.jsonl");
    art.exports = {dir / "sft.jsonl", dir / "dpo.jsonl", dir / "export_manifest.json"};
    return art;
}

}  // namespace

std::vector<IterationArtifact> resume(const PipelineConfig& config, const Dataset& dataset,
                                      const Corpus& corpus, LmClient& client, Trainer& trainer,
                                      const std::filesystem::path& artifact_dir) {
    RunContext rc = make_run_context(config, dataset, corpus, client, trainer, artifact_dir);

    const auto run_path = artifact_dir / "run.json";
    json run_manifest;
    try {
        run_manifest = read_json_file(run_path);
    } catch (const ParseError& e) {
        throw ResumeError(std::string("cannot resume: ") + e.what());
    }
    if (run_manifest.value("config_hash", std::uint64_t{0}) != rc.config_hash)
        throw ResumeError("config hash mismatch in " + run_path.string());
    if (run_manifest.value("corpus_fingerprint", std::uint64_t{0}) != corpus_fingerprint(corpus) ||
        run_manifest.value("dataset_fingerprint", std::uint64_t{0}) != dataset_fingerprint(dataset))
        throw ResumeError("corpus or dataset changed since the run started");

    std::vector<IterationArtifact> artifacts;
    int first_missing = 0;
    for (int i = 0; i < config.n_iters; ++i) {
        const auto dir = artifact_dir / iter_dir_name(i);
        if (!std::filesystem::exists(dir / "manifest.json")) break;
        artifacts.push_back(load_iteration(dir, i, rc.config_hash));
        first_missing = i + 1;
    }
    if (first_missing == config.n_iters) return artifacts;  // already complete

    std::map<TurnKey, std::vector<CandidateQuery>> candidates;
    const auto candidates_path = artifact_dir / "candidates.jsonl";
    if (std::filesystem::exists(candidates_path) && !config.regenerate_candidates) {
        candidates = load_candidates(candidates_path);
    } else {
        candidates = generate_all_candidates(rc);
        save_candidates(candidates, candidates_path);
    }

    std::string model_ref =
        artifacts.empty() ? config.initial_model_ref : artifacts.back().model_ref_out;
    for (int i = first_missing; i < config.n_iters; ++i) {
        if (config.regenerate_candidates && i > 0) candidates = generate_all_candidates(rc);
        artifacts.push_back(run_iteration(rc, i, model_ref, candidates));
        model_ref = artifacts.back().model_ref_out;
    }
    return artifacts;
}

MetricReport evaluate_retrieval(const std::map<TurnKey, std::string>& reformulations,
                                const Dataset& dataset, const Retriever& retriever,
                                const std::vector<int>& report_cutoffs, std::size_t top_n) {
    std::map<TurnKey, std::set<std::string>> gold;
    for (const auto& session : dataset.sessions) {
        for (const auto& t : session) {
            gold[t.key()] = {t.gold_ref_ids.begin(), t.gold_ref_ids.end()};
        }
    }
    std::map<TurnKey, RankedRetrieval> ranked;
    for (const auto& [key, query] : reformulations) {
        ranked[key] = retriever.retrieve(query, top_n);
    }
    return pseudo_reference_accuracy(ranked, gold, report_cutoffs);
}

std::vector<MetricReport> evaluate_pseudo(const std::filesystem::path& artifact_dir,
                                          const Dataset& dataset, const Retriever& retriever,
                                          const std::vector<int>& report_cutoffs,
                                          std::size_t top_n) {
    std::map<TurnKey, std::set<std::string>> gold;
    for (const auto& session : dataset.sessions) {
        for (const auto& t : session) {
            gold[t.key()] = {t.gold_ref_ids.begin(), t.gold_ref_ids.end()};
        }
    }

    std::vector<MetricReport> reports;
    for (int i = 0;; ++i) {
        const auto path = artifact_dir / iter_dir_name(i) / "pseudo_refs.jsonl";
        if (!std::filesystem::exists(path)) break;
        auto sets = load_pseudo_refs(path);
        std::map<TurnKey, RankedRetrieval> ranked;
        for (const auto& s : sets) ranked[s.key] = retriever.retrieve(s.source_query, top_n);
        reports.push_back(pseudo_reference_accuracy(ranked, gold, report_cutoffs));
    }
    if (reports.empty())
        throw ResumeError("no iteration artifacts under " + artifact_dir.string());
    return reports;
}

}  // namespace cqr
