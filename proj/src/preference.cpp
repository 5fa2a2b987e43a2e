#include "cqr/preference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "cqr/errors.hpp"
#include "cqr/util.hpp"
#include "json.hpp"

namespace cqr {

using nlohmann::json;

const char* to_string(CandidateQuery::Kind kind) {
    return kind == CandidateQuery::Kind::rewrite ? "rewrite" : "expansion";
}

namespace {

CandidateQuery::Kind kind_from_string(const std::string& s) {
    if (s == "rewrite") return CandidateQuery::Kind::rewrite;
    if (s == "expansion") return CandidateQuery::Kind::expansion;
    throw ParseError("unknown candidate kind '" + s + "'");
}

std::string replace_all(std::string text, const std::string& placeholder,
                        const std::string& value) {
    std::size_t pos = 0;
    while ((pos = text.find(placeholder, pos)) != std::string::npos) {
        text.replace(pos, placeholder.size(), value);
        pos += value.size();
    }
    return text;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open prompt file " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

}  // namespace

PromptTemplates PromptTemplates::defaults() {
    PromptTemplates t;
    t.rewrite =
        "Given the conversation below, rewrite the final question so that it is fully "
        "self-contained. Resolve every pronoun and coreference and fill in the context "
        "a reader would need to understand the question on its own. Reply with the "
        "rewritten question only.\n\n{context}\n\nRewritten question:";
    t.expand =
        "Given the conversation below and a self-contained question, expand the question "
        "by appending a short passage that could plausibly answer it. Reply with the "
        "expanded query only.\n\n{context}\n\nQuestion: {rewrite}\n\nExpanded query:";
    return t;
}

PromptTemplates PromptTemplates::from_dir(const std::filesystem::path& dir) {
    PromptTemplates t;
    t.rewrite = read_file(dir / "rewrite.txt");
    t.expand = read_file(dir / "expand.txt");
    return t;
}

std::string PromptTemplates::render_rewrite(const std::string& context_serialized) const {
    return replace_all(rewrite, "{context}", context_serialized);
}

std::string PromptTemplates::render_expand(const std::string& context_serialized,
                                           const std::string& rewrite_text) const {
    return replace_all(replace_all(expand, "{context}", context_serialized), "{rewrite}",
                       rewrite_text);
}

std::vector<CandidateQuery> generate_candidates(const DialogueContext& ctx, LmClient& client,
                                                const CandidateGenConfig& config,
                                                std::size_t* failed_attempts) {
    if (config.n_rewrite < 0 || config.n_expand < 0)
        throw ParameterError("candidate counts must be non-negative");
    if (config.max_attempts_per_slot < 1)
        throw ParameterError("max_attempts_per_slot must be >= 1");

    const std::string ctx_ser = serialize_context(ctx);
    const std::uint64_t turn_seed = mix_seeds(config.seed, fnv1a64(ctx_ser));
    std::size_t failures = 0;

    std::set<std::string> seen;
    std::vector<CandidateQuery> out;

    auto sample = [&](const std::string& prompt, std::uint64_t slot_seed) -> std::string {
        for (int attempt = 0; attempt < config.max_attempts_per_slot; ++attempt) {
            GenerationParams params = config.params;
            params.seed = mix_seeds(slot_seed, static_cast<std::uint64_t>(attempt));
            std::string text;
            try {
                text = trim(client.complete(config.model_ref, prompt, params));
            } catch (const std::exception&) {
                ++failures;
                continue;
            }
            if (!text.empty() && seen.insert(text).second) return text;
        }
        return "";  // slot exhausted
    };

    std::vector<std::string> rewrites;
    for (int slot = 0; slot < config.n_rewrite; ++slot) {
        std::string text = sample(config.prompts.render_rewrite(ctx_ser),
                                  mix_seeds(turn_seed, 0x7265u * 1000 + slot));
        if (!text.empty()) rewrites.push_back(text);
    }
    for (const auto& text : rewrites) {
        out.push_back({static_cast<int>(out.size()) + 1, text, CandidateQuery::Kind::rewrite});
    }

    if (!rewrites.empty()) {
        for (int slot = 0; slot < config.n_expand; ++slot) {
            const std::string& base = rewrites[slot % rewrites.size()];
            std::string text = sample(config.prompts.render_expand(ctx_ser, base),
                                      mix_seeds(turn_seed, 0x6578u * 1000 + slot));
            if (!text.empty())
                out.push_back(
                    {static_cast<int>(out.size()) + 1, text, CandidateQuery::Kind::expansion});
        }
    }

    if (failed_attempts) *failed_attempts = failures;
    return out;
}

PreferenceFeedback score_candidates(const std::vector<CandidateQuery>& candidates,
                                    const PseudoReferenceSet& pseudo_refs,
                                    const Retriever& retriever, const ScoreWeights& weights,
                                    std::size_t top_n) {
    weights.validate();
    if (candidates.size() < 2)
        throw ParameterError("preference feedback needs at least two candidates");
    if (pseudo_refs.unsupervised())
        throw ParameterError("pseudo reference set is empty for turn (" +
                             pseudo_refs.key.session_id + ", " +
                             std::to_string(pseudo_refs.key.turn) + ")");

    const std::set<std::string> gold(pseudo_refs.ref_ids.begin(), pseudo_refs.ref_ids.end());

    PreferenceFeedback feedback;
    feedback.key = pseudo_refs.key;
    feedback.entries.reserve(candidates.size());
    for (const auto& c : candidates) {
        auto ranked = retriever.retrieve(c.text, top_n);
        auto components = score_components(ranked, gold, weights);
        feedback.entries.push_back({c, retrieval_score(components, weights), components});
    }
    std::sort(feedback.entries.begin(), feedback.entries.end(),
              [](const PreferenceFeedback::Entry& a, const PreferenceFeedback::Entry& b) {
                  if (a.score != b.score) return a.score > b.score;
                  return a.candidate.index < b.candidate.index;
              });
    return feedback;
}

const CandidateQuery& sft_target(const PreferenceFeedback& feedback) {
    if (feedback.entries.empty()) throw ParameterError("preference feedback is empty");
    return feedback.entries.front().candidate;
}

std::vector<PreferencePair> sample_pairs(const PreferenceFeedback& feedback,
                                         const DialogueContext& ctx, int n_top, int n_bottom,
                                         int max_pairs) {
    if (feedback.entries.size() < 2)
        throw ParameterError("pair sampling needs at least two entries");
    if (n_top < 1 || n_bottom < 1 || max_pairs < 1)
        throw ParameterError("n_top, n_bottom and max_pairs must be >= 1");

    const auto& entries = feedback.entries;
    const std::size_t top_count = std::min<std::size_t>(n_top, entries.size());
    const std::size_t bottom_count = std::min<std::size_t>(n_bottom, entries.size());

    std::vector<PreferencePair> pairs;
    for (std::size_t w = 0; w < top_count; ++w) {
        for (std::size_t l = entries.size() - bottom_count; l < entries.size(); ++l) {
            const double gap = entries[w].score - entries[l].score;
            if (gap <= 0.0) continue;
            pairs.push_back(
                {feedback.key, ctx, entries[w].candidate.text, entries[l].candidate.text, gap});
        }
    }
    std::sort(pairs.begin(), pairs.end(), [](const PreferencePair& a, const PreferencePair& b) {
        if (a.score_gap != b.score_gap) return a.score_gap > b.score_gap;
        if (a.winner != b.winner) return a.winner < b.winner;
        return a.loser < b.loser;
    });
    if (pairs.size() > static_cast<std::size_t>(max_pairs)) pairs.resize(max_pairs);
    return pairs;
}

double sft_loss(const ScoredCompletion& scored) {
    if (!(scored.total_logprob <= 0.0) || !std::isfinite(scored.total_logprob))
        throw ParameterError("total log-probability must be finite and <= 0");
    return -scored.total_logprob;
}

void LossHyperparams::validate() const {
    if (!(beta > 0.0)) throw ParameterError("beta must be > 0");
}

namespace {

// ln(1 + e^x) without overflow for large |x|
double softplus(double x) {
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

}  // namespace

double dpo_loss(double lp_policy_w, double lp_policy_l, double lp_ref_w, double lp_ref_l,
                const LossHyperparams& hp) {
    hp.validate();
    for (double v : {lp_policy_w, lp_policy_l, lp_ref_w, lp_ref_l}) {
        if (!std::isfinite(v)) throw ParameterError("log-probabilities must be finite");
    }
    const double margin = (lp_policy_w - lp_ref_w) - (lp_policy_l - lp_ref_l);
    return softplus(-hp.beta * margin);  // == -ln sigmoid(beta * margin)
}

ExportPaths export_training_data(std::vector<SftExample> sft_targets,
                                 std::vector<PreferencePair> pairs,
                                 const std::filesystem::path& destination,
                                 std::uint64_t config_hash, int iteration) {
    std::filesystem::create_directories(destination);
    ExportPaths paths{destination / "sft.jsonl", destination / "dpo.jsonl",
                      destination / "export_manifest.json"};

    std::sort(sft_targets.begin(), sft_targets.end(),
              [](const SftExample& a, const SftExample& b) { return a.key < b.key; });
    std::stable_sort(pairs.begin(), pairs.end(),
                     [](const PreferencePair& a, const PreferencePair& b) { return a.key < b.key; });

    {
        std::ofstream out(paths.sft);
        if (!out) throw ParseError("cannot write " + paths.sft.string());
        for (const auto& ex : sft_targets) {
            out << json{{"context_serialized", ex.context_serialized}, {"target", ex.target}}.dump()
                << '\n';
        }
    }
    {
        std::ofstream out(paths.dpo);
        if (!out) throw ParseError("cannot write " + paths.dpo.string());
        for (const auto& p : pairs) {
            out << json{{"context_serialized", serialize_context(p.context)},
                        {"chosen", p.winner},
                        {"rejected", p.loser}}
                       .dump()
                << '\n';
        }
    }
    {
        std::ofstream out(paths.manifest);
        if (!out) throw ParseError("cannot write " + paths.manifest.string());
        json manifest{{"iteration", iteration},
                      {"sft_count", sft_targets.size()},
                      {"dpo_count", pairs.size()},
                      {"config_hash", config_hash},
                      {"files", {{"sft", paths.sft.filename().string()},
                                 {"dpo", paths.dpo.filename().string()}}}};
        out << manifest.dump(2) << '\n';
    }
    return paths;
}

void save_candidates(const std::map<TurnKey, std::vector<CandidateQuery>>& by_turn,
                     const std::filesystem::path& dest) {
    std::ofstream out(dest);
    if (!out) throw ParseError("cannot write candidate file " + dest.string());
    for (const auto& [key, candidates] : by_turn) {
        json list = json::array();
        for (const auto& c : candidates) {
            list.push_back({{"index", c.index}, {"kind", to_string(c.kind)}, {"text", c.text}});
        }
        out << json{{"session_id", key.session_id}, {"turn", key.turn}, {"candidates", list}}.dump()
            << '\n';
    }
}

std::map<TurnKey, std::vector<CandidateQuery>> load_candidates(
    const std::filesystem::path& source) {
    std::ifstream in(source);
    if (!in) throw ParseError("cannot open candidate file " + source.string());
    std::map<TurnKey, std::vector<CandidateQuery>> by_turn;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        json rec = json::parse(line, nullptr, false);
        if (rec.is_discarded()) throw ParseError("malformed candidate record", line_no);
        TurnKey key{rec.at("session_id").get<std::string>(), rec.at("turn").get<int>()};
        std::vector<CandidateQuery> candidates;
        for (const auto& c : rec.at("candidates")) {
            candidates.push_back({c.at("index").get<int>(),
                                  c.at("text").get<std::string>(),
                                  kind_from_string(c.at("kind").get<std::string>())});
        }
        by_turn.emplace(std::move(key), std::move(candidates));
    }
    return by_turn;
}

void save_feedback(const std::vector<PreferenceFeedback>& feedback,
                   const std::filesystem::path& dest) {
    std::ofstream out(dest);
    if (!out) throw ParseError("cannot write feedback file " + dest.string());
    for (const auto& fb : feedback) {
        json entries = json::array();
        for (const auto& e : fb.entries) {
            entries.push_back({{"index", e.candidate.index},
                               {"kind", to_string(e.candidate.kind)},
                               {"text", e.candidate.text},
                               {"score", e.score},
                               {"cov", e.components.coverage},
                               {"imm", e.components.immediacy},
                               {"con", e.components.concordance}});
        }
        out << json{{"session_id", fb.key.session_id}, {"turn", fb.key.turn}, {"entries", entries}}
                   .dump()
            << '\n';
    }
}

std::vector<PreferenceFeedback> load_feedback(const std::filesystem::path& source) {
    std::ifstream in(source);
    if (!in) throw ParseError("cannot open feedback file " + source.string());
    std::vector<PreferenceFeedback> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        json rec = json::parse(line, nullptr, false);
        if (rec.is_discarded()) throw ParseError("malformed feedback record", line_no);
        PreferenceFeedback fb;
        fb.key = {rec.at("session_id").get<std::string>(), rec.at("turn").get<int>()};
        for (const auto& e : rec.at("entries")) {
            PreferenceFeedback::Entry entry;
            entry.candidate = {e.at("index").get<int>(), e.at("text").get<std::string>(),
                               kind_from_string(e.at("kind").get<std::string>())};
            entry.score = e.at("score").get<double>();
            entry.components = {e.at("cov").get<double>(), e.at("imm").get<double>(),
                                e.at("con").get<double>()};
            fb.entries.push_back(std::move(entry));
        }
        out.push_back(std::move(fb));
    }
    return out;
}

}  // namespace cqr
