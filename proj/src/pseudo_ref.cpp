#include "cqr/pseudo_ref.hpp"

#include <fstream>
#include <sstream>

#include "cqr/errors.hpp"
#include "cqr/util.hpp"
#include "json.hpp"

namespace cqr {

using nlohmann::json;

std::string form_refinement_query(const std::string& response) {
    if (response.empty()) throw ParameterError("response must be non-empty");
    return "Can you clearly state the main points of the last response (" + response +
           "), contextualizing them and resolving coreferences?";
}

std::string refine_response(const DialogueContext& ctx, const std::string& response,
                            const std::optional<std::string>& model_ref, LmClient& client,
                            const GenerationParams& params) {
    if (!model_ref || model_ref->empty()) return "";

    std::ostringstream prompt;
    for (const auto& [q, a] : ctx.history) prompt << "Q: " << q << "\nA: " << a << "\n";
    prompt << "Q: " << ctx.current_query << "\nA: " << response << "\n";
    prompt << "Q: " << form_refinement_query(response);

    std::string refined = client.complete(*model_ref, prompt.str(), params);
    if (trim(refined).empty()) throw ProtocolError("refinement returned empty completion");
    return refined;
}

std::string refine_response_or_empty(const DialogueContext& ctx, const std::string& response,
                                     const std::optional<std::string>& model_ref, LmClient& client,
                                     const GenerationParams& params, std::string* warning) {
    try {
        return refine_response(ctx, response, model_ref, client, params);
    } catch (const std::exception& e) {
        if (warning) *warning = std::string("refinement failed, using empty string: ") + e.what();
        return "";
    }
}

PseudoReferenceSet generate_pseudo_refs(const TurnKey& key, const std::string& response,
                                        const std::string& refined, const Retriever& retriever,
                                        std::size_t k_pseudo) {
    if (response.empty()) throw ParameterError("response must be non-empty");
    if (k_pseudo < 1) throw ParameterError("k_pseudo must be >= 1");

    PseudoReferenceSet set;
    set.key = key;
    set.source_query = refined.empty() ? response : response + " " + refined;

    auto ranked = retriever.retrieve(set.source_query, std::max<std::size_t>(k_pseudo, 100));
    const std::size_t take = std::min(k_pseudo, ranked.entries.size());
    for (std::size_t i = 0; i < take; ++i) {
        set.ref_ids.push_back(ranked.entries[i].passage_id);
        set.scores.push_back(ranked.entries[i].score);
    }
    return set;
}

void save_pseudo_refs(const std::vector<PseudoReferenceSet>& sets, int iteration,
                      const std::filesystem::path& dest) {
    std::ofstream out(dest);
    if (!out) throw ParseError("cannot write pseudo reference file " + dest.string());
    for (const auto& s : sets) {
        json rec{{"session_id", s.key.session_id}, {"turn", s.key.turn},
                 {"iteration", iteration},          {"ref_ids", s.ref_ids},
                 {"scores", s.scores},              {"source_query", s.source_query}};
        out << rec.dump() << '\n';
    }
}

std::vector<PseudoReferenceSet> load_pseudo_refs(const std::filesystem::path& source) {
    std::ifstream in(source);
    if (!in) throw ParseError("cannot open pseudo reference file " + source.string());
    std::vector<PseudoReferenceSet> sets;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        json rec = json::parse(line, nullptr, false);
        if (rec.is_discarded()) throw ParseError("malformed pseudo reference record", line_no);
        PseudoReferenceSet s;
        s.key = {rec.at("session_id").get<std::string>(), rec.at("turn").get<int>()};
        s.ref_ids = rec.at("ref_ids").get<std::vector<std::string>>();
        s.scores = rec.at("scores").get<std::vector<double>>();
        s.source_query = rec.at("source_query").get<std::string>();
        sets.push_back(std::move(s));
    }
    return sets;
}

}  // namespace cqr
