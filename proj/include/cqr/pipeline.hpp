#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cqr/corpus.hpp"
#include "cqr/lm_client.hpp"
#include "cqr/metrics.hpp"
#include "cqr/preference.hpp"
#include "cqr/pseudo_ref.hpp"
#include "cqr/retriever.hpp"

namespace cqr {

/// Opaque knobs forwarded verbatim to the trainer.
struct TrainerHyperparams {
    int epochs_sft = 1;
    double lr = 2e-5;
    int batch = 32;
    int epochs_dpo = 2;
};

struct PipelineConfig {
    int n_iters = 3;
    std::size_t k_pseudo = 3;
    std::size_t top_n = 100;
    ScoreWeights weights;
    double beta = 0.5;
    int n_rewrite = 12;
    int n_expand = 3;
    int n_top = 3;
    int n_bottom = 3;
    int max_pairs = 6;
    IndexParams index_params;
    std::uint64_t seed = 0;
    std::string initial_model_ref;    // empty means untrained
    std::string reference_model_ref;  // DPO regularization target
    std::string candidate_model_ref = "candidate-lm";
    GenerationParams generation;
    TrainerHyperparams trainer;
    bool regenerate_candidates = false;
    unsigned threads = 4;
    std::filesystem::path prompt_dir;  // empty -> built-in templates

    void validate() const;
    /// Stable fingerprint of every field; stamped into all manifests.
    std::uint64_t hash() const;

    static PipelineConfig from_file(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;
};

/// Everything one loop iteration produced.
struct IterationArtifact {
    int iteration = 0;
    std::vector<PseudoReferenceSet> pseudo_refs;
    std::vector<PreferenceFeedback> feedback;
    ExportPaths exports;
    std::string model_ref_in;
    std::string model_ref_out;
    std::filesystem::path dir;
    std::vector<std::string> warnings;
};

/// Hands the exported training data to whatever performs the optimization
/// and returns the reference of the resulting model.
class Trainer {
public:
    virtual ~Trainer() = default;
    virtual std::string optimize(const std::string& model_ref_in,
                                 const std::filesystem::path& sft_path,
                                 const std::filesystem::path& dpo_path,
                                 const TrainerHyperparams& hp) = 0;
};

/// No-op trainer: the model reference passes through unchanged.
class IdentityTrainer : public Trainer {
public:
    std::string optimize(const std::string& model_ref_in, const std::filesystem::path&,
                         const std::filesystem::path&, const TrainerHyperparams&) override {
        calls_.fetch_add(1);
        return model_ref_in;
    }
    std::size_t calls() const { return calls_.load(); }

private:
    std::atomic<std::size_t> calls_{0};
};

/// Shells out to an external fine-tuning command:
///   <command> <model_ref_in> <sft_path> <dpo_path> <hyperparams-json>
/// The last non-empty stdout line is taken as the new model reference.
class CommandTrainer : public Trainer {
public:
    explicit CommandTrainer(std::string command) : command_(std::move(command)) {}
    std::string optimize(const std::string& model_ref_in, const std::filesystem::path& sft_path,
                         const std::filesystem::path& dpo_path,
                         const TrainerHyperparams& hp) override;

private:
    std::string command_;
};

/// Runs the full self-training loop: per iteration, refine responses (empty
/// refinement at iteration 0), retrieve pseudo references, rank candidate
/// reformulations against them, export SFT/DPO data, then invoke the
/// trainer. Every artifact is persisted under `artifact_dir/iter_<i>/`
/// before the next step begins; the iteration manifest is written last.
std::vector<IterationArtifact> run(const PipelineConfig& config, const Dataset& dataset,
                                   const Corpus& corpus, LmClient& client, Trainer& trainer,
                                   const std::filesystem::path& artifact_dir);

/// Continues a run from the first iteration lacking a valid manifest.
/// Completed artifacts are reloaded, not recomputed. Throws ResumeError on a
/// corrupt manifest or when the supplied config/data do not match the run.
std::vector<IterationArtifact> resume(const PipelineConfig& config, const Dataset& dataset,
                                      const Corpus& corpus, LmClient& client, Trainer& trainer,
                                      const std::filesystem::path& artifact_dir);

/// Retrieval accuracy of per-turn reformulations against gold references.
MetricReport evaluate_retrieval(const std::map<TurnKey, std::string>& reformulations,
                                const Dataset& dataset, const Retriever& retriever,
                                const std::vector<int>& report_cutoffs = {5, 20},
                                std::size_t top_n = 100);

/// Pseudo reference accuracy per iteration, reconstructed from the persisted
/// source queries. Returns one report per iteration in order.
std::vector<MetricReport> evaluate_pseudo(const std::filesystem::path& artifact_dir,
                                          const Dataset& dataset, const Retriever& retriever,
                                          const std::vector<int>& report_cutoffs = {5, 20},
                                          std::size_t top_n = 100);

std::uint64_t corpus_fingerprint(const Corpus& corpus);
std::uint64_t dataset_fingerprint(const Dataset& dataset);

}  // namespace cqr
