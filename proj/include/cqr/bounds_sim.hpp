#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace cqr {

/// Synthetic data distribution: nodes partitioned into label clusters,
/// random intra-cluster edges up to mean degree ~c, and just enough
/// cross-cluster edges to hit the separation target.
struct ExpansionGraph {
    std::size_t n = 0;
    std::vector<int> labels;                     // ground truth per node
    std::vector<std::vector<std::uint32_t>> adjacency;  // symmetric
    double c_realized = 0.0;                     // mean degree
    double mu_realized = 0.0;                    // fraction of nodes with a cross-label neighbor
};

/// Closed-form bound inputs. Construction enforces c > 3, 0 < err < 1, mu >= 0.
struct BoundParams {
    double err_labeler;
    double c;
    double mu;

    BoundParams(double err_labeler, double c, double mu);
};

/// Builds a graph with `num_labels` clusters, mean degree within
/// `degree_tolerance` of c, and cross-label fraction at most mu. Cluster
/// sizes are uniform by default; `size_skew` > 0 weights cluster k by
/// 1 + size_skew * k for robustness checks.
ExpansionGraph build_graph(std::size_t n, double c, double mu, int num_labels,
                           std::uint64_t seed, double degree_tolerance = 0.05,
                           double size_skew = 0.0);

/// Independently corrupts each label with probability err to a uniformly
/// random wrong label.
std::vector<int> apply_labeler(const ExpansionGraph& graph, double err, std::uint64_t seed);

/// One synchronous round of neighborhood majority vote over N(x) + {x}.
/// The current label wins ties it participates in; ties between other labels
/// resolve to the smallest label id.
std::vector<int> denoise(const ExpansionGraph& graph, const std::vector<int>& labels);

double error_fraction(const ExpansionGraph& graph, const std::vector<int>& labels);

/// Error after one denoising round over the noisy labeler output.
double single_role_error(const ExpansionGraph& graph, double err_labeler, std::uint64_t seed);
/// Error after a second denoising round over the first round's output.
double dual_role_error(const ExpansionGraph& graph, double err_labeler, std::uint64_t seed);

/// 2/(c-1) * Err + 2c/(c-1) * mu.
double bound_single(const BoundParams& p);
/// (2/(c-1))^2 * Err + (2c/(c-1)) * ((c+1)/(c-1)) * mu.
double bound_dual(const BoundParams& p);

struct SimulationSummary {
    double mean_single = 0.0;
    double mean_dual = 0.0;
    double mean_labeler = 0.0;  // empirical corruption rate
    std::vector<double> single_errors;
    std::vector<double> dual_errors;
    std::vector<double> labeler_errors;
};

/// Paired runs over `seeds` fresh (graph, labeler) draws.
SimulationSummary run_simulation(std::size_t n, double c, double mu, int num_labels, double err,
                                 const std::vector<std::uint64_t>& seeds);

/// CSV with one row per seed plus a summary row and the two closed-form bounds.
void save_simulation_csv(const SimulationSummary& summary, const BoundParams& params,
                         const std::filesystem::path& dest);

}  // namespace cqr
