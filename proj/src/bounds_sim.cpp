#include "cqr/bounds_sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <utility>

#include "cqr/errors.hpp"
#include "cqr/util.hpp"

namespace cqr {

BoundParams::BoundParams(double err_labeler, double c, double mu)
    : err_labeler(err_labeler), c(c), mu(mu) {
    if (!(c > 3.0)) throw ParameterError("expansion degree c must be > 3");
    if (!(err_labeler > 0.0 && err_labeler < 1.0))
        throw ParameterError("labeler error must be in (0, 1)");
    if (!(mu >= 0.0)) throw ParameterError("mu must be >= 0");
}

namespace {

std::uint64_t encode_pair(std::uint32_t a, std::uint32_t b) {
    if (a > b) std::swap(a, b);
    return (static_cast<std::uint64_t>(a) << 32) | b;
}

}  // namespace

ExpansionGraph build_graph(std::size_t n, double c, double mu, int num_labels,
                           std::uint64_t seed, double degree_tolerance, double size_skew) {
    if (!(c > 3.0)) throw ParameterError("expansion degree c must be > 3");
    if (num_labels < 2) throw ParameterError("need at least two labels");
    if (static_cast<double>(n) < 10.0 * c)
        throw ParameterError("n must be at least 10*c for a meaningful graph");
    if (!(mu >= 0.0 && mu <= 1.0)) throw ParameterError("mu must be in [0, 1]");
    if (size_skew < 0.0) throw ParameterError("size_skew must be >= 0");

    ExpansionGraph g;
    g.n = n;
    g.labels.resize(n);
    // contiguous label blocks; cluster k carries weight 1 + size_skew * k
    double total_weight = 0.0;
    for (int k = 0; k < num_labels; ++k) total_weight += 1.0 + size_skew * k;
    std::size_t assigned_nodes = 0;
    for (int k = 0; k < num_labels; ++k) {
        std::size_t size = k + 1 == num_labels
                               ? n - assigned_nodes
                               : static_cast<std::size_t>(
                                     (1.0 + size_skew * k) / total_weight * static_cast<double>(n));
        if (size < 2) throw ParameterError("skew leaves a cluster with fewer than two nodes");
        for (std::size_t i = 0; i < size; ++i) g.labels[assigned_nodes + i] = k;
        assigned_nodes += size;
    }
    std::vector<std::vector<std::uint32_t>> clusters(num_labels);
    for (std::size_t i = 0; i < n; ++i) clusters[g.labels[i]].push_back(static_cast<std::uint32_t>(i));

    const std::size_t target_edges = static_cast<std::size_t>(std::llround(c * n / 2.0));
    const std::size_t cross_edges = static_cast<std::size_t>(mu * n / 2.0);
    if (cross_edges > target_edges)
        throw ParameterError("mu target exceeds the edge budget implied by c");
    const std::size_t intra_edges = target_edges - cross_edges;

    std::mt19937_64 rng(splitmix64(seed ^ 0x67726170ULL));
    std::set<std::uint64_t> edges;
    auto add_edge = [&](std::uint32_t a, std::uint32_t b) {
        return a != b && edges.insert(encode_pair(a, b)).second;
    };

    // intra-cluster edges, quota proportional to cluster size
    std::size_t assigned = 0;
    for (int k = 0; k < num_labels; ++k) {
        const auto& cl = clusters[k];
        std::size_t quota = k + 1 == num_labels
                                ? intra_edges - assigned
                                : intra_edges * cl.size() / n;
        assigned += quota;
        const std::size_t capacity = cl.size() * (cl.size() - 1) / 2;
        if (quota > capacity)
            throw ParameterError("cluster too small for the requested mean degree");
        std::uniform_int_distribution<std::size_t> pick(0, cl.size() - 1);
        std::size_t placed = 0, attempts = 0;
        const std::size_t attempt_cap = 64 * quota + 1024;
        while (placed < quota) {
            if (++attempts > attempt_cap)
                throw ParameterError("intra-cluster edge sampling stalled; lower c or raise n");
            if (add_edge(cl[pick(rng)], cl[pick(rng)])) ++placed;
        }
    }

    // cross-cluster edges between nodes that have no cross edge yet, so the
    // realized separation is exactly 2 * cross_edges / n
    std::vector<char> crossed(n, 0);
    std::uniform_int_distribution<std::size_t> pick_any(0, n - 1);
    std::size_t placed = 0, attempts = 0;
    const std::size_t attempt_cap = 256 * cross_edges + 1024;
    while (placed < cross_edges) {
        if (++attempts > attempt_cap)
            throw ParameterError("cross-cluster edge sampling stalled; lower mu");
        auto a = static_cast<std::uint32_t>(pick_any(rng));
        auto b = static_cast<std::uint32_t>(pick_any(rng));
        if (g.labels[a] == g.labels[b] || crossed[a] || crossed[b]) continue;
        if (!add_edge(a, b)) continue;
        crossed[a] = crossed[b] = 1;
        ++placed;
    }

    g.adjacency.assign(n, {});
    for (auto code : edges) {
        auto a = static_cast<std::uint32_t>(code >> 32);
        auto b = static_cast<std::uint32_t>(code & 0xffffffffu);
        g.adjacency[a].push_back(b);
        g.adjacency[b].push_back(a);
    }
    for (auto& nbrs : g.adjacency) std::sort(nbrs.begin(), nbrs.end());

    g.c_realized = 2.0 * static_cast<double>(edges.size()) / static_cast<double>(n);
    std::size_t crossed_nodes = 0;
    for (std::size_t i = 0; i < n; ++i) crossed_nodes += crossed[i];
    g.mu_realized = static_cast<double>(crossed_nodes) / static_cast<double>(n);

    if (std::abs(g.c_realized - c) > degree_tolerance * c)
        throw ParameterError("realized mean degree misses the target beyond tolerance");
    return g;
}

std::vector<int> apply_labeler(const ExpansionGraph& graph, double err, std::uint64_t seed) {
    if (!(err > 0.0 && err < 1.0)) throw ParameterError("labeler error must be in (0, 1)");
    const int num_labels = *std::max_element(graph.labels.begin(), graph.labels.end()) + 1;
    std::mt19937_64 rng(splitmix64(seed ^ 0x6c61626cULL));
    std::bernoulli_distribution corrupt(err);
    std::uniform_int_distribution<int> offset(1, num_labels - 1);

    std::vector<int> noisy = graph.labels;
    for (std::size_t i = 0; i < graph.n; ++i) {
        if (corrupt(rng)) noisy[i] = (graph.labels[i] + offset(rng)) % num_labels;
    }
    return noisy;
}

std::vector<int> denoise(const ExpansionGraph& graph, const std::vector<int>& labels) {
    if (labels.size() != graph.n) throw ParameterError("labels must cover all nodes");
    const int num_labels = std::max(*std::max_element(graph.labels.begin(), graph.labels.end()),
                                    *std::max_element(labels.begin(), labels.end())) +
                           1;

    std::vector<int> out(graph.n);
    std::vector<int> counts(num_labels);
    for (std::size_t i = 0; i < graph.n; ++i) {
        std::fill(counts.begin(), counts.end(), 0);
        ++counts[labels[i]];
        for (auto nb : graph.adjacency[i]) ++counts[labels[nb]];

        int best = labels[i];
        int best_count = counts[labels[i]];
        for (int l = 0; l < num_labels; ++l) {
            if (counts[l] > best_count) {  // strict: ties involving the current label keep it
                best = l;
                best_count = counts[l];
            }
        }
        // a tie among labels other than the current one, all strictly above
        // the current count, resolves to the smallest id by the loop order
        out[i] = best;
    }
    return out;
}

double error_fraction(const ExpansionGraph& graph, const std::vector<int>& labels) {
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < graph.n; ++i) wrong += labels[i] != graph.labels[i];
    return static_cast<double>(wrong) / static_cast<double>(graph.n);
}

double single_role_error(const ExpansionGraph& graph, double err_labeler, std::uint64_t seed) {
    return error_fraction(graph, denoise(graph, apply_labeler(graph, err_labeler, seed)));
}

double dual_role_error(const ExpansionGraph& graph, double err_labeler, std::uint64_t seed) {
    return error_fraction(graph, denoise(graph, denoise(graph, apply_labeler(graph, err_labeler, seed))));
}

double bound_single(const BoundParams& p) {
    return 2.0 / (p.c - 1.0) * p.err_labeler + 2.0 * p.c / (p.c - 1.0) * p.mu;
}

double bound_dual(const BoundParams& p) {
    const double contraction = 2.0 / (p.c - 1.0);
    return contraction * contraction * p.err_labeler +
           (2.0 * p.c / (p.c - 1.0)) * ((p.c + 1.0) / (p.c - 1.0)) * p.mu;
}

SimulationSummary run_simulation(std::size_t n, double c, double mu, int num_labels, double err,
                                 const std::vector<std::uint64_t>& seeds) {
    if (seeds.empty()) throw ParameterError("need at least one seed");
    SimulationSummary s;
    for (auto seed : seeds) {
        auto graph = build_graph(n, c, mu, num_labels, seed);
        auto noisy = apply_labeler(graph, err, mix_seeds(seed, 1));
        auto once = denoise(graph, noisy);
        auto twice = denoise(graph, once);
        s.labeler_errors.push_back(error_fraction(graph, noisy));
        s.single_errors.push_back(error_fraction(graph, once));
        s.dual_errors.push_back(error_fraction(graph, twice));
    }
    auto mean = [](const std::vector<double>& v) {
        double sum = 0.0;
        for (double x : v) sum += x;
        return sum / static_cast<double>(v.size());
    };
    s.mean_labeler = mean(s.labeler_errors);
    s.mean_single = mean(s.single_errors);
    s.mean_dual = mean(s.dual_errors);
    return s;
}

void save_simulation_csv(const SimulationSummary& summary, const BoundParams& params,
                         const std::filesystem::path& dest) {
    std::ofstream out(dest);
    if (!out) throw ParseError("cannot write simulation file " + dest.string());
    out << "# synthetic majority-vote denoising run; empirical proxy, not the bound minimizer\n";
    out << "run,labeler_error,single_role_error,dual_role_error,bound_single,bound_dual\n";
    out.precision(10);
    const double bs = bound_single(params);
    const double bd = bound_dual(params);
    for (std::size_t i = 0; i < summary.single_errors.size(); ++i) {
        out << i << ',' << summary.labeler_errors[i] << ',' << summary.single_errors[i] << ','
            << summary.dual_errors[i] << ',' << bs << ',' << bd << '\n';
    }
    out << "mean," << summary.mean_labeler << ',' << summary.mean_single << ','
        << summary.mean_dual << ',' << bs << ',' << bd << '\n';
}

}  // namespace cqr
