#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "nfkit/common.hpp"
#include "nfkit/dataset.hpp"

// Entropic OT over pooled microenvironment representations: the coupling
// used to pair source and target niches during training.

namespace nfkit::ot {

// (1-lambda)-weighted mean coordinates concatenated with lambda-weighted
// mean features; length 2 + D.
struct PooledRep {
    std::vector<double> vector;
    int env_id = -1;
    int time_index = 0;
};

struct CouplingPlan {
    std::int64_t n0 = 0, n1 = 0;
    std::vector<double> matrix;  // row-major n0 x n1, nonnegative
    std::vector<double> row_marginal;
    std::vector<double> col_marginal;
    double epsilon = 0;
    int iterations = 0;
    double violation = 0;  // final L-inf marginal violation

    double at(std::int64_t i, std::int64_t j) const { return matrix[static_cast<std::size_t>(i * n1 + j)]; }
    double entropy() const;
    double transport_cost(const std::vector<double>& cost) const;  // <P, C>
};

PooledRep pooled_representation(const data::Microenvironment& env, double lambda);

// C[i][j] = squared Euclidean distance between pooled vectors.
std::vector<double> cost_matrix(const std::vector<PooledRep>& srcs, const std::vector<PooledRep>& tgts);

struct SinkhornOptions {
    double epsilon = -1;       // <=0: 0.05 * mean(cost)
    int max_iter = 2000;
    double tol = 1e-9;         // L-inf marginal violation
    // Stalled iterates below this violation are accepted (exactness rounding
    // restores feasibility); above it the solve errors out. Pair-sampling
    // couplings tolerate a looser gate than metric-grade solves.
    double accept_violation = 5e-4;
};

// Log-domain Sinkhorn with max-stabilized logsumexp. Marginals default to
// uniform when empty. Throws numeric_error on non-convergence.
CouplingPlan sinkhorn(const std::vector<double>& cost, std::int64_t n0, std::int64_t n1,
                      std::vector<double> row_marginal = {}, std::vector<double> col_marginal = {},
                      const SinkhornOptions& options = {});

// n i.i.d. draws from the plan as a joint categorical distribution.
std::vector<std::pair<int, int>> sample_pairs(const CouplingPlan& plan, int n, Rng& rng);

struct BatchCouplingConfig {
    double lambda = 0.1;
    int pool_size = 256;   // M microenvironments sampled per slide
    int pairs = 64;        // n resampled source-target pairs
    int k_regions = 64;    // spatial K-Means partitions
    SinkhornOptions sinkhorn;
};

struct EnvPairBatch {
    std::vector<int> source_ids;  // indices into source_envs
    std::vector<int> target_ids;
    CouplingPlan plan;
    std::vector<int> pooled_source_ids;  // the M sampled env ids behind the plan
    std::vector<int> pooled_target_ids;
};

// Region-uniform sampling of M envs per slide, entropic coupling over pooled
// representations, then n pair draws from the plan. Region labels index the
// K-Means partition of each slide's cell coordinates (by env center).
EnvPairBatch batch_coupling(const std::vector<data::Microenvironment>& source_envs,
                            const std::vector<int>& source_regions,
                            const std::vector<data::Microenvironment>& target_envs,
                            const std::vector<int>& target_regions, const BatchCouplingConfig& config,
                            Rng& rng);

}  // namespace nfkit::ot
