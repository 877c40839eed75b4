#include "nfkit/coupling.hpp"

#include <algorithm>
#include <cmath>

namespace nfkit::ot {

double CouplingPlan::entropy() const {
    double h = 0;
    for (double p : matrix)
        if (p > 0) h -= p * std::log(p);
    return h;
}

double CouplingPlan::transport_cost(const std::vector<double>& cost) const {
    if (cost.size() != matrix.size()) throw shape_error("transport_cost: cost size mismatch");
    double acc = 0;
    for (std::size_t i = 0; i < matrix.size(); ++i) acc += matrix[i] * cost[i];
    return acc;
}

PooledRep pooled_representation(const data::Microenvironment& env, double lambda) {
    if (lambda < 0.0 || lambda > 1.0) throw param_error("pooled_representation: lambda must be in [0,1]");
    int n_valid = env.valid_count();
    if (n_valid == 0) throw param_error("pooled_representation: environment has no valid members");

    std::size_t d = 0;
    for (std::size_t i = 0; i < env.mask.size(); ++i)
        if (env.mask[i]) {
            d = env.features[i].size();
            break;
        }

    PooledRep rep;
    rep.env_id = env.center_index;
    rep.time_index = env.time_index;
    rep.vector.assign(2 + d, 0.0);
    for (std::size_t i = 0; i < env.mask.size(); ++i) {
        if (!env.mask[i]) continue;
        rep.vector[0] += env.coords[i][0];
        rep.vector[1] += env.coords[i][1];
        for (std::size_t j = 0; j < d; ++j) rep.vector[2 + j] += env.features[i][j];
    }
    double inv = 1.0 / static_cast<double>(n_valid);
    rep.vector[0] *= (1.0 - lambda) * inv;
    rep.vector[1] *= (1.0 - lambda) * inv;
    for (std::size_t j = 0; j < d; ++j) rep.vector[2 + j] *= lambda * inv;
    return rep;
}

std::vector<double> cost_matrix(const std::vector<PooledRep>& srcs, const std::vector<PooledRep>& tgts) {
    if (srcs.empty() || tgts.empty()) throw param_error("cost_matrix: empty representation set");
    std::size_t d = srcs[0].vector.size();
    for (const auto& r : srcs)
        if (r.vector.size() != d) throw shape_error("cost_matrix: ragged source vectors");
    for (const auto& r : tgts)
        if (r.vector.size() != d) throw shape_error("cost_matrix: dimension mismatch");

    std::vector<double> cost(srcs.size() * tgts.size());
    for (std::size_t i = 0; i < srcs.size(); ++i)
        for (std::size_t j = 0; j < tgts.size(); ++j) {
            double acc = 0;
            for (std::size_t k = 0; k < d; ++k) {
                double diff = srcs[i].vector[k] - tgts[j].vector[k];
                acc += diff * diff;
            }
            cost[i * tgts.size() + j] = acc;
        }
    return cost;
}

namespace {

// log sum_j exp(v[j]) with max stabilization.
double logsumexp(const double* v, std::int64_t n) {
    double mx = -HUGE_VAL;
    for (std::int64_t j = 0; j < n; ++j) mx = std::max(mx, v[j]);
    if (!std::isfinite(mx)) return mx;
    double acc = 0;
    for (std::int64_t j = 0; j < n; ++j) acc += std::exp(v[j] - mx);
    return mx + std::log(acc);
}

}  // namespace

CouplingPlan sinkhorn(const std::vector<double>& cost, std::int64_t n0, std::int64_t n1,
                      std::vector<double> row_marginal, std::vector<double> col_marginal,
                      const SinkhornOptions& options) {
    if (n0 < 1 || n1 < 1 || cost.size() != static_cast<std::size_t>(n0 * n1))
        throw shape_error("sinkhorn: cost must be n0 x n1");
    check_finite(cost, "sinkhorn cost");
    if (row_marginal.empty()) row_marginal.assign(static_cast<std::size_t>(n0), 1.0 / static_cast<double>(n0));
    if (col_marginal.empty()) col_marginal.assign(static_cast<std::size_t>(n1), 1.0 / static_cast<double>(n1));
    if (static_cast<std::int64_t>(row_marginal.size()) != n0 ||
        static_cast<std::int64_t>(col_marginal.size()) != n1)
        throw param_error("sinkhorn: marginal size mismatch");
    for (double a : row_marginal)
        if (a <= 0) throw param_error("sinkhorn: zero entry in row marginal");
    for (double b : col_marginal)
        if (b <= 0) throw param_error("sinkhorn: zero entry in col marginal");

    double mean_cost = 0;
    for (double c : cost) mean_cost += c;
    mean_cost /= static_cast<double>(cost.size());

    double eps = options.epsilon;
    if (eps <= 0) {
        eps = 0.05 * mean_cost;
        if (eps <= 0) eps = 1e-12;  // all-zero cost: any feasible plan is optimal
    }

    std::vector<double> log_a(static_cast<std::size_t>(n0)), log_b(static_cast<std::size_t>(n1));
    for (std::int64_t i = 0; i < n0; ++i) log_a[static_cast<std::size_t>(i)] = std::log(row_marginal[static_cast<std::size_t>(i)]);
    for (std::int64_t j = 0; j < n1; ++j) log_b[static_cast<std::size_t>(j)] = std::log(col_marginal[static_cast<std::size_t>(j)]);

    // Potentials f, g with P_ij = exp((f_i + g_j - C_ij) / eps). Small target
    // epsilons anneal from 0.05 x mean cost, halving per level and warm
    // starting the potentials; the dual variables carry cost units, so they
    // transfer across levels.
    std::vector<double> f(static_cast<std::size_t>(n0), 0.0), g(static_cast<std::size_t>(n1), 0.0);
    std::vector<double> buf(static_cast<std::size_t>(std::max(n0, n1)));

    CouplingPlan plan;
    plan.n0 = n0;
    plan.n1 = n1;
    plan.epsilon = eps;
    plan.row_marginal = row_marginal;
    plan.col_marginal = col_marginal;

    std::vector<double> schedule;
    for (double e = 0.05 * mean_cost; e > 2 * eps && schedule.size() < 60; e *= 0.5) schedule.push_back(e);
    schedule.push_back(eps);

    auto col_violation = [&](double e) {
        double v = 0;
        for (std::int64_t j = 0; j < n1; ++j) {
            double s = 0;
            for (std::int64_t i = 0; i < n0; ++i)
                s += std::exp((f[static_cast<std::size_t>(i)] + g[static_cast<std::size_t>(j)] -
                               cost[static_cast<std::size_t>(i * n1 + j)]) / e);
            v = std::max(v, std::fabs(s - col_marginal[static_cast<std::size_t>(j)]));
        }
        return v;
    };

    double violation = HUGE_VAL;
    int iter = 0;
    for (std::size_t level = 0; level < schedule.size() && iter < options.max_iter; ++level) {
        double e = schedule[level];
        bool final_level = level + 1 == schedule.size();
        double level_tol = final_level ? options.tol : std::max(options.tol, 1e-3);
        double stall_ref = HUGE_VAL;
        int level_start = iter;
        while (iter < options.max_iter) {
            // g-update (columns), then f-update (rows): row sums end exact.
            for (std::int64_t j = 0; j < n1; ++j) {
                for (std::int64_t i = 0; i < n0; ++i)
                    buf[static_cast<std::size_t>(i)] = (f[static_cast<std::size_t>(i)] - cost[static_cast<std::size_t>(i * n1 + j)]) / e;
                g[static_cast<std::size_t>(j)] = e * (log_b[static_cast<std::size_t>(j)] - logsumexp(buf.data(), n0));
            }
            for (std::int64_t i = 0; i < n0; ++i) {
                for (std::int64_t j = 0; j < n1; ++j)
                    buf[static_cast<std::size_t>(j)] = (g[static_cast<std::size_t>(j)] - cost[static_cast<std::size_t>(i * n1 + j)]) / e;
                f[static_cast<std::size_t>(i)] = e * (log_a[static_cast<std::size_t>(i)] - logsumexp(buf.data(), n1));
            }
            ++iter;
            int done = iter - level_start;
            // The violation scan costs as much as an update; sample it.
            if (done % 8 == 0 || done == 1 || iter == options.max_iter || (!final_level && done >= 300)) {
                violation = col_violation(e);
                if (violation < level_tol) break;
            }
            if (!final_level && done >= 300) break;
            // Break out once the violation stops moving: the iterate sits at
            // the float64 noise floor for this epsilon.
            if (done % 200 == 0) {
                if (violation > stall_ref * 0.98) break;
                stall_ref = violation;
            }
        }
    }
    // Small epsilon pins the iterate to a float64 noise floor around 1e-5;
    // below the floor the plan is converged in cost and exactness rounding
    // restores feasibility. Anything above it after max_iter is treated as
    // genuine non-convergence.
    double floor = std::max(options.tol, options.accept_violation);
    if (violation >= floor)
        throw numeric_error("sinkhorn: no convergence in " + std::to_string(iter) + "/" +
                            std::to_string(options.max_iter) + " iterations on " + std::to_string(n0) + "x" +
                            std::to_string(n1) + ", eps=" + std::to_string(eps) + " (violation " +
                            std::to_string(violation) + ")");

    plan.iterations = iter;
    plan.violation = violation;
    plan.matrix.resize(static_cast<std::size_t>(n0 * n1));
    for (std::int64_t i = 0; i < n0; ++i)
        for (std::int64_t j = 0; j < n1; ++j)
            plan.matrix[static_cast<std::size_t>(i * n1 + j)] =
                std::exp((f[static_cast<std::size_t>(i)] + g[static_cast<std::size_t>(j)] -
                          cost[static_cast<std::size_t>(i * n1 + j)]) / eps);

    // Exactness rounding (Altschuler-Weed-Rigollet): scale rows and columns
    // down to their marginals, then add the rank-1 mass correction.
    {
        auto& P = plan.matrix;
        for (std::int64_t i = 0; i < n0; ++i) {
            double s = 0;
            for (std::int64_t j = 0; j < n1; ++j) s += P[static_cast<std::size_t>(i * n1 + j)];
            double r = s > 0 ? std::min(1.0, row_marginal[static_cast<std::size_t>(i)] / s) : 0.0;
            for (std::int64_t j = 0; j < n1; ++j) P[static_cast<std::size_t>(i * n1 + j)] *= r;
        }
        std::vector<double> col_sum(static_cast<std::size_t>(n1), 0.0);
        for (std::int64_t i = 0; i < n0; ++i)
            for (std::int64_t j = 0; j < n1; ++j) col_sum[static_cast<std::size_t>(j)] += P[static_cast<std::size_t>(i * n1 + j)];
        for (std::int64_t j = 0; j < n1; ++j) {
            double c = col_sum[static_cast<std::size_t>(j)] > 0
                           ? std::min(1.0, col_marginal[static_cast<std::size_t>(j)] / col_sum[static_cast<std::size_t>(j)])
                           : 0.0;
            for (std::int64_t i = 0; i < n0; ++i) P[static_cast<std::size_t>(i * n1 + j)] *= c;
        }
        std::vector<double> err_a(static_cast<std::size_t>(n0), 0.0), err_b(static_cast<std::size_t>(n1), 0.0);
        double total_err = 0;
        for (std::int64_t i = 0; i < n0; ++i) {
            double s = 0;
            for (std::int64_t j = 0; j < n1; ++j) s += P[static_cast<std::size_t>(i * n1 + j)];
            err_a[static_cast<std::size_t>(i)] = row_marginal[static_cast<std::size_t>(i)] - s;
            total_err += err_a[static_cast<std::size_t>(i)];
        }
        for (std::int64_t j = 0; j < n1; ++j) {
            double s = 0;
            for (std::int64_t i = 0; i < n0; ++i) s += P[static_cast<std::size_t>(i * n1 + j)];
            err_b[static_cast<std::size_t>(j)] = col_marginal[static_cast<std::size_t>(j)] - s;
        }
        if (total_err > 0) {
            for (std::int64_t i = 0; i < n0; ++i)
                for (std::int64_t j = 0; j < n1; ++j)
                    P[static_cast<std::size_t>(i * n1 + j)] +=
                        err_a[static_cast<std::size_t>(i)] * err_b[static_cast<std::size_t>(j)] / total_err;
        }
    }
    return plan;
}

std::vector<std::pair<int, int>> sample_pairs(const CouplingPlan& plan, int n, Rng& rng) {
    if (n < 1) throw param_error("sample_pairs: n must be >= 1");
    std::vector<double> cdf(plan.matrix.size());
    double acc = 0;
    for (std::size_t i = 0; i < plan.matrix.size(); ++i) {
        acc += plan.matrix[i];
        cdf[i] = acc;
    }
    std::vector<std::pair<int, int>> pairs;
    pairs.reserve(static_cast<std::size_t>(n));
    for (int s = 0; s < n; ++s) {
        double u = rng.uniform() * acc;
        auto it = std::lower_bound(cdf.begin(), cdf.end(), u);
        auto flat = static_cast<std::int64_t>(std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()),
                                                                    cdf.size() - 1));
        pairs.emplace_back(static_cast<int>(flat / plan.n1), static_cast<int>(flat % plan.n1));
    }
    return pairs;
}

namespace {

// Region-uniform env sampling: pick a nonempty region uniformly, then an
// unused env uniformly within it; exhausted regions drop out.
std::vector<int> sample_region_uniform(const std::vector<int>& regions, std::size_t n_envs, int m, Rng& rng) {
    int k = 0;
    for (int r : regions) k = std::max(k, r + 1);
    std::vector<std::vector<int>> by_region(static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < regions.size(); ++i)
        by_region[static_cast<std::size_t>(regions[i])].push_back(static_cast<int>(i));

    if (n_envs <= static_cast<std::size_t>(m)) {
        std::vector<int> all(n_envs);
        for (std::size_t i = 0; i < n_envs; ++i) all[i] = static_cast<int>(i);
        return all;
    }

    std::vector<int> nonempty;
    for (int r = 0; r < k; ++r)
        if (!by_region[static_cast<std::size_t>(r)].empty()) nonempty.push_back(r);

    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(m));
    while (static_cast<int>(out.size()) < m && !nonempty.empty()) {
        std::size_t ri = static_cast<std::size_t>(rng.uniform_index(nonempty.size()));
        auto& pool = by_region[static_cast<std::size_t>(nonempty[ri])];
        std::size_t pi = static_cast<std::size_t>(rng.uniform_index(pool.size()));
        out.push_back(pool[pi]);
        pool[pi] = pool.back();
        pool.pop_back();
        if (pool.empty()) nonempty.erase(nonempty.begin() + static_cast<std::ptrdiff_t>(ri));
    }
    return out;
}

}  // namespace

EnvPairBatch batch_coupling(const std::vector<data::Microenvironment>& source_envs,
                            const std::vector<int>& source_regions,
                            const std::vector<data::Microenvironment>& target_envs,
                            const std::vector<int>& target_regions, const BatchCouplingConfig& config,
                            Rng& rng) {
    if (source_envs.empty() || target_envs.empty()) throw param_error("batch_coupling: empty env set");
    if (source_regions.size() != source_envs.size() || target_regions.size() != target_envs.size())
        throw param_error("batch_coupling: region label count mismatch");

    EnvPairBatch batch;
    batch.pooled_source_ids = sample_region_uniform(source_regions, source_envs.size(), config.pool_size, rng);
    batch.pooled_target_ids = sample_region_uniform(target_regions, target_envs.size(), config.pool_size, rng);

    std::vector<PooledRep> src_reps, tgt_reps;
    src_reps.reserve(batch.pooled_source_ids.size());
    tgt_reps.reserve(batch.pooled_target_ids.size());
    for (int i : batch.pooled_source_ids)
        src_reps.push_back(pooled_representation(source_envs[static_cast<std::size_t>(i)], config.lambda));
    for (int j : batch.pooled_target_ids)
        tgt_reps.push_back(pooled_representation(target_envs[static_cast<std::size_t>(j)], config.lambda));

    auto cost = cost_matrix(src_reps, tgt_reps);
    batch.plan = sinkhorn(cost, static_cast<std::int64_t>(src_reps.size()),
                          static_cast<std::int64_t>(tgt_reps.size()), {}, {}, config.sinkhorn);

    auto pairs = sample_pairs(batch.plan, config.pairs, rng);
    batch.source_ids.reserve(pairs.size());
    batch.target_ids.reserve(pairs.size());
    for (auto [i, j] : pairs) {
        batch.source_ids.push_back(batch.pooled_source_ids[static_cast<std::size_t>(i)]);
        batch.target_ids.push_back(batch.pooled_target_ids[static_cast<std::size_t>(j)]);
    }
    return batch;
}

}  // namespace nfkit::ot
