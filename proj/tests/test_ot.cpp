#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nfkit/coupling.hpp"
#include "nfkit/dataset.hpp"

using namespace nfkit;
using namespace nfkit::ot;

namespace {

data::Microenvironment make_env(std::vector<std::array<double, 2>> coords, std::vector<std::vector<double>> feats,
                                std::vector<std::uint8_t> mask = {}) {
    data::Microenvironment env;
    env.coords = std::move(coords);
    env.features = std::move(feats);
    env.mask = mask.empty() ? std::vector<std::uint8_t>(env.coords.size(), 1) : std::move(mask);
    env.center_index = 0;
    for (std::size_t i = 0; i < env.coords.size(); ++i) env.member_indices.push_back(static_cast<int>(i));
    return env;
}

// Exact OT cost over uniform marginals for n x n by assignment enumeration.
double brute_force_assignment_cost(const std::vector<double>& cost, std::int64_t n) {
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    double best = HUGE_VAL;
    do {
        double acc = 0;
        for (std::int64_t i = 0; i < n; ++i) acc += cost[static_cast<std::size_t>(i * n + perm[static_cast<std::size_t>(i)])];
        best = std::min(best, acc / static_cast<double>(n));
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

void check_marginals(const CouplingPlan& plan, double tol = 1e-6) {
    for (std::int64_t i = 0; i < plan.n0; ++i) {
        double s = 0;
        for (std::int64_t j = 0; j < plan.n1; ++j) s += plan.at(i, j);
        CHECK(std::fabs(s - plan.row_marginal[static_cast<std::size_t>(i)]) < tol);
    }
    for (std::int64_t j = 0; j < plan.n1; ++j) {
        double s = 0;
        for (std::int64_t i = 0; i < plan.n0; ++i) s += plan.at(i, j);
        CHECK(std::fabs(s - plan.col_marginal[static_cast<std::size_t>(j)]) < tol);
    }
    double total = 0;
    for (double p : plan.matrix) {
        CHECK(p >= 0);
        total += p;
    }
    CHECK(std::fabs(total - 1.0) < 1e-9);
}

}  // namespace

TEST_CASE("pooled_representation endpoints and hand case") {
    auto env = make_env({{1, 2}, {3, 4}}, {{10, 20}, {30, 40}});

    auto at0 = pooled_representation(env, 0.0);
    CHECK(at0.vector == std::vector<double>{2, 3, 0, 0});

    auto at1 = pooled_representation(env, 1.0);
    CHECK(at1.vector == std::vector<double>{0, 0, 20, 30});

    auto mid = pooled_representation(env, 0.5);
    CHECK(mid.vector[0] == doctest::Approx(0.5 * 2));
    CHECK(mid.vector[1] == doctest::Approx(0.5 * 3));
    CHECK(mid.vector[2] == doctest::Approx(0.5 * 20));
    CHECK(mid.vector[3] == doctest::Approx(0.5 * 30));

    // Masked slots excluded.
    auto masked = make_env({{1, 2}, {100, 100}}, {{10, 20}, {999, 999}}, {1, 0});
    auto rep = pooled_representation(masked, 0.5);
    CHECK(rep.vector[0] == doctest::Approx(0.5));
    CHECK(rep.vector[2] == doctest::Approx(5.0));

    auto all_masked = make_env({{1, 2}}, {{10, 20}}, {0});
    CHECK_THROWS_AS(pooled_representation(all_masked, 0.5), param_error);
    CHECK_THROWS_AS(pooled_representation(env, 1.5), param_error);
}

TEST_CASE("cost_matrix cases and brute-force oracle") {
    auto mk = [](std::vector<double> v) {
        PooledRep r;
        r.vector = std::move(v);
        return r;
    };
    std::vector<PooledRep> a{mk({0.0})}, b{mk({3.0})};
    auto c = cost_matrix(a, b);
    CHECK(c[0] == doctest::Approx(9.0));

    std::vector<PooledRep> same{mk({1, 2}), mk({3, 4})};
    auto cs = cost_matrix(same, same);
    CHECK(cs[0] == doctest::Approx(0.0));
    CHECK(cs[3] == doctest::Approx(0.0));

    Rng rng(8);
    std::vector<PooledRep> s4, t5;
    for (int i = 0; i < 4; ++i) s4.push_back(mk({rng.normal(), rng.normal(), rng.normal()}));
    for (int j = 0; j < 5; ++j) t5.push_back(mk({rng.normal(), rng.normal(), rng.normal()}));
    auto cm = cost_matrix(s4, t5);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 5; ++j) {
            double acc = 0;
            for (int k = 0; k < 3; ++k) {
                double d = s4[static_cast<std::size_t>(i)].vector[static_cast<std::size_t>(k)] -
                           t5[static_cast<std::size_t>(j)].vector[static_cast<std::size_t>(k)];
                acc += d * d;
            }
            CHECK(std::fabs(cm[static_cast<std::size_t>(i * 5 + j)] - acc) < 1e-12);
        }

    std::vector<PooledRep> bad{mk({1.0, 2.0})};
    CHECK_THROWS_AS(cost_matrix(a, bad), shape_error);
}

TEST_CASE("sinkhorn trivial and symmetric cases") {
    auto one = sinkhorn({0.5}, 1, 1);
    CHECK(one.matrix[0] == doctest::Approx(1.0));

    auto flat = sinkhorn({1, 1, 1, 1}, 2, 2);
    for (double p : flat.matrix) CHECK(p == doctest::Approx(0.25));
    check_marginals(flat);
}

TEST_CASE("sinkhorn marginal feasibility on random instances") {
    Rng rng(41);
    for (int trial = 0; trial < 25; ++trial) {
        std::int64_t n0 = 2 + static_cast<std::int64_t>(rng.uniform_index(6));
        std::int64_t n1 = 2 + static_cast<std::int64_t>(rng.uniform_index(6));
        std::vector<double> cost(static_cast<std::size_t>(n0 * n1));
        for (auto& c : cost) c = rng.uniform(0, 1);
        auto plan = sinkhorn(cost, n0, n1);
        check_marginals(plan);
        CHECK(plan.violation < 1e-4);  // pre-rounding iterate diagnostic
    }
}

TEST_CASE("sinkhorn near-exact OT at small epsilon (assignment oracle)") {
    Rng rng(17);
    for (int trial = 0; trial < 5; ++trial) {
        std::int64_t n = 4;
        std::vector<double> cost(static_cast<std::size_t>(n * n));
        double mean = 0;
        for (auto& c : cost) {
            c = rng.uniform(0, 1);
            mean += c;
        }
        mean /= static_cast<double>(cost.size());
        SinkhornOptions opt;
        opt.epsilon = 1e-3 * mean;
        opt.max_iter = 30000;
        auto plan = sinkhorn(cost, n, n, {}, {}, opt);
        double exact = brute_force_assignment_cost(cost, n);
        CHECK(plan.transport_cost(cost) <= exact * 1.02 + 1e-12);
        CHECK(plan.transport_cost(cost) >= exact - 1e-9);
    }
}

TEST_CASE("sinkhorn error paths") {
    CHECK_THROWS_AS(sinkhorn({1, 2}, 2, 2), shape_error);
    CHECK_THROWS_AS(sinkhorn({1, 2, 3, 4}, 2, 2, {0.0, 1.0}, {}), param_error);
    SinkhornOptions strict;
    strict.epsilon = 1e-6;
    strict.max_iter = 2;
    Rng rng(3);
    std::vector<double> cost(16);
    for (auto& c : cost) c = rng.uniform(0, 1);
    CHECK_THROWS_WITH_AS(sinkhorn(cost, 4, 4, {}, {}, strict), doctest::Contains("violation"), numeric_error);
}

TEST_CASE("plan entropy is non-decreasing in epsilon") {
    Rng rng(29);
    std::vector<double> cost(25);
    double mean = 0;
    for (auto& c : cost) {
        c = rng.uniform(0, 1);
        mean += c;
    }
    mean /= 25;
    double prev = -HUGE_VAL;
    for (double factor : {0.01, 0.1, 1.0}) {
        SinkhornOptions opt;
        opt.epsilon = factor * mean;
        opt.max_iter = 20000;
        auto plan = sinkhorn(cost, 5, 5, {}, {}, opt);
        CHECK(plan.entropy() >= prev - 1e-9);
        prev = plan.entropy();
    }
}

TEST_CASE("lambda endpoints reduce the plan to single-block costs") {
    Rng rng(53);
    std::vector<data::Microenvironment> envs;
    for (int i = 0; i < 5; ++i) {
        envs.push_back(make_env({{rng.normal(), rng.normal()}, {rng.normal(), rng.normal()}},
                                {{rng.normal(), rng.normal(), rng.normal()}, {rng.normal(), rng.normal(), rng.normal()}}));
    }
    auto plan_of = [&](double lambda, bool coords_only, bool feats_only) {
        std::vector<PooledRep> reps;
        for (const auto& e : envs) {
            auto r = pooled_representation(e, lambda);
            if (coords_only) r.vector.resize(2);
            if (feats_only) r.vector.erase(r.vector.begin(), r.vector.begin() + 2);
            reps.push_back(std::move(r));
        }
        auto cost = cost_matrix(reps, reps);
        SinkhornOptions opt;
        opt.epsilon = 0.05;
        return sinkhorn(cost, 5, 5, {}, {}, opt);
    };

    auto full0 = plan_of(0.0, false, false);
    auto coords0 = plan_of(0.0, true, false);
    for (std::size_t i = 0; i < full0.matrix.size(); ++i) CHECK(std::fabs(full0.matrix[i] - coords0.matrix[i]) < 1e-9);

    auto full1 = plan_of(1.0, false, false);
    auto feats1 = plan_of(1.0, false, true);
    for (std::size_t i = 0; i < full1.matrix.size(); ++i) CHECK(std::fabs(full1.matrix[i] - feats1.matrix[i]) < 1e-9);
}

TEST_CASE("sample_pairs: diagonal plan, determinism, multinomial concentration") {
    CouplingPlan diag;
    diag.n0 = diag.n1 = 4;
    diag.matrix.assign(16, 0.0);
    for (int i = 0; i < 4; ++i) diag.matrix[static_cast<std::size_t>(i * 4 + i)] = 0.25;
    Rng r1(5);
    for (auto [i, j] : sample_pairs(diag, 200, r1)) CHECK(i == j);

    Rng ra(9), rb(9);
    CHECK(sample_pairs(diag, 50, ra) == sample_pairs(diag, 50, rb));

    CouplingPlan p22;
    p22.n0 = p22.n1 = 2;
    p22.matrix = {0.4, 0.1, 0.2, 0.3};
    Rng rc(13);
    auto draws = sample_pairs(p22, 100000, rc);
    std::array<int, 4> counts{};
    for (auto [i, j] : draws) counts[static_cast<std::size_t>(i * 2 + j)] += 1;
    for (int c = 0; c < 4; ++c) {
        double p = p22.matrix[static_cast<std::size_t>(c)];
        double sigma = std::sqrt(p * (1 - p) / 100000.0);
        CHECK(std::fabs(counts[static_cast<std::size_t>(c)] / 100000.0 - p) < 3 * sigma);
    }
}

TEST_CASE("batch_coupling pairs identical slides to spatial twins at small epsilon") {
    // Identical source and target slides; lambda=0 so the pooled reps are the
    // spatial means. With tiny epsilon each env should pair to its twin.
    Rng rng(61);
    data::Slide slide;
    slide.cells.resize(24);
    for (auto& c : slide.cells) {
        c.coords = {rng.uniform(0, 12), rng.uniform(0, 12)};
        c.features = {rng.normal(), rng.normal()};
    }
    auto envs = data::extract_microenvironments(slide, 1.0);
    Rng szr(1);
    auto std_envs = data::standardize_env_size(envs, szr);

    std::vector<std::array<double, 2>> centers;
    for (const auto& e : std_envs) centers.push_back(slide.cells[static_cast<std::size_t>(e.center_index)].coords);
    Rng kr(2);
    auto regions = data::kmeans_partition(centers, 4, kr);

    // Epsilon small relative to the pooled-rep cost scale.
    std::vector<PooledRep> pooled;
    for (const auto& e : std_envs) pooled.push_back(pooled_representation(e, 0.0));
    auto full_cost = cost_matrix(pooled, pooled);
    double mean_cost = 0;
    for (double c : full_cost) mean_cost += c;
    mean_cost /= static_cast<double>(full_cost.size());

    BatchCouplingConfig cfg;
    cfg.lambda = 0.0;
    cfg.pool_size = 24;  // >= env count: both pools take every env
    cfg.pairs = 60;
    cfg.k_regions = 4;
    cfg.sinkhorn.epsilon = 0.004 * mean_cost;
    cfg.sinkhorn.max_iter = 30000;
    cfg.sinkhorn.tol = 1e-7;
    Rng br(7);
    auto batch = batch_coupling(std_envs, regions.labels, std_envs, regions.labels, cfg, br);

    REQUIRE(batch.source_ids.size() == 60);
    // Nearest-twin rate over pooled reps.
    std::vector<PooledRep> reps;
    for (const auto& e : std_envs) reps.push_back(pooled_representation(e, 0.0));
    int twin = 0;
    for (std::size_t p = 0; p < batch.source_ids.size(); ++p) {
        const auto& sv = reps[static_cast<std::size_t>(batch.source_ids[p])].vector;
        double best = HUGE_VAL;
        int arg = -1;
        for (int cand : batch.pooled_target_ids) {
            const auto& tv = reps[static_cast<std::size_t>(cand)].vector;
            double d = 0;
            for (std::size_t k = 0; k < sv.size(); ++k) d += (sv[k] - tv[k]) * (sv[k] - tv[k]);
            if (d < best) {
                best = d;
                arg = cand;
            }
        }
        if (arg == batch.target_ids[p]) ++twin;
    }
    INFO("twin = ", twin);
    CHECK(twin >= 54);  // >= 90%
}

TEST_CASE("batch_coupling M=n=1 and determinism") {
    data::Slide slide;
    slide.cells.resize(1);
    slide.cells[0].coords = {1, 1};
    slide.cells[0].features = {0.5};
    auto envs = data::extract_microenvironments(slide, 1.0);
    std::vector<int> regions{0};

    BatchCouplingConfig cfg;
    cfg.pool_size = 1;
    cfg.pairs = 1;
    Rng r1(3);
    auto b = batch_coupling(envs, regions, envs, regions, cfg, r1);
    REQUIRE(b.source_ids.size() == 1);
    CHECK(b.source_ids[0] == 0);
    CHECK(b.target_ids[0] == 0);

    Rng ra(21), rb(21);
    cfg.pool_size = 1;
    auto ba = batch_coupling(envs, regions, envs, regions, cfg, ra);
    auto bb = batch_coupling(envs, regions, envs, regions, cfg, rb);
    CHECK(ba.source_ids == bb.source_ids);
    CHECK(ba.target_ids == bb.target_ids);
}
