#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nfkit/metrics.hpp"

using namespace nfkit;
using namespace nfkit::metrics;

namespace {

std::vector<std::array<double, 2>> random_points(int n, Rng& rng, double lo = 0, double hi = 10) {
    std::vector<std::array<double, 2>> pts(static_cast<std::size_t>(n));
    for (auto& p : pts) p = {rng.uniform(lo, hi), rng.uniform(lo, hi)};
    return pts;
}

int brute_nearest(const std::vector<std::array<double, 2>>& pts, const std::array<double, 2>& q) {
    double best = HUGE_VAL;
    int arg = -1;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        double dx = q[0] - pts[i][0], dy = q[1] - pts[i][1];
        double d = dx * dx + dy * dy;
        if (d < best) {
            best = d;
            arg = static_cast<int>(i);
        }
    }
    return arg;
}

// Exact W_p over uniform equal-size sets via assignment enumeration.
double brute_wasserstein(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b,
                         int order) {
    std::size_t n = a.size();
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    double best = HUGE_VAL;
    do {
        double acc = 0;
        for (std::size_t i = 0; i < n; ++i) {
            double d2 = 0;
            for (std::size_t k = 0; k < a[i].size(); ++k) {
                double d = a[i][k] - b[static_cast<std::size_t>(perm[i])][k];
                d2 += d * d;
            }
            acc += order == 1 ? std::sqrt(d2) : d2;
        }
        best = std::min(best, acc / static_cast<double>(n));
    } while (std::next_permutation(perm.begin(), perm.end()));
    return order == 1 ? best : std::sqrt(best);
}

}  // namespace

TEST_CASE("kd-tree matches brute force, ties resolve to lowest index") {
    Rng rng(3);
    auto pts = random_points(400, rng);
    pts[100] = pts[50];  // planted duplicates
    pts[399] = pts[7];
    KdTree2d tree(pts);
    for (int q = 0; q < 300; ++q) {
        std::array<double, 2> query{rng.uniform(-1, 11), rng.uniform(-1, 11)};
        CHECK(tree.nearest(query) == brute_nearest(pts, query));
    }
    // Querying a duplicated location returns the lowest index.
    CHECK(tree.nearest(pts[50]) == 50);
    CHECK(tree.nearest(pts[7]) == 7);
}

TEST_CASE("psd/spd: closed-form cases") {
    PointSets gen{{{0, 0}}};
    PointSets ref{{{2, 0}}};
    CHECK(psd(gen, ref) == doctest::Approx(4.0));

    PointSets same{{{1, 1}, {2, 2}}};
    CHECK(psd(same, same) == doctest::Approx(0.0));
    CHECK(spd(same, same) == doctest::Approx(0.0));

    PointSets ref2{{{0, 0}, {10, 0}}};
    PointSets gen2{{{0, 0}}};
    CHECK(spd(gen2, ref2) == doctest::Approx(50.0));  // (0 + 100) / 2

    // Collapsed generation: psd 0, spd > 0.
    PointSets collapsed{{{0, 0}, {0, 0}, {0, 0}}};
    CHECK(psd(collapsed, ref2) == doctest::Approx(0.0));
    CHECK(spd(collapsed, ref2) > 0.0);

    CHECK_THROWS_AS(psd(PointSets{{{0, 0}}}, PointSets{{}}), param_error);
}

TEST_CASE("psd/spd match O(N^2) brute force on random 50-point sets") {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        PointSets gen{random_points(50, rng)}, ref{random_points(50, rng)};
        double brute_psd = 0;
        for (const auto& g : gen[0]) {
            double best = HUGE_VAL;
            for (const auto& r : ref[0]) {
                double dx = g[0] - r[0], dy = g[1] - r[1];
                best = std::min(best, dx * dx + dy * dy);
            }
            brute_psd += best;
        }
        brute_psd /= 50;
        double brute_spd = 0;
        for (const auto& r : ref[0]) {
            double best = HUGE_VAL;
            for (const auto& g : gen[0]) {
                double dx = g[0] - r[0], dy = g[1] - r[1];
                best = std::min(best, dx * dx + dy * dy);
            }
            brute_spd += best;
        }
        brute_spd /= 50;
        CHECK(std::fabs(psd(gen, ref) - brute_psd) < 1e-12);
        CHECK(std::fabs(spd(gen, ref) - brute_spd) < 1e-12);
    }
}

TEST_CASE("kde_likelihood closed forms and direct summation oracle") {
    CHECK(kde_likelihood({{1, 2}}, {1, 2}, 0.5) == doctest::Approx(1.0));

    // All N samples at distance d.
    double d = 1.7, sigma = 0.8;
    std::vector<std::array<double, 2>> ring;
    for (int i = 0; i < 8; ++i) {
        double a = 2 * M_PI * i / 8;
        ring.push_back({d * std::cos(a), d * std::sin(a)});
    }
    CHECK(kde_likelihood(ring, {0, 0}, sigma) == doctest::Approx(std::exp(-d * d / (2 * sigma * sigma))));

    Rng rng(9);
    auto samples = random_points(60, rng);
    std::array<double, 2> q{rng.uniform(0, 10), rng.uniform(0, 10)};
    double direct = 0;
    for (const auto& s : samples) {
        double dx = q[0] - s[0], dy = q[1] - s[1];
        direct += std::exp(-(dx * dx + dy * dy) / (2 * 0.6 * 0.6));
    }
    direct /= 60;
    CHECK(std::fabs(kde_likelihood(samples, q, 0.6) - direct) < 1e-12);

    // In (0, 1]; single-sample value decreases with distance.
    double prev = 2;
    for (double dist : {0.0, 0.5, 1.0, 2.0, 4.0}) {
        double v = kde_likelihood({{0, 0}}, {dist, 0}, 1.0);
        CHECK(v > 0);
        CHECK(v <= 1.0);
        CHECK(v < prev);
        prev = v;
    }
}

TEST_CASE("wasserstein: identity, point masses, brute-force oracle, triangle spot checks") {
    std::vector<std::vector<double>> a{{0, 0}, {1, 0}, {0, 2}};
    CHECK(wasserstein(a, a, 1) <= 1e-6);
    CHECK(wasserstein(a, a, 2) <= 1e-6);

    double d = 3.7;
    std::vector<std::vector<double>> p{{0.0, 0.0}}, q{{d, 0.0}};
    CHECK(wasserstein(p, q, 1) == doctest::Approx(d).epsilon(0.01));
    CHECK(wasserstein(p, q, 2) == doctest::Approx(d).epsilon(0.01));

    Rng rng(11);
    for (int trial = 0; trial < 4; ++trial) {
        std::vector<std::vector<double>> x, y;
        for (int i = 0; i < 5; ++i) x.push_back({rng.uniform(0, 1), rng.uniform(0, 1)});
        for (int i = 0; i < 5; ++i) y.push_back({rng.uniform(0, 1), rng.uniform(0, 1)});
        for (int order : {1, 2}) {
            double exact = brute_wasserstein(x, y, order);
            CHECK(wasserstein(x, y, order) == doctest::Approx(exact).epsilon(0.02));
        }
    }

    // Triangle inequality within solver tolerance.
    for (int trial = 0; trial < 3; ++trial) {
        std::vector<std::vector<double>> x, y, z;
        for (int i = 0; i < 4; ++i) {
            x.push_back({rng.uniform(0, 2), rng.uniform(0, 2)});
            y.push_back({rng.uniform(0, 2), rng.uniform(0, 2)});
            z.push_back({rng.uniform(0, 2), rng.uniform(0, 2)});
        }
        for (int order : {1, 2}) {
            double xy = wasserstein(x, y, order);
            double xz = wasserstein(x, z, order);
            double zy = wasserstein(z, y, order);
            CHECK(xy <= (xz + zy) * 1.05 + 1e-9);
        }
    }
}

TEST_CASE("classifier separates 20-sigma blobs and is deterministic") {
    Rng rng(13);
    std::vector<std::vector<double>> feats;
    std::vector<int> labels;
    for (int i = 0; i < 120; ++i) {
        feats.push_back({20.0 + rng.normal(), rng.normal(), rng.normal()});
        labels.push_back(0);
    }
    for (int i = 0; i < 120; ++i) {
        feats.push_back({rng.normal(), 20.0 + rng.normal(), rng.normal()});
        labels.push_back(1);
    }
    auto res = train_classifier(feats, labels, 2, 17);
    CHECK(res.heldout_weighted_f1 >= 0.99);

    auto res2 = train_classifier(feats, labels, 2, 17);
    CHECK(res2.heldout_weighted_f1 == res.heldout_weighted_f1);
    CHECK(res2.steps_trained == res.steps_trained);
}

TEST_CASE("classifier on shuffled labels sits at the majority baseline") {
    Rng rng(19);
    std::vector<std::vector<double>> feats;
    std::vector<int> labels;
    // 75/25 imbalance; labels then shuffled against features.
    for (int i = 0; i < 300; ++i) {
        feats.push_back({rng.normal(), rng.normal(), rng.normal()});
        labels.push_back(i < 225 ? 0 : 1);
    }
    auto perm = rng.permutation(labels.size());
    std::vector<int> shuffled(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) shuffled[i] = labels[perm[i]];

    auto res = train_classifier(feats, shuffled, 2, 23);

    // Weighted F1 of the constant-majority predictor on the same mix.
    std::vector<int> majority(labels.size(), 0);
    double baseline = weighted_f1(shuffled, majority, 2);
    CHECK(std::fabs(res.heldout_weighted_f1 - baseline) < 0.1);
}

TEST_CASE("train_classifier error paths") {
    std::vector<std::vector<double>> feats(50, std::vector<double>{0.0});
    std::vector<int> labels(50, 0);
    CHECK_THROWS_AS(train_classifier(feats, labels, 2, 1), param_error);  // type 1 missing
}

TEST_CASE("one_nn_f1: perfect case, misplacement, order invariance") {
    Rng rng(29);
    // Reference: type 0 on the left, type 1 on the right; well separated
    // features.
    std::vector<std::array<double, 2>> ref_coords;
    std::vector<std::vector<double>> ref_feats;
    std::vector<int> ref_labels;
    for (int i = 0; i < 100; ++i) {
        ref_coords.push_back({rng.normal() - 6, rng.normal()});
        ref_feats.push_back({10.0 + rng.normal(), rng.normal()});
        ref_labels.push_back(0);
    }
    for (int i = 0; i < 100; ++i) {
        ref_coords.push_back({rng.normal() + 6, rng.normal()});
        ref_feats.push_back({rng.normal(), 10.0 + rng.normal()});
        ref_labels.push_back(1);
    }
    auto clf = train_classifier(ref_feats, ref_labels, 2, 31);
    REQUIRE(clf.heldout_weighted_f1 >= 0.99);

    // Generated == reference with a near-perfect classifier.
    double perfect = one_nn_f1(ref_coords, ref_feats, ref_coords, ref_labels, clf.classifier);
    CHECK(perfect >= 0.99);

    // Type-0 features placed on type-1 territory degrade the score.
    std::vector<std::array<double, 2>> wrong_coords;
    std::vector<std::vector<double>> wrong_feats;
    for (int i = 0; i < 100; ++i) {
        wrong_coords.push_back({rng.normal() + 6, rng.normal()});  // right side
        wrong_feats.push_back({10.0 + rng.normal(), rng.normal()});  // type-0 profile
    }
    double degraded = one_nn_f1(wrong_coords, wrong_feats, ref_coords, ref_labels, clf.classifier);
    CHECK(degraded < 0.5);

    // Invariance under generated-cell reordering.
    std::vector<std::size_t> order(wrong_coords.size());
    std::iota(order.begin(), order.end(), 0);
    Rng prng(37);
    auto perm = prng.permutation(order.size());
    std::vector<std::array<double, 2>> perm_coords(wrong_coords.size());
    std::vector<std::vector<double>> perm_feats(wrong_feats.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        perm_coords[i] = wrong_coords[perm[i]];
        perm_feats[i] = wrong_feats[perm[i]];
    }
    CHECK(one_nn_f1(perm_coords, perm_feats, ref_coords, ref_labels, clf.classifier) ==
          doctest::Approx(degraded).epsilon(1e-12));

    // Missing reference labels rejected.
    auto bad_labels = ref_labels;
    bad_labels[0] = -1;
    CHECK_THROWS_AS(one_nn_f1(ref_coords, ref_feats, ref_coords, bad_labels, clf.classifier), param_error);
}

TEST_CASE("metrics report serializes with stable keys and round-trips") {
    MetricsReport r;
    r.psd = 0.125;
    r.spd = 3.5e-4;
    r.one_nn_f1 = 0.91;
    r.classifier_f1 = 0.99;
    r.wasserstein[0] = {0.1, 0.2, 0.3, 0.4, 1};
    r.wasserstein[1] = {0.5, 0.6, 0.7, 0.8, 2};
    r.meta["seed"] = "7";
    auto text = r.serialize();
    auto r2 = MetricsReport::parse(text);
    CHECK(r2.serialize() == text);
    CHECK(r2.psd == r.psd);
    CHECK(r2.wasserstein.at(1).w2_features == 0.8);
    CHECK(r2.meta.at("seed") == "7");
}

TEST_CASE("evaluate with the passthrough oracle: zero distances, high f1, deterministic") {
    data::SynthConfig scfg;
    scfg.num_types = 2;
    scfg.num_timepoints = 2;
    scfg.cells_per_type = {120, 120};
    scfg.feature_dim = 3;
    scfg.feature_separation = 10.0;
    scfg.blob_sigma = 0.6;
    scfg.spatial_radius = 2.0;
    auto ds = data::synth_generate(scfg, 41);

    EvalConfig cfg;
    cfg.grid_step = 1.0;
    cfg.radius = 0.9;
    cfg.target_count = 16;
    cfg.wasserstein_cap = 48;

    auto hook = oracle_hook(ds, cfg, 43);
    auto report = evaluate_with_hook(ds, cfg, 43, hook, ds.meta.feature_dim);
    CHECK(report.psd == doctest::Approx(0.0));
    CHECK(report.spd == doctest::Approx(0.0));
    CHECK(report.classifier_f1 >= 0.99);
    CHECK(report.one_nn_f1 >= 0.95);  // classifier self-consistency on true cells
    // Grid envs duplicate covered cells, so the per-type W1 is small but not
    // zero on the oracle.
    CHECK(report.wasserstein.at(0).w1_coords < 1.0);

    auto report2 = evaluate_with_hook(ds, cfg, 43, hook, ds.meta.feature_dim);
    CHECK(report2.serialize() == report.serialize());
}
