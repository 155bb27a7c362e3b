#include "mrgmm/bootstrap.hpp"
#include "mrgmm/models.hpp"
#include "support.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>

using namespace mrgmm;

namespace {

Dataset column(std::vector<double> v) {
    RowMatrix x(static_cast<Eigen::Index>(v.size()), 1);
    for (std::size_t i = 0; i < v.size(); ++i) x(static_cast<Eigen::Index>(i), 0) = v[i];
    return Dataset(x);
}

Matrix rows_of(std::vector<double> v) {
    Matrix g(static_cast<Eigen::Index>(v.size()), 1);
    for (std::size_t i = 0; i < v.size(); ++i) g(static_cast<Eigen::Index>(i), 0) = v[i];
    return g;
}

// |mean* - mean| / sqrt(var* / n) with 1/n variances, from the indices alone.
std::vector<double> mean_t_by_hand(const Dataset& d, const ResamplePlan& plan, bool weighted,
                                   const Vector& p = {}) {
    const std::size_t n = d.size();
    const double mean = d.column(0).mean();
    std::vector<double> t;
    for (std::size_t b = 0; b < plan.B; ++b) {
        const auto idx = weighted ? resample_indices_weighted(std::span<const double>(p.data(), n), plan, b)
                                  : resample_indices(n, plan, b);
        double s = 0, s2 = 0;
        for (auto i : idx) s += d.row(i)[0];
        const double m = s / n;
        for (auto i : idx) s2 += (d.row(i)[0] - m) * (d.row(i)[0] - m);
        t.push_back(std::abs(m - mean) / std::sqrt(s2 / n / n));
    }
    std::sort(t.begin(), t.end());
    return t;
}

// Argmin over sample values z of |#{v <= z}/B - (1 - alpha)|, smallest z on ties.
double brute_quantile(const std::vector<double>& v, double alpha) {
    double best = std::numeric_limits<double>::infinity(), gap_best = best;
    for (double z : v) {
        const double c = static_cast<double>(std::count_if(v.begin(), v.end(), [&](double w) { return w <= z; }));
        const double gap = std::abs(c / v.size() - (1 - alpha));
        if (gap < gap_best - 1e-12 || (std::abs(gap - gap_best) <= 1e-12 && z < best)) {
            gap_best = gap;
            best = z;
        }
    }
    return best;
}

}  // namespace

TEST_CASE("resample indices are reproducible, in range and roughly uniform") {
    ResamplePlan plan;
    plan.B = 10;
    plan.seed = 3;
    const auto a = resample_indices(1000, plan, 4);
    CHECK(a == resample_indices(1000, plan, 4));
    CHECK(a != resample_indices(1000, plan, 5));
    ResamplePlan other = plan;
    other.stream_id = 1;
    CHECK(a != resample_indices(1000, other, 4));
    CHECK(*std::max_element(a.begin(), a.end()) < 1000);
    CHECK_THROWS_AS(resample_indices(10, plan, 10), ArgumentError);

    std::vector<int> counts(4, 0);
    plan.B = 200;
    for (std::size_t b = 0; b < plan.B; ++b) {
        for (auto i : resample_indices(4, plan, b)) ++counts[i];
    }
    for (int c : counts) CHECK(std::abs(c - 200) < 60);
}

TEST_CASE("weighted resampling follows the probabilities") {
    ResamplePlan plan;
    plan.B = 400;
    const std::vector<double> p{0.5, 0.0, 0.3, 0.2};
    std::vector<int> counts(4, 0);
    for (std::size_t b = 0; b < plan.B; ++b) {
        for (auto i : resample_indices_weighted(p, plan, b)) ++counts[i];
    }
    const double total = 4.0 * plan.B;
    CHECK(counts[1] == 0);
    CHECK(std::abs(counts[0] / total - 0.5) < 0.03);
    CHECK(std::abs(counts[2] / total - 0.3) < 0.03);
    const std::vector<double> bad{0.5, -0.1, 0.6};
    CHECK_THROWS_AS(resample_indices_weighted(bad, plan, 0), ArgumentError);
}

TEST_CASE("EL weights: symmetric, infeasible and a root found by bisection") {
    const ElWeights sym = el_probabilities_from_moments(rows_of({-1.0, 1.0}));
    REQUIRE(sym.converged);
    CHECK(std::abs(sym.lambda[0]) < 1e-12);
    CHECK(sym.p[0] == doctest::Approx(0.5));

    // Zero lies outside the convex hull of {1, 2, 3}.
    CHECK_FALSE(el_probabilities_from_moments(rows_of({1.0, 2.0, 3.0})).converged);

    // sum g_i / (1 + l g_i) = 0 for g = {-1, 0, 3}, bracketed by 1 + l g_i > 0.
    const std::vector<double> g{-1.0, 0.0, 3.0};
    auto score = [&](double l) {
        double s = 0;
        for (double v : g) s += v / (1 + l * v);
        return s;
    };
    double lo = -1.0 / 3 + 1e-12, hi = 1.0 - 1e-12;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (score(mid) > 0 ? lo : hi) = mid;
    }
    const double lam = 0.5 * (lo + hi);
    const ElWeights w = el_probabilities_from_moments(rows_of(g));
    REQUIRE(w.converged);
    CHECK(w.lambda[0] == doctest::Approx(lam).epsilon(1e-9));
    for (int i = 0; i < 3; ++i) CHECK(w.p[i] == doctest::Approx(1.0 / (3 * (1 + lam * g[i]))).epsilon(1e-9));
}

TEST_CASE("property: converged EL weights are feasible") {
    testing::Gen gen(1);
    int converged = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const auto n = static_cast<Eigen::Index>(5 + gen.index(300));
        const auto m = static_cast<Eigen::Index>(1 + gen.index(3));
        Matrix g(n, m);
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = 0; j < m; ++j) g(i, j) = gen.normal() * (1 + gen.uniform()) + gen.uniform(-0.3, 0.3);
        }
        const ElWeights w = el_probabilities_from_moments(g);
        if (!w.converged) continue;
        ++converged;
        CHECK((g.transpose() * w.p).lpNorm<Eigen::Infinity>() <= 1e-8);
        CHECK(std::abs(w.p.sum() - 1.0) <= 1e-12);
        CHECK((w.p.array() > 0).all());
    }
    CHECK(converged > 150);
}

TEST_CASE("MR bootstrap of a mean matches the hand-computed studentized draws") {
    testing::Gen gen(2);
    const Dataset d = gen.normal_data(40, 1, 1.0);
    models::MeanModel m(1);
    const GmmFit f = one_step(m, d, WeightRecipe::identity());
    ResamplePlan plan;
    plan.B = 199;
    plan.seed = 9;
    const TStatDistribution t = mr_bootstrap_t(m, d, f, plan, 0);
    CHECK(t.failures == 0);
    CHECK(t.scheme == Scheme::MR);
    const auto expect = mean_t_by_hand(d, plan, false);
    REQUIRE(t.abs_t.size() == expect.size());
    for (std::size_t i = 0; i < expect.size(); ++i) CHECK(t.abs_t[i] == doctest::Approx(expect[i]).epsilon(1e-8));

    // Just identified: recentering is a no-op and the variances agree.
    const TStatDistribution hh = hh_bootstrap_t(m, d, f, plan, 0);
    for (std::size_t i = 0; i < expect.size(); ++i) CHECK(hh.abs_t[i] == doctest::Approx(expect[i]).epsilon(1e-8));

    // EL weights are uniform, so BN draws are uniform draws from its own stream.
    const ElWeights w = el_probabilities(m, d, f.theta);
    REQUIRE(w.converged);
    const TStatDistribution bn = bn_bootstrap_t(m, d, f, w, plan, 0);
    const auto expect_bn = mean_t_by_hand(d, plan, true, w.p);
    for (std::size_t i = 0; i < expect_bn.size(); ++i) CHECK(bn.abs_t[i] == doctest::Approx(expect_bn[i]).epsilon(1e-8));
}

TEST_CASE("bootstrap distributions do not depend on the thread count") {
    testing::Gen gen(3);
    const Dataset d = gen.iv_data(80, 0.5);
    models::LinearIvModel m(1, 2);
    const GmmFit f = two_step(m, d, {}, WeightRecipe::per_obs_outer(column_features(2, 2), "2sls"));
    ResamplePlan plan;
    plan.B = 60;
    plan.threads = 1;
    const auto a = mr_bootstrap_t(m, d, f, plan, 0);
    const auto h1 = hh_bootstrap(m, d, f, plan, 0);
    plan.threads = 4;
    CHECK(mr_bootstrap_t(m, d, f, plan, 0).abs_t == a.abs_t);
    const auto h4 = hh_bootstrap(m, d, f, plan, 0);
    CHECK(h4.t.abs_t == h1.t.abs_t);
    CHECK(h4.j_stats == h1.j_stats);
    CHECK(h1.j_stats.size() == plan.B);
}

TEST_CASE("failed draws: within budget they are counted, beyond it the bootstrap is degenerate") {
    models::MeanModel m(1);
    ResamplePlan plan;
    plan.B = 999;
    // A resample of only zeros has zero variance; the chance is 0.94^50 ~ 4.5%.
    std::vector<double> few(50, 0.0);
    few[0] = few[1] = few[2] = 1.0;
    const Dataset d1 = column(few);
    const GmmFit f1 = one_step(m, d1, WeightRecipe::identity());
    const auto t = mr_bootstrap_t(m, d1, f1, plan, 0);
    CHECK(t.failures > 10);
    CHECK(t.failures < 100);
    CHECK(t.abs_t.size() + t.failures == plan.B);
    // Here the chance is 0.967^30 ~ 36%.
    std::vector<double> one(30, 0.0);
    one[0] = 1.0;
    const Dataset d2 = column(one);
    const GmmFit f2 = one_step(m, d2, WeightRecipe::identity());
    CHECK_THROWS_AS(mr_bootstrap_t(m, d2, f2, plan, 0), BootstrapDegenerateError);
}

TEST_CASE("BN with unavailable EL weights is degenerate") {
    testing::Gen gen(4);
    const Dataset d = gen.normal_data(30, 1);
    models::MeanModel m(1);
    const GmmFit f = one_step(m, d, WeightRecipe::identity());
    ElWeights none;
    ResamplePlan plan;
    plan.B = 50;
    const auto t = bn_bootstrap_t(m, d, f, none, plan, 0);
    CHECK(t.degenerate);
    CHECK(t.failures == 50);
    CHECK_THROWS_AS(bootstrap_quantile(t, 0.1), QuantileUnavailableError);
}

TEST_CASE("order-statistic quantile examples") {
    const std::vector<double> ten{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    CHECK(order_statistic_quantile(ten, 0.1) == 9);
    CHECK(order_statistic_quantile(ten, 0.5) == 5);
    // 0.85 is equidistant from 8/10 and 9/10: the smaller value wins.
    CHECK(order_statistic_quantile(ten, 0.15) == 8);
    const std::vector<double> ties{1, 2, 2, 2, 3};
    CHECK(order_statistic_quantile(ties, 0.3) == 2);
    CHECK(order_statistic_quantile(ties, 0.05) == 3);
    const std::vector<double> empty;
    CHECK_THROWS_AS(order_statistic_quantile(empty, 0.1), QuantileUnavailableError);
    CHECK_THROWS_AS(order_statistic_quantile(ten, 1.0), ArgumentError);
    const double inf = std::numeric_limits<double>::infinity();
    const std::vector<double> with_inf{1, 2, inf, inf};
    CHECK(order_statistic_quantile(with_inf, 0.1) == inf);
}

TEST_CASE("property: quantile rule equals brute force on tied samples") {
    testing::Gen gen(5);
    for (int c = 0; c < 1000; ++c) {
        const std::size_t B = 1 + gen.index(50);
        std::vector<double> v(B);
        for (auto& x : v) x = static_cast<double>(gen.index(10)) * 0.5;
        const double alpha = gen.uniform(0.01, 0.99);
        std::vector<double> sorted = v;
        std::sort(sorted.begin(), sorted.end());
        CHECK(order_statistic_quantile(sorted, alpha) == brute_quantile(v, alpha));
    }
}
