#include "mrgmm/estimate.hpp"
#include "mrgmm/experiments.hpp"
#include "mrgmm/models.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace mrgmm;

namespace {

// Two-step estimate of the combined-data model written out by hand:
// theta = mean Z - cov(Y, Z) / var(Y) * mean Y with 1/n moments.
double combined_closed_form(const Dataset& d) {
    const Vector y = d.column(0), z = d.column(1);
    const double my = y.mean(), mz = z.mean();
    const double syy = (y.array() - my).square().mean();
    const double syz = ((y.array() - my) * (z.array() - mz)).mean();
    return mz - syz / syy * my;
}

// (x'Pz y) / (x'Pz x) for a single regressor.
double tsls_closed_form(const Dataset& d) {
    const auto& o = d.observations();
    const Matrix Z = o.rightCols(o.cols() - 2);
    const Vector x = o.col(1), y = o.col(0);
    const Vector zx = Z.transpose() * x, zy = Z.transpose() * y;
    const Matrix zz = Z.transpose() * Z;
    return zx.dot(zz.ldlt().solve(zy)) / zx.dot(zz.ldlt().solve(zx));
}

FeatureFn iv_features() { return column_features(2, 2); }

}  // namespace

TEST_CASE("criterion is g_n' W g_n") {
    testing::Gen gen(1);
    const Dataset d = gen.normal_data(30, 2, 0.3);
    models::CombinedDataModel m;
    Matrix W(2, 2);
    W << 2.0, 0.5, 0.5, 1.0;
    const Vector g(Vector{{d.column(0).mean(), d.column(1).mean() - 0.1}});
    CHECK(criterion(m, d, Vector::Constant(1, 0.1), W) == doctest::Approx(g.dot(W * g)).epsilon(1e-14));
}

TEST_CASE("mean model: the estimate is the column mean") {
    testing::Gen gen(2);
    const Dataset d = gen.normal_data(40, 3, 5.0);
    models::MeanModel m(3);
    const GmmFit f = one_step(m, d, WeightRecipe::identity());
    CHECK(f.converged);
    CHECK(testing::max_abs(f.theta - d.observations().colwise().mean().transpose()) < 1e-10);
}

TEST_CASE("property: two-step estimate of the combined-data model equals its closed form") {
    testing::Gen gen(3);
    for (int trial = 0; trial < 200; ++trial) {
        experiments::Example1Spec spec;
        spec.n = 20 + gen.index(300);
        spec.rho = gen.uniform(-0.9, 0.9);
        spec.sigma = gen.uniform(0.2, 1.5);
        spec.delta = gen.uniform(-1, 1);
        spec.shape = gen.index(2) ? experiments::Shape::normal : experiments::Shape::lognormal;
        rng::KeyedStream s(99, static_cast<std::uint32_t>(trial), rng::kDataStream);
        const Dataset d = experiments::simulate_example1(spec, s);
        models::CombinedDataModel m;
        const GmmFit f = two_step(m, d);
        REQUIRE(f.converged);
        CHECK(f.step == 2);
        REQUIRE(f.first_step);
        CHECK(std::abs(f.first_step->theta[0] - d.column(1).mean()) < 1e-9);
        CHECK(std::abs(f.theta[0] - combined_closed_form(d)) < 1e-8);
    }
}

TEST_CASE("property: one-step 2SLS equals the projection formula") {
    testing::Gen gen(4);
    for (int trial = 0; trial < 100; ++trial) {
        const Dataset d = gen.iv_data(30 + gen.index(500), gen.uniform(-2, 2));
        models::LinearIvModel m(1, 2);
        const GmmFit f = one_step(m, d, WeightRecipe::per_obs_outer(iv_features(), "2sls"));
        REQUIRE(f.converged);
        CHECK(std::abs(f.theta[0] - tsls_closed_form(d)) < 1e-8);
    }
}

TEST_CASE("two-step linear IV equals efficient GMM written out by hand") {
    testing::Gen gen(5);
    const Dataset d = gen.iv_data(400, 0.7);
    models::LinearIvModel m(1, 2);
    const GmmFit f = two_step(m, d, {}, WeightRecipe::per_obs_outer(iv_features(), "2sls"));
    const auto& o = d.observations();
    const Matrix Z = o.rightCols(2);
    const Vector x = o.col(1), y = o.col(0);
    const double b1 = tsls_closed_form(d);
    const Vector e = y - b1 * x;
    const Matrix g = Z.array().colwise() * e.array();
    const Matrix gc = g.rowwise() - g.colwise().mean();
    const Matrix W = (gc.transpose() * gc / 400.0).inverse();
    const Vector zx = Z.transpose() * x, zy = Z.transpose() * y;
    CHECK(std::abs(f.theta[0] - zx.dot(W * zy) / zx.dot(W * zx)) < 1e-9);
}

TEST_CASE("nonlinear model: the minimizer is a stationary point below its neighbours") {
    testing::Gen gen(6);
    Dataset d = gen.iv_data(500, 0.3);
    RowMatrix o = d.observations();
    for (Eigen::Index i = 0; i < o.rows(); ++i) o(i, 0) = std::exp(0.3 * o(i, 1)) + 0.5 * o(i, 2) * gen.normal() + 0.1 * o(i, 3);
    d = Dataset(o);
    models::ExponentialIvModel m(1, 2);
    const GmmFit f = one_step(m, d, WeightRecipe::identity());
    REQUIRE(f.converged);
    CHECK(f.gradient_norm < 1e-10);
    const Matrix I = Matrix::Identity(2, 2);
    for (double h : {1e-3, -1e-3}) {
        CHECK(criterion(m, d, f.theta.array() + h, I) > f.criterion);
    }
}

TEST_CASE("the best start wins over an earlier worse local minimum") {
    // Minima near -1 (criterion ~0.04) and at +1 (criterion 0).
    FunctionModel m("two-wells", 2, 1, 1, [](std::span<const double>, std::span<const double> t, std::span<double> g) {
        g[0] = t[0] * t[0] - 1.0;
        g[1] = 0.1 * (t[0] - 1.0);
    });
    const Dataset d(RowMatrix::Zero(3, 1));
    OptimizerOptions o;
    o.starts = {Vector::Constant(1, -2.0), Vector::Constant(1, 2.0)};
    const GmmFit f = minimize_criterion(m, d, Matrix::Identity(2, 2), o);
    CHECK(f.theta[0] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(f.criterion < 1e-20);
}

TEST_CASE("no converged start raises NonConvergenceError carrying the best attempt") {
    models::ExponentialIvModel m(1, 2);
    testing::Gen gen(7);
    const Dataset d = gen.iv_data(100, 0.3);
    OptimizerOptions o;
    o.max_iter = 0;
    o.starts = {Vector::Constant(1, 3.0)};
    try {
        minimize_criterion(m, d, Matrix::Identity(2, 2), o);
        FAIL("expected NonConvergenceError");
    } catch (const NonConvergenceError& e) {
        CHECK_FALSE(e.best().converged);
    }
}

TEST_CASE("default starts are deterministic and inside the domain") {
    const Box b = Box::uniform(2, 20.0);
    const auto s = default_starts(b, 5);
    REQUIRE(s.size() == 5);
    CHECK(s[0] == Vector::Zero(2));
    for (const auto& v : s) CHECK(b.contains(v));
    CHECK(default_starts(b, 5) == s);
}

TEST_CASE("contract_second sums v_a times the second derivatives of g_a") {
    // Worked layout: G2 rows (t1, 0, t0, 2 t1) differentiated in (t0, t1).
    Matrix G2(4, 2);
    G2 << 0, 1, 0, 0, 1, 0, 0, 2;
    const Vector v(Vector{{3.0, -2.0}});
    Matrix expect(2, 2);
    // d2(3 t0 t1 - 2 t1^2) = [[0, 3], [3, -4]]
    expect << 0, 3, 3, -4;
    CHECK(contract_second(G2, v, 2) == expect);
}

TEST_CASE("centered weight is the inverse centered moment covariance") {
    testing::Gen gen(8);
    const Dataset d = gen.normal_data(200, 2);
    models::CombinedDataModel m;
    const Matrix W = centered_weight(m, d, Vector::Constant(1, 0.4));
    const Matrix c = d.observations().rowwise() - d.observations().colwise().mean();
    CHECK(testing::rel_diff(W, (c.transpose() * c / 200.0).inverse()) < 1e-12);
    RowMatrix dup(50, 2);
    for (Eigen::Index i = 0; i < 50; ++i) dup(i, 0) = dup(i, 1) = gen.normal();
    CHECK_THROWS_AS(centered_weight(m, Dataset(dup), Vector::Zero(1)), SingularMatrixError);
}

TEST_CASE("property: weight influence terms average to zero") {
    testing::Gen gen(9);
    for (int trial = 0; trial < 30; ++trial) {
        const Dataset d = gen.iv_data(50 + gen.index(400), gen.uniform(-1, 1));
        models::LinearIvModel m(1, 2);
        const GmmFit f2 = two_step(m, d, {}, WeightRecipe::per_obs_outer(iv_features(), "2sls"));
        for (const GmmFit* f : {f2.first_step.get(), &f2}) {
            const auto terms = weight_influence_terms(f->weight, m, d);
            REQUIRE(terms.size() == d.size());
            Matrix sum = Matrix::Zero(2, 2);
            double scale = 0.0;
            for (const auto& t : terms) {
                sum += t;
                scale = std::max(scale, testing::max_abs(t));
            }
            CHECK(testing::max_abs(sum) / static_cast<double>(d.size()) / scale <= 1e-12);
        }
        CHECK(weight_influence_terms(realize_weight(WeightRecipe::identity(), m, d), m, d).empty());
    }
}

TEST_CASE("one_step refuses the centered recipe") {
    testing::Gen gen(10);
    models::CombinedDataModel m;
    CHECK_THROWS_AS(one_step(m, gen.normal_data(20, 2), WeightRecipe::centered(Vector::Zero(1))), ContractError);
}

TEST_CASE("refit_like on the original data reproduces the fit") {
    testing::Gen gen(11);
    const Dataset d = gen.iv_data(300, 0.5);
    models::LinearIvModel m(1, 2);
    const GmmFit f = two_step(m, d, {}, WeightRecipe::per_obs_outer(iv_features(), "2sls"));
    const GmmFit r = refit_like(f, m, d);
    CHECK(r.step == 2);
    CHECK(std::abs(r.theta[0] - f.theta[0]) < 1e-10);
    CHECK(std::abs(r.first_step->theta[0] - f.first_step->theta[0]) < 1e-10);
}
