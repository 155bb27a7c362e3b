#include "mrgmm/estimate.hpp"
#include "mrgmm/experiments.hpp"
#include "mrgmm/models.hpp"
#include "mrgmm/variance.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <functional>

using namespace mrgmm;

namespace {

using MeanFn = std::function<double(const Vector&)>;

// Delta-method variance of a smooth function of sample means: the influence
// of observation i is the directional derivative of f towards m_i.
double delta_method(const Matrix& rows, const MeanFn& f) {
    const Vector m = rows.colwise().mean().transpose();
    const auto n = rows.rows();
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const Vector dir = rows.row(i).transpose() - m;
        const double h = 1e-4;
        // Fourth-order central difference.
        const double d = (-f(m + 2 * h * dir) + 8 * f(m + h * dir) - 8 * f(m - h * dir) + f(m - 2 * h * dir)) / (12 * h);
        acc += d * d;
    }
    return acc / static_cast<double>(n);
}

FeatureFn iv_features() { return column_features(2, 2); }

}  // namespace

TEST_CASE("two-step robust variance equals the delta method for the combined-data model") {
    testing::Gen gen(1);
    for (double delta : {0.0, -0.6, 0.4}) {
        experiments::Example1Spec spec{300, 0.5, 1.0, delta, experiments::Shape::lognormal};
        rng::KeyedStream s(7, 1, rng::kDataStream);
        const Dataset d = experiments::simulate_example1(spec, s);
        models::CombinedDataModel m;
        const GmmFit f = two_step(m, d);
        // theta = mZ - (mYZ - mY mZ) / (mYY - mY^2) mY
        Matrix rows(d.size(), 4);
        rows.col(0) = d.column(0);
        rows.col(1) = d.column(1);
        rows.col(2) = d.column(0).array().square();
        rows.col(3) = d.column(0).array() * d.column(1).array();
        const MeanFn fn = [](const Vector& q) { return q[1] - (q[3] - q[0] * q[1]) / (q[2] - q[0] * q[0]) * q[0]; };
        const VarianceEstimate v = sigma_mr(m, d, f);
        CHECK(v.kind == VarianceKind::robust);
        CHECK(v.step == 2);
        CHECK(v.sigma(0, 0) == doctest::Approx(delta_method(rows, fn)).epsilon(1e-7));
    }
}

TEST_CASE("one-step 2SLS robust variance equals the delta method") {
    testing::Gen gen(2);
    for (int trial = 0; trial < 5; ++trial) {
        // Misspecified: z2 enters the outcome directly.
        const Dataset d = gen.iv_data(250, gen.uniform(-1, 1));
        models::LinearIvModel m(1, 2);
        const GmmFit f = one_step(m, d, WeightRecipe::per_obs_outer(iv_features(), "2sls"));
        const auto& o = d.observations();
        // means of (z1 x, z2 x, z1 y, z2 y, z1 z1, z1 z2, z2 z2)
        Matrix rows(d.size(), 7);
        rows.col(0) = o.col(2).cwiseProduct(o.col(1));
        rows.col(1) = o.col(3).cwiseProduct(o.col(1));
        rows.col(2) = o.col(2).cwiseProduct(o.col(0));
        rows.col(3) = o.col(3).cwiseProduct(o.col(0));
        rows.col(4) = o.col(2).cwiseProduct(o.col(2));
        rows.col(5) = o.col(2).cwiseProduct(o.col(3));
        rows.col(6) = o.col(3).cwiseProduct(o.col(3));
        const MeanFn fn = [](const Vector& q) {
            Matrix Q(2, 2);
            Q << q[4], q[5], q[5], q[6];
            const Vector a(Vector{{q[0], q[1]}}), b(Vector{{q[2], q[3]}});
            const Matrix Qi = Q.inverse();
            return a.dot(Qi * b) / a.dot(Qi * a);
        };
        CHECK(sigma_mr(m, d, f).sigma(0, 0) == doctest::Approx(delta_method(rows, fn)).epsilon(1e-7));
    }
}

TEST_CASE("bread H is half the Hessian of the criterion") {
    testing::Gen gen(3);
    Dataset d = gen.iv_data(300, 0.2);
    RowMatrix o = d.observations();
    for (Eigen::Index i = 0; i < o.rows(); ++i) o(i, 0) = std::exp(0.3 * o(i, 1)) + gen.normal() + 0.3 * o(i, 3);
    d = Dataset(o);
    models::ExponentialIvModel m(1, 2);
    const GmmFit f = one_step(m, d, WeightRecipe::identity());
    const Matrix W = Matrix::Identity(2, 2);
    const double h = 1e-4, t = f.theta[0];
    auto J = [&](double b) { return criterion(m, d, Vector::Constant(1, b), W); };
    const double numeric = (-J(t + 2 * h) + 16 * J(t + h) - 30 * J(t) + 16 * J(t - h) - J(t - 2 * h)) / (12 * h * h);
    CHECK(hessian_H(m, d, f)(0, 0) == doctest::Approx(0.5 * numeric).epsilon(1e-6));
}

TEST_CASE("conventional variances match their textbook formulas") {
    testing::Gen gen(4);
    const Dataset d = gen.iv_data(400, 0.5);
    models::LinearIvModel m(1, 2);
    const auto& o = d.observations();
    const Matrix Z = o.rightCols(2);
    const Vector x = o.col(1), y = o.col(0);
    const Vector G = -(Z.transpose() * x) / 400.0;

    const GmmFit f1 = one_step(m, d, WeightRecipe::identity());
    {
        const Vector e = y - f1.theta[0] * x;
        const Matrix g = Z.array().colwise() * e.array();
        const Matrix omega = g.transpose() * g / 400.0;
        const double bread = G.dot(G);
        const double expect = G.dot(omega * G) / (bread * bread);
        const VarianceEstimate v = sigma_conventional(m, d, f1);
        CHECK(v.kind == VarianceKind::conventional);
        CHECK(v.sigma(0, 0) == doctest::Approx(expect).epsilon(1e-10));
        CHECK(v.standard_error(0) == doctest::Approx(std::sqrt(expect / 400.0)).epsilon(1e-10));
    }
    const GmmFit f2 = two_step(m, d, {}, WeightRecipe::per_obs_outer(iv_features(), "2sls"));
    {
        const Vector e = y - f2.theta[0] * x;
        const Matrix g = Z.array().colwise() * e.array();
        const Matrix omega = g.transpose() * g / 400.0;
        CHECK(sigma_conventional(m, d, f2).sigma(0, 0) ==
              doctest::Approx(1.0 / G.dot(omega.inverse() * G)).epsilon(1e-10));
    }
}

TEST_CASE("property: just-identified robust and conventional variances coincide") {
    testing::Gen gen(5);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t dim = 1 + gen.index(3);
        const Dataset d = gen.normal_data(10 + gen.index(200), dim, gen.uniform(-3, 3));
        models::MeanModel m(dim);
        const GmmFit f = one_step(m, d, WeightRecipe::identity());
        const Matrix c = sigma_conventional(m, d, f).sigma;
        CHECK(testing::rel_diff(sigma_mr(m, d, f).sigma, c) <= 1e-10);
        const Matrix centered = d.observations().rowwise() - d.observations().colwise().mean();
        CHECK(testing::rel_diff(c, centered.transpose() * centered / static_cast<double>(d.size())) <= 1e-10);
    }
    for (int trial = 0; trial < 20; ++trial) {
        RowMatrix o = gen.iv_data(200, 0.5).observations().leftCols(3);
        models::LinearIvModel m(1, 1);
        const Dataset d(o);
        const GmmFit f = one_step(m, d, WeightRecipe::identity());
        CHECK(testing::rel_diff(sigma_mr(m, d, f).sigma, sigma_conventional(m, d, f).sigma) <= 1e-10);
    }
}

TEST_CASE("sandwich parts have the stacked shapes") {
    testing::Gen gen(6);
    const Dataset d = gen.iv_data(100, 0.5);
    models::LinearIvModel m(1, 2);
    const GmmFit f1 = one_step(m, d, WeightRecipe::identity());
    CHECK(sandwich_parts(m, d, f1).Omega.rows() == 2 + 1);
    const GmmFit f2 = one_step(m, d, WeightRecipe::per_obs_outer(iv_features(), "2sls"));
    std::vector<Matrix> influence;
    const Matrix om = omega_robust(m, d, f2, &influence);
    CHECK(om.rows() == 2 + 1 + 2);
    CHECK(influence.size() == d.size());
    CHECK(testing::max_abs(om - om.transpose()) == 0.0);
}

TEST_CASE("variance contracts") {
    testing::Gen gen(7);
    const Dataset d = gen.iv_data(100, 0.5);
    models::LinearIvModel m(1, 2);
    GmmFit f = two_step(m, d);
    GmmFit orphan = f;
    orphan.first_step.reset();
    CHECK_THROWS_AS(sigma_mr(m, d, orphan), ContractError);
    GmmFit unconverged = f;
    unconverged.converged = false;
    CHECK_THROWS_AS(hessian_H(m, d, unconverged), ContractError);
    CHECK(to_string(VarianceKind::robust) == "misspecification-robust");
}
