#include "mrgmm/errors.hpp"
#include "mrgmm/model.hpp"
#include "mrgmm/models.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <sstream>

using namespace mrgmm;

TEST_CASE("csv round trip keeps values and column names") {
    std::istringstream in("a, b\n1,2\n\n3.5,-4e-3\n");
    const Dataset d = read_csv(in);
    REQUIRE(d.size() == 2);
    REQUIRE(d.dim() == 2);
    CHECK(d.columns() == std::vector<std::string>{"a", "b"});
    CHECK(d.row(1)[1] == -4e-3);
    std::ostringstream out;
    write_csv(out, d);
    std::istringstream back(out.str());
    CHECK(read_csv(back).observations() == d.observations());
}

TEST_CASE("csv errors") {
    std::istringstream ragged("a,b\n1,2\n3\n");
    CHECK_THROWS_AS(read_csv(ragged), ArgumentError);
    std::istringstream text("a\nx\n");
    CHECK_THROWS_AS(read_csv(text), ArgumentError);
    std::istringstream empty("a,b\n");
    CHECK_THROWS_AS(read_csv(empty), ArgumentError);
    CHECK_THROWS_AS(load_csv("/nonexistent/file.csv"), ArgumentError);
}

TEST_CASE("resample picks rows in order with repetition") {
    testing::Gen gen(1);
    const Dataset d = gen.normal_data(5, 2);
    const std::vector<std::size_t> idx{4, 0, 4};
    const Dataset r = d.resample(idx);
    REQUIRE(r.size() == 3);
    CHECK(r.row(0)[1] == d.row(4)[1]);
    CHECK(r.row(2)[0] == d.row(4)[0]);
}

TEST_CASE("second-derivative layout matches the worked example") {
    // g = (t0 t1, t1^2): G = [[t1, t0], [0, 2 t1]], vec(G) = (t1, 0, t0, 2 t1).
    FunctionModel m("product", 2, 2, 1, [](std::span<const double>, std::span<const double> t, std::span<double> g) {
        g[0] = t[0] * t[1];
        g[1] = t[1] * t[1];
    });
    const double theta[] = {0.7, -1.3};
    const double x[] = {0.0};
    std::vector<double> G(4), G2(8);
    m.jacobian(x, theta, G);
    const double Gexp[] = {-1.3, 0.0, 0.7, -2.6};
    for (int i = 0; i < 4; ++i) CHECK(G[i] == doctest::Approx(Gexp[i]).epsilon(1e-8));
    m.second_derivative(x, theta, G2);
    // Column-major (4 x 2): column l is d vec(G) / d t_l.
    const double G2exp[] = {0, 0, 1, 0, 1, 0, 0, 2};
    for (int i = 0; i < 8; ++i) CHECK(G2[i] == doctest::Approx(G2exp[i]).epsilon(1e-5).scale(1.0));
}

TEST_CASE("property: built-in analytic derivatives agree with central differences") {
    testing::Gen gen(2);
    for (int trial = 0; trial < 25; ++trial) {
        const double a = gen.uniform(-1, 1), b = gen.uniform(-0.5, 0.5);
        const Dataset d3 = gen.normal_data(50, 3);
        models::MeanModel mean(3);
        CHECK(check_derivatives(mean, d3, Vector::Constant(3, a), 1e-5, 1e-6).passed());
        const Dataset d2 = gen.normal_data(50, 2);
        models::CombinedDataModel comb;
        CHECK(check_derivatives(comb, d2, Vector::Constant(1, a), 1e-5, 1e-6).passed());
        const Dataset iv = gen.iv_data(50, a);
        models::LinearIvModel liv(1, 2);
        CHECK(check_derivatives(liv, iv, Vector::Constant(1, b), 1e-5, 1e-6).passed());
        models::ExponentialIvModel eiv(1, 2);
        const auto r = check_derivatives(eiv, iv, Vector::Constant(1, b), 1e-5, 1e-6);
        CHECK_MESSAGE(r.passed(), "jacobian " << r.jacobian_error << " second " << r.second_error);
    }
}

TEST_CASE("moment means: parallel equals serial and matches a direct average") {
    testing::Gen gen(3);
    const Dataset iv = gen.iv_data(3000, 0.4);
    models::ExponentialIvModel eiv(1, 2);
    const Vector beta = Vector::Constant(1, 0.2);
    const MomentStats s = serial::eval_moment_means(eiv, iv, beta);
    for (int t : {1, 2, 4}) {
        const MomentStats p = eval_moment_means(eiv, iv, beta, DerivativeOrder::second, t);
        CHECK(p.g == s.g);
        CHECK(p.G == s.G);
        CHECK(p.G2 == s.G2);
    }
    // Direct oracle: g_a = mean z_a (y - exp(x b)).
    Vector g = Vector::Zero(2);
    for (std::size_t i = 0; i < iv.size(); ++i) {
        const auto r = iv.row(i);
        const double e = r[0] - std::exp(r[1] * 0.2);
        g[0] += r[2] * e;
        g[1] += r[3] * e;
    }
    g /= static_cast<double>(iv.size());
    CHECK(testing::max_abs(g - s.g) < 1e-13);
    const MomentStats only_g = eval_moment_means(eiv, iv, beta, DerivativeOrder::value);
    CHECK(only_g.G.size() == 0);
    CHECK(moment_rows(eiv, iv, beta).colwise().mean().transpose().isApprox(s.g, 1e-13));
}

TEST_CASE("non-finite evaluations name the observation") {
    RowMatrix x(3, 1);
    x << 1.0, -1.0, 2.0;
    FunctionModel logm("log", 1, 1, 1, [](std::span<const double> o, std::span<const double> t, std::span<double> g) {
        g[0] = std::log(o[0] - t[0]);
    });
    try {
        eval_moment_means(logm, Dataset(x), Vector::Zero(1), DerivativeOrder::value);
        FAIL("expected EvaluationError");
    } catch (const EvaluationError& e) {
        CHECK(e.observation() == 1);
    }
    x(1, 0) = std::nan("");
    CHECK_THROWS_AS(Dataset{x}, ArgumentError);
}

TEST_CASE("shifted model subtracts the shift and keeps derivatives") {
    testing::Gen gen(4);
    const Dataset d = gen.normal_data(20, 2);
    models::CombinedDataModel comb;
    Vector shift(2);
    shift << 0.25, -1.0;
    ShiftedModel sh(comb, shift);
    const Vector th = Vector::Constant(1, 0.3);
    const auto a = eval_moment_means(comb, d, th);
    const auto b = eval_moment_means(sh, d, th);
    CHECK(testing::max_abs(b.g - (a.g - shift)) < 1e-14);
    CHECK(b.G == a.G);
}

TEST_CASE("model factory and compatibility checks") {
    CHECK(models::make_model("mean", 3)->moment_dim() == 3);
    CHECK(models::make_model("example2", 4)->moment_dim() == 2);
    CHECK(models::make_model("linear-iv", 5)->moment_dim() == 3);
    CHECK_THROWS_AS(models::make_model("probit", 3), ArgumentError);
    CHECK_THROWS_AS(models::make_model("exp-iv", 2), ArgumentError);
    testing::Gen gen(5);
    models::CombinedDataModel comb;
    CHECK_THROWS_AS(check_compatible(comb, gen.normal_data(10, 3)), ArgumentError);
}

TEST_CASE("box clamp and contains") {
    const Box b = Box::uniform(2, 1.0);
    Vector v(2);
    v << 2.0, -0.5;
    CHECK_FALSE(b.contains(v));
    const Vector c = b.clamp(v);
    CHECK(c[0] == 1.0);
    CHECK(c[1] == -0.5);
    CHECK(b.contains(c));
}
