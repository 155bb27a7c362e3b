#include "mrgmm/experiments.hpp"
#include "mrgmm/models.hpp"
#include "mrgmm/variance.hpp"
#include "support.hpp"

#include <doctest.h>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace mrgmm;
using namespace mrgmm::experiments;

namespace {

const double e = std::exp(1.0);

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("mrgmm_test_" + name);
}

StudyOptions small_options() {
    StudyOptions o;
    o.r = 24;
    o.B = 49;
    o.levels = {0.9};
    o.oracle_n = 200000;
    o.threads = 1;
    return o;
}

}  // namespace

TEST_CASE("pseudo-true value of the combined-data design") {
    Example1Spec s{200, 0.5, 1.5, -0.6, Shape::lognormal};
    CHECK(pseudo_true_example1(s) == doctest::Approx(0.5 * 1.5 * std::exp(1.125) * 0.6).epsilon(1e-14));
    s.shape = Shape::normal;
    CHECK(pseudo_true_example1(s) == doctest::Approx(0.3).epsilon(1e-14));
    s.delta = 0.0;
    CHECK(pseudo_true_example1(s) == 0.0);
    CHECK_FALSE(std::signbit(pseudo_true_example1(s)));
}

TEST_CASE("IV design constants") {
    CHECK(rho_eps_u() == doctest::Approx(std::exp(1.99) - e).epsilon(1e-14));
    CHECK(std::abs(rho_eps_u() - 4.5968) < 1e-3);
    const double k = (e - 1) * e;
    CHECK(gamma2_strong_invalid(0.5) == doctest::Approx(-0.5 * rho_eps_u() / (k + 0.25)).epsilon(1e-14));
    Example2Spec s;
    s.delta = 0.5;
    CHECK(std::abs(pseudo_true_example2(s)) < 1e-14);
    s.delta = 0.0;
    CHECK(std::abs(pseudo_true_example2(s)) < 1e-14);
}

TEST_CASE("simulated combined-data sample has the designed moments") {
    const Example1Spec s{400000, 0.5, 1.0, -0.6, Shape::lognormal};
    rng::KeyedStream st(5, 0, rng::kDataStream);
    const Dataset d = simulate_example1(s, st);
    const Vector y = d.column(0), z = d.column(1);
    CHECK(std::abs(y.mean() + 0.6) < 0.01);
    CHECK(std::abs(z.mean()) < 0.02);
    const double cov = ((y.array() - y.mean()) * (z.array() - z.mean())).mean();
    CHECK(cov == doctest::Approx(0.5 * std::exp(0.5)).epsilon(0.03));
    const double varz = (z.array() - z.mean()).square().mean();
    CHECK(varz == doctest::Approx(e * (e - 1)).epsilon(0.05));
    rng::KeyedStream again(5, 0, rng::kDataStream);
    CHECK(simulate_example1({10, 0.5, 1.0, -0.6, Shape::lognormal}, again).row(3)[1] == d.row(3)[1]);
}

TEST_CASE("simulated IV sample has the designed moments") {
    Example2Spec s;
    s.n = 400000;
    s.delta = 0.5;
    rng::KeyedStream st(6, 0, rng::kDataStream);
    const Dataset d = simulate_example2(s, st);
    REQUIRE(d.dim() == 4);
    // y = e with beta0 = 0; E[z2 e] = delta; E[z1 e] = 0.
    const Vector eps = d.column(0), z1 = d.column(2), z2 = d.column(3);
    CHECK(std::abs(eps.mean()) < 0.02);
    CHECK(std::abs(z1.dot(eps) / s.n) < 0.03);
    CHECK(z2.dot(eps) / s.n == doctest::Approx(0.5).epsilon(0.1));
    // 2SLS converges to beta0; the errors are heavy tailed, so allow a few
    // robust standard errors.
    models::LinearIvModel m(1, 2);
    const GmmFit f = fit_design(s, m, d);
    CHECK(std::abs(f.theta[0]) <= 4.0 * sigma_mr(m, d, f).standard_error(0));
}

TEST_CASE("spec validation") {
    CHECK_THROWS_AS(Example1Spec({200, 1.0, 1.5, 0.0, Shape::lognormal}).validate(), ArgumentError);
    CHECK_THROWS_AS(Example1Spec({1, 0.5, 1.5, 0.0, Shape::lognormal}).validate(), ArgumentError);
    Example2Spec s;
    s.gamma1 = 0.0;
    s.gamma2 = 0.0;
    CHECK_THROWS_AS(s.validate(), ArgumentError);
    CHECK(parse_shape("normal") == Shape::normal);
    CHECK_THROWS_AS(parse_shape("cauchy"), ArgumentError);
    CHECK(design_name(Example1Spec{200, 0.5, 1.5, -0.6, Shape::lognormal}) ==
          "example1(rho=0.5,sigma=1.5,delta=-0.6,shape=lognormal)");
}

TEST_CASE("pseudo-true verification passes, is cached and is honoured") {
    const auto cache = temp_path("cache.json");
    std::filesystem::remove(cache);
    for (double delta : {0.0, -0.6}) {
        const PseudoTrueCheck c = verify_pseudo_true(Example1Spec{200, 0.5, 1.5, delta, Shape::lognormal}, 200000, cache);
        CHECK(c.passed);
        CHECK(c.n == 200000);
        CHECK(std::abs(c.estimate - c.closed_form) <= 5 * c.standard_error);
    }
    Example2Spec s2;
    s2.delta = 0.5;
    CHECK(verify_pseudo_true(s2, 200000, cache).passed);
    std::ifstream in(cache);
    const auto j = nlohmann::json::parse(in);
    CHECK(j.size() == 3);

    // A stored failed check for a design makes the studies refuse to run.
    const auto bad = temp_path("bad_cache.json");
    const Example1Spec odd{200, 0.3, 0.7, 0.1, Shape::normal};
    nlohmann::json stored;
    stored[design_name(odd) + "@n=5000"] = {{"closed_form", pseudo_true(odd)},
                                            {"estimate", 1.0},
                                            {"standard_error", 0.01},
                                            {"n", 5000},
                                            {"passed", false}};
    std::ofstream(bad) << stored.dump();
    StudyOptions o = small_options();
    o.oracle_n = 5000;
    o.verification_cache = bad;
    CHECK_THROWS_AS(coverage_study(odd, o), ContractError);
    std::filesystem::remove(cache);
    std::filesystem::remove(bad);
}

TEST_CASE("coverage study is deterministic across thread counts") {
    const Example1Spec s{60, 0.5, 1.5, -0.3, Shape::lognormal};
    StudyOptions o = small_options();
    o.j_bootstrap = true;
    const CoverageTable a = coverage_study(s, o);
    o.threads = 4;
    const CoverageTable b = coverage_study(s, o);
    REQUIRE(a.cells.size() == all_ci_kinds().size());
    for (std::size_t i = 0; i < a.cells.size(); ++i) {
        CHECK(a.cells[i].covered == b.cells[i].covered);
        CHECK(a.cells[i].mean_halfwidth == b.cells[i].mean_halfwidth);
        CHECK(a.cells[i].valid + a.cells[i].failures == o.r);
        CHECK(a.cells[i].coverage == doctest::Approx(double(a.cells[i].covered) / a.cells[i].valid));
    }
    REQUIRE(a.j.size() == 2);
    CHECK(a.j[1].kind == JTestKind::hh_bootstrap);
    CHECK(a.j[0].rejections == b.j[0].rejections);
    CHECK(a.cell(0.9, CiKind::MRstar).kind == CiKind::MRstar);
    CHECK_THROWS(a.cell(0.95, CiKind::MRstar));
}

TEST_CASE("coverage study on the IV design") {
    Example2Spec s;
    s.n = 100;
    s.delta = 0.5;
    StudyOptions o = small_options();
    o.ci_kinds = {CiKind::MRstar, CiKind::C};
    const CoverageTable t = coverage_study(s, o);
    CHECK(std::abs(t.pseudo_true) < 1e-14);
    CHECK(t.cells.size() == 2);
    CHECK(t.cell(0.9, CiKind::C).mean_halfwidth > 0.0);
}

TEST_CASE("power study: grid, null rejection and grid validation") {
    const Example1Spec s{80, 0.5, 1.5, 0.0, Shape::normal};
    StudyOptions o = small_options();
    o.r = 40;
    o.ci_kinds = {CiKind::MR, CiKind::MRstar};
    const PowerCurve c = power_study(s, o, 0.1);
    REQUIRE(c.grid.size() == 41);
    CHECK(c.grid[20] == c.pseudo_true);
    REQUIRE(c.series.size() == 2);
    for (const auto& sr : c.series) {
        REQUIRE(sr.rejection.size() == 41);
        CHECK(sr.rejection[20] <= 0.1 + 1e-12);
        CHECK(sr.rejection.front() >= sr.rejection[20]);
        CHECK(sr.rejection.back() >= sr.rejection[20]);
    }
    CHECK_THROWS_AS(power_study(s, o, 0.1, {0.5, 1.0}), ArgumentError);
    const PowerCurve g = power_study(s, o, 0.1, {-1.0, 0.0, 1.0});
    CHECK(g.series[0].rejection.size() == 3);
    CHECK(test_name(CiKind::MRstar) == "t*_MR");
}
