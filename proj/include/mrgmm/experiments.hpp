#pragma once

// Monte Carlo designs: a combined-data mean model with a lognormal shift
// (example1) and a linear IV model with a possibly invalid instrument
// (example2), their pseudo-true values, and coverage and power studies.

#include "mrgmm/bootstrap.hpp"
#include "mrgmm/estimate.hpp"
#include "mrgmm/inference.hpp"
#include "mrgmm/model.hpp"
#include "mrgmm/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace mrgmm::experiments {

// lognormal: Z = exp(sigma Z0) - exp(sigma^2 / 2); normal: Z = Z0.
enum class Shape { lognormal, normal };

std::string to_string(Shape shape);
Shape parse_shape(const std::string& text);

// (Y, Z0) bivariate normal, means (delta, 0), unit variances, correlation rho.
struct Example1Spec {
    std::size_t n = 200;
    double rho = 0.5;
    double sigma = 1.5;
    double delta = 0.0;
    Shape shape = Shape::lognormal;

    void validate() const;
};

// y = x beta0 + e, x = z1 g1 + z2 g2 + u, z2 = z2' + delta / ((e-1)e) * e,
// with beta0 = 0 and lognormal (e, u) whose underlying normals correlate 0.99.
struct Example2Spec {
    std::size_t n = 200;
    double delta = 0.0;
    double gamma1 = 0.25;
    std::optional<double> gamma2;  // default: gamma2_strong_invalid(delta)

    void validate() const;
    double gamma2_value() const;
};

using DesignSpec = std::variant<Example1Spec, Example2Spec>;

std::size_t sample_size(const DesignSpec& spec);
DesignSpec with_sample_size(DesignSpec spec, std::size_t n);
double misspecification(const DesignSpec& spec);
std::string design_name(const DesignSpec& spec);
void validate(const DesignSpec& spec);

// Columns (Y, Z).
Dataset simulate_example1(const Example1Spec& spec, rng::KeyedStream& stream);
// Columns (y, x, z1, z2).
Dataset simulate_example2(const Example2Spec& spec, rng::KeyedStream& stream);
Dataset simulate(const DesignSpec& spec, rng::KeyedStream& stream);

// E[e u] for the example2 errors: exp(1.99) - e.
double rho_eps_u();

// gamma2 = -delta rho_eu / ((e-1)e + delta^2), which makes the 2SLS
// probability limit equal beta0 = 0.
double gamma2_strong_invalid(double delta);

double pseudo_true_example1(const Example1Spec& spec);
double pseudo_true_example2(const Example2Spec& spec);
double pseudo_true(const DesignSpec& spec);

std::unique_ptr<MomentModel> design_model(const DesignSpec& spec);

// The estimator each design studies: two-step GMM (identity first step) for
// example1 and one-step 2SLS for example2.
GmmFit fit_design(const DesignSpec& spec, const MomentModel& model, const Dataset& data);

// Two-step fit used for the J test. example2 starts from 2SLS.
GmmFit fit_for_j(const DesignSpec& spec, const MomentModel& model, const Dataset& data);

struct PseudoTrueCheck {
    double closed_form = 0.0;
    double estimate = 0.0;
    double standard_error = 0.0;
    std::size_t n = 0;
    bool passed = false;
};

// Compares the closed form with the studied estimator on one large simulated
// sample; passes when they differ by at most 5 robust standard errors.
// Results are remembered in-process and, when `cache` is non-empty, in a JSON
// file keyed by the design.
PseudoTrueCheck verify_pseudo_true(const DesignSpec& spec, std::size_t oracle_n = 1000000,
                                   const std::filesystem::path& cache = {});

struct StudyOptions {
    std::size_t r = 1000;
    std::size_t B = 999;
    std::vector<double> levels{0.90, 0.95};
    std::uint64_t seed = 1;
    std::vector<CiKind> ci_kinds = all_ci_kinds();
    bool j_bootstrap = false;
    double j_level = 0.05;
    int threads = 0;
    std::size_t oracle_n = 1000000;
    std::filesystem::path verification_cache;
};

struct CoverageCell {
    double level = 0.0;
    CiKind kind = CiKind::C;
    std::size_t covered = 0;
    std::size_t valid = 0;       // replications where the interval was built
    std::size_t failures = 0;    // replications excluded for this kind
    std::size_t degenerate = 0;  // zero-length intervals (counted as not covering)
    double mean_halfwidth = 0.0;
    double mean_estimate = 0.0;
    double coverage = 0.0;
    double mc_stderr = 0.0;
};

struct JRate {
    JTestKind kind = JTestKind::asymptotic;
    double level = 0.05;
    std::size_t rejections = 0;
    std::size_t valid = 0;
    std::size_t failures = 0;
    double rate = 0.0;
    double mc_stderr = 0.0;
};

struct CoverageTable {
    DesignSpec spec;
    double pseudo_true = 0.0;
    std::size_t r = 0;
    std::size_t B = 0;
    std::uint64_t seed = 0;
    std::vector<CoverageCell> cells;  // ordered by level, then by requested kind
    std::vector<JRate> j;
    PseudoTrueCheck check;

    const CoverageCell& cell(double level, CiKind kind) const;
};

CoverageTable coverage_study(const DesignSpec& spec, const StudyOptions& opts);

std::string test_name(CiKind kind);  // "t_C", "t_MR", "t*_HH", "t*_BN", "t*_MR"

struct PowerSeries {
    CiKind kind = CiKind::C;
    double critical = 0.0;
    std::vector<double> rejection;  // one entry per grid point
    std::size_t valid = 0;
    std::size_t failures = 0;
};

struct PowerCurve {
    DesignSpec spec;
    double pseudo_true = 0.0;
    double alpha = 0.1;
    std::size_t r = 0;
    std::size_t B = 0;
    std::uint64_t seed = 0;
    std::vector<double> grid;
    std::vector<PowerSeries> series;
    PseudoTrueCheck check;
};

// Size-corrected power of the t tests at level alpha. Critical values come
// from the decision statistics at the pseudo-true value; the same
// replications then give rejection frequencies over `grid` (default: 41
// points spanning the pseudo-true value +- 4 mean robust standard errors).
PowerCurve power_study(const DesignSpec& spec, const StudyOptions& opts, double alpha,
                       std::vector<double> grid = {});

}  // namespace mrgmm::experiments
