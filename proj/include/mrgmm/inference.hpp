#pragma once

// t statistics, asymptotic and bootstrap percentile-t confidence intervals,
// J tests of the overidentifying restrictions and size-corrected critical
// values.

#include "mrgmm/bootstrap.hpp"
#include "mrgmm/estimate.hpp"
#include "mrgmm/variance.hpp"

#include <span>
#include <string>
#include <vector>

namespace mrgmm {

// Inverse standard normal CDF.
double normal_quantile(double p);

// Inverse chi-square CDF with `df` degrees of freedom.
double chi2_quantile(double p, double df);

// (theta_k - theta_null) / sqrt(sigma_kk / n). Throws VarianceInvalidError
// when sigma_kk <= 0.
double t_statistic(const GmmFit& fit, const VarianceEstimate& sigma, std::size_t k, double theta_null,
                   std::size_t n);

enum class CiKind { C, MR, HH, BN, MRstar };

// "CI_C", "CI_MR", "CI*_HH", "CI*_BN", "CI*_MR".
std::string to_string(CiKind kind);
CiKind parse_ci_kind(const std::string& text);
std::vector<CiKind> all_ci_kinds();
bool is_bootstrap(CiKind kind);

struct ConfidenceInterval {
    double center = 0.0;
    double halfwidth = 0.0;
    double lo = 0.0;
    double hi = 0.0;
    double critical = 0.0;  // z used for the halfwidth
    CiKind kind = CiKind::C;
    double level = 0.0;  // 1 - alpha
    bool degenerate = false;

    bool covers(double value) const { return lo <= value && value <= hi && !degenerate; }
};

// Kind C or MR, following sigma.kind.
ConfidenceInterval ci_asymptotic(const GmmFit& fit, const VarianceEstimate& sigma, std::size_t k,
                                 double alpha);

// Kind MRstar, HH or BN, following dist.scheme. The variance must be the
// robust one for MR and the conventional one otherwise.
ConfidenceInterval ci_bootstrap(const GmmFit& fit, const VarianceEstimate& sigma,
                                const TStatDistribution& dist, std::size_t k, double alpha);

enum class JTestKind { asymptotic, hh_bootstrap };

struct JTestResult {
    double statistic = 0.0;  // n J_n at the two-step estimate
    std::size_t df = 0;
    double critical = 0.0;
    bool reject = false;
    JTestKind kind = JTestKind::asymptotic;
    std::size_t failures = 0;  // bootstrap draws discarded
};

JTestResult j_test(const MomentModel& model, const Dataset& data, const GmmFit& fit2, double level);

JTestResult j_test_bootstrap(const MomentModel& model, const Dataset& data, const GmmFit& fit2,
                             const ResamplePlan& plan, double level);

// Builds the bootstrap result from already computed J* draws (sorted).
JTestResult j_test_from_draws(const MomentModel& model, const GmmFit& fit2, std::size_t n,
                              std::span<const double> sorted_draws, std::size_t failures, double level);

// Empirical (1 - alpha) quantile of null decision statistics under the
// bootstrap order-statistic rule. Infinite draws are allowed.
double size_corrected_critical(std::vector<double> null_draws, double alpha);

}  // namespace mrgmm
