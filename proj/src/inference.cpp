#include "mrgmm/inference.hpp"

#include "mrgmm/errors.hpp"

#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>

namespace mrgmm {

double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw ArgumentError("normal_quantile: probability must lie in (0, 1)");
    // Acklam's rational approximation followed by one Halley step.
    static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                   1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                   6.680131188771972e+01,  -1.328068155288572e+01};
    static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                   -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                   3.754408661907416e+00};
    constexpr double p_low = 0.02425;
    double x = 0.0;
    if (p < p_low) {
        const double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= 1.0 - p_low) {
        const double q = p - 0.5;
        const double r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log1p(-p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
    const double u = e * std::sqrt(2.0 * M_PI) * std::exp(0.5 * x * x);
    return x - u / (1.0 + 0.5 * x * u);
}

double chi2_quantile(double p, double df) {
    if (!(p > 0.0 && p < 1.0)) throw ArgumentError("chi2_quantile: probability must lie in (0, 1)");
    if (!(df > 0.0)) throw ArgumentError("chi2_quantile: degrees of freedom must be positive");
    return 2.0 * boost::math::gamma_p_inv(0.5 * df, p);
}

namespace {

double variance_entry(const VarianceEstimate& sigma, std::size_t k) {
    const auto kk = static_cast<Eigen::Index>(k);
    if (kk >= sigma.sigma.rows()) throw ArgumentError("coordinate out of range");
    const double s = sigma.sigma(kk, kk);
    if (!(s > 0.0)) throw VarianceInvalidError("variance entry " + std::to_string(k) + " is not positive");
    return s;
}

void check_alpha(double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ArgumentError("alpha must lie in (0, 1)");
}

ConfidenceInterval make_interval(double center, double z, double se, CiKind kind, double alpha) {
    ConfidenceInterval ci;
    ci.center = center;
    ci.critical = z;
    ci.halfwidth = z * se;
    ci.lo = center - ci.halfwidth;
    ci.hi = center + ci.halfwidth;
    ci.kind = kind;
    ci.level = 1.0 - alpha;
    return ci;
}

}  // namespace

double t_statistic(const GmmFit& fit, const VarianceEstimate& sigma, std::size_t k, double theta_null,
                   std::size_t n) {
    const double s = variance_entry(sigma, k);
    if (n == 0) throw ArgumentError("t_statistic: n must be positive");
    return (fit.theta[static_cast<Eigen::Index>(k)] - theta_null) / std::sqrt(s / static_cast<double>(n));
}

std::string to_string(CiKind kind) {
    switch (kind) {
        case CiKind::C: return "CI_C";
        case CiKind::MR: return "CI_MR";
        case CiKind::HH: return "CI*_HH";
        case CiKind::BN: return "CI*_BN";
        case CiKind::MRstar: return "CI*_MR";
    }
    return "?";
}

CiKind parse_ci_kind(const std::string& text) {
    std::string t;
    for (char ch : text) t.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
    if (t == "C" || t == "CI_C") return CiKind::C;
    if (t == "MR" || t == "CI_MR") return CiKind::MR;
    if (t == "MR*" || t == "CI*_MR") return CiKind::MRstar;
    if (t == "HH" || t == "HH*" || t == "CI*_HH") return CiKind::HH;
    if (t == "BN" || t == "BN*" || t == "CI*_BN") return CiKind::BN;
    throw ArgumentError("unknown interval kind '" + text + "' (use C, MR, MR*, HH, BN)");
}

std::vector<CiKind> all_ci_kinds() { return {CiKind::MRstar, CiKind::MR, CiKind::C, CiKind::HH, CiKind::BN}; }

bool is_bootstrap(CiKind kind) { return kind == CiKind::HH || kind == CiKind::BN || kind == CiKind::MRstar; }

ConfidenceInterval ci_asymptotic(const GmmFit& fit, const VarianceEstimate& sigma, std::size_t k,
                                 double alpha) {
    check_alpha(alpha);
    const double s = variance_entry(sigma, k);
    const double se = std::sqrt(s / static_cast<double>(sigma.n));
    const CiKind kind = sigma.kind == VarianceKind::robust ? CiKind::MR : CiKind::C;
    return make_interval(fit.theta[static_cast<Eigen::Index>(k)], normal_quantile(1.0 - 0.5 * alpha), se, kind,
                         alpha);
}

ConfidenceInterval ci_bootstrap(const GmmFit& fit, const VarianceEstimate& sigma,
                                const TStatDistribution& dist, std::size_t k, double alpha) {
    check_alpha(alpha);
    const VarianceKind want = dist.scheme == Scheme::MR ? VarianceKind::robust : VarianceKind::conventional;
    if (sigma.kind != want) {
        throw ContractError("ci_bootstrap: " + to_string(dist.scheme) + " bootstrap needs the " +
                            to_string(want) + " variance");
    }
    if (dist.coordinate != k) throw ContractError("ci_bootstrap: distribution is for another coordinate");
    const CiKind kind = dist.scheme == Scheme::MR ? CiKind::MRstar
                        : dist.scheme == Scheme::HH ? CiKind::HH
                                                    : CiKind::BN;
    const double center = fit.theta[static_cast<Eigen::Index>(k)];
    if (dist.degenerate) {
        ConfidenceInterval ci = make_interval(center, 0.0, 0.0, kind, alpha);
        ci.degenerate = true;
        return ci;
    }
    const double s = variance_entry(sigma, k);
    return make_interval(center, bootstrap_quantile(dist, alpha), std::sqrt(s / static_cast<double>(sigma.n)),
                         kind, alpha);
}

namespace {

void check_step_two(const MomentModel& model, const GmmFit& fit2) {
    if (fit2.step != 2) throw ContractError("J test needs a two-step fit");
    if (!fit2.converged) throw ContractError("J test: fit did not converge");
    if (model.moment_dim() < model.param_dim()) throw ContractError("J test: model is underidentified");
}

}  // namespace

JTestResult j_test(const MomentModel& model, const Dataset& data, const GmmFit& fit2, double level) {
    check_step_two(model, fit2);
    check_alpha(level);
    JTestResult out;
    out.df = model.moment_dim() - model.param_dim();
    out.kind = JTestKind::asymptotic;
    if (out.df == 0) return out;
    out.statistic = static_cast<double>(data.size()) * criterion(model, data, fit2.theta, fit2.weight.W);
    out.critical = chi2_quantile(1.0 - level, static_cast<double>(out.df));
    out.reject = out.statistic > out.critical;
    return out;
}

JTestResult j_test_from_draws(const MomentModel& model, const GmmFit& fit2, std::size_t n,
                              std::span<const double> sorted_draws, std::size_t failures, double level) {
    check_step_two(model, fit2);
    check_alpha(level);
    JTestResult out;
    out.df = model.moment_dim() - model.param_dim();
    out.kind = JTestKind::hh_bootstrap;
    out.failures = failures;
    if (out.df == 0) return out;
    out.statistic = static_cast<double>(n) * fit2.criterion;
    out.critical = order_statistic_quantile(sorted_draws, level);
    out.reject = out.statistic > out.critical;
    return out;
}

JTestResult j_test_bootstrap(const MomentModel& model, const Dataset& data, const GmmFit& fit2,
                             const ResamplePlan& plan, double level) {
    check_step_two(model, fit2);
    check_alpha(level);
    if (model.moment_dim() == model.param_dim()) {
        JTestResult out;
        out.kind = JTestKind::hh_bootstrap;
        return out;
    }
    const HhBootstrap hh = hh_bootstrap(model, data, fit2, plan, 0);
    JTestResult out = j_test_from_draws(model, fit2, data.size(), hh.j_stats, hh.t.failures, level);
    out.statistic = static_cast<double>(data.size()) * criterion(model, data, fit2.theta, fit2.weight.W);
    out.reject = out.statistic > out.critical;
    return out;
}

double size_corrected_critical(std::vector<double> null_draws, double alpha) {
    if (null_draws.empty()) throw ArgumentError("size_corrected_critical: no null draws");
    for (double v : null_draws) {
        if (std::isnan(v)) throw ArgumentError("size_corrected_critical: NaN draw");
    }
    std::sort(null_draws.begin(), null_draws.end());
    return order_statistic_quantile(null_draws, alpha);
}

}  // namespace mrgmm
