#include "mrgmm/bootstrap.hpp"

#include "mrgmm/errors.hpp"
#include "mrgmm/kernels.hpp"
#include "mrgmm/rng.hpp"
#include "mrgmm/variance.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mrgmm {

namespace {

void check_plan(const ResamplePlan& plan, std::size_t b) {
    if (plan.B == 0) throw ArgumentError("resample plan needs B >= 1");
    if (plan.B > rng::kWeightedBit) throw ArgumentError("resample plan: B too large");
    if (b >= plan.B) throw ArgumentError("bootstrap draw index out of range");
}

}  // namespace

std::vector<std::size_t> resample_indices(std::size_t n, const ResamplePlan& plan, std::size_t b) {
    check_plan(plan, b);
    rng::KeyedStream stream(plan.seed, plan.stream_id, static_cast<std::uint32_t>(b));
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) i = stream.index(n);
    return idx;
}

std::vector<std::size_t> resample_indices_weighted(std::span<const double> p, const ResamplePlan& plan,
                                                   std::size_t b) {
    check_plan(plan, b);
    const std::size_t n = p.size();
    if (n == 0) throw ArgumentError("weighted resampling needs probabilities");
    std::vector<double> cum(n);
    kernels::ScalarSum acc;
    for (std::size_t i = 0; i < n; ++i) {
        if (!(p[i] >= 0.0)) throw ArgumentError("weighted resampling: negative probability");
        acc.add(p[i]);
        cum[i] = acc.value();
    }
    const double total = cum.back();
    rng::KeyedStream stream(plan.seed, plan.stream_id, rng::kWeightedBit | static_cast<std::uint32_t>(b));
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) {
        const double u = stream.uniform() * total;
        const auto it = std::upper_bound(cum.begin(), cum.end(), u);
        i = std::min(static_cast<std::size_t>(it - cum.begin()), n - 1);
    }
    return idx;
}

std::string to_string(Scheme scheme) {
    switch (scheme) {
        case Scheme::MR: return "MR";
        case Scheme::HH: return "HH";
        case Scheme::BN: return "BN";
    }
    return "?";
}

ElWeights el_probabilities(const MomentModel& model, const Dataset& data, const Vector& theta) {
    return el_probabilities_from_moments(moment_rows(model, data, theta));
}

ElWeights el_probabilities_from_moments(const Matrix& g_rows) {
    const auto n = g_rows.rows();
    const auto lg = g_rows.cols();
    const double nd = static_cast<double>(n);
    const double floor = 1.0 / nd;
    ElWeights out;
    out.lambda = Vector::Zero(lg);
    out.p = Vector::Constant(n, 1.0 / nd);
    if (n == 0) return out;

    auto objective = [&](const Vector& lam, double& value) {
        const Vector d = Vector::Ones(n) + g_rows * lam;
        if ((d.array() <= floor).any() && n > 1) return false;
        if ((d.array() <= 0.0).any()) return false;
        value = -d.array().log().mean();
        return true;
    };

    auto gradient_norm = [&](const Vector& lam) {
        const Vector d = Vector::Ones(n) + g_rows * lam;
        return ((g_rows.transpose() * d.cwiseInverse()) / nd).lpNorm<Eigen::Infinity>();
    };

    Vector lam = Vector::Zero(lg);
    double F = 0.0;
    bool converged = false;
    int it = 0;
    for (; it <= 100; ++it) {
        const Vector d = Vector::Ones(n) + g_rows * lam;
        const Vector inv = d.cwiseInverse();
        const Vector grad = -(g_rows.transpose() * inv) / nd;
        if (grad.lpNorm<Eigen::Infinity>() < 1e-10) {
            converged = true;
            break;
        }
        if (it == 100) break;
        const Matrix scaled = inv.asDiagonal() * g_rows;
        const Matrix hess = scaled.transpose() * scaled / nd;
        Eigen::LDLT<Matrix> ldlt(hess);
        if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) break;
        const Vector step = -ldlt.solve(grad);
        if (!step.allFinite()) break;
        const double slope = grad.dot(step);
        bool accepted = false;
        if (-slope <= 1e-14 * (1.0 + std::abs(F))) {
            // The predicted decrease is below the rounding of F; judge the
            // full step by the gradient instead.
            const Vector trial = lam + step;
            double Ft = 0.0;
            if (objective(trial, Ft) && gradient_norm(trial) < grad.lpNorm<Eigen::Infinity>()) {
                lam = trial;
                F = Ft;
                continue;
            }
            break;
        }
        double t = 1.0;
        for (int ls = 0; ls < 60; ++ls, t *= 0.5) {
            const Vector trial = lam + t * step;
            double Ft = 0.0;
            if (objective(trial, Ft) && Ft <= F + 1e-4 * t * slope) {
                lam = trial;
                F = Ft;
                accepted = true;
                break;
            }
        }
        if (!accepted) break;
    }
    out.iterations = it;
    out.lambda = lam;
    if (!converged) return out;

    const Vector d = Vector::Ones(n) + g_rows * lam;
    Vector p = (nd * d).cwiseInverse();
    kernels::ScalarSum total;
    for (Eigen::Index i = 0; i < n; ++i) total.add(p[i]);
    // A runaway multiplier (zero outside the convex hull) drives the gradient
    // to zero while the probabilities stop summing to one.
    if (!(std::abs(total.value() - 1.0) <= 1e-6) || !((p.array() > 0.0).all())) return out;
    p /= total.value();
    if ((g_rows.transpose() * p).lpNorm<Eigen::Infinity>() > 1e-8) return out;
    out.p = p;
    out.converged = true;
    return out;
}

namespace {

struct DrawOutcome {
    double abs_t;
    double j;
};

template <class Draw>
TStatDistribution run_draws(const ResamplePlan& plan, Scheme scheme, std::size_t k, Draw&& draw,
                            std::vector<double>* j_stats) {
    if (plan.B == 0) throw ArgumentError("resample plan needs B >= 1");
    const double nan = std::numeric_limits<double>::quiet_NaN();
    std::vector<DrawOutcome> outcomes(plan.B, DrawOutcome{nan, nan});
    kernels::parallel::for_each_index(
        plan.B,
        [&](std::size_t b) {
            try {
                outcomes[b] = draw(b);
            } catch (const Error&) {
                // counted below as a failed draw
            }
        },
        plan.threads);

    TStatDistribution dist;
    dist.scheme = scheme;
    dist.coordinate = k;
    dist.B = plan.B;
    dist.abs_t.reserve(plan.B);
    for (const auto& o : outcomes) {
        if (std::isfinite(o.abs_t)) {
            dist.abs_t.push_back(o.abs_t);
            if (j_stats != nullptr && std::isfinite(o.j)) j_stats->push_back(o.j);
        } else {
            ++dist.failures;
        }
    }
    if (static_cast<double>(dist.failures) > kFailureBudget * static_cast<double>(plan.B)) {
        throw BootstrapDegenerateError(to_string(scheme) + " bootstrap: " + std::to_string(dist.failures) +
                                       " of " + std::to_string(plan.B) + " draws failed");
    }
    std::sort(dist.abs_t.begin(), dist.abs_t.end());
    if (j_stats != nullptr) std::sort(j_stats->begin(), j_stats->end());
    return dist;
}

void check_fit(const MomentModel& model, const GmmFit& fit, std::size_t k) {
    if (!fit.converged) throw ContractError("bootstrap: fit did not converge");
    if (k >= model.param_dim()) throw ArgumentError("bootstrap: coordinate out of range");
}

double studentized(const GmmFit& star, const GmmFit& fit, const VarianceEstimate& v, std::size_t k) {
    const auto kk = static_cast<Eigen::Index>(k);
    const double s = v.sigma(kk, kk);
    if (!(s > 0.0)) return std::numeric_limits<double>::quiet_NaN();
    return std::abs(star.theta[kk] - fit.theta[kk]) / std::sqrt(s / static_cast<double>(v.n));
}

}  // namespace

TStatDistribution mr_bootstrap_t(const MomentModel& model, const Dataset& data, const GmmFit& fit,
                                 const ResamplePlan& plan, std::size_t k) {
    check_fit(model, fit, k);
    const std::size_t n = data.size();
    auto draw = [&](std::size_t b) {
        const Dataset star = data.resample(resample_indices(n, plan, b));
        const GmmFit f = refit_like(fit, model, star);
        const VarianceEstimate v = sigma_mr(model, star, f);
        return DrawOutcome{studentized(f, fit, v, k), 0.0};
    };
    return run_draws(plan, Scheme::MR, k, draw, nullptr);
}

HhBootstrap hh_bootstrap(const MomentModel& model, const Dataset& data, const GmmFit& fit,
                         const ResamplePlan& plan, std::size_t k) {
    check_fit(model, fit, k);
    const std::size_t n = data.size();
    const MomentStats at_fit = eval_moment_means(model, data, fit.theta, DerivativeOrder::value);
    const ShiftedModel recentered(model, at_fit.g);
    const bool with_j = fit.step == 2;
    auto draw = [&](std::size_t b) {
        const Dataset star = data.resample(resample_indices(n, plan, b));
        const GmmFit f = refit_like(fit, recentered, star);
        const VarianceEstimate v = sigma_conventional(recentered, star, f);
        return DrawOutcome{studentized(f, fit, v, k),
                           with_j ? static_cast<double>(n) * f.criterion : 0.0};
    };
    HhBootstrap out;
    out.t = run_draws(plan, Scheme::HH, k, draw, with_j ? &out.j_stats : nullptr);
    return out;
}

TStatDistribution hh_bootstrap_t(const MomentModel& model, const Dataset& data, const GmmFit& fit,
                                 const ResamplePlan& plan, std::size_t k) {
    return hh_bootstrap(model, data, fit, plan, k).t;
}

TStatDistribution bn_bootstrap_t(const MomentModel& model, const Dataset& data, const GmmFit& fit,
                                 const ElWeights& weights, const ResamplePlan& plan, std::size_t k) {
    check_fit(model, fit, k);
    if (!weights.converged) {
        TStatDistribution dist;
        dist.scheme = Scheme::BN;
        dist.coordinate = k;
        dist.B = plan.B;
        dist.failures = plan.B;
        dist.degenerate = true;
        return dist;
    }
    const std::size_t n = data.size();
    if (static_cast<std::size_t>(weights.p.size()) != n) {
        throw ArgumentError("bn_bootstrap_t: EL weights do not match the sample");
    }
    const std::span<const double> p(weights.p.data(), n);
    auto draw = [&](std::size_t b) {
        const Dataset star = data.resample(resample_indices_weighted(p, plan, b));
        const GmmFit f = refit_like(fit, model, star);
        const VarianceEstimate v = sigma_conventional(model, star, f);
        return DrawOutcome{studentized(f, fit, v, k), 0.0};
    };
    return run_draws(plan, Scheme::BN, k, draw, nullptr);
}

double order_statistic_quantile(std::span<const double> sorted, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ArgumentError("quantile level must lie in (0, 1)");
    if (sorted.empty()) throw QuantileUnavailableError("quantile of an empty sample");
    const double target = 1.0 - alpha;
    const double total = static_cast<double>(sorted.size());
    double best = sorted.front();
    double best_gap = std::numeric_limits<double>::infinity();
    std::size_t i = 0;
    while (i < sorted.size()) {
        std::size_t j = i;
        while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
        const double gap = std::abs(static_cast<double>(j + 1) / total - target);
        if (gap < best_gap - 1e-12) {
            best_gap = gap;
            best = sorted[i];
        }
        i = j + 1;
    }
    return best;
}

double bootstrap_quantile(const TStatDistribution& dist, double alpha) {
    if (dist.degenerate) {
        throw QuantileUnavailableError(to_string(dist.scheme) + " bootstrap distribution is degenerate");
    }
    return order_statistic_quantile(dist.abs_t, alpha);
}

}  // namespace mrgmm
