#pragma once

// Nonparametric iid bootstrap: index resampling, empirical-likelihood
// probabilities and the three percentile-t distributions (misspecification
// robust, recentered, EL-weighted).

#include "mrgmm/estimate.hpp"
#include "mrgmm/model.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace mrgmm {

struct ResamplePlan {
    std::size_t B = 999;
    std::uint64_t seed = 0;
    std::uint32_t stream_id = 0;  // replication index
    int threads = 0;              // draw parallelism; results do not depend on it
};

// n iid uniform indices for draw b, a pure function of (seed, stream_id, b).
std::vector<std::size_t> resample_indices(std::size_t n, const ResamplePlan& plan, std::size_t b);

// n iid indices drawn with probabilities p (which must sum to one).
std::vector<std::size_t> resample_indices_weighted(std::span<const double> p, const ResamplePlan& plan,
                                                   std::size_t b);

enum class Scheme { MR, HH, BN };

std::string to_string(Scheme scheme);

struct TStatDistribution {
    std::vector<double> abs_t;  // sorted |T*| over the successful draws
    std::size_t failures = 0;   // discarded draws
    Scheme scheme = Scheme::MR;
    std::size_t coordinate = 0;
    bool degenerate = false;    // EL weights unavailable: no quantile exists
    std::size_t B = 0;
};

struct ElWeights {
    Vector p;
    Vector lambda;
    bool converged = false;
    int iterations = 0;
};

// EL probabilities p_i = 1 / (n (1 + lambda'g_i)) where lambda solves
// sum g_i / (1 + lambda'g_i) = 0. Non-convergence is reported, not thrown.
ElWeights el_probabilities(const MomentModel& model, const Dataset& data, const Vector& theta);
ElWeights el_probabilities_from_moments(const Matrix& g_rows);

// Fraction of failed draws above which a bootstrap is declared degenerate.
inline constexpr double kFailureBudget = 0.2;

TStatDistribution mr_bootstrap_t(const MomentModel& model, const Dataset& data, const GmmFit& fit,
                                 const ResamplePlan& plan, std::size_t k);

struct HhBootstrap {
    TStatDistribution t;
    std::vector<double> j_stats;  // n J_n* per successful draw (step-2 fits only)
};

// Recentered bootstrap: moment g - g_n(theta-hat of the fit's own step),
// studentized by the conventional variance of the recentered moments.
HhBootstrap hh_bootstrap(const MomentModel& model, const Dataset& data, const GmmFit& fit,
                         const ResamplePlan& plan, std::size_t k);
TStatDistribution hh_bootstrap_t(const MomentModel& model, const Dataset& data, const GmmFit& fit,
                                 const ResamplePlan& plan, std::size_t k);

TStatDistribution bn_bootstrap_t(const MomentModel& model, const Dataset& data, const GmmFit& fit,
                                 const ElWeights& weights, const ResamplePlan& plan, std::size_t k);

// Order statistic z minimizing |#{v <= z}/B - (1 - alpha)|; the smallest
// such value when several tie. `sorted` must be nondecreasing.
double order_statistic_quantile(std::span<const double> sorted, double alpha);

double bootstrap_quantile(const TStatDistribution& dist, double alpha);

}  // namespace mrgmm
