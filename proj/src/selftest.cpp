#include "mrgmm/selftest.hpp"

#include "mrgmm/bootstrap.hpp"
#include "mrgmm/estimate.hpp"
#include "mrgmm/experiments.hpp"
#include "mrgmm/models.hpp"
#include "mrgmm/rng.hpp"
#include "mrgmm/variance.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mrgmm {

namespace {

SelfCheck make(std::string name, double value, double tol) {
    return {std::move(name), value, tol, value <= tol};
}

Dataset normal_data(std::size_t n, std::size_t d, std::uint64_t seed) {
    rng::KeyedStream s(seed, 0, rng::kDataStream);
    RowMatrix x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = s.normal_pair()[0];
    }
    return Dataset(std::move(x));
}

double derivative_error(const MomentModel& model, const Dataset& data, const Vector& theta) {
    const DerivativeReport r = check_derivatives(model, data, theta, 1e-5, 1e-6);
    return std::max(r.jacobian_error, r.second_error);
}

// Argmin over z in the sample of |#{v <= z}/B - (1 - alpha)|, smallest z.
double brute_quantile(const std::vector<double>& v, double alpha) {
    double best = std::numeric_limits<double>::infinity();
    double best_gap = std::numeric_limits<double>::infinity();
    for (double z : v) {
        const auto count = std::count_if(v.begin(), v.end(), [z](double w) { return w <= z; });
        const double gap = std::abs(static_cast<double>(count) / static_cast<double>(v.size()) - (1.0 - alpha));
        if (gap < best_gap - 1e-12 || (std::abs(gap - best_gap) <= 1e-12 && z < best)) {
            best_gap = gap;
            best = z;
        }
    }
    return best;
}

double influence_mean_error(const MomentModel& model, const Dataset& data, const GmmFit& fit) {
    const auto terms = weight_influence_terms(fit.weight, model, data);
    const auto d = static_cast<Eigen::Index>(model.moment_dim());
    Matrix sum = Matrix::Zero(d, d);
    double scale = 0.0;
    for (const auto& t : terms) {
        sum += t;
        scale = std::max(scale, t.cwiseAbs().maxCoeff());
    }
    return (sum / static_cast<double>(terms.size())).cwiseAbs().maxCoeff() / std::max(scale, 1e-300);
}

}  // namespace

std::vector<SelfCheck> run_selftest(std::uint64_t seed) {
    std::vector<SelfCheck> out;

    // Analytic derivatives against central differences.
    {
        const Dataset d3 = normal_data(200, 3, seed);
        models::MeanModel mean(3);
        out.push_back(make("derivatives:mean", derivative_error(mean, d3, Vector::Constant(3, 0.2)), 1e-6));

        rng::KeyedStream s1(seed, 1, rng::kDataStream);
        const Dataset e1 = experiments::simulate_example1({200, 0.5, 1.5, -0.3}, s1);
        models::CombinedDataModel comb;
        out.push_back(make("derivatives:example1", derivative_error(comb, e1, Vector::Constant(1, 0.1)), 1e-6));

        rng::KeyedStream s2(seed, 2, rng::kDataStream);
        experiments::Example2Spec spec2;
        spec2.delta = 0.5;
        const Dataset e2 = experiments::simulate_example2(spec2, s2);
        models::LinearIvModel liv(1, 2);
        out.push_back(make("derivatives:linear-iv", derivative_error(liv, e2, Vector::Constant(1, 0.3)), 1e-6));
        models::ExponentialIvModel eiv(1, 2);
        // Scale the regressor down so exp(x b) stays moderate.
        RowMatrix scaled = e2.observations();
        scaled.col(1) *= 0.2;
        out.push_back(make("derivatives:exp-iv",
                           derivative_error(eiv, Dataset(scaled), Vector::Constant(1, 0.3)), 1e-6));
    }

    // Quantile rule against brute force on small tied samples.
    {
        rng::KeyedStream s(seed, 3, rng::kDataStream);
        std::size_t mismatches = 0;
        for (int c = 0; c < 1000; ++c) {
            const std::size_t B = 1 + s.index(50);
            std::vector<double> v(B);
            for (auto& x : v) x = static_cast<double>(s.index(12)) * 0.25;
            const double alpha = 0.01 + 0.98 * s.uniform();
            std::vector<double> sorted = v;
            std::sort(sorted.begin(), sorted.end());
            if (order_statistic_quantile(sorted, alpha) != brute_quantile(v, alpha)) ++mismatches;
        }
        out.push_back(make("quantile-brute-force", static_cast<double>(mismatches), 0.0));
    }

    // Weight influence terms average to zero.
    {
        rng::KeyedStream s1(seed, 4, rng::kDataStream);
        const Dataset e1 = experiments::simulate_example1({500, 0.5, 1.5, -0.6}, s1);
        models::CombinedDataModel comb;
        out.push_back(make("weight-influence-mean-zero:two-step", influence_mean_error(comb, e1, two_step(comb, e1)),
                           1e-12));
        rng::KeyedStream s2(seed, 5, rng::kDataStream);
        experiments::Example2Spec spec2;
        spec2.n = 500;
        spec2.delta = 0.5;
        const Dataset e2 = experiments::simulate_example2(spec2, s2);
        models::LinearIvModel liv(1, 2);
        const GmmFit fit = one_step(liv, e2, WeightRecipe::per_obs_outer(column_features(2, 2), "2sls"));
        out.push_back(make("weight-influence-mean-zero:2sls", influence_mean_error(liv, e2, fit), 1e-12));
    }

    // Just-identified: robust and conventional variances coincide.
    {
        const Dataset d2 = normal_data(300, 2, seed + 1);
        models::MeanModel mean(2);
        const GmmFit fit = one_step(mean, d2, WeightRecipe::identity());
        const Matrix c = sigma_conventional(mean, d2, fit).sigma;
        const Matrix r = sigma_mr(mean, d2, fit).sigma;
        out.push_back(make("just-identified-equivalence", (r - c).norm() / c.norm(), 1e-10));
    }

    // EL probabilities satisfy the moment condition.
    {
        rng::KeyedStream s1(seed, 6, rng::kDataStream);
        const Dataset e1 = experiments::simulate_example1({200, 0.5, 1.5, 0.0}, s1);
        models::CombinedDataModel comb;
        const GmmFit fit = two_step(comb, e1);
        const Matrix g = moment_rows(comb, e1, fit.theta);
        const ElWeights w = el_probabilities_from_moments(g);
        const double err = w.converged ? (g.transpose() * w.p).lpNorm<Eigen::Infinity>()
                                       : std::numeric_limits<double>::infinity();
        out.push_back(make("el-feasibility", err, 1e-8));
    }
    return out;
}

}  // namespace mrgmm
