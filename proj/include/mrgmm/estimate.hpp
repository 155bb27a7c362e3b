#pragma once

// GMM criterion, weight-matrix recipes, the Newton minimizer and the one-step
// and two-step estimators.

#include "mrgmm/errors.hpp"
#include "mrgmm/model.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mrgmm {

// Writes the per-observation feature vector f_i (length L_g) whose outer
// product f_i f_i' averages to the inverse weight matrix.
using FeatureFn = std::function<void(std::span<const double> x, std::span<double> f)>;

// Instrument columns [offset, offset + count) of an observation.
FeatureFn column_features(std::size_t offset, std::size_t count);

struct WeightRecipe {
    enum class Kind { identity, fixed, centered_moment_cov, per_obs_outer };

    Kind kind = Kind::identity;
    Matrix fixed;        // Kind::fixed
    Vector anchor;       // Kind::centered_moment_cov: theta at which g is centered
    FeatureFn features;  // Kind::per_obs_outer
    std::string label = "identity";

    static WeightRecipe identity();
    static WeightRecipe fixed_matrix(Matrix w);
    static WeightRecipe centered(Vector anchor);
    static WeightRecipe per_obs_outer(FeatureFn f, std::string label);

    // Random recipes depend on the sample and contribute influence terms to
    // the robust variance.
    bool random() const {
        return kind == Kind::centered_moment_cov || kind == Kind::per_obs_outer;
    }
};

// A weight matrix realized on a particular sample.
struct RealizedWeight {
    Matrix W;            // symmetric positive definite, L_g x L_g
    Matrix inverse;      // W^{-1} as the sample average it was built from (random recipes)
    Vector anchor_mean;  // g_n(anchor) for centered recipes
    WeightRecipe recipe;
};

RealizedWeight realize_weight(const WeightRecipe& recipe, const MomentModel& model,
                              const Dataset& data);

// Writes the vector v_i with w_i = v_i v_i': g_i - g_n at the anchor for
// centered recipes, f_i for per-observation recipes.
void weight_feature(const RealizedWeight& weight, const MomentModel& model, std::span<const double> x,
                    std::span<double> out);

// Writes w_i, the observation-i term whose sample mean is `weight.inverse`:
// (g_i - g_n)(g_i - g_n)' at the anchor, or f_i f_i'. `scratch` needs L_g
// doubles.
void weight_outer_term(const RealizedWeight& weight, const MomentModel& model,
                       std::span<const double> x, std::span<double> scratch, Matrix& out);

// W_i = -W (w_i - W^{-1}) W for every observation. Empty for fixed recipes.
std::vector<Matrix> weight_influence_terms(const RealizedWeight& weight, const MomentModel& model,
                                           const Dataset& data);

// J_n(theta, W) = g_n(theta)' W g_n(theta).
double criterion(const MomentModel& model, const Dataset& data, const Vector& theta,
                 const Matrix& W);

// (n^{-1} sum (g_i - g_n)(g_i - g_n)')^{-1} at theta. Throws
// SingularMatrixError when the condition number exceeds 1e12.
Matrix centered_weight(const MomentModel& model, const Dataset& data, const Vector& theta);

struct OptimizerOptions {
    std::vector<Vector> starts;  // empty: deterministic grid over the domain
    double tol = 1e-10;          // on ||grad J_n||_inf
    int max_iter = 200;
    int grid_starts = 5;
};

struct GmmFit {
    Vector theta;
    int step = 1;
    RealizedWeight weight;
    double criterion = 0.0;
    bool converged = false;
    double gradient_norm = 0.0;
    int iterations = 0;
    // Largest sup-norm distance between converged starts that reached the
    // minimal criterion and the reported minimizer; a nonzero value flags
    // multiple local minima.
    double start_disagreement = 0.0;
    std::shared_ptr<const GmmFit> first_step;  // present when step == 2
};

class NonConvergenceError : public Error {
public:
    NonConvergenceError(const std::string& what, GmmFit best)
        : Error(what), best_(std::move(best)) {}
    const GmmFit& best() const noexcept { return best_; }

private:
    GmmFit best_;
};

// Deterministic start points used when OptimizerOptions::starts is empty.
std::vector<Vector> default_starts(const Box& domain, int count);

// (v' (x) I) G2 contracted with the column-major vec layout:
// result(k, l) = sum_a v_a d2 g_a / dtheta_k dtheta_l.
Matrix contract_second(const Matrix& G2, const Vector& v, std::size_t moment_dim);

// Newton minimization of J_n(theta, W) from every start; the best converged
// run wins (lowest criterion, then smallest ||theta||, then lowest start
// index).
GmmFit minimize_criterion(const MomentModel& model, const Dataset& data, const RealizedWeight& weight,
                          const OptimizerOptions& opts = {});
GmmFit minimize_criterion(const MomentModel& model, const Dataset& data, const Matrix& W,
                          const OptimizerOptions& opts = {});

GmmFit one_step(const MomentModel& model, const Dataset& data, const WeightRecipe& recipe,
                const OptimizerOptions& opts = {});

// Weight for the second step is centered_weight at the first-step estimate.
GmmFit two_step(const MomentModel& model, const Dataset& data, const OptimizerOptions& opts = {},
                const WeightRecipe& first_recipe = WeightRecipe::identity());

// Re-runs the pipeline that produced `original` on new data, warm-starting
// each stage at the original estimates and falling back to the default
// multi-start if the warm start fails. Used by the bootstrap.
GmmFit refit_like(const GmmFit& original, const MomentModel& model, const Dataset& data,
                  const OptimizerOptions& opts = {});

}  // namespace mrgmm
