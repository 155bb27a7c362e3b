#include "mrgmm/estimate.hpp"

#include "mrgmm/kernels.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

namespace mrgmm {

FeatureFn column_features(std::size_t offset, std::size_t count) {
    return [offset, count](std::span<const double> x, std::span<double> f) {
        for (std::size_t a = 0; a < count; ++a) f[a] = x[offset + a];
    };
}

WeightRecipe WeightRecipe::identity() { return {}; }

WeightRecipe WeightRecipe::fixed_matrix(Matrix w) {
    WeightRecipe r;
    r.kind = Kind::fixed;
    r.fixed = std::move(w);
    r.label = "fixed";
    return r;
}

WeightRecipe WeightRecipe::centered(Vector anchor) {
    WeightRecipe r;
    r.kind = Kind::centered_moment_cov;
    r.anchor = std::move(anchor);
    r.label = "centered";
    return r;
}

WeightRecipe WeightRecipe::per_obs_outer(FeatureFn f, std::string label) {
    WeightRecipe r;
    r.kind = Kind::per_obs_outer;
    r.features = std::move(f);
    r.label = std::move(label);
    return r;
}

namespace {

double quad_form(const Vector& g, const Matrix& W) { return g.dot(W * g); }

// Mean of per-observation outer products v_i v_i', where fill_v writes v_i.
template <class FillV>
Matrix mean_outer(std::size_t n, std::size_t dim, FillV fill_v) {
    const auto sums = kernels::parallel::compensated_sum(
        n, linalg::packed_size(dim), dim, [&](std::size_t i, std::span<double> out, std::span<double> v) {
            fill_v(i, v);
            linalg::pack_outer(v.data(), dim, out.data());
        });
    return linalg::unpack_symmetric(sums.data(), dim, 1.0 / static_cast<double>(n));
}

}  // namespace

RealizedWeight realize_weight(const WeightRecipe& recipe, const MomentModel& model,
                              const Dataset& data) {
    check_compatible(model, data);
    const std::size_t lg = model.moment_dim();
    const auto d = static_cast<Eigen::Index>(lg);
    RealizedWeight out;
    out.recipe = recipe;
    switch (recipe.kind) {
        case WeightRecipe::Kind::identity:
            out.W = Matrix::Identity(d, d);
            break;
        case WeightRecipe::Kind::fixed: {
            if (recipe.fixed.rows() != d || recipe.fixed.cols() != d) {
                throw ArgumentError("fixed weight matrix has wrong dimensions");
            }
            if (linalg::asymmetry(recipe.fixed) > 1e-12) {
                throw ArgumentError("fixed weight matrix is not symmetric");
            }
            linalg::spd_inverse(recipe.fixed, "fixed weight matrix");
            out.W = linalg::symmetrize(recipe.fixed);
            break;
        }
        case WeightRecipe::Kind::centered_moment_cov: {
            const Vector& anchor = recipe.anchor;
            const Vector mean = eval_moment_means(model, data, anchor, DerivativeOrder::value).g;
            const std::span<const double> t(anchor.data(), model.param_dim());
            out.inverse = mean_outer(data.size(), lg, [&](std::size_t i, std::span<double> v) {
                model.moment(data.row(i), t, v);
                for (std::size_t a = 0; a < lg; ++a) v[a] -= mean[static_cast<Eigen::Index>(a)];
            });
            out.anchor_mean = mean;
            out.W = linalg::spd_inverse(out.inverse, "centered moment covariance");
            break;
        }
        case WeightRecipe::Kind::per_obs_outer: {
            if (!recipe.features) throw ArgumentError("per-observation weight recipe has no features");
            out.inverse = mean_outer(data.size(), lg, [&](std::size_t i, std::span<double> v) {
                recipe.features(data.row(i), v);
            });
            out.W = linalg::spd_inverse(out.inverse, "per-observation weight (" + recipe.label + ")");
            break;
        }
    }
    return out;
}

void weight_feature(const RealizedWeight& weight, const MomentModel& model, std::span<const double> x,
                    std::span<double> out) {
    const std::size_t lg = model.moment_dim();
    const auto& recipe = weight.recipe;
    if (recipe.kind == WeightRecipe::Kind::centered_moment_cov) {
        model.moment(x, std::span<const double>(recipe.anchor.data(), model.param_dim()), out);
        for (std::size_t a = 0; a < lg; ++a) out[a] -= weight.anchor_mean[static_cast<Eigen::Index>(a)];
    } else if (recipe.kind == WeightRecipe::Kind::per_obs_outer) {
        recipe.features(x, out);
    } else {
        throw ContractError("weight_feature: recipe '" + recipe.label + "' is not random");
    }
}

void weight_outer_term(const RealizedWeight& weight, const MomentModel& model,
                       std::span<const double> x, std::span<double> scratch, Matrix& out) {
    weight_feature(weight, model, x, scratch);
    const Eigen::Map<const Vector> v(scratch.data(), static_cast<Eigen::Index>(model.moment_dim()));
    out.noalias() = v * v.transpose();
}

std::vector<Matrix> weight_influence_terms(const RealizedWeight& weight, const MomentModel& model,
                                           const Dataset& data) {
    std::vector<Matrix> terms;
    if (!weight.recipe.random()) return terms;
    std::vector<double> scratch(model.moment_dim());
    Matrix w;
    terms.reserve(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        weight_outer_term(weight, model, data.row(i), scratch, w);
        terms.push_back(-weight.W * (w - weight.inverse) * weight.W);
    }
    return terms;
}

double criterion(const MomentModel& model, const Dataset& data, const Vector& theta,
                 const Matrix& W) {
    const auto lg = static_cast<Eigen::Index>(model.moment_dim());
    if (W.rows() != lg || W.cols() != lg) throw ArgumentError("criterion: weight has wrong dimensions");
    if (linalg::asymmetry(W) > 1e-12) throw ArgumentError("criterion: weight matrix is not symmetric");
    const Vector g = eval_moment_means(model, data, theta, DerivativeOrder::value).g;
    return quad_form(g, W);
}

Matrix centered_weight(const MomentModel& model, const Dataset& data, const Vector& theta) {
    return realize_weight(WeightRecipe::centered(theta), model, data).W;
}

std::vector<Vector> default_starts(const Box& domain, int count) {
    static constexpr std::array<double, 9> kOffsets = {0.0, -0.5, 0.5, -1.0, 1.0,
                                                       -0.25, 0.25, -0.75, 0.75};
    const int m = std::clamp(count, 1, static_cast<int>(kOffsets.size()));
    const Vector c = domain.center();
    // The default domain is practically unbounded; keep starts at a moderate
    // scale around its center.
    const Vector scale = (0.5 * (domain.upper - domain.lower)).cwiseMin(10.0);
    std::vector<Vector> starts;
    for (int s = 0; s < m; ++s) starts.push_back(domain.clamp(c + kOffsets[static_cast<std::size_t>(s)] * scale));
    return starts;
}

Matrix contract_second(const Matrix& G2, const Vector& v, std::size_t moment_dim) {
    const auto lg = static_cast<Eigen::Index>(moment_dim);
    const Eigen::Index lt = G2.cols();
    Matrix out = Matrix::Zero(lt, lt);
    for (Eigen::Index l = 0; l < lt; ++l) {
        for (Eigen::Index k = 0; k < lt; ++k) {
            double acc = 0.0;
            for (Eigen::Index a = 0; a < lg; ++a) acc += v[a] * G2(a + lg * k, l);
            out(k, l) = acc;
        }
    }
    return out;
}

namespace {

struct NewtonRun {
    Vector theta;
    double J = std::numeric_limits<double>::infinity();
    double gradient_norm = std::numeric_limits<double>::infinity();
    bool converged = false;
    int iterations = 0;
};

// Solves (H + mu I) d = -b with the smallest ridge mu that makes the
// left-hand side positive definite.
Vector ridge_newton_direction(const Matrix& H, const Vector& b) {
    const auto n = H.rows();
    Eigen::LLT<Matrix> llt(H);
    if (llt.info() == Eigen::Success) {
        Vector d = llt.solve(-b);
        if (d.allFinite()) return d;
    }
    double mu = 1e-10 * std::max(1.0, H.diagonal().cwiseAbs().maxCoeff());
    for (int attempt = 0; attempt < 60; ++attempt, mu *= 10.0) {
        Eigen::LLT<Matrix> reg(H + mu * Matrix::Identity(n, n));
        if (reg.info() != Eigen::Success) continue;
        Vector d = reg.solve(-b);
        if (d.allFinite()) return d;
    }
    return -b;
}

NewtonRun newton(const MomentModel& model, const Dataset& data, const Matrix& W, const Vector& start,
                 const Box& box, double tol, int max_iter) {
    const std::size_t lg = model.moment_dim();
    NewtonRun run;
    run.theta = box.clamp(start);
    MomentStats s = eval_moment_means(model, data, run.theta, DerivativeOrder::second);
    run.J = quad_form(s.g, W);
    for (int it = 0;; ++it) {
        run.iterations = it;
        const Vector Wg = W * s.g;
        const Vector half_grad = s.G.transpose() * Wg;
        run.gradient_norm = 2.0 * half_grad.lpNorm<Eigen::Infinity>();
        if (!std::isfinite(run.gradient_norm) || !std::isfinite(run.J)) return run;
        if (run.gradient_norm <= tol) {
            run.converged = true;
            return run;
        }
        if (it >= max_iter) return run;
        const Matrix Ht =
            linalg::symmetrize(s.G.transpose() * W * s.G + contract_second(s.G2, Wg, lg));
        const Vector d = ridge_newton_direction(Ht, half_grad);

        bool accepted = false;
        double t = 1.0;
        for (int ls = 0; ls < 60; ++ls, t *= 0.5) {
            const Vector trial = box.clamp(run.theta + t * d);
            const Vector step = trial - run.theta;
            if (step.lpNorm<Eigen::Infinity>() == 0.0) break;
            MomentStats st = eval_moment_means(model, data, trial, DerivativeOrder::second);
            const double Jt = quad_form(st.g, W);
            if (std::isfinite(Jt) && Jt <= run.J + 1e-4 * 2.0 * half_grad.dot(step)) {
                run.theta = trial;
                run.J = Jt;
                s = std::move(st);
                accepted = true;
                break;
            }
        }
        if (!accepted) return run;
    }
}

bool better(const NewtonRun& a, const NewtonRun& b) {
    const double scale = std::max({std::abs(a.J), std::abs(b.J), 1e-300});
    if (std::abs(a.J - b.J) > 1e-12 * scale) return a.J < b.J;
    return a.theta.norm() < b.theta.norm();
}

}  // namespace

GmmFit minimize_criterion(const MomentModel& model, const Dataset& data, const RealizedWeight& weight,
                          const OptimizerOptions& opts) {
    check_compatible(model, data);
    const auto lg = static_cast<Eigen::Index>(model.moment_dim());
    if (weight.W.rows() != lg || weight.W.cols() != lg) {
        throw ArgumentError("minimize_criterion: weight has wrong dimensions");
    }
    if (linalg::asymmetry(weight.W) > 1e-12) {
        throw ArgumentError("minimize_criterion: weight matrix is not symmetric");
    }
    const Box box = model.domain();
    const std::vector<Vector> starts =
        opts.starts.empty() ? default_starts(box, opts.grid_starts) : opts.starts;

    std::vector<NewtonRun> runs;
    runs.reserve(starts.size());
    for (const auto& s : starts) {
        if (static_cast<std::size_t>(s.size()) != model.param_dim()) {
            throw ArgumentError("minimize_criterion: start has wrong length");
        }
        runs.push_back(newton(model, data, weight.W, s, box, opts.tol, opts.max_iter));
    }

    // Ordered reduction: strict improvement only, so the lowest index wins ties.
    std::ptrdiff_t best = -1;
    for (std::size_t i = 0; i < runs.size(); ++i) {
        if (!runs[i].converged) continue;
        if (best < 0 || better(runs[i], runs[static_cast<std::size_t>(best)])) {
            best = static_cast<std::ptrdiff_t>(i);
        }
    }

    GmmFit fit;
    fit.weight = weight;
    if (best < 0) {
        std::size_t fallback = 0;
        for (std::size_t i = 1; i < runs.size(); ++i) {
            if (runs[i].J < runs[fallback].J) fallback = i;
        }
        fit.theta = runs[fallback].theta;
        fit.criterion = runs[fallback].J;
        fit.gradient_norm = runs[fallback].gradient_norm;
        fit.iterations = runs[fallback].iterations;
        throw NonConvergenceError(model.name() + ": no start converged", std::move(fit));
    }
    const NewtonRun& b = runs[static_cast<std::size_t>(best)];
    fit.theta = b.theta;
    fit.criterion = b.J;
    fit.converged = true;
    fit.gradient_norm = b.gradient_norm;
    fit.iterations = b.iterations;
    for (const auto& r : runs) {
        if (r.converged && !better(b, r)) {
            fit.start_disagreement =
                std::max(fit.start_disagreement, (r.theta - b.theta).lpNorm<Eigen::Infinity>());
        }
    }
    return fit;
}

GmmFit minimize_criterion(const MomentModel& model, const Dataset& data, const Matrix& W,
                          const OptimizerOptions& opts) {
    return minimize_criterion(model, data, realize_weight(WeightRecipe::fixed_matrix(W), model, data),
                              opts);
}

GmmFit one_step(const MomentModel& model, const Dataset& data, const WeightRecipe& recipe,
                const OptimizerOptions& opts) {
    if (recipe.kind == WeightRecipe::Kind::centered_moment_cov) {
        throw ContractError("one_step: the centered weight needs a first-step anchor; use two_step");
    }
    GmmFit fit = minimize_criterion(model, data, realize_weight(recipe, model, data), opts);
    fit.step = 1;
    return fit;
}

namespace {

RealizedWeight anchored_weight(const MomentModel& model, const Dataset& data, const Vector& anchor) {
    try {
        return realize_weight(WeightRecipe::centered(anchor), model, data);
    } catch (const SingularMatrixError& e) {
        throw SingularMatrixError(std::string("first-step anchor: ") + e.what(), e.condition());
    }
}

}  // namespace

GmmFit two_step(const MomentModel& model, const Dataset& data, const OptimizerOptions& opts,
                const WeightRecipe& first_recipe) {
    auto first = std::make_shared<GmmFit>(one_step(model, data, first_recipe, opts));
    const RealizedWeight w2 = anchored_weight(model, data, first->theta);
    OptimizerOptions second = opts;
    if (second.starts.empty()) {
        second.starts = default_starts(model.domain(), opts.grid_starts);
        second.starts.insert(second.starts.begin(), first->theta);
    }
    GmmFit fit = minimize_criterion(model, data, w2, second);
    fit.step = 2;
    fit.first_step = std::move(first);
    return fit;
}

namespace {

GmmFit warm_stage(const MomentModel& model, const Dataset& data, const RealizedWeight& w,
                  const Vector& warm, const OptimizerOptions& opts) {
    OptimizerOptions o = opts;
    o.starts = {warm};
    try {
        return minimize_criterion(model, data, w, o);
    } catch (const NonConvergenceError&) {
        o.starts.clear();
        return minimize_criterion(model, data, w, o);
    }
}

}  // namespace

GmmFit refit_like(const GmmFit& original, const MomentModel& model, const Dataset& data,
                  const OptimizerOptions& opts) {
    if (original.step == 1) {
        GmmFit fit = warm_stage(model, data, realize_weight(original.weight.recipe, model, data),
                                original.theta, opts);
        fit.step = 1;
        return fit;
    }
    if (!original.first_step) throw ContractError("refit_like: step-2 fit without its first step");
    const GmmFit& f1 = *original.first_step;
    auto first = std::make_shared<GmmFit>(
        warm_stage(model, data, realize_weight(f1.weight.recipe, model, data), f1.theta, opts));
    first->step = 1;
    GmmFit fit = warm_stage(model, data, anchored_weight(model, data, first->theta), original.theta, opts);
    fit.step = 2;
    fit.first_step = std::move(first);
    return fit;
}

}  // namespace mrgmm
