#include "mrgmm/variance.hpp"

#include "mrgmm/errors.hpp"
#include "mrgmm/kernels.hpp"

#include <cmath>

namespace mrgmm {

std::string to_string(VarianceKind kind) {
    return kind == VarianceKind::robust ? "misspecification-robust" : "conventional";
}

double VarianceEstimate::standard_error(std::size_t k) const {
    const auto kk = static_cast<Eigen::Index>(k);
    return std::sqrt(sigma(kk, kk) / static_cast<double>(n));
}

namespace {

void require_converged(const GmmFit& fit, const char* where) {
    if (!fit.converged) throw ContractError(std::string(where) + ": fit did not converge");
}

Matrix bread(const MomentStats& s, const Matrix& W, std::size_t lg) {
    return linalg::symmetrize(s.G.transpose() * W * s.G + contract_second(s.G2, W * s.g, lg));
}

}  // namespace

Matrix hessian_H(const MomentModel& model, const Dataset& data, const GmmFit& fit) {
    require_converged(fit, "hessian_H");
    const MomentStats s = eval_moment_means(model, data, fit.theta, DerivativeOrder::second);
    Matrix H = bread(s, fit.weight.W, model.moment_dim());
    if (!H.allFinite()) throw EvaluationError("hessian_H: non-finite entries");
    return H;
}

namespace {

Matrix omega_from_stats(const MomentModel& model, const Dataset& data, const GmmFit& fit,
                        const MomentStats& s, std::vector<Matrix>* influence) {
    const std::size_t lg = model.moment_dim();
    const std::size_t lt = model.param_dim();
    const RealizedWeight& w = fit.weight;
    const bool random = w.recipe.random();
    const std::size_t m = random ? 2 * lg + lt : lg + lt;

    const Vector u = w.W * s.g;  // W g_n
    const Vector Su = random ? Vector(w.inverse * u) : Vector();
    const std::span<const double> theta(fit.theta.data(), lt);

    // scratch: g_i | vec(G_i) | weight feature | s_i
    const std::size_t scratch = lg + lg * lt + lg + m;
    auto fill = [&](std::size_t i, std::span<double> out, std::span<double> sc) {
        const auto x = data.row(i);
        double* gi = sc.data();
        double* Gi = gi + lg;
        double* fi = Gi + lg * lt;
        double* si = fi + lg;
        model.moment(x, theta, std::span<double>(gi, lg));
        model.jacobian(x, theta, std::span<double>(Gi, lg * lt));

        for (std::size_t a = 0; a < lg; ++a) si[a] = gi[a] - s.g[static_cast<Eigen::Index>(a)];
        for (std::size_t k = 0; k < lt; ++k) {
            double acc = 0.0;
            for (std::size_t a = 0; a < lg; ++a) {
                acc += (Gi[a + lg * k] - s.G(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(k))) *
                       u[static_cast<Eigen::Index>(a)];
            }
            si[lg + k] = acc;
        }
        if (random) {
            // W_i g_n = -W (v_i (v_i'u) - S u) with w_i = v_i v_i'.
            weight_feature(w, model, x, std::span<double>(fi, lg));
            double fu = 0.0;
            for (std::size_t a = 0; a < lg; ++a) fu += fi[a] * u[static_cast<Eigen::Index>(a)];
            for (std::size_t a = 0; a < lg; ++a) fi[a] = fi[a] * fu - Su[static_cast<Eigen::Index>(a)];
            for (std::size_t a = 0; a < lg; ++a) {
                double acc = 0.0;
                for (std::size_t b = 0; b < lg; ++b) {
                    acc += w.W(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) * fi[b];
                }
                si[lg + lt + a] = -acc;
            }
        }
        for (std::size_t a = 0; a < m; ++a) {
            if (!std::isfinite(si[a])) throw EvaluationError("omega_robust: non-finite stack", i);
        }
        linalg::pack_outer(si, m, out.data());
    };
    const auto sums = kernels::parallel::compensated_sum(data.size(), linalg::packed_size(m), scratch, fill);
    Matrix omega = linalg::unpack_symmetric(sums.data(), m, 1.0 / static_cast<double>(data.size()));

    if (influence != nullptr) *influence = weight_influence_terms(w, model, data);
    return omega;
}

void check_omega_contract(const GmmFit& fit) {
    require_converged(fit, "omega_robust");
    if (fit.step == 2 && !fit.first_step) {
        throw ContractError("omega_robust: step-2 fit is missing its first-step anchor");
    }
}

SandwichParts parts_from_stats(const MomentModel& model, const Dataset& data, const GmmFit& fit,
                               const MomentStats& s) {
    const auto lg = static_cast<Eigen::Index>(model.moment_dim());
    const auto lt = static_cast<Eigen::Index>(model.param_dim());
    const Matrix& W = fit.weight.W;
    SandwichParts p;
    p.H = bread(s, W, model.moment_dim());
    p.Omega = omega_from_stats(model, data, fit, s, nullptr);
    const bool random = fit.weight.recipe.random();
    Matrix A(lt, random ? 2 * lg + lt : lg + lt);
    A.leftCols(lg) = s.G.transpose() * W;
    A.middleCols(lg, lt) = Matrix::Identity(lt, lt);
    if (random) A.rightCols(lg) = s.G.transpose();
    p.V = linalg::symmetrize(A * p.Omega * A.transpose());
    if (!p.H.allFinite() || !p.V.allFinite()) throw EvaluationError("sandwich: non-finite entries");
    return p;
}

}  // namespace

Matrix omega_robust(const MomentModel& model, const Dataset& data, const GmmFit& fit,
                    std::vector<Matrix>* influence) {
    check_omega_contract(fit);
    const MomentStats s = eval_moment_means(model, data, fit.theta, DerivativeOrder::jacobian);
    return omega_from_stats(model, data, fit, s, influence);
}

SandwichParts sandwich_parts(const MomentModel& model, const Dataset& data, const GmmFit& fit) {
    check_omega_contract(fit);
    const MomentStats s = eval_moment_means(model, data, fit.theta, DerivativeOrder::second);
    return parts_from_stats(model, data, fit, s);
}

VarianceEstimate sigma_mr(const MomentModel& model, const Dataset& data, const GmmFit& fit) {
    const SandwichParts p = sandwich_parts(model, data, fit);
    Matrix h_inv;
    try {
        h_inv = linalg::symmetric_inverse(p.H, "bread matrix H_n");
    } catch (const SingularMatrixError& e) {
        throw SingularMatrixError(std::string("bread singular: ") + e.what(), e.condition());
    }
    VarianceEstimate v;
    v.sigma = linalg::symmetrize(h_inv * p.V * h_inv.transpose());
    v.kind = VarianceKind::robust;
    v.step = fit.step;
    v.n = data.size();
    return v;
}

VarianceEstimate sigma_conventional(const MomentModel& model, const Dataset& data, const GmmFit& fit) {
    require_converged(fit, "sigma_conventional");
    const std::size_t lg = model.moment_dim();
    const MomentStats s = eval_moment_means(model, data, fit.theta, DerivativeOrder::jacobian);
    const std::span<const double> theta(fit.theta.data(), model.param_dim());
    const auto sums = kernels::parallel::compensated_sum(
        data.size(), linalg::packed_size(lg), lg, [&](std::size_t i, std::span<double> out, std::span<double> g) {
            model.moment(data.row(i), theta, g);
            linalg::pack_outer(g.data(), lg, out.data());
        });
    const Matrix omega_c = linalg::unpack_symmetric(sums.data(), lg, 1.0 / static_cast<double>(data.size()));

    VarianceEstimate v;
    v.kind = VarianceKind::conventional;
    v.step = fit.step;
    v.n = data.size();
    if (fit.step == 2) {
        const Matrix omega_inv = linalg::spd_inverse(omega_c, "conventional Omega_C");
        v.sigma = linalg::symmetric_inverse(s.G.transpose() * omega_inv * s.G, "G' Omega_C^{-1} G");
    } else {
        const Matrix& W = fit.weight.W;
        const Matrix a_inv = linalg::symmetric_inverse(s.G.transpose() * W * s.G, "G'WG");
        const Matrix b = s.G.transpose() * W;
        v.sigma = linalg::symmetrize(a_inv * b * omega_c * b.transpose() * a_inv);
    }
    if (!v.sigma.allFinite()) throw EvaluationError("sigma_conventional: non-finite entries");
    return v;
}

}  // namespace mrgmm
