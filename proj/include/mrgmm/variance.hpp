#pragma once

// Conventional and misspecification-robust (Hall-Inoue) sandwich covariance
// estimators for one-step and two-step GMM fits.
//
// For a fit with weight W at theta-hat, write g_i, G_i for the observation-i
// moment and Jacobian and g_n, G_n for their means. The robust meat stacks
//
//   nonrandom W :  s_i = ( g_i - g_n ; (G_i - G_n)' W g_n )
//   random W    :  s_i = ( g_i - g_n ; (G_i - G_n)' W g_n ; W_i g_n )
//
// with W_i = -W (w_i - W^{-1}) W, where w_i is the observation's term in the
// sample average that produced W^{-1}. Then Omega_n = n^{-1} sum s_i s_i',
// V_n = A Omega_n A' with A = [G_n'W  I] or [G_n'W  I  G_n'], and
// Sigma_MR = H^{-1} V_n H^{-1}' with H = G_n'W G_n + (g_n'W (x) I) G2_n.
// With W = I the nonrandom case is the textbook one-step formula.

#include "mrgmm/estimate.hpp"
#include "mrgmm/model.hpp"

#include <string>
#include <vector>

namespace mrgmm {

enum class VarianceKind { conventional, robust };

std::string to_string(VarianceKind kind);

struct VarianceEstimate {
    Matrix sigma;  // asymptotic covariance of sqrt(n)(theta-hat - theta_0)
    VarianceKind kind = VarianceKind::robust;
    int step = 1;
    std::size_t n = 0;

    // sqrt(sigma_kk / n)
    double standard_error(std::size_t k) const;
};

struct SandwichParts {
    Matrix H;
    Matrix Omega;
    Matrix V;
};

Matrix hessian_H(const MomentModel& model, const Dataset& data, const GmmFit& fit);

// Robust meat input Omega_n. When `influence` is non-null it receives the
// per-observation W_i (random weights only).
Matrix omega_robust(const MomentModel& model, const Dataset& data, const GmmFit& fit,
                    std::vector<Matrix>* influence = nullptr);

SandwichParts sandwich_parts(const MomentModel& model, const Dataset& data, const GmmFit& fit);

VarianceEstimate sigma_mr(const MomentModel& model, const Dataset& data, const GmmFit& fit);

// Sigma_C(1) = (G'WG)^{-1} G'W Omega_C W G (G'WG)^{-1} for one-step fits and
// Sigma_C(2) = (G' Omega_C^{-1} G)^{-1} for two-step fits, with the uncentered
// Omega_C = n^{-1} sum g_i g_i' at theta-hat.
VarianceEstimate sigma_conventional(const MomentModel& model, const Dataset& data, const GmmFit& fit);

}  // namespace mrgmm
