#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <string>

namespace mrgmm {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

namespace linalg {

// Relative eigenvalue cutoff below which a symmetric matrix is treated as
// singular.
inline constexpr double kEigenCutoff = 1e-12;

// Condition number max|λ|/min|λ| of a symmetric matrix (infinity when a zero
// eigenvalue is present).
double symmetric_condition(const Matrix& a);

// Inverse of a symmetric matrix through its eigendecomposition. Throws
// SingularMatrixError naming `what` when min|λ| <= cutoff * max|λ|.
Matrix symmetric_inverse(const Matrix& a, const std::string& what,
                         double cutoff = kEigenCutoff);

// Same, but also requires every eigenvalue to be strictly positive.
Matrix spd_inverse(const Matrix& a, const std::string& what,
                   double cutoff = kEigenCutoff);

inline Matrix symmetrize(const Matrix& a) { return 0.5 * (a + a.transpose()); }

// max |a_ij - a_ji| relative to max |a_ij|.
double asymmetry(const Matrix& a);

// Packed upper triangle of v v' (column by column), m (m + 1) / 2 entries.
inline std::size_t packed_size(std::size_t m) { return m * (m + 1) / 2; }

inline void pack_outer(const double* v, std::size_t m, double* out) {
    std::size_t k = 0;
    for (std::size_t c = 0; c < m; ++c) {
        for (std::size_t r = 0; r <= c; ++r) out[k++] = v[r] * v[c];
    }
}

// Symmetric m x m matrix from packed sums, each entry multiplied by `scale`.
Matrix unpack_symmetric(const double* packed, std::size_t m, double scale);

}  // namespace linalg
}  // namespace mrgmm
