#include "mrgmm/linalg.hpp"

#include "mrgmm/errors.hpp"

#include <cmath>
#include <limits>

namespace mrgmm::linalg {

namespace {

Eigen::SelfAdjointEigenSolver<Matrix> eigen_of(const Matrix& a, const std::string& what) {
    if (a.rows() != a.cols() || a.rows() == 0) {
        throw ArgumentError(what + ": matrix must be square and non-empty");
    }
    if (!a.allFinite()) {
        throw EvaluationError(what + ": matrix has non-finite entries");
    }
    return Eigen::SelfAdjointEigenSolver<Matrix>(symmetrize(a));
}

double condition_of(const Vector& eig) {
    const double hi = eig.cwiseAbs().maxCoeff();
    const double lo = eig.cwiseAbs().minCoeff();
    if (lo == 0.0) return std::numeric_limits<double>::infinity();
    return hi / lo;
}

}  // namespace

double symmetric_condition(const Matrix& a) {
    return condition_of(eigen_of(a, "condition").eigenvalues());
}

Matrix symmetric_inverse(const Matrix& a, const std::string& what, double cutoff) {
    const auto es = eigen_of(a, what);
    const Vector& eig = es.eigenvalues();
    const double hi = eig.cwiseAbs().maxCoeff();
    const double lo = eig.cwiseAbs().minCoeff();
    if (!(hi > 0.0) || lo <= cutoff * hi) {
        throw SingularMatrixError(what + " is singular", condition_of(eig));
    }
    const Matrix& q = es.eigenvectors();
    return symmetrize(q * eig.cwiseInverse().asDiagonal() * q.transpose());
}

Matrix spd_inverse(const Matrix& a, const std::string& what, double cutoff) {
    const auto es = eigen_of(a, what);
    const Vector& eig = es.eigenvalues();
    const double hi = eig.cwiseAbs().maxCoeff();
    if (!(hi > 0.0) || eig.minCoeff() <= cutoff * hi) {
        throw SingularMatrixError(what + " is not positive definite", condition_of(eig));
    }
    const Matrix& q = es.eigenvectors();
    return symmetrize(q * eig.cwiseInverse().asDiagonal() * q.transpose());
}

double asymmetry(const Matrix& a) {
    if (a.rows() != a.cols()) return std::numeric_limits<double>::infinity();
    const double scale = a.cwiseAbs().maxCoeff();
    if (scale == 0.0) return 0.0;
    return (a - a.transpose()).cwiseAbs().maxCoeff() / scale;
}

Matrix unpack_symmetric(const double* packed, std::size_t m, double scale) {
    const auto d = static_cast<Eigen::Index>(m);
    Matrix out(d, d);
    std::size_t k = 0;
    for (Eigen::Index c = 0; c < d; ++c) {
        for (Eigen::Index r = 0; r <= c; ++r) {
            out(r, c) = packed[k++] * scale;
            out(c, r) = out(r, c);
        }
    }
    return out;
}

}  // namespace mrgmm::linalg
