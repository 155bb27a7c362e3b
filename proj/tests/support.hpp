#pragma once

// Shared generators for the property tests.

#include "mrgmm/model.hpp"
#include "mrgmm/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

namespace testing {

using mrgmm::Dataset;
using mrgmm::Matrix;
using mrgmm::RowMatrix;
using mrgmm::Vector;

// Small deterministic generator for test inputs, separate from the library
// streams so test cases do not shift when library stream tags change.
class Gen {
public:
    explicit Gen(std::uint64_t seed) : s_(seed, 0xABCDu, 0x1234u) {}

    double uniform(double lo = 0.0, double hi = 1.0) { return lo + (hi - lo) * s_.uniform(); }
    double normal() { return s_.normal_pair()[0]; }
    std::size_t index(std::size_t n) { return s_.index(n); }

    Dataset normal_data(std::size_t n, std::size_t d, double shift = 0.0) {
        RowMatrix x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = shift + normal();
        }
        return Dataset(std::move(x));
    }

    // (y, x, z1, z2) from a linear IV design with heteroskedastic errors.
    Dataset iv_data(std::size_t n, double beta) {
        RowMatrix x(static_cast<Eigen::Index>(n), 4);
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            const double z1 = normal(), z2 = normal(), u = normal();
            const double e = (0.5 * u + normal()) * (1.0 + 0.5 * std::abs(z1));
            const double w = z1 + 0.5 * z2 + u;
            x(i, 0) = beta * w + e + 0.2 * z2;
            x(i, 1) = w;
            x(i, 2) = z1;
            x(i, 3) = z2;
        }
        return Dataset(std::move(x));
    }

private:
    mrgmm::rng::KeyedStream s_;
};

inline double max_abs(const Matrix& a) { return a.cwiseAbs().maxCoeff(); }

inline double rel_diff(const Matrix& a, const Matrix& b) {
    return max_abs(a - b) / std::max(max_abs(b), 1e-300);
}

}  // namespace testing
