#pragma once

// Data-parallel kernels shared by every module.
//
// Two loop shapes occur in this library:
//   * sums of fixed-width per-observation contributions (moment means,
//     covariance stacks), and
//   * independent tasks indexed 0..count-1 (bootstrap draws, Monte Carlo
//     replications).
//
// kernels::parallel runs them with OpenMP; kernels::serial is the reference
// implementation used by the tests and the benchmark. Sums are split into
// chunks of kChunk observations whose boundaries never depend on the thread
// count, each chunk is accumulated with Neumaier compensation, and chunk
// partials are merged in chunk order. The two implementations therefore agree
// bit for bit.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <exception>
#include <span>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mrgmm::kernels {

inline constexpr std::size_t kChunk = 512;

// Scalar Neumaier sum.
class ScalarSum {
public:
    void add(double x) {
        const double t = sum_ + x;
        comp_ += std::abs(sum_) >= std::abs(x) ? (sum_ - t) + x : (x - t) + sum_;
        sum_ = t;
    }
    double value() const { return sum_ + comp_; }

private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

// Neumaier-compensated accumulator over a vector of fixed width.
class CompensatedSum {
public:
    explicit CompensatedSum(std::size_t width) : sum_(width, 0.0), comp_(width, 0.0) {}

    void add(std::span<const double> x) {
        for (std::size_t j = 0; j < sum_.size(); ++j) {
            const double t = sum_[j] + x[j];
            if (std::abs(sum_[j]) >= std::abs(x[j])) {
                comp_[j] += (sum_[j] - t) + x[j];
            } else {
                comp_[j] += (x[j] - t) + sum_[j];
            }
            sum_[j] = t;
        }
    }

    std::vector<double> result() const {
        std::vector<double> out(sum_.size());
        for (std::size_t j = 0; j < out.size(); ++j) out[j] = sum_[j] + comp_[j];
        return out;
    }

private:
    std::vector<double> sum_;
    std::vector<double> comp_;
};

inline std::size_t chunk_count(std::size_t n) { return (n + kChunk - 1) / kChunk; }

// Effective thread count: 0 means "library default".
inline int resolve_threads(int threads) {
#ifdef _OPENMP
    if (threads <= 0) return omp_get_max_threads();
    return threads;
#else
    (void)threads;
    return 1;
#endif
}

inline bool in_parallel_region() {
#ifdef _OPENMP
    return omp_in_parallel() != 0;
#else
    return false;
#endif
}

namespace detail {

// Accumulates chunk c of a per-observation sum. Fill has signature
// void(std::size_t i, std::span<double> out, std::span<double> scratch).
template <class Fill>
std::vector<double> chunk_sum(std::size_t c, std::size_t n, std::size_t width,
                              std::size_t scratch_width, Fill& fill) {
    CompensatedSum acc(width);
    std::vector<double> row(width);
    std::vector<double> scratch(scratch_width);
    const std::size_t end = std::min(n, (c + 1) * kChunk);
    for (std::size_t i = c * kChunk; i < end; ++i) {
        fill(i, std::span<double>(row), std::span<double>(scratch));
        acc.add(row);
    }
    return acc.result();
}

inline std::vector<double> merge_chunks(const std::vector<std::vector<double>>& partials,
                                        std::size_t width) {
    CompensatedSum acc(width);
    for (const auto& p : partials) acc.add(p);
    return acc.result();
}

}  // namespace detail

namespace serial {

template <class Fill>
std::vector<double> compensated_sum(std::size_t n, std::size_t width, std::size_t scratch_width,
                                    Fill&& fill) {
    const std::size_t chunks = chunk_count(n);
    std::vector<std::vector<double>> partials(chunks);
    for (std::size_t c = 0; c < chunks; ++c) {
        partials[c] = detail::chunk_sum(c, n, width, scratch_width, fill);
    }
    return detail::merge_chunks(partials, width);
}

template <class Task>
void for_each_index(std::size_t count, Task&& task) {
    for (std::size_t i = 0; i < count; ++i) task(i);
}

}  // namespace serial

namespace parallel {

// Same result as serial::compensated_sum for any thread count. Falls back to
// the serial loop inside an enclosing parallel region.
template <class Fill>
std::vector<double> compensated_sum(std::size_t n, std::size_t width, std::size_t scratch_width,
                                    Fill&& fill, int threads = 0) {
    const std::size_t chunks = chunk_count(n);
    const int nt = resolve_threads(threads);
    if (nt <= 1 || chunks <= 1 || in_parallel_region()) {
        return serial::compensated_sum(n, width, scratch_width, fill);
    }
    std::vector<std::vector<double>> partials(chunks);
    std::vector<std::exception_ptr> errors(chunks);
    const auto total = static_cast<long long>(chunks);
#pragma omp parallel for schedule(static) num_threads(nt)
    for (long long c = 0; c < total; ++c) {
        const auto cc = static_cast<std::size_t>(c);
        try {
            partials[cc] = detail::chunk_sum(cc, n, width, scratch_width, fill);
        } catch (...) {
            errors[cc] = std::current_exception();
        }
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return detail::merge_chunks(partials, width);
}

// Runs task(i) for every i in [0, count). Exceptions are collected and the one
// from the lowest index is rethrown, so failures are reported identically for
// any thread count.
template <class Task>
void for_each_index(std::size_t count, Task&& task, int threads = 0) {
    const int nt = resolve_threads(threads);
    if (nt <= 1 || count <= 1 || in_parallel_region()) {
        serial::for_each_index(count, task);
        return;
    }
    std::vector<std::exception_ptr> errors(count);
    const auto total = static_cast<long long>(count);
#pragma omp parallel for schedule(dynamic, 1) num_threads(nt)
    for (long long i = 0; i < total; ++i) {
        try {
            task(static_cast<std::size_t>(i));
        } catch (...) {
            errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

}  // namespace parallel
}  // namespace mrgmm::kernels
