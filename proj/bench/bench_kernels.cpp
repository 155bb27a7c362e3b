// Serial vs OpenMP timings for the hot loops: moment means, one bootstrap
// distribution and a short coverage study.

#include "mrgmm/bootstrap.hpp"
#include "mrgmm/experiments.hpp"
#include "mrgmm/model.hpp"
#include "mrgmm/models.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace mrgmm;

namespace {

template <class F>
double seconds(F&& f, int reps) {
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) f();
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / reps;
}

void report(const char* name, double serial, double parallel) {
    std::printf("%-28s serial %10.3f ms   parallel %10.3f ms   speedup %5.2f\n", name, 1e3 * serial,
                1e3 * parallel, serial / parallel);
}

}  // namespace

int main(int argc, char** argv) {
    const int threads = argc > 1 ? std::atoi(argv[1]) : 0;
    int max_threads = 1;
#ifdef _OPENMP
    max_threads = omp_get_max_threads();
#endif
    std::printf("threads: %d (max %d)\n", threads > 0 ? threads : max_threads, max_threads);

    experiments::Example2Spec spec2;
    spec2.n = 200000;
    spec2.delta = 0.5;
    rng::KeyedStream s2(1, 0, rng::kDataStream);
    const Dataset big = experiments::simulate_example2(spec2, s2);
    models::LinearIvModel iv(1, 2);
    Vector beta = Vector::Constant(1, 0.1);
    double sink = 0.0;
    const double ms = seconds([&] { sink += serial::eval_moment_means(iv, big, beta).g[0]; }, 5);
    const double mp = seconds([&] { sink += eval_moment_means(iv, big, beta, DerivativeOrder::second, threads).g[0]; }, 5);
    report("moment means (n=200000)", ms, mp);

    const experiments::Example1Spec spec1{200, 0.5, 1.5, 0.0};
    rng::KeyedStream s1(1, 0, rng::kDataStream);
    const Dataset small = experiments::simulate_example1(spec1, s1);
    models::CombinedDataModel comb;
    const GmmFit fit = two_step(comb, small);
    ResamplePlan plan;
    plan.B = 999;
    plan.seed = 1;
    plan.threads = 1;
    const double bs = seconds([&] { sink += mr_bootstrap_t(comb, small, fit, plan, 0).abs_t.back(); }, 1);
    plan.threads = threads;
    const double bp = seconds([&] { sink += mr_bootstrap_t(comb, small, fit, plan, 0).abs_t.back(); }, 1);
    report("MR bootstrap (n=200, B=999)", bs, bp);

    experiments::StudyOptions opts;
    opts.r = 20;
    opts.B = 199;
    opts.ci_kinds = {CiKind::MRstar, CiKind::C};
    opts.oracle_n = 100000;
    opts.threads = 1;
    experiments::verify_pseudo_true(spec1, opts.oracle_n);
    const double cs = seconds([&] { sink += experiments::coverage_study(spec1, opts).cells[0].coverage; }, 1);
    opts.threads = threads;
    const double cp = seconds([&] { sink += experiments::coverage_study(spec1, opts).cells[0].coverage; }, 1);
    report("coverage (r=20, B=199)", cs, cp);

    const auto m1 = serial::eval_moment_means(iv, big, beta);
    const auto m2 = eval_moment_means(iv, big, beta, DerivativeOrder::second, threads);
    bool same = m1.g == m2.g && m1.G == m2.G;
    plan.threads = 1;
    const auto t1 = mr_bootstrap_t(comb, small, fit, plan, 0).abs_t;
    plan.threads = threads;
    same = same && t1 == mr_bootstrap_t(comb, small, fit, plan, 0).abs_t;
    std::printf("serial and parallel results identical: %s\n", same ? "yes" : "no");
    std::printf("checksum %.6g\n", sink);
    return same ? 0 : 1;
}
