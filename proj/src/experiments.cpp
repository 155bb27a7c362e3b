#include "mrgmm/experiments.hpp"

#include "mrgmm/errors.hpp"
#include "mrgmm/kernels.hpp"
#include "mrgmm/models.hpp"
#include "mrgmm/variance.hpp"

#include <json.hpp>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>

namespace mrgmm::experiments {

namespace {

constexpr double kE = 2.718281828459045235360287;
constexpr double kErrorCorrelation = 0.99;
constexpr std::uint64_t kOracleSeed = 0x0D1CE5EEDull;

// Shortest text that round-trips.
std::string fmt(double v) {
    if (v == 0.0) v = 0.0;
    char buf[40];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

template <class... F>
struct overloaded : F... {
    using F::operator()...;
};
template <class... F>
overloaded(F...) -> overloaded<F...>;

}  // namespace

std::string to_string(Shape shape) { return shape == Shape::lognormal ? "lognormal" : "normal"; }

Shape parse_shape(const std::string& text) {
    if (text == "lognormal") return Shape::lognormal;
    if (text == "normal") return Shape::normal;
    throw ArgumentError("unknown shape '" + text + "' (use lognormal or normal)");
}

void Example1Spec::validate() const {
    if (n < 2) throw ArgumentError("example1: n must be at least 2");
    if (!(std::abs(rho) < 1.0)) throw ArgumentError("example1: |rho| must be below 1");
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ArgumentError("example1: sigma must be positive");
    if (!std::isfinite(delta)) throw ArgumentError("example1: delta must be finite");
}

void Example2Spec::validate() const {
    if (n < 2) throw ArgumentError("example2: n must be at least 2");
    if (!(gamma1 != 0.0) || !std::isfinite(gamma1)) throw ArgumentError("example2: gamma1 must be nonzero");
    if (!std::isfinite(delta)) throw ArgumentError("example2: delta must be finite");
    if (gamma2 && !std::isfinite(*gamma2)) throw ArgumentError("example2: gamma2 must be finite");
}

double Example2Spec::gamma2_value() const { return gamma2 ? *gamma2 : gamma2_strong_invalid(delta); }

std::size_t sample_size(const DesignSpec& spec) {
    return std::visit([](const auto& s) { return s.n; }, spec);
}

DesignSpec with_sample_size(DesignSpec spec, std::size_t n) {
    std::visit([n](auto& s) { s.n = n; }, spec);
    return spec;
}

double misspecification(const DesignSpec& spec) {
    return std::visit([](const auto& s) { return s.delta; }, spec);
}

std::string design_name(const DesignSpec& spec) {
    return std::visit(overloaded{[](const Example1Spec& s) {
                                     return "example1(rho=" + fmt(s.rho) + ",sigma=" + fmt(s.sigma) +
                                            ",delta=" + fmt(s.delta) + ",shape=" + to_string(s.shape) + ")";
                                 },
                                 [](const Example2Spec& s) {
                                     return "example2(delta=" + fmt(s.delta) + ",gamma1=" + fmt(s.gamma1) +
                                            ",gamma2=" + fmt(s.gamma2_value()) + ")";
                                 }},
                      spec);
}

void validate(const DesignSpec& spec) {
    std::visit([](const auto& s) { s.validate(); }, spec);
}

Dataset simulate_example1(const Example1Spec& spec, rng::KeyedStream& stream) {
    spec.validate();
    const double tilt = std::sqrt(1.0 - spec.rho * spec.rho);
    const double shift = std::exp(0.5 * spec.sigma * spec.sigma);
    RowMatrix x(static_cast<Eigen::Index>(spec.n), 2);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const auto [a, b] = stream.normal_pair();
        const double z0 = spec.rho * a + tilt * b;
        x(i, 0) = spec.delta + a;
        x(i, 1) = spec.shape == Shape::lognormal ? std::exp(spec.sigma * z0) - shift : z0;
    }
    return Dataset(std::move(x), {"Y", "Z"});
}

Dataset simulate_example2(const Example2Spec& spec, rng::KeyedStream& stream) {
    spec.validate();
    const double scale = (kE - 1.0) * kE;
    const double tilt = std::sqrt(1.0 - kErrorCorrelation * kErrorCorrelation);
    const double shift = std::exp(0.5);
    const double g2 = spec.gamma2_value();
    RowMatrix x(static_cast<Eigen::Index>(spec.n), 4);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const auto [z1, z20] = stream.normal_pair();
        const auto [a, b] = stream.normal_pair();
        const double eps = std::exp(a) - shift;
        const double u = std::exp(kErrorCorrelation * a + tilt * b) - shift;
        const double z2 = z20 + spec.delta / scale * eps;
        const double reg = z1 * spec.gamma1 + z2 * g2 + u;
        x(i, 0) = eps;  // beta0 = 0
        x(i, 1) = reg;
        x(i, 2) = z1;
        x(i, 3) = z2;
    }
    return Dataset(std::move(x), {"y", "x", "z1", "z2"});
}

Dataset simulate(const DesignSpec& spec, rng::KeyedStream& stream) {
    return std::visit(overloaded{[&](const Example1Spec& s) { return simulate_example1(s, stream); },
                                 [&](const Example2Spec& s) { return simulate_example2(s, stream); }},
                      spec);
}

double rho_eps_u() { return std::exp(1.0 + kErrorCorrelation) - kE; }

double gamma2_strong_invalid(double delta) {
    return -delta * rho_eps_u() / ((kE - 1.0) * kE + delta * delta);
}

double pseudo_true_example1(const Example1Spec& spec) {
    spec.validate();
    // EZ - Cov(Y, Z) EY / Var Y with Var Y = 1 and EZ = 0.
    const double cov = spec.shape == Shape::lognormal
                           ? spec.rho * spec.sigma * std::exp(0.5 * spec.sigma * spec.sigma)
                           : spec.rho;
    return 0.0 - cov * spec.delta;
}

double pseudo_true_example2(const Example2Spec& spec) {
    spec.validate();
    const double scale = (kE - 1.0) * kE;
    const double c = 1.0 + spec.delta * spec.delta / scale;
    const double a = c * spec.gamma2_value() + spec.delta / scale * rho_eps_u();
    return a * spec.delta / (c * spec.gamma1 * spec.gamma1 + a * a);
}

double pseudo_true(const DesignSpec& spec) {
    return std::visit(overloaded{[](const Example1Spec& s) { return pseudo_true_example1(s); },
                                 [](const Example2Spec& s) { return pseudo_true_example2(s); }},
                      spec);
}

std::unique_ptr<MomentModel> design_model(const DesignSpec& spec) {
    if (std::holds_alternative<Example1Spec>(spec)) return std::make_unique<models::CombinedDataModel>();
    return std::make_unique<models::LinearIvModel>(1, 2);
}

namespace {

WeightRecipe two_sls() { return WeightRecipe::per_obs_outer(column_features(2, 2), "2sls"); }

}  // namespace

GmmFit fit_design(const DesignSpec& spec, const MomentModel& model, const Dataset& data) {
    if (std::holds_alternative<Example1Spec>(spec)) return two_step(model, data);
    return one_step(model, data, two_sls());
}

GmmFit fit_for_j(const DesignSpec& spec, const MomentModel& model, const Dataset& data) {
    if (std::holds_alternative<Example1Spec>(spec)) return two_step(model, data);
    return two_step(model, data, {}, two_sls());
}

namespace {

std::mutex& check_mutex() {
    static std::mutex m;
    return m;
}

std::map<std::string, PseudoTrueCheck>& check_memo() {
    static std::map<std::string, PseudoTrueCheck> memo;
    return memo;
}

nlohmann::json to_json(const PseudoTrueCheck& c) {
    return {{"closed_form", c.closed_form}, {"estimate", c.estimate}, {"standard_error", c.standard_error},
            {"n", c.n},                     {"passed", c.passed}};
}

PseudoTrueCheck from_json(const nlohmann::json& j) {
    PseudoTrueCheck c;
    c.closed_form = j.at("closed_form").get<double>();
    c.estimate = j.at("estimate").get<double>();
    c.standard_error = j.at("standard_error").get<double>();
    c.n = j.at("n").get<std::size_t>();
    c.passed = j.at("passed").get<bool>();
    return c;
}

nlohmann::json read_cache(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) return nlohmann::json::object();
    try {
        nlohmann::json j;
        in >> j;
        if (j.is_object()) return j;
    } catch (const nlohmann::json::exception&) {
    }
    return nlohmann::json::object();
}

}  // namespace

PseudoTrueCheck verify_pseudo_true(const DesignSpec& spec, std::size_t oracle_n,
                                   const std::filesystem::path& cache) {
    validate(spec);
    if (oracle_n < 1000) throw ArgumentError("pseudo-true check needs at least 1000 observations");
    const std::string key = design_name(spec) + "@n=" + std::to_string(oracle_n);
    const double closed = pseudo_true(spec);

    std::lock_guard<std::mutex> lock(check_mutex());
    if (auto it = check_memo().find(key); it != check_memo().end()) return it->second;
    nlohmann::json stored = cache.empty() ? nlohmann::json::object() : read_cache(cache);
    if (stored.contains(key)) {
        try {
            PseudoTrueCheck c = from_json(stored.at(key));
            if (c.closed_form == closed) {
                check_memo()[key] = c;
                return c;
            }
        } catch (const nlohmann::json::exception&) {
        }
    }

    const DesignSpec big = with_sample_size(spec, oracle_n);
    rng::KeyedStream stream(kOracleSeed, 0, rng::kDataStream);
    const Dataset data = simulate(big, stream);
    const auto model = design_model(big);
    const GmmFit fit = fit_design(big, *model, data);
    const VarianceEstimate v = sigma_mr(*model, data, fit);

    PseudoTrueCheck c;
    c.closed_form = closed;
    c.estimate = fit.theta[0];
    c.standard_error = v.standard_error(0);
    c.n = oracle_n;
    c.passed = std::abs(c.estimate - c.closed_form) <= 5.0 * c.standard_error;
    check_memo()[key] = c;
    if (!cache.empty()) {
        stored[key] = to_json(c);
        if (cache.has_parent_path()) std::filesystem::create_directories(cache.parent_path());
        std::ofstream out(cache);
        out << stored.dump(2) << '\n';
    }
    return c;
}

const CoverageCell& CoverageTable::cell(double level, CiKind kind) const {
    for (const auto& c : cells) {
        if (c.kind == kind && std::abs(c.level - level) < 1e-12) return c;
    }
    throw ArgumentError("coverage table has no cell for " + to_string(kind) + " at level " + fmt(level));
}

namespace {

struct KindResult {
    bool ok = false;
    bool degenerate = false;
    double se = std::numeric_limits<double>::quiet_NaN();
    std::vector<ConfidenceInterval> ci;  // one per level
};

struct Replication {
    bool fit_ok = false;
    double estimate = std::numeric_limits<double>::quiet_NaN();
    double se_mr = std::numeric_limits<double>::quiet_NaN();
    std::vector<KindResult> kinds;
    int j_asym = -1;  // -1 failed, else reject flag
    int j_boot = -1;
};

void check_levels(const std::vector<double>& levels) {
    if (levels.empty()) throw ArgumentError("at least one nominal level is required");
    for (double l : levels) {
        if (!(l > 0.0 && l < 1.0)) throw ArgumentError("nominal levels must lie in (0, 1)");
    }
}

void check_options(const StudyOptions& opts) {
    if (opts.r == 0) throw ArgumentError("r must be at least 1");
    if (opts.B == 0) throw ArgumentError("B must be at least 1");
    if (opts.ci_kinds.empty()) throw ArgumentError("at least one interval kind is required");
    if (!(opts.j_level > 0.0 && opts.j_level < 1.0)) throw ArgumentError("J test level must lie in (0, 1)");
    check_levels(opts.levels);
}

Replication replicate(const DesignSpec& spec, const MomentModel& model, const StudyOptions& opts,
                      std::size_t r) {
    Replication rep;
    rep.kinds.resize(opts.ci_kinds.size());
    rng::KeyedStream stream(opts.seed, static_cast<std::uint32_t>(r), rng::kDataStream);
    const Dataset data = simulate(spec, stream);

    GmmFit fit;
    try {
        fit = fit_design(spec, model, data);
    } catch (const Error&) {
        return rep;
    }
    rep.fit_ok = true;
    rep.estimate = fit.theta[0];
    const ResamplePlan plan{opts.B, opts.seed, static_cast<std::uint32_t>(r), opts.threads};
    const bool step_two = fit.step == 2;

    std::optional<VarianceEstimate> s_c;
    std::optional<VarianceEstimate> s_mr;
    try {
        s_c = sigma_conventional(model, data, fit);
    } catch (const Error&) {
    }
    try {
        s_mr = sigma_mr(model, data, fit);
        rep.se_mr = s_mr->standard_error(0);
    } catch (const Error&) {
    }
    std::optional<HhBootstrap> hh;

    for (std::size_t q = 0; q < opts.ci_kinds.size(); ++q) {
        const CiKind kind = opts.ci_kinds[q];
        KindResult& out = rep.kinds[q];
        try {
            const bool robust = kind == CiKind::MR || kind == CiKind::MRstar;
            const auto& sigma = robust ? s_mr : s_c;
            if (!sigma) continue;
            std::optional<TStatDistribution> dist;
            if (kind == CiKind::MRstar) dist = mr_bootstrap_t(model, data, fit, plan, 0);
            if (kind == CiKind::HH) {
                if (!hh) hh = hh_bootstrap(model, data, fit, plan, 0);
                dist = hh->t;
            }
            if (kind == CiKind::BN) {
                dist = bn_bootstrap_t(model, data, fit, el_probabilities(model, data, fit.theta), plan, 0);
            }
            for (double level : opts.levels) {
                const double alpha = 1.0 - level;
                out.ci.push_back(dist ? ci_bootstrap(fit, *sigma, *dist, 0, alpha)
                                      : ci_asymptotic(fit, *sigma, 0, alpha));
            }
            out.se = sigma->standard_error(0);
            out.degenerate = dist && dist->degenerate;
            out.ok = true;
        } catch (const Error&) {
            out = KindResult{};
        }
    }

    try {
        const GmmFit fit2 = step_two ? fit : fit_for_j(spec, model, data);
        rep.j_asym = j_test(model, data, fit2, opts.j_level).reject ? 1 : 0;
        if (opts.j_bootstrap) {
            try {
                if (step_two) {
                    if (!hh) hh = hh_bootstrap(model, data, fit, plan, 0);
                    rep.j_boot = j_test_from_draws(model, fit2, data.size(), hh->j_stats, hh->t.failures,
                                                   opts.j_level)
                                         .reject
                                     ? 1
                                     : 0;
                } else {
                    rep.j_boot = j_test_bootstrap(model, data, fit2, plan, opts.j_level).reject ? 1 : 0;
                }
            } catch (const Error&) {
            }
        }
    } catch (const Error&) {
    }
    return rep;
}

std::vector<Replication> run_replications(const DesignSpec& spec, const StudyOptions& opts) {
    const auto model = design_model(spec);
    std::vector<Replication> reps(opts.r);
    kernels::parallel::for_each_index(
        opts.r, [&](std::size_t r) { reps[r] = replicate(spec, *model, opts, r); }, opts.threads);
    return reps;
}

PseudoTrueCheck require_check(const DesignSpec& spec, const StudyOptions& opts) {
    PseudoTrueCheck check = verify_pseudo_true(spec, opts.oracle_n, opts.verification_cache);
    if (!check.passed) {
        throw ContractError("pseudo-true value " + fmt(check.closed_form) + " for " + design_name(spec) +
                            " disagrees with the large-sample estimate " + fmt(check.estimate));
    }
    return check;
}

double mc_stderr(double p, std::size_t m) {
    return m == 0 ? 0.0 : std::sqrt(p * (1.0 - p) / static_cast<double>(m));
}

}  // namespace

CoverageTable coverage_study(const DesignSpec& spec, const StudyOptions& opts) {
    validate(spec);
    check_options(opts);
    CoverageTable table;
    table.spec = spec;
    table.r = opts.r;
    table.B = opts.B;
    table.seed = opts.seed;
    table.check = require_check(spec, opts);
    table.pseudo_true = table.check.closed_form;

    const std::vector<Replication> reps = run_replications(spec, opts);

    for (std::size_t li = 0; li < opts.levels.size(); ++li) {
        for (std::size_t q = 0; q < opts.ci_kinds.size(); ++q) {
            CoverageCell cell;
            cell.level = opts.levels[li];
            cell.kind = opts.ci_kinds[q];
            kernels::ScalarSum hw;
            kernels::ScalarSum est;
            for (const auto& rep : reps) {
                const KindResult& k = rep.kinds[q];
                if (!rep.fit_ok || !k.ok) continue;
                const ConfidenceInterval& ci = k.ci[li];
                ++cell.valid;
                if (ci.covers(table.pseudo_true)) ++cell.covered;
                if (ci.degenerate) ++cell.degenerate;
                hw.add(ci.halfwidth);
                est.add(rep.estimate);
            }
            cell.failures = opts.r - cell.valid;
            if (cell.valid > 0) {
                const double m = static_cast<double>(cell.valid);
                cell.coverage = static_cast<double>(cell.covered) / m;
                cell.mean_halfwidth = hw.value() / m;
                cell.mean_estimate = est.value() / m;
                cell.mc_stderr = mc_stderr(cell.coverage, cell.valid);
            }
            table.cells.push_back(cell);
        }
    }

    auto j_rate = [&](JTestKind kind, int Replication::*field) {
        JRate j;
        j.kind = kind;
        j.level = opts.j_level;
        for (const auto& rep : reps) {
            const int v = rep.*field;
            if (v < 0) continue;
            ++j.valid;
            j.rejections += static_cast<std::size_t>(v);
        }
        j.failures = opts.r - j.valid;
        if (j.valid > 0) {
            j.rate = static_cast<double>(j.rejections) / static_cast<double>(j.valid);
            j.mc_stderr = mc_stderr(j.rate, j.valid);
        }
        return j;
    };
    table.j.push_back(j_rate(JTestKind::asymptotic, &Replication::j_asym));
    if (opts.j_bootstrap) table.j.push_back(j_rate(JTestKind::hh_bootstrap, &Replication::j_boot));
    return table;
}

std::string test_name(CiKind kind) {
    switch (kind) {
        case CiKind::C: return "t_C";
        case CiKind::MR: return "t_MR";
        case CiKind::HH: return "t*_HH";
        case CiKind::BN: return "t*_BN";
        case CiKind::MRstar: return "t*_MR";
    }
    return "?";
}

PowerCurve power_study(const DesignSpec& spec, const StudyOptions& opts, double alpha, std::vector<double> grid) {
    validate(spec);
    if (!(alpha > 0.0 && alpha < 1.0)) throw ArgumentError("alpha must lie in (0, 1)");
    StudyOptions o = opts;
    o.levels = {1.0 - alpha};
    o.j_bootstrap = false;
    check_options(o);

    PowerCurve curve;
    curve.spec = spec;
    curve.alpha = alpha;
    curve.r = o.r;
    curve.B = o.B;
    curve.seed = o.seed;
    curve.check = require_check(spec, o);
    curve.pseudo_true = curve.check.closed_form;
    const double theta0 = curve.pseudo_true;

    if (!grid.empty()) {
        const double tol = 1e-12 * std::max(1.0, std::abs(theta0));
        bool has_null = false;
        for (double g : grid) has_null = has_null || std::abs(g - theta0) <= tol;
        if (!has_null) throw ArgumentError("power grid must contain the pseudo-true value " + fmt(theta0));
    }

    const std::vector<Replication> reps = run_replications(spec, o);

    if (grid.empty()) {
        kernels::ScalarSum se;
        std::size_t m = 0;
        for (const auto& rep : reps) {
            if (rep.fit_ok && std::isfinite(rep.se_mr)) {
                se.add(rep.se_mr);
                ++m;
            }
        }
        if (m == 0) throw EvaluationError("power_study: no replication produced a robust standard error");
        const double span = 4.0 * se.value() / static_cast<double>(m);
        for (int j = 0; j <= 40; ++j) grid.push_back(theta0 + span * static_cast<double>(j - 20) / 20.0);
    }
    curve.grid = grid;

    for (std::size_t q = 0; q < o.ci_kinds.size(); ++q) {
        const CiKind kind = o.ci_kinds[q];
        auto decision = [&](const Replication& rep, double theta_null) {
            const KindResult& k = rep.kinds[q];
            if (k.degenerate) return std::numeric_limits<double>::infinity();
            const double t = std::abs(rep.estimate - theta_null) / k.se;
            return is_bootstrap(kind) ? t - k.ci[0].critical : t;
        };
        std::vector<const Replication*> valid;
        for (const auto& rep : reps) {
            if (rep.fit_ok && rep.kinds[q].ok) valid.push_back(&rep);
        }
        PowerSeries s;
        s.kind = kind;
        s.valid = valid.size();
        s.failures = o.r - valid.size();
        if (valid.empty()) {
            s.critical = std::numeric_limits<double>::quiet_NaN();
            s.rejection.assign(grid.size(), std::numeric_limits<double>::quiet_NaN());
            curve.series.push_back(std::move(s));
            continue;
        }
        std::vector<double> null_draws;
        null_draws.reserve(valid.size());
        for (const auto* rep : valid) null_draws.push_back(decision(*rep, theta0));
        s.critical = size_corrected_critical(null_draws, alpha);
        for (double g : grid) {
            std::size_t rejections = 0;
            for (const auto* rep : valid) rejections += decision(*rep, g) > s.critical ? 1 : 0;
            s.rejection.push_back(static_cast<double>(rejections) / static_cast<double>(valid.size()));
        }
        curve.series.push_back(std::move(s));
    }
    return curve;
}

}  // namespace mrgmm::experiments
