#include "mrgmm/model.hpp"

#include "mrgmm/errors.hpp"
#include "mrgmm/kernels.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace mrgmm {

// ---------------------------------------------------------------------------
// Dataset

Dataset::Dataset(RowMatrix observations, std::vector<std::string> columns)
    : obs_(std::move(observations)), columns_(std::move(columns)) {
    if (obs_.rows() < 1) throw ArgumentError("dataset needs at least one observation");
    if (obs_.cols() < 1) throw ArgumentError("dataset needs at least one column");
    if (!obs_.allFinite()) throw ArgumentError("dataset contains non-finite entries");
    if (columns_.empty()) {
        for (Eigen::Index j = 0; j < obs_.cols(); ++j) columns_.push_back("x" + std::to_string(j));
    }
    if (columns_.size() != dim()) throw ArgumentError("column names do not match data width");
}

Dataset Dataset::resample(std::span<const std::size_t> indices) const {
    RowMatrix out(static_cast<Eigen::Index>(indices.size()), obs_.cols());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        out.row(static_cast<Eigen::Index>(i)) = obs_.row(static_cast<Eigen::Index>(indices[i]));
    }
    Dataset d;
    d.obs_ = std::move(out);
    d.columns_ = columns_;
    return d;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, ',')) {
        const auto b = field.find_first_not_of(" \t\r");
        const auto e = field.find_last_not_of(" \t\r");
        out.push_back(b == std::string::npos ? std::string() : field.substr(b, e - b + 1));
    }
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double parse_double(const std::string& s, std::size_t line_no) {
    double v = 0.0;
    const char* first = s.data();
    const char* last = s.data() + s.size();
    if (!s.empty() && *first == '+') ++first;
    const auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last) {
        throw ArgumentError("csv line " + std::to_string(line_no) + ": cannot parse '" + s + "'");
    }
    return v;
}

}  // namespace

Dataset read_csv(std::istream& in) {
    std::string line;
    std::size_t line_no = 0;
    std::vector<std::string> header;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        header = split_csv_line(line);
        break;
    }
    if (header.empty()) throw ArgumentError("csv: missing header row");
    std::vector<double> values;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != header.size()) {
            throw ArgumentError("csv line " + std::to_string(line_no) + ": expected " +
                                std::to_string(header.size()) + " fields");
        }
        for (const auto& f : fields) values.push_back(parse_double(f, line_no));
        ++rows;
    }
    if (rows == 0) throw ArgumentError("csv: no observations");
    RowMatrix obs = Eigen::Map<RowMatrix>(values.data(), static_cast<Eigen::Index>(rows),
                                          static_cast<Eigen::Index>(header.size()));
    return Dataset(std::move(obs), std::move(header));
}

Dataset load_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ArgumentError("cannot open " + path.string());
    return read_csv(in);
}

void write_csv(std::ostream& out, const Dataset& data) {
    const auto& cols = data.columns();
    for (std::size_t j = 0; j < cols.size(); ++j) out << (j ? "," : "") << cols[j];
    out << '\n';
    char buf[32];
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto r = data.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) {
            const auto res = std::to_chars(buf, buf + sizeof buf, r[j]);
            if (j) out << ',';
            out.write(buf, res.ptr - buf);
        }
        out << '\n';
    }
}

// ---------------------------------------------------------------------------
// Box

bool Box::contains(const Vector& theta) const {
    if (theta.size() != lower.size()) return false;
    return (theta.array() >= lower.array()).all() && (theta.array() <= upper.array()).all();
}

Vector Box::clamp(const Vector& theta) const {
    return theta.cwiseMax(lower).cwiseMin(upper);
}

Vector Box::center() const { return 0.5 * (lower + upper); }

Box Box::uniform(std::size_t dim, double bound) {
    const auto d = static_cast<Eigen::Index>(dim);
    return {Vector::Constant(d, -bound), Vector::Constant(d, bound)};
}

// ---------------------------------------------------------------------------
// Derivative synthesis

namespace {

double fd_step(double theta_k, double rel) { return rel * std::max(1.0, std::abs(theta_k)); }

}  // namespace

void MomentModel::jacobian(std::span<const double> x, std::span<const double> theta,
                           std::span<double> G) const {
    const std::size_t lg = moment_dim();
    const std::size_t lt = param_dim();
    std::vector<double> t(theta.begin(), theta.end());
    std::vector<double> gp(lg), gm(lg);
    for (std::size_t k = 0; k < lt; ++k) {
        const double h = fd_step(theta[k], 1e-6);
        t[k] = theta[k] + h;
        moment(x, t, gp);
        t[k] = theta[k] - h;
        moment(x, t, gm);
        t[k] = theta[k];
        for (std::size_t a = 0; a < lg; ++a) G[a + lg * k] = (gp[a] - gm[a]) / (2.0 * h);
    }
}

void MomentModel::second_derivative(std::span<const double> x, std::span<const double> theta,
                                    std::span<double> G2) const {
    const std::size_t lg = moment_dim();
    const std::size_t lt = param_dim();
    const std::size_t rows = lg * lt;
    std::vector<double> t(theta.begin(), theta.end());
    if (analytic_jacobian()) {
        std::vector<double> jp(rows), jm(rows);
        for (std::size_t l = 0; l < lt; ++l) {
            const double h = fd_step(theta[l], 1e-6);
            t[l] = theta[l] + h;
            jacobian(x, t, jp);
            t[l] = theta[l] - h;
            jacobian(x, t, jm);
            t[l] = theta[l];
            for (std::size_t r = 0; r < rows; ++r) G2[r + rows * l] = (jp[r] - jm[r]) / (2.0 * h);
        }
        return;
    }
    // Second differences of g; a larger step keeps rounding error near
    // eps^(1/2) instead of eps^(1/3).
    std::vector<double> pp(lg), pm(lg), mp(lg), mm(lg);
    for (std::size_t k = 0; k < lt; ++k) {
        for (std::size_t l = k; l < lt; ++l) {
            const double hk = fd_step(theta[k], 1e-4);
            const double hl = fd_step(theta[l], 1e-4);
            auto eval = [&](double sk, double sl, std::vector<double>& out) {
                t[k] += sk * hk;
                t[l] += sl * hl;
                moment(x, t, out);
                t[k] = theta[k];
                t[l] = theta[l];
            };
            eval(+1, +1, pp);
            eval(+1, -1, pm);
            eval(-1, +1, mp);
            eval(-1, -1, mm);
            for (std::size_t a = 0; a < lg; ++a) {
                const double v = (pp[a] - pm[a] - mp[a] + mm[a]) / (4.0 * hk * hl);
                G2[(a + lg * k) + rows * l] = v;
                G2[(a + lg * l) + rows * k] = v;
            }
        }
    }
}

FunctionModel::FunctionModel(std::string name, std::size_t moment_dim, std::size_t param_dim,
                             std::size_t obs_dim, MomentFn fn, Box domain)
    : name_(std::move(name)),
      lg_(moment_dim),
      lt_(param_dim),
      d_(obs_dim),
      fn_(std::move(fn)),
      domain_(std::move(domain)) {
    if (lt_ == 0 || lg_ < lt_) throw ArgumentError("moment model needs L_g >= L_theta >= 1");
}

Box FunctionModel::domain() const {
    if (domain_.lower.size() == 0) return Box::uniform(lt_, kDefaultDomainBound);
    return domain_;
}

ShiftedModel::ShiftedModel(const MomentModel& base, Vector shift)
    : base_(base), shift_(std::move(shift)) {
    if (static_cast<std::size_t>(shift_.size()) != base_.moment_dim()) {
        throw ArgumentError("recentering shift has wrong length");
    }
}

void ShiftedModel::moment(std::span<const double> x, std::span<const double> theta,
                          std::span<double> g) const {
    base_.moment(x, theta, g);
    for (std::size_t a = 0; a < g.size(); ++a) g[a] -= shift_[static_cast<Eigen::Index>(a)];
}

void check_compatible(const MomentModel& model, const Dataset& data) {
    if (model.param_dim() == 0 || model.moment_dim() < model.param_dim()) {
        throw ArgumentError(model.name() + ": needs L_g >= L_theta >= 1");
    }
    if (model.obs_dim() != 0 && model.obs_dim() != data.dim()) {
        throw ArgumentError(model.name() + ": expects " + std::to_string(model.obs_dim()) +
                            " columns, data has " + std::to_string(data.dim()));
    }
}

// ---------------------------------------------------------------------------
// Moment means

namespace {

struct MeanLayout {
    std::size_t lg, lt, width_g, width_G, width_G2, width;
};

MeanLayout layout_for(const MomentModel& model, DerivativeOrder order) {
    MeanLayout l{};
    l.lg = model.moment_dim();
    l.lt = model.param_dim();
    l.width_g = l.lg;
    l.width_G = order >= DerivativeOrder::jacobian ? l.lg * l.lt : 0;
    l.width_G2 = order >= DerivativeOrder::second ? l.lg * l.lt * l.lt : 0;
    l.width = l.width_g + l.width_G + l.width_G2;
    return l;
}

void validate_theta(const MomentModel& model, const Dataset& data, const Vector& theta) {
    check_compatible(model, data);
    if (static_cast<std::size_t>(theta.size()) != model.param_dim()) {
        throw ArgumentError(model.name() + ": theta has wrong length");
    }
    if (!theta.allFinite()) throw ArgumentError(model.name() + ": theta is not finite");
}

auto make_fill(const MomentModel& model, const Dataset& data, const Vector& theta,
               const MeanLayout& l) {
    return [&model, &data, &theta, l](std::size_t i, std::span<double> out, std::span<double>) {
        const auto x = data.row(i);
        const std::span<const double> t(theta.data(), l.lt);
        model.moment(x, t, out.subspan(0, l.width_g));
        if (l.width_G) model.jacobian(x, t, out.subspan(l.width_g, l.width_G));
        if (l.width_G2) model.second_derivative(x, t, out.subspan(l.width_g + l.width_G, l.width_G2));
        for (double v : out) {
            if (!std::isfinite(v)) throw EvaluationError(model.name() + ": non-finite evaluation", i);
        }
    };
}

MomentStats unpack(const std::vector<double>& sums, const MeanLayout& l, std::size_t n,
                   const Vector& theta) {
    const double inv_n = 1.0 / static_cast<double>(n);
    const auto lg = static_cast<Eigen::Index>(l.lg);
    const auto lt = static_cast<Eigen::Index>(l.lt);
    MomentStats s;
    s.theta = theta;
    s.g = Eigen::Map<const Vector>(sums.data(), lg) * inv_n;
    if (l.width_G) s.G = Eigen::Map<const Matrix>(sums.data() + l.width_g, lg, lt) * inv_n;
    if (l.width_G2) {
        s.G2 = Eigen::Map<const Matrix>(sums.data() + l.width_g + l.width_G, lg * lt, lt) * inv_n;
    }
    return s;
}

}  // namespace

MomentStats eval_moment_means(const MomentModel& model, const Dataset& data, const Vector& theta,
                              DerivativeOrder order, int threads) {
    validate_theta(model, data, theta);
    const auto l = layout_for(model, order);
    const auto sums =
        kernels::parallel::compensated_sum(data.size(), l.width, 0, make_fill(model, data, theta, l), threads);
    return unpack(sums, l, data.size(), theta);
}

MomentStats serial::eval_moment_means(const MomentModel& model, const Dataset& data,
                                      const Vector& theta, DerivativeOrder order) {
    validate_theta(model, data, theta);
    const auto l = layout_for(model, order);
    const auto sums =
        kernels::serial::compensated_sum(data.size(), l.width, 0, make_fill(model, data, theta, l));
    return unpack(sums, l, data.size(), theta);
}

Matrix moment_rows(const MomentModel& model, const Dataset& data, const Vector& theta) {
    validate_theta(model, data, theta);
    const auto lg = static_cast<Eigen::Index>(model.moment_dim());
    Matrix out(static_cast<Eigen::Index>(data.size()), lg);
    std::vector<double> g(model.moment_dim());
    const std::span<const double> t(theta.data(), model.param_dim());
    for (std::size_t i = 0; i < data.size(); ++i) {
        model.moment(data.row(i), t, g);
        for (Eigen::Index a = 0; a < lg; ++a) {
            const double v = g[static_cast<std::size_t>(a)];
            if (!std::isfinite(v)) throw EvaluationError(model.name() + ": non-finite evaluation", i);
            out(static_cast<Eigen::Index>(i), a) = v;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Derivative check

DerivativeReport check_derivatives(const MomentModel& model, const Dataset& data,
                                   const Vector& theta, double step, double tol) {
    if (!(step > 0.0)) throw ArgumentError("check_derivatives: step must be positive");
    const Box box = model.domain();
    if (!box.contains(theta) ||
        ((theta - box.lower).array() < step).any() || ((box.upper - theta).array() < step).any()) {
        throw ArgumentError("check_derivatives: theta must be interior to the domain by `step`");
    }
    const std::size_t lt = model.param_dim();
    const std::size_t lg = model.moment_dim();
    const MomentStats at = eval_moment_means(model, data, theta, DerivativeOrder::second);

    auto rel = [](double analytic, double numeric) {
        const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
        return std::abs(analytic - numeric) / scale;
    };

    DerivativeReport report;
    report.tol = tol;
    Vector t = theta;
    for (std::size_t k = 0; k < lt; ++k) {
        const auto kk = static_cast<Eigen::Index>(k);
        t[kk] = theta[kk] + step;
        const MomentStats plus = eval_moment_means(model, data, t, DerivativeOrder::jacobian);
        t[kk] = theta[kk] - step;
        const MomentStats minus = eval_moment_means(model, data, t, DerivativeOrder::jacobian);
        t[kk] = theta[kk];
        const Vector dg = (plus.g - minus.g) / (2.0 * step);
        const Matrix dG = (plus.G - minus.G) / (2.0 * step);
        for (std::size_t a = 0; a < lg; ++a) {
            const auto aa = static_cast<Eigen::Index>(a);
            report.jacobian_error = std::max(report.jacobian_error, rel(at.G(aa, kk), dg[aa]));
        }
        // Column k of G2 is d vec(G) / d theta_k.
        const Eigen::Map<const Vector> dvec(dG.data(), dG.size());
        for (Eigen::Index r = 0; r < dvec.size(); ++r) {
            report.second_error = std::max(report.second_error, rel(at.G2(r, kk), dvec[r]));
        }
    }
    return report;
}

}  // namespace mrgmm
