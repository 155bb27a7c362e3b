#pragma once

// Moment-model contract, datasets and sample moment means.
//
// Storage conventions. For L_g moments and L_theta parameters:
//   g  : length L_g.
//   G  : L_g x L_theta Jacobian dg/dtheta', column-major, so G(a, k) is
//        G[a + L_g * k].
//   G2 : (L_g * L_theta) x L_theta matrix d vec(G) / dtheta'. Row r enumerates
//        vec(G) in column-major order (r = a + L_g * k) and column l is the
//        differentiation direction, so G2(a + L_g * k, l) = d2 g_a / dtheta_k dtheta_l.
//
// Worked 2x2 example (L_g = 2, L_theta = 2), g(theta) = (t0 * t1, t1^2):
//   G  = [[t1, t0], [0, 2 t1]]
//   vec(G) = (t1, 0, t0, 2 t1)
//   G2 = [[0, 1],     <- d t1 / d(t0, t1)
//         [0, 0],     <- d 0
//         [1, 0],     <- d t0
//         [0, 2]]     <- d 2 t1

#include "mrgmm/linalg.hpp"

#include <Eigen/Dense>

#include <cstddef>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace mrgmm {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// n x d table of iid observations, one row per draw.
class Dataset {
public:
    Dataset() = default;
    explicit Dataset(RowMatrix observations, std::vector<std::string> columns = {});

    std::size_t size() const noexcept { return static_cast<std::size_t>(obs_.rows()); }
    std::size_t dim() const noexcept { return static_cast<std::size_t>(obs_.cols()); }

    std::span<const double> row(std::size_t i) const {
        return {obs_.data() + i * dim(), dim()};
    }
    const RowMatrix& observations() const noexcept { return obs_; }
    const std::vector<std::string>& columns() const noexcept { return columns_; }

    Vector column(std::size_t j) const { return obs_.col(static_cast<Eigen::Index>(j)); }

    // Rows picked by `indices` (with repetition), in that order.
    Dataset resample(std::span<const std::size_t> indices) const;

private:
    RowMatrix obs_;
    std::vector<std::string> columns_;
};

// CSV with a header row naming the columns, one observation per line.
Dataset read_csv(std::istream& in);
Dataset load_csv(const std::filesystem::path& path);
void write_csv(std::ostream& out, const Dataset& data);

// Inclusive box bounds on theta.
struct Box {
    Vector lower;
    Vector upper;

    bool contains(const Vector& theta) const;
    Vector clamp(const Vector& theta) const;
    Vector center() const;

    static Box uniform(std::size_t dim, double bound);
};

inline constexpr double kDefaultDomainBound = 1e6;

class MomentModel {
public:
    virtual ~MomentModel() = default;

    virtual std::string name() const = 0;
    virtual std::size_t moment_dim() const = 0;
    virtual std::size_t param_dim() const = 0;
    // Required observation width; 0 accepts any width.
    virtual std::size_t obs_dim() const = 0;

    virtual void moment(std::span<const double> x, std::span<const double> theta,
                        std::span<double> g) const = 0;

    // Defaults synthesize derivatives by central differences of moment()
    // (step 1e-6 * max(1, |theta_k|)). Built-in models override both.
    virtual void jacobian(std::span<const double> x, std::span<const double> theta,
                          std::span<double> G) const;
    virtual void second_derivative(std::span<const double> x, std::span<const double> theta,
                                   std::span<double> G2) const;
    virtual bool analytic_jacobian() const { return false; }

    virtual Box domain() const { return Box::uniform(param_dim(), kDefaultDomainBound); }
};

// A model defined only by its moment function; derivatives are synthesized.
class FunctionModel final : public MomentModel {
public:
    using MomentFn = std::function<void(std::span<const double>, std::span<const double>,
                                        std::span<double>)>;

    FunctionModel(std::string name, std::size_t moment_dim, std::size_t param_dim,
                  std::size_t obs_dim, MomentFn fn, Box domain = {});

    std::string name() const override { return name_; }
    std::size_t moment_dim() const override { return lg_; }
    std::size_t param_dim() const override { return lt_; }
    std::size_t obs_dim() const override { return d_; }
    void moment(std::span<const double> x, std::span<const double> theta,
                std::span<double> g) const override {
        fn_(x, theta, g);
    }
    Box domain() const override;

private:
    std::string name_;
    std::size_t lg_;
    std::size_t lt_;
    std::size_t d_;
    MomentFn fn_;
    Box domain_;
};

// g(x, theta) - shift. Derivatives are those of the wrapped model. Used for
// the recentered bootstrap.
class ShiftedModel final : public MomentModel {
public:
    ShiftedModel(const MomentModel& base, Vector shift);

    std::string name() const override { return base_.name() + "-recentered"; }
    std::size_t moment_dim() const override { return base_.moment_dim(); }
    std::size_t param_dim() const override { return base_.param_dim(); }
    std::size_t obs_dim() const override { return base_.obs_dim(); }
    void moment(std::span<const double> x, std::span<const double> theta,
                std::span<double> g) const override;
    void jacobian(std::span<const double> x, std::span<const double> theta,
                  std::span<double> G) const override {
        base_.jacobian(x, theta, G);
    }
    void second_derivative(std::span<const double> x, std::span<const double> theta,
                           std::span<double> G2) const override {
        base_.second_derivative(x, theta, G2);
    }
    bool analytic_jacobian() const override { return base_.analytic_jacobian(); }
    Box domain() const override { return base_.domain(); }

    const Vector& shift() const noexcept { return shift_; }

private:
    const MomentModel& base_;
    Vector shift_;
};

// Throws ArgumentError when the model cannot be evaluated on this data.
void check_compatible(const MomentModel& model, const Dataset& data);

enum class DerivativeOrder { value = 0, jacobian = 1, second = 2 };

struct MomentStats {
    Vector g;    // g_n(theta)
    Matrix G;    // G_n(theta), L_g x L_theta
    Matrix G2;   // G2_n(theta), (L_g L_theta) x L_theta
    Vector theta;
};

// Arithmetic means of g, G and G2 over the rows of `data` at theta. Derivatives
// beyond `order` are left empty. Throws EvaluationError naming the first row
// whose evaluation is not finite.
MomentStats eval_moment_means(const MomentModel& model, const Dataset& data, const Vector& theta,
                              DerivativeOrder order = DerivativeOrder::second, int threads = 0);

namespace serial {
MomentStats eval_moment_means(const MomentModel& model, const Dataset& data, const Vector& theta,
                              DerivativeOrder order = DerivativeOrder::second);
}

// Per-observation evaluations stacked as rows (n x L_g), used by the
// covariance and EL code.
Matrix moment_rows(const MomentModel& model, const Dataset& data, const Vector& theta);

struct DerivativeReport {
    double jacobian_error = 0.0;  // max relative error of G_n vs differences of g_n
    double second_error = 0.0;    // max relative error of G2_n vs differences of G_n
    double tol = 0.0;
    bool jacobian_ok() const { return jacobian_error <= tol; }
    bool second_ok() const { return second_error <= tol; }
    bool passed() const { return jacobian_ok() && second_ok(); }
};

// Central-difference check of the model's derivatives at theta. Relative
// error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-3).
DerivativeReport check_derivatives(const MomentModel& model, const Dataset& data,
                                   const Vector& theta, double step, double tol);

}  // namespace mrgmm
