#pragma once

// Built-in moment models. All ship analytic first and second derivatives.

#include "mrgmm/model.hpp"

#include <memory>
#include <string>
#include <vector>

namespace mrgmm::models {

// g(x, theta) = x - theta. Just-identified; theta-hat is the column mean.
class MeanModel final : public MomentModel {
public:
    explicit MeanModel(std::size_t dim = 1);

    std::string name() const override { return "mean"; }
    std::size_t moment_dim() const override { return dim_; }
    std::size_t param_dim() const override { return dim_; }
    std::size_t obs_dim() const override { return dim_; }
    void moment(std::span<const double> x, std::span<const double> theta,
                std::span<double> g) const override;
    void jacobian(std::span<const double> x, std::span<const double> theta,
                  std::span<double> G) const override;
    void second_derivative(std::span<const double> x, std::span<const double> theta,
                           std::span<double> G2) const override;
    bool analytic_jacobian() const override { return true; }

private:
    std::size_t dim_;
};

// Combining data sets: x = (Y, Z), g = (Y, Z - theta). The known-mean
// restriction E[Y] = 0 overidentifies the mean of Z.
class CombinedDataModel final : public MomentModel {
public:
    std::string name() const override { return "example1"; }
    std::size_t moment_dim() const override { return 2; }
    std::size_t param_dim() const override { return 1; }
    std::size_t obs_dim() const override { return 2; }
    void moment(std::span<const double> x, std::span<const double> theta,
                std::span<double> g) const override;
    void jacobian(std::span<const double> x, std::span<const double> theta,
                  std::span<double> G) const override;
    void second_derivative(std::span<const double> x, std::span<const double> theta,
                           std::span<double> G2) const override;
    bool analytic_jacobian() const override { return true; }
};

// Linear instrumental variables: x = (y, w_1..w_k, z_1..z_m),
// g = z (y - w' beta).
class LinearIvModel final : public MomentModel {
public:
    LinearIvModel(std::size_t regressors, std::size_t instruments);

    std::string name() const override { return "linear-iv"; }
    std::size_t moment_dim() const override { return m_; }
    std::size_t param_dim() const override { return k_; }
    std::size_t obs_dim() const override { return 1 + k_ + m_; }
    void moment(std::span<const double> x, std::span<const double> theta,
                std::span<double> g) const override;
    void jacobian(std::span<const double> x, std::span<const double> theta,
                  std::span<double> G) const override;
    void second_derivative(std::span<const double> x, std::span<const double> theta,
                           std::span<double> G2) const override;
    bool analytic_jacobian() const override { return true; }

    std::size_t regressors() const { return k_; }
    std::size_t instruments() const { return m_; }
    std::size_t instrument_offset() const { return 1 + k_; }

private:
    std::size_t k_;
    std::size_t m_;
};

// Exponential-mean IV: g = z (y - exp(w' beta)). Nonlinear in beta, so G2 is
// nonzero; used to exercise the second-derivative paths.
class ExponentialIvModel final : public MomentModel {
public:
    ExponentialIvModel(std::size_t regressors, std::size_t instruments);

    std::string name() const override { return "exp-iv"; }
    std::size_t moment_dim() const override { return m_; }
    std::size_t param_dim() const override { return k_; }
    std::size_t obs_dim() const override { return 1 + k_ + m_; }
    void moment(std::span<const double> x, std::span<const double> theta,
                std::span<double> g) const override;
    void jacobian(std::span<const double> x, std::span<const double> theta,
                  std::span<double> G) const override;
    void second_derivative(std::span<const double> x, std::span<const double> theta,
                           std::span<double> G2) const override;
    bool analytic_jacobian() const override { return true; }
    Box domain() const override { return Box::uniform(k_, 20.0); }

    std::size_t instrument_offset() const { return 1 + k_; }

private:
    std::size_t k_;
    std::size_t m_;
};

// Model ids understood by make_model: "mean", "example1", "example2",
// "linear-iv", "exp-iv". The IV ids use one regressor and data_dim - 2
// instruments; "mean" uses data_dim columns.
std::unique_ptr<MomentModel> make_model(const std::string& id, std::size_t data_dim);
std::vector<std::string> model_ids();

}  // namespace mrgmm::models
