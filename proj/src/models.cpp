#include "mrgmm/models.hpp"

#include "mrgmm/errors.hpp"

#include <algorithm>
#include <cmath>

namespace mrgmm::models {

MeanModel::MeanModel(std::size_t dim) : dim_(dim) {
    if (dim_ == 0) throw ArgumentError("mean model needs at least one column");
}

void MeanModel::moment(std::span<const double> x, std::span<const double> theta,
                       std::span<double> g) const {
    for (std::size_t a = 0; a < dim_; ++a) g[a] = x[a] - theta[a];
}

void MeanModel::jacobian(std::span<const double>, std::span<const double>,
                         std::span<double> G) const {
    std::fill(G.begin(), G.end(), 0.0);
    for (std::size_t a = 0; a < dim_; ++a) G[a + dim_ * a] = -1.0;
}

void MeanModel::second_derivative(std::span<const double>, std::span<const double>,
                                  std::span<double> G2) const {
    std::fill(G2.begin(), G2.end(), 0.0);
}

void CombinedDataModel::moment(std::span<const double> x, std::span<const double> theta,
                               std::span<double> g) const {
    g[0] = x[0];
    g[1] = x[1] - theta[0];
}

void CombinedDataModel::jacobian(std::span<const double>, std::span<const double>,
                                 std::span<double> G) const {
    G[0] = 0.0;
    G[1] = -1.0;
}

void CombinedDataModel::second_derivative(std::span<const double>, std::span<const double>,
                                          std::span<double> G2) const {
    G2[0] = 0.0;
    G2[1] = 0.0;
}

LinearIvModel::LinearIvModel(std::size_t regressors, std::size_t instruments)
    : k_(regressors), m_(instruments) {
    if (k_ == 0 || m_ < k_) throw ArgumentError("linear IV needs instruments >= regressors >= 1");
}

void LinearIvModel::moment(std::span<const double> x, std::span<const double> theta,
                           std::span<double> g) const {
    double resid = x[0];
    for (std::size_t k = 0; k < k_; ++k) resid -= x[1 + k] * theta[k];
    const double* z = x.data() + 1 + k_;
    for (std::size_t a = 0; a < m_; ++a) g[a] = z[a] * resid;
}

void LinearIvModel::jacobian(std::span<const double> x, std::span<const double>,
                             std::span<double> G) const {
    const double* z = x.data() + 1 + k_;
    for (std::size_t k = 0; k < k_; ++k) {
        for (std::size_t a = 0; a < m_; ++a) G[a + m_ * k] = -z[a] * x[1 + k];
    }
}

void LinearIvModel::second_derivative(std::span<const double>, std::span<const double>,
                                      std::span<double> G2) const {
    std::fill(G2.begin(), G2.end(), 0.0);
}

ExponentialIvModel::ExponentialIvModel(std::size_t regressors, std::size_t instruments)
    : k_(regressors), m_(instruments) {
    if (k_ == 0 || m_ < k_) throw ArgumentError("exp IV needs instruments >= regressors >= 1");
}

namespace {

double exp_index(std::span<const double> x, std::span<const double> theta, std::size_t k) {
    double idx = 0.0;
    for (std::size_t j = 0; j < k; ++j) idx += x[1 + j] * theta[j];
    return std::exp(idx);
}

}  // namespace

void ExponentialIvModel::moment(std::span<const double> x, std::span<const double> theta,
                                std::span<double> g) const {
    const double resid = x[0] - exp_index(x, theta, k_);
    const double* z = x.data() + 1 + k_;
    for (std::size_t a = 0; a < m_; ++a) g[a] = z[a] * resid;
}

void ExponentialIvModel::jacobian(std::span<const double> x, std::span<const double> theta,
                                  std::span<double> G) const {
    const double mu = exp_index(x, theta, k_);
    const double* z = x.data() + 1 + k_;
    for (std::size_t k = 0; k < k_; ++k) {
        for (std::size_t a = 0; a < m_; ++a) G[a + m_ * k] = -z[a] * mu * x[1 + k];
    }
}

void ExponentialIvModel::second_derivative(std::span<const double> x, std::span<const double> theta,
                                           std::span<double> G2) const {
    const double mu = exp_index(x, theta, k_);
    const double* z = x.data() + 1 + k_;
    const std::size_t rows = m_ * k_;
    for (std::size_t l = 0; l < k_; ++l) {
        for (std::size_t k = 0; k < k_; ++k) {
            for (std::size_t a = 0; a < m_; ++a) {
                G2[(a + m_ * k) + rows * l] = -z[a] * mu * x[1 + k] * x[1 + l];
            }
        }
    }
}

std::unique_ptr<MomentModel> make_model(const std::string& id, std::size_t data_dim) {
    if (id == "mean") return std::make_unique<MeanModel>(data_dim);
    if (id == "example1") return std::make_unique<CombinedDataModel>();
    if (id == "example2") return std::make_unique<LinearIvModel>(1, 2);
    if (id == "linear-iv" || id == "exp-iv") {
        if (data_dim < 3) throw ArgumentError(id + " needs columns y, x, z1[, z2, ...]");
        if (id == "linear-iv") return std::make_unique<LinearIvModel>(1, data_dim - 2);
        return std::make_unique<ExponentialIvModel>(1, data_dim - 2);
    }
    throw ArgumentError("unknown model '" + id + "'");
}

std::vector<std::string> model_ids() { return {"mean", "example1", "example2", "linear-iv", "exp-iv"}; }

}  // namespace mrgmm::models
