#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "jumpsmp/errors.hpp"

namespace jumpsmp {

/// Polynomial basis of total degree <= degree in the (standardized) features.
struct RegressionBasis {
  unsigned degree = 3;
};

/// A fitted least-squares projection y ~ sum_j c_j phi_j(features). Features are
/// centered and scaled before the monomials are formed; constant features drop out.
class ProjectionModel {
 public:
  double operator()(std::span<const double> point) const {
    double acc = 0.0;
    std::vector<double> z(center_.size());
    for (std::size_t d = 0; d < z.size(); ++d) {
      z[d] = scale_[d] > 0.0 ? (point[d] - center_[d]) / scale_[d] : 0.0;
    }
    for (std::size_t j = 0; j < exponents_.size(); ++j) acc += coef_[j] * monomial(j, z);
    return acc;
  }
  double operator()(double x) const {
    const double p[] = {x};
    return (*this)(p);
  }

  std::size_t dimension() const noexcept { return exponents_.size(); }
  const std::vector<double>& coefficients() const noexcept { return coef_; }
  const std::vector<double>& center() const noexcept { return center_; }
  const std::vector<double>& scale() const noexcept { return scale_; }
  const std::vector<std::vector<unsigned>>& exponents() const noexcept { return exponents_; }
  bool used_ridge() const noexcept { return ridge_; }

 private:
  friend class ProjectionBuilder;

  double monomial(std::size_t j, std::span<const double> z) const {
    double v = 1.0;
    for (std::size_t d = 0; d < z.size(); ++d) {
      for (unsigned e = 0; e < exponents_[j][d]; ++e) v *= z[d];
    }
    return v;
  }

  std::vector<double> center_, scale_;
  std::vector<std::vector<unsigned>> exponents_;
  std::vector<double> coef_;
  bool ridge_ = false;
};

/// Column-oriented feature view: features[d][path].
using FeatureColumns = std::vector<std::span<const double>>;

class ProjectionBuilder {
 public:
  static ProjectionModel fit(std::span<const double> values, const FeatureColumns& features,
                             RegressionBasis basis) {
    const std::size_t n = values.size();
    const std::size_t dims = features.size();
    for (const auto& col : features) {
      if (col.size() != n) throw InvalidArgument("feature and value lengths differ");
    }

    ProjectionModel model;
    model.center_.assign(dims, 0.0);
    model.scale_.assign(dims, 0.0);
    std::vector<bool> active(dims, false);
    for (std::size_t d = 0; d < dims; ++d) {
      double mean = 0.0;
      for (double v : features[d]) mean += v;
      mean /= static_cast<double>(std::max<std::size_t>(n, 1));
      double var = 0.0;
      for (double v : features[d]) var += (v - mean) * (v - mean);
      var /= static_cast<double>(std::max<std::size_t>(n, 1));
      model.center_[d] = mean;
      const double sd = std::sqrt(var);
      // Relative threshold: a feature that only differs by rounding is constant.
      if (sd > 1e-12 * std::max(1.0, std::abs(mean))) {
        model.scale_[d] = sd;
        active[d] = true;
      }
    }

    std::vector<unsigned> current(dims, 0);
    enumerate(0, basis.degree, active, current, model.exponents_);
    const std::size_t p = model.exponents_.size();
    if (n < p + 10) throw InsufficientPaths(n, p + 10);

    // Constant targets are reproduced exactly.
    if (n > 0 && std::all_of(values.begin(), values.end(), [&](double v) { return v == values[0]; })) {
      model.coef_.assign(p, 0.0);
      model.coef_[0] = values[0];
      return model;
    }

    Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(p));
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
    Eigen::VectorXd phi(static_cast<Eigen::Index>(p));
    std::vector<double> z(dims);
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t d = 0; d < dims; ++d) {
        z[d] = active[d] ? (features[d][k] - model.center_[d]) / model.scale_[d] : 0.0;
      }
      for (std::size_t j = 0; j < p; ++j) phi(static_cast<Eigen::Index>(j)) = model.monomial(j, z);
      gram.selfadjointView<Eigen::Lower>().rankUpdate(phi);
      rhs += values[k] * phi;
    }
    gram = gram.selfadjointView<Eigen::Lower>();

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram, Eigen::EigenvaluesOnly);
    const double max_ev = eig.eigenvalues().maxCoeff();
    const double min_ev = eig.eigenvalues().minCoeff();
    Eigen::VectorXd coef;
    if (max_ev > 0.0 && min_ev > 1e-12 * max_ev) {
      coef = gram.ldlt().solve(rhs);
    } else {
      model.ridge_ = true;
      const double lambda = 1e-8 * gram.trace() / static_cast<double>(p);
      Eigen::MatrixXd reg = gram;
      reg.diagonal().array() += std::max(lambda, 1e-300);
      coef = reg.ldlt().solve(rhs);
    }
    model.coef_.assign(coef.data(), coef.data() + coef.size());
    return model;
  }

 private:
  static void enumerate(std::size_t d, unsigned budget, const std::vector<bool>& active,
                        std::vector<unsigned>& current, std::vector<std::vector<unsigned>>& out) {
    if (d == active.size()) {
      out.push_back(current);
      return;
    }
    const unsigned top = active[d] ? budget : 0;
    for (unsigned e = 0; e <= top; ++e) {
      current[d] = e;
      enumerate(d + 1, budget - e, active, current, out);
    }
    current[d] = 0;
  }
};

inline ProjectionModel fit_projection(std::span<const double> values, std::span<const double> feature,
                                      RegressionBasis basis = {}) {
  return ProjectionBuilder::fit(values, FeatureColumns{feature}, basis);
}

/// Per-path estimate of E[values | features] by least squares on the polynomial basis.
inline std::vector<double> project_conditional(std::span<const double> values,
                                               const FeatureColumns& features,
                                               RegressionBasis basis = {}) {
  const auto model = ProjectionBuilder::fit(values, features, basis);
  std::vector<double> out(values.size());
  std::vector<double> point(features.size());
  for (std::size_t k = 0; k < values.size(); ++k) {
    for (std::size_t d = 0; d < features.size(); ++d) point[d] = features[d][k];
    out[k] = model(point);
  }
  return out;
}

inline std::vector<double> project_conditional(std::span<const double> values,
                                               std::span<const double> feature,
                                               RegressionBasis basis = {}) {
  return project_conditional(values, FeatureColumns{feature}, basis);
}

}  // namespace jumpsmp
