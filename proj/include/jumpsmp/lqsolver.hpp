#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <ostream>
#include <vector>

#include <json.hpp>

#include "jumpsmp/bsde.hpp"
#include "jumpsmp/model.hpp"
#include "jumpsmp/noise.hpp"
#include "jumpsmp/regression.hpp"
#include "jumpsmp/simulate.hpp"
#include "jumpsmp/smp.hpp"

namespace jumpsmp {

struct LqParams {
  double x0 = 1.0;
  double sigma = 0.1;
  LevyMeasure levy;
  std::function<double(double)> gamma_map = [](double zeta) { return zeta; };
  TimeGrid grid{1.0, 100};
  std::size_t n_paths = 10000;
  std::uint64_t seed = 1;
  unsigned max_iters = 100;
  double damping = 0.5;
  double tol = 1e-6;
  RegressionBasis basis{};

  void validate() const {
    if (!(tol > 0.0)) throw InvalidArgument("tol must be positive");
    if (max_iters < 1) throw InvalidArgument("max_iters must be at least 1");
    if (!(damping > 0.0 && damping <= 1.0)) throw InvalidArgument("damping must lie in (0, 1]");
    if (n_paths < 1) throw InvalidArgument("n_paths must be positive");
  }
};

struct LqSolution {
  NoisePtr noise;
  PathArray u_hat;                       // open-loop values on `noise`, n_paths x N
  std::vector<ProjectionModel> p_model;  // per step: x -> p^(t_i, x)
  AdjointTriple p_hat;
  std::vector<double> residual_history;  // L2(dt x P) control change per iteration
  double fixed_point_residual = 0.0;     // || u^ - max(p^(u^), 0) || recomputed once
  double fbsde_residual = 0.0;           // || p^(T) + X^(T) ||
  bool converged = false;
  unsigned iterations = 0;

  /// u^(t, x) = max(p^ regression at the step of t, 0), usable on fresh noise.
  ControlLaw feedback_law() const {
    auto models = p_model;
    const TimeGrid grid = p_hat.grid;
    return ControlLaw::feedback(
        [models = std::move(models), grid](double t, double x) {
          return std::max(models[grid.step_of(t)](x), 0.0);
        },
        ControlSet::nonnegative());
  }
};

/// sqrt(E[sum_i (a_i - b_i)^2 dt]) over the first n_cols columns.
inline double l2_dt_norm(const PathArray& a, const PathArray* b, std::size_t n_cols, double dt) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n_cols; ++i) {
    const auto ca = a.column(i);
    for (std::size_t k = 0; k < ca.size(); ++k) {
      const double d = b ? ca[k] - (*b)(k, i) : ca[k];
      acc += d * d;
    }
  }
  return std::sqrt(acc * dt / static_cast<double>(std::max<std::size_t>(a.n_paths(), 1)));
}

namespace detail {

/// p(t_i) = -E[X(T) | X(t_i)] for every step, with the fitted models.
inline PathArray lq_adjoint(const PathBundle& fwd, RegressionBasis basis, std::vector<ProjectionModel>* models) {
  const std::size_t n = fwd.grid.n_steps();
  const std::size_t m = fwd.n_paths;
  std::vector<double> target(m);
  const auto terminal = fwd.X.column(n);
  for (std::size_t k = 0; k < m; ++k) target[k] = -terminal[k];
  PathArray p(m, n + 1);
  if (models) models->clear();
  for (std::size_t i = 0; i < n; ++i) {
    const auto state = fwd.X.column(i);
    auto model = fit_projection(target, state, basis);
    for (std::size_t k = 0; k < m; ++k) p(k, i) = model(state[k]);
    if (models) models->push_back(std::move(model));
  }
  for (std::size_t k = 0; k < m; ++k) p(k, n) = target[k];
  return p;
}

}  // namespace detail

/// Damped Picard iteration u <- (1 - theta) u + theta max(-E[X^u(T) | X^u(t)], 0)
/// on one fixed noise bundle, starting from u = 0.
inline LqSolution solve_constrained(const LqParams& params) {
  params.validate();
  const auto coeffs = build_lq_coefficients(params.sigma, params.levy, params.gamma_map);
  const auto noise = sample_noise(params.grid, params.levy, params.n_paths, params.seed);
  const std::size_t n = params.grid.n_steps();
  const std::size_t m = params.n_paths;
  const double dt = params.grid.dt();

  std::vector<double> history;
  bool converged = false;
  unsigned iterations = 0;
  PathArray u(m, n, 0.0);
  PathArray best = u;
  double best_change = std::numeric_limits<double>::infinity();
  for (unsigned it = 1; it <= params.max_iters; ++it) {
    const auto fwd = euler_forward(coeffs, ControlLaw::open_loop(u, ControlSet::nonnegative()), noise, params.x0);
    const auto p = detail::lq_adjoint(fwd, params.basis, nullptr);
    PathArray next(m, n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < m; ++k) {
        next(k, i) = (1.0 - params.damping) * u(k, i) + params.damping * std::max(p(k, i), 0.0);
      }
    }
    const double change = l2_dt_norm(next, &u, n, dt);
    if (!std::isfinite(change)) throw NonFiniteState(0, 0);
    history.push_back(change);
    iterations = it;
    u = std::move(next);
    if (change < best_change) {
      best_change = change;
      best = u;
    }
    if (change < params.tol) {
      converged = true;
      break;
    }
  }
  if (!converged) u = std::move(best);

  const auto law = ControlLaw::open_loop(u, ControlSet::nonnegative());
  const auto fwd = euler_forward(coeffs, law, noise, params.x0);
  std::vector<ProjectionModel> models;
  const auto p = detail::lq_adjoint(fwd, params.basis, &models);
  PathArray projected(m, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < m; ++k) projected(k, i) = std::max(p(k, i), 0.0);
  }
  const double fixed_point = l2_dt_norm(u, &projected, n, dt);

  auto adjoint = adjoint_for(law, coeffs, noise, params.x0, params.basis).adjoint;
  double terminal = 0.0;
  for (std::size_t k = 0; k < m; ++k) {
    const double d = adjoint.p(k, n) + fwd.X(k, n);
    terminal += d * d;
  }
  return LqSolution{noise,
                    std::move(u),
                    std::move(models),
                    std::move(adjoint),
                    std::move(history),
                    fixed_point,
                    std::sqrt(terminal / static_cast<double>(m)),
                    converged,
                    iterations};
}

/// u*(t_i) = -X(t_i) / (T + 1 - t_i).
inline PathArray closed_form_unconstrained(const PathArray& X, const TimeGrid& grid) {
  const std::size_t n = grid.n_steps();
  if (X.n_cols() < n) throw InvalidArgument("state array shorter than the grid");
  PathArray u(X.n_paths(), n);
  for (std::size_t i = 0; i < n; ++i) {
    const double denom = grid.horizon() + 1.0 - grid.time(i);
    for (std::size_t k = 0; k < X.n_paths(); ++k) u(k, i) = -X(k, i) / denom;
  }
  return u;
}

struct ComparisonReport {
  double distance = 0.0;  // relative L2(dt x P) distance of u^ from u*
  PerformanceEstimate j_constrained;
  PerformanceEstimate j_unconstrained;
  double binding_fraction = 0.0;  // share of (path, step) cells with p^ < 0
  double u_hat_norm = 0.0;
};

inline ComparisonReport compare_to_unconstrained(const LqSolution& sol, const LqParams& params) {
  const auto coeffs = build_lq_coefficients(params.sigma, params.levy, params.gamma_map);
  auto free_coeffs = coeffs;
  free_coeffs.control_set = ControlSet::unbounded();
  const double T = params.grid.horizon();
  const auto star = ControlLaw::feedback([T](double t, double x) { return -x / (T + 1.0 - t); },
                                         ControlSet::unbounded());
  const auto star_paths = euler_forward(free_coeffs, star, sol.noise, params.x0);
  const std::size_t n = params.grid.n_steps();

  ComparisonReport out;
  out.distance = relative_l2_distance(star_paths.u, sol.u_hat, n);
  out.j_constrained =
      performance_J(ControlLaw::open_loop(sol.u_hat, ControlSet::nonnegative()), coeffs, sol.noise, params.x0);
  out.j_unconstrained = performance_J(star, free_coeffs, sol.noise, params.x0);
  std::size_t binding = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (double v : sol.p_hat.p.column(i)) binding += v < 0.0 ? 1 : 0;
  }
  out.binding_fraction = static_cast<double>(binding) / static_cast<double>(n * sol.p_hat.n_paths);
  out.u_hat_norm = l2_dt_norm(sol.u_hat, nullptr, n, params.grid.dt());
  return out;
}

/// CSV columns: step, t, center, scale, c0, c1, ...; c_j multiplies ((x - center) / scale)^j.
inline void write_feedback_csv(std::ostream& os, const LqSolution& sol) {
  std::size_t width = 0;
  for (const auto& m : sol.p_model) width = std::max(width, m.dimension());
  os << "step,t,center,scale";
  for (std::size_t j = 0; j < width; ++j) os << ",c" << j;
  os << '\n';
  for (std::size_t i = 0; i < sol.p_model.size(); ++i) {
    const auto& m = sol.p_model[i];
    const double center = m.center().empty() ? 0.0 : m.center()[0];
    const double scale = m.scale().empty() ? 0.0 : m.scale()[0];
    os << i << ',' << format_double(sol.p_hat.grid.time(i)) << ',' << format_double(center) << ','
       << format_double(scale);
    for (std::size_t j = 0; j < width; ++j) {
      os << ',';
      if (j < m.dimension()) os << format_double(m.coefficients()[j]);
    }
    os << '\n';
  }
}

inline void write_residual_csv(std::ostream& os, const LqSolution& sol) {
  os << "iteration,change\n";
  for (std::size_t i = 0; i < sol.residual_history.size(); ++i) {
    os << i + 1 << ',' << format_double(sol.residual_history[i]) << '\n';
  }
}

inline void to_json(nlohmann::json& j, const ComparisonReport& r) {
  j = nlohmann::json{{"distance", r.distance},
                     {"j_constrained", r.j_constrained.estimate},
                     {"j_constrained_se", r.j_constrained.se},
                     {"j_unconstrained", r.j_unconstrained.estimate},
                     {"j_unconstrained_se", r.j_unconstrained.se},
                     {"binding_fraction", r.binding_fraction},
                     {"u_hat_norm", r.u_hat_norm}};
}

}  // namespace jumpsmp
