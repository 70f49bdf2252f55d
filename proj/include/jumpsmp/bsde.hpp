#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "jumpsmp/noise.hpp"
#include "jumpsmp/path_array.hpp"
#include "jumpsmp/regression.hpp"
#include "jumpsmp/simulate.hpp"

namespace jumpsmp {

/// Grid values of a BSDE solution (p, q, r). q and r live on [t_i, t_{i+1}).
struct AdjointTriple {
  TimeGrid grid;
  std::size_t n_paths = 0;
  PathArray p;               // n_paths x (N + 1)
  PathArray q;               // n_paths x N
  std::vector<PathArray> r;  // per atom, n_paths x N
  /// Pre-projection value whose F_t-conditional expectation is p (explicit solver only).
  PathArray p_sample;
  /// Atoms with intensity * dt below 1e-10; their r is set to zero.
  std::vector<bool> unidentifiable;
};

struct QrArrays {
  PathArray q;
  std::vector<PathArray> r;
  std::vector<bool> unidentifiable;
};

inline constexpr double kMinIdentifiableIntensity = 1e-10;

namespace detail {

/// q_i and r_i from the regression of increment * (dB_i, dN~_i) on the time-t_i state.
inline void fill_qr_step(std::size_t i, std::span<const double> increment, std::span<const double> state,
                         const NoiseBundle& noise, RegressionBasis basis, QrArrays& out) {
  const std::size_t m = noise.n_paths;
  const double dt = noise.grid.dt();
  std::vector<double> target(m);

  bool any_variation = false;
  for (double v : increment) any_variation = any_variation || v != 0.0;

  if (any_variation) {
    for (std::size_t k = 0; k < m; ++k) target[k] = increment[k] * noise.dB(k, i);
    const auto q = project_conditional(target, state, basis);
    for (std::size_t k = 0; k < m; ++k) out.q(k, i) = q[k] / dt;
  }

  for (std::size_t a = 0; a < noise.levy.size(); ++a) {
    const double mass = noise.levy[a].intensity * dt;
    if (mass < kMinIdentifiableIntensity || !any_variation) continue;
    for (std::size_t k = 0; k < m; ++k) target[k] = increment[k] * noise.compensated(k, i, a);
    const auto r = project_conditional(target, state, basis);
    for (std::size_t k = 0; k < m; ++k) out.r[a](k, i) = r[k] / mass;
  }
}

inline QrArrays empty_qr(const NoiseBundle& noise) {
  const std::size_t m = noise.n_paths;
  const std::size_t n = noise.grid.n_steps();
  QrArrays out{PathArray(m, n), std::vector<PathArray>(noise.levy.size(), PathArray(m, n)), {}};
  for (const auto& a : noise.levy.atoms()) {
    out.unidentifiable.push_back(a.intensity * noise.grid.dt() < kMinIdentifiableIntensity);
  }
  return out;
}

}  // namespace detail

/// Integrands of the martingale part of p, estimated step by step as
///   q_i = E[(p_{i+1} - p_i) dB_i | X_i] / dt,
///   r_{i,k} = E[(p_{i+1} - p_i) dN~_{i,k} | X_i] / (intensity_k dt).
inline QrArrays extract_qr(const PathArray& p, const PathArray& state, const NoiseBundle& noise,
                           RegressionBasis basis = {}) {
  const std::size_t n = noise.grid.n_steps();
  if (p.n_cols() != n + 1 || state.n_cols() < n || p.n_paths() != noise.n_paths) {
    throw InvalidArgument("adjoint and state arrays do not match the noise grid");
  }
  auto out = detail::empty_qr(noise);
  std::vector<double> inc(noise.n_paths);
  for (std::size_t i = 0; i < n; ++i) {
    const auto now = p.column(i);
    const auto next = p.column(i + 1);
    for (std::size_t k = 0; k < noise.n_paths; ++k) inc[k] = next[k] - now[k];
    detail::fill_qr_step(i, inc, state.column(i), noise, basis, out);
  }
  return out;
}

/// Partial derivatives entering the linear adjoint driver at one (path, step).
struct LinearDriverPoint {
  double f_x = 0.0;
  double b_x = 0.0;
  double sigma_x = 0.0;
  std::vector<double> gamma_x;  // per atom
};

/// Fills `out` for (path, step); `out` is zeroed before every call.
using LinearDriverField = std::function<void(std::size_t path, std::size_t step, LinearDriverPoint& out)>;

/// Linear adjoint dp = -(f_x + b_x p + sigma_x q + sum_k gamma_x r_k intensity_k) dt + q dB + r dN~
/// solved through
///   p(t_i) = E[Gamma(T)/Gamma(t_i) terminal + sum_{j>=i} Gamma(t_j)/Gamma(t_i) f_x(t_j) dt | X(t_i)],
/// with Gamma the stochastic exponential of (b_x, sigma_x, gamma_x).
inline AdjointTriple solve_linear_explicit(const LinearDriverField& driver, std::span<const double> terminal,
                                           const PathArray& state, const NoisePtr& noise,
                                           RegressionBasis basis = {}) {
  const auto& grid = noise->grid;
  const std::size_t n = grid.n_steps();
  const std::size_t m = noise->n_paths;
  const std::size_t atoms = noise->levy.size();
  const double dt = grid.dt();
  if (terminal.size() != m || state.n_paths() != m || state.n_cols() != n + 1) {
    throw InvalidArgument("terminal/state sizes do not match the noise bundle");
  }

  // One sweep caches f_x and hands (b_x, sigma_x, gamma_x) to the linear closed form.
  PathArray f_x(m, n);
  LinearDriverPoint pt;
  LinearField field = [&](std::size_t k, std::size_t i, LinearStep& st) {
    pt.f_x = pt.b_x = pt.sigma_x = 0.0;
    pt.gamma_x.assign(atoms, 0.0);
    driver(k, i, pt);
    f_x(k, i) = pt.f_x;
    st.b1 = pt.b_x;
    st.s1 = pt.sigma_x;
    for (std::size_t a = 0; a < atoms; ++a) st.gamma1[a] = pt.gamma_x[a];
  };
  const PathArray gamma = linear_closed_form(field, *noise, 1.0);

  AdjointTriple out{grid, m, PathArray(m, n + 1), {}, {}, PathArray(m, n + 1), {}};
  std::vector<double> acc(m);
  for (std::size_t k = 0; k < m; ++k) {
    acc[k] = gamma(k, n) * terminal[k];
    out.p(k, n) = terminal[k];
    out.p_sample(k, n) = terminal[k];
  }
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t k = 0; k < m; ++k) {
      acc[k] += gamma(k, i) * f_x(k, i) * dt;
      out.p_sample(k, i) = acc[k] / gamma(k, i);
    }
    const auto proj = project_conditional(out.p_sample.column(i), state.column(i), basis);
    std::copy(proj.begin(), proj.end(), out.p.column(i).begin());
  }

  auto qr = extract_qr(out.p, state, *noise, basis);
  out.q = std::move(qr.q);
  out.r = std::move(qr.r);
  out.unidentifiable = std::move(qr.unidentifiable);
  return out;
}

/// dt-coefficient of dp: dp = driver(t, x, p, q, r) dt + q dB + sum_k r_k dN~_k.
using BsdeDriver = std::function<double(double t, double x, double p, double q, std::span<const double> r)>;

/// Driver that may read anything else known along the path (for example the control).
using PathwiseBsdeDriver =
    std::function<double(std::size_t path, std::size_t step, double p, double q, std::span<const double> r)>;

struct RegressionSolverOptions {
  double tolerance = 1e-8;
  unsigned max_iterations = 50;
};

/// Backward least-squares scheme
///   p_i = E[p_{i+1} | X_i] - dt * driver(t_i, X_i, p_i, q_i, r_i),
/// with q_i, r_i from the increments of p_{i+1} and the implicit p_i resolved by
/// fixed-point iteration.
inline AdjointTriple solve_regression(const PathwiseBsdeDriver& driver,
                                      const std::function<double(double)>& terminal, const PathBundle& forward,
                                      RegressionBasis basis = {}, RegressionSolverOptions options = {}) {
  const auto& noise = *forward.noise;
  const auto& grid = forward.grid;
  const std::size_t n = grid.n_steps();
  const std::size_t m = forward.n_paths;
  const std::size_t atoms = noise.levy.size();
  const double dt = grid.dt();

  auto qr = detail::empty_qr(noise);
  AdjointTriple out{grid, m, PathArray(m, n + 1), {}, {}, {}, {}};
  for (std::size_t k = 0; k < m; ++k) out.p(k, n) = terminal(forward.X(k, n));

  std::vector<double> inc(m), current(m), r_point(atoms);
  for (std::size_t i = n; i-- > 0;) {
    const auto state = forward.X.column(i);
    const auto next = out.p.column(i + 1);
    const auto cond = project_conditional(next, state, basis);
    for (std::size_t k = 0; k < m; ++k) inc[k] = next[k] - cond[k];
    detail::fill_qr_step(i, inc, state, noise, basis, qr);

    std::copy(cond.begin(), cond.end(), current.begin());
    double previous = std::numeric_limits<double>::infinity();
    bool converged = false;
    for (unsigned it = 0; it < options.max_iterations; ++it) {
      double residual = 0.0;
      for (std::size_t k = 0; k < m; ++k) {
        for (std::size_t a = 0; a < atoms; ++a) r_point[a] = qr.r[a](k, i);
        const double updated = cond[k] - dt * driver(k, i, current[k], qr.q(k, i), r_point);
        residual = std::max(residual, std::abs(updated - current[k]));
        current[k] = updated;
      }
      if (!std::isfinite(residual)) throw NonFiniteState(0, i);
      if (residual < options.tolerance) {
        converged = true;
        break;
      }
      if (it > 0 && residual >= previous) {
        throw ContractionFailure("fixed-point residual stopped decreasing at step " + std::to_string(i));
      }
      previous = residual;
    }
    if (!converged) {
      throw ContractionFailure("fixed-point iteration hit its cap at step " + std::to_string(i));
    }
    std::copy(current.begin(), current.end(), out.p.column(i).begin());
  }
  out.q = std::move(qr.q);
  out.r = std::move(qr.r);
  out.unidentifiable = std::move(qr.unidentifiable);
  return out;
}

inline AdjointTriple solve_regression(const BsdeDriver& driver, const std::function<double(double)>& terminal,
                                      const PathBundle& forward, RegressionBasis basis = {},
                                      RegressionSolverOptions options = {}) {
  PathwiseBsdeDriver pathwise = [&](std::size_t k, std::size_t i, double p, double q,
                                    std::span<const double> r) {
    return driver(forward.grid.time(i), forward.X(k, i), p, q, r);
  };
  return solve_regression(pathwise, terminal, forward, basis, options);
}

/// sqrt(sum_i E[(a_i - b_i)^2] dt) / sqrt(sum_i E[a_i^2] dt) over columns 0..N-1.
inline double relative_l2_distance(const PathArray& a, const PathArray& b, std::size_t n_cols) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < n_cols; ++i) {
    const auto ca = a.column(i);
    const auto cb = b.column(i);
    for (std::size_t k = 0; k < ca.size(); ++k) {
      num += (ca[k] - cb[k]) * (ca[k] - cb[k]);
      den += ca[k] * ca[k];
    }
  }
  return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

/// CSV columns: path_id, step, t, p, q, r_atom0, r_atom1, ...; q and r are blank at step N.
inline void write_adjoint_csv(std::ostream& os, const AdjointTriple& adj, std::size_t max_paths) {
  os << "path_id,step,t,p,q";
  for (std::size_t a = 0; a < adj.r.size(); ++a) os << ",r_atom" << a;
  os << '\n';
  const std::size_t n = adj.grid.n_steps();
  for (std::size_t k = 0; k < std::min(max_paths, adj.n_paths); ++k) {
    for (std::size_t i = 0; i <= n; ++i) {
      os << k << ',' << i << ',' << format_double(adj.grid.time(i)) << ',' << format_double(adj.p(k, i))
         << ',';
      if (i < n) os << format_double(adj.q(k, i));
      for (const auto& r : adj.r) {
        os << ',';
        if (i < n) os << format_double(r(k, i));
      }
      os << '\n';
    }
  }
}

}  // namespace jumpsmp
