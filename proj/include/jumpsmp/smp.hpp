#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <ostream>
#include <span>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "jumpsmp/bsde.hpp"
#include "jumpsmp/model.hpp"
#include "jumpsmp/noise.hpp"
#include "jumpsmp/simulate.hpp"
#include "jumpsmp/stats.hpp"

namespace jumpsmp {

/// H = f + b p + sigma q + sum_k gamma(zeta_k) r_k intensity_k
inline double hamiltonian(double t, double x, double u, double p, double q, std::span<const double> r,
                          const ControlledCoefficients& c, const LevyMeasure& levy) {
  double h = c.f(t, x, u) + c.b(t, x, u) * p + c.sigma(t, x, u) * q;
  for (std::size_t a = 0; a < levy.size(); ++a) {
    h += c.gamma(t, x, u, levy[a].zeta) * r[a] * levy[a].intensity;
  }
  return h;
}

inline double hamiltonian_du(double t, double x, double u, double p, double q, std::span<const double> r,
                             const ControlledCoefficients& c, const LevyMeasure& levy) {
  double h = c.f_u(t, x, u) + c.b_u(t, x, u) * p + c.sigma_u(t, x, u) * q;
  for (std::size_t a = 0; a < levy.size(); ++a) {
    h += c.gamma_u(t, x, u, levy[a].zeta) * r[a] * levy[a].intensity;
  }
  return h;
}

inline double hamiltonian_dx(double t, double x, double u, double p, double q, std::span<const double> r,
                             const ControlledCoefficients& c, const LevyMeasure& levy) {
  double h = c.f_x(t, x, u) + c.b_x(t, x, u) * p + c.sigma_x(t, x, u) * q;
  for (std::size_t a = 0; a < levy.size(); ++a) {
    h += c.gamma_x(t, x, u, levy[a].zeta) * r[a] * levy[a].intensity;
  }
  return h;
}

/// Partials (f_x, b_x, sigma_x, gamma_x) along the (t, X, u) of a forward run.
inline LinearDriverField linearize_along(const ControlledCoefficients& c, const PathBundle& paths) {
  return [&c, &paths](std::size_t k, std::size_t i, LinearDriverPoint& pt) {
    const double t = paths.grid.time(i);
    const double x = paths.X(k, i);
    const double u = paths.u(k, i);
    pt.f_x = c.f_x(t, x, u);
    pt.b_x = c.b_x(t, x, u);
    pt.sigma_x = c.sigma_x(t, x, u);
    const auto& levy = paths.noise->levy;
    for (std::size_t a = 0; a < levy.size(); ++a) pt.gamma_x[a] = c.gamma_x(t, x, u, levy[a].zeta);
  };
}

struct AdjointRun {
  PathBundle forward;
  AdjointTriple adjoint;
};

/// Forward Euler run of the candidate and its adjoint through the explicit Gamma formula.
inline AdjointRun adjoint_for(const ControlLaw& candidate, const ControlledCoefficients& c,
                              const NoisePtr& noise, double x0, RegressionBasis basis = {}) {
  auto forward = euler_forward(c, candidate, noise, x0);
  const std::size_t n = forward.grid.n_steps();
  std::vector<double> terminal(forward.n_paths);
  for (std::size_t k = 0; k < forward.n_paths; ++k) terminal[k] = c.g_x(forward.X(k, n));
  auto adjoint = solve_linear_explicit(linearize_along(c, forward), terminal, forward.X, noise, basis);
  return {std::move(forward), std::move(adjoint)};
}

/// The same adjoint by the backward regression scheme with driver -dH/dx; used to
/// cross-check adjoint_for.
inline AdjointTriple adjoint_by_regression(const ControlledCoefficients& c, const PathBundle& forward,
                                           RegressionBasis basis = {}) {
  const auto& levy = forward.noise->levy;
  const auto& grid = forward.grid;
  PathwiseBsdeDriver driver = [&](std::size_t k, std::size_t i, double p, double q,
                                  std::span<const double> r) {
    const double t = grid.time(i);
    return -hamiltonian_dx(t, forward.X(k, i), forward.u(k, i), p, q, r, c, levy);
  };
  return solve_regression(driver, [&c](double x) { return c.g_x(x); }, forward, basis);
}

struct SpikeSpec {
  double tau = 0.0;
  double epsilon = 0.0;
  /// Constant value or feedback on X(tau).
  std::variant<double, std::function<double(double)>> v = 0.0;

  double value_at(double x_at_tau) const {
    if (const auto* c = std::get_if<double>(&v)) return *c;
    return std::get<1>(v)(x_at_tau);
  }
};

struct SpikeWindow {
  std::size_t first;
  std::size_t last;  // inclusive
  double length(const TimeGrid& grid) const { return static_cast<double>(last - first + 1) * grid.dt(); }
};

/// Steps whose interval [t_i, t_{i+1}) intersects [tau, tau + epsilon).
inline SpikeWindow spike_window(const TimeGrid& grid, const SpikeSpec& s) {
  const double T = grid.horizon();
  if (!(s.tau >= 0.0 && s.tau < T)) throw InvalidArgument("spike tau must lie in [0, T)");
  if (!(s.epsilon > 0.0) || s.tau + s.epsilon > T * (1.0 + 1e-12)) {
    throw InvalidArgument("spike epsilon must be > 0 with tau + epsilon <= T");
  }
  const double dt = grid.dt();
  const auto n = grid.n_steps();
  const auto first = std::min<std::size_t>(static_cast<std::size_t>(std::floor(s.tau / dt + 1e-9)), n - 1);
  const double end = std::ceil((s.tau + s.epsilon) / dt - 1e-9);
  auto last = end <= 0.0 ? std::size_t{0} : static_cast<std::size_t>(end) - 1;
  last = std::clamp(last, first, n - 1);
  return {first, last};
}

inline ControlLaw spike_perturb(const ControlLaw& base, const SpikeSpec& spike, const TimeGrid& grid) {
  if (const auto* c = std::get_if<double>(&spike.v); c && !base.control_set().contains(*c)) {
    throw InvalidArgument("spike value outside the control set");
  }
  const auto w = spike_window(grid, spike);
  return ControlLaw::spiked(base, w.first, w.last, [spike](double x) { return spike.value_at(x); });
}

struct PerformanceEstimate {
  double estimate = 0.0;
  double se = 0.0;
  std::vector<double> per_path;
};

/// J = E[sum_i f(t_i, X_i, u_i) dt + g(X_N)] with a left Riemann sum.
inline PerformanceEstimate performance_J(const ControlLaw& law, const ControlledCoefficients& c,
                                         const NoisePtr& noise, double x0) {
  const auto paths = euler_forward(c, law, noise, x0);
  const std::size_t n = paths.grid.n_steps();
  const double dt = paths.grid.dt();
  PerformanceEstimate out;
  out.per_path.assign(paths.n_paths, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = paths.grid.time(i);
    for (std::size_t k = 0; k < paths.n_paths; ++k) {
      out.per_path[k] += c.f(t, paths.X(k, i), paths.u(k, i)) * dt;
    }
  }
  for (std::size_t k = 0; k < paths.n_paths; ++k) {
    out.per_path[k] += c.g(paths.X(k, n));
    if (!std::isfinite(out.per_path[k])) throw NonFiniteState(k, n);
  }
  const auto est = estimate_mean(out.per_path);
  out.estimate = est.mean;
  out.se = est.se;
  return out;
}

enum class VariationalMode {
  Direct,             // Euler on the linear variational SDEs
  ClosedForm,         // explicit linear solution on the window, then the exponential
  ClosedFormAsPrinted // window formula with the printed Upsilon and "-1" jump term
};

namespace detail {

struct SpikeContext {
  PathBundle base;
  SpikeWindow window;
  std::vector<double> v;  // per path
};

inline SpikeContext spike_context(const SpikeSpec& spike, const ControlledCoefficients& c,
                                  const NoisePtr& noise, double x0, const ControlLaw& base) {
  auto paths = euler_forward(c, base, noise, x0);
  const auto w = spike_window(paths.grid, spike);
  std::vector<double> v(paths.n_paths);
  for (std::size_t k = 0; k < paths.n_paths; ++k) {
    v[k] = base.control_set().clamp(spike.value_at(paths.X(k, w.first)));
  }
  return {std::move(paths), w, std::move(v)};
}

}  // namespace detail

/// Z = X^eps - X^ on the whole grid (zero before the spike), with the tilde
/// coefficients evaluated at (X^, u^).
inline PathArray variational_Z(const SpikeSpec& spike, VariationalMode mode, const ControlledCoefficients& c,
                               const NoisePtr& noise, double x0, const ControlLaw& base) {
  const auto ctx = detail::spike_context(spike, c, noise, x0, base);
  const auto& paths = ctx.base;
  const auto& grid = paths.grid;
  const auto& levy = noise->levy;
  const std::size_t n = grid.n_steps();
  const std::size_t m = paths.n_paths;
  const std::size_t atoms = levy.size();
  const double dt = grid.dt();
  const auto [first, last] = ctx.window;

  auto delta = [&](std::size_t k, std::size_t i) {
    return i >= first && i <= last ? ctx.v[k] - paths.u(k, i) : 0.0;
  };

  if (mode == VariationalMode::Direct) {
    PathArray Z(m, n + 1, 0.0);
    JumpCursor cursor(*noise);
    for (std::size_t i = 0; i < n; ++i) {
      const double t = grid.time(i);
      for (std::size_t k = 0; k < m; ++k) {
        const auto counts = cursor.at(k, i);
        if (i < first) continue;
        const double x = paths.X(k, i), u = paths.u(k, i), z = Z(k, i), d = delta(k, i);
        double next = z + (c.b_x(t, x, u) * z + c.b_u(t, x, u) * d) * dt +
                      (c.sigma_x(t, x, u) * z + c.sigma_u(t, x, u) * d) * noise->dB(k, i);
        for (std::size_t a = 0; a < atoms; ++a) {
          const double zeta = levy[a].zeta;
          next += (c.gamma_x(t, x, u, zeta) * z + c.gamma_u(t, x, u, zeta) * d) *
                  (static_cast<double>(counts[a]) - levy[a].intensity * dt);
        }
        if (!std::isfinite(next)) throw NonFiniteState(k, i + 1);
        Z(k, i + 1) = next;
      }
    }
    return Z;
  }

  PathArray Z(m, n + 1, 0.0);
  if (mode == VariationalMode::ClosedForm) {
    LinearField window_field = [&](std::size_t k, std::size_t i, LinearStep& st) {
      const double t = grid.time(i);
      const double x = paths.X(k, i), u = paths.u(k, i), d = delta(k, i);
      st.b0 = c.b_u(t, x, u) * d;
      st.b1 = c.b_x(t, x, u);
      st.s0 = c.sigma_u(t, x, u) * d;
      st.s1 = c.sigma_x(t, x, u);
      for (std::size_t a = 0; a < atoms; ++a) {
        st.gamma0[a] = c.gamma_u(t, x, u, levy[a].zeta) * d;
        st.gamma1[a] = c.gamma_x(t, x, u, levy[a].zeta);
      }
    };
    const auto inside = linear_closed_form(window_field, *noise, std::vector<double>{0.0}, first);
    for (std::size_t i = first; i <= last + 1; ++i) {
      for (std::size_t k = 0; k < m; ++k) Z(k, i) = inside(k, i);
    }
  } else {
    // Printed window formula, integrated from tau.
    JumpCursor cursor(*noise);
    std::vector<double> log_ups(m, 0.0), y(m, 0.0);
    for (std::size_t i = 0; i <= last; ++i) {
      const double t = grid.time(i);
      for (std::size_t k = 0; k < m; ++k) {
        const auto counts = cursor.at(k, i);
        if (i < first) continue;
        const double x = paths.X(k, i), u = paths.u(k, i), d = delta(k, i);
        const double bx = c.b_x(t, x, u), sx = c.sigma_x(t, x, u);
        const double dB = noise->dB(k, i);
        double drift = -bx + sx * sx * d * d - 0.5 * sx * sx;
        double y_drift = c.b_u(t, x, u) * d;
        double y_jump = 0.0, log_jump = 0.0;
        for (std::size_t a = 0; a < atoms; ++a) {
          const double zeta = levy[a].zeta, lambda = levy[a].intensity;
          const double gx = c.gamma_x(t, x, u, zeta), gu = c.gamma_u(t, x, u, zeta);
          if (!(1.0 + gx >= kSingularityMargin)) throw SingularJumpCoefficient("1 + gamma_x below margin");
          const double comp = static_cast<double>(counts[a]) - lambda * dt;
          drift += gx * lambda;
          y_drift += (1.0 / (1.0 + gx) - 1.0) * gu * d * lambda;
          y_jump += (gu * d / (1.0 + gx) - 1.0) * comp;
          log_jump -= std::log(1.0 + gx) * static_cast<double>(counts[a]);
        }
        const double ups = std::exp(log_ups[k]);
        y[k] += ups * (y_drift * dt + c.sigma_u(t, x, u) * d * dB + y_jump);
        log_ups[k] += drift * dt - sx * dB + log_jump;
        Z(k, i + 1) = y[k] * std::exp(-log_ups[k]);
      }
    }
  }

  // After the window Z is a stochastic exponential started from Z(tau + eps).
  if (last + 1 < n) {
    LinearField after = [&](std::size_t k, std::size_t i, LinearStep& st) {
      const double t = grid.time(i);
      const double x = paths.X(k, i), u = paths.u(k, i);
      st.b1 = c.b_x(t, x, u);
      st.s1 = c.sigma_x(t, x, u);
      for (std::size_t a = 0; a < atoms; ++a) st.gamma1[a] = c.gamma_x(t, x, u, levy[a].zeta);
    };
    std::vector<double> start(m);
    for (std::size_t k = 0; k < m; ++k) start[k] = Z(k, last + 1);
    const auto tail = linear_closed_form(after, *noise, start, last + 1);
    for (std::size_t i = last + 2; i <= n; ++i) {
      for (std::size_t k = 0; k < m; ++k) Z(k, i) = tail(k, i);
    }
  }
  return Z;
}

struct SmpCell {
  double tau = 0.0;
  double v = 0.0;
  double eps = 0.0;
  double statistic = 0.0;  // E[dH/du (v - u^)]
  double statistic_se = 0.0;
  double diff_quotient = 0.0;  // (J(u^eps) - J(u^)) / eps
  double diff_quotient_se = 0.0;
  double hamiltonian_gap = 0.0;  // E[H(v) - H(u^)]
  double hamiltonian_gap_se = 0.0;
  bool pass = false;
};

struct SmpVerdict {
  std::vector<double> tau_grid, v_grid, eps_grid;
  std::vector<SmpCell> cells;  // ordered tau, v, eps
  bool pass = false;

  const SmpCell& cell(std::size_t tau_idx, std::size_t v_idx, std::size_t eps_idx) const {
    return cells[(tau_idx * v_grid.size() + v_idx) * eps_grid.size() + eps_idx];
  }
};

/// Monte Carlo test of dH/du(tau, X^, u^)(v - u^) <= 0 on a (tau, v) grid, with
/// spike difference quotients on common noise for every eps.
///
/// The p-term of dH/du uses the pre-projection adjoint sample: (v - u^(tau)) is
/// F_tau-measurable, so the mean is unchanged and the standard error reflects the
/// sampling noise of the adjoint. q and r come from the regression extraction.
inline SmpVerdict check_necessary_condition(const ControlLaw& candidate, const ControlledCoefficients& c,
                                            const NoisePtr& noise, double x0, std::vector<double> tau_grid,
                                            std::vector<double> v_grid, std::vector<double> eps_grid,
                                            RegressionBasis basis = {}) {
  for (double v : v_grid) {
    if (!c.control_set.contains(v)) throw InvalidArgument("v grid leaves the control set");
  }
  std::sort(eps_grid.begin(), eps_grid.end(), std::greater<>());

  const auto base = realize_open_loop(c, candidate, noise, x0);
  const auto run = adjoint_for(base, c, noise, x0, basis);
  const auto& fwd = run.forward;
  const auto& adj = run.adjoint;
  const auto& levy = noise->levy;
  const auto j_base = performance_J(base, c, noise, x0);
  const std::size_t m = fwd.n_paths;

  SmpVerdict out{tau_grid, v_grid, eps_grid, {}, true};
  std::vector<double> stat(m), gap(m), dq(m), r(levy.size());
  for (double tau : tau_grid) {
    const std::size_t s = fwd.grid.step_of(tau);
    const double t = fwd.grid.time(s);
    for (double v : v_grid) {
      for (std::size_t k = 0; k < m; ++k) {
        const double x = fwd.X(k, s), u = fwd.u(k, s);
        for (std::size_t a = 0; a < levy.size(); ++a) r[a] = adj.r[a](k, s);
        const double p = adj.p_sample(k, s), q = adj.q(k, s);
        stat[k] = hamiltonian_du(t, x, u, p, q, r, c, levy) * (v - u);
        gap[k] = hamiltonian(t, x, v, p, q, r, c, levy) - hamiltonian(t, x, u, p, q, r, c, levy);
      }
      const auto st = estimate_mean(stat);
      const auto hg = estimate_mean(gap);

      const std::size_t first_cell = out.cells.size();
      for (double eps : eps_grid) {
        const SpikeSpec spike{tau, eps, v};
        const auto w = spike_window(fwd.grid, spike);
        const auto j_eps = performance_J(spike_perturb(base, spike, fwd.grid), c, noise, x0);
        const double len = w.length(fwd.grid);
        for (std::size_t k = 0; k < m; ++k) dq[k] = (j_eps.per_path[k] - j_base.per_path[k]) / len;
        const auto d = estimate_mean(dq);
        out.cells.push_back({tau, v, eps, st.mean, st.se, d.mean, d.se, hg.mean, hg.se, false});
      }

      bool ok = st.mean <= 3.0 * st.se;
      for (std::size_t e = first_cell + 1; e < out.cells.size(); ++e) {
        const auto& coarse = out.cells[e - 1];
        const auto& fine = out.cells[e];
        const double band = 3.0 * (coarse.diff_quotient_se + fine.diff_quotient_se);
        ok = ok && std::abs(fine.diff_quotient - st.mean) <= std::abs(coarse.diff_quotient - st.mean) + band;
      }
      for (std::size_t e = first_cell; e < out.cells.size(); ++e) out.cells[e].pass = ok;
      out.pass = out.pass && ok;
    }
  }
  return out;
}

inline void to_json(nlohmann::json& j, const SmpCell& c) {
  j = nlohmann::json{{"tau", c.tau},
                     {"v", c.v},
                     {"eps", c.eps},
                     {"statistic", c.statistic},
                     {"se", c.statistic_se},
                     {"diff_quotient", c.diff_quotient},
                     {"diff_quotient_se", c.diff_quotient_se},
                     {"hamiltonian_gap", c.hamiltonian_gap},
                     {"hamiltonian_gap_se", c.hamiltonian_gap_se},
                     {"pass", c.pass}};
}

inline void to_json(nlohmann::json& j, const SmpVerdict& v) {
  j = nlohmann::json{{"tau_grid", v.tau_grid}, {"v_grid", v.v_grid}, {"eps_grid", v.eps_grid},
                     {"cells", v.cells},       {"pass", v.pass}};
}

/// CSV columns: tau, v, eps, statistic, se, diff_quotient, pass.
inline void write_verdict_csv(std::ostream& os, const SmpVerdict& v) {
  os << "tau,v,eps,statistic,se,diff_quotient,pass\n";
  for (const auto& c : v.cells) {
    os << format_double(c.tau) << ',' << format_double(c.v) << ',' << format_double(c.eps) << ','
       << format_double(c.statistic) << ',' << format_double(c.statistic_se) << ','
       << format_double(c.diff_quotient) << ',' << (c.pass ? "true" : "false") << '\n';
  }
}

}  // namespace jumpsmp
