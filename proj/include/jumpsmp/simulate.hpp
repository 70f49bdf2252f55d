#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "jumpsmp/model.hpp"
#include "jumpsmp/noise.hpp"
#include "jumpsmp/path_array.hpp"

namespace jumpsmp {

/// Forward state paths driven by one NoiseBundle.
struct PathBundle {
  TimeGrid grid;
  std::size_t n_paths = 0;
  PathArray X;  // n_paths x (N + 1)
  PathArray u;  // n_paths x N
  NoisePtr noise;
};

/// Euler step for every path, jumps applied at the end of their bin and the
/// compensator -dt * sum_k gamma(zeta_k) intensity_k subtracted every step.
inline PathBundle euler_forward(const ControlledCoefficients& c, const ControlLaw& law,
                                const NoisePtr& noise, double x0) {
  const auto& grid = noise->grid;
  const auto& levy = noise->levy;
  const std::size_t n = grid.n_steps();
  const std::size_t m = noise->n_paths;
  const double dt = grid.dt();

  PathBundle out{grid, m, PathArray(m, n + 1, x0), PathArray(m, n), noise};
  std::vector<double> x_at_tau(m, x0);
  const std::size_t anchor = law.spike_anchor();
  JumpCursor cursor(*noise);

  for (std::size_t i = 0; i < n; ++i) {
    const double t = grid.time(i);
    for (std::size_t k = 0; k < m; ++k) {
      const double x = out.X(k, i);
      if (i == anchor) x_at_tau[k] = x;
      const double u = law.value(k, i, t, x, x_at_tau[k]);
      out.u(k, i) = u;

      double next = x + c.b(t, x, u) * dt + c.sigma(t, x, u) * noise->dB(k, i);
      const auto counts = cursor.at(k, i);
      for (std::size_t a = 0; a < levy.size(); ++a) {
        const double jump = c.gamma(t, x, u, levy[a].zeta);
        next += jump * (static_cast<double>(counts[a]) - levy[a].intensity * dt);
      }
      if (!std::isfinite(next)) throw NonFiniteState(k, i + 1);
      out.X(k, i + 1) = next;
    }
  }
  return out;
}

/// Runs the law once and freezes the emitted controls as open-loop values on this noise.
inline ControlLaw realize_open_loop(const ControlledCoefficients& c, const ControlLaw& law,
                                    const NoisePtr& noise, double x0) {
  auto paths = euler_forward(c, law, noise, x0);
  return ControlLaw::open_loop(std::move(paths.u), law.control_set());
}

/// Coefficients of dX = (b0 + b1 X) dt + (s0 + s1 X) dB + sum_k (gamma0_k + gamma1_k X) dN~_k
/// on one step of one path.
struct LinearStep {
  double b0 = 0.0, b1 = 0.0;
  double s0 = 0.0, s1 = 0.0;
  std::vector<double> gamma0, gamma1;  // per atom
};

/// Fills `out` for (path, step). `out` is zeroed before every call.
using LinearField = std::function<void(std::size_t path, std::size_t step, LinearStep& out)>;

/// Explicit solution X = Upsilon^{-1} Y of the general linear jump SDE, with
/// Upsilon = exp(Pi) built from the same increments as the Euler scheme and
/// Y accumulated with left-endpoint (Ito) weights. `x0` holds one value or one per path;
/// the state is frozen at x0 up to `first_step`.
inline PathArray linear_closed_form(const LinearField& field, const NoiseBundle& noise,
                                    std::span<const double> x0, std::size_t first_step = 0) {
  const auto& grid = noise.grid;
  const auto& levy = noise.levy;
  const std::size_t n = grid.n_steps();
  const std::size_t m = noise.n_paths;
  const std::size_t atoms = levy.size();
  const double dt = grid.dt();
  if (x0.size() != 1 && x0.size() != m) {
    throw InvalidArgument("initial values must be a scalar or one per path");
  }
  auto start = [&](std::size_t k) { return x0.size() == 1 ? x0[0] : x0[k]; };

  PathArray X(m, n + 1);
  std::vector<double> log_ups(m, 0.0), y(m);
  for (std::size_t k = 0; k < m; ++k) {
    y[k] = start(k);
    for (std::size_t i = 0; i <= std::min(first_step, n); ++i) X(k, i) = y[k];
  }

  LinearStep st;
  JumpCursor cursor(noise);
  for (std::size_t i = first_step; i < n; ++i) {
    for (std::size_t k = 0; k < m; ++k) {
      st.b0 = st.b1 = st.s0 = st.s1 = 0.0;
      st.gamma0.assign(atoms, 0.0);
      st.gamma1.assign(atoms, 0.0);
      field(k, i, st);

      const double dB = noise.dB(k, i);
      const auto counts = cursor.at(k, i);
      const double ups = std::exp(log_ups[k]);

      double y_drift = st.b0 - st.s0 * st.s1;
      double y_jump = 0.0;
      double pi_drift = -st.b1 + 0.5 * st.s1 * st.s1;
      double pi_jump = 0.0;
      for (std::size_t a = 0; a < atoms; ++a) {
        const double one_plus = 1.0 + st.gamma1[a];
        if (!(one_plus >= kSingularityMargin)) {
          throw SingularJumpCoefficient("1 + gamma1 fell below the singularity margin on path " +
                                        std::to_string(k) + " step " + std::to_string(i));
        }
        const double lambda = levy[a].intensity;
        const double comp = static_cast<double>(counts[a]) - lambda * dt;
        const double log1p = std::log(one_plus);
        y_drift += (1.0 / one_plus - 1.0) * st.gamma0[a] * lambda;
        y_jump += st.gamma0[a] / one_plus * comp;
        pi_drift -= (log1p - st.gamma1[a]) * lambda;
        pi_jump -= log1p * comp;
      }

      y[k] += ups * (y_drift * dt + st.s0 * dB + y_jump);
      log_ups[k] += pi_drift * dt - st.s1 * dB + pi_jump;
      const double x = y[k] * std::exp(-log_ups[k]);
      if (!std::isfinite(x)) throw NonFiniteState(k, i + 1);
      X(k, i + 1) = x;
    }
  }
  return X;
}

inline PathArray linear_closed_form(const LinearField& field, const NoiseBundle& noise, double x0) {
  const double init[] = {x0};
  return linear_closed_form(field, noise, init);
}

/// Gamma(t) solving dGamma = Gamma(t-)[b_x dt + sigma_x dB + sum_k gamma_x dN~_k], Gamma(0) = 1,
/// with partials evaluated along (t, X, u) of `paths`.
inline PathArray gamma_process(const ControlledCoefficients& c, const PathBundle& paths) {
  const auto& grid = paths.grid;
  const auto& levy = paths.noise->levy;
  LinearField field = [&](std::size_t k, std::size_t i, LinearStep& st) {
    const double t = grid.time(i);
    const double x = paths.X(k, i);
    const double u = paths.u(k, i);
    st.b1 = c.b_x(t, x, u);
    st.s1 = c.sigma_x(t, x, u);
    for (std::size_t a = 0; a < levy.size(); ++a) st.gamma1[a] = c.gamma_x(t, x, u, levy[a].zeta);
  };
  return linear_closed_form(field, *paths.noise, 1.0);
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// CSV columns: path_id, step, t, X, u, dB, jump_sum. The terminal row of each path
/// carries only the state.
inline void write_paths_csv(std::ostream& os, const PathBundle& paths, std::size_t max_paths) {
  os << "path_id,step,t,X,u,dB,jump_sum\n";
  const auto& noise = *paths.noise;
  const std::size_t n = paths.grid.n_steps();
  for (std::size_t k = 0; k < std::min(max_paths, paths.n_paths); ++k) {
    for (std::size_t i = 0; i <= n; ++i) {
      os << k << ',' << i << ',' << format_double(paths.grid.time(i)) << ','
         << format_double(paths.X(k, i));
      if (i < n) {
        double jump_sum = 0.0;
        for (std::size_t a = 0; a < noise.levy.size(); ++a) {
          jump_sum += noise.levy[a].zeta * static_cast<double>(noise.count(k, i, a));
        }
        os << ',' << format_double(paths.u(k, i)) << ',' << format_double(noise.dB(k, i)) << ','
           << format_double(jump_sum);
      } else {
        os << ",,,";
      }
      os << '\n';
    }
  }
}

}  // namespace jumpsmp
