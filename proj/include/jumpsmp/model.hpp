#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "jumpsmp/errors.hpp"
#include "jumpsmp/path_array.hpp"

namespace jumpsmp {

/// Lower bound on 1 + gamma_x. Closed forms divide by it and take its log.
inline constexpr double kSingularityMargin = 1e-6;

/// Uniform grid t_i = i * T / N on [0, T].
class TimeGrid {
 public:
  TimeGrid(double horizon, std::size_t n_steps) : horizon_(horizon), n_steps_(n_steps) {
    if (!(horizon > 0.0) || !std::isfinite(horizon)) {
      throw InvalidArgument("time grid horizon must be finite and > 0");
    }
    if (n_steps < 2) throw InvalidArgument("time grid needs at least 2 steps");
    dt_ = horizon / static_cast<double>(n_steps);
  }

  double horizon() const noexcept { return horizon_; }
  std::size_t n_steps() const noexcept { return n_steps_; }
  double dt() const noexcept { return dt_; }

  /// t_N is pinned to the horizon so the last node is exact.
  double time(std::size_t i) const noexcept {
    return i >= n_steps_ ? horizon_ : static_cast<double>(i) * dt_;
  }

  /// Index of the step whose interval [t_i, t_{i+1}) contains t; t = T maps to N - 1.
  std::size_t step_of(double t) const noexcept {
    const double raw = std::floor(t / dt_ + 1e-9);
    if (raw <= 0.0) return 0;
    return std::min(static_cast<std::size_t>(raw), n_steps_ - 1);
  }

  bool operator==(const TimeGrid&) const = default;

 private:
  double horizon_;
  std::size_t n_steps_;
  double dt_ = 0.0;
};

struct JumpAtom {
  double zeta;
  double intensity;
};

/// Finite-atom Levy measure nu = sum_k intensity_k * delta_{zeta_k}.
class LevyMeasure {
 public:
  LevyMeasure() = default;
  explicit LevyMeasure(std::vector<JumpAtom> atoms) : atoms_(std::move(atoms)) {
    for (const auto& a : atoms_) {
      if (a.zeta == 0.0 || !std::isfinite(a.zeta)) {
        throw InvalidArgument("jump atom size must be finite and non-zero");
      }
      if (!(a.intensity >= 0.0) || !std::isfinite(a.intensity)) {
        throw InvalidArgument("jump atom intensity must be finite and >= 0");
      }
      second_moment_ += a.intensity * a.zeta * a.zeta;
    }
  }

  std::span<const JumpAtom> atoms() const noexcept { return atoms_; }
  std::size_t size() const noexcept { return atoms_.size(); }
  bool empty() const noexcept { return atoms_.empty(); }
  const JumpAtom& operator[](std::size_t k) const { return atoms_[k]; }
  double second_moment() const noexcept { return second_moment_; }

 private:
  std::vector<JumpAtom> atoms_;
  double second_moment_ = 0.0;
};

/// Interval of admissible control values; either end may be infinite.
struct ControlSet {
  double lower = -std::numeric_limits<double>::infinity();
  double upper = std::numeric_limits<double>::infinity();

  bool contains(double u) const noexcept { return u >= lower && u <= upper; }
  double clamp(double u) const noexcept { return std::clamp(u, lower, upper); }

  static ControlSet unbounded() { return {}; }
  static ControlSet nonnegative() { return {0.0, std::numeric_limits<double>::infinity()}; }
};

/// Scalar controlled jump diffusion
///   dX = b dt + sigma dB + sum_k gamma(zeta_k) dN~_k,   J = E[int f dt + g(X(T))],
/// with hand-supplied partial derivatives.
struct ControlledCoefficients {
  using StateMap = std::function<double(double t, double x, double u)>;
  using JumpMap = std::function<double(double t, double x, double u, double zeta)>;
  using TerminalMap = std::function<double(double x)>;

  StateMap b, b_x, b_u;
  StateMap sigma, sigma_x, sigma_u;
  JumpMap gamma, gamma_x, gamma_u;
  StateMap f, f_x, f_u;
  TerminalMap g, g_x;
  ControlSet control_set;
};

struct ProbePoint {
  double t;
  double x;
  double u;
  double zeta;
};

struct ValidationReport {
  double max_discrepancy = 0.0;  // relative, over all partials and probes
  std::string worst_partial;
  double min_one_plus_gamma_x = std::numeric_limits<double>::infinity();
  double lipschitz_x = 0.0;
  bool passed = false;
};

namespace detail {

inline double checked(double v, const char* what) {
  if (!std::isfinite(v)) {
    throw NonFiniteEvaluation(std::string("coefficient ") + what + " returned a non-finite value");
  }
  return v;
}

inline double central_difference(const std::function<double(double)>& fn, double at, double h) {
  return (fn(at + h) - fn(at - h)) / (2.0 * h);
}

}  // namespace detail

/// Cross-checks every supplied partial against central differences and measures
/// the jump-singularity margin and an empirical Lipschitz constant in x.
inline ValidationReport validate_coefficients(const ControlledCoefficients& c,
                                              std::span<const ProbePoint> probe,
                                              double tolerance = 1e-4) {
  if (probe.empty()) throw EmptyProbeSet();
  for (const auto& pt : probe) {
    if (!c.control_set.contains(pt.u)) {
      throw InvalidArgument("probe control value outside the control set");
    }
  }

  ValidationReport report;
  auto record = [&](const char* name, double fd, double analytic) {
    detail::checked(fd, name);
    detail::checked(analytic, name);
    const double rel = std::abs(fd - analytic) / std::max(1.0, std::abs(analytic));
    if (rel > report.max_discrepancy) {
      report.max_discrepancy = rel;
      report.worst_partial = name;
    }
  };

  for (const auto& pt : probe) {
    const double t = pt.t, x = pt.x, u = pt.u, z = pt.zeta;
    const double hx = 1e-5 * std::max(1.0, std::abs(x));
    const double hu = 1e-5 * std::max(1.0, std::abs(u));

    auto in_x = [&](const ControlledCoefficients::StateMap& m) {
      return [&m, t, u](double xx) { return m(t, xx, u); };
    };
    auto in_u = [&](const ControlledCoefficients::StateMap& m) {
      return [&m, t, x](double uu) { return m(t, x, uu); };
    };

    for (auto* m : {&c.b, &c.sigma, &c.f}) detail::checked((*m)(t, x, u), "state map");
    detail::checked(c.gamma(t, x, u, z), "gamma");
    detail::checked(c.g(x), "g");

    record("b_x", detail::central_difference(in_x(c.b), x, hx), c.b_x(t, x, u));
    record("b_u", detail::central_difference(in_u(c.b), u, hu), c.b_u(t, x, u));
    record("sigma_x", detail::central_difference(in_x(c.sigma), x, hx), c.sigma_x(t, x, u));
    record("sigma_u", detail::central_difference(in_u(c.sigma), u, hu), c.sigma_u(t, x, u));
    record("f_x", detail::central_difference(in_x(c.f), x, hx), c.f_x(t, x, u));
    record("f_u", detail::central_difference(in_u(c.f), u, hu), c.f_u(t, x, u));
    record("gamma_x",
           detail::central_difference([&](double xx) { return c.gamma(t, xx, u, z); }, x, hx),
           c.gamma_x(t, x, u, z));
    record("gamma_u",
           detail::central_difference([&](double uu) { return c.gamma(t, x, uu, z); }, u, hu),
           c.gamma_u(t, x, u, z));
    record("g_x", detail::central_difference(c.g, x, hx), c.g_x(x));

    report.min_one_plus_gamma_x =
        std::min(report.min_one_plus_gamma_x, 1.0 + detail::checked(c.gamma_x(t, x, u, z), "gamma_x"));
  }

  // Lipschitz-in-x from pairs that share (t, u, zeta).
  for (std::size_t i = 0; i < probe.size(); ++i) {
    for (std::size_t j = i + 1; j < probe.size(); ++j) {
      const auto& p = probe[i];
      const auto& q = probe[j];
      if (p.t != q.t || p.u != q.u || p.zeta != q.zeta || p.x == q.x) continue;
      const double dx = std::abs(p.x - q.x);
      const double slopes[] = {
          std::abs(c.b(p.t, p.x, p.u) - c.b(q.t, q.x, q.u)) / dx,
          std::abs(c.sigma(p.t, p.x, p.u) - c.sigma(q.t, q.x, q.u)) / dx,
          std::abs(c.gamma(p.t, p.x, p.u, p.zeta) - c.gamma(q.t, q.x, q.u, q.zeta)) / dx,
      };
      for (double s : slopes) report.lipschitz_x = std::max(report.lipschitz_x, s);
    }
  }

  report.passed =
      report.max_discrepancy < tolerance && report.min_one_plus_gamma_x >= kSingularityMargin;
  return report;
}

/// Coefficients of the constrained linear-quadratic problem:
/// dX = u dt + sigma dB + int gamma(zeta) dN~,  f = -u^2/2,  g = -x^2/2,  u >= 0.
inline ControlledCoefficients build_lq_coefficients(double sigma, const LevyMeasure& levy,
                                                    std::function<double(double)> gamma_map) {
  if (!std::isfinite(sigma)) throw InvalidArgument("sigma must be finite");
  for (const auto& a : levy.atoms()) {
    if (!std::isfinite(gamma_map(a.zeta))) {
      throw InvalidArgument("gamma map is not finite on a jump atom");
    }
  }
  auto zero = [](double, double, double) { return 0.0; };
  auto zero_jump = [](double, double, double, double) { return 0.0; };

  ControlledCoefficients c;
  c.b = [](double, double, double u) { return u; };
  c.b_x = zero;
  c.b_u = [](double, double, double) { return 1.0; };
  c.sigma = [sigma](double, double, double) { return sigma; };
  c.sigma_x = zero;
  c.sigma_u = zero;
  c.gamma = [gamma_map](double, double, double, double z) { return gamma_map(z); };
  c.gamma_x = zero_jump;
  c.gamma_u = zero_jump;
  c.f = [](double, double, double u) { return -0.5 * u * u; };
  c.f_x = zero;
  c.f_u = [](double, double, double u) { return -u; };
  c.g = [](double x) { return -0.5 * x * x; };
  c.g_x = [](double x) { return -x; };
  c.control_set = ControlSet::nonnegative();
  return c;
}

/// Polynomial sum_k a_k x^k with its derivative.
class Polynomial {
 public:
  Polynomial() = default;
  explicit Polynomial(std::vector<double> coeffs) : coeffs_(std::move(coeffs)) {}

  double operator()(double x) const {
    double acc = 0.0;
    for (auto it = coeffs_.rbegin(); it != coeffs_.rend(); ++it) acc = acc * x + *it;
    return acc;
  }
  double derivative(double x) const {
    double acc = 0.0;
    for (std::size_t k = coeffs_.size(); k-- > 1;) acc = acc * x + static_cast<double>(k) * coeffs_[k];
    return acc;
  }
  const std::vector<double>& coefficients() const noexcept { return coeffs_; }

 private:
  std::vector<double> coeffs_;
};

/// Parameters of the "custom-polynomial" family:
///   b = P_b(x) + b_u u,   sigma = P_s(x) + s_u u,   gamma = zeta (P_g(x) + g_u u),
///   f = P_f(x) - (r/2) u^2 + f_lin u,   g = P_T(x).
struct PolynomialModel {
  Polynomial drift, diffusion, jump, running, terminal;
  double drift_u = 0.0;
  double diffusion_u = 0.0;
  double jump_u = 0.0;
  double control_cost = 1.0;
  double running_u = 0.0;
  ControlSet control_set;
};

inline ControlledCoefficients build_polynomial_coefficients(const PolynomialModel& m) {
  ControlledCoefficients c;
  c.b = [m](double, double x, double u) { return m.drift(x) + m.drift_u * u; };
  c.b_x = [m](double, double x, double) { return m.drift.derivative(x); };
  c.b_u = [m](double, double, double) { return m.drift_u; };
  c.sigma = [m](double, double x, double u) { return m.diffusion(x) + m.diffusion_u * u; };
  c.sigma_x = [m](double, double x, double) { return m.diffusion.derivative(x); };
  c.sigma_u = [m](double, double, double) { return m.diffusion_u; };
  c.gamma = [m](double, double x, double u, double z) { return z * (m.jump(x) + m.jump_u * u); };
  c.gamma_x = [m](double, double x, double, double z) { return z * m.jump.derivative(x); };
  c.gamma_u = [m](double, double, double, double z) { return z * m.jump_u; };
  c.f = [m](double, double x, double u) {
    return m.running(x) - 0.5 * m.control_cost * u * u + m.running_u * u;
  };
  c.f_x = [m](double, double x, double) { return m.running.derivative(x); };
  c.f_u = [m](double, double, double u) { return -m.control_cost * u + m.running_u; };
  c.g = [m](double x) { return m.terminal(x); };
  c.g_x = [m](double x) { return m.terminal.derivative(x); };
  c.control_set = m.control_set;
  return c;
}

/// Linear state dynamics b = b0 + b1 x + b_u u, sigma = s0 + s1 x,
/// gamma = zeta (g0 + g1 x), with quadratic costs f = -(r/2) u^2, g = -x^2/2.
struct LinearModel {
  double b0 = 0.0, b1 = 0.0, b_u = 1.0;
  double s0 = 0.0, s1 = 0.0;
  double g0 = 0.0, g1 = 0.0;
  double control_cost = 1.0;
  ControlSet control_set;
};

inline ControlledCoefficients build_linear_coefficients(const LinearModel& m) {
  PolynomialModel p;
  p.drift = Polynomial({m.b0, m.b1});
  p.drift_u = m.b_u;
  p.diffusion = Polynomial({m.s0, m.s1});
  p.jump = Polynomial({m.g0, m.g1});
  p.running = Polynomial({0.0});
  p.control_cost = m.control_cost;
  p.terminal = Polynomial({0.0, 0.0, -0.5});
  p.control_set = m.control_set;
  return build_polynomial_coefficients(p);
}

/// Admissible control: per-path open-loop values on [t_i, t_{i+1}), a Markov
/// feedback map, or a spike perturbation of another law. Values are always
/// clamped into the control set.
class ControlLaw {
 public:
  using Feedback = std::function<double(double t, double x)>;
  using SpikeValue = std::function<double(double x_at_tau)>;

  enum class Kind { OpenLoop, Feedback, Spiked };

  static ControlLaw open_loop(PathArray values, ControlSet set) {
    ControlLaw law(Kind::OpenLoop, set);
    law.values_ = std::make_shared<const PathArray>(std::move(values));
    return law;
  }
  static ControlLaw feedback(Feedback fn, ControlSet set) {
    ControlLaw law(Kind::Feedback, set);
    law.feedback_ = std::move(fn);
    return law;
  }
  static ControlLaw constant(double value, ControlSet set) {
    return feedback([value](double, double) { return value; }, set);
  }
  /// Replaces the base law by spike(X(t_first)) on steps first..last inclusive.
  static ControlLaw spiked(ControlLaw base, std::size_t first, std::size_t last, SpikeValue spike) {
    ControlLaw law(Kind::Spiked, base.set_);
    law.base_ = std::make_shared<const ControlLaw>(std::move(base));
    law.first_ = first;
    law.last_ = last;
    law.spike_ = std::move(spike);
    return law;
  }

  Kind kind() const noexcept { return kind_; }
  const ControlSet& control_set() const noexcept { return set_; }
  const PathArray* open_loop_values() const noexcept { return values_.get(); }
  const ControlLaw* base() const noexcept { return base_.get(); }
  std::size_t spike_first() const noexcept { return first_; }
  std::size_t spike_last() const noexcept { return last_; }

  /// x_at_tau is only read by spiked laws inside their window.
  double value(std::size_t path, std::size_t step, double t, double x, double x_at_tau) const {
    switch (kind_) {
      case Kind::OpenLoop:
        return set_.clamp((*values_)(path, step));
      case Kind::Feedback:
        return set_.clamp(feedback_(t, x));
      case Kind::Spiked:
        if (step >= first_ && step <= last_) return set_.clamp(spike_(x_at_tau));
        return base_->value(path, step, t, x, x_at_tau);
    }
    return 0.0;
  }

  /// Outermost spike window start, or npos if there is none.
  std::size_t spike_anchor() const noexcept {
    return kind_ == Kind::Spiked ? first_ : static_cast<std::size_t>(-1);
  }

 private:
  ControlLaw(Kind kind, ControlSet set) : kind_(kind), set_(set) {}

  Kind kind_;
  ControlSet set_;
  std::shared_ptr<const PathArray> values_;
  Feedback feedback_;
  std::shared_ptr<const ControlLaw> base_;
  std::size_t first_ = 0;
  std::size_t last_ = 0;
  SpikeValue spike_;
};

}  // namespace jumpsmp
