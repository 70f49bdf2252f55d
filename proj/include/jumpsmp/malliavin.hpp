#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "jumpsmp/errors.hpp"
#include "jumpsmp/noise.hpp"
#include "jumpsmp/regression.hpp"
#include "jumpsmp/stats.hpp"

namespace jumpsmp {

/// Smooth map R^m -> R carrying its gradient and, when known, its Hessian (row-major).
struct SmoothMap {
  using Value = std::function<double(std::span<const double>)>;
  using Derivative = std::function<void(std::span<const double>, std::span<double>)>;

  std::size_t arity = 1;
  Value value;
  Derivative gradient;
  Derivative hessian;  // optional
  bool affine = false;

  static SmoothMap identity() { return linear({1.0}, 0.0); }

  static SmoothMap linear(std::vector<double> weights, double offset) {
    SmoothMap m;
    m.arity = weights.size();
    m.affine = true;
    m.value = [weights, offset](std::span<const double> x) {
      double acc = offset;
      for (std::size_t i = 0; i < weights.size(); ++i) acc += weights[i] * x[i];
      return acc;
    };
    m.gradient = [weights](std::span<const double>, std::span<double> g) {
      std::copy(weights.begin(), weights.end(), g.begin());
    };
    m.hessian = [](std::span<const double>, std::span<double> h) {
      std::fill(h.begin(), h.end(), 0.0);
    };
    return m;
  }

  static SmoothMap power(unsigned k) {
    SmoothMap m;
    m.arity = 1;
    m.affine = k <= 1;
    m.value = [k](std::span<const double> x) { return std::pow(x[0], static_cast<double>(k)); };
    m.gradient = [k](std::span<const double> x, std::span<double> g) {
      g[0] = k == 0 ? 0.0 : k * std::pow(x[0], static_cast<double>(k) - 1.0);
    };
    m.hessian = [k](std::span<const double> x, std::span<double> h) {
      h[0] = k < 2 ? 0.0 : k * (k - 1.0) * std::pow(x[0], static_cast<double>(k) - 2.0);
    };
    return m;
  }

  static SmoothMap square() { return power(2); }

  static SmoothMap product() {
    SmoothMap m;
    m.arity = 2;
    m.value = [](std::span<const double> x) { return x[0] * x[1]; };
    m.gradient = [](std::span<const double> x, std::span<double> g) {
      g[0] = x[1];
      g[1] = x[0];
    };
    m.hessian = [](std::span<const double>, std::span<double> h) {
      h[0] = 0.0;
      h[1] = 1.0;
      h[2] = 1.0;
      h[3] = 0.0;
    };
    return m;
  }

  static SmoothMap exponential() {
    SmoothMap m;
    m.arity = 1;
    m.value = [](std::span<const double> x) { return std::exp(x[0]); };
    m.gradient = [](std::span<const double> x, std::span<double> g) { g[0] = std::exp(x[0]); };
    m.hessian = [](std::span<const double> x, std::span<double> h) { h[0] = std::exp(x[0]); };
    return m;
  }
};

/// Closed family of functionals of one NoiseBundle path:
///   Constant(c) | int h dB | int int psi dN~ | Phi(F_1, ..., F_m)
/// with h, psi step functions on the grid (psi indexed [step][atom]).
class WienerFunctional {
 public:
  enum class Kind { Constant, BrownianIntegral, JumpIntegral, Compose };

  static WienerFunctional constant(double c) {
    auto n = std::make_shared<Node>();
    n->kind = Kind::Constant;
    n->constant = c;
    return WienerFunctional(std::move(n));
  }

  static WienerFunctional brownian_integral(std::vector<double> h) {
    for (double v : h) {
      if (!std::isfinite(v)) throw InvalidArgument("Brownian integrand must be finite");
    }
    auto n = std::make_shared<Node>();
    n->kind = Kind::BrownianIntegral;
    n->integrand = std::move(h);
    return WienerFunctional(std::move(n));
  }

  static WienerFunctional jump_integral(std::vector<std::vector<double>> psi) {
    for (const auto& row : psi) {
      for (double v : row) {
        if (!std::isfinite(v)) throw InvalidArgument("jump integrand must be finite");
      }
    }
    auto n = std::make_shared<Node>();
    n->kind = Kind::JumpIntegral;
    n->jump_integrand = std::move(psi);
    return WienerFunctional(std::move(n));
  }

  static WienerFunctional compose(SmoothMap phi, std::vector<WienerFunctional> args) {
    if (phi.arity != args.size()) throw InvalidArgument("map arity does not match argument count");
    auto n = std::make_shared<Node>();
    n->kind = Kind::Compose;
    n->map = std::move(phi);
    n->args = std::move(args);
    return WienerFunctional(std::move(n));
  }

  /// B(T) on an N-step grid.
  static WienerFunctional brownian_terminal(std::size_t n_steps) {
    return brownian_integral(std::vector<double>(n_steps, 1.0));
  }

  /// eta(T) = int int zeta N~(dt, dzeta) over all atoms.
  static WienerFunctional compensated_jump_terminal(std::size_t n_steps, const LevyMeasure& levy) {
    std::vector<double> row(levy.size());
    for (std::size_t a = 0; a < levy.size(); ++a) row[a] = levy[a].zeta;
    return jump_integral(std::vector<std::vector<double>>(n_steps, row));
  }

  Kind kind() const noexcept { return node_->kind; }
  double constant_value() const noexcept { return node_->constant; }
  const std::vector<double>& integrand() const noexcept { return node_->integrand; }
  const std::vector<std::vector<double>>& jump_integrand() const noexcept {
    return node_->jump_integrand;
  }
  const SmoothMap& map() const noexcept { return node_->map; }
  const std::vector<WienerFunctional>& args() const noexcept { return node_->args; }
  const void* id() const noexcept { return node_.get(); }

  bool is_zero_constant() const noexcept {
    return kind() == Kind::Constant && constant_value() == 0.0;
  }

  /// No integral leaves anywhere in the tree.
  bool is_deterministic() const {
    switch (kind()) {
      case Kind::Constant:
        return true;
      case Kind::BrownianIntegral:
      case Kind::JumpIntegral:
        return false;
      case Kind::Compose:
        for (const auto& a : args()) {
          if (!a.is_deterministic()) return false;
        }
        return true;
    }
    return true;
  }

  bool contains_jump_integral() const {
    if (kind() == Kind::JumpIntegral) return true;
    if (kind() != Kind::Compose) return false;
    for (const auto& a : args()) {
      if (a.contains_jump_integral()) return true;
    }
    return false;
  }

  /// Distinct integral leaves, in first-visit order.
  std::vector<WienerFunctional> leaves() const {
    std::vector<WienerFunctional> out;
    collect(out);
    return out;
  }

  /// Exact value for deterministic trees.
  double deterministic_value() const {
    switch (kind()) {
      case Kind::Constant:
        return constant_value();
      case Kind::Compose: {
        std::vector<double> xs;
        for (const auto& a : args()) xs.push_back(a.deterministic_value());
        return map().value(xs);
      }
      default:
        throw InvalidArgument("functional is not deterministic");
    }
  }

 private:
  struct Node {
    Kind kind = Kind::Constant;
    double constant = 0.0;
    std::vector<double> integrand;
    std::vector<std::vector<double>> jump_integrand;
    SmoothMap map;
    std::vector<WienerFunctional> args;
  };

  explicit WienerFunctional(std::shared_ptr<const Node> n) : node_(std::move(n)) {}

  void collect(std::vector<WienerFunctional>& out) const {
    if (kind() == Kind::BrownianIntegral || kind() == Kind::JumpIntegral) {
      for (const auto& l : out) {
        if (l.id() == id()) return;
      }
      out.push_back(*this);
    } else if (kind() == Kind::Compose) {
      for (const auto& a : args()) a.collect(out);
    }
  }

  std::shared_ptr<const Node> node_;
};

/// Direction of differentiation: Brownian D_t or jump D_{t,zeta}, on grid steps.
struct Direction {
  enum class Kind { Brownian, Jump };
  Kind kind = Kind::Brownian;
  std::size_t step = 0;
  std::size_t atom = 0;

  static Direction brownian(std::size_t step) { return {Kind::Brownian, step, 0}; }
  static Direction jump(std::size_t step, std::size_t atom) { return {Kind::Jump, step, atom}; }
};

namespace detail {

/// (x, d) -> sum_j dPhi/dx_j(x) d_j
inline SmoothMap chain_rule_map(const SmoothMap& phi) {
  const std::size_t m = phi.arity;
  SmoothMap out;
  out.arity = 2 * m;
  out.value = [phi, m](std::span<const double> z) {
    std::vector<double> g(m);
    phi.gradient(z.first(m), g);
    double acc = 0.0;
    for (std::size_t j = 0; j < m; ++j) acc += g[j] * z[m + j];
    return acc;
  };
  out.gradient = [phi, m](std::span<const double> z, std::span<double> grad) {
    if (!phi.hessian) throw UnsupportedNode("second derivative needs the map's Hessian");
    std::vector<double> g(m), h(m * m);
    phi.gradient(z.first(m), g);
    phi.hessian(z.first(m), h);
    for (std::size_t k = 0; k < m; ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += h[j * m + k] * z[m + j];
      grad[k] = acc;
      grad[m + k] = g[k];
    }
  };
  return out;
}

/// (x, d) -> Phi(x + d) - Phi(x)
inline SmoothMap shift_difference_map(const SmoothMap& phi) {
  const std::size_t m = phi.arity;
  SmoothMap out;
  out.arity = 2 * m;
  out.value = [phi, m](std::span<const double> z) {
    std::vector<double> shifted(m);
    for (std::size_t j = 0; j < m; ++j) shifted[j] = z[j] + z[m + j];
    return phi.value(shifted) - phi.value(z.first(m));
  };
  out.gradient = [phi, m](std::span<const double> z, std::span<double> grad) {
    std::vector<double> shifted(m), g_shift(m), g_base(m);
    for (std::size_t j = 0; j < m; ++j) shifted[j] = z[j] + z[m + j];
    phi.gradient(shifted, g_shift);
    phi.gradient(z.first(m), g_base);
    for (std::size_t j = 0; j < m; ++j) {
      grad[j] = g_shift[j] - g_base[j];
      grad[m + j] = g_shift[j];
    }
  };
  if (phi.hessian) {
    out.hessian = [phi, m](std::span<const double> z, std::span<double> h) {
      const std::size_t w = 2 * m;
      std::vector<double> shifted(m), hs(m * m), hb(m * m);
      for (std::size_t j = 0; j < m; ++j) shifted[j] = z[j] + z[m + j];
      phi.hessian(shifted, hs);
      phi.hessian(z.first(m), hb);
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < m; ++c) {
          h[r * w + c] = hs[r * m + c] - hb[r * m + c];
          h[r * w + m + c] = hs[r * m + c];
          h[(m + r) * w + c] = hs[r * m + c];
          h[(m + r) * w + m + c] = hs[r * m + c];
        }
      }
    };
  }
  out.affine = phi.affine;
  return out;
}

}  // namespace detail

/// Hida-Malliavin derivative of F in the given direction, as a new tree.
inline WienerFunctional hm_derivative(const WienerFunctional& F, const Direction& dir) {
  using K = WienerFunctional::Kind;
  switch (F.kind()) {
    case K::Constant:
      return WienerFunctional::constant(0.0);
    case K::BrownianIntegral: {
      if (dir.kind != Direction::Kind::Brownian) return WienerFunctional::constant(0.0);
      const auto& h = F.integrand();
      if (dir.step >= h.size()) throw InvalidArgument("direction step outside the integrand grid");
      return WienerFunctional::constant(h[dir.step]);
    }
    case K::JumpIntegral: {
      if (dir.kind != Direction::Kind::Jump) return WienerFunctional::constant(0.0);
      const auto& psi = F.jump_integrand();
      if (dir.step >= psi.size() || dir.atom >= psi[dir.step].size()) {
        throw InvalidArgument("direction outside the jump integrand grid");
      }
      return WienerFunctional::constant(psi[dir.step][dir.atom]);
    }
    case K::Compose: {
      const auto& args = F.args();
      std::vector<WienerFunctional> derivs;
      derivs.reserve(args.size());
      bool all_zero = true;
      for (const auto& a : args) {
        derivs.push_back(hm_derivative(a, dir));
        all_zero = all_zero && derivs.back().is_zero_constant();
      }
      if (all_zero) return WienerFunctional::constant(0.0);
      std::vector<WienerFunctional> combined(args);
      combined.insert(combined.end(), derivs.begin(), derivs.end());
      if (dir.kind == Direction::Kind::Brownian) {
        return WienerFunctional::compose(detail::chain_rule_map(F.map()), std::move(combined));
      }
      return WienerFunctional::compose(detail::shift_difference_map(F.map()), std::move(combined));
    }
  }
  throw UnsupportedNode("unknown functional node");
}

/// Evaluates functionals on every path of a bundle, caching the full-horizon
/// integral leaves so repeated derivative trees stay cheap.
class FunctionalEvaluator {
 public:
  explicit FunctionalEvaluator(NoisePtr noise) : noise_(std::move(noise)) {}

  std::vector<double> values(const WienerFunctional& F) {
    using K = WienerFunctional::Kind;
    const std::size_t m = noise_->n_paths;
    switch (F.kind()) {
      case K::Constant:
        return std::vector<double>(m, F.constant_value());
      case K::BrownianIntegral:
      case K::JumpIntegral:
        return leaf(F);
      case K::Compose: {
        std::vector<std::vector<double>> argv;
        argv.reserve(F.args().size());
        for (const auto& a : F.args()) argv.push_back(values(a));
        std::vector<double> out(m), point(argv.size());
        for (std::size_t k = 0; k < m; ++k) {
          for (std::size_t j = 0; j < argv.size(); ++j) point[j] = argv[j][k];
          out[k] = F.map().value(point);
        }
        return out;
      }
    }
    throw UnsupportedNode("unknown functional node");
  }

  const NoiseBundle& noise() const noexcept { return *noise_; }

 private:
  const std::vector<double>& leaf(const WienerFunctional& F) {
    auto it = cache_.find(F.id());
    if (it != cache_.end()) return it->second.values;
    auto& entry = cache_[F.id()];
    entry.keep = F;
    entry.values = partial_leaf_values(F, *noise_, noise_->grid.n_steps());
    return entry.values;
  }

 public:
  /// Leaf integral over [0, t_upto) on every path.
  static std::vector<double> partial_leaf_values(const WienerFunctional& F, const NoiseBundle& noise,
                                                 std::size_t upto) {
    const std::size_t m = noise.n_paths;
    std::vector<double> out(m, 0.0);
    if (F.kind() == WienerFunctional::Kind::BrownianIntegral) {
      const auto& h = F.integrand();
      if (h.size() != noise.grid.n_steps()) throw InvalidArgument("integrand length != grid steps");
      for (std::size_t i = 0; i < upto; ++i) {
        const auto col = noise.dB.column(i);
        for (std::size_t k = 0; k < m; ++k) out[k] += h[i] * col[k];
      }
    } else if (F.kind() == WienerFunctional::Kind::JumpIntegral) {
      const auto& psi = F.jump_integrand();
      if (psi.size() != noise.grid.n_steps()) throw InvalidArgument("integrand length != grid steps");
      const double dt = noise.grid.dt();
      for (std::size_t k = 0; k < m; ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < upto; ++i) {
          for (std::size_t a = 0; a < noise.levy.size(); ++a) {
            acc -= psi[i][a] * noise.levy[a].intensity * dt;
          }
        }
        for (const auto& e : noise.jumps[k]) {
          if (e.step < upto) acc += psi[e.step][e.atom] * static_cast<double>(e.count);
        }
        out[k] = acc;
      }
    }
    return out;
  }

 private:
  struct Entry {
    WienerFunctional keep = WienerFunctional::constant(0.0);
    std::vector<double> values;
  };
  NoisePtr noise_;
  std::unordered_map<const void*, Entry> cache_;
};

/// Running partial integrals of a set of leaves, advanced one step at a time.
class LeafTracker {
 public:
  LeafTracker(std::vector<WienerFunctional> leaves, const NoiseBundle& noise)
      : leaves_(std::move(leaves)), noise_(&noise),
        partial_(leaves_.size(), std::vector<double>(noise.n_paths, 0.0)),
        cursor_(noise) {}

  /// Adds the contribution of step `i`; call with i = 0, 1, 2, ...
  void advance(std::size_t i) {
    const std::size_t m = noise_->n_paths;
    const double dt = noise_->grid.dt();
    const auto& levy = noise_->levy;
    for (std::size_t l = 0; l < leaves_.size(); ++l) {
      const auto& F = leaves_[l];
      auto& p = partial_[l];
      if (F.kind() == WienerFunctional::Kind::BrownianIntegral) {
        const double h = F.integrand()[i];
        const auto col = noise_->dB.column(i);
        for (std::size_t k = 0; k < m; ++k) p[k] += h * col[k];
      }
    }
    bool any_jump = false;
    for (const auto& F : leaves_) any_jump = any_jump || F.kind() == WienerFunctional::Kind::JumpIntegral;
    if (!any_jump) return;
    for (std::size_t k = 0; k < m; ++k) {
      const auto counts = cursor_.at(k, i);
      for (std::size_t l = 0; l < leaves_.size(); ++l) {
        const auto& F = leaves_[l];
        if (F.kind() != WienerFunctional::Kind::JumpIntegral) continue;
        const auto& row = F.jump_integrand()[i];
        for (std::size_t a = 0; a < levy.size(); ++a) {
          partial_[l][k] += row[a] * (static_cast<double>(counts[a]) - levy[a].intensity * dt);
        }
      }
    }
  }

  /// Features for conditioning on F_t: partials of those tracked leaves that occur in `tree`.
  FeatureColumns features_for(const WienerFunctional& tree) const {
    FeatureColumns cols;
    for (const auto& leaf : tree.leaves()) {
      for (std::size_t l = 0; l < leaves_.size(); ++l) {
        if (leaves_[l].id() == leaf.id()) cols.emplace_back(partial_[l]);
      }
    }
    return cols;
  }

 private:
  std::vector<WienerFunctional> leaves_;
  const NoiseBundle* noise_;
  std::vector<std::vector<double>> partial_;
  JumpCursor cursor_;
};

/// E[D F | F_t] on every path: exact for deterministic derivative trees,
/// otherwise least squares on the time-t partials of the tree's leaves.
inline std::vector<double> conditional_derivative(const WienerFunctional& derivative,
                                                  FunctionalEvaluator& eval,
                                                  const LeafTracker& tracker,
                                                  RegressionBasis basis) {
  const std::size_t m = eval.noise().n_paths;
  if (derivative.is_deterministic()) {
    return std::vector<double>(m, derivative.deterministic_value());
  }
  const auto values = eval.values(derivative);
  return project_conditional(values, tracker.features_for(derivative), basis);
}

/// Read access to one path's history at step i, as seen by an adapted integrand.
/// brownian() and compensated() are the running values at t_i.
class PathHistory {
 public:
  PathHistory(const NoiseBundle& noise, std::size_t path, std::size_t step, double brownian,
              std::span<const double> compensated, double future_shift = 0.0)
      : noise_(&noise), path_(path), step_(step), brownian_(brownian),
        compensated_(compensated), shift_(future_shift) {}

  std::size_t path() const noexcept { return path_; }
  std::size_t step() const noexcept { return step_; }
  double time() const noexcept { return noise_->grid.time(step_); }
  double brownian() const noexcept { return brownian_; }
  double compensated(std::size_t atom) const { return compensated_[atom]; }

  /// Increments on step j; adapted integrands only look at j < step().
  double dB(std::size_t j) const { return noise_->dB(path_, j) + (j >= step_ ? shift_ : 0.0); }
  std::uint32_t count(std::size_t j, std::size_t atom) const {
    return noise_->count(path_, j, atom) + (j >= step_ && shift_ != 0.0 ? 1u : 0u);
  }

 private:
  const NoiseBundle* noise_;
  std::size_t path_;
  std::size_t step_;
  double brownian_;
  std::span<const double> compensated_;
  double shift_;
};

using BrownianIntegrand = std::function<double(const PathHistory&)>;
using JumpIntegrand = std::function<double(const PathHistory&, std::size_t atom)>;

struct DualityReport {
  double lhs = 0.0;
  double rhs = 0.0;
  double se_lhs = 0.0;
  double se_rhs = 0.0;
  std::size_t n_paths = 0;
  std::uint64_t seed = 0;
  bool verdict = false;
};

inline DualityReport make_duality_report(MeanEstimate lhs, MeanEstimate rhs, const NoiseBundle& noise) {
  DualityReport r{lhs.mean, rhs.mean, lhs.se, rhs.se, noise.n_paths, noise.seed, false};
  r.verdict = std::abs(r.lhs - r.rhs) <= 3.0 * (r.se_lhs + r.se_rhs);
  return r;
}

inline void to_json(nlohmann::json& j, const DualityReport& r) {
  j = nlohmann::json{{"lhs", r.lhs},       {"rhs", r.rhs},         {"se_lhs", r.se_lhs},
                     {"se_rhs", r.se_rhs}, {"n_paths", r.n_paths}, {"seed", r.seed},
                     {"verdict", r.verdict ? "pass" : "fail"}};
}

namespace detail {

/// Running B(t_i) and N~_k([0, t_i)) per path while sweeping steps.
struct HistorySweep {
  explicit HistorySweep(const NoiseBundle& noise)
      : noise(&noise), brownian(noise.n_paths, 0.0),
        compensated(noise.n_paths, std::vector<double>(noise.levy.size(), 0.0)), cursor(noise) {}

  PathHistory at(std::size_t k, std::size_t i, double shift = 0.0) const {
    return PathHistory(*noise, k, i, brownian[k], compensated[k], shift);
  }

  void advance(std::size_t i) {
    const double dt = noise->grid.dt();
    for (std::size_t k = 0; k < noise->n_paths; ++k) {
      brownian[k] += noise->dB(k, i);
      const auto counts = cursor.at(k, i);
      for (std::size_t a = 0; a < noise->levy.size(); ++a) {
        compensated[k][a] += static_cast<double>(counts[a]) - noise->levy[a].intensity * dt;
      }
    }
  }

  const NoiseBundle* noise;
  std::vector<double> brownian;
  std::vector<std::vector<double>> compensated;
  JumpCursor cursor;
};

template <typename Eval>
void probe_adaptedness(const NoiseBundle& noise, Eval&& eval) {
  const std::size_t n = noise.grid.n_steps();
  const std::size_t probe_paths = std::min<std::size_t>(noise.n_paths, 8);
  const std::size_t steps[] = {0, n / 2, n - 1};
  HistorySweep sweep(noise);
  std::size_t next = 0;
  for (std::size_t s : steps) {
    for (; next < s; ++next) sweep.advance(next);
    for (std::size_t k = 0; k < probe_paths; ++k) {
      if (eval(sweep.at(k, s)) != eval(sweep.at(k, s, 1.0))) {
        throw NonAdaptedIntegrand("integrand at step " + std::to_string(s) +
                                  " reads increments from the future");
      }
    }
  }
}

}  // namespace detail

/// Brownian generalized duality: E[F int phi dB] vs E[int E[D_t F | F_t] phi(t) dt].
inline DualityReport check_duality_brownian(const WienerFunctional& F, const BrownianIntegrand& phi,
                                            const NoisePtr& noise, RegressionBasis basis = {}) {
  detail::probe_adaptedness(*noise, [&](const PathHistory& h) { return phi(h); });
  const std::size_t m = noise->n_paths;
  const std::size_t n = noise->grid.n_steps();
  const double dt = noise->grid.dt();

  FunctionalEvaluator eval(noise);
  const auto f_values = eval.values(F);
  LeafTracker tracker(F.leaves(), *noise);
  detail::HistorySweep sweep(*noise);

  std::vector<double> stoch_integral(m, 0.0), rhs(m, 0.0), phi_i(m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < m; ++k) phi_i[k] = phi(sweep.at(k, i));
    const auto cond = conditional_derivative(hm_derivative(F, Direction::brownian(i)), eval, tracker, basis);
    for (std::size_t k = 0; k < m; ++k) {
      stoch_integral[k] += phi_i[k] * noise->dB(k, i);
      rhs[k] += cond[k] * phi_i[k] * dt;
    }
    sweep.advance(i);
    tracker.advance(i);
  }
  std::vector<double> lhs(m);
  for (std::size_t k = 0; k < m; ++k) lhs[k] = f_values[k] * stoch_integral[k];
  return make_duality_report(estimate_mean(lhs), estimate_mean(rhs), *noise);
}

/// Jump generalized duality: E[F int int psi dN~] vs
/// E[int sum_k psi(t, zeta_k) E[D_{t,zeta_k} F | F_t] intensity_k dt].
inline DualityReport check_duality_jump(const WienerFunctional& F, const JumpIntegrand& psi,
                                        const NoisePtr& noise, RegressionBasis basis = {}) {
  const std::size_t atoms = noise->levy.size();
  detail::probe_adaptedness(*noise, [&](const PathHistory& h) {
    double acc = 0.0;
    for (std::size_t a = 0; a < atoms; ++a) acc += psi(h, a) * static_cast<double>(a + 1);
    return acc;
  });
  const std::size_t m = noise->n_paths;
  const std::size_t n = noise->grid.n_steps();
  const double dt = noise->grid.dt();

  FunctionalEvaluator eval(noise);
  const auto f_values = eval.values(F);
  LeafTracker tracker(F.leaves(), *noise);
  detail::HistorySweep sweep(*noise);
  JumpCursor cursor(*noise);

  std::vector<double> jump_integral(m, 0.0), rhs(m, 0.0);
  std::vector<std::vector<double>> psi_i(atoms, std::vector<double>(m));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < m; ++k) {
      const auto h = sweep.at(k, i);
      for (std::size_t a = 0; a < atoms; ++a) psi_i[a][k] = psi(h, a);
    }
    for (std::size_t a = 0; a < atoms; ++a) {
      const double lambda = noise->levy[a].intensity;
      const auto cond =
          conditional_derivative(hm_derivative(F, Direction::jump(i, a)), eval, tracker, basis);
      for (std::size_t k = 0; k < m; ++k) rhs[k] += psi_i[a][k] * cond[k] * lambda * dt;
    }
    for (std::size_t k = 0; k < m; ++k) {
      const auto counts = cursor.at(k, i);
      for (std::size_t a = 0; a < atoms; ++a) {
        jump_integral[k] +=
            psi_i[a][k] * (static_cast<double>(counts[a]) - noise->levy[a].intensity * dt);
      }
    }
    sweep.advance(i);
    tracker.advance(i);
  }
  std::vector<double> lhs(m);
  for (std::size_t k = 0; k < m; ++k) lhs[k] = f_values[k] * jump_integral[k];
  return make_duality_report(estimate_mean(lhs), estimate_mean(rhs), *noise);
}

namespace detail {

inline bool is_affine_tree(const WienerFunctional& F) {
  if (F.kind() != WienerFunctional::Kind::Compose) return true;
  if (!F.map().affine) return false;
  for (const auto& a : F.args()) {
    if (!is_affine_tree(a)) return false;
  }
  return true;
}

/// Exact mean of an affine tree: integrals against N~ and dB have mean zero.
inline double affine_expectation(const WienerFunctional& F) {
  switch (F.kind()) {
    case WienerFunctional::Kind::Constant:
      return F.constant_value();
    case WienerFunctional::Kind::BrownianIntegral:
    case WienerFunctional::Kind::JumpIntegral:
      return 0.0;
    case WienerFunctional::Kind::Compose: {
      std::vector<double> xs;
      for (const auto& a : F.args()) xs.push_back(affine_expectation(a));
      return F.map().value(xs);
    }
  }
  return 0.0;
}

}  // namespace detail

struct ClarkOconeResult {
  double l2_error = 0.0;  // sqrt(E[(F - F^)^2] / E[F^2])
  DualityReport report;   // lhs = E[F], rhs = E[F^]
  std::vector<double> reconstruction;  // F^ per path
};

/// F^ = E[F] + sum_i E[D_{t_i} F | F_{t_i}] dB_i per path. E[F] is exact for affine
/// trees and the sample mean otherwise.
inline ClarkOconeResult clark_ocone_reconstruct(const WienerFunctional& F, const NoisePtr& noise,
                                                RegressionBasis basis = {}) {
  if (F.contains_jump_integral()) throw JumpDependentFunctional();
  const std::size_t m = noise->n_paths;
  const std::size_t n = noise->grid.n_steps();

  FunctionalEvaluator eval(noise);
  const auto f_values = eval.values(F);
  const double mean_f = detail::is_affine_tree(F) ? detail::affine_expectation(F)
                                                  : estimate_mean(f_values).mean;
  LeafTracker tracker(F.leaves(), *noise);

  std::vector<double> recon(m, mean_f);
  for (std::size_t i = 0; i < n; ++i) {
    const auto cond = conditional_derivative(hm_derivative(F, Direction::brownian(i)), eval, tracker, basis);
    for (std::size_t k = 0; k < m; ++k) recon[k] += cond[k] * noise->dB(k, i);
    tracker.advance(i);
  }

  double err = 0.0, norm = 0.0;
  for (std::size_t k = 0; k < m; ++k) {
    err += (f_values[k] - recon[k]) * (f_values[k] - recon[k]);
    norm += f_values[k] * f_values[k];
  }
  ClarkOconeResult out;
  out.l2_error = std::sqrt(norm > 0.0 ? err / norm : err);
  out.report = make_duality_report(estimate_mean(f_values), estimate_mean(recon), *noise);
  out.reconstruction = std::move(recon);
  return out;
}

}  // namespace jumpsmp
