#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "jumpsmp/bsde.hpp"
#include "jumpsmp/harness/config.hpp"
#include "jumpsmp/lqsolver.hpp"
#include "jumpsmp/malliavin.hpp"
#include "jumpsmp/model.hpp"
#include "jumpsmp/simulate.hpp"
#include "jumpsmp/smp.hpp"

namespace jumpsmp::harness {

/// Numeric payload of one experiment plus the files it emits next to the report.
struct Outcome {
  nlohmann::json results;
  bool pass = false;
  std::vector<std::pair<std::string, std::string>> artifacts;  // file name, content
};

struct ModelSetup {
  ControlledCoefficients coeffs;
  LevyMeasure levy;
  TimeGrid grid;
  double x0;
};

inline LevyMeasure levy_from(const Config& c) {
  const auto flat = c.reals("model", "atoms");
  std::vector<JumpAtom> atoms;
  for (std::size_t i = 0; i + 1 < flat.size(); i += 2) atoms.push_back({flat[i], flat[i + 1]});
  try {
    return LevyMeasure(std::move(atoms));
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("model.atoms: ") + e.what());
  }
}

inline LinearModel linear_model_from(const Config& c) {
  LinearModel m;
  m.b0 = c.real("model", "b0");
  m.b1 = c.real("model", "b1");
  m.b_u = c.real("model", "b_u");
  m.s0 = c.real("model", "s0");
  m.s1 = c.real("model", "s1");
  m.g0 = c.real("model", "g0");
  m.g1 = c.real("model", "g1");
  m.control_cost = c.real("model", "control_cost");
  m.control_set = ControlSet{c.real("model", "u_min"), c.real("model", "u_max")};
  return m;
}

inline ModelSetup model_from(const Config& c) {
  const auto levy = levy_from(c);
  const TimeGrid grid(c.real("grid", "horizon"), static_cast<std::size_t>(c.integer("grid", "n_steps")));
  const auto family = c.text("model", "family");
  ControlledCoefficients coeffs;
  if (family == "lq") {
    const double scale = c.real("model", "gamma_scale");
    coeffs = build_lq_coefficients(c.real("model", "sigma"), levy, [scale](double z) { return scale * z; });
  } else if (family == "linear") {
    coeffs = build_linear_coefficients(linear_model_from(c));
  } else {
    PolynomialModel m;
    m.drift = Polynomial(c.reals("model", "drift"));
    m.diffusion = Polynomial(c.reals("model", "diffusion"));
    m.jump = Polynomial(c.reals("model", "jump"));
    m.running = Polynomial(c.reals("model", "running"));
    m.terminal = Polynomial(c.reals("model", "terminal"));
    m.drift_u = c.real("model", "drift_u");
    m.diffusion_u = c.real("model", "diffusion_u");
    m.jump_u = c.real("model", "jump_u");
    m.running_u = c.real("model", "running_u");
    m.control_cost = c.real("model", "control_cost");
    m.control_set = ControlSet{c.real("model", "u_min"), c.real("model", "u_max")};
    coeffs = build_polynomial_coefficients(m);
  }
  return {std::move(coeffs), levy, grid, c.real("model", "x0")};
}

inline LqParams lq_params_from(const Config& c) {
  LqParams p;
  p.x0 = c.real("model", "x0");
  p.sigma = c.real("model", "sigma");
  p.levy = levy_from(c);
  const double scale = c.real("model", "gamma_scale");
  p.gamma_map = [scale](double z) { return scale * z; };
  p.grid = TimeGrid(c.real("grid", "horizon"), static_cast<std::size_t>(c.integer("grid", "n_steps")));
  p.n_paths = static_cast<std::size_t>(c.integer("mc", "n_paths"));
  p.seed = static_cast<std::uint64_t>(c.integer("mc", "seed"));
  p.max_iters = static_cast<unsigned>(c.integer("iteration", "max_iters"));
  p.damping = c.real("iteration", "damping");
  p.tol = c.real("iteration", "tol");
  p.basis = RegressionBasis{static_cast<unsigned>(c.integer("basis", "degree"))};
  return p;
}

inline ControlLaw control_from(const Config& c, const ModelSetup& m) {
  const auto kind = c.text("control", "kind");
  const auto set = m.coeffs.control_set;
  if (kind == "constant") {
    const double v = c.real("control", "value");
    if (!set.contains(v)) throw ConfigError("control.value lies outside the control set");
    return ControlLaw::constant(v, set);
  }
  if (kind == "linear-feedback") {
    const double gain = c.real("control", "gain"), offset = c.real("control", "offset");
    return ControlLaw::feedback([gain, offset](double, double x) { return offset + gain * x; }, set);
  }
  if (kind == "unconstrained-lq") {
    const double T = m.grid.horizon();
    return ControlLaw::feedback([T](double t, double x) { return -x / (T + 1.0 - t); }, set);
  }
  return solve_constrained(lq_params_from(c)).feedback_law();
}

inline NoisePtr noise_from(const Config& c, const ModelSetup& m) {
  return sample_noise(m.grid, m.levy, static_cast<std::size_t>(c.integer("mc", "n_paths")),
                      static_cast<std::uint64_t>(c.integer("mc", "seed")));
}

inline RegressionBasis basis_from(const Config& c) {
  return RegressionBasis{static_cast<unsigned>(c.integer("basis", "degree"))};
}

inline WienerFunctional functional_from(const Config& c, const ModelSetup& m) {
  const auto name = c.text("duality", "functional");
  const std::size_t n = m.grid.n_steps();
  if (name == "bt-squared") {
    return WienerFunctional::compose(SmoothMap::square(), {WienerFunctional::brownian_terminal(n)});
  }
  if (name == "bt") return WienerFunctional::brownian_terminal(n);
  if (name == "eta-squared") {
    return WienerFunctional::compose(SmoothMap::square(), {WienerFunctional::compensated_jump_terminal(n, m.levy)});
  }
  return WienerFunctional::constant(c.real("duality", "constant"));
}

namespace experiments {

inline Outcome simulate(const Config& c) {
  const auto m = model_from(c);
  const auto noise = noise_from(c, m);
  const auto law = control_from(c, m);
  const auto paths = euler_forward(m.coeffs, law, noise, m.x0);
  const auto terminal = estimate_mean(paths.X.column(m.grid.n_steps()));
  const auto J = performance_J(law, m.coeffs, noise, m.x0);

  std::ostringstream csv;
  write_paths_csv(csv, paths, static_cast<std::size_t>(c.integer("output", "max_paths")));
  Outcome out;
  out.results = {{"mean_terminal_state", terminal.mean},
                 {"se_terminal_state", terminal.se},
                 {"J", J.estimate},
                 {"J_se", J.se}};
  out.pass = std::isfinite(terminal.mean) && std::isfinite(J.estimate);
  out.artifacts.emplace_back("paths.csv", csv.str());
  return out;
}

inline Outcome check_duality(const Config& c) {
  const auto m = model_from(c);
  const auto noise = noise_from(c, m);
  const auto F = functional_from(c, m);
  const double k = c.real("duality", "constant");
  const bool brownian_integrand = c.text("duality", "integrand") == "brownian";
  DualityReport report;
  if (c.text("duality", "mode") == "brownian") {
    report = check_duality_brownian(
        F, [&](const PathHistory& h) { return brownian_integrand ? h.brownian() : k; }, noise, basis_from(c));
  } else {
    report = check_duality_jump(
        F, [&](const PathHistory& h, std::size_t) { return brownian_integrand ? h.brownian() : k; }, noise,
        basis_from(c));
  }
  Outcome out;
  out.results = report;
  out.pass = report.verdict;
  out.artifacts.emplace_back("duality.json", out.results.dump(2) + "\n");
  return out;
}

/// T + 2 sum_i B(t_i) dB_i per path, the Ito representation of B(T)^2 on the grid.
inline std::vector<double> bt_squared_ito_oracle(const NoiseBundle& noise) {
  std::vector<double> out(noise.n_paths, noise.grid.horizon());
  for (std::size_t k = 0; k < noise.n_paths; ++k) {
    double b = 0.0;
    for (std::size_t i = 0; i < noise.grid.n_steps(); ++i) {
      out[k] += 2.0 * b * noise.dB(k, i);
      b += noise.dB(k, i);
    }
  }
  return out;
}

inline double relative_l2(std::span<const double> estimate, std::span<const double> reference) {
  double err = 0.0, norm = 0.0;
  for (std::size_t k = 0; k < reference.size(); ++k) {
    err += (estimate[k] - reference[k]) * (estimate[k] - reference[k]);
    norm += reference[k] * reference[k];
  }
  return std::sqrt(norm > 0.0 ? err / norm : err);
}

/// For B(T)^2 the verdict compares F^ with its Ito oracle; otherwise F^ with F.
inline Outcome clark_ocone(const Config& c) {
  const auto m = model_from(c);
  const auto noise = noise_from(c, m);
  const auto res = clark_ocone_reconstruct(functional_from(c, m), noise, basis_from(c));
  Outcome out;
  out.results = {{"l2_error", res.l2_error}, {"report", res.report}};
  double verdict_error = res.l2_error;
  if (c.text("duality", "functional") == "bt-squared") {
    verdict_error = relative_l2(res.reconstruction, bt_squared_ito_oracle(*noise));
    out.results["l2_error_vs_ito_oracle"] = verdict_error;
  }
  out.pass = verdict_error < c.real("clark_ocone", "max_error");
  out.artifacts.emplace_back("clark_ocone.json", out.results.dump(2) + "\n");
  return out;
}

inline Outcome solve_bsde(const Config& c) {
  const auto m = model_from(c);
  const auto noise = noise_from(c, m);
  const auto law = control_from(c, m);
  const auto run = adjoint_for(law, m.coeffs, noise, m.x0, basis_from(c));
  const auto reg = adjoint_by_regression(m.coeffs, run.forward, basis_from(c));
  const std::size_t n = m.grid.n_steps();
  const double distance = relative_l2_distance(run.adjoint.p, reg.p, n + 1);

  const std::size_t max_paths = static_cast<std::size_t>(c.integer("output", "max_paths"));
  std::ostringstream explicit_csv, regression_csv;
  write_adjoint_csv(explicit_csv, run.adjoint, max_paths);
  write_adjoint_csv(regression_csv, reg, max_paths);
  Outcome out;
  out.results = {{"p0_explicit", estimate_mean(run.adjoint.p.column(0)).mean},
                 {"p0_regression", estimate_mean(reg.p.column(0)).mean},
                 {"relative_l2_distance", distance},
                 {"unidentifiable_atoms", run.adjoint.unidentifiable}};
  out.pass = distance <= c.real("bsde", "max_distance");
  out.artifacts.emplace_back("adjoint.csv", explicit_csv.str());
  out.artifacts.emplace_back("adjoint_regression.csv", regression_csv.str());
  return out;
}

inline Outcome check_smp(const Config& c) {
  const auto m = model_from(c);
  const auto noise = noise_from(c, m);
  const auto law = control_from(c, m);
  for (double v : c.reals("spike", "v")) {
    if (!m.coeffs.control_set.contains(v)) throw ConfigError("spike.v values must lie in the control set");
  }
  const auto verdict = check_necessary_condition(law, m.coeffs, noise, m.x0, c.reals("spike", "tau"),
                                                 c.reals("spike", "v"), c.reals("spike", "eps"), basis_from(c));
  std::ostringstream csv;
  write_verdict_csv(csv, verdict);
  Outcome out;
  out.results = verdict;
  out.pass = verdict.pass;
  out.artifacts.emplace_back("verdict.json", out.results.dump(2) + "\n");
  out.artifacts.emplace_back("verdict.csv", csv.str());
  return out;
}

inline Outcome solve_lq(const Config& c) {
  const auto params = lq_params_from(c);
  const auto sol = solve_constrained(params);
  const auto cmp = compare_to_unconstrained(sol, params);
  std::ostringstream feedback, residuals;
  write_feedback_csv(feedback, sol);
  write_residual_csv(residuals, sol);
  Outcome out;
  const nlohmann::json comparison = cmp;
  out.results = {{"converged", sol.converged},
                 {"iterations", sol.iterations},
                 {"u_hat_l2_norm", cmp.u_hat_norm},
                 {"fixed_point_residual", sol.fixed_point_residual},
                 {"fbsde_residual", sol.fbsde_residual},
                 {"comparison", comparison}};
  out.pass = sol.converged && sol.fixed_point_residual <= 2.0 * params.tol;
  out.artifacts.emplace_back("feedback.csv", feedback.str());
  out.artifacts.emplace_back("residuals.csv", residuals.str());
  out.artifacts.emplace_back("comparison.json", comparison.dump(2) + "\n");
  return out;
}

/// Strong error at T between Euler and the explicit linear solution on common noise,
/// for each grid in convergence.n_steps.
inline Outcome convergence_study(const Config& c) {
  const auto lm = linear_model_from(c);
  const auto levy = levy_from(c);
  const auto coeffs = build_linear_coefficients(lm);
  const double T = c.real("grid", "horizon");
  const double x0 = c.real("model", "x0");
  const auto n_paths = static_cast<std::size_t>(c.integer("mc", "n_paths"));
  const auto seed = static_cast<std::uint64_t>(c.integer("mc", "seed"));
  if (c.text("control", "kind") != "constant") throw ConfigError("convergence-study needs control.kind = constant");
  const double u = c.real("control", "value");
  if (!lm.control_set.contains(u)) throw ConfigError("control.value lies outside the control set");

  const LinearField field = [&](std::size_t, std::size_t, LinearStep& st) {
    st.b0 = lm.b0 + lm.b_u * u;
    st.b1 = lm.b1;
    st.s0 = lm.s0;
    st.s1 = lm.s1;
    for (std::size_t a = 0; a < levy.size(); ++a) {
      st.gamma0[a] = levy[a].zeta * lm.g0;
      st.gamma1[a] = levy[a].zeta * lm.g1;
    }
  };

  std::vector<double> rmse;
  const auto steps = c.integers("convergence", "n_steps");
  for (auto n : steps) {
    const auto noise = sample_noise(TimeGrid(T, static_cast<std::size_t>(n)), levy, n_paths, seed);
    const auto euler = euler_forward(coeffs, ControlLaw::constant(u, lm.control_set), noise, x0);
    const auto closed = linear_closed_form(field, *noise, x0);
    double acc = 0.0;
    for (std::size_t k = 0; k < n_paths; ++k) {
      const double d = euler.X(k, static_cast<std::size_t>(n)) - closed(k, static_cast<std::size_t>(n));
      acc += d * d;
    }
    rmse.push_back(std::sqrt(acc / static_cast<double>(n_paths)));
  }
  std::vector<double> ratios;
  bool pass = true;
  for (std::size_t j = 0; j + 1 < rmse.size(); ++j) {
    ratios.push_back(rmse[j] / rmse[j + 1]);
    pass = pass && ratios.back() >= c.real("convergence", "min_ratio") &&
           ratios.back() <= c.real("convergence", "max_ratio");
  }
  std::ostringstream csv;
  csv << "n_steps,rmse,ratio_to_next\n";
  for (std::size_t j = 0; j < rmse.size(); ++j) {
    csv << steps[j] << ',' << format_double(rmse[j]) << ',';
    if (j < ratios.size()) csv << format_double(ratios[j]);
    csv << '\n';
  }
  Outcome out;
  out.results = {{"n_steps", steps}, {"rmse", rmse}, {"ratios", ratios}};
  out.pass = pass;
  out.artifacts.emplace_back("convergence.csv", csv.str());
  return out;
}

}  // namespace experiments

inline Outcome compute(const std::string& experiment, const Config& c) {
  if (experiment == "simulate") return experiments::simulate(c);
  if (experiment == "check-duality") return experiments::check_duality(c);
  if (experiment == "clark-ocone") return experiments::clark_ocone(c);
  if (experiment == "solve-bsde") return experiments::solve_bsde(c);
  if (experiment == "check-smp") return experiments::check_smp(c);
  if (experiment == "solve-lq") return experiments::solve_lq(c);
  if (experiment == "convergence-study") return experiments::convergence_study(c);
  throw ConfigError("unknown experiment '" + experiment + "'");
}

/// Exit codes: 0 verdict pass, 1 verdict fail, 2 configuration error, 3 numerical error.
enum ExitCode : int { kPass = 0, kFail = 1, kConfigError = 2, kNumericalError = 3 };

namespace detail {

inline void summarize(std::ostream& os, const nlohmann::json& value, const std::string& prefix) {
  if (value.is_object()) {
    for (const auto& [k, v] : value.items()) summarize(os, v, prefix.empty() ? k : prefix + "." + k);
  } else if (!value.is_array() || value.size() <= 8) {
    os << prefix << ": " << value.dump() << '\n';
  } else {
    os << prefix << ": [" << value.size() << " entries]\n";
  }
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << content;
}

}  // namespace detail

inline nlohmann::json make_report(const std::string& experiment, const Config& c, const Outcome& outcome,
                                  double runtime_seconds) {
  nlohmann::json files = nlohmann::json::array();
  for (const auto& [name, _] : outcome.artifacts) files.push_back(name);
  return {{"artifact_version", kArtifactVersion},
          {"experiment", experiment},
          {"config", c.json()},
          {"seed", c.integer("mc", "seed")},
          {"runtime_seconds", runtime_seconds},
          {"results", outcome.results},
          {"verdict", outcome.pass ? "pass" : "fail"},
          {"artifacts", files}};
}

/// Validates, computes, and only then writes report.json, summary.txt and the artifacts.
inline int run(const std::string& experiment, const Config& c, std::ostream& log) {
  validate(c, experiment);
  const auto start = std::chrono::steady_clock::now();
  const auto outcome = compute(experiment, c);
  const double runtime =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const auto report = make_report(experiment, c, outcome, runtime);

  const std::filesystem::path dir = c.text("experiment", "output_dir");
  std::filesystem::create_directories(dir);
  detail::write_file(dir / "report.json", report.dump(2) + "\n");
  for (const auto& [name, content] : outcome.artifacts) detail::write_file(dir / name, content);
  std::ostringstream summary;
  summary << "experiment: " << experiment << '\n'
          << "verdict: " << (outcome.pass ? "pass" : "fail") << '\n'
          << "seed: " << c.integer("mc", "seed") << '\n'
          << "n_paths: " << c.integer("mc", "n_paths") << '\n'
          << "runtime_seconds: " << runtime << '\n';
  detail::summarize(summary, outcome.results, "");
  detail::write_file(dir / "summary.txt", summary.str());

  log << experiment << ": " << (outcome.pass ? "pass" : "fail") << " (" << (dir / "report.json").string() << ")\n";
  return outcome.pass ? kPass : kFail;
}

/// Re-runs the experiment embedded in a report and compares results, verdict and the
/// artifact files next to the report bit for bit. 0 identical, 1 mismatch, 2 unreadable.
inline int replay(const std::filesystem::path& report_path, std::ostream& log) {
  std::ifstream is(report_path);
  if (!is) {
    log << "replay: cannot open " << report_path.string() << '\n';
    return kConfigError;
  }
  nlohmann::json report;
  try {
    report = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    log << "replay: malformed report: " << e.what() << '\n';
    return kConfigError;
  }
  if (!report.contains("experiment") || !report.contains("config") || !report.contains("results")) {
    log << "replay: report lacks experiment, config or results\n";
    return kConfigError;
  }
  const auto experiment = report["experiment"].get<std::string>();
  const auto config = Config::from_json(report["config"]);
  validate(config, experiment);
  const auto outcome = compute(experiment, config);

  if (outcome.results != report["results"]) {
    for (const auto& op : nlohmann::json::diff(report["results"], outcome.results)) {
      log << "replay: mismatch at " << op["path"].get<std::string>() << '\n';
      break;
    }
    return kFail;
  }
  if (report.value("verdict", "") != (outcome.pass ? "pass" : "fail")) {
    log << "replay: verdict differs\n";
    return kFail;
  }
  const auto dir = report_path.parent_path();
  for (const auto& [name, content] : outcome.artifacts) {
    const auto path = dir / name;
    if (!std::filesystem::exists(path)) continue;
    std::ifstream f(path, std::ios::binary);
    const std::string on_disk((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (on_disk != content) {
      log << "replay: artifact " << name << " differs\n";
      return kFail;
    }
  }
  log << "replay: identical\n";
  return kPass;
}

/// Maps exceptions from run/replay onto the exit-code contract.
template <class Fn>
int guarded(Fn&& fn, std::ostream& log) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    log << "configuration error: " << e.what() << '\n';
    return kConfigError;
  } catch (const InvalidArgument& e) {
    log << "configuration error: " << e.what() << '\n';
    return kConfigError;
  } catch (const NumericalError& e) {
    log << "numerical error: " << e.what() << '\n';
    return kNumericalError;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return kNumericalError;
  }
}

}  // namespace jumpsmp::harness
