// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "jumpsmp/harness/experiments.hpp"

using namespace jumpsmp;
using namespace jumpsmp::harness;
namespace fs = std::filesystem;

namespace {

struct Line {
  bool pass;
  std::string detail;
};

Config ini(const std::string& text) {
  std::istringstream is(text);
  return Config::from_ini(is);
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string fmt(const char* pattern, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, pattern, a, b, c, d);
  return buf;
}

Line closed_form_convergence() {
  const auto start = std::chrono::steady_clock::now();
  const auto out = compute("convergence-study", ini(R"(
[model]
family = linear
x0 = 1
b1 = 0.05
s1 = 0.2
g1 = 1
atoms = -0.1, 0.5
[mc]
n_paths = 10000
seed = 101
[control]
kind = constant
value = 0
[convergence]
n_steps = 64, 128, 256
min_ratio = 1.4
max_ratio = 2.6
)"));
  const double runtime = seconds_since(start);
  const auto& rmse = out.results["rmse"];
  const auto& ratios = out.results["ratios"];
  return {out.pass && runtime < 60.0,
          fmt("rmse %.3g/%.3g/%.3g, ratios %.3f", rmse[0].get<double>(), rmse[1].get<double>(),
              rmse[2].get<double>(), ratios[0].get<double>()) +
              fmt(", %.3f (band [1.4, 2.6]), %.1fs", ratios[1].get<double>(), runtime)};
}

Line duality_line(const Outcome& out, double analytic) {
  const auto& r = out.results;
  return {out.pass, fmt("lhs %.5f (se %.5f), rhs %.5f (se %.5f)", r["lhs"].get<double>(), r["se_lhs"].get<double>(),
                        r["rhs"].get<double>(), r["se_rhs"].get<double>()) +
                        fmt(", analytic %.4g", analytic)};
}

Line brownian_duality() {
  return duality_line(compute("check-duality", ini(R"(
[grid]
n_steps = 100
[mc]
n_paths = 100000
seed = 102
[duality]
functional = bt-squared
mode = brownian
integrand = brownian
)")),
                      1.0);
}

Line jump_duality() {
  return duality_line(compute("check-duality", ini(R"(
[model]
atoms = 0.2, 1
[grid]
n_steps = 100
[mc]
n_paths = 100000
seed = 103
[duality]
functional = eta-squared
mode = jump
integrand = constant
constant = 0.2
)")),
                      0.008);
}

Line clark_ocone_line() {
  const auto out = compute("clark-ocone", ini(R"(
[grid]
n_steps = 200
[mc]
n_paths = 100000
seed = 104
[duality]
functional = bt-squared
[clark_ocone]
max_error = 0.03
)"));
  return {out.pass, fmt("relative L2 vs Ito oracle %.2e (limit 0.03); vs F itself %.4f",
                        out.results["l2_error_vs_ito_oracle"].get<double>(), out.results["l2_error"].get<double>())};
}

double rel_l2(const PathArray& est, const std::function<double(std::size_t, std::size_t)>& ref, std::size_t n_cols) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < n_cols; ++i) {
    for (std::size_t k = 0; k < est.n_paths(); ++k) {
      const double r = ref(k, i);
      num += (est(k, i) - r) * (est(k, i) - r);
      den += r * r;
    }
  }
  return std::sqrt(num / den);
}

Line martingale_integrands() {
  const std::size_t n = 100, m = 100000;
  const auto noise = sample_noise(TimeGrid(1.0, n), LevyMeasure{}, m, 105);
  const auto coeffs = build_lq_coefficients(1.0, LevyMeasure{}, [](double z) { return z; });
  const auto fwd = euler_forward(coeffs, ControlLaw::constant(0.0, ControlSet::nonnegative()), noise, 0.0);

  const BsdeDriver zero = [](double, double, double, double, std::span<const double>) { return 0.0; };
  const auto adj = solve_regression(zero, [](double x) { return x; }, fwd);
  const double err_terminal = rel_l2(adj.q, [](std::size_t, std::size_t) { return 1.0; }, n);

  PathArray p(m, n + 1);
  for (std::size_t i = 0; i <= n; ++i) {
    for (std::size_t k = 0; k < m; ++k) p(k, i) = fwd.X(k, i) * fwd.X(k, i) - fwd.grid.time(i);
  }
  const auto qr = extract_qr(p, fwd.X, *noise);
  const double err_square = rel_l2(qr.q, [&](std::size_t k, std::size_t i) { return 2.0 * fwd.X(k, i); }, n);
  return {err_terminal < 0.03 && err_square < 0.05,
          fmt("F = B(T): q vs 1 %.2e (limit 0.03); B^2 - t: q vs 2B %.2e (limit 0.05)", err_terminal, err_square)};
}

Line bsde_equivalence() {
  const auto out = compute("solve-bsde", ini(R"(
[model]
family = lq
x0 = -1
sigma = 0.1
[grid]
n_steps = 100
[mc]
n_paths = 100000
seed = 106
[control]
kind = lq-solution
[bsde]
max_distance = 0.05
)"));
  return {out.pass, fmt("relative L2(dt x P) distance %.2e (limit 0.05)",
                        out.results["relative_l2_distance"].get<double>())};
}

LqParams lq(double x0, double sigma, std::size_t n_steps) {
  LqParams p;
  p.x0 = x0;
  p.sigma = sigma;
  p.grid = TimeGrid(1.0, n_steps);
  p.n_paths = 10000;
  p.seed = 107;
  return p;
}

Line constrained_lq() {
  const auto start = std::chrono::steady_clock::now();
  const auto pa = lq(1.0, 0.1, 100);
  const auto sa = solve_constrained(pa);
  const auto ca = compare_to_unconstrained(sa, pa);
  const auto pb = lq(-1.0, 0.1, 100);
  const auto sb = solve_constrained(pb);
  const auto cb = compare_to_unconstrained(sb, pb);
  const auto pc = lq(-1.0, 0.0, 1000);
  const auto sc = solve_constrained(pc);
  const auto cc = compare_to_unconstrained(sc, pc);
  const double runtime = seconds_since(start);
  const bool pass = sa.converged && sb.converged && sc.converged && ca.u_hat_norm < 0.05 && cb.distance < 0.05 &&
                    cc.distance < 1e-3 && runtime < 300.0;
  return {pass, fmt("(a) |u^| %.2e (limit 0.05); (b) distance %.2e (limit 0.05); (c) distance %.2e (limit 1e-3)",
                    ca.u_hat_norm, cb.distance, cc.distance) +
                    fmt("; %.1fs", runtime)};
}

Line maximum_principle_verdict() {
  const std::string spikes = R"(
[grid]
n_steps = 100
[mc]
n_paths = 10000
seed = 108
[spike]
tau = 0.25, 0.5, 0.75
v = 0, 0.5, 1
eps = 0.2, 0.1, 0.05
)";
  const auto interior = compute("check-smp", ini("[model]\nx0 = -1\n[control]\nkind = lq-solution\n" + spikes));
  const auto binding = compute("check-smp", ini("[model]\nx0 = 1\n[control]\nkind = lq-solution\n" + spikes));
  const auto bad = compute("check-smp", ini("[model]\nx0 = 1\n[control]\nkind = constant\nvalue = 1\n" + spikes));
  double worst = 0.0, worst_se = 0.0, worst_z = -1e300;
  for (const auto& cell : bad.results["cells"]) {
    const double stat = cell["statistic"].get<double>(), se = cell["se"].get<double>();
    const double z = stat - 3.0 * se;
    if (z > worst_z) {
      worst_z = z;
      worst = stat;
      worst_se = se;
    }
  }
  const bool pass = interior.pass && binding.pass && !bad.pass && worst > 3.0 * worst_se;
  return {pass, std::string("u^ from x0 = -1 ") + (interior.pass ? "passes" : "fails") + ", from x0 = 1 " +
                    (binding.pass ? "passes" : "fails") + "; u = 1 " + (bad.pass ? "passes" : "fails") +
                    fmt(" with statistic %.3f (se %.3f)", worst, worst_se)};
}

Line spike_consistency() {
  const std::size_t n = 100, m = 20000;
  const auto noise = sample_noise(TimeGrid(1.0, n), LevyMeasure{}, m, 109);
  const auto coeffs = build_lq_coefficients(0.1, LevyMeasure{}, [](double z) { return z; });
  const auto zero = ControlLaw::constant(0.0, ControlSet::nonnegative());
  const std::vector<double> eps{0.2, 0.1, 0.05};
  const auto verdict = check_necessary_condition(zero, coeffs, noise, 1.0, {0.5}, {1.0}, eps);

  std::vector<double> gap, band, second;
  for (std::size_t e = 0; e < eps.size(); ++e) {
    const auto& cell = verdict.cell(0, 0, e);
    gap.push_back(std::abs(cell.diff_quotient - cell.statistic));
    band.push_back(cell.diff_quotient_se + cell.statistic_se);
    const auto Z = variational_Z({0.5, eps[e], 1.0}, VariationalMode::Direct, coeffs, noise, 1.0, zero);
    double acc = 0.0;
    for (double z : Z.column(n)) acc += z * z;
    second.push_back(acc / static_cast<double>(m));
  }
  bool shrinking = true;
  for (std::size_t e = 0; e + 1 < eps.size(); ++e) shrinking = shrinking && gap[e + 1] <= gap[e] + 3.0 * (band[e] + band[e + 1]);
  bool scaling = true;
  for (std::size_t e = 0; e + 1 < eps.size(); ++e) {
    const double ratio = second[e] / second[e + 1];
    scaling = scaling && ratio >= 2.8 && ratio <= 5.2;
  }
  const auto& fine = verdict.cell(0, 0, 2);
  const auto& mid = verdict.cell(0, 0, 1);
  const double limit = 2.0 * fine.diff_quotient - mid.diff_quotient;
  const double limit_se = 2.0 * fine.diff_quotient_se + mid.diff_quotient_se;
  const bool converges = std::abs(limit - fine.statistic) <= 3.0 * (limit_se + fine.statistic_se);
  return {converges && shrinking && scaling,
          fmt("diff quotients %.4f/%.4f/%.4f, extrapolated %.4f", verdict.cell(0, 0, 0).diff_quotient,
              mid.diff_quotient, fine.diff_quotient, limit) +
              fmt(" vs statistic %.4f (se %.4f), Hamiltonian gap %.4f; E|Z|^2 ratio %.3f", fine.statistic,
                  fine.statistic_se, fine.hamiltonian_gap, second[0] / second[1]) +
              fmt(", %.3f", second[1] / second[2])};
}

int cli(const std::string& args) {
  const std::string cmd = std::string(JUMPSMP_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Line replay_determinism() {
  const auto root = fs::temp_directory_path() / "jumpsmp_acceptance_replay";
  fs::remove_all(root);
  std::size_t identical = 0;
  std::string failures;
  for (const auto& name : experiment_names()) {
    const auto dir = root / name;
    std::string flags = "--paths 2000 --seed 110 --out " + dir.string();
    if (name == "convergence-study") {
      const auto cfg = root / "linear.ini";
      fs::create_directories(root);
      std::ofstream(cfg) << "[model]\nfamily = linear\nx0 = 1\nb1 = 0.05\ns1 = 0.2\ng1 = 1\natoms = -0.1, 0.5\n";
      flags += " --config " + cfg.string();
    }
    const int run = cli(name + " " + flags);
    const int replay = (run == 0 || run == 1) ? cli("replay " + (dir / "report.json").string()) : -1;
    if (replay == 0) {
      ++identical;
    } else {
      failures += " " + name;
    }
  }
  fs::remove_all(root);
  return {identical == experiment_names().size(),
          std::to_string(identical) + "/" + std::to_string(experiment_names().size()) + " experiments replay identically" +
              (failures.empty() ? "" : "; mismatch:" + failures)};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Line()>>> criteria{
      {"closed form vs Euler strong rate", closed_form_convergence},
      {"Brownian generalized duality", brownian_duality},
      {"jump generalized duality", jump_duality},
      {"Clark-Ocone reconstruction", clark_ocone_line},
      {"martingale integrand extraction", martingale_integrands},
      {"explicit vs regression adjoint", bsde_equivalence},
      {"constrained LQ solver", constrained_lq},
      {"necessary condition verdict", maximum_principle_verdict},
      {"spike difference quotient consistency", spike_consistency},
      {"replay determinism", replay_determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Line line{false, ""};
    try {
      line = criteria[i].second();
    } catch (const std::exception& e) {
      line = {false, std::string("threw: ") + e.what()};
    }
    failed += line.pass ? 0 : 1;
    std::printf("criterion %zu %s: %s: %s\n", i + 1, line.pass ? "PASS" : "FAIL", criteria[i].first,
                line.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria pass\n", criteria.size() - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
