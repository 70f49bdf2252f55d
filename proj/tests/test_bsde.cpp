#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "jumpsmp/bsde.hpp"
#include "jumpsmp/stats.hpp"

using namespace jumpsmp;

namespace {

LinearDriverField zero_driver() {
  return [](std::size_t, std::size_t, LinearDriverPoint&) {};
}

/// X = x0 + sigma B + sum_k zeta_k N~_k with zero control.
PathBundle driftless(double sigma, const LevyMeasure& levy, std::size_t n_steps, std::size_t n_paths,
                     std::uint64_t seed, double x0 = 0.0) {
  const auto c = build_lq_coefficients(sigma, levy, [](double z) { return z; });
  const auto noise = sample_noise(TimeGrid(1.0, n_steps), levy, n_paths, seed);
  return euler_forward(c, ControlLaw::constant(0.0, ControlSet::nonnegative()), noise, x0);
}

double column_rel_l2(const PathArray& est, const std::function<double(std::size_t, std::size_t)>& ref,
                     std::size_t n_cols) {
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

}  // namespace

TEST(SolveLinearExplicit, ConstantTerminal) {
  const LevyMeasure levy({{0.2, 1.0}});
  const auto fwd = driftless(0.5, levy, 20, 500, 1);
  const std::vector<double> terminal(500, 1.25);
  const auto adj = solve_linear_explicit(zero_driver(), terminal, fwd.X, fwd.noise);
  for (double p : adj.p.raw()) EXPECT_NEAR(p, 1.25, 1e-12);
  for (double q : adj.q.raw()) EXPECT_EQ(q, 0.0);
  for (double r : adj.r[0].raw()) EXPECT_EQ(r, 0.0);
}

TEST(SolveLinearExplicit, BrownianTerminal) {
  const auto fwd = driftless(1.0, LevyMeasure{}, 20, 100000, 2);
  const auto terminal = fwd.X.column(20);
  const auto adj = solve_linear_explicit(zero_driver(), terminal, fwd.X, fwd.noise);
  for (std::size_t k = 0; k < 100; ++k) EXPECT_EQ(adj.p(k, 20), fwd.X(k, 20));
  EXPECT_LT(column_rel_l2(adj.p, [&](std::size_t k, std::size_t i) { return fwd.X(k, i); }, 21), 0.03);
  EXPECT_LT(column_rel_l2(adj.q, [](std::size_t, std::size_t) { return 1.0; }, 20), 0.03);
}

TEST(SolveLinearExplicit, ExponentialGammaWeight) {
  // b_x = c: p(t) = E[exp(c (T - t)) X(T) | X(t)] = exp(c (T - t)) X(t) for martingale X.
  const double c = 0.4;
  const auto fwd = driftless(1.0, LevyMeasure{}, 10, 20000, 3, 1.0);
  const LinearDriverField driver = [c](std::size_t, std::size_t, LinearDriverPoint& pt) { pt.b_x = c; };
  const auto terminal = fwd.X.column(10);
  const auto adj = solve_linear_explicit(driver, terminal, fwd.X, fwd.noise);
  const auto& grid = fwd.grid;
  EXPECT_LT(column_rel_l2(adj.p,
                          [&](std::size_t k, std::size_t i) { return std::exp(c * (1.0 - grid.time(i))) * fwd.X(k, i); },
                          11),
            0.02);
}

TEST(ExtractQr, CompensatedPoissonIntegrand) {
  const LevyMeasure levy({{0.2, 5.0}});
  const auto fwd = driftless(0.0, levy, 20, 50000, 4);
  // p(t) = eta(t) = X(t).
  const auto qr = extract_qr(fwd.X, fwd.X, *fwd.noise);
  EXPECT_LT(column_rel_l2(qr.r[0], [](std::size_t, std::size_t) { return 0.2; }, 20), 0.03);
  double q_ms = 0.0;
  for (double q : qr.q.raw()) q_ms += q * q;
  EXPECT_LT(std::sqrt(q_ms / static_cast<double>(qr.q.raw().size())), 0.01);
  EXPECT_FALSE(qr.unidentifiable[0]);
}

TEST(ExtractQr, UnidentifiableAtomGivesZero) {
  const LevyMeasure levy({{0.2, 1e-12}});
  const auto fwd = driftless(1.0, levy, 10, 200, 5);
  const auto qr = extract_qr(fwd.X, fwd.X, *fwd.noise);
  EXPECT_TRUE(qr.unidentifiable[0]);
  for (double r : qr.r[0].raw()) EXPECT_EQ(r, 0.0);
}

TEST(ExtractQr, SquareMartingaleMatchesTwoB) {
  const std::size_t n = 50;
  const auto fwd = driftless(1.0, LevyMeasure{}, n, 100000, 6);
  PathArray p(fwd.n_paths, n + 1);
  for (std::size_t i = 0; i <= n; ++i) {
    for (std::size_t k = 0; k < fwd.n_paths; ++k) p(k, i) = fwd.X(k, i) * fwd.X(k, i) - fwd.grid.time(i);
  }
  const auto qr = extract_qr(p, fwd.X, *fwd.noise);
  EXPECT_LT(column_rel_l2(qr.q, [&](std::size_t k, std::size_t i) { return 2.0 * fwd.X(k, i); }, n), 0.05);
}

TEST(ExtractQr, ConstantHasNoMartingalePart) {
  const auto fwd = driftless(1.0, LevyMeasure({{0.3, 1.0}}), 10, 100, 7);
  const PathArray p(100, 11, -3.0);
  const auto qr = extract_qr(p, fwd.X, *fwd.noise);
  for (double q : qr.q.raw()) EXPECT_EQ(q, 0.0);
  for (double r : qr.r[0].raw()) EXPECT_EQ(r, 0.0);
}

TEST(SolveRegression, ZeroProblemIsZero) {
  const auto fwd = driftless(1.0, LevyMeasure({{0.3, 1.0}}), 10, 300, 8);
  const BsdeDriver zero = [](double, double, double, double, std::span<const double>) { return 0.0; };
  const auto adj = solve_regression(zero, [](double) { return 0.0; }, fwd);
  for (double p : adj.p.raw()) EXPECT_EQ(p, 0.0);
  for (double q : adj.q.raw()) EXPECT_EQ(q, 0.0);
}

TEST(SolveRegression, LinearOdeLimit) {
  const double a = 0.5;
  const auto fwd = driftless(0.0, LevyMeasure{}, 1000, 16, 9);
  const BsdeDriver driver = [a](double, double, double p, double, std::span<const double>) { return -a * p; };
  const auto adj = solve_regression(driver, [](double) { return 1.0; }, fwd);
  EXPECT_NEAR(adj.p(0, 0), std::exp(a), 1e-3);
  EXPECT_EQ(adj.p(3, 1000), 1.0);
}

TEST(SolveRegression, AgreesWithExplicitOnLq) {
  const LevyMeasure levy({{0.2, 1.0}});
  const auto fwd = driftless(0.3, levy, 50, 20000, 10, 1.0);
  std::vector<double> terminal(fwd.n_paths);
  for (std::size_t k = 0; k < fwd.n_paths; ++k) terminal[k] = -fwd.X(k, 50);
  const auto explicit_adj = solve_linear_explicit(zero_driver(), terminal, fwd.X, fwd.noise);
  const BsdeDriver zero = [](double, double, double, double, std::span<const double>) { return 0.0; };
  const auto regression_adj = solve_regression(zero, [](double x) { return -x; }, fwd);
  EXPECT_LT(relative_l2_distance(explicit_adj.p, regression_adj.p, 51), 0.02);
  for (std::size_t k = 0; k < fwd.n_paths; ++k) EXPECT_EQ(regression_adj.p(k, 50), terminal[k]);
}

TEST(SolveRegression, MartingaleResidualHasZeroMean) {
  const LevyMeasure levy({{0.4, 2.0}});
  const auto fwd = driftless(0.5, levy, 20, 20000, 11, 1.0);
  const BsdeDriver zero = [](double, double, double, double, std::span<const double>) { return 0.0; };
  const auto adj = solve_regression(zero, [](double x) { return x * x; }, fwd);
  // The residual mean is minus the sample mean of the fitted martingale part, so
  // the band is the standard error of both pieces.
  std::vector<double> resid(fwd.n_paths), mart(fwd.n_paths);
  for (std::size_t i = 0; i < 20; ++i) {
    for (std::size_t k = 0; k < fwd.n_paths; ++k) {
      mart[k] = adj.q(k, i) * fwd.noise->dB(k, i) + adj.r[0](k, i) * fwd.noise->compensated(k, i, 0);
      resid[k] = adj.p(k, i + 1) - adj.p(k, i) - mart[k];
    }
    const auto est = estimate_mean(resid);
    EXPECT_LE(std::abs(est.mean), 5.0 * (est.se + estimate_mean(mart).se)) << "step " << i;
  }
}

TEST(SolveRegression, ContractionFailure) {
  const auto fwd = driftless(0.0, LevyMeasure{}, 10, 16, 12);
  const double dt = fwd.grid.dt();
  const BsdeDriver steep = [dt](double, double, double p, double, std::span<const double>) { return 2.0 * p / dt; };
  EXPECT_THROW(solve_regression(steep, [](double) { return 1.0; }, fwd), ContractionFailure);
}

TEST(AdjointCsv, Header) {
  const LevyMeasure levy({{0.2, 1.0}, {-0.1, 2.0}});
  const auto fwd = driftless(1.0, levy, 4, 30, 13);
  const std::vector<double> terminal(30, 1.0);
  const auto adj = solve_linear_explicit(zero_driver(), terminal, fwd.X, fwd.noise);
  std::ostringstream os;
  write_adjoint_csv(os, adj, 1);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "path_id,step,t,p,q,r_atom0,r_atom1");
}
