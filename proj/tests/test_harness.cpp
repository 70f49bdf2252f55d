#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "jumpsmp/harness/experiments.hpp"

namespace fs = std::filesystem;
using namespace jumpsmp::harness;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("jumpsmp_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path write_ini(const fs::path& dir, const std::string& body) {
  const auto path = dir / "config.ini";
  std::ofstream(path) << body;
  return path;
}

int cli(const std::string& args) {
  const std::string cmd = std::string(JUMPSMP_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream is(path);
  return nlohmann::json::parse(is);
}

Config parse(const std::string& ini) {
  std::istringstream is(ini);
  return Config::from_ini(is);
}

}  // namespace

TEST(Config, DefaultsAreFilledAndTyped) {
  const Config c;
  EXPECT_EQ(c.text("model", "family"), "lq");
  EXPECT_EQ(c.integer("grid", "n_steps"), 100);
  EXPECT_DOUBLE_EQ(c.real("model", "x0"), 1.0);
  EXPECT_EQ(c.reals("spike", "tau").size(), 3u);
  EXPECT_TRUE(std::isinf(c.real("model", "u_max")));
}

TEST(Config, IniOverridesAndJsonRoundTrip) {
  const auto c = parse("[model]\nx0 = -1\nu_min = 0\n[spike]\ntau = 0.1, 0.2\n");
  EXPECT_DOUBLE_EQ(c.real("model", "x0"), -1.0);
  EXPECT_EQ(c.reals("spike", "tau"), (std::vector<double>{0.1, 0.2}));
  const auto back = Config::from_json(nlohmann::json::parse(c.json().dump()));
  EXPECT_EQ(back.json(), c.json());
  EXPECT_TRUE(std::isinf(back.real("model", "u_max")));
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(parse("[model]\nflavour = 1\n"), jumpsmp::ConfigError);
  EXPECT_THROW(parse("[nowhere]\nx = 1\n"), jumpsmp::ConfigError);
  EXPECT_THROW(parse("[grid]\nn_steps = ten\n"), jumpsmp::ConfigError);
  EXPECT_THROW(parse("[grid]\nn_steps = 1.5\n"), jumpsmp::ConfigError);
}

TEST(Config, ValidationCatchesRangeAndCrossFieldErrors) {
  EXPECT_THROW(validate(parse("[mc]\nn_paths = -5\n"), "simulate"), jumpsmp::ConfigError);
  EXPECT_THROW(validate(parse("[model]\nfamily = linear\n"), "solve-lq"), jumpsmp::ConfigError);
  EXPECT_THROW(validate(parse("[spike]\ntau = 0.9\neps = 0.2\n"), "check-smp"), jumpsmp::ConfigError);
  EXPECT_THROW(validate(parse("[experiment]\nname = simulate\n"), "solve-lq"), jumpsmp::ConfigError);
  EXPECT_NO_THROW(validate(Config{}, "simulate"));
}

TEST(Cli, NegativePathCountIsAConfigErrorAndWritesNothing) {
  const auto dir = scratch("negative");
  const auto ini = write_ini(dir, "[mc]\nn_paths = -5\n");
  EXPECT_EQ(cli("simulate --config " + ini.string() + " --out " + (dir / "out").string()), 2);
  EXPECT_FALSE(fs::exists(dir / "out"));
}

TEST(Cli, MissingConfigFileIsAConfigError) {
  EXPECT_EQ(cli("simulate --config /nonexistent/config.ini"), 2);
}

TEST(Cli, BrownianDualityPassesAndWritesReport) {
  const auto dir = scratch("duality");
  const auto ini = write_ini(dir, "[grid]\nn_steps = 20\n[duality]\nfunctional = bt-squared\n");
  ASSERT_EQ(cli("check-duality --config " + ini.string() + " --paths 20000 --seed 7 --out " + dir.string()), 0);
  const auto duality = read_json(dir / "duality.json");
  for (const char* key : {"lhs", "rhs", "se_lhs", "se_rhs", "n_paths", "seed", "verdict"}) {
    EXPECT_TRUE(duality.contains(key)) << key;
  }
  EXPECT_EQ(duality["n_paths"], 20000);
  EXPECT_EQ(duality["seed"], 7);
  const auto report = read_json(dir / "report.json");
  EXPECT_EQ(report["artifact_version"], kArtifactVersion);
  EXPECT_EQ(report["seed"], 7);
  EXPECT_EQ(report["config"]["mc"]["n_paths"], 20000);
  EXPECT_TRUE(report.contains("runtime_seconds"));
  EXPECT_EQ(report["verdict"], "pass");
  EXPECT_TRUE(fs::exists(dir / "summary.txt"));
}

TEST(Cli, SolveLqFromPositiveStartStaysAtZero) {
  const auto dir = scratch("lq");
  const auto ini = write_ini(dir, "[model]\nx0 = 1\n[grid]\nn_steps = 50\n");
  ASSERT_EQ(cli("solve-lq --config " + ini.string() + " --paths 2000 --out " + dir.string()), 0);
  const auto report = read_json(dir / "report.json");
  EXPECT_LT(report["results"]["u_hat_l2_norm"].get<double>(), 0.05);
  for (const char* f : {"feedback.csv", "residuals.csv", "comparison.json"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
}

TEST(Cli, ReplayDetectsIdenticalEditedAndMissingReports) {
  const auto dir = scratch("replay");
  const auto ini = write_ini(dir, "[grid]\nn_steps = 20\n[output]\nmax_paths = 3\n");
  ASSERT_EQ(cli("simulate --config " + ini.string() + " --paths 500 --out " + dir.string()), 0);
  const auto report = dir / "report.json";
  EXPECT_EQ(cli("replay " + report.string()), 0);

  auto edited = read_json(report);
  edited["results"]["J"] = edited["results"]["J"].get<double>() + 1e-9;
  std::ofstream(report) << edited.dump(2);
  EXPECT_EQ(cli("replay " + report.string()), 1);

  EXPECT_EQ(cli("replay " + (dir / "missing.json").string()), 2);
}

TEST(Cli, ReplayFlagsAnEditedArtifact) {
  const auto dir = scratch("replay_artifact");
  ASSERT_EQ(cli("simulate --paths 200 --out " + dir.string()), 0);
  std::ofstream(dir / "paths.csv", std::ios::app) << "0,0,0,0,,,\n";
  EXPECT_EQ(cli("replay " + (dir / "report.json").string()), 1);
}

TEST(Harness, ComputeIsDeterministicForAFixedSeed) {
  auto c = parse("[grid]\nn_steps = 10\n[mc]\nn_paths = 300\nseed = 11\n");
  const auto a = compute("simulate", c);
  const auto b = compute("simulate", c);
  EXPECT_EQ(a.results, b.results);
  EXPECT_EQ(a.artifacts, b.artifacts);
}

TEST(Harness, ConvergenceStudyNeedsConstantControl) {
  auto c = parse("[model]\nfamily = linear\n[control]\nkind = linear-feedback\n");
  EXPECT_THROW(compute("convergence-study", c), jumpsmp::ConfigError);
}
