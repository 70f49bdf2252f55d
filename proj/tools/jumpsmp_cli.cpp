#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "jumpsmp/harness/experiments.hpp"

namespace h = jumpsmp::harness;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::int64_t> seed;
  std::optional<std::int64_t> paths;
  std::optional<std::string> out;
};

h::Config resolve(const std::string& experiment, const Overrides& o) {
  h::Config c;
  if (!o.config.empty()) {
    std::ifstream is(o.config);
    if (!is) throw jumpsmp::ConfigError("cannot open config file " + o.config);
    c = h::Config::from_ini(is);
  }
  if (c.text("experiment", "name").empty()) c.assign("experiment", "name", experiment);
  if (o.seed) c.assign("mc", "seed", std::to_string(*o.seed));
  if (o.paths) c.assign("mc", "n_paths", std::to_string(*o.paths));
  if (o.out) c.assign("experiment", "output_dir", *o.out);
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spike-variation maximum principle lab for controlled jump diffusions"};
  app.require_subcommand(1);

  Overrides overrides;
  std::string selected;
  for (const auto& name : h::experiment_names()) {
    auto* sub = app.add_subcommand(name, "run the " + name + " experiment");
    sub->add_option("--config", overrides.config, "INI configuration file")->check(CLI::ExistingFile);
    sub->add_option("--seed", overrides.seed, "override mc.seed");
    sub->add_option("--paths", overrides.paths, "override mc.n_paths");
    sub->add_option("--out", overrides.out, "override experiment.output_dir");
    sub->callback([&selected, name] { selected = name; });
  }
  std::string report;
  auto* replay = app.add_subcommand("replay", "re-run a report and compare its results");
  replay->add_option("report", report, "path to report.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : h::kConfigError;
  }

  if (replay->parsed()) {
    return h::guarded([&] { return h::replay(report, std::cerr); }, std::cerr);
  }
  return h::guarded([&] { return h::run(selected, resolve(selected, overrides), std::cout); }, std::cerr);
}
