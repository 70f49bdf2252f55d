#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include "jumpsmp/errors.hpp"
#include "jumpsmp/model.hpp"
#include "jumpsmp/regression.hpp"

namespace jumpsmp::harness {

inline const char* const kArtifactVersion = "0.1.0";

inline const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names{"simulate",  "check-duality", "clark-ocone",      "solve-bsde",
                                              "check-smp", "solve-lq",      "convergence-study"};
  return names;
}

enum class FieldType { Real, Integer, Text, RealList, IntegerList };

struct FieldSpec {
  FieldType type;
  std::string fallback;
};

/// section -> key -> spec. Every key a config may contain is listed here.
inline const std::map<std::string, std::map<std::string, FieldSpec>>& schema() {
  using T = FieldType;
  static const std::map<std::string, std::map<std::string, FieldSpec>> s{
      {"experiment", {{"name", {T::Text, ""}}, {"output_dir", {T::Text, "out"}}}},
      {"model",
       {{"family", {T::Text, "lq"}},
        {"x0", {T::Real, "1"}},
        {"sigma", {T::Real, "0.1"}},
        {"atoms", {T::RealList, ""}},
        {"gamma_scale", {T::Real, "1"}},
        {"b0", {T::Real, "0"}},
        {"b1", {T::Real, "0"}},
        {"b_u", {T::Real, "1"}},
        {"s0", {T::Real, "0"}},
        {"s1", {T::Real, "0"}},
        {"g0", {T::Real, "0"}},
        {"g1", {T::Real, "0"}},
        {"drift", {T::RealList, "0"}},
        {"diffusion", {T::RealList, "0"}},
        {"jump", {T::RealList, "0"}},
        {"running", {T::RealList, "0"}},
        {"terminal", {T::RealList, "0"}},
        {"drift_u", {T::Real, "0"}},
        {"diffusion_u", {T::Real, "0"}},
        {"jump_u", {T::Real, "0"}},
        {"running_u", {T::Real, "0"}},
        {"control_cost", {T::Real, "1"}},
        {"u_min", {T::Real, "-inf"}},
        {"u_max", {T::Real, "inf"}}}},
      {"grid", {{"horizon", {T::Real, "1"}}, {"n_steps", {T::Integer, "100"}}}},
      {"mc", {{"n_paths", {T::Integer, "10000"}}, {"seed", {T::Integer, "1"}}}},
      {"basis", {{"degree", {T::Integer, "3"}}}},
      {"control",
       {{"kind", {T::Text, "constant"}},
        {"value", {T::Real, "0"}},
        {"gain", {T::Real, "0"}},
        {"offset", {T::Real, "0"}}}},
      {"duality",
       {{"functional", {T::Text, "bt-squared"}},
        {"mode", {T::Text, "brownian"}},
        {"integrand", {T::Text, "brownian"}},
        {"constant", {T::Real, "1"}}}},
      {"clark_ocone", {{"max_error", {T::Real, "0.03"}}}},
      {"bsde", {{"max_distance", {T::Real, "0.05"}}}},
      {"spike",
       {{"tau", {T::RealList, "0.25,0.5,0.75"}},
        {"v", {T::RealList, "0,0.5,1"}},
        {"eps", {T::RealList, "0.2,0.1,0.05"}}}},
      {"iteration", {{"max_iters", {T::Integer, "100"}}, {"damping", {T::Real, "0.5"}}, {"tol", {T::Real, "1e-6"}}}},
      {"convergence",
       {{"n_steps", {T::IntegerList, "64,128,256"}},
        {"min_ratio", {T::Real, "1.4"}},
        {"max_ratio", {T::Real, "2.6"}}}},
      {"output", {{"max_paths", {T::Integer, "10"}}}},
  };
  return s;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline double parse_real(const std::string& where, const std::string& text) {
  const auto t = trim(text);
  if (t == "inf" || t == "+inf") return std::numeric_limits<double>::infinity();
  if (t == "-inf") return -std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(t, &used);
  } catch (const std::exception&) {
    throw ConfigError(where + ": expected a number, got '" + text + "'");
  }
  if (used != t.size() || std::isnan(v)) throw ConfigError(where + ": expected a number, got '" + text + "'");
  return v;
}

inline std::int64_t parse_integer(const std::string& where, const std::string& text) {
  const auto t = trim(text);
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(t, &used);
  } catch (const std::exception&) {
    throw ConfigError(where + ": expected an integer, got '" + text + "'");
  }
  if (used != t.size()) throw ConfigError(where + ": expected an integer, got '" + text + "'");
  return v;
}

inline std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

/// Non-finite reals are kept as the strings "inf" / "-inf" so the JSON form round-trips.
inline nlohmann::json real_json(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

}  // namespace detail

/// Fully resolved, typed configuration. Stored as {section: {key: value}} JSON so the
/// same object is embedded verbatim in every report.
class Config {
 public:
  Config() {
    for (const auto& [section, keys] : schema()) {
      for (const auto& [key, spec] : keys) assign(section, key, spec.fallback);
    }
  }

  static Config from_ini(std::istream& is) {
    boost::property_tree::ptree tree;
    try {
      boost::property_tree::ini_parser::read_ini(is, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError(std::string("malformed config: ") + e.message() + " (line " + std::to_string(e.line()) + ")");
    }
    Config c;
    for (const auto& [section, body] : tree) {
      if (body.empty()) throw ConfigError("key '" + section + "' outside of a section");
      for (const auto& [key, value] : body) {
        if (!value.empty()) throw ConfigError("nested key in section '" + section + "'");
        c.assign(section, key, value.data());
      }
    }
    return c;
  }

  static Config from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("embedded config is not an object");
    Config c;
    for (const auto& [section, body] : j.items()) {
      if (!body.is_object()) throw ConfigError("section '" + section + "' is not an object");
      for (const auto& [key, value] : body.items()) {
        c.assign(section, key, value.is_string() ? value.get<std::string>() : to_text(value));
      }
    }
    return c;
  }

  /// Parses `text` according to the schema and stores it. Unknown keys are rejected.
  void assign(const std::string& section, const std::string& key, const std::string& text) {
    const auto& s = schema();
    const auto sec = s.find(section);
    if (sec == s.end()) throw ConfigError("unknown section [" + section + "]");
    const auto field = sec->second.find(key);
    if (field == sec->second.end()) throw ConfigError("unknown key '" + key + "' in [" + section + "]");
    const std::string where = section + "." + key;
    auto& slot = data_[section][key];
    switch (field->second.type) {
      case FieldType::Real:
        slot = detail::real_json(detail::parse_real(where, text));
        break;
      case FieldType::Integer:
        slot = detail::parse_integer(where, text);
        break;
      case FieldType::Text:
        slot = detail::trim(text);
        break;
      case FieldType::RealList: {
        slot = nlohmann::json::array();
        for (const auto& item : detail::split_list(text)) slot.push_back(detail::real_json(detail::parse_real(where, item)));
        break;
      }
      case FieldType::IntegerList: {
        slot = nlohmann::json::array();
        for (const auto& item : detail::split_list(text)) slot.push_back(detail::parse_integer(where, item));
        break;
      }
    }
  }

  double real(const std::string& section, const std::string& key) const { return as_real(at(section, key)); }
  std::int64_t integer(const std::string& section, const std::string& key) const {
    return at(section, key).get<std::int64_t>();
  }
  std::string text(const std::string& section, const std::string& key) const {
    return at(section, key).get<std::string>();
  }
  std::vector<double> reals(const std::string& section, const std::string& key) const {
    std::vector<double> out;
    for (const auto& v : at(section, key)) out.push_back(as_real(v));
    return out;
  }
  std::vector<std::int64_t> integers(const std::string& section, const std::string& key) const {
    return at(section, key).get<std::vector<std::int64_t>>();
  }

  const nlohmann::json& json() const noexcept { return data_; }

 private:
  static std::string to_text(const nlohmann::json& v) {
    if (v.is_array()) {
      std::string out;
      for (const auto& item : v) {
        if (!out.empty()) out += ',';
        out += item.is_string() ? item.get<std::string>() : item.dump();
      }
      return out;
    }
    return v.dump();
  }

  static double as_real(const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>() == "inf" ? std::numeric_limits<double>::infinity()
                                                            : -std::numeric_limits<double>::infinity();
    return v.get<double>();
  }

  const nlohmann::json& at(const std::string& section, const std::string& key) const {
    return data_.at(section).at(key);
  }

  nlohmann::json data_ = nlohmann::json::object();
};

/// Range and cross-field checks, run before any simulation or file output.
inline void validate(const Config& c, const std::string& experiment) {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  const auto& names = experiment_names();
  if (std::find(names.begin(), names.end(), experiment) == names.end()) fail("unknown experiment '" + experiment + "'");
  const auto named = c.text("experiment", "name");
  if (!named.empty() && named != experiment) {
    fail("config names experiment '" + named + "' but '" + experiment + "' was requested");
  }
  if (c.text("experiment", "output_dir").empty()) fail("experiment.output_dir must not be empty");

  const auto family = c.text("model", "family");
  if (family != "lq" && family != "linear" && family != "custom-polynomial") {
    fail("model.family must be lq, linear or custom-polynomial");
  }
  if (!std::isfinite(c.real("model", "x0"))) fail("model.x0 must be finite");
  if (c.reals("model", "atoms").size() % 2 != 0) fail("model.atoms must list zeta,intensity pairs");
  for (const char* key : {"drift", "diffusion", "jump", "running", "terminal"}) {
    if (c.reals("model", key).empty()) fail(std::string("model.") + key + " needs at least one coefficient");
  }
  if (!(c.real("model", "u_min") <= c.real("model", "u_max"))) fail("model.u_min must not exceed model.u_max");

  if (!(c.real("grid", "horizon") > 0.0) || !std::isfinite(c.real("grid", "horizon"))) {
    fail("grid.horizon must be positive");
  }
  if (c.integer("grid", "n_steps") < 2) fail("grid.n_steps must be at least 2");
  if (c.integer("mc", "n_paths") < 1) fail("mc.n_paths must be positive");
  if (c.integer("mc", "seed") < 0) fail("mc.seed must be non-negative");
  const auto degree = c.integer("basis", "degree");
  if (degree < 0 || degree > 8) fail("basis.degree must lie in [0, 8]");
  if (c.integer("output", "max_paths") < 0) fail("output.max_paths must be non-negative");

  const auto kind = c.text("control", "kind");
  if (kind != "constant" && kind != "linear-feedback" && kind != "unconstrained-lq" && kind != "lq-solution") {
    fail("control.kind must be constant, linear-feedback, unconstrained-lq or lq-solution");
  }
  if (kind == "lq-solution" && family != "lq") fail("control.kind = lq-solution needs model.family = lq");

  const auto functional = c.text("duality", "functional");
  if (functional != "bt-squared" && functional != "eta-squared" && functional != "bt" && functional != "constant") {
    fail("duality.functional must be bt-squared, eta-squared, bt or constant");
  }
  const auto mode = c.text("duality", "mode");
  if (mode != "brownian" && mode != "jump") fail("duality.mode must be brownian or jump");
  const auto integrand = c.text("duality", "integrand");
  if (integrand != "brownian" && integrand != "constant") fail("duality.integrand must be brownian or constant");

  const double T = c.real("grid", "horizon");
  for (double tau : c.reals("spike", "tau")) {
    if (!(tau >= 0.0 && tau < T)) fail("spike.tau values must lie in [0, horizon)");
  }
  for (double eps : c.reals("spike", "eps")) {
    if (!(eps > 0.0)) fail("spike.eps values must be positive");
  }
  if (experiment == "check-smp") {
    if (c.reals("spike", "tau").empty() || c.reals("spike", "v").empty() || c.reals("spike", "eps").empty()) {
      fail("spike.tau, spike.v and spike.eps must be non-empty");
    }
    for (double tau : c.reals("spike", "tau")) {
      for (double eps : c.reals("spike", "eps")) {
        if (tau + eps > T * (1.0 + 1e-12)) fail("spike.tau + spike.eps must not exceed the horizon");
      }
    }
  }

  if (c.integer("iteration", "max_iters") < 1) fail("iteration.max_iters must be at least 1");
  const double damping = c.real("iteration", "damping");
  if (!(damping > 0.0 && damping <= 1.0)) fail("iteration.damping must lie in (0, 1]");
  if (!(c.real("iteration", "tol") > 0.0)) fail("iteration.tol must be positive");

  if (experiment == "convergence-study") {
    const auto steps = c.integers("convergence", "n_steps");
    if (steps.size() < 2) fail("convergence.n_steps needs at least two grids");
    for (auto n : steps) {
      if (n < 2) fail("convergence.n_steps values must be at least 2");
    }
    if (family != "linear") fail("convergence-study needs model.family = linear");
  }
  if (experiment == "solve-lq" && family != "lq") fail("solve-lq needs model.family = lq");
  if (experiment == "check-duality" && mode == "jump" && c.reals("model", "atoms").empty()) {
    fail("jump duality needs at least one atom in model.atoms");
  }
  if (experiment == "clark-ocone" && functional == "eta-squared") fail("clark-ocone needs a jump-free functional");
}

}  // namespace jumpsmp::harness
