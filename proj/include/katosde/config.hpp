#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "katosde/io.hpp"
#include "katosde/kato.hpp"
#include "katosde/mollify.hpp"
#include "katosde/zvonkin.hpp"

namespace katosde {

// ---------------------------------------------------------------------------
// JSON access with configuration errors naming the key

namespace cfg {

inline const Json* find(const Json& j, const std::string& key) {
  if (!j.is_object()) return nullptr;
  auto it = j.find(key);
  return it == j.end() || it->is_null() ? nullptr : &*it;
}

inline double num(const Json& j, const std::string& key, const std::string& where) {
  const Json* v = find(j, key);
  if (!v || !v->is_number()) throw ConfigError(where + ": '" + key + "' must be a number");
  return v->get<double>();
}

inline double num_or(const Json& j, const std::string& key, double def, const std::string& where) {
  return find(j, key) ? num(j, key, where) : def;
}

inline long long int_or(const Json& j, const std::string& key, long long def, const std::string& where) {
  const Json* v = find(j, key);
  if (!v) return def;
  if (!v->is_number_integer()) throw ConfigError(where + ": '" + key + "' must be an integer");
  return v->get<long long>();
}

inline bool bool_or(const Json& j, const std::string& key, bool def, const std::string& where) {
  const Json* v = find(j, key);
  if (!v) return def;
  if (!v->is_boolean()) throw ConfigError(where + ": '" + key + "' must be true or false");
  return v->get<bool>();
}

inline std::string str_or(const Json& j, const std::string& key, const std::string& def, const std::string& where) {
  const Json* v = find(j, key);
  if (!v) return def;
  if (!v->is_string()) throw ConfigError(where + ": '" + key + "' must be a string");
  return v->get<std::string>();
}

inline std::vector<double> vec(const Json& v, const std::string& key, const std::string& where) {
  if (!v.is_array()) throw ConfigError(where + ": '" + key + "' must be an array of numbers");
  std::vector<double> out;
  for (const auto& e : v) {
    if (!e.is_number()) throw ConfigError(where + ": '" + key + "' must be an array of numbers");
    out.push_back(e.get<double>());
  }
  return out;
}

inline std::optional<std::vector<double>> vec_opt(const Json& j, const std::string& key, const std::string& where) {
  const Json* v = find(j, key);
  if (!v) return std::nullopt;
  return vec(*v, key, where);
}

inline std::vector<int> ints(const Json& v, const std::string& key, const std::string& where) {
  if (!v.is_array()) throw ConfigError(where + ": '" + key + "' must be an array of integers");
  std::vector<int> out;
  for (const auto& e : v) {
    if (!e.is_number_integer()) throw ConfigError(where + ": '" + key + "' must be an array of integers");
    out.push_back(e.get<int>());
  }
  return out;
}

}  // namespace cfg

// ---------------------------------------------------------------------------
// Field specifications

/// Builds a field from {"family": ..., ...}. `role` names the field in errors.
/// `vector_range`: when > 0 the field must end with that many components.
inline SpaceTimeField parse_field(const Json& j, int dim, double horizon, const std::string& role, int vector_range,
                                  const std::filesystem::path& base_dir = {}) {
  if (!j.is_object()) throw ConfigError(role + ": field spec must be an object");
  const std::string fam = cfg::str_or(j, "family", "", role);
  if (fam.empty()) throw ConfigError(role + ": missing 'family'");
  if (cfg::find(j, "dim") && cfg::int_or(j, "dim", dim, role) != dim)
    throw ConfigError(role + ": dimension " + std::to_string(cfg::int_or(j, "dim", dim, role)) +
                      " differs from the experiment dimension " + std::to_string(dim));
  if (cfg::find(j, "horizon") && cfg::num(j, "horizon", role) != horizon)
    throw ConfigError(role + ": horizon differs from the experiment horizon");
  SpaceTimeField f;
  try {
    if (fam == "zero") {
      f = zero_field(dim, horizon, vector_range > 0 ? vector_range : 1);
    } else if (fam == "constant") {
      const Json* v = cfg::find(j, "value");
      if (!v) throw ConfigError(role + ": constant needs 'value'");
      f = constant_field(dim, horizon, v->is_number() ? std::vector<double>{v->get<double>()} : cfg::vec(*v, "value", role));
    } else if (fam == "power_product") {
      ExampleParams p;
      const Json* a = cfg::find(j, "alphas");
      if (!a) throw ConfigError(role + ": power_product needs 'alphas'");
      p.alphas = cfg::vec(*a, "alphas", role);
      if (static_cast<int>(p.alphas.size()) != dim)
        throw ConfigError(role + ": 'alphas' has " + std::to_string(p.alphas.size()) +
                          " entries, experiment dimension is " + std::to_string(dim));
      f = make_example(ExampleFamily::PowerProduct, dim, horizon, p);
    } else if (fam == "ball_lattice") {
      ExampleParams p;
      p.alpha = cfg::num(j, "alpha", role);
      p.min_radius = cfg::num_or(j, "min_radius", p.min_radius, role);
      f = make_example(ExampleFamily::BallLattice, dim, horizon, p);
    } else if (fam == "time_singular") {
      ExampleParams p;
      p.alpha = cfg::num(j, "alpha", role);
      p.gaussian_tail = cfg::bool_or(j, "gaussian_tail", false, role);
      f = make_example(ExampleFamily::TimeSingular, dim, horizon, p);
    } else if (fam == "gaussian_bump") {
      auto c = cfg::vec_opt(j, "center", role).value_or(std::vector<double>(dim, 0.0));
      if (static_cast<int>(c.size()) != dim) throw ConfigError(role + ": 'center' length differs from dim");
      f = gaussian_bump(dim, horizon, cfg::num_or(j, "amplitude", 1.0, role), c, cfg::num_or(j, "width", 1.0, role));
    } else if (fam == "grid") {
      std::filesystem::path p = cfg::str_or(j, "path", "", role);
      if (p.empty()) throw ConfigError(role + ": grid needs 'path'");
      if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
      auto g = std::make_shared<GridField>(read_grid_csv(p.string(), dim));
      f = SpaceTimeField::general(dim, g->range_dim(), horizon,
                                  [g](double t, std::span<const double> x, std::span<double> out) { g->eval(t, x, out); })
              .with_metadata("grid(" + p.filename().string() + ")", std::nullopt);
    } else {
      throw ConfigError(role + ": unknown family '" + fam + "'");
    }
    if (const Json* dir = cfg::find(j, "direction")) {
      auto dv = cfg::vec(*dir, "direction", role);
      if (static_cast<int>(dv.size()) != dim) throw ConfigError(role + ": 'direction' length differs from dim");
      f = f.with_direction(dv, cfg::num_or(j, "strength", 1.0, role));
    }
    if (const Json* m = cfg::find(j, "mollify")) {
      if (!m->is_number_integer() || m->get<int>() < 0) throw ConfigError(role + ": 'mollify' must be a level >= 0");
      f = mollify(f, m->get<int>());
    }
  } catch (const ValidationError& e) {
    throw ConfigError(role + ": " + e.what());
  }
  if (vector_range > 0 && f.range_dim() != vector_range)
    throw ConfigError(role + ": needs " + std::to_string(vector_range) + " components, got " +
                      std::to_string(f.range_dim()) + " (scalar families take a 'direction')");
  return f;
}

/// Same spec with a mollification level set.
inline Json with_mollify(Json spec, std::optional<int> level) {
  if (level) spec["mollify"] = *level;
  return spec;
}

// ---------------------------------------------------------------------------
// Experiment configuration

struct MonteCarloSpec {
  std::size_t paths = 10000;
  int steps = 1024;
  std::vector<double> x0;
  std::optional<double> T;  // defaults to the solved horizon, else the field horizon
  std::uint64_t seed = 0;
  double cap = kCap;
  bool density = false;
  std::optional<double> density_t;
};

struct CoupleSpec {
  std::vector<std::pair<int, int>> pairs{{5, 7}, {6, 8}};
  double T = 0.25;
  int steps = 1024;
  std::optional<std::size_t> paths;  // defaults to monte_carlo.paths
};

struct ExperimentConfig {
  Json raw;
  std::filesystem::path base_dir;
  int dim = 2;
  double horizon = 1.0;
  std::uint64_t seed = 0;
  Json drift_spec, source_spec, test_spec;  // source/test may be null
  std::vector<std::string> stages;

  CertifyPolicy certify;
  std::string certify_target = "drift";
  HorizonPolicy horizon_policy;
  std::optional<double> grid_half_width;  // default 0.5 + 6 sqrt(T_star)
  int grid_points = 41;
  int time_steps = 64;
  PicardPolicy picard;
  RegularityPolicy regularity;
  std::optional<int> solve_level;  // mollification of b (and f) for the PDE stages
  std::vector<int> n_list{4, 5, 6};
  ZvonkinPolicy zvonkin;
  int zvonkin_steps = 2048;
  MonteCarloSpec mc;
  CoupleSpec couple;
  double maximal_R = 0.5, maximal_half_width = 1.0;
  int maximal_points = 65;
  std::string maximal_field = "drift";

  SpaceTimeField drift() const { return parse_field(drift_spec, dim, horizon, "drift", dim, base_dir); }
  Json solve_drift_spec() const { return with_mollify(drift_spec, solve_level); }
  Json solve_source_spec() const {
    return source_spec.is_null() ? solve_drift_spec() : with_mollify(source_spec, solve_level);
  }
  bool source_is_drift() const { return source_spec.is_null(); }
  SpaceTimeField field_by_role(const std::string& role) const {
    if (role == "drift") return drift();
    if (role == "source") {
      if (source_spec.is_null()) return drift();
      return parse_field(source_spec, dim, horizon, "source", 0, base_dir);
    }
    if (role == "test") {
      if (test_spec.is_null()) throw ConfigError("test: field 'test' is not configured");
      return parse_field(test_spec, dim, horizon, "test", 1, base_dir);
    }
    throw ConfigError("unknown field role '" + role + "'");
  }
};

inline const std::vector<std::string>& all_stages() {
  static const std::vector<std::string> s{"certify", "maximal", "solve-pde", "zvonkin", "simulate", "couple", "krylov"};
  return s;
}

namespace detail {

inline QuadraturePolicy parse_quadrature(const Json& j, const std::string& where) {
  QuadraturePolicy q;
  q.time_levels = static_cast<int>(cfg::int_or(j, "time_levels", q.time_levels, where));
  q.space_points_per_axis = static_cast<int>(cfg::int_or(j, "space_points_per_axis", q.space_points_per_axis, where));
  q.rel_tol = cfg::num_or(j, "rel_tol", q.rel_tol, where);
  if (q.time_levels < 1 || q.space_points_per_axis < 2 || !(q.rel_tol > 0))
    throw ConfigError(where + ": time_levels >= 1, space_points_per_axis >= 2, rel_tol > 0 required");
  return q;
}

}  // namespace detail

/// Parses and validates; every field is built once so dimension or family
/// errors surface before any stage runs.
inline ExperimentConfig parse_config(const Json& j, const std::filesystem::path& base_dir = {}) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  ExperimentConfig c;
  c.raw = j;
  c.base_dir = base_dir;
  c.dim = static_cast<int>(cfg::int_or(j, "dim", 2, "config"));
  if (c.dim < 1 || c.dim > 3) throw ConfigError("config: 'dim' must be 1, 2 or 3");
  c.horizon = cfg::num_or(j, "horizon", 1.0, "config");
  if (!(c.horizon > 0)) throw ConfigError("config: 'horizon' must be positive");
  const Json* seed = cfg::find(j, "seed");
  if (!seed || !seed->is_number_unsigned()) throw ConfigError("config: 'seed' (unsigned integer) is required");
  c.seed = seed->get<std::uint64_t>();

  const Json* fields = cfg::find(j, "fields");
  if (!fields || !cfg::find(*fields, "drift")) throw ConfigError("config: 'fields.drift' is required");
  // Lattice files are pinned to absolute paths so stored specs reload anywhere.
  auto pin = [&](Json spec) {
    if (spec.is_object() && spec.value("family", "") == "grid" && spec.contains("path") && spec["path"].is_string()) {
      std::filesystem::path p = spec["path"].get<std::string>();
      if (p.is_relative()) spec["path"] = std::filesystem::absolute(base_dir / p).lexically_normal().string();
    }
    return spec;
  };
  c.drift_spec = pin((*fields)["drift"]);
  if (cfg::find(*fields, "source")) c.source_spec = pin((*fields)["source"]);
  if (cfg::find(*fields, "test")) c.test_spec = pin((*fields)["test"]);

  if (const Json* st = cfg::find(j, "stages")) {
    if (!st->is_array()) throw ConfigError("config: 'stages' must be an array");
    for (const auto& s : *st) {
      if (!s.is_string() || std::find(all_stages().begin(), all_stages().end(), s.get<std::string>()) == all_stages().end())
        throw ConfigError("config: unknown stage " + s.dump());
      c.stages.push_back(s.get<std::string>());
    }
  } else {
    c.stages = {"certify", "solve-pde", "zvonkin", "simulate", "couple"};
  }

  QuadraturePolicy quad;
  if (const Json* q = cfg::find(j, "quadrature")) quad = detail::parse_quadrature(*q, "quadrature");
  c.certify.quad = quad;
  c.horizon_policy.quad = quad;

  const Json empty = Json::object();
  const Json& ce = cfg::find(j, "certify") ? j["certify"] : empty;
  c.certify_target = cfg::str_or(ce, "field", "drift", "certify");
  if (auto r = cfg::vec_opt(ce, "radii", "certify")) c.certify.radii = *r;
  if (auto r = cfg::vec_opt(ce, "T_grid", "certify")) c.certify.T_grid = *r;
  if (auto r = cfg::vec_opt(ce, "lambdas", "certify")) c.certify.lambdas = *r;
  if (auto r = cfg::vec_opt(ce, "probe_times", "certify")) c.certify.probe_times = *r;
  c.certify.both_directions = cfg::bool_or(ce, "both_directions", c.certify.both_directions, "certify");
  if (c.certify.radii.size() < 4) throw ConfigError("certify: at least 4 radii are needed for the exponent fit");

  const Json& pd = cfg::find(j, "pde") ? j["pde"] : empty;
  if (cfg::find(pd, "half_width")) c.grid_half_width = cfg::num(pd, "half_width", "pde");
  c.grid_points = static_cast<int>(cfg::int_or(pd, "points", c.grid_points, "pde"));
  c.time_steps = static_cast<int>(cfg::int_or(pd, "time_steps", c.time_steps, "pde"));
  if (cfg::find(pd, "T_max")) c.horizon_policy.T_max = cfg::num(pd, "T_max", "pde");
  c.picard.tol = cfg::num_or(pd, "tol", c.picard.tol, "pde");
  c.picard.max_iter = static_cast<int>(cfg::int_or(pd, "max_iter", c.picard.max_iter, "pde"));
  c.regularity.pairs = static_cast<std::size_t>(cfg::int_or(pd, "pairs", 10000, "pde"));
  c.regularity.seed = c.seed;
  if (c.grid_points < 5) throw ConfigError("pde: 'points' must be at least 5");

  const Json& mo = cfg::find(j, "mollification") ? j["mollification"] : empty;
  if (cfg::find(mo, "solve_level")) c.solve_level = static_cast<int>(cfg::int_or(mo, "solve_level", 0, "mollification"));
  if (const Json* nl = cfg::find(mo, "n_list")) c.n_list = cfg::ints(*nl, "n_list", "mollification");
  if (const Json* pr = cfg::find(mo, "pairs")) {
    c.couple.pairs.clear();
    if (!pr->is_array()) throw ConfigError("mollification: 'pairs' must be an array of [n, m]");
    for (const auto& p : *pr) {
      auto v = cfg::ints(p, "pairs", "mollification");
      if (v.size() != 2) throw ConfigError("mollification: each pair needs two levels");
      c.couple.pairs.emplace_back(v[0], v[1]);
    }
  }

  const Json& mc = cfg::find(j, "monte_carlo") ? j["monte_carlo"] : empty;
  c.mc.paths = static_cast<std::size_t>(cfg::int_or(mc, "paths", 10000, "monte_carlo"));
  c.mc.steps = static_cast<int>(cfg::int_or(mc, "steps", c.mc.steps, "monte_carlo"));
  c.mc.x0 = cfg::vec_opt(mc, "x0", "monte_carlo").value_or(std::vector<double>(c.dim, 0.0));
  if (static_cast<int>(c.mc.x0.size()) != c.dim) throw ConfigError("monte_carlo: 'x0' length differs from dim");
  if (cfg::find(mc, "T")) c.mc.T = cfg::num(mc, "T", "monte_carlo");
  c.mc.seed = c.seed;
  c.mc.cap = cfg::num_or(mc, "cap", kCap, "monte_carlo");
  c.mc.density = cfg::bool_or(mc, "density", false, "monte_carlo");
  if (cfg::find(mc, "density_t")) c.mc.density_t = cfg::num(mc, "density_t", "monte_carlo");
  c.zvonkin_steps = static_cast<int>(cfg::int_or(mc, "zvonkin_steps", c.zvonkin_steps, "monte_carlo"));
  c.couple.T = cfg::num_or(mc, "couple_T", c.couple.T, "monte_carlo");
  c.couple.steps = static_cast<int>(cfg::int_or(mc, "couple_steps", c.couple.steps, "monte_carlo"));
  if (cfg::find(mc, "couple_paths"))
    c.couple.paths = static_cast<std::size_t>(cfg::int_or(mc, "couple_paths", 0, "monte_carlo"));
  if (c.mc.paths < 1 || c.mc.steps < 64 || c.zvonkin_steps < 64 || c.couple.steps < 64)
    throw ConfigError("monte_carlo: paths >= 1 and steps >= 64 required");
  c.zvonkin.seed = c.seed;

  const Json& mx = cfg::find(j, "maximal") ? j["maximal"] : empty;
  c.maximal_R = cfg::num_or(mx, "R", c.maximal_R, "maximal");
  c.maximal_half_width = cfg::num_or(mx, "half_width", c.maximal_half_width, "maximal");
  c.maximal_points = static_cast<int>(cfg::int_or(mx, "points", c.maximal_points, "maximal"));
  c.maximal_field = cfg::str_or(mx, "field", c.maximal_field, "maximal");

  // Build every configured field once.
  c.drift();
  if (!c.test_spec.is_null()) parse_field(c.test_spec, c.dim, c.horizon, "test", 1, base_dir);
  if (!c.source_spec.is_null()) {
    auto f = parse_field(c.source_spec, c.dim, c.horizon, "source", 0, base_dir);
    if (f.range_dim() != 1 && f.range_dim() != c.dim)
      throw ConfigError("source: must be scalar or have d components");
  }
  if (std::find(c.stages.begin(), c.stages.end(), "krylov") != c.stages.end() && c.test_spec.is_null())
    throw ConfigError("krylov: needs a scalar 'fields.test'");
  bool wants_zvonkin = std::find(c.stages.begin(), c.stages.end(), "zvonkin") != c.stages.end();
  if (wants_zvonkin && !c.source_is_drift())
    throw ConfigError("zvonkin: the transform needs the source to be the drift (omit 'fields.source')");
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  Json j;
  try {
    j = Json::parse(read_text(path));
  } catch (const Json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return parse_config(j, std::filesystem::path(path).parent_path());
}

}  // namespace katosde
