#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "katosde/config.hpp"
#include "katosde/maximal.hpp"

namespace katosde {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// JSON views of results

namespace report {

inline Json vec(const std::vector<double>& v) {
  Json a = Json::array();
  for (double x : v) a.push_back(std::isfinite(x) ? Json(x) : Json(nullptr));
  return a;
}

inline Json num(double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); }

inline Json kato(const KatoReport& r) {
  Json j;
  j["field"] = r.field_name;
  j["dim"] = r.dim;
  j["dimension_warning"] = r.dimension_warning;
  j["verdict"] = r.verdict;
  j["reason"] = r.reason;
  j["fit"] = {{"p", num(r.fit.p)}, {"M", num(r.fit.M)}, {"r2", num(r.fit.r2)}};
  j["kato_alpha_lo"] = num(r.kato_alpha_lo);
  j["kato_alpha_hi"] = num(r.kato_alpha_hi);
  j["alpha_used"] = num(r.alpha_used);
  Json probes = Json::array();
  for (const auto& a : r.probes) probes.push_back({{"t", a.t}, {"x", vec(a.x)}});
  j["probes"] = probes;
  Json argmax = Json::array();
  for (auto a : r.scan.argmax) argmax.push_back(a);
  j["window_scan"] = {{"radii", vec(r.scan.radii)}, {"sup_values", vec(r.scan.sup_values)}, {"argmax", argmax}};
  Json series = Json::array();
  for (const auto& s : r.def11)
    series.push_back({{"lambda", s.lambda},
                      {"direction", s.direction == TimeDirection::Forward ? "forward" : "backward"},
                      {"T", vec(s.T)},
                      {"values", vec(s.values)},
                      {"slope", num(s.slope)},
                      {"monotone", s.monotone}});
  j["kernel_decay"] = series;
  j["n_lambda"] = {{"T", vec(r.nlambda_T)}, {"values", vec(r.nlambda_values)}};
  return j;
}

inline Json budget(const ContractionBudget& b) {
  return {{"dim", b.dim},         {"C0", b.C0},     {"T_star", b.T_star},         {"N1b", num(b.N1b)},
          {"N1f", num(b.N1f)},    {"T_grid", vec(b.T_grid)}, {"N1b_of_T", vec(b.N1b_of_T)},
          {"N1f_of_T", vec(b.N1f_of_T)}, {"convention", b.convention}, {"admissible", b.admissible()}};
}

inline Json solution(const MildSolutionGrid& s) {
  const auto& c = s.certificate;
  Json j;
  j["certificate"] = {{"C0", c.C0}, {"N1b", c.N1b}, {"N1f", c.N1f}, {"T", c.T},
                      {"product_b", c.product_b}, {"product_f", c.product_f}, {"ok", c.ok}};
  j["horizon"] = s.horizon;
  j["iterations"] = s.iterations;
  j["increments"] = vec(s.increments);
  j["ratios"] = vec(s.ratios);
  j["max_ratio"] = num(s.max_ratio);
  j["fixed_point_residual"] = num(s.fixed_point_residual);
  j["sup_u"] = num(s.sup_u);
  j["u_bound"] = num(s.u_bound);
  j["sup_grad"] = num(s.sup_grad);
  j["grad_bound"] = num(s.grad_bound);
  j["grad_bound_ok"] = s.grad_bound_ok;
  j["drift_id"] = s.drift_id;
  j["source_id"] = s.source_id;
  const auto& sp = s.spec();
  j["lattice"] = {{"lo", vec(sp.lo)}, {"hi", vec(sp.hi)}, {"n", sp.n}, {"time_steps", sp.time_steps}};
  return j;
}

inline Json regularity(const CertificateReport& r) {
  Json off = Json::array();
  for (const auto& o : r.offending) off.push_back({{"t", o.t}, {"x", vec(o.x)}, {"y", vec(o.y)}, {"ratio", o.ratio}});
  return {{"pairs", r.pairs},
          {"lipschitz_max", num(r.lipschitz_max)},
          {"violations", r.violations},
          {"offending", off},
          {"lipschitz_ok", r.lipschitz_ok},
          {"holder_alpha", num(r.holder_alpha)},
          {"holder_r2", num(r.holder_r2)},
          {"holder_trivial", r.holder_trivial},
          {"holder_dt", vec(r.holder_dt)},
          {"holder_diff", vec(r.holder_diff)},
          {"alpha_admissible_hi", r.alpha_admissible_hi ? num(*r.alpha_admissible_hi) : Json(nullptr)},
          {"holder_ok", r.holder_ok},
          {"pass", r.pass}};
}

}  // namespace report

// ---------------------------------------------------------------------------
// Solution and ensemble files

inline Json lattice_json(const LatticeSpec& s) {
  return {{"lo", report::vec(s.lo)}, {"hi", report::vec(s.hi)}, {"n", s.n},
          {"t0", s.t0},             {"t1", s.t1},               {"time_steps", s.time_steps}};
}

inline LatticeSpec lattice_from_json(const Json& j, const std::string& where) {
  LatticeSpec s;
  try {
    s.lo = j.at("lo").get<std::vector<double>>();
    s.hi = j.at("hi").get<std::vector<double>>();
    s.n = j.at("n").get<std::vector<int>>();
    s.t0 = j.at("t0").get<double>();
    s.t1 = j.at("t1").get<double>();
    s.time_steps = j.at("time_steps").get<int>();
    s.validate();
  } catch (const Json::exception& e) {
    throw ConfigError(where + ": bad lattice header: " + e.what());
  } catch (const ValidationError& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return s;
}

/// u then grad_u as float64; the header carries the field specs so the
/// solution can be reloaded with its drift.
inline void save_solution(const std::string& path, const MildSolutionGrid& sol, const Json& drift_spec,
                          const Json& source_spec, int dim, double horizon) {
  Json h;
  h["kind"] = "mild_solution";
  h["dim"] = dim;
  h["field_horizon"] = horizon;
  h["horizon"] = sol.horizon;
  h["lattice"] = lattice_json(sol.spec());
  h["range"] = sol.range();
  h["drift"] = drift_spec;
  h["source"] = source_spec;
  h["drift_id"] = sol.drift_id;
  h["source_id"] = sol.source_id;
  h["report"] = report::solution(sol);
  h["arrays"] = {{{"name", "u"}, {"count", sol.u.data().size()}}, {{"name", "grad_u"}, {"count", sol.grad_u.data().size()}}};
  write_bin(path, h, {&sol.u.data(), &sol.grad_u.data()});
}

struct LoadedSolution {
  MildSolutionGrid sol;
  Json drift_spec, source_spec;
  int dim = 0;
  double field_horizon = 0.0;
};

inline LoadedSolution load_solution(const std::string& path) {
  BinFile f = read_bin(path);
  const Json& h = f.header;
  if (h.value("kind", "") != "mild_solution") throw ConfigError(path + ": not a solution file");
  LoadedSolution out;
  try {
    out.dim = h.at("dim").get<int>();
    out.field_horizon = h.at("field_horizon").get<double>();
    out.drift_spec = h.at("drift");
    out.source_spec = h.at("source");
    LatticeSpec spec = lattice_from_json(h.at("lattice"), path);
    int m = h.at("range").get<int>();
    auto& s = out.sol;
    s.u = GridField(spec, m);
    s.grad_u = GridField(spec, m * out.dim);
    if (f.payload.size() != s.u.data().size() + s.grad_u.data().size())
      throw ConfigError(path + ": payload size does not match the lattice");
    std::copy(f.payload.begin(), f.payload.begin() + s.u.data().size(), s.u.data().begin());
    std::copy(f.payload.begin() + s.u.data().size(), f.payload.end(), s.grad_u.data().begin());
    s.horizon = h.at("horizon").get<double>();
    const Json& r = h.at("report");
    const Json& c = r.at("certificate");
    s.certificate = {c.at("C0").get<double>(), c.at("N1b").get<double>(), c.at("N1f").get<double>(),
                     c.at("T").get<double>(),  c.at("product_b").get<double>(), c.at("product_f").get<double>(),
                     c.at("ok").get<bool>()};
    s.iterations = r.at("iterations").get<int>();
    s.b = parse_field(out.drift_spec, out.dim, out.field_horizon, "drift", out.dim);
    s.f = parse_field(out.source_spec, out.dim, out.field_horizon, "source", 0);
    s.drift_id = h.at("drift_id").get<std::string>();
    s.source_id = h.at("source_id").get<std::string>();
    if (s.b.name() != s.drift_id) throw ConfigError(path + ": drift spec does not rebuild the stored drift");
  } catch (const Json::exception& e) {
    throw ConfigError(path + ": bad solution header: " + e.what());
  }
  return out;
}

/// Final states only; every other state is replayed from the keyed noise.
inline void save_ensemble(const std::string& path, const PathEnsemble& e, const Json& drift_spec, double horizon) {
  Json h;
  h["kind"] = "path_ensemble";
  h["dim"] = e.dim;
  h["field_horizon"] = horizon;
  h["n_paths"] = e.n_paths;
  h["n_steps"] = e.n_steps;
  h["T"] = e.T;
  h["start"] = report::vec(e.start);
  h["seed"] = e.seed;
  h["cap"] = e.cap;
  h["drift"] = drift_spec;
  h["drift_id"] = e.drift_id;
  h["noise"] = "keyed_normal(seed, path, step, coord) * sqrt(dt)";
  h["arrays"] = {{{"name", "final_states"}, {"count", e.final_states.size()}}};
  write_bin(path, h, {&e.final_states});
}

inline PathEnsemble load_ensemble(const std::string& path) {
  BinFile f = read_bin(path);
  const Json& h = f.header;
  if (h.value("kind", "") != "path_ensemble") throw ConfigError(path + ": not a path ensemble file");
  PathEnsemble e;
  try {
    e.dim = h.at("dim").get<int>();
    e.n_paths = h.at("n_paths").get<std::size_t>();
    e.n_steps = h.at("n_steps").get<int>();
    e.T = h.at("T").get<double>();
    e.dt = e.T / e.n_steps;
    e.start = h.at("start").get<std::vector<double>>();
    e.seed = h.at("seed").get<std::uint64_t>();
    e.cap = h.at("cap").get<double>();
    e.drift = parse_field(h.at("drift"), e.dim, h.at("field_horizon").get<double>(), "drift", e.dim);
    e.drift_id = h.at("drift_id").get<std::string>();
  } catch (const Json::exception& ex) {
    throw ConfigError(path + ": bad ensemble header: " + ex.what());
  }
  if (e.drift.name() != e.drift_id) throw ConfigError(path + ": drift spec does not rebuild the stored drift");
  if (f.payload.size() != e.n_paths * e.dim) throw ConfigError(path + ": payload size does not match n_paths * dim");
  e.final_states = std::move(f.payload);
  return e;
}

// ---------------------------------------------------------------------------
// Stages

struct StageResult {
  std::string stage;
  bool pass = false;
  std::string message;
  std::vector<std::string> files;
};

struct StageFailure : Error {
  std::string stage;
  StageFailure(std::string s, const std::string& msg) : Error(s + ": " + msg), stage(std::move(s)) {}
};

class Pipeline {
 public:
  Pipeline(ExperimentConfig cfg, fs::path out, bool verbose = false)
      : cfg_(std::move(cfg)), out_(std::move(out)), verbose_(verbose) {
    fs::create_directories(out_);
  }

  const ExperimentConfig& config() const { return cfg_; }

  /// Runs the named stage and the artifacts it needs, reusing earlier ones.
  StageResult run(const std::string& stage) {
    log("stage " + stage);
    auto t0 = std::chrono::steady_clock::now();
    StageResult r;
    r.stage = stage;
    try {
      if (stage == "certify") r = certify();
      else if (stage == "maximal") r = maximal_stage();
      else if (stage == "solve-pde") r = solve();
      else if (stage == "zvonkin") r = zvonkin();
      else if (stage == "simulate") r = simulate_stage();
      else if (stage == "couple") r = couple();
      else if (stage == "krylov") r = krylov();
      else throw ConfigError("unknown stage '" + stage + "'");
    } catch (const ConfigError&) {
      throw;
    } catch (const StageFailure&) {
      throw;
    } catch (const std::exception& e) {
      throw StageFailure(stage, e.what());
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log(stage + (r.pass ? " passed" : " FAILED") + " in " + std::to_string(secs) + " s: " + r.message);
    return r;
  }

  /// All configured stages in dependency order; writes bundle.json. Returns
  /// false if any stage failed its criteria or threw.
  bool run_all(std::vector<StageResult>& results, std::string& failure) {
    std::vector<std::string> order;
    for (const auto& s : all_stages())
      if (std::find(cfg_.stages.begin(), cfg_.stages.end(), s) != cfg_.stages.end()) order.push_back(s);
    bool ok = true;
    for (const auto& s : order) {
      try {
        results.push_back(run(s));
        if (!results.back().pass) {
          ok = false;
          if (failure.empty()) failure = s + ": " + results.back().message;
        }
      } catch (const StageFailure& e) {
        results.push_back({s, false, e.what(), {}});
        ok = false;
        if (failure.empty()) failure = e.what();
        break;  // later stages depend on this one
      }
    }
    Json b;
    b["config"] = cfg_.raw;
    b["config"]["seed"] = cfg_.seed;
    Json st = Json::array();
    for (const auto& r : results)
      st.push_back({{"stage", r.stage}, {"pass", r.pass}, {"message", r.message}, {"files", r.files}});
    b["stages"] = st;
    b["pass"] = ok;
    write_json((out_ / "bundle.json").string(), b);
    return ok;
  }

  // Artifacts, built on demand.
  const MildSolutionGrid& solution() {
    if (!sol_) solve();
    return *sol_;
  }
  void set_solution(MildSolutionGrid s, Json drift_spec, Json source_spec) {
    sol_ = std::move(s);
    sol_drift_spec_ = std::move(drift_spec);
    sol_source_spec_ = std::move(source_spec);
  }
  void set_ensemble(PathEnsemble e, Json drift_spec) {
    ens_ = std::move(e);
    ens_drift_spec_ = std::move(drift_spec);
  }

  std::string path(const std::string& name) const { return (out_ / name).string(); }

 private:
  ExperimentConfig cfg_;
  fs::path out_;
  bool verbose_;
  std::optional<ContractionBudget> budget_;
  std::optional<MildSolutionGrid> sol_;
  Json sol_drift_spec_, sol_source_spec_;
  std::optional<PathEnsemble> ens_;
  Json ens_drift_spec_;

  void log(const std::string& s) const {
    if (verbose_) std::fprintf(stderr, "[kato-sde] %s\n", s.c_str());
  }

  static SimulatePolicy lean(double cap) {
    SimulatePolicy p;
    p.keep_states = false;
    p.keep_increments = false;
    p.cap = cap;
    return p;
  }

  StageResult certify() {
    SpaceTimeField f = cfg_.field_by_role(cfg_.certify_target);
    // Membership is tested on |f|^2 for vector fields.
    SpaceTimeField g = f.range_dim() > 1 ? squared(f) : f;
    KatoReport rep;
    StageResult r{"certify", false, "", {}};
    try {
      rep = katosde::certify(g, cfg_.certify);
    } catch (const InsufficientDataError&) {
      // Raised by the exponent fit when every window vanishes.
      auto probes = certify_probes(g, cfg_.certify);
      auto scan = window_scan(g, probes, cfg_.certify.radii, cfg_.certify.window);
      bool zero = std::all_of(scan.sup_values.begin(), scan.sup_values.end(), [](double v) { return v == 0.0; });
      if (!zero) throw;
      rep.field_name = g.name();
      rep.dim = g.dim();
      rep.probes = probes;
      rep.scan = scan;
      rep.fit.p = std::numeric_limits<double>::infinity();
      rep.kato_alpha_lo = 0.0;
      rep.verdict = "trivial";
      rep.reason = "field vanishes on every window";
    }
    Json j = report::kato(rep);
    j["target"] = cfg_.certify_target;
    write_json(path("kato_report.json"), j);
    CsvWriter csv({"probe_id", "r", "value"});
    for (const auto& s : rep.scan.samples) csv.row({static_cast<double>(s.probe_id), s.r, s.value});
    csv.save(path("window_scan.csv"));
    r.files = {"kato_report.json", "window_scan.csv"};
    r.pass = rep.verdict == "certified" || rep.verdict == "trivial";
    r.message = rep.verdict + " (" + rep.reason + ")";
    return r;
  }

  StageResult maximal_stage() {
    SpaceTimeField f = cfg_.field_by_role(cfg_.maximal_field);
    LatticeSpec spec = LatticeSpec::cube(cfg_.dim, cfg_.maximal_half_width, cfg_.maximal_points);
    MaximalGrid mg = katosde::maximal(f, spec, cfg_.maximal_R);
    std::vector<std::string> cols;
    for (int i = 0; i < cfg_.dim; ++i) cols.push_back("x" + std::to_string(i + 1));
    cols.push_back("abs_f");
    cols.push_back("maximal");
    CsvWriter csv(cols);
    std::vector<double> x(cfg_.dim);
    double sup_m = 0.0, sup_f = 0.0;
    bool finite = true;
    for (std::size_t s = 0; s < spec.space_size(); ++s) {
      spec.node(s, x);
      double a = 0.0;
      for (int c = 0; c < mg.base.range_dim(); ++c) a += mg.base.at(0, s, c) * mg.base.at(0, s, c);
      a = std::sqrt(a);
      double m = mg.values.at(0, s, 0);
      finite = finite && std::isfinite(m);
      sup_m = std::max(sup_m, m);
      sup_f = std::max(sup_f, a);
      auto row = x;
      row.push_back(a);
      row.push_back(m);
      csv.row(row);
    }
    csv.save(path("maximal.csv"));
    Json j{{"field", f.name()},
           {"R", cfg_.maximal_R},
           {"radii", report::vec(mg.radii)},
           {"lattice", lattice_json(spec)},
           {"sup_abs_f", report::num(sup_f)},
           {"sup_maximal", report::num(sup_m)},
           {"finite", finite}};
    write_json(path("maximal_report.json"), j);
    return {"maximal", finite, finite ? "M_R computed on the lattice" : "non-finite maximal values", {"maximal.csv", "maximal_report.json"}};
  }

  StageResult solve() {
    Json bspec = cfg_.solve_drift_spec(), fspec = cfg_.solve_source_spec();
    SpaceTimeField b = parse_field(bspec, cfg_.dim, cfg_.horizon, "drift", cfg_.dim, cfg_.base_dir);
    SpaceTimeField f = cfg_.source_is_drift() ? b : parse_field(fspec, cfg_.dim, cfg_.horizon, "source", 0, cfg_.base_dir);
    budget_ = choose_horizon(b, f, cfg_.horizon_policy);
    double T = budget_->T_star;
    double L = cfg_.grid_half_width.value_or(0.5 + 6.0 * std::sqrt(T));
    PdeGridSpec grid = PdeGridSpec::cube(cfg_.dim, L, cfg_.grid_points, cfg_.time_steps);
    log("T_star = " + std::to_string(T) + ", box half-width " + std::to_string(L));
    MildSolutionGrid sol = picard_solve(b, f, *budget_, grid, cfg_.picard);
    CertificateReport reg = regularity_certificate(sol, cfg_.regularity);
    save_solution(path("sol.bin"), sol, bspec, fspec, cfg_.dim, cfg_.horizon);
    Json j = report::solution(sol);
    j["budget"] = report::budget(*budget_);
    j["regularity"] = report::regularity(reg);
    j["max_ratio_le_0_55"] = sol.max_ratio <= 0.55;
    write_json(path("cert.json"), j);

    // t = 0 slice of u and |grad u|.
    const auto& spec = sol.spec();
    const int d = spec.dim(), m = sol.range();
    std::vector<std::string> cols;
    for (int i = 0; i < d; ++i) cols.push_back("x" + std::to_string(i + 1));
    for (int c = 0; c < m; ++c) cols.push_back("u" + std::to_string(c + 1));
    cols.push_back("grad_norm");
    CsvWriter csv(cols);
    std::vector<double> x(d);
    for (std::size_t s = 0; s < spec.space_size(); ++s) {
      spec.node(s, x);
      auto row = x;
      double g2 = 0.0;
      for (int c = 0; c < m; ++c) row.push_back(sol.u.at(0, s, c));
      for (int k = 0; k < m * d; ++k) g2 += sol.grad_u.at(0, s, k) * sol.grad_u.at(0, s, k);
      row.push_back(std::sqrt(g2));
      csv.row(row);
    }
    csv.save(path("u_slice.csv"));
    bool pass = sol.certificate.ok && sol.grad_bound_ok && reg.pass;
    std::string msg = "T_star=" + fmt_num(T) + " iterations=" + std::to_string(sol.iterations) +
                      (sol.grad_bound_ok ? "" : " gradient bound exceeded") + (reg.pass ? "" : " regularity check failed");
    set_solution(std::move(sol), bspec, fspec);
    return {"solve-pde", pass, msg, {"sol.bin", "cert.json", "u_slice.csv"}};
  }

  StageResult zvonkin() {
    const auto& sol = solution();
    ZvonkinMap map = build_zvonkin(sol, cfg_.zvonkin);
    PathEnsemble e = katosde::simulate(sol.b, cfg_.mc.x0, sol.horizon, cfg_.zvonkin_steps, cfg_.mc.paths,
                                       cfg_.mc.seed, lean(cfg_.mc.cap));
    return zvonkin_report(map, e);
  }

 public:
  StageResult zvonkin_report(const ZvonkinMap& map, const PathEnsemble& e) {
    ItoResidual ito = ito_residual(map, e);
    DriftRemovalResult dr = drift_removal_check(map, e);
    Json j{{"c1", map.c1},
           {"c2", map.c2},
           {"pairs", map.pairs},
           {"bilipschitz_ok", map.bilipschitz_ok},
           {"terminal_defect", map.terminal_defect},
           {"ensemble", {{"paths", e.n_paths}, {"steps", e.n_steps}, {"T", e.T}, {"start", report::vec(e.start)}, {"seed", e.seed}}},
           {"ito_residual",
            {{"mean", report::vec(ito.mean)},
             {"stderr", report::vec(ito.stderr_)},
             {"mean_residual", ito.mean_residual},
             {"interpolation_allowance", ito.interpolation_allowance},
             {"allowance", ito.allowance},
             {"pass", ito.pass}}},
           {"drift_removal", {{"intervals", dr.intervals}, {"worst_z", report::vec(dr.worst_z)}, {"pass", dr.pass}}}};
    write_json(path("zvonkin_report.json"), j);
    bool pass = map.bilipschitz_ok && ito.pass && dr.pass;
    std::string msg = "c1=" + fmt_num(map.c1) + " c2=" + fmt_num(map.c2) + " ito " + (ito.pass ? "pass" : "FAIL") +
                      " drift-removal " + (dr.pass ? "pass" : "FAIL");
    return {"zvonkin", pass, msg, {"zvonkin_report.json"}};
  }

 private:
  StageResult simulate_stage() {
    Json bspec = sol_ ? sol_drift_spec_ : cfg_.solve_drift_spec();
    SpaceTimeField b = parse_field(bspec, cfg_.dim, cfg_.horizon, "drift", cfg_.dim, cfg_.base_dir);
    double T = cfg_.mc.T.value_or(sol_ ? sol_->horizon : cfg_.horizon);
    PathEnsemble e = katosde::simulate(b, cfg_.mc.x0, T, cfg_.mc.steps, cfg_.mc.paths, cfg_.mc.seed, lean(cfg_.mc.cap));
    save_ensemble(path("paths.bin"), e, bspec, cfg_.horizon);
    Json j;
    j["drift"] = e.drift_id;
    j["paths"] = e.n_paths;
    j["steps"] = e.n_steps;
    j["T"] = e.T;
    j["start"] = report::vec(e.start);
    j["seed"] = e.seed;
    Json means = Json::array(), ses = Json::array();
    std::vector<double> col(e.n_paths), r2(e.n_paths, 0.0);
    for (int i = 0; i < e.dim; ++i) {
      for (std::size_t p = 0; p < e.n_paths; ++p) {
        col[p] = e.final_states[p * e.dim + i];
        r2[p] += (col[p] - e.start[i]) * (col[p] - e.start[i]);
      }
      MeanSe ms = mean_se(col);
      means.push_back(ms.mean);
      ses.push_back(ms.stderr_);
    }
    MeanSe m2 = mean_se(r2);
    j["final_mean"] = means;
    j["final_stderr"] = ses;
    j["mean_sq_displacement"] = {{"mean", m2.mean}, {"stderr", m2.stderr_}};
    bool pass = true;
    std::string msg = "simulated " + std::to_string(e.n_paths) + " paths";
    if (cfg_.mc.density) {
      DensityResult dres = density_envelope_check(e, cfg_.mc.density_t.value_or(e.T));
      Json rows = Json::array();
      for (const auto& rw : dres.rows) rows.push_back({{"M7", rw.M7}, {"M6", report::num(rw.M6)}, {"finite", rw.finite}});
      j["density"] = {{"t", dres.t}, {"rows", rows}, {"M6", dres.M6}, {"M7", dres.M7}, {"pass", dres.pass},
                      {"bins_total", dres.bins_total}, {"bins_occupied", dres.bins_occupied}};
      pass = dres.pass;
      msg += dres.pass ? ", envelope M7=" + fmt_num(dres.M7) : ", no Gaussian envelope found";
    }
    write_json(path("simulate_report.json"), j);
    set_ensemble(std::move(e), bspec);
    return {"simulate", pass, msg, {"paths.bin", "simulate_report.json"}};
  }

  StageResult couple() {
    SpaceTimeField b = cfg_.drift();
    std::size_t paths = cfg_.couple.paths.value_or(cfg_.mc.paths);
    CouplingReport rep = coupling_ladder(b, cfg_.couple.pairs, cfg_.mc.x0, cfg_.couple.T, cfg_.couple.steps, paths,
                                         cfg_.mc.seed);
    int lvl = cfg_.couple.pairs.empty() ? 4 : std::max(0, cfg_.couple.pairs.front().first);
    SpaceTimeField bn = mollify(b, lvl);
    CouplingEntry same = coupled_pair(bn, bn, cfg_.mc.x0, cfg_.couple.T, cfg_.couple.steps, paths, cfg_.mc.seed);
    CsvWriter csv({"n", "m", "mean", "stderr"});
    Json rows = Json::array();
    for (const auto& e : rep.entries) {
      csv.row({static_cast<double>(e.n), static_cast<double>(e.m), e.mean, e.stderr_});
      rows.push_back({{"n", e.n}, {"m", e.m}, {"mean", e.mean}, {"stderr", e.stderr_}});
    }
    csv.save(path("coupling.csv"));
    Json j{{"drift", b.name()},
           {"T", cfg_.couple.T},
           {"steps", cfg_.couple.steps},
           {"paths", paths},
           {"start", report::vec(cfg_.mc.x0)},
           {"ladder", rows},
           {"monotone", rep.monotone},
           {"all_zero", rep.all_zero},
           {"identical", {{"level", lvl}, {"mean", same.mean}, {"stderr", same.stderr_}}}};
    write_json(path("coupling_report.json"), j);
    bool pass = (rep.monotone || rep.all_zero) && same.mean == 0.0;
    std::string msg = rep.all_zero ? "ladder identically zero" : rep.monotone ? "ladder strictly decreasing" : "ladder not monotone";
    return {"couple", pass, msg,
            {"coupling.csv", "coupling_report.json"}};
  }

  StageResult krylov() {
    SpaceTimeField h = cfg_.field_by_role("test");
    if (!ens_) simulate_stage();
    KrylovTable tab = krylov_functional_convergence(h, cfg_.n_list, *ens_, cfg_.mc.cap);
    CsvWriter csv({"n", "mean", "stderr"});
    Json rows = Json::array();
    for (const auto& r : tab.rows) {
      csv.row({static_cast<double>(r.n), r.mean, r.stderr_});
      rows.push_back({{"n", r.n}, {"mean", r.mean}, {"stderr", r.stderr_}});
    }
    csv.save(path("krylov.csv"));
    write_json(path("krylov_report.json"), Json{{"field", h.name()}, {"rows", rows}, {"monotone", tab.monotone}});
    return {"krylov", tab.monotone, tab.monotone ? "decreasing in n" : "not monotone in n", {"krylov.csv", "krylov_report.json"}};
  }
};

}  // namespace katosde
