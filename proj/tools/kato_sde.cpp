// kato-sde: command-line driver for the certify / solve / transform / couple stages.
//
// Exit codes: 0 all requested criteria hold, 1 a stage failed (named on
// stderr), 2 configuration or usage error.

#include <cstdio>
#include <filesystem>
#include <string>

#include <CLI11.hpp>

#include "katosde/pipeline.hpp"

namespace fs = std::filesystem;
using namespace katosde;

namespace {

struct Globals {
  std::string config;
  std::string out = ".";
  std::optional<std::uint64_t> seed;
  int threads = 1;
  bool verbose = false;
};

bool is_file_target(const std::string& out) {
  auto ext = fs::path(out).extension().string();
  return ext == ".json" || ext == ".bin" || ext == ".csv";
}

// --out may name the primary artifact; companions land next to it.
fs::path out_dir(const std::string& out) {
  if (!is_file_target(out)) return fs::path(out);
  auto p = fs::path(out).parent_path();
  return p.empty() ? fs::path(".") : p;
}

void place(const fs::path& dir, const std::string& produced, const std::string& out) {
  if (!is_file_target(out)) return;
  fs::path src = dir / produced, dst = fs::path(out);
  if (fs::weakly_canonical(src) == fs::weakly_canonical(dst)) return;
  fs::copy_file(src, dst, fs::copy_options::overwrite_existing);
}

ExperimentConfig read_config(const Globals& g) {
  if (g.config.empty()) throw ConfigError("--config is required");
  ExperimentConfig c = load_config(g.config);
  if (g.seed) {
    c.seed = *g.seed;
    c.mc.seed = *g.seed;
    c.regularity.seed = *g.seed;
    c.zvonkin.seed = *g.seed;
  }
  return c;
}

int finish(const StageResult& r) {
  if (!r.pass) {
    std::fprintf(stderr, "kato-sde: stage %s failed: %s\n", r.stage.c_str(), r.message.c_str());
    return 1;
  }
  std::printf("%s: %s\n", r.stage.c_str(), r.message.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kato-class drifts: certification, mild PDE solutions, Zvonkin transform and SDE experiments"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "experiment JSON config");
  app.add_option("--out", g.out, "output directory, or the primary output file");
  app.add_option("--seed", g.seed, "overrides the config seed");
  app.add_option("--threads", g.threads, "worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--verbose", g.verbose, "progress on stderr");

  auto* certify = app.add_subcommand("certify", "Kato-class certification by window scaling and kernel decay");
  auto* maximal = app.add_subcommand("maximal", "local maximal function on a lattice");
  std::string field_role;
  std::optional<double> R;
  maximal->add_option("--field", field_role, "field role: drift, source or test");
  maximal->add_option("--R", R, "maximal radius");
  auto* solve = app.add_subcommand("solve-pde", "mild solution by Picard iteration");
  std::string report_path;
  solve->add_option("--report", report_path, "certificate JSON path");
  auto* zv = app.add_subcommand("zvonkin", "Zvonkin transform checks on a stored solution and ensemble");
  std::string sol_path, paths_path;
  zv->add_option("--solution", sol_path, "solution file from solve-pde");
  zv->add_option("--paths", paths_path, "ensemble file from simulate");
  auto* sim = app.add_subcommand("simulate", "Euler-Maruyama ensemble");
  std::string sim_solution;
  sim->add_option("--solution", sim_solution, "simulate the solution's drift up to its horizon");
  auto* couple = app.add_subcommand("couple", "common-noise coupling ladder");
  auto* krylov = app.add_subcommand("krylov", "additive functionals under mollification");
  auto* pipeline = app.add_subcommand("pipeline", "all configured stages in order");
  for (auto* s : {certify, maximal, solve, zv, sim, couple, krylov, pipeline}) {
    // Global flags are also accepted after the subcommand.
    s->fallthrough();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  thread_count() = g.threads;

  try {
    fs::path dir = out_dir(g.out);
    if (*zv) {
      if (sol_path.empty() || paths_path.empty()) throw ConfigError("zvonkin: --solution and --paths are required");
      LoadedSolution ls = load_solution(sol_path);
      PathEnsemble e = load_ensemble(paths_path);
      if (e.drift_id != ls.sol.drift_id)
        throw ConfigError("zvonkin: ensemble drift '" + e.drift_id + "' differs from solution drift '" +
                          ls.sol.drift_id + "'");
      ExperimentConfig c;
      c.dim = ls.dim;
      c.horizon = ls.field_horizon;
      if (!g.config.empty()) c = read_config(g);
      Pipeline p(c, dir, g.verbose);
      ZvonkinMap map;
      try {
        map = build_zvonkin(ls.sol, c.zvonkin);
      } catch (const PreconditionError& ex) {
        throw ConfigError(ex.what());
      }
      StageResult r = p.zvonkin_report(map, e);
      place(dir, "zvonkin_report.json", g.out);
      return finish(r);
    }

    ExperimentConfig c = read_config(g);
    if (*maximal) {
      if (!field_role.empty()) c.maximal_field = field_role;
      if (R) c.maximal_R = *R;
    }
    Pipeline p(c, dir, g.verbose);
    if (*pipeline) {
      std::vector<StageResult> results;
      std::string failure;
      bool ok = p.run_all(results, failure);
      for (const auto& r : results) std::printf("%s: %s %s\n", r.stage.c_str(), r.pass ? "PASS" : "FAIL", r.message.c_str());
      if (!ok) {
        std::fprintf(stderr, "kato-sde: stage %s\n", failure.c_str());
        return 1;
      }
      return 0;
    }
    if (*sim && !sim_solution.empty()) {
      LoadedSolution ls = load_solution(sim_solution);
      if (!c.mc.T) c.mc.T = ls.sol.horizon;
      Json spec = ls.drift_spec;
      p = Pipeline(c, dir, g.verbose);
      p.set_solution(std::move(ls.sol), spec, ls.source_spec);
    }
    struct Sub {
      CLI::App* app;
      const char* stage;
      const char* primary;
    };
    for (const Sub& s : {Sub{certify, "certify", "kato_report.json"}, Sub{maximal, "maximal", "maximal.csv"},
                         Sub{solve, "solve-pde", "sol.bin"}, Sub{sim, "simulate", "paths.bin"},
                         Sub{couple, "couple", "coupling.csv"}, Sub{krylov, "krylov", "krylov.csv"}}) {
      if (!*s.app) continue;
      StageResult r = p.run(s.stage);
      place(dir, s.primary, g.out);
      if (s.app == solve && !report_path.empty()) place(dir, "cert.json", report_path);
      return finish(r);
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "kato-sde: configuration error: %s\n", e.what());
    return 2;
  } catch (const StageFailure& e) {
    std::fprintf(stderr, "kato-sde: stage failed: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "kato-sde: %s\n", e.what());
    return 1;
  }
  return 2;
}
