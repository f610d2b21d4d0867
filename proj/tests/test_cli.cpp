#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "katosde/pipeline.hpp"

using namespace katosde;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string output;  // stdout and stderr
};

Run run(const std::string& args) {
  const char* bin = std::getenv("KATO_SDE_BIN");
  REQUIRE(bin != nullptr);
  std::string cmd = std::string(bin) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::string out;
  char buf[512];
  while (fgets(buf, sizeof buf, p)) out += buf;
  int st = pclose(p);
  return {WIFEXITED(st) ? WEXITSTATUS(st) : -1, out};
}

std::string config(const std::string& name) { return std::string(KATO_SDE_CONFIG_DIR) + "/" + name; }

fs::path scratch(const std::string& name) {
  fs::path d = fs::temp_directory_path() / ("kato_sde_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) { return read_text(p.string()); }

void write(const fs::path& p, const std::string& s) { write_text(p.string(), s); }

}  // namespace

TEST_CASE("trivial pipeline passes and is reproducible", "[cli]") {
  auto a = scratch("trivial_a"), b = scratch("trivial_b");
  auto r1 = run("pipeline --config " + config("trivial.json") + " --out " + a.string());
  INFO(r1.output);
  REQUIRE(r1.code == 0);
  auto bundle = Json::parse(slurp(a / "bundle.json"));
  REQUIRE(bundle["pass"] == true);
  REQUIRE(bundle["stages"].size() == 5);
  for (const auto& s : bundle["stages"]) REQUIRE(s["pass"] == true);
  auto r2 = run("pipeline --config " + config("trivial.json") + " --out " + b.string() + " --threads 2");
  REQUIRE(r2.code == 0);
  for (const auto& e : fs::directory_iterator(a)) {
    auto name = e.path().filename();
    REQUIRE(fs::exists(b / name));
    REQUIRE(slurp(a / name) == slurp(b / name));
  }
  // A different seed changes the ensemble but stays valid.
  auto c = scratch("trivial_c");
  REQUIRE(run("--seed 8 pipeline --config " + config("trivial.json") + " --out " + c.string()).code == 0);
  REQUIRE(slurp(a / "paths.bin") != slurp(c / "paths.bin"));
}

TEST_CASE("configuration errors exit with 2", "[cli]") {
  auto d = scratch("bad");
  auto r = run("certify --config " + config("mismatched_dims.json") + " --out " + d.string());
  REQUIRE(r.code == 2);
  REQUIRE(r.output.find("test: dimension 3") != std::string::npos);

  write(d / "noseed.json", R"({"dim": 2, "fields": {"drift": {"family": "zero"}}})");
  r = run("pipeline --config " + (d / "noseed.json").string() + " --out " + d.string());
  REQUIRE(r.code == 2);
  REQUIRE(r.output.find("seed") != std::string::npos);

  write(d / "scalar.json", R"({"dim": 2, "seed": 1, "fields": {"drift": {"family": "power_product", "alphas": [-0.25, -0.25]}}})");
  r = run("pipeline --config " + (d / "scalar.json").string() + " --out " + d.string());
  REQUIRE(r.code == 2);
  REQUIRE(r.output.find("drift: needs 2 components") != std::string::npos);

  write(d / "broken.json", "{\"dim\": 2,");
  REQUIRE(run("pipeline --config " + (d / "broken.json").string()).code == 2);
  REQUIRE(run("pipeline --out " + d.string()).code == 2);
  REQUIRE(run("frobnicate").code == 2);
}

TEST_CASE("stage failures exit with 1 and name the stage", "[cli]") {
  auto d = scratch("fail");
  write(d / "strong.json", R"({"dim": 2, "seed": 1, "stages": ["solve-pde"],
    "fields": {"drift": {"family": "constant", "value": [1e9, 0.0]}}})");
  auto r = run("pipeline --config " + (d / "strong.json").string() + " --out " + d.string());
  REQUIRE(r.code == 1);
  REQUIRE(r.output.find("solve-pde") != std::string::npos);
  // Partial results stay on disk.
  auto bundle = Json::parse(slurp(d / "bundle.json"));
  REQUIRE(bundle["pass"] == false);
  REQUIRE(bundle["stages"][0]["stage"] == "solve-pde");
}

TEST_CASE("stand-alone stages chain through files", "[cli]") {
  auto d = scratch("chain");
  std::string cfg = config("constant_drift.json");
  auto sol = (d / "sol.bin").string(), paths = (d / "paths.bin").string();
  REQUIRE(run("solve-pde --config " + cfg + " --out " + sol + " --report " + (d / "c.json").string()).code == 0);
  REQUIRE(fs::exists(d / "c.json"));
  REQUIRE(Json::parse(slurp(d / "c.json"))["certificate"]["ok"] == true);
  REQUIRE(run("simulate --config " + cfg + " --solution " + sol + " --out " + paths).code == 0);
  auto z = run("zvonkin --solution " + sol + " --paths " + paths + " --out " + (d / "z.json").string());
  INFO(z.output);
  REQUIRE(z.code == 0);
  auto zr = Json::parse(slurp(d / "z.json"));
  REQUIRE(zr["ito_residual"]["pass"] == true);
  REQUIRE(zr["c1"].get<double>() == Catch::Approx(1.0).margin(1e-9));

  // Ensemble over the full field horizon: wrong T for this solution.
  auto other = (d / "other" / "paths.bin").string();
  REQUIRE(run("simulate --config " + cfg + " --out " + other).code == 0);
  REQUIRE(run("zvonkin --solution " + sol + " --paths " + other + " --out " + (d / "z2.json").string()).code == 2);

  auto m = run("maximal --config " + cfg + " --field test --R 0.5 --out " + (d / "maximal.csv").string());
  REQUIRE(m.code == 0);
  std::ifstream csv(d / "maximal.csv");
  std::string header;
  std::getline(csv, header);
  REQUIRE(header == "x1,x2,abs_f,maximal");
  REQUIRE(run("krylov --config " + cfg + " --out " + (d / "k").string()).code == 0);
  REQUIRE(fs::exists(d / "k" / "krylov.csv"));
}

TEST_CASE("solution and ensemble files round-trip", "[cli]") {
  auto d = scratch("io");
  auto b = constant_field(2, 1.0, {0.5, 0.0});
  auto bud = choose_horizon(b, b);
  auto sol = picard_solve(b, b, bud, PdeGridSpec::cube(2, 1.0, 11, 64));
  Json spec = {{"family", "constant"}, {"value", {0.5, 0.0}}};
  save_solution((d / "s.bin").string(), sol, spec, spec, 2, 1.0);
  auto ls = load_solution((d / "s.bin").string());
  REQUIRE(ls.sol.u.data() == sol.u.data());
  REQUIRE(ls.sol.grad_u.data() == sol.grad_u.data());
  REQUIRE(ls.sol.drift_id == sol.drift_id);
  REQUIRE(ls.sol.horizon == sol.horizon);
  REQUIRE(ls.sol.certificate.ok);

  std::vector<double> x0{0.1, 0.2};
  SimulatePolicy lean;
  lean.keep_states = false;
  lean.keep_increments = false;
  auto e = simulate(b, x0, bud.T_star, 64, 50, 9, lean);
  save_ensemble((d / "e.bin").string(), e, spec, 1.0);
  auto le = load_ensemble((d / "e.bin").string());
  REQUIRE(le.final_states == e.final_states);
  REQUIRE(le.dt == e.dt);
  REQUIRE(states_at(le, 0.5 * e.T) == states_at(e, 0.5 * e.T));

  write(d / "junk.bin", "not a binary file");
  REQUIRE_THROWS_AS(read_bin((d / "junk.bin").string()), ConfigError);
}

TEST_CASE("lattice fields from CSV", "[cli]") {
  auto d = scratch("grid");
  // f(t, x, y) = t + 2x - y on a 2 x 3 x 3 lattice.
  std::string s = "t,x1,x2,value\n";
  for (double t : {0.0, 1.0})
    for (double x : {-1.0, 0.0, 1.0})
      for (double y : {0.0, 0.5, 1.0}) s += fmt_num(t) + "," + fmt_num(x) + "," + fmt_num(y) + "," + fmt_num(t + 2 * x - y) + "\n";
  write(d / "lat.csv", s);
  Json spec = {{"family", "grid"}, {"path", "lat.csv"}};
  auto f = parse_field(spec, 2, 1.0, "test", 1, d);
  std::vector<double> x{0.25, 0.75}, v(1);
  f.eval(0.5, x, v);
  REQUIRE(v[0] == Catch::Approx(0.5 + 0.5 - 0.75));

  write(d / "holes.csv", "0,0,0,1\n0,1,0,1\n0,0,1,1\n");
  REQUIRE_THROWS_AS(parse_field({{"family", "grid"}, {"path", "holes.csv"}}, 2, 1.0, "test", 1, d), ConfigError);
  REQUIRE_THROWS_AS(parse_field({{"family", "grid"}, {"path", "missing.csv"}}, 2, 1.0, "test", 1, d), ConfigError);
}
