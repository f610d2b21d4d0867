#include <catch_amalgamated.hpp>

#include <cmath>

#include "katosde/zvonkin.hpp"

using namespace katosde;

namespace {

SimulatePolicy lean() {
  SimulatePolicy p;
  p.keep_states = false;
  p.keep_increments = false;
  return p;
}

}  // namespace

TEST_CASE("zero drift gives the identity map", "[zvonkin]") {
  auto b = zero_field(2, 1.0, 2);
  auto bud = choose_horizon(b, b);
  auto sol = picard_solve(b, b, bud, PdeGridSpec::cube(2, 1.0, 21, 64));
  auto map = build_zvonkin(sol);
  REQUIRE(map.c1 == 1.0);
  REQUIRE(map.c2 == 1.0);
  REQUIRE(map.terminal_defect == 0.0);
  std::vector<double> x{0.3, -0.1}, v(2);
  map.eval(0.0, x, v);
  REQUIRE(v == x);
  std::vector<double> x0{0.0, 0.0};
  auto e = simulate(b, x0, bud.T_star, 64, 500, 3, lean());
  auto r = ito_residual(map, e);
  REQUIRE(r.mean_residual == 0.0);
  REQUIRE(r.pass);
}

TEST_CASE("constant drift: the identity holds to rounding", "[zvonkin]") {
  auto b = constant_field(2, 1.0, {0.5, 0.0});
  auto bud = choose_horizon(b, b);
  auto sol = picard_solve(b, b, bud, PdeGridSpec::cube(2, 1.0, 21, 64));
  auto map = build_zvonkin(sol);
  // u = -(T - t) c has zero gradient, so v is a translation.
  REQUIRE(map.c1 == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(map.c2 == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(map.bilipschitz_ok);
  REQUIRE(map.terminal_defect == 0.0);
  std::vector<double> x0{0.1, -0.2};
  for (int n : {128, 512}) {
    auto e = simulate(b, x0, bud.T_star, n, 10000, 5, lean());
    auto r = ito_residual(map, e);
    UNSCOPED_INFO("n=" << n << " mean=" << r.mean[0] << " se=" << r.stderr_[0]);
    REQUIRE(r.mean_residual < 1e-15);
    REQUIRE(r.pass);
    REQUIRE(drift_removal_check(map, e).pass);
  }
}

TEST_CASE("zvonkin preconditions and configuration errors", "[zvonkin]") {
  auto b = constant_field(2, 1.0, {0.5, 0.0});
  auto f = constant_field(2, 1.0, {0.0, 0.5});
  auto bud = choose_horizon(b, f);
  auto grid = PdeGridSpec::cube(2, 1.0, 21, 64);
  auto other = picard_solve(b, f, bud, grid);
  REQUIRE_THROWS_AS(build_zvonkin(other), PreconditionError);

  auto bb = choose_horizon(b, b);
  auto sol = picard_solve(b, b, bb, grid);
  auto broken = sol;
  broken.certificate.ok = false;
  REQUIRE_THROWS_AS(build_zvonkin(broken), PreconditionError);

  auto map = build_zvonkin(sol);
  std::vector<double> x0{0.0, 0.0};
  auto wrong = simulate(f, x0, bb.T_star, 64, 10, 1);
  REQUIRE_THROWS_AS(ito_residual(map, wrong), ConfigError);
  auto short_run = simulate(b, x0, 0.5 * bb.T_star, 64, 10, 1);
  REQUIRE_THROWS_AS(ito_residual(map, short_run), ConfigError);
}

TEST_CASE("mollified singular drift", "[zvonkin]") {
  ExampleParams prm;
  prm.alphas = {-0.25, -0.25};
  // Level 4: the mollifier width stays above the lattice spacing.
  auto b = mollify(make_example(ExampleFamily::PowerProduct, 2, 1.0, prm).with_direction({1.0, 1.0}, 0.08), 4);
  auto bud = choose_horizon(b, b);
  auto sol = picard_solve(b, b, bud, PdeGridSpec::cube(2, 0.6, 41, 64));
  auto map = build_zvonkin(sol);
  UNSCOPED_INFO("c1=" << map.c1 << " c2=" << map.c2);
  REQUIRE(map.pairs == 10000);
  REQUIRE(map.c1 > 0.45);
  REQUIRE(map.bilipschitz_ok);
  REQUIRE(map.terminal_defect == 0.0);

  std::vector<double> x0{0.05, 0.03};
  auto e = simulate(b, x0, bud.T_star, 2048, 10000, 5, lean());
  auto r = ito_residual(map, e);
  UNSCOPED_INFO("mean=" << r.mean[0] << "," << r.mean[1] << " se=" << r.stderr_[0] << " allowance=" << r.allowance);
  REQUIRE(r.interpolation_allowance > 0.0);
  REQUIRE(r.pass);
  auto dr = drift_removal_check(map, e);
  REQUIRE(dr.pass);
  REQUIRE_THROWS_AS(drift_removal_check(map, e, 7), ValidationError);
}
