#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "katosde/field.hpp"
#include "katosde/mollify.hpp"

using namespace katosde;
using Catch::Approx;

namespace {

SpaceTimeField power_product(std::vector<double> a, double T = 1.0) {
  ExampleParams p;
  p.alphas = std::move(a);
  return make_example(ExampleFamily::PowerProduct, static_cast<int>(p.alphas.size()), T, p);
}

// Independent 1D oracle for int k_w(z) |z|^a dz: midpoint rule after z = w u^4,
// which removes the singularity, with its own bump normalization.
double oracle_power_moment(double w, double a, int m) {
  auto bump = [](double s) { return std::abs(s) < 1 ? std::exp(-1.0 / (1.0 - s * s)) : 0.0; };
  double norm = 0.0;
  for (int i = 0; i < 20 * m; ++i) {
    double s = -1.0 + (i + 0.5) * 2.0 / (20 * m);
    norm += bump(s) * 2.0 / (20 * m);
  }
  double acc = 0.0;
  for (int i = 0; i < m; ++i) {
    double u = (i + 0.5) / m;
    double z = w * std::pow(u, 4);
    double jac = 4.0 * w * std::pow(u, 3);
    acc += bump(z / w) / (w * norm) * std::pow(z, a) * jac / m;
  }
  return 2.0 * acc;
}

}  // namespace

TEST_CASE("power product metadata and validation", "[field]") {
  auto f = power_product({-0.25, -0.25});
  REQUIRE(f.theoretical_p().value() == Approx(3.0));
  REQUIRE_THROWS_AS(power_product({-0.6, 0.0}), ValidationError);
  REQUIRE_THROWS_WITH(power_product({-0.6, 0.0}), Catch::Matchers::ContainsSubstring("alpha_1 > -1/2"));
  REQUIRE_THROWS_WITH(power_product({-0.49, -0.49, -0.1}),
                      Catch::Matchers::ContainsSubstring("sum of alphas > -1"));
  std::vector<double> x{0.5, 0.25};
  REQUIRE(f(0.3, x)[0] == Approx(std::pow(0.5, -0.25) * std::pow(0.25, -0.25)));
  std::vector<double> far{3.0, -2.0};
  REQUIRE(f(0.3, far)[0] == Approx(1.0));
  std::vector<double> o{0.0, 0.5};
  REQUIRE(std::isinf(f(0.3, o)[0]));
  REQUIRE(f(1.5, x)[0] == 0.0);
  REQUIRE(f(-0.1, x)[0] == 0.0);
}

TEST_CASE("ball lattice geometry", "[field]") {
  ExampleParams p;
  p.alpha = 0.25;
  auto f = make_example(ExampleFamily::BallLattice, 2, 1.0, p);
  REQUIRE(f.theoretical_p().value() == Approx(2.5));
  // r_1 = 1, r_2 = 1/4 -> x_1 = (1,0), x_2 = (2.25, 0).
  std::vector<double> c1{1.0, 0.0}, c2{2.25, 0.0};
  REQUIRE(std::isinf(f(0.0, c1)[0]));
  REQUIRE(std::isinf(f(0.0, c2)[0]));
  std::vector<double> y{2.25, 0.1};
  REQUIRE(f(0.0, y)[0] == Approx(std::pow(0.1, -0.75)));
  std::vector<double> out{2.25, 0.3};
  REQUIRE(f(0.0, out)[0] == 0.0);
  p.alpha = 0.5;
  REQUIRE_THROWS_WITH(make_example(ExampleFamily::BallLattice, 2, 1.0, p),
                      Catch::Matchers::ContainsSubstring("alpha < 1/d"));
}

TEST_CASE("time singular field", "[field]") {
  ExampleParams p;
  p.alpha = -0.3;
  auto f = make_example(ExampleFamily::TimeSingular, 2, 1.0, p);
  REQUIRE(f.theoretical_p().value() == Approx(2.4));
  std::vector<double> x{0.5, 7.0};
  REQUIRE(f(0.0625, x)[0] == Approx(2.0 * std::pow(0.5, -0.3)));
  p.alpha = -0.2;
  REQUIRE_THROWS_WITH(make_example(ExampleFamily::TimeSingular, 2, 1.0, p),
                      Catch::Matchers::ContainsSubstring("alpha <= -1/(2d)"));
  // For d = 1 the admissible interval (-1/2, -1/2] is empty.
  p.alpha = -0.45;
  REQUIRE_THROWS_AS(make_example(ExampleFamily::TimeSingular, 1, 1.0, p), ValidationError);
  REQUIRE(power_product({-0.25}).dimension_warning());
}

TEST_CASE("squared field keeps structure", "[field]") {
  auto f = power_product({-0.25, -0.25}).with_direction({1.0, 1.0}, 2.0);
  auto s = squared(f);
  std::vector<double> x{0.3, 0.7};
  auto v = f(0.2, x);
  REQUIRE(s(0.2, x)[0] == Approx(v[0] * v[0] + v[1] * v[1]));
  REQUIRE(s.factors() != nullptr);
  REQUIRE(s.theoretical_p().value() == Approx(3.0));
}

TEST_CASE("grid field interpolation", "[field]") {
  auto spec = LatticeSpec::cube(2, 1.0, 11, 0.0, 1.0, 4);
  auto lin = SpaceTimeField::general(2, 1, 1.0, [](double t, std::span<const double> x, std::span<double> o) {
    o[0] = 1.0 + 2.0 * x[0] - x[1] + 3.0 * t;
  });
  GridField g = sample_to_grid(lin, spec);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> x{u(rng), u(rng)};
    double t = 0.5 * (u(rng) + 1.0);
    double v[1];
    g.eval(t, x, v);
    REQUIRE(v[0] == Approx(1.0 + 2.0 * x[0] - x[1] + 3.0 * t).margin(1e-12));
  }
  // Clamped outside the box.
  std::vector<double> out{5.0, -5.0};
  double v[1];
  g.eval(0.0, out, v);
  REQUIRE(v[0] == Approx(1.0 + 2.0 + 1.0));
  // Nodes reproduce samples.
  std::vector<double> node{0.2, -0.4};
  g.eval(0.25, node, v);
  REQUIRE(v[0] == Approx(1.0 + 0.4 + 0.4 + 0.75).margin(1e-12));
}

TEST_CASE("sample_to_grid caps singular values", "[field]") {
  auto f = power_product({-0.25, -0.25});
  GridField g = sample_to_grid(f, LatticeSpec::cube(2, 1.0, 5));
  // Node (0, 0.5): singular in x_1.
  std::size_t s = 2 * 5 + 3;
  REQUIRE(g.at(0, s, 0) == kCap);
  REQUIRE(std::isfinite(g.at(0, 0, 0)));
}

TEST_CASE("mollified power product at the origin", "[mollify]") {
  auto f = power_product({-0.25, -0.25});
  const int n = 6;
  double w = std::ldexp(1.0, -n) / std::sqrt(2.0);
  double one = oracle_power_moment(w, -0.25, 4000);
  double ref = one * one;
  // The oracle resolution is quadrupled from a level that is already converged.
  REQUIRE(oracle_power_moment(w, -0.25, 1000) == Approx(one).epsilon(1e-5));
  auto fn = mollify(f, n);
  std::vector<double> o{0.0, 0.0};
  REQUIRE(fn(0.5, o)[0] == Approx(ref).epsilon(1e-3));
  // Direct tensor quadrature agrees with the tabulated product path.
  double direct[1];
  mollify_at(f, n, 0.5, o, direct);
  REQUIRE(direct[0] == Approx(ref).epsilon(1e-3));
}

TEST_CASE("mollification converges at smooth points", "[mollify]") {
  auto f = power_product({-0.25, -0.25});
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.2, 0.9);
  std::vector<std::vector<double>> pts;
  for (int i = 0; i < 10; ++i) pts.push_back({u(rng) * (i % 2 ? 1 : -1), u(rng)});
  double prev = 1e300;
  for (int n : {4, 6, 8}) {
    auto fn = mollify(f, n);
    double err = 0.0;
    for (auto& x : pts) err = std::max(err, std::abs(fn(0.5, x)[0] - f(0.5, x)[0]));
    REQUIRE(err < prev);
    prev = err;
  }
  REQUIRE(prev < 1e-4);
}

TEST_CASE("mollifier preserves constants and the vector structure", "[mollify]") {
  auto c = constant_field(2, 1.0, {2.0, -1.0});
  std::vector<double> x{0.3, 0.1};
  auto v = mollify(c, 3)(0.0, x);
  REQUIRE(v[0] == Approx(2.0).epsilon(1e-10));
  REQUIRE(v[1] == Approx(-1.0).epsilon(1e-10));
  auto b = power_product({-0.25, -0.25}).with_direction({1.0, 0.0}, 0.5);
  auto bn = mollify(b, 5);
  auto bv = bn(0.1, x);
  REQUIRE(bv.size() == 2);
  REQUIRE(bv[1] == 0.0);
  auto sn = mollify(power_product({-0.25, -0.25}), 5)(0.1, x)[0];
  REQUIRE(bv[0] == Approx(0.5 * sn));
}

TEST_CASE("time singular mollification in time", "[mollify]") {
  ExampleParams p;
  p.alpha = -0.3;
  auto f = make_example(ExampleFamily::TimeSingular, 2, 1.0, p);
  auto fn = mollify(f, 5);
  std::vector<double> x{0.5, 0.0};
  // Away from t = 0 the time mollification is a small perturbation.
  double exact = f(0.5, x)[0];
  REQUIRE(fn(0.5, x)[0] == Approx(exact).epsilon(0.05));
  // Vanishes before t = 0 since the field is zero for negative times.
  REQUIRE(fn(0.0, x)[0] == Approx(0.0).margin(1e-12));
  REQUIRE(std::isfinite(fn(0.01, x)[0]));
}
