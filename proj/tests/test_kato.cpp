#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>

#include "katosde/kato.hpp"

using namespace katosde;
using Catch::Approx;

namespace {

SpaceTimeField power_product(std::vector<double> a) {
  ExampleParams p;
  p.alphas = std::move(a);
  return make_example(ExampleFamily::PowerProduct, static_cast<int>(p.alphas.size()), 1.0, p);
}

SpaceTimeField time_singular(double a) {
  ExampleParams p;
  p.alpha = a;
  return make_example(ExampleFamily::TimeSingular, 2, 1.0, p);
}

// |x|^{-2.5} on the unit ball, not locally integrable in d = 2.
SpaceTimeField radial_power(double a) {
  FieldTraits tr;
  tr.point_singular.push_back({0.0, 0.0});
  return SpaceTimeField::scalar(
      2, 1.0,
      [a](std::span<const double> x) {
        double r = std::hypot(x[0], x[1]);
        if (r >= 1.0) return 0.0;
        return r == 0.0 ? singular_sentinel() : std::pow(r, a);
      },
      std::nullopt, tr);
}

}  // namespace

TEST_CASE("window integral of a constant", "[kato]") {
  auto one = constant_field(2, 1.0, {1.0});
  std::vector<double> o{0.0, 0.0};
  REQUIRE(window_integral(one, 0.0, o, 0.5) == Approx(std::numbers::pi / 16).epsilon(1e-10));
  // A window reaching past the horizon is cut there.
  REQUIRE(window_integral(one, 0.9, o, 0.5) == Approx(0.1 * std::numbers::pi * 0.25).epsilon(1e-10));
  auto one3 = constant_field(3, 1.0, {1.0});
  std::vector<double> o3{0.1, 0.2, 0.3};
  REQUIRE(window_integral(one3, 0.0, o3, 0.5) == Approx(0.25 * 4.0 / 3.0 * std::numbers::pi / 8).epsilon(1e-8));
}

TEST_CASE("window integral of a power product at the origin", "[kato]") {
  // int_{B(0,r)} |y1|^{-1/2} |y2|^{-1/2} dy = r * int_0^{2pi} |cos|^{-1/2} |sin|^{-1/2} dth
  //   = r * 4 * B(1/4, 1/4) / 2.
  auto f2 = squared(power_product({-0.25, -0.25}));
  std::vector<double> o{0.0, 0.0};
  double beta = std::tgamma(0.25) * std::tgamma(0.25) / std::tgamma(0.5);
  double r = 0.25;
  double expect = r * r * r * 2.0 * beta;
  REQUIRE(window_integral(f2, 0.0, o, r) == Approx(expect).epsilon(1e-4));
}

TEST_CASE("fit_exponent", "[kato]") {
  std::vector<double> r{0.5, 0.25, 0.125}, v{1, 2, 3};
  REQUIRE_THROWS_AS(fit_exponent(r, v), InsufficientDataError);
  std::vector<double> r4{0.5, 0.25, 0.125, 0.0625}, v4;
  for (double x : r4) v4.push_back(3.0 * std::pow(x, 2.7));
  auto fit = fit_exponent(r4, v4);
  REQUIRE(fit.p == Approx(2.7));
  REQUIRE(fit.M == Approx(3.0));
  REQUIRE(fit.r2 == Approx(1.0));
}

TEST_CASE("certify a constant field", "[kato]") {
  auto rep = certify(constant_field(2, 1.0, {1.0}));
  REQUIRE(rep.fit.p == Approx(4.0).margin(0.05));
  REQUIRE(rep.verdict == "certified");
  REQUIRE(rep.kato_alpha_lo == Approx(0.0).margin(0.05));
  for (const auto& s : rep.def11) {
    REQUIRE(s.monotone);
    REQUIRE(s.slope == Approx(0.5).margin(0.02));
  }
}

TEST_CASE("certify squared power product and time singular fields", "[kato]") {
  auto rep = certify(squared(power_product({-0.25, -0.25})));
  REQUIRE(rep.fit.p == Approx(3.0).margin(0.15));
  REQUIRE(rep.verdict == "certified");
  CertifyPolicy pol;
  pol.lambdas = {1.0};
  auto rep2 = certify(squared(time_singular(-0.3)), pol);
  REQUIRE(rep2.fit.p == Approx(2.4).margin(0.2));
  REQUIRE(rep2.verdict == "certified");
}

TEST_CASE("certify rejects a non-integrable field", "[kato]") {
  CertifyPolicy pol;
  pol.lambdas = {1.0};
  auto rep = certify(radial_power(-2.5), pol);
  REQUIRE(rep.verdict == "rejected");
  REQUIRE(rep.fit.p < 2.0);
}

TEST_CASE("certify flags an irregular scan as inconclusive", "[kato]") {
  // Unit background plus a short burst at t in [0.01, 0.012]: windows of length
  // r^2 > 0.012 see it and shorter ones do not, so the scan jumps.
  TimeProfile prof{[](double t) { return 1.0 + (t >= 0.01 && t <= 0.012 ? 1e6 : 0.0); }, {}};
  auto f = SpaceTimeField::scalar(2, 1.0, [](std::span<const double>) { return 1.0; }, prof);
  CertifyPolicy pol;
  pol.lambdas = {1.0};
  pol.default_probes = false;
  pol.probes = {{0.0, {0.0, 0.0}}, {0.0, {0.3, 0.1}}};
  pol.window.time_panels = 256;
  auto rep = certify(f, pol);
  REQUIRE(rep.fit.r2 < 0.95);
  REQUIRE(rep.verdict == "inconclusive");
}

TEST_CASE("non-integrable windows are infinite", "[kato]") {
  auto g = radial_power(-2.5);
  std::vector<double> o{0.0, 0.0}, near{0.05, 0.0}, far{0.5, 0.5};
  REQUIRE(std::isinf(window_integral(g, 0.0, o, 0.125)));
  REQUIRE(std::isinf(window_integral(g, 0.0, near, 0.125)));
  REQUIRE(std::isfinite(window_integral(g, 0.0, far, 0.125)));
  // |x|^{-1.5} is integrable in d = 2: 2 pi int_0^r rho^{-1/2} = 4 pi sqrt(r).
  auto h = radial_power(-1.5);
  REQUIRE(window_integral(h, 0.0, o, 0.25) == Approx(0.0625 * 4 * std::numbers::pi * 0.5).epsilon(1e-4));
}

TEST_CASE("window scaling bounds", "[kato]") {
  auto f2 = squared(power_product({-0.25, -0.25}));
  std::vector<Anchor> probes{{0.0, {0.0, 0.0}}, {0.0, {0.1, 0.0}}, {0.0, {0.3, -0.2}}};
  std::vector<double> radii{0.25, 0.125, 0.0625};
  std::vector<int> ks{-2, -1, 0, 1, 2};
  auto chk = window_scaling_check(f2, 3.0, probes, radii, ks);
  REQUIRE(chk.pass);
  REQUIRE(chk.worst_ratio <= 2.0);
  // The constant field saturates both branches exactly.
  auto one = constant_field(2, 1.0, {1.0});
  auto c1 = window_scaling_check(one, 4.0, probes, radii, ks);
  REQUIRE(c1.M2 == Approx(std::numbers::pi).epsilon(1e-8));
  REQUIRE(c1.worst_ratio == Approx(1.0).epsilon(1e-8));
}

TEST_CASE("square-root class step", "[kato]") {
  auto f = power_product({-0.25, -0.25});
  std::vector<Anchor> anchors{{0.0, {0.0, 0.0}}, {0.0, {0.2, 0.1}}};
  std::vector<double> T{0.1, 0.01, 0.001};
  auto chk = sqrt_class_check(f, 1.5, anchors, T);
  REQUIRE(chk.bound_holds);
  REQUIRE(chk.decays);
  REQUIRE(chk.pass);
  REQUIRE(chk.beta == Approx(0.125));
}

TEST_CASE("window scans are translation invariant", "[kato]") {
  auto f2 = squared(power_product({-0.25, -0.25}));
  auto shifted = SpaceTimeField::scalar(
      2, 1.0,
      [f2](std::span<const double> x) {
        std::vector<double> y{x[0] - 0.4, x[1] + 0.3};
        return f2.spatial_magnitude(y);
      },
      std::nullopt, FieldTraits{{{0.4}, {-0.3}}, {}, {}, {}, {}, 0.0, false});
  std::vector<double> a{0.05, 0.02}, b{0.45, -0.28};
  for (double r : {0.25, 0.0625})
    REQUIRE(window_integral(shifted, 0.0, b, r) == Approx(window_integral(f2, 0.0, a, r)).epsilon(1e-6));
}

TEST_CASE("integral bound implies the window exponent", "[kato]") {
  // g = (|x1| ^ 1)^{-1/2} in d = 2. int_0^1 s^{-p/2} int exp(-|y|^2/2s) g dy ds
  // is finite iff p < d + 3/2; the window exponent is d + 2 - 1/2.
  ExampleParams prm;
  prm.alphas = {-0.25, 0.0};
  auto g = squared(make_example(ExampleFamily::PowerProduct, 2, 1.0, prm));
  double p = 3.5 - 0.2;
  KernelIntegralSpec s;
  s.gamma = 0.5 * p;
  s.T = 1.0;
  s.x = {0.0, 0.0};
  auto r = kernel_integral(g, s);
  REQUIRE(std::isfinite(r.value));
  std::vector<Anchor> probes{{0.0, {0.0, 0.0}}, {0.0, {0.0, 0.3}}};
  auto scan = window_scan(g, probes, default_radii());
  REQUIRE(fit_exponent(scan.radii, scan.sup_values).p >= p - 0.05);
  // Past the threshold the cells stop shrinking.
  s.gamma = 0.5 * (3.5 + 0.2);
  REQUIRE_THROWS_AS(kernel_integral(g, s), AccuracyError);
}

TEST_CASE("window condition implies kernel decay", "[kato]") {
  // p = 3, alpha = 0.5 < p - d: values fall like T^{(p - d - alpha)/2} = T^{1/4}.
  auto f2 = squared(power_product({-0.25, -0.25}));
  std::vector<double> vals;
  std::vector<double> Ts{0.1, 0.01, 0.001};
  for (double T : Ts) {
    KernelIntegralSpec s;
    s.gamma = 0.5 * (2 + 0.5);
    s.T = T;
    s.x = {0.0, 0.0};
    vals.push_back(kernel_integral(f2, s).value);
  }
  REQUIRE(vals[1] < vals[0]);
  REQUIRE(vals[2] < vals[1]);
  double lo = 1e300, hi = 0;
  for (std::size_t i = 0; i < Ts.size(); ++i) {
    double q = vals[i] / std::pow(Ts[i], 0.25);
    lo = std::min(lo, q);
    hi = std::max(hi, q);
  }
  REQUIRE(hi / lo < 1.1);
}

TEST_CASE("ball lattice scan", "[kato]") {
  ExampleParams prm;
  prm.alpha = 0.25;
  prm.min_radius = 0.02;
  auto f2 = squared(make_example(ExampleFamily::BallLattice, 2, 1.0, prm));
  std::vector<Anchor> probes{{0.0, {1.0, 0.0}}, {0.0, {2.25, 0.0}}};
  auto scan = window_scan(f2, probes, std::vector<double>{0.25, 0.125, 0.0625, 0.03125});
  auto fit = fit_exponent(scan.radii, scan.sup_values);
  REQUIRE(fit.p == Approx(2.5).margin(0.15));
}
