#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "katosde/error.hpp"
#include "katosde/field.hpp"
#include "katosde/gausskernel.hpp"
#include "katosde/parallel.hpp"
#include "katosde/quadrature.hpp"

namespace katosde {

struct WindowPolicy {
  GradingPolicy grading{};
  int angular_panels = 8;
  int radial_panels = 4;
  int time_panels = 4;
  int max_radial_panels = 128;
  int divergence_extra_levels = 6;
  double divergence_rtol = 1e-3;
};

namespace detail {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// Radial rule on [0, r] along direction w from anchor x.
inline Rule1D radial_rule(const SpaceTimeField& f, std::span<const double> x, std::span<const double> w,
                          double r, bool singular_anchor, const WindowPolicy& pol) {
  const auto& tr = f.traits();
  const int d = f.dim();
  std::vector<double> hard, plain;
  std::vector<SoftFeature> soft;
  if (singular_anchor) hard.push_back(0.0);
  for (int i = 0; i < d; ++i) {
    if (std::abs(w[i]) < 1e-14) continue;
    for (double c : tr.axis_singular[i]) {
      double rho = (c - x[i]) / w[i];
      if (rho > 0 && rho < r) hard.push_back(rho);
    }
    for (const auto& s : tr.axis_soft[i]) {
      double rho = (s.center - x[i]) / w[i];
      double wid = s.width / std::abs(w[i]);
      if (rho + 8 * wid > 0 && rho - 8 * wid < r) soft.push_back({rho, std::min(wid, r)});
    }
    if (f.factors())
      for (double k : (*f.factors())[i].kinks) {
        double rho = (k - x[i]) / w[i];
        if (rho > 0 && rho < r) plain.push_back(rho);
      }
  }
  for (const auto& p : tr.point_singular) {
    double proj = 0.0, dist2 = 0.0;
    for (int i = 0; i < d; ++i) proj += (p[i] - x[i]) * w[i];
    for (int i = 0; i < d; ++i) {
      double e = p[i] - x[i] - proj * w[i];
      dist2 += e * e;
    }
    if (proj > 0 && proj < r && dist2 < r * r) hard.push_back(proj);
  }
  GradingPolicy g = pol.grading;
  g.base_panels = pol.radial_panels;
  if (tr.feature_scale > 0)
    g.base_panels = std::clamp(static_cast<int>(std::ceil(r / tr.feature_scale)), g.base_panels, pol.max_radial_panels);
  return build_rule(0.0, r, hard, plain, soft, g);
}

inline bool anchor_is_singular(const SpaceTimeField& f, std::span<const double> x, double r) {
  const auto& tr = f.traits();
  double tol = 1e-12 * std::max(1.0, r);
  for (int i = 0; i < f.dim(); ++i)
    for (double c : tr.axis_singular[i])
      if (std::abs(c - x[i]) < tol) return true;
  for (const auto& p : tr.point_singular) {
    double m = 0.0;
    for (int i = 0; i < f.dim(); ++i) m = std::max(m, std::abs(p[i] - x[i]));
    if (m < tol) return true;
  }
  return false;
}

/// Angles in [0, 2 pi) where a singular set meets the anchor or the circle.
inline void planar_angle_cuts(const SpaceTimeField& f, std::span<const double> x, double r, int a0, int a1,
                              std::vector<double>& hard, std::vector<double>& plain) {
  const auto& tr = f.traits();
  double tol = 1e-12 * std::max(1.0, r);
  auto add = [](std::vector<double>& v, double a) {
    a = std::fmod(a, kTwoPi);
    if (a < 0) a += kTwoPi;
    v.push_back(a);
  };
  for (double c : tr.axis_singular[a0]) {
    double u = (c - x[a0]) / r;
    if (std::abs(c - x[a0]) < tol) {
      add(hard, 0.5 * std::numbers::pi);
      add(hard, 1.5 * std::numbers::pi);
    } else if (std::abs(u) < 1) {
      add(plain, std::acos(u));
      add(plain, -std::acos(u));
    }
  }
  for (double c : tr.axis_singular[a1]) {
    double u = (c - x[a1]) / r;
    if (std::abs(c - x[a1]) < tol) {
      add(hard, 0.0);
      add(hard, std::numbers::pi);
    } else if (std::abs(u) < 1) {
      add(plain, std::asin(u));
      add(plain, std::numbers::pi - std::asin(u));
    }
  }
  for (const auto& p : tr.point_singular) {
    double dx = p[a0] - x[a0], dy = p[a1] - x[a1];
    double dist = std::hypot(dx, dy);
    if (dist > tol && dist < r) add(hard, std::atan2(dy, dx));
  }
}

template <class Value>
double polar_ball(const SpaceTimeField& f, std::span<const double> x, double r, const WindowPolicy& pol,
                  Value&& value) {
  const int d = f.dim();
  bool sing = detail::anchor_is_singular(f, x, r);
  std::vector<double> y(d), w(d);
  double acc = 0.0;
  if (d == 1) {
    for (int side : {-1, 1}) {
      w[0] = side;
      Rule1D rr = detail::radial_rule(f, x, w, r, sing, pol);
      for (std::size_t k = 0; k < rr.size(); ++k) {
        y[0] = x[0] + side * rr.nodes[k];
        acc += rr.weights[k] * value(y);
      }
    }
  } else if (d == 2) {
    std::vector<double> hard, plain;
    detail::planar_angle_cuts(f, x, r, 0, 1, hard, plain);
    GradingPolicy g = pol.grading;
    g.base_panels = pol.angular_panels;
    // Work on [0, 2 pi] with a hard cut at 0 duplicated at 2 pi.
    std::vector<double> hard2 = hard;
    for (double a : hard)
      if (a == 0.0) hard2.push_back(detail::kTwoPi);
    Rule1D th = build_rule(0.0, detail::kTwoPi, hard2, plain, {}, g);
    for (std::size_t a = 0; a < th.size(); ++a) {
      w[0] = std::cos(th.nodes[a]);
      w[1] = std::sin(th.nodes[a]);
      Rule1D rr = detail::radial_rule(f, x, w, r, sing, pol);
      double inner = 0.0;
      for (std::size_t k = 0; k < rr.size(); ++k) {
        y[0] = x[0] + rr.nodes[k] * w[0];
        y[1] = x[1] + rr.nodes[k] * w[1];
        inner += rr.weights[k] * rr.nodes[k] * value(y);
      }
      acc += th.weights[a] * inner;
    }
  } else {
    // Polar angle theta from axis 2, azimuth phi in the (0,1) plane.
    std::vector<double> hard_phi, plain_phi, hard_th, plain_th;
    detail::planar_angle_cuts(f, x, r, 0, 1, hard_phi, plain_phi);
    double tol = 1e-12 * std::max(1.0, r);
    for (double c : f.traits().axis_singular[2]) {
      if (std::abs(c - x[2]) < tol) hard_th.push_back(0.5 * std::numbers::pi);
      else if (std::abs((c - x[2]) / r) < 1) plain_th.push_back(std::acos((c - x[2]) / r));
    }
    for (const auto& p : f.traits().point_singular) {
      double dist = std::sqrt((p[0] - x[0]) * (p[0] - x[0]) + (p[1] - x[1]) * (p[1] - x[1]) +
                              (p[2] - x[2]) * (p[2] - x[2]));
      if (dist > tol && dist < r) hard_th.push_back(std::acos((p[2] - x[2]) / dist));
    }
    GradingPolicy g = pol.grading;
    g.base_panels = pol.angular_panels / 2 + 1;
    Rule1D th = build_rule(0.0, std::numbers::pi, hard_th, plain_th, {}, g);
    g.base_panels = pol.angular_panels;
    std::vector<double> hard2 = hard_phi;
    for (double a : hard_phi)
      if (a == 0.0) hard2.push_back(detail::kTwoPi);
    Rule1D ph = build_rule(0.0, detail::kTwoPi, hard2, plain_phi, {}, g);
    for (std::size_t a = 0; a < th.size(); ++a) {
      double st = std::sin(th.nodes[a]), ct = std::cos(th.nodes[a]);
      for (std::size_t b = 0; b < ph.size(); ++b) {
        w[0] = st * std::cos(ph.nodes[b]);
        w[1] = st * std::sin(ph.nodes[b]);
        w[2] = ct;
        Rule1D rr = detail::radial_rule(f, x, w, r, sing, pol);
        double inner = 0.0;
        for (std::size_t k = 0; k < rr.size(); ++k) {
          for (int i = 0; i < 3; ++i) y[i] = x[i] + rr.nodes[k] * w[i];
          inner += rr.weights[k] * rr.nodes[k] * rr.nodes[k] * value(y);
        }
        acc += th.weights[a] * ph.weights[b] * st * inner;
      }
    }
  }
  return acc;
}

}  // namespace detail

namespace detail {

// Integrals use raw magnitudes: nodes never sit on a singular set, and a cap
// would hide non-integrable singularities. A sentinel hit falls back to kCap.
inline double raw_or_cap(double v) { return std::isfinite(v) ? v : kCap; }

inline double ball_integral_raw(const SpaceTimeField& f, double tau, std::span<const double> x, double r,
                                const WindowPolicy& pol) {
  if (f.separable()) {
    double pr = raw_or_cap(std::abs(f.profile(tau)));
    if (pr == 0.0) return 0.0;
    return pr * polar_ball(f, x, r, pol, [&](std::span<const double> y) { return raw_or_cap(f.spatial_magnitude(y)); });
  }
  return polar_ball(f, x, r, pol, [&](std::span<const double> y) { return raw_or_cap(f.magnitude(tau, y)); });
}

inline double window_integral_raw(const SpaceTimeField& f, double a, double b, std::span<const double> x, double r,
                                  const WindowPolicy& pol) {
  if (f.time_independent()) return (b - a) * ball_integral_raw(f, 0.5 * (a + b), x, r, pol);
  std::vector<double> hard, plain;
  for (double ts : f.traits().time_singular) hard.push_back(ts);
  GradingPolicy g = pol.grading;
  g.base_panels = pol.time_panels;
  Rule1D tr = build_rule(a, b, hard, plain, {}, g);
  if (f.separable()) {
    double tint = 0.0;
    for (std::size_t k = 0; k < tr.size(); ++k) tint += tr.weights[k] * raw_or_cap(std::abs(f.profile(tr.nodes[k])));
    if (tint == 0.0) return 0.0;
    return tint * polar_ball(f, x, r, pol, [&](std::span<const double> y) { return raw_or_cap(f.spatial_magnitude(y)); });
  }
  double acc = 0.0;
  for (std::size_t k = 0; k < tr.size(); ++k) acc += tr.weights[k] * ball_integral_raw(f, tr.nodes[k], x, r, pol);
  return acc;
}

inline bool has_singular_traits(const SpaceTimeField& f) {
  const auto& tr = f.traits();
  if (!tr.point_singular.empty() || !tr.time_singular.empty()) return true;
  for (const auto& a : tr.axis_singular)
    if (!a.empty()) return true;
  return false;
}

}  // namespace detail

/// int_{B(x, r)} |f(tau, y)| dy in polar coordinates around x.
inline double ball_integral(const SpaceTimeField& f, double tau, std::span<const double> x, double r,
                            const WindowPolicy& pol = {}) {
  return detail::ball_integral_raw(f, tau, x, r, pol);
}

/// int_0^{T_len} int_{B(x, r)} |f(t + s, y)| dy ds. The usual window uses T_len = r^2.
/// Returns +inf when deeper grading toward the singular sets keeps adding mass.
inline double window_integral(const SpaceTimeField& f, double t, std::span<const double> x, double r,
                              std::optional<double> T_len = std::nullopt, const WindowPolicy& pol = {}) {
  if (static_cast<int>(x.size()) != f.dim()) throw ValidationError("window_integral: anchor dim mismatch");
  if (!(r > 0)) throw ValidationError("window_integral: r > 0 violated");
  double len = T_len.value_or(r * r);
  double a = std::max(t, 0.0), b = std::min(t + len, f.horizon());
  if (!(b > a)) return 0.0;
  double v = detail::window_integral_raw(f, a, b, x, r, pol);
  if (!detail::has_singular_traits(f)) return v;
  WindowPolicy deep = pol;
  deep.grading.levels += pol.divergence_extra_levels;
  double v2 = detail::window_integral_raw(f, a, b, x, r, deep);
  if (std::abs(v2 - v) > pol.divergence_rtol * std::abs(v2)) return std::numeric_limits<double>::infinity();
  return v2;
}

// ---------------------------------------------------------------------------
// Exponent fit

struct ExponentFit {
  double p = 0.0;
  double M = 0.0;
  double r2 = 0.0;
  std::vector<double> residuals;
};

/// Least-squares fit of log v = log M + p log r.
inline ExponentFit fit_exponent(std::span<const double> r, std::span<const double> v) {
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < r.size() && i < v.size(); ++i)
    if (r[i] > 0 && v[i] > 0 && std::isfinite(v[i])) {
      lx.push_back(std::log(r[i]));
      ly.push_back(std::log(v[i]));
    }
  if (lx.size() < 4) throw InsufficientDataError("fit_exponent: at least 4 positive samples required");
  double n = static_cast<double>(lx.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
    syy += (ly[i] - my) * (ly[i] - my);
  }
  if (sxx == 0) throw InsufficientDataError("fit_exponent: radii must not all coincide");
  ExponentFit fit;
  fit.p = sxy / sxx;
  double c = my - fit.p * mx;
  fit.M = std::exp(c);
  double sse = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    double e = ly[i] - (c + fit.p * lx[i]);
    fit.residuals.push_back(e);
    sse += e * e;
  }
  fit.r2 = syy > 0 ? 1.0 - sse / syy : 1.0;
  return fit;
}

// ---------------------------------------------------------------------------
// Window scans and certification

struct WindowSample {
  std::size_t probe_id;
  double r;
  double value;
};

struct WindowScan {
  std::vector<double> radii;
  std::vector<double> sup_values;     // max over probes, per radius
  std::vector<std::size_t> argmax;    // probe index per radius
  std::vector<WindowSample> samples;  // every probe x radius
};

inline std::vector<double> default_radii() {
  std::vector<double> r;
  for (int k = 2; k <= 8; ++k) r.push_back(std::ldexp(1.0, -k));
  return r;
}

inline WindowScan window_scan(const SpaceTimeField& f, std::span<const Anchor> probes, std::span<const double> radii,
                              const WindowPolicy& pol = {}) {
  WindowScan scan;
  scan.radii.assign(radii.begin(), radii.end());
  std::vector<double> vals(probes.size() * radii.size());
  parallel_for(vals.size(), [&](std::size_t k) {
    std::size_t p = k / radii.size(), j = k % radii.size();
    vals[k] = window_integral(f, probes[p].t, probes[p].x, radii[j], std::nullopt, pol);
  });
  scan.sup_values.assign(radii.size(), -1.0);
  scan.argmax.assign(radii.size(), 0);
  for (std::size_t p = 0; p < probes.size(); ++p)
    for (std::size_t j = 0; j < radii.size(); ++j) {
      double v = vals[p * radii.size() + j];
      scan.samples.push_back({p, radii[j], v});
      if (v > scan.sup_values[j]) {
        scan.sup_values[j] = v;
        scan.argmax[j] = p;
      }
    }
  return scan;
}

struct CertifyPolicy {
  std::vector<double> radii = default_radii();
  std::vector<Anchor> probes;          // user anchors, appended to the defaults
  bool default_probes = true;
  std::vector<double> probe_times{0.0};
  std::vector<double> T_grid{0.1, 0.01, 0.001, 0.0001};
  std::vector<double> lambdas{0.5, 1.0, 2.0};
  bool both_directions = true;
  std::optional<double> kato_alpha;    // class index used for the decay check
  double min_r2 = 0.95;
  double p_margin = 0.1;
  double min_decay_slope = 0.05;
  int max_kernel_probes = 4;
  QuadraturePolicy quad{};
  WindowPolicy window{};
};

struct DecaySeries {
  double lambda = 1.0;
  TimeDirection direction = TimeDirection::Forward;
  std::vector<double> T;
  std::vector<double> values;
  double slope = 0.0;
  bool monotone = false;
};

struct KatoReport {
  std::string field_name;
  int dim = 0;
  bool dimension_warning = false;
  std::vector<Anchor> probes;
  WindowScan scan;
  ExponentFit fit;
  double kato_alpha_lo = 0.0, kato_alpha_hi = 2.0;  // certified K_{d,a} for a in (lo, hi]
  double alpha_used = 0.0;
  std::vector<DecaySeries> def11;
  std::vector<double> nlambda_T;
  std::vector<double> nlambda_values;  // NaN where the integral diverges
  std::string verdict;                 // certified | inconclusive | rejected
  std::string reason;
};

inline std::vector<Anchor> certify_probes(const SpaceTimeField& f, const CertifyPolicy& pol) {
  std::vector<Anchor> probes;
  std::vector<double> times = pol.probe_times;
  for (double ts : f.traits().time_singular)
    if (std::find(times.begin(), times.end(), ts) == times.end()) times.push_back(ts);
  if (pol.default_probes) probes = default_anchors(f, times);
  for (const auto& a : pol.probes) {
    if (static_cast<int>(a.x.size()) != f.dim()) throw ValidationError("certify: probe dim mismatch");
    probes.push_back(a);
  }
  if (probes.empty()) throw ValidationError("certify: no probes");
  return probes;
}

/// Slope of log values against log T; positive when values vanish as T -> 0.
inline double decay_slope(std::span<const double> T, std::span<const double> v) {
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < T.size(); ++i)
    if (v[i] > 0) {
      lx.push_back(std::log(T[i]));
      ly.push_back(std::log(v[i]));
    }
  if (lx.size() < 2) return 0.0;
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= lx.size();
  my /= lx.size();
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
  }
  return sxx > 0 ? sxy / sxx : 0.0;
}

inline KatoReport certify(const SpaceTimeField& f, const CertifyPolicy& pol = {}) {
  KatoReport rep;
  rep.field_name = f.name();
  rep.dim = f.dim();
  rep.dimension_warning = f.dimension_warning();
  rep.probes = certify_probes(f, pol);
  rep.scan = window_scan(f, rep.probes, pol.radii, pol.window);
  for (double v : rep.scan.sup_values)
    if (std::isinf(v)) {
      // No finite exponent bounds an infinite window.
      rep.fit.p = -std::numeric_limits<double>::infinity();
      rep.kato_alpha_lo = 2.0;
      rep.verdict = "rejected";
      rep.reason = "window integrals diverge";
      return rep;
    }
  rep.fit = fit_exponent(rep.scan.radii, rep.scan.sup_values);
  const double d = f.dim();
  const double p = rep.fit.p;
  rep.kato_alpha_lo = std::max(0.0, 2.0 - (p - d));
  rep.kato_alpha_hi = 2.0;

  if (rep.fit.r2 < pol.min_r2) {
    rep.verdict = "inconclusive";
    rep.reason = "window fit r^2 below threshold";
    return rep;
  }
  if (!(p > d + pol.p_margin)) {
    rep.verdict = "rejected";
    rep.reason = "fitted window exponent does not exceed d";
    return rep;
  }

  // Kernel anchors: argmax probes of the window scan first, then singular probes.
  std::vector<Anchor> kanchors;
  auto push = [&](const Anchor& a) {
    for (const auto& b : kanchors)
      if (b.t == a.t && b.x == a.x) return;
    if (static_cast<int>(kanchors.size()) < pol.max_kernel_probes) kanchors.push_back(a);
  };
  for (auto it = rep.scan.argmax.rbegin(); it != rep.scan.argmax.rend(); ++it) push(rep.probes[*it]);
  for (const auto& a : rep.probes) push(a);

  double a_cls = pol.kato_alpha.value_or(2.0 - 0.5 * (p - d));
  rep.alpha_used = a_cls;
  double gamma = 0.5 * (d + 2.0 - a_cls);
  bool decays = true;
  std::vector<TimeDirection> dirs{TimeDirection::Forward};
  if (pol.both_directions) dirs.push_back(TimeDirection::Backward);
  double Tmax = *std::max_element(pol.T_grid.begin(), pol.T_grid.end());
  for (double lam : pol.lambdas)
    for (TimeDirection dir : dirs) {
      DecaySeries s;
      s.lambda = lam;
      s.direction = dir;
      for (double T : pol.T_grid) {
        KernelIntegralSpec ks;
        ks.gamma = gamma;
        ks.lambda = lam;
        ks.direction = dir;
        ks.T = T;
        std::vector<Anchor> an = kanchors;
        if (dir == TimeDirection::Backward)
          for (auto& a : an) a.t = std::min(f.horizon(), a.t + Tmax);
        s.T.push_back(T);
        s.values.push_back(sup_probe(f, ks, an, pol.quad).value);
      }
      // Values ordered by decreasing T must decrease.
      std::vector<std::size_t> order(s.T.size());
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(), [&](auto i, auto j) { return s.T[i] > s.T[j]; });
      s.monotone = true;
      for (std::size_t k = 1; k < order.size(); ++k)
        if (!(s.values[order[k]] < s.values[order[k - 1]])) s.monotone = false;
      s.slope = decay_slope(s.T, s.values);
      if (!s.monotone || s.slope < pol.min_decay_slope) decays = false;
      rep.def11.push_back(std::move(s));
    }

  for (double T : pol.T_grid) {
    rep.nlambda_T.push_back(T);
    double v = std::numeric_limits<double>::quiet_NaN();
    if (p > d + 1.0) {
      try {
        v = n_lambda(f, T, 1.0, kanchors, pol.quad);
      } catch (const AccuracyError&) {
      }
    }
    rep.nlambda_values.push_back(v);
  }

  if (decays) {
    rep.verdict = "certified";
    rep.reason = "window exponent exceeds d and kernel integrals vanish as T -> 0";
  } else {
    rep.verdict = "inconclusive";
    rep.reason = "kernel integrals do not decay over the T grid";
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Window scaling bounds and the square-root class step

struct ScalingCheck {
  double p = 0.0;
  double M2 = 0.0;
  double worst_ratio = 0.0;  // max value / (M2 * bound shape)
  double slack = 2.0;
  bool pass = false;
  struct Row {
    std::size_t probe_id;
    double T, r, value, bound;
  };
  std::vector<Row> rows;
};

/// int_0^T int_{B(x,r)} |f| <= M2 T^{(p-d)/2} r^d for T <= r^2 and
/// <= M2 T r^{p-2} for T > r^2, with M2 fitted from the smallest window.
inline ScalingCheck window_scaling_check(const SpaceTimeField& f, double p, std::span<const Anchor> probes,
                                         std::span<const double> radii, std::span<const int> ks,
                                         double slack = 2.0, const WindowPolicy& pol = {}) {
  if (radii.empty() || ks.empty() || probes.empty()) throw ValidationError("window_scaling_check: empty grid");
  const double d = f.dim();
  ScalingCheck out;
  out.p = p;
  out.slack = slack;
  auto shape = [&](double T, double r) {
    return T <= r * r ? std::pow(T, 0.5 * (p - d)) * std::pow(r, d) : T * std::pow(r, p - 2.0);
  };
  double rmin = *std::min_element(radii.begin(), radii.end());
  for (const auto& a : probes)
    out.M2 = std::max(out.M2, window_integral(f, a.t, a.x, rmin, rmin * rmin, pol) / shape(rmin * rmin, rmin));
  for (std::size_t i = 0; i < probes.size(); ++i)
    for (double r : radii)
      for (int k : ks) {
        double T = std::ldexp(r * r, -2 * k);
        double v = window_integral(f, probes[i].t, probes[i].x, r, T, pol);
        double b = out.M2 * shape(T, r);
        out.rows.push_back({i, T, r, v, b});
        if (b > 0) out.worst_ratio = std::max(out.worst_ratio, v / b);
        else if (v > 0) out.worst_ratio = std::numeric_limits<double>::infinity();
      }
  out.pass = out.worst_ratio <= slack;
  return out;
}

struct SqrtClassCheck {
  double alpha = 0.0;  // |f|^2 is in K_{d, alpha}
  double beta = 0.0;   // f checked in K_{d, 1 - beta}
  std::vector<double> T;
  std::vector<double> lhs;    // sup over anchors of the integral for |f|
  std::vector<double> rhs;    // matching Cauchy-Schwarz bound
  bool bound_holds = false;
  bool decays = false;
  bool pass = false;
};

/// Cauchy-Schwarz step: |f|^2 in K_{d,alpha} gives f in K_{d,1-beta} for
/// beta in [0, (2 - alpha)/2). Uses beta = (2 - alpha)/4.
inline SqrtClassCheck sqrt_class_check(const SpaceTimeField& f, double alpha, std::span<const Anchor> anchors,
                                       std::span<const double> T_grid, double lambda = 1.0,
                                       const QuadraturePolicy& quad = {}) {
  if (!(alpha > 0 && alpha <= 2)) throw ValidationError("sqrt_class_check: 0 < alpha <= 2 violated");
  SqrtClassCheck out;
  out.alpha = alpha;
  out.beta = 0.25 * (2.0 - alpha);
  const double d = f.dim();
  SpaceTimeField f2 = squared(f);
  out.bound_holds = true;
  for (double T : T_grid) {
    double e = 0.5 * (2.0 * out.beta + alpha);
    double c2 = std::pow(2.0 * std::numbers::pi / lambda, 0.5 * d) * std::pow(T, 1.0 - e) / (1.0 - e);
    double lmax = 0.0, rmax = 0.0;
    for (const auto& a : anchors) {
      KernelIntegralSpec s;
      s.lambda = lambda;
      s.T = T;
      s.t = a.t;
      s.x = a.x;
      s.gamma = 0.5 * (d + 1.0 + out.beta);
      double l = kernel_integral(f, s, quad).value;
      s.gamma = 0.5 * (d + 2.0 - alpha);
      double r = std::sqrt(c2 * kernel_integral(f2, s, quad).value);
      if (l > r * (1.0 + 1e-2) + 1e-300) out.bound_holds = false;
      lmax = std::max(lmax, l);
      rmax = std::max(rmax, r);
    }
    out.T.push_back(T);
    out.lhs.push_back(lmax);
    out.rhs.push_back(rmax);
  }
  out.decays = true;
  std::vector<std::size_t> order(out.T.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto i, auto j) { return out.T[i] > out.T[j]; });
  for (std::size_t k = 1; k < order.size(); ++k)
    if (out.lhs[order[k]] > out.lhs[order[k - 1]]) out.decays = false;
  out.pass = out.bound_holds && out.decays;
  return out;
}

}  // namespace katosde
