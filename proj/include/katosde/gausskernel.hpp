#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "katosde/error.hpp"
#include "katosde/field.hpp"
#include "katosde/quadrature.hpp"

namespace katosde {

// ---------------------------------------------------------------------------
// Heat kernel of Brownian motion, q(t, x, y) = (2 pi t)^{-d/2} exp(-|x-y|^2 / 2t)

inline double heat_q(double t, std::span<const double> x, std::span<const double> y) {
  if (!(t > 0)) throw DomainError("heat kernel: t > 0 required");
  double r2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) r2 += (x[i] - y[i]) * (x[i] - y[i]);
  double d = static_cast<double>(x.size());
  return std::pow(2.0 * std::numbers::pi * t, -0.5 * d) * std::exp(-r2 / (2.0 * t));
}

/// Gradient in x: -(x - y)/t * q.
inline std::vector<double> heat_grad_q(double t, std::span<const double> x, std::span<const double> y) {
  double q = heat_q(t, x, y);
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = -(x[i] - y[i]) / t * q;
  return g;
}

/// Hessian in x, row-major d x d: ((x-y)(x-y)^T / t^2 - I / t) q.
inline std::vector<double> heat_hess_q(double t, std::span<const double> x, std::span<const double> y) {
  double q = heat_q(t, x, y);
  std::size_t d = x.size();
  std::vector<double> h(d * d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j)
      h[i * d + j] = ((x[i] - y[i]) * (x[j] - y[j]) / (t * t) - (i == j ? 1.0 / t : 0.0)) * q;
  return h;
}

/// Smallest C0 with |grad q(s,x,y)| <= C0 s^{-(d+1)/2} exp(-|x-y|^2 / 4s) for
/// all s, x, y. Found by maximizing rho exp(-rho^2/4) with golden sections.
inline double gradient_constant_c0(int d) {
  auto g = [](double r) { return r * std::exp(-r * r / 4.0); };
  double a = 0.0, b = 10.0;
  const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
  double c = b - phi * (b - a), e = a + phi * (b - a);
  for (int it = 0; it < 200 && b - a > 1e-14; ++it) {
    if (g(c) > g(e)) {
      b = e;
      e = c;
      c = b - phi * (b - a);
    } else {
      a = c;
      c = e;
      e = a + phi * (b - a);
    }
  }
  return std::pow(2.0 * std::numbers::pi, -0.5 * d) * g(0.5 * (a + b));
}

// ---------------------------------------------------------------------------
// Kato-type kernel integrals

enum class TimeDirection { Forward = 1, Backward = -1 };

/// int_0^T int s^{-gamma} exp(-lambda |x-y|^2 / 2s) |f(t +- s, y)| dy ds
struct KernelIntegralSpec {
  double gamma = 1.5;
  double lambda = 1.0;
  TimeDirection direction = TimeDirection::Forward;
  double T = 1.0;
  double t = 0.0;
  std::vector<double> x;
};

struct QuadraturePolicy {
  int time_levels = 20;           // max dyadic time cells
  int space_points_per_axis = 32; // uniform nodes per axis before local refinement
  double rel_tol = 1e-3;          // cell truncation threshold
  int time_order = 8;
  int min_levels = 4;
  double gaussian_range = 8.5;    // half-width of the space window in units of sigma
  GradingPolicy grading{};
  int max_panels_per_axis = 256;
};

struct KernelIntegralResult {
  double value = 0.0;
  int levels = 0;
  double tail = 0.0;
};

namespace detail {

inline Rule1D axis_rule(const SpaceTimeField& f, int axis, double lo, double hi, const QuadraturePolicy& pol) {
  const auto& tr = f.traits();
  std::vector<double> hard = tr.axis_singular[axis];
  for (const auto& p : tr.point_singular) hard.push_back(p[axis]);
  std::vector<SoftFeature> soft = tr.axis_soft[axis];
  GradingPolicy g = pol.grading;
  g.base_panels = std::max(1, pol.space_points_per_axis / g.order);
  if (tr.feature_scale > 0) {
    int need = static_cast<int>(std::ceil((hi - lo) / (2.0 * tr.feature_scale)));
    g.base_panels = std::clamp(need, g.base_panels, pol.max_panels_per_axis);
  }
  std::vector<double> plain;
  if (f.factors())
    for (double k : (*f.factors())[axis].kinks) plain.push_back(k);
  return build_rule(lo, hi, hard, plain, soft, g);
}

/// int exp(-lambda |x-y|^2 / 2s) |f(tau, y)| dy by tensor (or factorized) quadrature.
inline double gaussian_space_integral(const SpaceTimeField& f, double tau, double s, double lambda,
                                      std::span<const double> x, const QuadraturePolicy& pol) {
  const int d = f.dim();
  double prof = 1.0;
  if (f.separable()) {
    prof = f.profile(tau);
    if (prof == 0.0) return 0.0;
    prof = std::min(std::abs(prof), kCap);
  }
  double sigma = std::sqrt(s / lambda);
  double R = pol.gaussian_range * sigma;
  std::vector<Rule1D> rules(d);
  for (int i = 0; i < d; ++i) {
    rules[i] = axis_rule(f, i, x[i] - R, x[i] + R, pol);
    for (std::size_t k = 0; k < rules[i].size(); ++k) {
      double z = rules[i].nodes[k] - x[i];
      rules[i].weights[k] *= std::exp(-lambda * z * z / (2.0 * s));
    }
  }
  if (f.factors() && f.separable()) {
    double scale = f.amplitude();
    double dn = 0.0;
    for (double e : f.direction()) dn += e * e;
    scale *= f.direction().empty() ? 1.0 : std::sqrt(dn);
    double v = prof * scale;
    for (int i = 0; i < d; ++i) {
      const auto& g = (*f.factors())[i];
      double acc = 0.0;
      for (std::size_t k = 0; k < rules[i].size(); ++k)
        acc += rules[i].weights[k] * std::min(std::abs(g.fn(rules[i].nodes[k])), kCap);
      v *= acc;
    }
    return v;
  }
  std::vector<double> y(d);
  std::vector<std::size_t> idx(d, 0);
  double acc = 0.0;
  for (;;) {
    double w = 1.0;
    for (int i = 0; i < d; ++i) {
      y[i] = rules[i].nodes[idx[i]];
      w *= rules[i].weights[idx[i]];
    }
    double v = f.separable() ? std::min(f.spatial_magnitude(y), kCap) * prof : f.capped_magnitude(tau, y);
    acc += w * v;
    int i = d - 1;
    while (i >= 0 && ++idx[i] == rules[i].size()) idx[i--] = 0;
    if (i < 0) break;
  }
  return acc;
}

}  // namespace detail

/// Dyadic cells (T 2^{-k-1}, T 2^{-k}] with a Gauss rule per cell. Refinement
/// stops once a cell adds less than rel_tol of the running total; the
/// remaining cells are then summed as a geometric tail.
inline KernelIntegralResult kernel_integral(const SpaceTimeField& f, const KernelIntegralSpec& spec,
                                            const QuadraturePolicy& pol = {}) {
  if (static_cast<int>(spec.x.size()) != f.dim()) throw ValidationError("kernel_integral: anchor dim mismatch");
  if (!(spec.T > 0)) throw ValidationError("kernel_integral: T > 0 violated");
  if (!(spec.lambda > 0)) throw ValidationError("kernel_integral: lambda > 0 violated");
  const double sgn = spec.direction == TimeDirection::Forward ? 1.0 : -1.0;
  std::vector<double> hard, plain;
  for (double ts : f.traits().time_singular) hard.push_back(sgn * (ts - spec.t));
  plain.push_back(sgn * (f.horizon() - spec.t));
  plain.push_back(-sgn * spec.t);
  GradingPolicy tg = pol.grading;
  tg.order = pol.time_order;
  tg.base_panels = 1;

  KernelIntegralResult res;
  double total = 0.0, prev_cell = 0.0, prev_rho = -1.0, rho = -1.0;
  int zero_run = 0;
  for (int k = 0; k < pol.time_levels; ++k) {
    double hi = std::ldexp(spec.T, -k), lo = 0.5 * hi;
    Rule1D r = build_rule(lo, hi, hard, plain, {}, tg);
    double cell = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) {
      double s = r.nodes[i];
      double tau = spec.t + sgn * s;
      if (tau < 0.0 || tau > f.horizon()) continue;
      cell += r.weights[i] * std::pow(s, -spec.gamma) *
              detail::gaussian_space_integral(f, tau, s, spec.lambda, spec.x, pol);
    }
    total += cell;
    res.levels = k + 1;
    if (cell == 0.0) {
      if (total > 0.0 || ++zero_run >= 8) break;
      continue;
    }
    zero_run = 0;
    prev_rho = rho;
    rho = prev_cell > 0.0 ? cell / prev_cell : -1.0;
    prev_cell = cell;
    if (k + 1 >= pol.min_levels && cell < pol.rel_tol * total) {
      if (rho >= 0.0 && rho < 1.0) res.tail = cell * rho / (1.0 - rho);
      res.value = total + res.tail;
      return res;
    }
  }
  if (total == 0.0) {
    res.value = 0.0;
    return res;
  }
  if (rho >= 0.0 && rho < 0.98 && prev_rho >= 0.0 && std::abs(rho - prev_rho) < 0.02) {
    res.tail = prev_cell * rho / (1.0 - rho);
    res.value = total + res.tail;
    return res;
  }
  throw AccuracyError("kernel_integral: refinement did not settle (cell ratio " + std::to_string(rho) + ")",
                      total, total - prev_cell);
}

struct ProbeResult {
  double value = 0.0;
  std::size_t index = 0;
};

struct Anchor {
  double t = 0.0;
  std::vector<double> x;
};

/// Largest kernel integral over a set of anchors (first index wins ties).
inline ProbeResult sup_probe(const SpaceTimeField& f, KernelIntegralSpec spec, std::span<const Anchor> anchors,
                             const QuadraturePolicy& pol = {}) {
  ProbeResult best;
  best.value = -1.0;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    spec.t = anchors[i].t;
    spec.x = anchors[i].x;
    double v = kernel_integral(f, spec, pol).value;
    if (v > best.value) {
      best.value = v;
      best.index = i;
    }
  }
  if (anchors.empty()) best.value = 0.0;
  return best;
}

/// N^lambda_h(T) = sup int_t^{t+T} int (s-t)^{-(d+1)/2} exp(-lambda |x-y|^2 / 4(s-t)) |h| dy ds
/// evaluated over the given anchors.
inline double n_lambda(const SpaceTimeField& h, double T, double lambda, std::span<const Anchor> anchors,
                       const QuadraturePolicy& pol = {}) {
  KernelIntegralSpec s;
  s.gamma = 0.5 * (h.dim() + 1);
  s.lambda = 0.5 * lambda;
  s.T = T;
  s.direction = TimeDirection::Forward;
  return sup_probe(h, s, anchors, pol).value;
}

/// Default anchors: singular-set points, a lattice at three scales and the
/// origin, all at the given times.
inline std::vector<Anchor> default_anchors(const SpaceTimeField& f, std::span<const double> times,
                                           std::span<const double> scales = {}) {
  std::vector<double> sc(scales.begin(), scales.end());
  if (sc.empty()) sc = {0.1, 0.3, 1.0};
  std::vector<std::vector<double>> pts = f.singular_probes();
  const int d = f.dim();
  pts.push_back(std::vector<double>(d, 0.0));
  for (double s : sc) {
    int n = 1;
    for (int i = 0; i < d; ++i) n *= 3;
    for (int c = 0; c < n; ++c) {
      std::vector<double> p(d);
      int r = c;
      for (int i = 0; i < d; ++i) {
        p[i] = s * static_cast<double>(r % 3 - 1);
        r /= 3;
      }
      pts.push_back(p);
    }
  }
  std::vector<std::vector<double>> uniq;
  for (auto& p : pts) {
    bool dup = false;
    for (auto& q : uniq) {
      double m = 0.0;
      for (int i = 0; i < d; ++i) m = std::max(m, std::abs(p[i] - q[i]));
      if (m < 1e-12) dup = true;
    }
    if (!dup) uniq.push_back(p);
  }
  std::vector<Anchor> out;
  for (double t : times)
    for (auto& p : uniq) out.push_back({t, p});
  return out;
}

}  // namespace katosde
