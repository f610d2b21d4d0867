#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "katosde/field.hpp"
#include "katosde/quadrature.hpp"

namespace katosde {

/// exp(-1/(1-s^2)) on (-1, 1), normalized to unit mass.
inline double bump1d(double s) {
  static const double norm = [] {
    GradingPolicy g;
    g.base_panels = 64;
    g.order = 12;
    Rule1D r = build_rule(-1.0, 1.0, {}, {}, {}, g);
    double z = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) {
      double u = r.nodes[i];
      z += r.weights[i] * std::exp(-1.0 / (1.0 - u * u));
    }
    return z;
  }();
  if (s <= -1.0 || s >= 1.0) return 0.0;
  return std::exp(-1.0 / (1.0 - s * s)) / norm;
}

/// Mollifier phi_n(t, x) = 2^{n(d+1)} phi(2^n t, 2^n x) where phi is a product
/// of bumps: time support (0, 1), space support the cube of half-width 1/sqrt(d).
struct Mollifier {
  int n = 0;
  int dim = 1;
  double time_width() const { return std::ldexp(1.0, -n); }
  double space_halfwidth() const { return std::ldexp(1.0, -n) / std::sqrt(static_cast<double>(dim)); }
  double time_kernel(double tau) const {
    double h = time_width();
    return 2.0 / h * bump1d(2.0 * tau / h - 1.0);
  }
  double space_kernel(double z) const {
    double w = space_halfwidth();
    return bump1d(z / w) / w;
  }
  double operator()(double tau, std::span<const double> z) const {
    double v = time_kernel(tau);
    for (double zi : z) v *= space_kernel(zi);
    return v;
  }
};

struct MollifyPolicy {
  GradingPolicy rule{8, 6, 14, 0.2, 8, 4096};
  double table_step_fraction = 1.0 / 16.0;  // table spacing / kernel half-width
  double table_range = 4.0;                 // used when a factor has no flat region
  std::size_t max_table = 400000;
};

namespace detail {

/// Smooth 1D function stored on a uniform table with Catmull-Rom interpolation.
struct Table1D {
  double lo = 0.0, step = 1.0;
  std::vector<double> v;
  double left = 0.0, right = 0.0;  // constant extension when flat
  bool flat = false;
  std::function<double(double)> fallback;

  double operator()(double x) const {
    double u = (x - lo) / step;
    double n = static_cast<double>(v.size() - 1);
    if (u < 0.0 || u > n) {
      if (flat) return u < 0.0 ? left : right;
      return fallback(x);
    }
    int i = std::min(static_cast<int>(u), static_cast<int>(v.size()) - 2);
    double f = u - i;
    double p0 = v[i > 0 ? i - 1 : 0], p1 = v[i], p2 = v[i + 1];
    double p3 = v[i + 2 < static_cast<int>(v.size()) ? i + 2 : i + 1];
    if (i == 0) p0 = 2 * p1 - p2;
    if (i + 2 >= static_cast<int>(v.size())) p3 = 2 * p2 - p1;
    return p1 + 0.5 * f * (p2 - p0 + f * (2 * p0 - 5 * p1 + 4 * p2 - p3 + f * (3 * (p1 - p2) + p3 - p0)));
  }
};

inline double convolve_factor(const AxisFactor& g, const Mollifier& m, double x, const GradingPolicy& pol) {
  double w = m.space_halfwidth();
  std::vector<double> hard, plain;
  std::vector<SoftFeature> soft;
  for (double c : g.singular) hard.push_back(x - c);
  for (double c : g.kinks) plain.push_back(x - c);
  for (const auto& s : g.soft) soft.push_back({x - s.center, s.width});
  Rule1D r = build_rule(-w, w, hard, plain, soft, pol);
  // Discrete kernel weights are renormalized so constants are reproduced exactly.
  double acc = 0.0, mass = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    double k = r.weights[i] * m.space_kernel(r.nodes[i]);
    acc += k * apply_cap(g.fn(x - r.nodes[i]));
    mass += k;
  }
  return acc / mass;
}

inline double convolve_profile(const TimeProfile& p, double horizon, const Mollifier& m, double t,
                               const GradingPolicy& pol) {
  double h = m.time_width();
  std::vector<double> hard, plain{t, t - horizon};
  for (double s : p.singular) hard.push_back(t - s);
  Rule1D r = build_rule(0.0, h, hard, plain, {}, pol);
  double acc = 0.0, mass = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    double k = r.weights[i] * m.time_kernel(r.nodes[i]);
    mass += k;
    double s = t - r.nodes[i];
    if (s < 0.0 || s > horizon) continue;
    acc += k * apply_cap(p.fn(s));
  }
  return acc / mass;
}

}  // namespace detail

/// Pointwise convolution phi_n * f by tensor quadrature over the mollifier
/// support. Works for every field; stationary fields skip the time integral.
inline void mollify_at(const SpaceTimeField& f, int n, double t, std::span<const double> x,
                       std::span<double> out, const MollifyPolicy& pol = {}) {
  const int d = f.dim(), m = f.range_dim();
  Mollifier mol{n, d};
  const double w = mol.space_halfwidth();
  const auto& tr = f.traits();
  std::vector<Rule1D> rules(d);
  for (int i = 0; i < d; ++i) {
    std::vector<double> hard, plain;
    std::vector<SoftFeature> soft;
    for (double c : tr.axis_singular[i]) hard.push_back(x[i] - c);
    for (const auto& p : tr.point_singular) hard.push_back(x[i] - p[i]);
    for (const auto& s : tr.axis_soft[i]) soft.push_back({x[i] - s.center, s.width});
    if (tr.feature_scale > 0) soft.push_back({0.0, std::max(tr.feature_scale, w / 64)});
    rules[i] = build_rule(-w, w, hard, plain, soft, pol.rule);
    double mass = 0.0;
    for (std::size_t k = 0; k < rules[i].size(); ++k) {
      rules[i].weights[k] *= mol.space_kernel(rules[i].nodes[k]);
      mass += rules[i].weights[k];
    }
    for (double& wk : rules[i].weights) wk /= mass;
  }
  Rule1D trule;
  if (f.time_independent()) {
    trule.nodes = {0.0};
    trule.weights = {1.0};
  } else {
    std::vector<double> hard, plain{t, t - f.horizon()};
    for (double s : tr.time_singular) hard.push_back(t - s);
    trule = build_rule(0.0, mol.time_width(), hard, plain, {}, pol.rule);
    double mass = 0.0;
    for (std::size_t k = 0; k < trule.size(); ++k) {
      trule.weights[k] *= mol.time_kernel(trule.nodes[k]);
      mass += trule.weights[k];
    }
    for (double& wk : trule.weights) wk /= mass;
  }
  std::fill(out.begin(), out.end(), 0.0);
  std::vector<double> y(d), v(m);
  std::vector<std::size_t> idx(d, 0);
  for (std::size_t a = 0; a < trule.size(); ++a) {
    double s = f.time_independent() ? std::clamp(t, 0.0, f.horizon()) : t - trule.nodes[a];
    if (s < 0.0 || s > f.horizon()) continue;
    std::fill(idx.begin(), idx.end(), 0);
    for (;;) {
      double wgt = trule.weights[a];
      for (int i = 0; i < d; ++i) {
        y[i] = x[i] - rules[i].nodes[idx[i]];
        wgt *= rules[i].weights[idx[i]];
      }
      f.eval(s, y, v);
      for (int c = 0; c < m; ++c) out[c] += wgt * apply_cap(v[c]);
      int i = d - 1;
      while (i >= 0 && ++idx[i] == rules[i].size()) idx[i--] = 0;
      if (i < 0) break;
    }
  }
}

/// b_n = phi_n * b. Product-structured fields are mollified axis by axis and
/// tabulated; other fields are evaluated by direct quadrature on demand.
inline SpaceTimeField mollify(const SpaceTimeField& f, int n, const MollifyPolicy& pol = {}) {
  if (n < 0 || n > 30) throw ValidationError("mollify: 0 <= n <= 30 violated");
  // The kernels have unit mass.
  if (f.traits().constant) return f.with_metadata("mollify(" + f.name() + "," + std::to_string(n) + ")", f.theoretical_p());
  Mollifier mol{n, f.dim()};
  const double w = mol.space_halfwidth();
  FieldTraits tr;
  tr.probe_points = f.singular_probes();
  tr.axis_soft.resize(f.dim());
  tr.stationary = f.time_independent();
  for (int i = 0; i < f.dim(); ++i) {
    for (double c : f.traits().axis_singular[i]) tr.axis_soft[i].push_back({c, w});
    for (const auto& p : f.traits().point_singular) tr.axis_soft[i].push_back({p[i], w});
    for (const auto& s : f.traits().axis_soft[i]) tr.axis_soft[i].push_back({s.center, std::max(s.width, w)});
  }
  if (f.traits().feature_scale > 0) tr.feature_scale = std::max(f.traits().feature_scale, w);
  std::string name = "mollify(" + f.name() + "," + std::to_string(n) + ")";

  if (f.factors()) {
    auto facs = std::make_shared<std::vector<AxisFactor>>();
    for (int i = 0; i < f.dim(); ++i) {
      const AxisFactor& g = (*f.factors())[i];
      auto tab = std::make_shared<detail::Table1D>();
      double lo, hi;
      if (g.has_flat) {
        lo = g.flat_lo - 1.5 * w;
        hi = g.flat_hi + 1.5 * w;
        tab->flat = true;
        tab->left = apply_cap(g.fn(g.flat_lo - 1.0));
        tab->right = apply_cap(g.fn(g.flat_hi + 1.0));
      } else {
        lo = -pol.table_range;
        hi = pol.table_range;
      }
      double step = w * pol.table_step_fraction;
      std::size_t count = static_cast<std::size_t>(std::ceil((hi - lo) / step)) + 1;
      if (count > pol.max_table) {
        count = pol.max_table;
        step = (hi - lo) / static_cast<double>(count - 1);
      }
      tab->lo = lo;
      tab->step = step;
      tab->v.resize(count);
      for (std::size_t k = 0; k < count; ++k)
        tab->v[k] = detail::convolve_factor(g, mol, lo + step * static_cast<double>(k), pol.rule);
      tab->fallback = [g, mol, rule = pol.rule](double x) { return detail::convolve_factor(g, mol, x, rule); };
      AxisFactor out;
      out.fn = [tab](double x) { return (*tab)(x); };
      for (double c : g.singular) out.soft.push_back({c, w});
      for (double c : g.kinks) out.soft.push_back({c, w});
      for (const auto& s : g.soft) out.soft.push_back({s.center, std::max(s.width, w)});
      facs->push_back(std::move(out));
    }
    std::optional<TimeProfile> prof;
    if (f.time_profile()) {
      TimeProfile base = *f.time_profile();
      double T = f.horizon();
      double h = mol.time_width();
      auto tab = std::make_shared<detail::Table1D>();
      double step = h * pol.table_step_fraction;
      std::size_t count = static_cast<std::size_t>(std::ceil(T / step)) + 1;
      if (count > pol.max_table) {
        count = pol.max_table;
        step = T / static_cast<double>(count - 1);
      }
      tab->lo = 0.0;
      tab->step = step;
      tab->v.resize(count);
      for (std::size_t k = 0; k < count; ++k)
        tab->v[k] = detail::convolve_profile(base, T, mol, step * static_cast<double>(k), pol.rule);
      tab->fallback = [base, T, mol, rule = pol.rule](double t) {
        return detail::convolve_profile(base, T, mol, t, rule);
      };
      prof = TimeProfile{[tab](double t) { return (*tab)(t); }, {}};
    }
    auto sp = [facs](std::span<const double> x) {
      double v = 1.0;
      for (std::size_t i = 0; i < facs->size(); ++i) v *= (*facs)[i].fn(x[i]);
      return v;
    };
    tr.axis_singular.assign(f.dim(), {});
    for (int i = 0; i < f.dim(); ++i) tr.axis_soft[i] = (*facs)[i].soft;
    return f.rebuild_scalar(sp, facs, prof, tr).with_metadata(name, f.theoretical_p());
  }

  SpaceTimeField base = f;
  auto g = SpaceTimeField::general(
      f.dim(), f.range_dim(), f.horizon(),
      [base, n, pol](double t, std::span<const double> x, std::span<double> out) {
        mollify_at(base, n, t, x, out, pol);
      },
      tr);
  return g.with_metadata(name, f.theoretical_p());
}

}  // namespace katosde
