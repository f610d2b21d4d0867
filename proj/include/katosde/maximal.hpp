#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "katosde/error.hpp"
#include "katosde/field.hpp"
#include "katosde/kato.hpp"
#include "katosde/parallel.hpp"

namespace katosde {

// Grid values are read as piecewise constant on dual cells: node k owns
// prod_i [x_k - h_i/2, x_k + h_i/2]. Ball averages are normalized by the
// measure of the part of the ball covered by the lattice cells.

struct MaximalPolicy {
  int radii_count = 32;
  double min_radius_fraction = 1.0 / 1024;  // smallest tested radius is R times this
  int mc_samples = 256;                      // per partial cell, d = 3
  std::uint64_t mc_seed = 0x6b61746fULL;
};

struct MaximalGrid {
  GridField base;
  double R = 0.0;
  GridField values;  // scalar, same lattice as base
  std::vector<double> radii;

  double at(double t, std::span<const double> x) const {
    double v[1];
    values.eval(t, x, v);
    return v[0];
  }
};

namespace detail {

/// int_a^b sqrt(r^2 - u^2) du for -r <= a <= b <= r.
inline double chord_primitive(double u, double r) {
  u = std::clamp(u, -r, r);
  return 0.5 * (u * std::sqrt(std::max(0.0, r * r - u * u)) + r * r * std::asin(u / r));
}

/// Area of the disk of radius r at the origin intersected with [x0,x1] x [y0,y1].
inline double disk_rect_area(double r, double x0, double x1, double y0, double y1) {
  double a = std::max(x0, -r), b = std::min(x1, r);
  if (!(b > a) || !(y1 > y0)) return 0.0;
  std::vector<double> br{a, b};
  for (double y : {y0, y1})
    if (std::abs(y) < r) {
      double u = std::sqrt(r * r - y * y);
      if (u > a && u < b) br.push_back(u);
      if (-u > a && -u < b) br.push_back(-u);
    }
  std::sort(br.begin(), br.end());
  double area = 0.0;
  for (std::size_t k = 0; k + 1 < br.size(); ++k) {
    double u0 = br[k], u1 = br[k + 1];
    if (!(u1 > u0)) continue;
    double m = 0.5 * (u0 + u1);
    double s = std::sqrt(std::max(0.0, r * r - m * m));
    double lo = std::max(y0, -s), hi = std::min(y1, s);
    if (!(hi > lo)) continue;
    double chord = chord_primitive(u1, r) - chord_primitive(u0, r);
    double upper = (y1 < s) ? y1 * (u1 - u0) : chord;
    double lower = (y0 > -s) ? y0 * (u1 - u0) : -chord;
    area += upper - lower;
  }
  return area;
}

struct StencilEntry {
  int off[3];
  double w;
};

inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Overlap of B(0, r) with every dual cell, as integer offsets.
inline std::vector<StencilEntry> ball_stencil(std::span<const double> h, double r, int radius_id,
                                              const MaximalPolicy& pol) {
  const int d = static_cast<int>(h.size());
  int m[3] = {0, 0, 0};
  for (int i = 0; i < d; ++i) m[i] = static_cast<int>(std::ceil(r / h[i] + 0.5));
  std::vector<StencilEntry> st;
  auto cell_lo = [&](int i, int k) { return (k - 0.5) * h[i]; };
  auto cell_hi = [&](int i, int k) { return (k + 0.5) * h[i]; };
  if (d == 1) {
    for (int k = -m[0]; k <= m[0]; ++k) {
      double w = std::min(cell_hi(0, k), r) - std::max(cell_lo(0, k), -r);
      if (w > 0) st.push_back({{k, 0, 0}, w});
    }
  } else if (d == 2) {
    for (int i = -m[0]; i <= m[0]; ++i)
      for (int j = -m[1]; j <= m[1]; ++j) {
        double w = disk_rect_area(r, cell_lo(0, i), cell_hi(0, i), cell_lo(1, j), cell_hi(1, j));
        if (w > 0) st.push_back({{i, j, 0}, w});
      }
  } else {
    for (int i = -m[0]; i <= m[0]; ++i)
      for (int j = -m[1]; j <= m[1]; ++j)
        for (int k = -m[2]; k <= m[2]; ++k) {
          int o[3] = {i, j, k};
          double near2 = 0.0, far2 = 0.0, vol = 1.0;
          for (int a = 0; a < 3; ++a) {
            double lo = cell_lo(a, o[a]), hi = cell_hi(a, o[a]);
            double n = lo > 0 ? lo : (hi < 0 ? -hi : 0.0);
            double f = std::max(std::abs(lo), std::abs(hi));
            near2 += n * n;
            far2 += f * f;
            vol *= hi - lo;
          }
          if (near2 >= r * r) continue;
          double w = vol;
          if (far2 > r * r) {
            std::uint64_t key = pol.mc_seed;
            for (int a = 0; a < 3; ++a) key = mix64(key ^ static_cast<std::uint64_t>(o[a] + (1 << 20)));
            key = mix64(key ^ static_cast<std::uint64_t>(radius_id));
            std::mt19937_64 rng(key);
            std::uniform_real_distribution<double> u(0.0, 1.0);
            int in = 0;
            for (int s = 0; s < pol.mc_samples; ++s) {
              double q = 0.0;
              for (int a = 0; a < 3; ++a) {
                double c = cell_lo(a, o[a]) + u(rng) * h[a];
                q += c * c;
              }
              if (q < r * r) ++in;
            }
            w = vol * in / pol.mc_samples;
          }
          if (w > 0) st.push_back({{i, j, k}, w});
        }
  }
  return st;
}

inline std::vector<double> geometric_radii(double R, int count, double min_fraction) {
  std::vector<double> r(count);
  for (int k = 0; k < count; ++k)
    r[k] = count == 1 ? R : R * std::pow(min_fraction, static_cast<double>(k) / (count - 1));
  return r;
}

}  // namespace detail

/// M_R |f| on the lattice of f: max over geometric radii of dual-cell ball averages,
/// together with the node value itself (the delta -> 0 limit).
inline MaximalGrid maximal(const GridField& f, double R, int radii_count = 32, const MaximalPolicy& pol_in = {}) {
  const auto& spec = f.spec();
  const int d = spec.dim();
  if (!(R > 0)) throw ValidationError("maximal: R > 0 violated");
  if (radii_count < 8) throw ValidationError("maximal: radii_count >= 8 violated");
  for (int i = 0; i < d; ++i)
    if (R > 0.5 * (spec.hi[i] - spec.lo[i]) * (1 + 1e-12))
      throw DomainError("maximal: R exceeds the box half-width");
  MaximalPolicy pol = pol_in;
  pol.radii_count = radii_count;

  MaximalGrid out;
  out.base = f;
  out.R = R;
  out.radii = detail::geometric_radii(R, radii_count, pol.min_radius_fraction);
  out.values = GridField(spec, 1);

  std::vector<double> h(d);
  for (int i = 0; i < d; ++i) h[i] = spec.spacing(i);
  std::vector<std::vector<detail::StencilEntry>> stencils(out.radii.size());
  parallel_for(out.radii.size(), [&](std::size_t k) {
    stencils[k] = detail::ball_stencil(h, out.radii[k], static_cast<int>(k), pol);
  });

  const std::size_t S = spec.space_size();
  int n[3] = {1, 1, 1};
  for (int i = 0; i < d; ++i) n[i] = spec.n[i];
  std::vector<double> mag(S);
  for (int k = 0; k < spec.time_nodes(); ++k) {
    for (std::size_t s = 0; s < S; ++s) {
      double acc = 0.0;
      for (int c = 0; c < f.range_dim(); ++c) acc += f.at(k, s, c) * f.at(k, s, c);
      mag[s] = std::sqrt(acc);
    }
    parallel_for(S, [&](std::size_t s) {
      int idx[3] = {0, 0, 0};
      std::size_t rem = s;
      for (int i = d - 1; i >= 0; --i) {
        idx[i] = static_cast<int>(rem % n[i]);
        rem /= n[i];
      }
      double best = mag[s];
      for (const auto& st : stencils) {
        double num = 0.0, den = 0.0;
        for (const auto& e : st) {
          std::size_t flat = 0;
          bool inside = true;
          for (int i = 0; i < d; ++i) {
            int j = idx[i] + e.off[i];
            if (j < 0 || j >= n[i]) {
              inside = false;
              break;
            }
            flat = flat * n[i] + j;
          }
          if (!inside) continue;
          num += e.w * mag[flat];
          den += e.w;
        }
        if (den > 0) best = std::max(best, num / den);
      }
      out.values.at(k, s, 0) = best;
    });
  }
  return out;
}

/// Samples f on the lattice and takes M_R.
inline MaximalGrid maximal(const SpaceTimeField& f, const LatticeSpec& spec, double R, int radii_count = 32,
                           const MaximalPolicy& pol = {}) {
  return maximal(sample_to_grid(f, spec), R, radii_count, pol);
}

// ---------------------------------------------------------------------------
// Pointwise gradient inequality

struct PointPair {
  std::vector<double> x, y;
};

struct GradientDifferenceResult {
  bool pass = false;
  std::size_t pairs = 0;
  std::size_t violations = 0;
  double worst_ratio = 0.0;  // max lhs / rhs over pairs with rhs > 0
};

/// Uniform pairs in the lattice box with |x - y| <= R.
inline std::vector<PointPair> random_pairs(const LatticeSpec& spec, double R, std::size_t count, std::uint64_t seed) {
  const int d = spec.dim();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<PointPair> out;
  out.reserve(count);
  while (out.size() < count) {
    PointPair p{std::vector<double>(d), std::vector<double>(d)};
    for (int i = 0; i < d; ++i) p.x[i] = spec.lo[i] + u(rng) * (spec.hi[i] - spec.lo[i]);
    // Offset uniform in the ball of radius R, rejected if it leaves the box.
    std::vector<double> z(d);
    double n2;
    do {
      n2 = 0.0;
      for (int i = 0; i < d; ++i) {
        z[i] = R * (2 * u(rng) - 1);
        n2 += z[i] * z[i];
      }
    } while (n2 > R * R);
    bool ok = true;
    for (int i = 0; i < d; ++i) {
      p.y[i] = p.x[i] + z[i];
      if (p.y[i] < spec.lo[i] || p.y[i] > spec.hi[i]) ok = false;
    }
    if (ok) out.push_back(std::move(p));
  }
  return out;
}

/// |f(x) - f(y)| <= 2^d |x - y| (M_R|grad f|(x) + M_R|grad f|(y)) at slice time t.
/// f and grad are read through their lattice interpolants.
inline GradientDifferenceResult gradient_difference_check(const GridField& f, const GridField& grad, double R, std::span<const PointPair> pairs,
                                   double t = 0.0, int radii_count = 32) {
  const int d = f.dim();
  if (grad.range_dim() != d) throw ValidationError("gradient_difference_check: gradient must have d components");
  for (const auto& p : pairs) {
    double r2 = 0.0;
    for (int i = 0; i < d; ++i) r2 += (p.x[i] - p.y[i]) * (p.x[i] - p.y[i]);
    if (std::sqrt(r2) > R * (1 + 1e-12)) throw DomainError("gradient_difference_check: pair with |x - y| > R");
  }
  MaximalGrid mg = maximal(grad, R, radii_count);
  GradientDifferenceResult res;
  res.pairs = pairs.size();
  std::vector<double> fx(f.range_dim()), fy(f.range_dim());
  const double c = std::ldexp(1.0, d);
  for (const auto& p : pairs) {
    f.eval(t, p.x, fx);
    f.eval(t, p.y, fy);
    double lhs = 0.0, dist2 = 0.0;
    for (int m = 0; m < f.range_dim(); ++m) lhs += (fx[m] - fy[m]) * (fx[m] - fy[m]);
    lhs = std::sqrt(lhs);
    for (int i = 0; i < d; ++i) dist2 += (p.x[i] - p.y[i]) * (p.x[i] - p.y[i]);
    double rhs = c * std::sqrt(dist2) * (mg.at(t, p.x) + mg.at(t, p.y));
    // Roundoff floor for lhs when both sides vanish.
    if (lhs > rhs + 1e-12 * (1.0 + std::abs(fx[0]))) ++res.violations;
    if (rhs > 0) res.worst_ratio = std::max(res.worst_ratio, lhs / rhs);
  }
  res.pass = res.violations == 0;
  return res;
}

// ---------------------------------------------------------------------------
// Window exponent of |M_R f|^2

struct MaximalScalingResult {
  double fitted_q = 0.0;
  double r2 = 0.0;
  bool degenerate = false;  // every window vanished
  bool pass = false;
  std::vector<double> radii, sup_values;
};

struct MaximalScalingPolicy {
  std::vector<double> radii{0.25, 0.125, 0.0625, 0.03125};
  std::vector<Anchor> probes;  // defaults to the lattice center and a 3^d ring at R/2
  double q_margin = 0.0;       // pass iff fitted_q > d + q_margin
  int radii_count = 32;
  WindowPolicy window{};
};

inline MaximalScalingResult maximal_scaling_check(const SpaceTimeField& f, const LatticeSpec& spec, double R,
                                                  const MaximalScalingPolicy& pol = {}) {
  const int d = spec.dim();
  MaximalGrid mg = maximal(f, spec, R, pol.radii_count);
  GridField sq(spec, 1);
  for (std::size_t k = 0; k < sq.data().size(); ++k) sq.data()[k] = mg.values.data()[k] * mg.values.data()[k];
  SpaceTimeField g = sq.as_field(f.horizon());

  std::vector<Anchor> probes = pol.probes;
  if (probes.empty()) {
    std::vector<double> c(d);
    for (int i = 0; i < d; ++i) c[i] = 0.5 * (spec.lo[i] + spec.hi[i]);
    int total = 1;
    for (int i = 0; i < d; ++i) total *= 3;
    for (int m = 0; m < total; ++m) {
      std::vector<double> x(d);
      int rem = m;
      for (int i = 0; i < d; ++i) {
        x[i] = c[i] + 0.5 * R * (rem % 3 - 1);
        rem /= 3;
      }
      probes.push_back({spec.t0, x});
    }
  }
  MaximalScalingResult res;
  WindowScan scan = window_scan(g, probes, pol.radii, pol.window);
  res.radii = scan.radii;
  res.sup_values = scan.sup_values;
  bool all_zero = std::all_of(scan.sup_values.begin(), scan.sup_values.end(), [](double v) { return v == 0.0; });
  if (all_zero) {
    res.degenerate = true;
    res.pass = true;
    return res;
  }
  ExponentFit fit = fit_exponent(scan.radii, scan.sup_values);
  res.fitted_q = fit.p;
  res.r2 = fit.r2;
  res.pass = fit.p > d + pol.q_margin;
  return res;
}

// ---------------------------------------------------------------------------
// L2 ratio

/// Lattice L2 norm of M_R f over lattice L2 norm of f, per the first time slice.
inline double maximal_l2_ratio(const MaximalGrid& mg) {
  const auto& f = mg.base;
  double num = 0.0, den = 0.0;
  for (std::size_t s = 0; s < f.spec().space_size(); ++s) {
    double v = mg.values.at(0, s, 0);
    num += v * v;
    for (int c = 0; c < f.range_dim(); ++c) den += f.at(0, s, c) * f.at(0, s, c);
  }
  if (den == 0.0) return 0.0;
  return std::sqrt(num / den);
}

}  // namespace katosde
