#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "katosde/error.hpp"

namespace katosde {

struct Rule1D {
  std::vector<double> nodes;
  std::vector<double> weights;
  std::size_t size() const { return nodes.size(); }
};

namespace detail {

inline Rule1D compute_gauss_legendre(int n) {
  Rule1D r;
  r.nodes.resize(n);
  r.weights.resize(n);
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double z = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = 0.0;
      for (int k = 1; k <= n; ++k) {
        double p2 = p1;
        p1 = p0;
        p0 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p2) / k;
      }
      dp = n * (z * p0 - p1) / (z * z - 1.0);
      double dz = p0 / dp;
      z -= dz;
      if (std::abs(dz) < 1e-16) break;
    }
    double w = 2.0 / ((1.0 - z * z) * dp * dp);
    r.nodes[i] = -z;
    r.nodes[n - 1 - i] = z;
    r.weights[i] = w;
    r.weights[n - 1 - i] = w;
  }
  return r;
}

}  // namespace detail

inline constexpr int kMaxGaussOrder = 48;

/// Gauss-Legendre rule on [-1, 1].
inline const Rule1D& gauss_legendre(int n) {
  static const auto table = [] {
    std::array<Rule1D, kMaxGaussOrder + 1> t;
    for (int k = 1; k <= kMaxGaussOrder; ++k) t[k] = detail::compute_gauss_legendre(k);
    return t;
  }();
  if (n < 1 || n > kMaxGaussOrder) throw ValidationError("gauss_legendre: order out of range");
  return table[n];
}

/// Append the n-point Gauss rule mapped to [a, b].
inline void append_panel(Rule1D& out, double a, double b, int n) {
  const Rule1D& g = gauss_legendre(n);
  double half = 0.5 * (b - a), mid = 0.5 * (a + b);
  for (std::size_t i = 0; i < g.size(); ++i) {
    out.nodes.push_back(mid + half * g.nodes[i]);
    out.weights.push_back(half * g.weights[i]);
  }
}

/// Region of rapid but smooth variation; gets locally refined panels.
struct SoftFeature {
  double center;
  double width;
};

struct GradingPolicy {
  int order = 6;          // Gauss points on ordinary panels
  int graded_order = 5;   // Gauss points on geometrically graded panels
  int levels = 14;        // geometric levels toward a hard breakpoint
  double ratio = 0.2;
  int base_panels = 4;    // uniform panels over the whole interval
  int max_panels = 4096;
};

/// Composite Gauss rule on [lo, hi]. Hard breakpoints are integrable
/// singularities and get geometric grading from both sides; plain cuts are
/// jump locations; soft features get panels of half their width nearby.
inline Rule1D build_rule(double lo, double hi, std::span<const double> hard,
                         std::span<const double> plain, std::span<const SoftFeature> soft,
                         const GradingPolicy& g) {
  Rule1D out;
  if (!(hi > lo)) return out;
  const double len = hi - lo;
  const double eps = 1e-13 * std::max(1.0, std::max(std::abs(lo), std::abs(hi)));
  struct Cut {
    double x;
    bool hard;
  };
  std::vector<Cut> cuts;
  cuts.push_back({lo, false});
  cuts.push_back({hi, false});
  for (int k = 1; k < g.base_panels; ++k) cuts.push_back({lo + len * k / g.base_panels, false});
  for (double h : hard)
    if (h > lo - eps && h < hi + eps) cuts.push_back({std::clamp(h, lo, hi), true});
  for (double p : plain)
    if (p > lo && p < hi) cuts.push_back({p, false});
  for (const SoftFeature& s : soft) {
    if (!(s.width > 0)) continue;
    double step = 0.5 * s.width;
    double a = std::max(lo, s.center - 8.0 * s.width), b = std::min(hi, s.center + 8.0 * s.width);
    if (a >= b) continue;
    int n = static_cast<int>(std::min<double>(std::ceil((b - a) / step), g.max_panels));
    for (int k = 0; k <= n; ++k) cuts.push_back({a + (b - a) * k / n, false});
  }
  std::sort(cuts.begin(), cuts.end(), [](const Cut& a, const Cut& b) { return a.x < b.x; });
  std::vector<Cut> merged;
  for (const Cut& c : cuts) {
    if (!merged.empty() && c.x - merged.back().x <= eps) {
      merged.back().hard = merged.back().hard || c.hard;
    } else {
      merged.push_back(c);
    }
  }
  auto graded = [&](double a, double b, bool toward_a) {
    double w = b - a;
    double f = 1.0;
    std::vector<double> pts;
    for (int k = 0; k <= g.levels; ++k) {
      pts.push_back(f);
      f *= g.ratio;
    }
    pts.push_back(0.0);
    // pts descends from 1 to 0 as fractions of the distance to the singular end.
    for (std::size_t k = pts.size() - 1; k > 0; --k) {
      double f0 = pts[k], f1 = pts[k - 1];
      double p0 = toward_a ? a + w * f0 : b - w * f1;
      double p1 = toward_a ? a + w * f1 : b - w * f0;
      append_panel(out, p0, p1, g.graded_order);
    }
  };
  for (std::size_t i = 0; i + 1 < merged.size(); ++i) {
    double a = merged[i].x, b = merged[i + 1].x;
    bool ha = merged[i].hard, hb = merged[i + 1].hard;
    if (ha && hb) {
      double m = 0.5 * (a + b);
      graded(a, m, true);
      graded(m, b, false);
    } else if (ha) {
      graded(a, b, true);
    } else if (hb) {
      graded(a, b, false);
    } else {
      append_panel(out, a, b, g.order);
    }
  }
  return out;
}

/// Pairwise summation; the tree shape depends only on the length.
inline double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 8) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  std::size_t h = v.size() / 2;
  return pairwise_sum(v.subspan(0, h)) + pairwise_sum(v.subspan(h));
}

/// Standard normal cdf.
inline double norm_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

}  // namespace katosde
