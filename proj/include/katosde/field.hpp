#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "katosde/error.hpp"
#include "katosde/quadrature.hpp"

namespace katosde {

inline constexpr double kSingularEps = 1e-6;
/// Replacement magnitude for the singular sentinel.
inline constexpr double kCap = 1.0 / kSingularEps;

inline double singular_sentinel() { return std::numeric_limits<double>::infinity(); }

/// Applies the cap policy: infinities and values beyond the cap are clamped.
inline double apply_cap(double v, double cap = kCap) {
  if (std::isnan(v)) return v;
  return std::clamp(v, -cap, cap);
}

/// One factor of a product-structured scalar field, f(x) = prod_i g_i(x_i).
struct AxisFactor {
  std::function<double(double)> fn;
  std::vector<double> singular;     // integrable singularities
  std::vector<double> kinks;        // derivative jumps
  std::vector<SoftFeature> soft;
  // g is constant outside [flat_lo, flat_hi] when has_flat is set.
  bool has_flat = false;
  double flat_lo = 0.0, flat_hi = 0.0;
};

/// Time factor of a separable field; only consulted on [0, horizon].
struct TimeProfile {
  std::function<double(double)> fn;
  std::vector<double> singular;
};

/// Structural hints consumed by quadrature rules and probe generators.
struct FieldTraits {
  std::vector<std::vector<double>> axis_singular;  // per axis: hyperplanes x_i = c
  std::vector<std::vector<double>> point_singular;
  std::vector<std::vector<SoftFeature>> axis_soft;  // per axis
  std::vector<double> time_singular;
  std::vector<std::vector<double>> probe_points;
  double feature_scale = 0.0;  // uniform small scale (grids), 0 when absent
  bool stationary = false;     // general fields that do not depend on t
  bool constant = false;       // same value everywhere
};

class SpaceTimeField {
 public:
  using General = std::function<void(double, std::span<const double>, std::span<double>)>;
  using Spatial = std::function<double(std::span<const double>)>;

  SpaceTimeField() = default;

  static SpaceTimeField general(int dim, int range_dim, double horizon, General fn,
                                FieldTraits traits = {}) {
    SpaceTimeField f(dim, range_dim, horizon);
    f.r_->general = std::move(fn);
    f.r_->traits = std::move(traits);
    f.normalize_traits();
    return f;
  }

  /// Scalar field profile(t) * spatial(x).
  static SpaceTimeField scalar(int dim, double horizon, Spatial spatial,
                               std::optional<TimeProfile> profile = std::nullopt,
                               FieldTraits traits = {}) {
    SpaceTimeField f(dim, 1, horizon);
    f.r_->spatial = std::move(spatial);
    f.r_->profile = std::move(profile);
    f.r_->traits = std::move(traits);
    f.normalize_traits();
    return f;
  }

  /// Scalar field profile(t) * prod_i factors[i](x_i).
  static SpaceTimeField product(int dim, double horizon, std::vector<AxisFactor> factors,
                                std::optional<TimeProfile> profile = std::nullopt,
                                FieldTraits traits = {}) {
    if (static_cast<int>(factors.size()) != dim)
      throw ValidationError("product field: one factor per axis required");
    SpaceTimeField f(dim, 1, horizon);
    auto shared = std::make_shared<std::vector<AxisFactor>>(std::move(factors));
    f.r_->factors = shared;
    f.r_->spatial = [shared](std::span<const double> x) {
      double v = 1.0;
      bool inf = false;
      for (std::size_t i = 0; i < shared->size(); ++i) {
        double g = (*shared)[i].fn(x[i]);
        if (std::isinf(g)) inf = true;
        v *= g;
      }
      return inf ? singular_sentinel() : v;
    };
    f.r_->profile = std::move(profile);
    f.r_->traits = std::move(traits);
    for (int i = 0; i < dim; ++i) {
      auto& fac = (*shared)[i];
      auto& tr = f.r_->traits;
      tr.axis_singular.resize(dim);
      tr.axis_soft.resize(dim);
      tr.axis_singular[i].insert(tr.axis_singular[i].end(), fac.singular.begin(), fac.singular.end());
      tr.axis_soft[i].insert(tr.axis_soft[i].end(), fac.soft.begin(), fac.soft.end());
    }
    f.normalize_traits();
    return f;
  }

  int dim() const { return r_ ? r_->dim : 0; }
  int range_dim() const { return r_ ? r_->range : 0; }
  double horizon() const { return r_->horizon; }
  bool valid() const { return static_cast<bool>(r_); }

  bool is_general() const { return static_cast<bool>(r_->general); }
  bool time_independent() const {
    return r_->general ? r_->traits.stationary : !r_->profile;
  }
  bool separable() const { return !r_->general; }
  const std::optional<TimeProfile>& time_profile() const { return r_->profile; }
  const std::vector<AxisFactor>* factors() const { return r_->factors.get(); }
  const std::vector<double>& direction() const { return r_->direction; }
  double amplitude() const { return r_->amplitude; }
  const FieldTraits& traits() const { return r_->traits; }

  std::optional<double> theoretical_p() const { return r_->p; }
  const std::string& name() const { return r_->name; }
  /// Set for d = 1, where the theory is not stated.
  bool dimension_warning() const { return r_->dim == 1; }

  SpaceTimeField with_metadata(std::string name, std::optional<double> p) const {
    SpaceTimeField f = clone();
    f.r_->name = std::move(name);
    f.r_->p = p;
    return f;
  }
  SpaceTimeField with_traits(FieldTraits t) const {
    SpaceTimeField f = clone();
    f.r_->traits = std::move(t);
    f.normalize_traits();
    return f;
  }

  /// Time factor at t (1 for time-independent fields); 0 outside [0, T].
  double profile(double t) const {
    if (t < 0.0 || t > r_->horizon) return 0.0;
    return r_->profile ? r_->profile->fn(t) : 1.0;
  }

  /// |spatial part| for separable fields, including amplitude and direction norm.
  double spatial_magnitude(std::span<const double> x) const {
    return std::abs(r_->spatial(x)) * r_->amplitude * r_->direction_norm;
  }

  /// Raw evaluation. Singular points produce the sentinel (+inf) in some entry.
  void eval(double t, std::span<const double> x, std::span<double> out) const {
    if (t < 0.0 || t > r_->horizon) {
      std::fill(out.begin(), out.end(), 0.0);
      return;
    }
    if (r_->general) {
      r_->general(t, x, out);
      return;
    }
    double v = scalar_value(t, x);
    if (r_->direction.empty()) {
      out[0] = v;
      return;
    }
    for (std::size_t i = 0; i < r_->direction.size(); ++i) {
      double e = r_->direction[i];
      out[i] = std::isinf(v) ? (e == 0.0 ? 0.0 : std::copysign(v, e)) : v * e;
    }
  }

  std::vector<double> operator()(double t, std::span<const double> x) const {
    std::vector<double> out(range_dim());
    eval(t, x, out);
    return out;
  }

  /// Euclidean norm of the value; +inf at singular points.
  double magnitude(double t, std::span<const double> x) const {
    if (t < 0.0 || t > r_->horizon) return 0.0;
    if (!r_->general) {
      double v = scalar_value(t, x);
      return std::isinf(v) ? singular_sentinel() : std::abs(v) * r_->direction_norm;
    }
    double buf[16];
    std::span<double> out(buf, r_->range);
    r_->general(t, x, out);
    double s = 0.0;
    for (double v : out) {
      if (std::isinf(v)) return singular_sentinel();
      s += v * v;
    }
    return std::sqrt(s);
  }

  /// Magnitude with the cap policy applied.
  double capped_magnitude(double t, std::span<const double> x, double cap = kCap) const {
    return std::min(magnitude(t, x), cap);
  }

  /// Vector field amplitude * f * direction built from a scalar separable field.
  SpaceTimeField with_direction(std::vector<double> dir, double amplitude = 1.0) const {
    if (r_->general || range_dim() != 1)
      throw ValidationError("with_direction: needs a separable scalar field");
    if (static_cast<int>(dir.size()) != dim())
      throw ValidationError("with_direction: direction length must equal dim");
    SpaceTimeField f = clone();
    double n = 0.0;
    for (double v : dir) n += v * v;
    n = std::sqrt(n);
    if (!(n > 0)) throw ValidationError("with_direction: direction must be nonzero");
    std::string id = r_->name + "*(";
    for (std::size_t i = 0; i < dir.size(); ++i) {
      char buf[40];
      std::snprintf(buf, sizeof buf, "%s%.17g", i ? "," : "", dir[i] * amplitude);
      id += buf;
    }
    f.r_->name = id + ")";
    f.r_->direction = std::move(dir);
    f.r_->direction_norm = n;
    f.r_->amplitude = amplitude * r_->amplitude;
    f.r_->range = dim();
    return f;
  }

  /// Same structure with the scalar part replaced; used by squared() and mollify().
  SpaceTimeField rebuild_scalar(Spatial spatial, std::shared_ptr<std::vector<AxisFactor>> factors,
                                std::optional<TimeProfile> profile, FieldTraits traits) const {
    SpaceTimeField f = clone();
    f.r_->spatial = std::move(spatial);
    f.r_->factors = std::move(factors);
    f.r_->profile = std::move(profile);
    f.r_->traits = std::move(traits);
    f.normalize_traits();
    return f;
  }

  SpaceTimeField with_horizon(double horizon) const {
    SpaceTimeField f = clone();
    f.r_->horizon = horizon;
    return f;
  }

  /// Spatial probe points suggested by the singular set and hints.
  std::vector<std::vector<double>> singular_probes() const {
    const auto& tr = r_->traits;
    std::vector<std::vector<double>> out = tr.point_singular;
    for (const auto& p : tr.probe_points) out.push_back(p);
    // Intersections of singular hyperplanes, missing axes filled with 0.
    bool any = false;
    for (const auto& a : tr.axis_singular) any = any || !a.empty();
    if (any) {
      std::vector<std::vector<double>> combos{{}};
      for (int i = 0; i < dim(); ++i) {
        std::vector<double> coords = tr.axis_singular[i];
        if (coords.empty()) coords.push_back(0.0);
        std::vector<std::vector<double>> next;
        for (const auto& c : combos)
          for (double v : coords) {
            auto e = c;
            e.push_back(v);
            next.push_back(std::move(e));
          }
        combos = std::move(next);
        if (combos.size() > 64) break;
      }
      for (auto& c : combos)
        if (static_cast<int>(c.size()) == dim()) out.push_back(std::move(c));
    }
    return out;
  }

 private:
  // amplitude * profile(t) * spatial(x), with 0 * inf read as 0.
  double scalar_value(double t, std::span<const double> x) const {
    double s = r_->spatial(x);
    double p = profile(t);
    if (s == 0.0 || p == 0.0) return 0.0;
    if (std::isinf(s) || std::isinf(p)) return singular_sentinel();
    return s * p * r_->amplitude;
  }

  struct Repr {
    int dim = 0, range = 1;
    double horizon = 0.0;
    General general;
    Spatial spatial;
    std::shared_ptr<std::vector<AxisFactor>> factors;
    std::optional<TimeProfile> profile;
    std::vector<double> direction;
    double direction_norm = 1.0;
    double amplitude = 1.0;
    FieldTraits traits;
    std::optional<double> p;
    std::string name;
  };

  SpaceTimeField(int dim, int range, double horizon) : r_(std::make_shared<Repr>()) {
    if (dim < 1 || dim > 3) throw ValidationError("field: dim must be in {1,2,3}");
    if (range < 1 || range > 16) throw ValidationError("field: range_dim must be in [1,16]");
    if (!(horizon > 0)) throw ValidationError("field: horizon must be > 0");
    r_->dim = dim;
    r_->range = range;
    r_->horizon = horizon;
  }

  SpaceTimeField clone() const {
    SpaceTimeField f;
    f.r_ = std::make_shared<Repr>(*r_);
    return f;
  }

  void normalize_traits() {
    auto& tr = r_->traits;
    tr.axis_singular.resize(r_->dim);
    tr.axis_soft.resize(r_->dim);
    if (r_->profile)
      for (double s : r_->profile->singular)
        if (std::find(tr.time_singular.begin(), tr.time_singular.end(), s) == tr.time_singular.end())
          tr.time_singular.push_back(s);
    for (auto& a : tr.axis_singular) {
      std::sort(a.begin(), a.end());
      a.erase(std::unique(a.begin(), a.end()), a.end());
    }
  }

  std::shared_ptr<Repr> r_;
};

// ---------------------------------------------------------------------------
// Elementary fields

inline SpaceTimeField constant_field(int dim, double horizon, std::vector<double> value) {
  int m = static_cast<int>(value.size());
  std::string id = "constant(";
  for (int i = 0; i < m; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%.17g", i ? "," : "", value[i]);
    id += buf;
  }
  id += ")";
  FieldTraits tr;
  tr.stationary = true;
  tr.constant = true;
  return SpaceTimeField::general(dim, m, horizon,
                                 [value](double, std::span<const double>, std::span<double> out) {
                                   std::copy(value.begin(), value.end(), out.begin());
                                 },
                                 tr)
      .with_metadata(id, dim + 2.0);
}

inline SpaceTimeField zero_field(int dim, double horizon, int range_dim = 1) {
  return constant_field(dim, horizon, std::vector<double>(range_dim, 0.0));
}

/// amplitude * exp(-|x - center|^2 / (2 width^2)), scalar and time-independent.
inline SpaceTimeField gaussian_bump(int dim, double horizon, double amplitude,
                                    std::vector<double> center, double width) {
  if (static_cast<int>(center.size()) != dim) throw ValidationError("gaussian_bump: center length must equal dim");
  if (!(width > 0)) throw ValidationError("gaussian_bump: width > 0 violated");
  std::vector<AxisFactor> fac(dim);
  for (int i = 0; i < dim; ++i) {
    double c = center[i];
    double a = i == 0 ? amplitude : 1.0;
    fac[i].fn = [a, c, width](double y) { return a * std::exp(-(y - c) * (y - c) / (2 * width * width)); };
    fac[i].soft.push_back({c, width});
  }
  return SpaceTimeField::product(dim, horizon, std::move(fac)).with_metadata("gaussian_bump", dim + 2.0);
}

/// |f|^2 as a scalar field, keeping product structure when present.
inline SpaceTimeField squared(const SpaceTimeField& f) {
  FieldTraits tr = f.traits();
  if (f.is_general()) {
    int m = f.range_dim();
    auto g = SpaceTimeField::general(
        f.dim(), 1, f.horizon(),
        [f, m](double t, std::span<const double> x, std::span<double> out) {
          double buf[16];
          std::span<double> v(buf, m);
          f.eval(t, x, v);
          double s = 0.0;
          for (double e : v) s += e * e;
          out[0] = s;
        },
        tr);
    std::optional<double> p = f.theoretical_p();
    return g.with_metadata("squared(" + f.name() + ")", p);
  }
  double a2 = f.amplitude() * f.amplitude();
  double dn2 = 0.0;
  for (double v : f.direction()) dn2 += v * v;
  if (f.direction().empty()) dn2 = 1.0;
  double scale = a2 * dn2;
  std::optional<TimeProfile> prof;
  if (f.time_profile()) {
    auto base = *f.time_profile();
    prof = TimeProfile{[fn = base.fn](double t) {
                         double v = fn(t);
                         return v * v;
                       },
                       base.singular};
  }
  std::shared_ptr<std::vector<AxisFactor>> facs;
  SpaceTimeField::Spatial sp;
  if (f.factors()) {
    facs = std::make_shared<std::vector<AxisFactor>>(*f.factors());
    for (std::size_t i = 0; i < facs->size(); ++i) {
      auto& fac = (*facs)[i];
      double s = i == 0 ? scale : 1.0;
      fac.fn = [fn = fac.fn, s](double y) {
        double v = fn(y);
        return std::isinf(v) ? v : s * v * v;
      };
    }
    sp = [facs](std::span<const double> x) {
      double v = 1.0;
      bool inf = false;
      for (std::size_t i = 0; i < facs->size(); ++i) {
        double g = (*facs)[i].fn(x[i]);
        if (std::isinf(g)) inf = true;
        v *= g;
      }
      return inf ? singular_sentinel() : v;
    };
  } else {
    SpaceTimeField base = f;
    sp = [base, scale](std::span<const double> x) {
      double v = base.spatial_magnitude(x);
      return std::isinf(v) ? v : v * v;
    };
  }
  SpaceTimeField scalar =
      SpaceTimeField::scalar(f.dim(), f.horizon(), sp, prof, tr);
  if (facs) scalar = scalar.rebuild_scalar(sp, facs, prof, tr);
  return scalar.with_metadata("squared(" + f.name() + ")", f.theoretical_p());
}

// ---------------------------------------------------------------------------
// Example families

enum class ExampleFamily { PowerProduct, BallLattice, TimeSingular };

struct ExampleParams {
  std::vector<double> alphas;  // PowerProduct exponents
  double alpha = 0.0;          // BallLattice / TimeSingular exponent
  double min_radius = 1e-3;    // BallLattice truncation
  bool gaussian_tail = false;  // TimeSingular: g_i(x) = exp(-x^2) instead of 1
};

namespace detail {

inline AxisFactor truncated_power(double a) {
  AxisFactor f;
  f.fn = [a](double y) {
    double r = std::min(std::abs(y), 1.0);
    if (a == 0.0) return 1.0;
    if (r == 0.0) return a < 0 ? singular_sentinel() : 0.0;
    return std::pow(r, a);
  };
  if (a < 0) f.singular.push_back(0.0);
  else if (a > 0) f.kinks.push_back(0.0);
  if (a != 0.0) {
    f.kinks.push_back(-1.0);
    f.kinks.push_back(1.0);
  }
  f.has_flat = true;
  f.flat_lo = -1.0;
  f.flat_hi = 1.0;
  return f;
}

}  // namespace detail

/// Builds one of the reference singular fields. The attached exponent p is the
/// window-scaling exponent of |f|^2.
inline SpaceTimeField make_example(ExampleFamily family, int dim, double horizon,
                                   const ExampleParams& prm) {
  if (dim < 1 || dim > 3) throw ValidationError("make_example: dim must be in {1,2,3}");
  switch (family) {
    case ExampleFamily::PowerProduct: {
      if (static_cast<int>(prm.alphas.size()) != dim)
        throw ValidationError("power_product: alphas length must equal dim");
      double sum = 0.0;
      for (std::size_t i = 0; i < prm.alphas.size(); ++i) {
        if (!(prm.alphas[i] > -0.5))
          throw ValidationError("power_product: alpha_" + std::to_string(i + 1) + " > -1/2 violated");
        sum += prm.alphas[i];
      }
      if (!(sum > -1.0)) throw ValidationError("power_product: sum of alphas > -1 violated");
      std::vector<AxisFactor> fac;
      for (double a : prm.alphas) fac.push_back(detail::truncated_power(a));
      return SpaceTimeField::product(dim, horizon, std::move(fac))
          .with_metadata("power_product", dim + 2.0 + 2.0 * sum);
    }
    case ExampleFamily::BallLattice: {
      double a = prm.alpha;
      if (!(a > 0.0)) throw ValidationError("ball_lattice: alpha > 0 violated");
      if (!(a < 1.0 / dim)) throw ValidationError("ball_lattice: alpha < 1/d violated");
      if (!(prm.min_radius > 0)) throw ValidationError("ball_lattice: min_radius > 0 violated");
      std::vector<double> r, c, left;
      double acc = 0.0;
      for (int i = 1;; ++i) {
        double ri = std::pow(static_cast<double>(i), -1.0 / (dim * a));
        if (ri < prm.min_radius || i > 100000) break;
        r.push_back(ri);
        left.push_back(acc);
        c.push_back(acc + ri);
        acc += 2.0 * ri;
      }
      FieldTraits tr;
      for (std::size_t n = 0; n < c.size(); ++n) {
        std::vector<double> p(dim, 0.0);
        p[0] = c[n];
        tr.point_singular.push_back(p);
      }
      tr.feature_scale = r.back();
      auto rs = std::make_shared<std::vector<double>>(r);
      auto cs = std::make_shared<std::vector<double>>(c);
      auto ls = std::make_shared<std::vector<double>>(left);
      auto sp = [rs, cs, ls, a, dim](std::span<const double> x) {
        auto it = std::upper_bound(ls->begin(), ls->end(), x[0]);
        if (it == ls->begin()) return 0.0;
        std::size_t n = static_cast<std::size_t>(it - ls->begin()) - 1;
        double d2 = (x[0] - (*cs)[n]) * (x[0] - (*cs)[n]);
        for (int i = 1; i < dim; ++i) d2 += x[i] * x[i];
        double rn = (*rs)[n];
        if (d2 >= rn * rn) return 0.0;
        if (d2 == 0.0) return singular_sentinel();
        return std::pow(d2, 0.5 * (a - 1.0));
      };
      return SpaceTimeField::scalar(dim, horizon, sp, std::nullopt, tr)
          .with_metadata("ball_lattice", dim + 2.0 * a);
    }
    case ExampleFamily::TimeSingular: {
      double a = prm.alpha;
      if (!(a > -0.5)) throw ValidationError("time_singular: alpha > -1/2 violated");
      if (!(a <= -1.0 / (2.0 * dim))) throw ValidationError("time_singular: alpha <= -1/(2d) violated");
      std::vector<AxisFactor> fac;
      fac.push_back(detail::truncated_power(a));
      for (int i = 1; i < dim; ++i) {
        AxisFactor g;
        if (prm.gaussian_tail) {
          g.fn = [](double y) { return std::exp(-y * y); };
          g.soft.push_back({0.0, 1.0});
        } else {
          g.fn = [](double) { return 1.0; };
        }
        fac.push_back(g);
      }
      TimeProfile prof{[](double t) { return t > 0 ? std::pow(t, -0.25) : singular_sentinel(); }, {0.0}};
      return SpaceTimeField::product(dim, horizon, std::move(fac), prof)
          .with_metadata("time_singular", dim + 2.0 * a + 1.0);
    }
  }
  throw ValidationError("make_example: unknown family");
}

// ---------------------------------------------------------------------------
// Lattice-backed fields

/// Uniform space-time lattice over an axis-aligned box.
struct LatticeSpec {
  std::vector<double> lo, hi;  // per axis
  std::vector<int> n;          // nodes per axis (>= 2)
  double t0 = 0.0, t1 = 1.0;
  int time_steps = 0;          // 0: a single time slice, constant in time

  int dim() const { return static_cast<int>(n.size()); }
  std::size_t space_size() const {
    std::size_t s = 1;
    for (int k : n) s *= static_cast<std::size_t>(k);
    return s;
  }
  int time_nodes() const { return time_steps + 1; }
  double spacing(int axis) const { return (hi[axis] - lo[axis]) / (n[axis] - 1); }
  double dt() const { return time_steps > 0 ? (t1 - t0) / time_steps : 0.0; }
  double time_at(int k) const { return time_steps > 0 ? t0 + (t1 - t0) * k / time_steps : t0; }

  void validate() const {
    int d = dim();
    if (d < 1 || d > 3) throw ValidationError("lattice: dim must be in {1,2,3}");
    if (static_cast<int>(lo.size()) != d || static_cast<int>(hi.size()) != d)
      throw ValidationError("lattice: box bounds must match dim");
    for (int i = 0; i < d; ++i) {
      if (n[i] < 2) throw ValidationError("lattice: at least 2 nodes per axis");
      if (!(hi[i] > lo[i])) throw ValidationError("lattice: hi > lo violated");
    }
    if (time_steps < 0) throw ValidationError("lattice: time_steps >= 0 violated");
    if (time_steps > 0 && !(t1 > t0)) throw ValidationError("lattice: t1 > t0 violated");
  }

  /// Symmetric cube [-L, L]^d with n nodes per axis.
  static LatticeSpec cube(int d, double L, int n, double t0 = 0.0, double t1 = 1.0, int steps = 0) {
    LatticeSpec s;
    s.lo.assign(d, -L);
    s.hi.assign(d, L);
    s.n.assign(d, n);
    s.t0 = t0;
    s.t1 = t1;
    s.time_steps = steps;
    return s;
  }

  /// Coordinates of flat spatial index s (axis 0 slowest).
  void node(std::size_t s, std::span<double> x) const {
    for (int i = dim() - 1; i >= 0; --i) {
      std::size_t k = s % n[i];
      s /= n[i];
      x[i] = lo[i] + spacing(i) * static_cast<double>(k);
    }
  }
};

/// Lattice values with multilinear interpolation in space and linear in time.
/// Queries outside the box are clamped to the boundary.
class GridField {
 public:
  GridField() = default;
  GridField(LatticeSpec spec, int range_dim)
      : spec_(std::move(spec)), range_(range_dim),
        data_(spec_.space_size() * spec_.time_nodes() * range_dim, 0.0) {
    spec_.validate();
    if (range_dim < 1) throw ValidationError("grid: range_dim >= 1 violated");
  }

  const LatticeSpec& spec() const { return spec_; }
  int dim() const { return spec_.dim(); }
  int range_dim() const { return range_; }
  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  double& at(int k, std::size_t s, int c) { return data_[(k * spec_.space_size() + s) * range_ + c]; }
  double at(int k, std::size_t s, int c) const { return data_[(k * spec_.space_size() + s) * range_ + c]; }

  void eval(double t, std::span<const double> x, std::span<double> out) const {
    const int d = dim();
    int k0 = 0;
    double wt = 0.0;
    if (spec_.time_steps > 0) {
      double u = (t - spec_.t0) / spec_.dt();
      u = std::clamp(u, 0.0, static_cast<double>(spec_.time_steps));
      k0 = std::min(static_cast<int>(u), spec_.time_steps - 1);
      wt = u - k0;
    }
    std::size_t idx[3];
    double fr[3];
    for (int i = 0; i < d; ++i) {
      double u = (x[i] - spec_.lo[i]) / spec_.spacing(i);
      u = std::clamp(u, 0.0, static_cast<double>(spec_.n[i] - 1));
      int j = std::min(static_cast<int>(u), spec_.n[i] - 2);
      idx[i] = static_cast<std::size_t>(j);
      fr[i] = u - j;
    }
    std::fill(out.begin(), out.end(), 0.0);
    const int corners = 1 << d;
    for (int kk = 0; kk < (spec_.time_steps > 0 ? 2 : 1); ++kk) {
      double w_t = spec_.time_steps > 0 ? (kk ? wt : 1.0 - wt) : 1.0;
      if (w_t == 0.0) continue;
      for (int c = 0; c < corners; ++c) {
        double w = w_t;
        std::size_t s = 0;
        for (int i = 0; i < d; ++i) {
          int bit = (c >> i) & 1;
          w *= bit ? fr[i] : 1.0 - fr[i];
          s = s * spec_.n[i] + idx[i] + bit;
        }
        if (w == 0.0) continue;
        for (int m = 0; m < range_; ++m) out[m] += w * at(k0 + kk, s, m);
      }
    }
  }

  /// View as a SpaceTimeField on [0, t1] (constant in time for single-slice grids).
  SpaceTimeField as_field(double horizon = -1.0) const {
    auto self = std::make_shared<GridField>(*this);
    FieldTraits tr;
    double h = spec_.spacing(0);
    for (int i = 1; i < dim(); ++i) h = std::min(h, spec_.spacing(i));
    tr.feature_scale = h;
    tr.stationary = spec_.time_steps == 0;
    double T = horizon > 0 ? horizon : (spec_.time_steps > 0 ? spec_.t1 : 1.0);
    return SpaceTimeField::general(
        dim(), range_, T,
        [self](double t, std::span<const double> x, std::span<double> out) { self->eval(t, x, out); }, tr);
  }

 private:
  LatticeSpec spec_;
  int range_ = 1;
  std::vector<double> data_;
};

/// Samples a field on the lattice, replacing singular values with +-cap.
inline GridField sample_to_grid(const SpaceTimeField& f, const LatticeSpec& spec, double cap = kCap) {
  if (spec.dim() != f.dim()) throw ValidationError("sample_to_grid: lattice dim does not match field dim");
  GridField g(spec, f.range_dim());
  std::vector<double> x(spec.dim()), v(f.range_dim());
  for (int k = 0; k < spec.time_nodes(); ++k) {
    double t = spec.time_at(k);
    for (std::size_t s = 0; s < spec.space_size(); ++s) {
      spec.node(s, x);
      f.eval(t, x, v);
      for (int m = 0; m < f.range_dim(); ++m) {
        if (std::isnan(v[m])) throw NumericError("sample_to_grid: NaN value", t, x);
        g.at(k, s, m) = apply_cap(v[m], cap);
      }
    }
  }
  return g;
}

}  // namespace katosde
