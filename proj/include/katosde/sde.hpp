#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "katosde/error.hpp"
#include "katosde/field.hpp"
#include "katosde/mollify.hpp"
#include "katosde/parallel.hpp"

namespace katosde {

// ---------------------------------------------------------------------------
// Noise and statistics

namespace detail {

inline std::uint64_t splitmix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline double to_unit(std::uint64_t z) { return (static_cast<double>(z >> 11) + 0.5) * 0x1.0p-53; }

}  // namespace detail

/// Standard normal keyed by (seed, path, step, coordinate); no state, so any
/// subset of paths or steps can be regenerated.
inline double keyed_normal(std::uint64_t seed, std::uint64_t path, std::uint64_t step, std::uint64_t coord) {
  std::uint64_t k = detail::splitmix(seed);
  k = detail::splitmix(k ^ path);
  k = detail::splitmix(k ^ (step * 0x100000001b3ULL + coord));
  double u1 = detail::to_unit(k), u2 = detail::to_unit(detail::splitmix(k));
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

struct MeanSe {
  double mean = 0.0, stderr_ = 0.0;
  std::size_t n = 0;
};

inline MeanSe mean_se(std::span<const double> v) {
  MeanSe r;
  r.n = v.size();
  if (v.empty()) return r;
  r.mean = pairwise_sum(v) / v.size();
  if (v.size() > 1) {
    std::vector<double> sq(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) sq[i] = (v[i] - r.mean) * (v[i] - r.mean);
    r.stderr_ = std::sqrt(pairwise_sum(sq) / (v.size() - 1) / v.size());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Euler-Maruyama ensembles

struct SimulatePolicy {
  bool keep_states = true;
  bool keep_increments = true;
  double cap = kCap;
};

struct PathEnsemble {
  int dim = 0;
  std::size_t n_paths = 0;
  int n_steps = 0;
  double T = 0.0, dt = 0.0;
  std::vector<double> start;
  std::uint64_t seed = 0;
  std::string drift_id;
  SpaceTimeField drift;
  double cap = kCap;
  std::vector<double> increments;  // [path][step][d], when kept
  std::vector<double> states;      // [path][step 0..n][d], when kept
  std::vector<double> final_states;  // [path][d], always

  double time_at(int k) const { return k * dt; }
  bool has_states() const { return !states.empty(); }

  void increment(std::size_t p, int k, std::span<double> dw) const {
    if (!increments.empty()) {
      for (int i = 0; i < dim; ++i) dw[i] = increments[(p * n_steps + k) * dim + i];
      return;
    }
    double sq = std::sqrt(dt);
    for (int i = 0; i < dim; ++i) dw[i] = sq * keyed_normal(seed, p, k, i);
  }

  /// Calls fn(k, t_k, X_k, dW_k) for k = 0..n-1 and fn(n, T, X_n, {}) at the end.
  template <class Fn>
  void replay(std::size_t p, Fn&& fn) const {
    std::vector<double> x(start), dw(dim), b(dim);
    if (has_states()) {
      for (int k = 0; k <= n_steps; ++k) {
        std::span<const double> xs(states.data() + (p * (n_steps + 1) + k) * dim, dim);
        if (k < n_steps) increment(p, k, dw);
        fn(k, time_at(k), xs, k < n_steps ? std::span<const double>(dw) : std::span<const double>());
      }
      return;
    }
    for (int k = 0; k < n_steps; ++k) {
      increment(p, k, dw);
      fn(k, time_at(k), std::span<const double>(x), std::span<const double>(dw));
      drift.eval(time_at(k), x, b);
      for (int i = 0; i < dim; ++i) x[i] += dw[i] + apply_cap(b[i], cap) * dt;
    }
    fn(n_steps, T, std::span<const double>(x), std::span<const double>());
  }
};

namespace detail {

inline void check_sim_args(const SpaceTimeField& b, std::span<const double> x0, double T, int n_steps,
                           std::size_t n_paths) {
  if (b.range_dim() != b.dim()) throw ValidationError("simulate: drift must have d components");
  if (static_cast<int>(x0.size()) != b.dim()) throw ValidationError("simulate: start point dimension mismatch");
  if (!(T > 0) || T > b.horizon() + 1e-12) throw ValidationError("simulate: 0 < T <= horizon violated");
  if (n_steps < 64) throw ValidationError("simulate: n_steps >= 64 violated");
  if (n_paths < 1) throw ValidationError("simulate: n_paths >= 1 violated");
}

inline void euler_step(const SpaceTimeField& b, double t, std::span<double> x, std::span<const double> dw, double dt,
                       double cap, std::span<double> buf, std::size_t path, int step) {
  b.eval(t, x, buf);
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] += dw[i] + apply_cap(buf[i], cap) * dt;
    if (!std::isfinite(x[i]))
      throw NumericError("simulate: non-finite state at path " + std::to_string(path) + ", step " +
                             std::to_string(step),
                         t, std::vector<double>(x.begin(), x.end()));
  }
}

}  // namespace detail

inline PathEnsemble simulate(const SpaceTimeField& b, std::span<const double> x0, double T, int n_steps,
                             std::size_t n_paths, std::uint64_t seed, const SimulatePolicy& pol = {}) {
  detail::check_sim_args(b, x0, T, n_steps, n_paths);
  const int d = b.dim();
  PathEnsemble e;
  e.dim = d;
  e.n_paths = n_paths;
  e.n_steps = n_steps;
  e.T = T;
  e.dt = T / n_steps;
  e.start.assign(x0.begin(), x0.end());
  e.seed = seed;
  e.drift_id = b.name();
  e.drift = b;
  e.cap = pol.cap;
  if (pol.keep_increments) e.increments.resize(n_paths * n_steps * d);
  if (pol.keep_states) e.states.resize(n_paths * (n_steps + 1) * d);
  e.final_states.resize(n_paths * d);
  const double sq = std::sqrt(e.dt);
  parallel_for(n_paths, [&](std::size_t p) {
    std::vector<double> x(x0.begin(), x0.end()), dw(d), buf(d);
    for (int k = 0; k < n_steps; ++k) {
      if (pol.keep_states) std::copy(x.begin(), x.end(), e.states.begin() + (p * (n_steps + 1) + k) * d);
      for (int i = 0; i < d; ++i) dw[i] = sq * keyed_normal(seed, p, k, i);
      if (pol.keep_increments) std::copy(dw.begin(), dw.end(), e.increments.begin() + (p * n_steps + k) * d);
      detail::euler_step(b, k * e.dt, x, dw, e.dt, pol.cap, buf, p, k);
    }
    if (pol.keep_states) std::copy(x.begin(), x.end(), e.states.begin() + (p * (n_steps + 1) + n_steps) * d);
    std::copy(x.begin(), x.end(), e.final_states.begin() + p * d);
  });
  return e;
}

/// X at the grid time nearest t, per path, as [path][d].
inline std::vector<double> states_at(const PathEnsemble& e, double t) {
  if (t < 0 || t > e.T + 1e-12) throw DomainError("states_at: t outside [0, T]");
  int k = static_cast<int>(std::lround(t / e.dt));
  std::vector<double> out(e.n_paths * e.dim);
  if (k == e.n_steps) return e.final_states;
  parallel_for(e.n_paths, [&](std::size_t p) {
    e.replay(p, [&](int j, double, std::span<const double> x, std::span<const double>) {
      if (j == k) std::copy(x.begin(), x.end(), out.begin() + p * e.dim);
    });
  });
  return out;
}

// ---------------------------------------------------------------------------
// Common-noise coupling

struct CouplingEntry {
  int n = 0, m = 0;  // mollification levels; -1 means the capped raw field
  double mean = 0.0, stderr_ = 0.0;
};

struct CouplingReport {
  std::vector<CouplingEntry> entries;
  bool monotone = false;
  bool all_zero = false;  // every pair couples to the same path, e.g. b = 0
};

/// E[max_k |X_k - Y_k|^2] for two drifts on identical increments.
inline CouplingEntry coupled_pair(const SpaceTimeField& b1, const SpaceTimeField& b2, std::span<const double> x0,
                                  double T, int n_steps, std::size_t n_paths, std::uint64_t seed,
                                  double cap = kCap) {
  detail::check_sim_args(b1, x0, T, n_steps, n_paths);
  detail::check_sim_args(b2, x0, T, n_steps, n_paths);
  if (b1.dim() != b2.dim()) throw ValidationError("coupled_pair: dimensions differ");
  if (b1.horizon() != b2.horizon()) throw ValidationError("coupled_pair: horizons differ");
  const int d = b1.dim();
  const double dt = T / n_steps, sq = std::sqrt(dt);
  std::vector<double> sup(n_paths, 0.0);
  parallel_for(n_paths, [&](std::size_t p) {
    std::vector<double> x(x0.begin(), x0.end()), y(x), dw(d), buf(d);
    double best = 0.0;
    for (int k = 0; k < n_steps; ++k) {
      for (int i = 0; i < d; ++i) dw[i] = sq * keyed_normal(seed, p, k, i);
      detail::euler_step(b1, k * dt, x, dw, dt, cap, buf, p, k);
      detail::euler_step(b2, k * dt, y, dw, dt, cap, buf, p, k);
      double r2 = 0.0;
      for (int i = 0; i < d; ++i) r2 += (x[i] - y[i]) * (x[i] - y[i]);
      best = std::max(best, r2);
    }
    sup[p] = best;
  });
  MeanSe ms = mean_se(sup);
  return {0, 0, ms.mean, ms.stderr_};
}

/// Ladder of (n, m) mollification pairs of b; m = -1 couples with b itself.
inline CouplingReport coupling_ladder(const SpaceTimeField& b, std::span<const std::pair<int, int>> pairs,
                                      std::span<const double> x0, double T, int n_steps, std::size_t n_paths,
                                      std::uint64_t seed) {
  CouplingReport rep;
  for (auto [n, m] : pairs) {
    SpaceTimeField b1 = n < 0 ? b : mollify(b, n);
    SpaceTimeField b2 = m < 0 ? b : mollify(b, m);
    CouplingEntry e = coupled_pair(b1, b2, x0, T, n_steps, n_paths, seed);
    e.n = n;
    e.m = m;
    rep.entries.push_back(e);
  }
  rep.monotone = true;
  rep.all_zero = true;
  for (std::size_t k = 0; k < rep.entries.size(); ++k) {
    if (rep.entries[k].mean != 0.0) rep.all_zero = false;
    if (k > 0 && !(rep.entries[k].mean < rep.entries[k - 1].mean)) rep.monotone = false;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Gaussian envelope of the empirical density

struct DensityPolicy {
  int bins = 40;                       // per axis
  double half_width_sigmas = 4.0;      // histogram box: x0 +- this * sqrt(t)
  std::vector<double> m7_values{1.0, 0.8, 0.5};
  double z = 2.0;                      // violation threshold in standard errors
  double max_violating_fraction = 0.01;
  std::size_t min_paths = 100000;
};

struct EnvelopeRow {
  double M7 = 0.0, M6 = 0.0;
  bool finite = false;
};

struct DensityResult {
  double t = 0.0;
  std::vector<EnvelopeRow> rows;
  double M6 = 0.0, M7 = 0.0;  // the row with the largest M7 that dominates
  bool pass = false;
  std::size_t bins_total = 0, bins_occupied = 0;
};

namespace detail {

struct Histogram {
  int d = 0, bins = 0;
  std::vector<double> lo, width;
  std::vector<double> count;
  double n = 0.0;
  double cell_volume() const {
    double v = 1.0;
    for (double w : width) v *= w;
    return v;
  }
  /// Squared distance from c to the nearest point of bin b.
  double nearest_dist2(std::size_t b, std::span<const double> c) const {
    double r2 = 0.0;
    for (int i = d - 1; i >= 0; --i) {
      int j = static_cast<int>(b % bins);
      b /= bins;
      double a = lo[i] + j * width[i], e = a + width[i];
      double q = std::clamp(c[i], a, e) - c[i];
      r2 += q * q;
    }
    return r2;
  }
};

inline Histogram histogram(std::span<const double> pts, int d, std::span<const double> center, double half,
                           int bins) {
  Histogram h;
  h.d = d;
  h.bins = bins;
  for (int i = 0; i < d; ++i) {
    h.lo.push_back(center[i] - half);
    h.width.push_back(2 * half / bins);
  }
  std::size_t total = 1;
  for (int i = 0; i < d; ++i) total *= bins;
  h.count.assign(total, 0.0);
  std::size_t n = pts.size() / d;
  h.n = static_cast<double>(n);
  for (std::size_t p = 0; p < n; ++p) {
    std::size_t idx = 0;
    bool in = true;
    for (int i = 0; i < d; ++i) {
      double u = (pts[p * d + i] - h.lo[i]) / h.width[i];
      if (!(u >= 0 && u < bins)) {
        in = false;
        break;
      }
      idx = idx * bins + static_cast<std::size_t>(u);
    }
    if (in) h.count[idx] += 1.0;
  }
  return h;
}

}  // namespace detail

/// Number of bins whose density estimate exceeds the envelope
/// M6 t^{-d/2} exp(-M7 r^2 / 2t) by more than z standard errors. The envelope
/// is taken at the bin point closest to x0, its maximum over the bin.
inline std::size_t envelope_violations(const PathEnsemble& e, double t, double M6, double M7,
                                       const DensityPolicy& pol = {}) {
  auto pts = states_at(e, t);
  auto h = detail::histogram(pts, e.dim, e.start, pol.half_width_sigmas * std::sqrt(t), pol.bins);
  double vol = h.cell_volume();
  std::size_t bad = 0;
  for (std::size_t b = 0; b < h.count.size(); ++b) {
    double dens = h.count[b] / (h.n * vol), se = std::sqrt(h.count[b]) / (h.n * vol);
    double env = M6 * std::pow(t, -0.5 * e.dim) * std::exp(-M7 * h.nearest_dist2(b, e.start) / (2 * t));
    if (dens - pol.z * se > env) ++bad;
  }
  return bad;
}

inline DensityResult density_envelope_check(const PathEnsemble& e, double t, const DensityPolicy& pol = {}) {
  if (e.n_paths < pol.min_paths)
    throw InsufficientDataError("density_envelope_check: " + std::to_string(e.n_paths) + " paths, need " +
                                std::to_string(pol.min_paths));
  if (!(t > 0) || t > e.T + 1e-12) throw DomainError("density_envelope_check: t_check in (0, T] violated");
  DensityResult res;
  res.t = t;
  auto pts = states_at(e, t);
  auto h = detail::histogram(pts, e.dim, e.start, pol.half_width_sigmas * std::sqrt(t), pol.bins);
  double vol = h.cell_volume();
  res.bins_total = h.count.size();
  for (double c : h.count) res.bins_occupied += c > 0;
  const std::size_t allowed =
      static_cast<std::size_t>(std::floor(pol.max_violating_fraction * static_cast<double>(res.bins_total)));
  for (double M7 : pol.m7_values) {
    // Smallest M6 leaving at most `allowed` bins above the envelope.
    std::vector<double> need;
    for (std::size_t b = 0; b < h.count.size(); ++b) {
      double excess = (h.count[b] - pol.z * std::sqrt(h.count[b])) / (h.n * vol);
      if (excess <= 0) continue;
      double shape = std::pow(t, -0.5 * e.dim) * std::exp(-M7 * h.nearest_dist2(b, e.start) / (2 * t));
      need.push_back(shape > 0 ? excess / shape : std::numeric_limits<double>::infinity());
    }
    std::sort(need.begin(), need.end(), std::greater<>());
    EnvelopeRow row;
    row.M7 = M7;
    row.M6 = need.size() > allowed ? need[allowed] : 0.0;
    row.finite = std::isfinite(row.M6);
    res.rows.push_back(row);
  }
  for (const auto& r : res.rows)
    if (r.finite && (!res.pass || r.M7 > res.M7)) {
      res.pass = true;
      res.M7 = r.M7;
      res.M6 = r.M6;
    }
  return res;
}

// ---------------------------------------------------------------------------
// Additive functionals under mollification

struct KrylovRow {
  int n = 0;
  double mean = 0.0, stderr_ = 0.0;
};

struct KrylovTable {
  std::vector<KrylovRow> rows;
  bool monotone = false;
};

/// E[max_k |sum_{j<k} (h - h_n)(t_j, X_j) dt|^2] along the ensemble paths.
inline KrylovTable krylov_functional_convergence(const SpaceTimeField& h, std::span<const int> n_list,
                                                 const PathEnsemble& e, double cap = kCap) {
  if (h.dim() != e.dim) throw ValidationError("krylov: field and ensemble dimensions differ");
  if (h.range_dim() != 1) throw ValidationError("krylov: h must be scalar");
  KrylovTable tab;
  for (int n : n_list) {
    SpaceTimeField hn = mollify(h, n);
    std::vector<double> sup(e.n_paths, 0.0);
    parallel_for(e.n_paths, [&](std::size_t p) {
      double acc = 0.0, best = 0.0, a, c;
      e.replay(p, [&](int k, double t, std::span<const double> x, std::span<const double>) {
        if (k == e.n_steps) return;
        h.eval(t, x, std::span<double>(&a, 1));
        hn.eval(t, x, std::span<double>(&c, 1));
        acc += (apply_cap(a, cap) - apply_cap(c, cap)) * e.dt;
        best = std::max(best, acc * acc);
      });
      sup[p] = best;
    });
    MeanSe ms = mean_se(sup);
    tab.rows.push_back({n, ms.mean, ms.stderr_});
  }
  tab.monotone = true;
  for (std::size_t k = 1; k < tab.rows.size(); ++k)
    if (!(tab.rows[k].mean < tab.rows[k - 1].mean)) tab.monotone = false;
  return tab;
}

// ---------------------------------------------------------------------------
// Weak-error study

struct WeakErrorRow {
  int n_steps = 0;
  double mean = 0.0;
  double diff = 0.0, diff_se = 0.0;  // E[g(X^n) - g(X^{2n})] on shared noise
};

/// Levels n0, 2 n0, ..., n0 2^levels driven by the finest increments summed.
inline std::vector<WeakErrorRow> weak_error_study(const SpaceTimeField& b,
                                                  const std::function<double(std::span<const double>)>& g,
                                                  std::span<const double> x0, double T, int n0, int levels,
                                                  std::size_t n_paths, std::uint64_t seed) {
  detail::check_sim_args(b, x0, T, n0, n_paths);
  const int d = b.dim();
  const int L = levels + 1;
  const int nf = n0 << levels;
  const double dtf = T / nf;
  std::vector<std::vector<double>> vals(L, std::vector<double>(n_paths));
  parallel_for(n_paths, [&](std::size_t p) {
    std::vector<double> dwf(static_cast<std::size_t>(nf) * d);
    for (int k = 0; k < nf; ++k)
      for (int i = 0; i < d; ++i) dwf[k * d + i] = std::sqrt(dtf) * keyed_normal(seed, p, k, i);
    std::vector<double> x(d), dw(d), buf(d);
    for (int l = 0; l < L; ++l) {
      int n = n0 << l, agg = nf / n;
      double dt = T / n;
      std::copy(x0.begin(), x0.end(), x.begin());
      for (int k = 0; k < n; ++k) {
        std::fill(dw.begin(), dw.end(), 0.0);
        for (int a = 0; a < agg; ++a)
          for (int i = 0; i < d; ++i) dw[i] += dwf[(k * agg + a) * d + i];
        detail::euler_step(b, k * dt, x, dw, dt, kCap, buf, p, k);
      }
      vals[l][p] = g(x);
    }
  });
  std::vector<WeakErrorRow> rows;
  for (int l = 0; l < L; ++l) {
    WeakErrorRow r;
    r.n_steps = n0 << l;
    r.mean = mean_se(vals[l]).mean;
    if (l + 1 < L) {
      std::vector<double> dv(n_paths);
      for (std::size_t p = 0; p < n_paths; ++p) dv[p] = vals[l][p] - vals[l + 1][p];
      MeanSe ms = mean_se(dv);
      r.diff = ms.mean;
      r.diff_se = ms.stderr_;
    }
    rows.push_back(r);
  }
  return rows;
}

}  // namespace katosde
