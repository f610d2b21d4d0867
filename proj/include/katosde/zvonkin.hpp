#pragma once

#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "katosde/error.hpp"
#include "katosde/pde.hpp"
#include "katosde/sde.hpp"

namespace katosde {

struct ZvonkinPolicy {
  std::size_t pairs = 10000;
  std::uint64_t seed = 2;
  double roi_fraction = 0.5;
  double slack = 0.05;
};

struct ZvonkinMap {
  std::shared_ptr<const MildSolutionGrid> sol;
  double c1 = 0.0, c2 = 0.0;  // empirical min and max of |v(x)-v(y)| / |x-y|
  std::size_t pairs = 0;
  bool bilipschitz_ok = false;
  double terminal_defect = 0.0;  // sup |v(T, x) - x| on the lattice

  int dim() const { return sol->spec().dim(); }

  /// v(t, x) = x - u(t, x) with lattice interpolation of u.
  void eval(double t, std::span<const double> x, std::span<double> out) const {
    sol->u.eval(t, x, out);
    for (int i = 0; i < dim(); ++i) out[i] = x[i] - out[i];
  }
};

/// Wraps v = x - u for a solution with source f = b and estimates (c1, c2).
inline ZvonkinMap build_zvonkin(const MildSolutionGrid& sol, const ZvonkinPolicy& pol = {}) {
  if (!sol.certificate.ok) throw PreconditionError("zvonkin: solution has no valid contraction certificate");
  if (sol.source_id != sol.drift_id) throw PreconditionError("zvonkin: solution source must be the drift (f = b)");
  const auto& spec = sol.spec();
  const int d = spec.dim();
  if (sol.range() != d) throw PreconditionError("zvonkin: u must have d components");
  ZvonkinMap map;
  map.sol = std::make_shared<const MildSolutionGrid>(sol);
  std::vector<double> lo, hi;
  detail::roi_box(spec, {}, {}, pol.roi_fraction, lo, hi);
  std::mt19937_64 rng(pol.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::uniform_int_distribution<int> kd(0, spec.time_steps);
  double hmin = spec.spacing(0), diam = 0.0;
  for (int i = 0; i < d; ++i) {
    hmin = std::min(hmin, spec.spacing(i));
    diam = std::max(diam, hi[i] - lo[i]);
  }
  std::vector<double> x(d), y(d), vx(d), vy(d), z(d);
  map.c1 = std::numeric_limits<double>::infinity();
  map.c2 = 0.0;
  for (std::size_t p = 0; p < pol.pairs; ++p) {
    double t = spec.time_at(kd(rng));
    for (int i = 0; i < d; ++i) x[i] = lo[i] + u01(rng) * (hi[i] - lo[i]);
    double rho = std::exp(std::log(0.25 * hmin) + u01(rng) * (std::log(diam) - std::log(0.25 * hmin)));
    double n2 = 0.0;
    for (int i = 0; i < d; ++i) {
      z[i] = 2 * u01(rng) - 1;
      n2 += z[i] * z[i];
    }
    double nz = std::sqrt(std::max(n2, 1e-300)), dist = 0.0;
    for (int i = 0; i < d; ++i) {
      y[i] = std::clamp(x[i] + rho * z[i] / nz, lo[i], hi[i]);
      dist += (x[i] - y[i]) * (x[i] - y[i]);
    }
    dist = std::sqrt(dist);
    if (dist == 0.0) continue;
    map.eval(t, x, vx);
    map.eval(t, y, vy);
    double dv = 0.0;
    for (int i = 0; i < d; ++i) dv += (vx[i] - vy[i]) * (vx[i] - vy[i]);
    double r = std::sqrt(dv) / dist;
    map.c1 = std::min(map.c1, r);
    map.c2 = std::max(map.c2, r);
    ++map.pairs;
  }
  map.bilipschitz_ok = map.c1 >= 0.5 - pol.slack && map.c2 <= 1.5 + pol.slack;
  const int K = spec.time_steps;
  for (std::size_t s = 0; s < spec.space_size(); ++s)
    for (int c = 0; c < d; ++c) map.terminal_defect = std::max(map.terminal_defect, std::abs(sol.u.at(K, s, c)));
  return map;
}

// ---------------------------------------------------------------------------
// Ito identity along simulated paths

struct ItoPolicy {
  // Calibrated on the constant-drift case (where the identity holds to
  // rounding) and frozen.
  double allowance_C = 1e-12;
};

struct ItoResidual {
  std::vector<double> mean, stderr_;  // per component
  double mean_residual = 0.0;         // max |mean|
  double interpolation_allowance = 0.0;
  double allowance = 0.0;
  bool pass = false;
};

namespace detail {

/// Bilinear interpolation error bound h^2/8 sum_i |d_ii u| at the start point,
/// from second differences of the t = 0 slice.
inline double interpolation_bound(const GridField& u, std::span<const double> x) {
  const auto& spec = u.spec();
  const int d = spec.dim(), m = u.range_dim();
  std::vector<int> j(d);
  for (int i = 0; i < d; ++i) {
    double r = (x[i] - spec.lo[i]) / spec.spacing(i);
    j[i] = std::clamp(static_cast<int>(std::lround(r)), 1, spec.n[i] - 2);
  }
  auto flat = [&](const std::vector<int>& jj) {
    std::size_t s = 0;
    for (int i = 0; i < d; ++i) s = s * spec.n[i] + jj[i];
    return s;
  };
  double bound = 0.0;
  for (int c = 0; c < m; ++c) {
    double acc = 0.0;
    for (int i = 0; i < d; ++i) {
      auto jm = j, jp = j;
      --jm[i];
      ++jp[i];
      double sd = u.at(0, flat(jp), c) - 2 * u.at(0, flat(j), c) + u.at(0, flat(jm), c);
      acc += std::abs(sd) / 8.0;  // (h^2/8) |d_ii u| with d_ii u = sd / h^2
    }
    bound = std::max(bound, acc);
  }
  return bound;
}

}  // namespace detail

/// Per path: u(T, X_T) - u(0, x) - sum <grad u(t_k, X_k), dW_k> - sum b(t_k, X_k) dt.
inline ItoResidual ito_residual(const ZvonkinMap& map, const PathEnsemble& e, const ItoPolicy& pol = {}) {
  const auto& sol = *map.sol;
  if (e.drift_id != sol.drift_id)
    throw ConfigError("ito_residual: ensemble drift '" + e.drift_id + "' differs from solution drift '" +
                      sol.drift_id + "'");
  if (std::abs(e.T - sol.horizon) > 1e-12 * std::max(1.0, sol.horizon))
    throw ConfigError("ito_residual: ensemble horizon must equal the solution horizon T_star");
  const int d = e.dim, m = sol.range();
  std::vector<std::vector<double>> res(m, std::vector<double>(e.n_paths));
  parallel_for(e.n_paths, [&](std::size_t p) {
    std::vector<double> acc(m, 0.0), g(m * d), bv(d), u(m);
    sol.u.eval(0.0, e.start, u);
    for (int c = 0; c < m; ++c) acc[c] = -u[c];
    e.replay(p, [&](int k, double t, std::span<const double> x, std::span<const double> dw) {
      if (k == e.n_steps) {
        sol.u.eval(t, x, u);
        for (int c = 0; c < m; ++c) acc[c] += u[c];
        return;
      }
      sol.grad_u.eval(t, x, g);
      e.drift.eval(t, x, bv);
      for (int c = 0; c < m; ++c) {
        double s = 0.0;
        for (int i = 0; i < d; ++i) s += g[c * d + i] * dw[i];
        acc[c] -= s + apply_cap(bv[c], e.cap) * e.dt;
      }
    });
    for (int c = 0; c < m; ++c) res[c][p] = acc[c];
  });
  ItoResidual out;
  out.interpolation_allowance = detail::interpolation_bound(sol.u, e.start);
  out.allowance = pol.allowance_C * std::sqrt(e.dt) + out.interpolation_allowance;
  out.pass = true;
  for (int c = 0; c < m; ++c) {
    MeanSe ms = mean_se(res[c]);
    out.mean.push_back(ms.mean);
    out.stderr_.push_back(ms.stderr_);
    out.mean_residual = std::max(out.mean_residual, std::abs(ms.mean));
    if (!(std::abs(ms.mean) <= 3 * ms.stderr_ + out.allowance)) out.pass = false;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Drift removal: v(t, X_t) has mean-zero increments

struct DriftRemovalResult {
  int intervals = 0;
  std::vector<double> worst_z;  // per coordinate, max |mean| / stderr over intervals
  bool pass = false;
};

inline DriftRemovalResult drift_removal_check(const ZvonkinMap& map, const PathEnsemble& e, int intervals = 8,
                                              double z = 3.0) {
  const int d = e.dim;
  if (e.n_steps % intervals != 0) throw ValidationError("drift_removal: intervals must divide n_steps");
  if (std::abs(e.T - map.sol->horizon) > 1e-12 * std::max(1.0, e.T))
    throw ConfigError("drift_removal: ensemble horizon must equal the solution horizon");
  const int stride = e.n_steps / intervals;
  std::vector<double> inc(e.n_paths * intervals * d);
  parallel_for(e.n_paths, [&](std::size_t p) {
    std::vector<double> prev(d), cur(d);
    e.replay(p, [&](int k, double t, std::span<const double> x, std::span<const double>) {
      if (k % stride != 0) return;
      map.eval(t, x, cur);
      if (k > 0)
        for (int i = 0; i < d; ++i) inc[(p * intervals + (k / stride - 1)) * d + i] = cur[i] - prev[i];
      prev = cur;
    });
  });
  DriftRemovalResult r;
  r.intervals = intervals;
  r.worst_z.assign(d, 0.0);
  r.pass = true;
  std::vector<double> col(e.n_paths);
  for (int j = 0; j < intervals; ++j)
    for (int i = 0; i < d; ++i) {
      for (std::size_t p = 0; p < e.n_paths; ++p) col[p] = inc[(p * intervals + j) * d + i];
      MeanSe ms = mean_se(col);
      double zz = ms.stderr_ > 0 ? std::abs(ms.mean) / ms.stderr_ : (ms.mean == 0 ? 0.0 : 1e300);
      r.worst_z[i] = std::max(r.worst_z[i], zz);
      if (zz > z) r.pass = false;
    }
  return r;
}

}  // namespace katosde
