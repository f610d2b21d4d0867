#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "katosde/error.hpp"
#include "katosde/field.hpp"
#include "katosde/gausskernel.hpp"
#include "katosde/kato.hpp"
#include "katosde/mollify.hpp"
#include "katosde/quadrature.hpp"

namespace katosde {

// ---------------------------------------------------------------------------
// Horizon selection

struct ContractionBudget {
  int dim = 0;
  double C0 = 0.0;
  double T_star = 0.0;
  double N1b = 0.0, N1f = 0.0;
  // Evaluated points, T decreasing.
  std::vector<double> T_grid, N1b_of_T, N1f_of_T;
  std::string convention =
      "N^1_h(T) = sup_{t,x} int_t^{t+T} int (s-t)^{-(d+1)/2} exp(-|x-y|^2 / (4(s-t))) |h(s,y)| dy ds";

  bool admissible() const { return C0 * N1b <= 0.5 && C0 * N1f <= 0.5 / dim; }
};

struct HorizonPolicy {
  std::optional<double> T_max;       // defaults to the common field horizon
  double ratio = std::numbers::sqrt2 / 2;
  int count = 48;
  std::vector<Anchor> anchors;       // appended to the default anchors of b and f
  QuadraturePolicy quad{};
};

namespace detail {

inline std::vector<Anchor> horizon_anchors(const SpaceTimeField& b, const SpaceTimeField& f,
                                           const HorizonPolicy& pol) {
  std::vector<double> times{0.0};
  auto a = default_anchors(b, times);
  auto c = default_anchors(f, times);
  a.insert(a.end(), c.begin(), c.end());
  a.insert(a.end(), pol.anchors.begin(), pol.anchors.end());
  return a;
}

inline double n1_or_inf(const SpaceTimeField& h, double T, std::span<const Anchor> an, const QuadraturePolicy& q) {
  try {
    return n_lambda(h, T, 1.0, an, q);
  } catch (const AccuracyError&) {
    return std::numeric_limits<double>::infinity();
  }
}

}  // namespace detail

/// N^1 of b and f at a fixed horizon.
inline ContractionBudget budget_at(const SpaceTimeField& b, const SpaceTimeField& f, double T,
                                   const HorizonPolicy& pol = {}) {
  if (b.dim() != f.dim()) throw ValidationError("budget: b and f dimensions differ");
  if (b.range_dim() != b.dim()) throw ValidationError("budget: drift must have d components");
  ContractionBudget bud;
  bud.dim = b.dim();
  bud.C0 = gradient_constant_c0(b.dim());
  auto an = detail::horizon_anchors(b, f, pol);
  bud.T_star = T;
  bud.N1b = detail::n1_or_inf(b, T, an, pol.quad);
  bud.N1f = detail::n1_or_inf(f, T, an, pol.quad);
  bud.T_grid = {T};
  bud.N1b_of_T = {bud.N1b};
  bud.N1f_of_T = {bud.N1f};
  return bud;
}

/// Largest T on a geometric grid with C0 N^1_b(T) <= 1/2 and C0 N^1_f(T) <= 1/(2d).
inline ContractionBudget choose_horizon(const SpaceTimeField& b, const SpaceTimeField& f,
                                        const HorizonPolicy& pol = {}) {
  if (b.dim() != f.dim()) throw ValidationError("choose_horizon: b and f dimensions differ");
  if (b.range_dim() != b.dim()) throw ValidationError("choose_horizon: drift must have d components");
  if (pol.count < 2 || !(pol.ratio > 0 && pol.ratio < 1)) throw ValidationError("choose_horizon: bad T grid");
  const int d = b.dim();
  ContractionBudget bud;
  bud.dim = d;
  bud.C0 = gradient_constant_c0(d);
  double Tmax = pol.T_max.value_or(std::min(b.horizon(), f.horizon()));
  auto an = detail::horizon_anchors(b, f, pol);
  std::map<int, std::pair<double, double>> memo;
  auto eval = [&](int k) {
    auto it = memo.find(k);
    if (it != memo.end()) return it->second;
    double T = Tmax * std::pow(pol.ratio, k);
    std::pair<double, double> v{detail::n1_or_inf(b, T, an, pol.quad), detail::n1_or_inf(f, T, an, pol.quad)};
    memo[k] = v;
    return v;
  };
  auto ok = [&](int k) {
    auto [nb, nf] = eval(k);
    return bud.C0 * nb <= 0.5 && bud.C0 * nf <= 0.5 / d;
  };
  int pick;
  if (ok(0)) {
    pick = 0;
  } else {
    if (!ok(pol.count - 1))
      throw HorizonNotFoundError("choose_horizon: no admissible T down to " +
                                 std::to_string(Tmax * std::pow(pol.ratio, pol.count - 1)) +
                                 "; the field is too singular for the budget, try a mollified drift");
    int lo = 0, hi = pol.count - 1;
    while (hi - lo > 1) {
      int mid = (lo + hi) / 2;
      (ok(mid) ? hi : lo) = mid;
    }
    pick = hi;
  }
  for (const auto& [k, v] : memo) {
    bud.T_grid.push_back(Tmax * std::pow(pol.ratio, k));
    bud.N1b_of_T.push_back(v.first);
    bud.N1f_of_T.push_back(v.second);
  }
  bud.T_star = Tmax * std::pow(pol.ratio, pick);
  bud.N1b = memo[pick].first;
  bud.N1f = memo[pick].second;
  return bud;
}

// ---------------------------------------------------------------------------
// Heat kernel against hat functions on a uniform axis

namespace detail {

inline double psi_fn(double z) { return z * norm_cdf(z) + std::exp(-0.5 * z * z) / std::sqrt(2 * std::numbers::pi); }
inline double phi_fn(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2 * std::numbers::pi); }

/// W[i][j] = d^order/dx_i^order int g_tau(x_i - y) phi_j(y) dy for hat functions
/// phi_j on nodes lo + j h, with the two end hats extended as constants.
inline Eigen::MatrixXd hat_weights(double lo, double h, int n, double tau, int order) {
  Eigen::MatrixXd W(n, n);
  double sig = std::sqrt(tau);
  std::vector<double> v(n);
  for (int i = 0; i < n; ++i) {
    double xi = lo + i * h;
    for (int j = 0; j < n; ++j) {
      double z = (xi - (lo + j * h)) / sig;
      v[j] = order == 0 ? sig * psi_fn(z) : (order == 1 ? norm_cdf(z) : phi_fn(z) / sig);
    }
    for (int j = 0; j < n; ++j) {
      double w;
      if (j == 0)
        w = -(v[0] - v[1]);
      else if (j == n - 1)
        w = v[n - 2] - v[n - 1];
      else
        w = v[j - 1] - 2 * v[j] + v[j + 1];
      w /= h;
      if (j == 0 && order == 0) w += 1.0;
      W(i, j) = w;
    }
  }
  // Prefilter nodal values by (I - eps delta^2/12). eps is the Gaussian average
  // of the hat interpolation error of x^2, so quadratics come out exact for
  // every tau: eps -> 0 when sigma << h, eps -> 1 when sigma >> h.
  double eps = 1.0, comb = 0.0;
  for (int k = 1; k <= 64; ++k) {
    double e = std::exp(-2.0 * std::numbers::pi * std::numbers::pi * k * k * tau / (h * h));
    if (e < 1e-18) break;
    eps -= 6.0 / (std::numbers::pi * std::numbers::pi) * e / (k * k);
    comb += e;
  }
  Eigen::MatrixXd out = W;
  for (int j = 1; j < n - 1; ++j) {
    out.col(j) += W.col(j) * (2.0 * eps / 12.0);
    out.col(j - 1) -= W.col(j) * (eps / 12.0);
    out.col(j + 1) -= W.col(j) * (eps / 12.0);
  }
  // Second derivatives of the interpolant pile up at the nodes when sigma < h;
  // for x^2 the excess is 2 comb times the second difference over h^2.
  if (order == 2 && comb > 0)
    for (int i = 1; i < n - 1; ++i) {
      double c = 2.0 * comb / (h * h);
      out(i, i - 1) -= c;
      out(i, i) += 2 * c;
      out(i, i + 1) -= c;
    }
  return out;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// out = W applied along one axis of a [slices][n_0]..[n_{d-1}][comps] array.
inline void apply_axis(const Eigen::MatrixXd& W, const std::vector<double>& in, std::vector<double>& out,
                       std::span<const int> dims, int axis, std::size_t slices, int comps) {
  std::size_t Na = dims[axis], inner = comps, outer = slices;
  for (int b = axis + 1; b < static_cast<int>(dims.size()); ++b) inner *= dims[b];
  for (int b = 0; b < axis; ++b) outer *= dims[b];
  out.resize(in.size());
  for (std::size_t o = 0; o < outer; ++o) {
    Eigen::Map<const RowMat> M(in.data() + o * Na * inner, Na, inner);
    Eigen::Map<RowMat> R(out.data() + o * Na * inner, Na, inner);
    R.noalias() = W * M;
  }
}

struct TimeNode {
  int lag;
  double tau, theta, weight;
};

/// Nodes for int_{t_k}^{T} ... ds split at the slices. The first interval uses
/// tau = dt w^2 so kernel derivatives of order two stay integrable.
inline std::vector<TimeNode> time_nodes(int K, double dt) {
  std::vector<TimeNode> out;
  const Rule1D& g3 = gauss_legendre(3);
  for (std::size_t q = 0; q < g3.size(); ++q) {
    double w = 0.5 * (g3.nodes[q] + 1.0), gw = 0.5 * g3.weights[q];
    out.push_back({0, dt * w * w, w * w, dt * 2.0 * w * gw});
  }
  const Rule1D& g2 = gauss_legendre(2);
  for (int l = 1; l < K; ++l)
    for (std::size_t q = 0; q < g2.size(); ++q) {
      double th = 0.5 * (g2.nodes[q] + 1.0);
      out.push_back({l, (l + th) * dt, th, dt * 0.5 * g2.weights[q]});
    }
  return out;
}

/// Derivative orders per axis for one output channel.
using Orders = std::vector<int>;

/// Backward heat potential K[g](t_k) = int_{t_k}^T P_{s-t_k} g(s) ds on the
/// lattice, for several derivative channels at once.
class HeatPotential {
 public:
  HeatPotential(const LatticeSpec& spec) : spec_(spec), nodes_(time_nodes(spec.time_steps, spec.dt())) {
    for (int i = 0; i < spec.dim(); ++i) dims_.push_back(spec.n[i]);
  }

  const Eigen::MatrixXd& weights(std::size_t node, int axis, int order) {
    // Axes with equal geometry share matrices.
    int key_axis = axis;
    for (int a = 0; a < axis; ++a)
      if (spec_.n[a] == spec_.n[axis] && spec_.lo[a] == spec_.lo[axis] && spec_.hi[a] == spec_.hi[axis]) {
        key_axis = a;
        break;
      }
    auto key = std::make_tuple(node, key_axis, order);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    auto W = hat_weights(spec_.lo[key_axis], spec_.spacing(key_axis), spec_.n[key_axis], nodes_[node].tau, order);
    return cache_.emplace(key, std::move(W)).first->second;
  }

  /// g: [(K+1) slices][S][comps]; out[c]: [(K+1) slices][S][comps], zero at t = T.
  void apply(const std::vector<double>& g, int comps, std::span<const Orders> channels,
             std::vector<std::vector<double>>& out) {
    const int K = spec_.time_steps;
    const std::size_t S = spec_.space_size();
    const std::size_t slab = S * comps;
    out.assign(channels.size(), std::vector<double>((K + 1) * slab, 0.0));
    std::vector<double> stack;
    for (std::size_t nd = 0; nd < nodes_.size(); ++nd) {
      const auto& tn = nodes_[nd];
      std::size_t ns = K - tn.lag;
      stack.resize(ns * slab);
      for (std::size_t k = 0; k < ns; ++k) {
        const double* a = g.data() + (k + tn.lag) * slab;
        const double* b = a + slab;
        double* o = stack.data() + k * slab;
        for (std::size_t i = 0; i < slab; ++i) o[i] = (1.0 - tn.theta) * a[i] + tn.theta * b[i];
      }
      std::vector<std::size_t> all(channels.size());
      for (std::size_t c = 0; c < all.size(); ++c) all[c] = c;
      recurse(nd, static_cast<int>(dims_.size()) - 1, stack, ns, comps, channels, all, out, tn.weight);
    }
  }

  const LatticeSpec& spec() const { return spec_; }

 private:
  void recurse(std::size_t nd, int axis, const std::vector<double>& data, std::size_t ns, int comps,
               std::span<const Orders> channels, const std::vector<std::size_t>& group,
               std::vector<std::vector<double>>& out, double weight) {
    if (axis < 0) {
      const std::size_t slab = spec_.space_size() * comps;
      for (std::size_t c : group)
        for (std::size_t i = 0; i < ns * slab; ++i) out[c][i] += weight * data[i];
      return;
    }
    std::map<int, std::vector<std::size_t>> by_order;
    for (std::size_t c : group) by_order[channels[c][axis]].push_back(c);
    std::vector<double> tmp;
    for (const auto& [order, sub] : by_order) {
      apply_axis(weights(nd, axis, order), data, tmp, dims_, axis, ns, comps);
      recurse(nd, axis - 1, tmp, ns, comps, channels, sub, out, weight);
    }
  }

  LatticeSpec spec_;
  std::vector<TimeNode> nodes_;
  std::vector<int> dims_;
  std::map<std::tuple<std::size_t, int, int>, Eigen::MatrixXd> cache_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Picard iteration for the mild solution

struct PdeGridSpec {
  std::vector<double> lo, hi;
  std::vector<int> n;
  int time_steps = 64;
  double min_step = 0.0;  // horizons shorter than 4 min_step are refused

  static PdeGridSpec cube(int d, double L, int n, int steps = 64) {
    PdeGridSpec g;
    g.lo.assign(d, -L);
    g.hi.assign(d, L);
    g.n.assign(d, n);
    g.time_steps = steps;
    return g;
  }

  LatticeSpec lattice(double T) const {
    LatticeSpec s;
    s.lo = lo;
    s.hi = hi;
    s.n = n;
    s.t0 = 0.0;
    s.t1 = T;
    s.time_steps = time_steps;
    return s;
  }
};

struct PicardPolicy {
  double tol = 1e-9;            // on sup |grad u_{k+1} - grad u_k|
  int max_iter = 60;
  double stall_ratio = 0.9;
  int stall_count = 3;
  bool verify_fixed_point = true;
};

struct ContractionCertificate {
  double C0 = 0.0, N1b = 0.0, N1f = 0.0, T = 0.0;
  double product_b = 0.0;  // C0 N1b <= 1/2
  double product_f = 0.0;  // C0 N1f <= 1/(2d)
  bool ok = false;
};

struct MildSolutionGrid {
  GridField u;         // range m
  GridField grad_u;    // range m*d, entry c*d + i is d u_c / d x_i
  std::optional<GridField> hess_u;  // range m*d*d, filled by compute_hessian
  GridField integrand;  // <b, grad u> - f at the final iterate
  double horizon = 0.0;
  int iterations = 0;
  std::vector<double> increments, ratios;
  ContractionCertificate certificate;
  double fixed_point_residual = 0.0;
  double max_ratio = 0.0;
  double sup_u = 0.0, u_bound = 0.0;
  double sup_grad = 0.0, grad_bound = 0.0;
  bool grad_bound_ok = false;
  SpaceTimeField b, f;
  std::string drift_id, source_id;

  int range() const { return u.range_dim(); }
  const LatticeSpec& spec() const { return u.spec(); }
};

namespace detail {

inline std::vector<double> sample_slices(const SpaceTimeField& h, const LatticeSpec& spec) {
  GridField g = sample_to_grid(h, spec);
  return g.data();
}

inline void picard_integrand(const std::vector<double>& bs, const std::vector<double>& fs,
                             const std::vector<double>& grad, std::size_t points, int d, int m,
                             std::vector<double>& g) {
  g.resize(points * m);
  for (std::size_t p = 0; p < points; ++p)
    for (int c = 0; c < m; ++c) {
      double acc = -fs[p * m + c];
      for (int i = 0; i < d; ++i) acc += bs[p * d + i] * grad[(p * m + c) * d + i];
      g[p * m + c] = acc;
    }
}

inline std::vector<Orders> grad_channels(int d, bool with_u) {
  std::vector<Orders> ch;
  if (with_u) ch.push_back(Orders(d, 0));
  for (int i = 0; i < d; ++i) {
    Orders o(d, 0);
    o[i] = 1;
    ch.push_back(o);
  }
  return ch;
}

/// Interleave per-axis channel outputs [(slices)][S][m] into [(slices)][S][m*d].
inline void interleave(const std::vector<std::vector<double>>& ch, std::size_t first, std::size_t points, int m,
                       int d, std::vector<double>& out) {
  out.assign(points * m * d, 0.0);
  for (int i = 0; i < d; ++i)
    for (std::size_t p = 0; p < points; ++p)
      for (int c = 0; c < m; ++c) out[(p * m + c) * d + i] = ch[first + i][p * m + c];
}

}  // namespace detail

inline MildSolutionGrid picard_solve(const SpaceTimeField& b, const SpaceTimeField& f, const ContractionBudget& budget,
                                     const PdeGridSpec& grid, const PicardPolicy& pol = {}) {
  const int d = b.dim();
  if (f.dim() != d) throw ValidationError("picard_solve: b and f dimensions differ");
  if (b.range_dim() != d) throw ValidationError("picard_solve: drift must have d components");
  if (static_cast<int>(grid.n.size()) != d) throw ValidationError("picard_solve: grid dim does not match field dim");
  if (grid.time_steps < 64) throw ValidationError("picard_solve: time_steps >= 64 violated");
  if (!budget.admissible())
    throw PreconditionError("picard_solve: budget is not admissible (C0 N1b = " +
                            std::to_string(budget.C0 * budget.N1b) + ", C0 N1f = " +
                            std::to_string(budget.C0 * budget.N1f) + ")");
  const double T = budget.T_star;
  if (grid.min_step > 0 && T < 4 * grid.min_step)
    throw PreconditionError("picard_solve: T_star = " + std::to_string(T) +
                            " is shorter than 4 time steps; increase the mollification level");
  const int m = f.range_dim();
  LatticeSpec spec = grid.lattice(T);
  spec.validate();
  const int K = spec.time_steps;
  const std::size_t S = spec.space_size();
  const std::size_t P = (K + 1) * S;

  std::vector<double> bs = detail::sample_slices(b, spec), fs = detail::sample_slices(f, spec);
  detail::HeatPotential pot(spec);

  MildSolutionGrid sol;
  sol.b = b;
  sol.f = f;
  sol.drift_id = b.name();
  sol.source_id = f.name();
  sol.horizon = T;
  auto& cert = sol.certificate;
  cert.C0 = budget.C0;
  cert.N1b = budget.N1b;
  cert.N1f = budget.N1f;
  cert.T = T;
  cert.product_b = budget.C0 * budget.N1b;
  cert.product_f = budget.C0 * budget.N1f;
  cert.ok = budget.admissible();

  std::vector<double> grad(P * m * d, 0.0), g, newgrad, u;
  auto channels = detail::grad_channels(d, true);
  std::vector<std::vector<double>> out;
  int stall = 0;
  bool converged = false;
  for (int it = 1; it <= pol.max_iter; ++it) {
    detail::picard_integrand(bs, fs, grad, P, d, m, g);
    pot.apply(g, m, channels, out);
    detail::interleave(out, 1, P, m, d, newgrad);
    double inc = 0.0;
    for (std::size_t i = 0; i < newgrad.size(); ++i) inc = std::max(inc, std::abs(newgrad[i] - grad[i]));
    if (!std::isfinite(inc)) throw NumericError("picard_solve: non-finite gradient", 0.0, {});
    if (!sol.increments.empty() && sol.increments.back() > 0) {
      double r = inc / sol.increments.back();
      sol.ratios.push_back(r);
      stall = r > pol.stall_ratio ? stall + 1 : 0;
    }
    sol.increments.push_back(inc);
    grad.swap(newgrad);
    u = std::move(out[0]);
    sol.iterations = it;
    if (stall >= pol.stall_count)
      throw ContractionViolationError("picard_solve: increment ratio above " + std::to_string(pol.stall_ratio) +
                                          " for " + std::to_string(pol.stall_count) + " iterations",
                                      sol.ratios);
    if (inc < pol.tol) {
      converged = true;
      break;
    }
  }
  if (!converged) throw NoConvergenceError("picard_solve: max_iter reached", sol.increments);
  for (double r : sol.ratios) sol.max_ratio = std::max(sol.max_ratio, r);

  detail::picard_integrand(bs, fs, grad, P, d, m, g);
  if (pol.verify_fixed_point) {
    std::vector<detail::Orders> uc{detail::Orders(d, 0)};
    pot.apply(g, m, uc, out);
    double res = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) res = std::max(res, std::abs(out[0][i] - u[i]));
    sol.fixed_point_residual = res;
  }

  sol.u = GridField(spec, m);
  sol.u.data() = std::move(u);
  sol.grad_u = GridField(spec, m * d);
  sol.grad_u.data() = std::move(grad);
  sol.integrand = GridField(spec, m);
  sol.integrand.data() = std::move(g);

  for (double v : sol.u.data()) sol.sup_u = std::max(sol.sup_u, std::abs(v));
  for (std::size_t p = 0; p < P; ++p) {
    double n2 = 0.0;
    for (int k = 0; k < m * d; ++k) n2 += sol.grad_u.data()[p * m * d + k] * sol.grad_u.data()[p * m * d + k];
    sol.sup_grad = std::max(sol.sup_grad, std::sqrt(n2));
  }
  sol.grad_bound = 2.0 * cert.C0 * cert.N1f;
  sol.grad_bound_ok = sol.sup_grad <= 1.05 * sol.grad_bound;
  // |u| <= int q (|b| |grad u| + |f|) and q <= (2 pi)^{-d/2} sqrt(T) (s-t)^{-(d+1)/2} exp(-|x-y|^2/4(s-t)).
  sol.u_bound = std::pow(2 * std::numbers::pi, -0.5 * d) * std::sqrt(T) * (cert.N1b * sol.grad_bound + cert.N1f);
  return sol;
}

/// D^2_x u by second-derivative kernels applied to the final integrand.
inline const GridField& compute_hessian(MildSolutionGrid& sol) {
  if (sol.hess_u) return *sol.hess_u;
  const auto& spec = sol.spec();
  const int d = spec.dim(), m = sol.range();
  std::vector<detail::Orders> ch;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      detail::Orders o(d, 0);
      o[i] += 1;
      o[j] += 1;
      ch.push_back(o);
    }
  detail::HeatPotential pot(spec);
  std::vector<std::vector<double>> out;
  pot.apply(sol.integrand.data(), m, ch, out);
  const std::size_t P = spec.time_nodes() * spec.space_size();
  GridField H(spec, m * d * d);
  for (std::size_t p = 0; p < P; ++p)
    for (int c = 0; c < m; ++c)
      for (int k = 0; k < d * d; ++k) H.data()[(p * m + c) * d * d + k] = out[k][p * m + c];
  sol.hess_u = std::move(H);
  return *sol.hess_u;
}

// ---------------------------------------------------------------------------
// Regularity certificate

struct RegularityPolicy {
  std::size_t pairs = 10000;
  std::uint64_t seed = 1;
  double slack = 0.05;
  double roi_fraction = 0.5;          // region of interest: central part of the box
  std::vector<double> roi_lo, roi_hi; // explicit region, overrides roi_fraction
  std::size_t holder_nodes = 200;
  std::optional<double> p;            // window exponent of |b|^2, for the admissible range
  std::size_t max_reported = 20;
};

struct OffendingPair {
  double t;
  std::vector<double> x, y;
  double ratio;
};

struct CertificateReport {
  std::size_t pairs = 0;
  double lipschitz_max = 0.0;  // max |u(t,x)-u(t,y)| / |x-y|
  std::size_t violations = 0;
  std::vector<OffendingPair> offending;
  bool lipschitz_ok = false;
  double holder_alpha = 0.0;
  double holder_r2 = 0.0;
  bool holder_trivial = false;
  std::vector<double> holder_dt, holder_diff;
  std::optional<double> alpha_admissible_hi;
  bool holder_ok = false;
  bool pass = false;
};

namespace detail {

inline void roi_box(const LatticeSpec& spec, const std::vector<double>& lo_in, const std::vector<double>& hi_in,
                    double frac, std::vector<double>& lo, std::vector<double>& hi) {
  const int d = spec.dim();
  if (!lo_in.empty()) {
    lo = lo_in;
    hi = hi_in;
    return;
  }
  lo.resize(d);
  hi.resize(d);
  for (int i = 0; i < d; ++i) {
    double c = 0.5 * (spec.lo[i] + spec.hi[i]), w = 0.5 * (spec.hi[i] - spec.lo[i]) * frac;
    lo[i] = c - w;
    hi[i] = c + w;
  }
}

}  // namespace detail

inline CertificateReport regularity_certificate(const MildSolutionGrid& sol, const RegularityPolicy& pol = {}) {
  const auto& spec = sol.spec();
  const int d = spec.dim(), m = sol.range();
  std::vector<double> lo, hi;
  detail::roi_box(spec, pol.roi_lo, pol.roi_hi, pol.roi_fraction, lo, hi);
  CertificateReport rep;
  rep.pairs = pol.pairs;
  std::mt19937_64 rng(pol.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::uniform_int_distribution<int> kd(0, spec.time_steps);
  double hmin = spec.spacing(0);
  for (int i = 1; i < d; ++i) hmin = std::min(hmin, spec.spacing(i));
  double diam = 0.0;
  for (int i = 0; i < d; ++i) diam = std::max(diam, hi[i] - lo[i]);
  std::vector<double> x(d), y(d), ux(m), uy(m);
  const double bound = 0.5 * (1.0 + pol.slack);
  for (std::size_t p = 0; p < pol.pairs; ++p) {
    double t = spec.time_at(kd(rng));
    for (int i = 0; i < d; ++i) x[i] = lo[i] + u01(rng) * (hi[i] - lo[i]);
    // Separations log-uniform between a quarter cell and the region size.
    double rho = std::exp(std::log(0.25 * hmin) + u01(rng) * (std::log(diam) - std::log(0.25 * hmin)));
    double n2 = 0.0;
    std::vector<double> z(d);
    for (int i = 0; i < d; ++i) {
      z[i] = 2 * u01(rng) - 1;
      n2 += z[i] * z[i];
    }
    double nz = std::sqrt(std::max(n2, 1e-300));
    for (int i = 0; i < d; ++i) y[i] = std::clamp(x[i] + rho * z[i] / nz, lo[i], hi[i]);
    double dist = 0.0;
    for (int i = 0; i < d; ++i) dist += (x[i] - y[i]) * (x[i] - y[i]);
    dist = std::sqrt(dist);
    if (dist == 0.0) continue;
    sol.u.eval(t, x, ux);
    sol.u.eval(t, y, uy);
    double du = 0.0;
    for (int c = 0; c < m; ++c) du += (ux[c] - uy[c]) * (ux[c] - uy[c]);
    double ratio = std::sqrt(du) / dist;
    rep.lipschitz_max = std::max(rep.lipschitz_max, ratio);
    if (ratio > bound) {
      ++rep.violations;
      if (rep.offending.size() < pol.max_reported) rep.offending.push_back({t, x, y, ratio});
    }
  }
  rep.lipschitz_ok = rep.violations == 0;

  // Time-Hoelder exponent of grad u from lags 1, 2, 4, ... slices.
  std::vector<std::size_t> nodes;
  {
    std::vector<double> xn(d);
    std::vector<std::size_t> inside;
    for (std::size_t s = 0; s < spec.space_size(); ++s) {
      spec.node(s, xn);
      bool ok = true;
      for (int i = 0; i < d; ++i) ok = ok && xn[i] >= lo[i] - 1e-12 && xn[i] <= hi[i] + 1e-12;
      if (ok) inside.push_back(s);
    }
    std::size_t step = std::max<std::size_t>(1, inside.size() / std::max<std::size_t>(1, pol.holder_nodes));
    for (std::size_t k = 0; k < inside.size(); k += step) nodes.push_back(inside[k]);
  }
  const int K = spec.time_steps, md = m * d;
  for (int lag = 1; lag < K; lag *= 2) {
    double worst = 0.0;
    for (int k = 0; k + lag <= K; ++k)
      for (std::size_t s : nodes) {
        double n2 = 0.0;
        for (int c = 0; c < md; ++c) {
          double a = sol.grad_u.at(k, s, c) - sol.grad_u.at(k + lag, s, c);
          n2 += a * a;
        }
        worst = std::max(worst, std::sqrt(n2));
      }
    rep.holder_dt.push_back(lag * spec.dt());
    rep.holder_diff.push_back(worst);
  }
  double top = *std::max_element(rep.holder_diff.begin(), rep.holder_diff.end());
  if (top < 1e-12) {
    rep.holder_trivial = true;
    rep.holder_ok = true;
    rep.holder_alpha = 1.0;
    rep.holder_r2 = 1.0;
  } else {
    ExponentFit fit = fit_exponent(rep.holder_dt, rep.holder_diff);
    rep.holder_alpha = fit.p;
    rep.holder_r2 = fit.r2;
    rep.holder_ok = fit.p > 0.0;
  }
  if (pol.p) {
    double p = *pol.p;
    rep.alpha_admissible_hi = std::min({0.5 * (p - d - 1), (p - d) / (d + 3.0), 1.0});
  }
  rep.pass = rep.lipschitz_ok && rep.holder_ok;
  return rep;
}

// ---------------------------------------------------------------------------
// Window exponent of |D^2 u|^2

struct HessianWindowResult {
  double fitted_q = 0.0;
  double r2 = 0.0;
  bool degenerate = false;
  bool pass = false;
  std::vector<double> radii, sup_values;
};

inline GridField hessian_norm_squared(MildSolutionGrid& sol) {
  const GridField& H = compute_hessian(sol);
  const auto& spec = sol.spec();
  GridField out(spec, 1);
  const int r = H.range_dim();
  const std::size_t P = spec.time_nodes() * spec.space_size();
  for (std::size_t p = 0; p < P; ++p) {
    double acc = 0.0;
    for (int c = 0; c < r; ++c) acc += H.data()[p * r + c] * H.data()[p * r + c];
    out.data()[p] = acc;
  }
  return out;
}

inline HessianWindowResult hessian_window_check(MildSolutionGrid& sol, std::span<const Anchor> probes,
                                                std::span<const double> radii, const WindowPolicy& wpol = {}) {
  const int d = sol.spec().dim();
  GridField h2 = hessian_norm_squared(sol);
  HessianWindowResult res;
  res.radii.assign(radii.begin(), radii.end());
  // Rounding-level Hessians (|D^2 u| < 1e-12) count as identically zero.
  double top = *std::max_element(h2.data().begin(), h2.data().end());
  if (top <= 1e-24) {
    res.degenerate = true;
    res.pass = true;
    res.sup_values.assign(radii.size(), 0.0);
    return res;
  }
  SpaceTimeField g = h2.as_field(sol.horizon);
  WindowScan scan = window_scan(g, probes, radii, wpol);
  res.sup_values = scan.sup_values;
  ExponentFit fit = fit_exponent(scan.radii, scan.sup_values);
  res.fitted_q = fit.p;
  res.r2 = fit.r2;
  res.pass = fit.p > d;
  return res;
}

// ---------------------------------------------------------------------------
// Convergence under mollification

struct MollifiedRow {
  int n = 0;
  double dist_u = 0.0, dist_grad = 0.0;
  int iterations = 0;
};

struct MollifiedConvergence {
  double T = 0.0;
  std::vector<MollifiedRow> rows;
  bool monotone = false;
};

inline double sup_distance(const GridField& a, const GridField& b, const std::vector<double>& lo,
                           const std::vector<double>& hi) {
  const auto& spec = a.spec();
  const int d = spec.dim(), r = a.range_dim();
  std::vector<double> x(d);
  double worst = 0.0;
  for (std::size_t s = 0; s < spec.space_size(); ++s) {
    spec.node(s, x);
    bool ok = true;
    for (int i = 0; i < d; ++i) ok = ok && x[i] >= lo[i] - 1e-12 && x[i] <= hi[i] + 1e-12;
    if (!ok) continue;
    for (int k = 0; k < spec.time_nodes(); ++k) {
      double n2 = 0.0;
      for (int c = 0; c < r; ++c) {
        double e = a.at(k, s, c) - b.at(k, s, c);
        n2 += e * e;
      }
      worst = std::max(worst, std::sqrt(n2));
    }
  }
  return worst;
}

/// Solves with (b_n, f_n) for each n and with (b, f) itself on a common horizon,
/// the one admissible for (b, f). Set same_source when f is b.
inline MollifiedConvergence mollified_convergence(const SpaceTimeField& b, const SpaceTimeField& f,
                                                  std::span<const int> n_list, const PdeGridSpec& grid,
                                                  bool same_source = false, const HorizonPolicy& hpol = {},
                                                  const PicardPolicy& ppol = {}, double roi_fraction = 0.5) {
  MollifiedConvergence res;
  ContractionBudget base = choose_horizon(b, f, hpol);
  res.T = base.T_star;
  MildSolutionGrid ref = picard_solve(b, f, base, grid, ppol);
  std::vector<double> lo, hi;
  detail::roi_box(ref.spec(), {}, {}, roi_fraction, lo, hi);
  for (int n : n_list) {
    SpaceTimeField bn = mollify(b, n);
    SpaceTimeField fn = same_source ? bn : mollify(f, n);
    ContractionBudget bud = budget_at(bn, fn, res.T, hpol);
    MildSolutionGrid s = picard_solve(bn, fn, bud, grid, ppol);
    res.rows.push_back({n, sup_distance(s.u, ref.u, lo, hi), sup_distance(s.grad_u, ref.grad_u, lo, hi),
                        s.iterations});
  }
  res.monotone = true;
  for (std::size_t k = 1; k < res.rows.size(); ++k)
    if (!(res.rows[k].dist_u < res.rows[k - 1].dist_u) || !(res.rows[k].dist_grad < res.rows[k - 1].dist_grad))
      res.monotone = false;
  return res;
}

}  // namespace katosde
