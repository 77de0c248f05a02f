#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bilevel/common.hpp"
#include "bilevel/detail/barrier.hpp"
#include "bilevel/grid.hpp"

namespace bilevel::feasible {

/// The feasible allocation set: transformer and line MVA quadratics,
/// voltage-sensitivity box, and the DSO budget-balance constraint, all in
/// terms of the aggregator injection vector p. Prices c are frozen at the
/// most recent aggregator reports.
struct FeasibleRegion {
  Mat Z0;               // A x A transformer quadratic
  std::vector<Mat> Zk;  // per-line quadratics, one per node
  Mat M;                // N x A voltage sensitivity
  Vec v_lower, v_upper; // bounds on M p
  double s0_limit = 0.0;
  Vec line_limits;
  double c0b = 0.0;
  double beta0 = 0.0;
  Vec c;
  double delta = 0.0;

  int aggregators() const { return static_cast<int>(Z0.rows()); }
  int nodes() const { return static_cast<int>(Zk.size()); }
};

/// Z0 = 1 1' + theta theta', so p' Z0 p = (sum p)^2 + (theta . p)^2.
inline Mat transformer_matrix(const Vec& theta) {
  const int a = static_cast<int>(theta.size());
  Vec ones = Vec::Ones(a);
  return ones * ones.transpose() + theta * theta.transpose();
}

/// Z_k = A'D'E_k D A + diag(theta) A'D'E_k D A diag(theta); p' Z_k p equals
/// P_k^2 + Q_k^2 for the flows of branch_flows.
inline Mat line_matrix(int node, const grid::TopologyMatrices& topo, const Vec& theta) {
  if (node < 1 || node > topo.nodes())
    throw DimensionError("line_matrix: node " + std::to_string(node) + " out of range");
  if (theta.size() != topo.aggregators())
    throw DimensionError("line_matrix: theta size does not match aggregator count");
  // Row k of DA, as a column vector; E_k makes the quadratic rank-2.
  Vec w = (topo.D * topo.A).row(node - 1).transpose();
  Vec wq = theta.cwiseProduct(w);
  return w * w.transpose() + wq * wq.transpose();
}

/// Bounds l on M p equivalent to (1 - delta) <= V <= (1 + delta) given
/// V = V0 1 - M p.
inline std::pair<Vec, Vec> voltage_bounds(const grid::RadialNetwork& net, double delta) {
  if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("delta must lie in (0, 1)");
  const int n = net.node_count;
  Vec lower = Vec::Constant(n, net.v0_pu - 1.0 - delta);
  Vec upper = Vec::Constant(n, net.v0_pu - 1.0 + delta);
  return {std::move(lower), std::move(upper)};
}

/// c0 = c0b + beta0 sum(p).
inline double wholesale_price(double c0b, double beta0, const Vec& p) {
  return c0b + beta0 * p.sum();
}

/// c0b 1'p - c'p + beta0 (1'p)^2; nonpositive means weakly budget balanced.
inline double budget_residual(const Vec& p, const Vec& c, double c0b, double beta0) {
  if (c.size() != p.size()) throw DimensionError("budget_residual: price/injection size mismatch");
  double total = p.sum();
  return c0b * total - c.dot(p) + beta0 * total * total;
}

inline FeasibleRegion build_region(const grid::TopologyMatrices& topo,
                                   const grid::RadialNetwork& net, const Vec& theta,
                                   const Vec& c, double c0b, double beta0,
                                   double s0_limit, double delta) {
  if (theta.size() != topo.aggregators() || c.size() != topo.aggregators())
    throw DimensionError("build_region: theta/c size does not match aggregator count");
  if (s0_limit <= 0.0) throw ConfigError("transformer limit must be positive");
  FeasibleRegion region;
  region.Z0 = transformer_matrix(theta);
  region.Zk.reserve(topo.nodes());
  for (int k = 1; k <= topo.nodes(); ++k) region.Zk.push_back(line_matrix(k, topo, theta));
  region.M = grid::voltage_sensitivity(topo, net, theta);
  std::tie(region.v_lower, region.v_upper) = voltage_bounds(net, delta);
  region.s0_limit = s0_limit;
  region.line_limits = net.line_limits();
  region.c0b = c0b;
  region.beta0 = beta0;
  region.c = c;
  region.delta = delta;
  return region;
}

namespace scales {
inline double transformer(const FeasibleRegion& r) { return std::max(1.0, r.s0_limit * r.s0_limit); }
inline double line(const FeasibleRegion& r, int k) {
  return std::max(1.0, r.line_limits[k] * r.line_limits[k]);
}
inline double voltage(const FeasibleRegion& r) { return std::max(1e-3, r.delta); }
inline double budget(const FeasibleRegion& r) {
  double price = std::abs(r.c0b) + (r.c.size() ? r.c.cwiseAbs().maxCoeff() : 0.0);
  return std::max(1.0, price * std::max(1.0, r.s0_limit));
}
}  // namespace scales

enum class ConstraintKind { transformer, line, voltage_low, voltage_high, budget };

struct ActiveConstraint {
  ConstraintKind kind;
  int index;  // node for line/voltage constraints, else 0
  double residual;
};

struct ConstraintReport {
  double transformer = 0.0;  // p'Z0 p - S0^2, pu^2
  Vec lines;                 // p'Zk p - Sk^2, pu^2
  Vec voltage_low;           // v_lower - M p, pu
  Vec voltage_high;          // M p - v_upper, pu
  double budget = 0.0;       // cents
  double worst_scaled = 0.0;
  bool feasible = false;
  std::vector<ActiveConstraint> active;
};

inline ConstraintReport evaluate_constraints(const Vec& p, const FeasibleRegion& region,
                                             double feas_tol = 1e-8,
                                             double activity_tol = 1e-6) {
  if (p.size() != region.aggregators())
    throw DimensionError("evaluate_constraints: injection size mismatch");
  ConstraintReport rep;
  rep.transformer = p.dot(region.Z0 * p) - region.s0_limit * region.s0_limit;

  const int n = region.nodes();
  rep.lines.resize(n);
  for (int k = 0; k < n; ++k)
    rep.lines[k] = p.dot(region.Zk[k] * p) - region.line_limits[k] * region.line_limits[k];

  Vec mp = region.M * p;
  rep.voltage_low = region.v_lower - mp;
  rep.voltage_high = mp - region.v_upper;
  rep.budget = budget_residual(p, region.c, region.c0b, region.beta0);

  rep.worst_scaled = rep.transformer / scales::transformer(region);
  auto update = [&rep](double scaled) { rep.worst_scaled = std::max(rep.worst_scaled, scaled); };
  for (int k = 0; k < n; ++k) update(rep.lines[k] / scales::line(region, k));
  for (int k = 0; k < n; ++k) {
    update(rep.voltage_low[k] / scales::voltage(region));
    update(rep.voltage_high[k] / scales::voltage(region));
  }
  update(rep.budget / scales::budget(region));
  rep.feasible = rep.worst_scaled <= feas_tol;

  auto mark = [&](ConstraintKind kind, int idx, double residual) {
    if (std::abs(residual) <= activity_tol)
      rep.active.push_back({kind, idx, residual});
  };
  mark(ConstraintKind::transformer, 0, rep.transformer);
  for (int k = 0; k < n; ++k) mark(ConstraintKind::line, k + 1, rep.lines[k]);
  for (int k = 0; k < n; ++k) {
    mark(ConstraintKind::voltage_low, k + 1, rep.voltage_low[k]);
    mark(ConstraintKind::voltage_high, k + 1, rep.voltage_high[k]);
  }
  mark(ConstraintKind::budget, 0, rep.budget);
  return rep;
}

/// Constraint list in a fixed order: transformer, lines 1..N, voltage upper
/// 1..N, voltage lower 1..N, budget (unless excluded). Solver-facing scales
/// use a tiny floor so that regions with very small limits still admit a
/// certified interior.
inline std::vector<detail::QuadCon> region_constraints(const FeasibleRegion& region,
                                                       bool include_budget = true) {
  const int a = region.aggregators();
  const int n = region.nodes();
  std::vector<detail::QuadCon> cons;
  cons.reserve(2 * n + n + 2);

  detail::QuadCon transformer;
  transformer.H = region.Z0;
  transformer.a = Vec::Zero(a);
  transformer.b = -region.s0_limit * region.s0_limit;
  transformer.scale = std::max(1e-9, region.s0_limit * region.s0_limit);
  cons.push_back(std::move(transformer));

  for (int k = 0; k < n; ++k) {
    detail::QuadCon line;
    line.H = region.Zk[k];
    line.a = Vec::Zero(a);
    line.b = -region.line_limits[k] * region.line_limits[k];
    line.scale = std::max(1e-9, region.line_limits[k] * region.line_limits[k]);
    cons.push_back(std::move(line));
  }
  for (int k = 0; k < n; ++k) {
    detail::QuadCon up;
    up.a = region.M.row(k).transpose();
    up.b = -region.v_upper[k];
    up.scale = scales::voltage(region);
    cons.push_back(std::move(up));
  }
  for (int k = 0; k < n; ++k) {
    detail::QuadCon low;
    low.a = -region.M.row(k).transpose();
    low.b = region.v_lower[k];
    low.scale = scales::voltage(region);
    cons.push_back(std::move(low));
  }

  if (include_budget) {
    detail::QuadCon budget;
    budget.a = Vec::Constant(a, region.c0b) - region.c;
    budget.b = 0.0;
    budget.scale = scales::budget(region);
    if (region.beta0 != 0.0) budget.H = region.beta0 * Mat::Ones(a, a);
    cons.push_back(std::move(budget));
  }
  return cons;
}

struct ProjectionOptions {
  double t_max = 1e13;
  bool polish = true;
  double member_tol = 1e-12;  // scaled residual below which target is returned as-is
};

struct ProjectionResult {
  Vec p;             // projected point (polished when possible)
  Vec interior;      // strictly feasible barrier iterate, for warm starts
  Vec multipliers;   // per constraint, region_constraints order
  double kkt_residual = 0.0;
  double distance = 0.0;
  bool polished = false;
  int newton_steps = 0;
};

namespace detail_proj {

inline double kkt_residual(const Vec& p, const Vec& target,
                           const std::vector<bilevel::detail::QuadCon>& cons,
                           const Vec& mult) {
  Vec stat = 2.0 * (p - target);
  double comp = 0.0, primal = 0.0, dual = 0.0;
  for (size_t i = 0; i < cons.size(); ++i) {
    double g = cons[i].value(p);
    stat += mult[i] * cons[i].gradient(p);
    comp = std::max(comp, std::abs(mult[i] * g));
    primal = std::max(primal, g / cons[i].scale);
    dual = std::max(dual, -mult[i]);
  }
  double r = stat.cwiseAbs().maxCoeff();
  return std::max({r, comp, primal, dual});
}

/// Newton refinement of the projection KKT system on a fixed active set.
/// Returns nullopt when the refinement is inconsistent (wrong set, singular
/// system, negative multipliers).
inline std::optional<std::pair<Vec, Vec>> polish_active_set(
    const Vec& target, const std::vector<bilevel::detail::QuadCon>& cons,
    const std::vector<int>& active, const Vec& p0, const Vec& mult0) {
  const int n = static_cast<int>(p0.size());
  const int m = static_cast<int>(active.size());
  Vec p = p0;
  Vec mu(m);
  for (int i = 0; i < m; ++i) mu[i] = std::max(mult0[active[i]], 0.0);

  for (int it = 0; it < 12; ++it) {
    Vec res(n + m);
    Vec stat = 2.0 * (p - target);
    for (int i = 0; i < m; ++i) stat += mu[i] * cons[active[i]].gradient(p);
    res.head(n) = stat;
    for (int i = 0; i < m; ++i) res[n + i] = cons[active[i]].value(p);

    if (res.cwiseAbs().maxCoeff() < 1e-13) break;

    Mat kkt = Mat::Zero(n + m, n + m);
    Mat hess = 2.0 * Mat::Identity(n, n);
    for (int i = 0; i < m; ++i)
      if (cons[active[i]].quadratic()) hess += 2.0 * mu[i] * cons[active[i]].H;
    kkt.topLeftCorner(n, n) = hess;
    for (int i = 0; i < m; ++i) {
      Vec g = cons[active[i]].gradient(p);
      kkt.block(0, n + i, n, 1) = g;
      kkt.block(n + i, 0, 1, n) = g.transpose();
    }

    Eigen::FullPivLU<Mat> lu(kkt);
    if (!lu.isInvertible()) return std::nullopt;
    Vec step = lu.solve(-res);
    p += step.head(n);
    mu += step.tail(m);
  }

  for (int i = 0; i < m; ++i) {
    if (mu[i] < -1e-9) return std::nullopt;
    mu[i] = std::max(mu[i], 0.0);
  }
  // The refined point must not step outside any inactive constraint.
  for (size_t i = 0; i < cons.size(); ++i) {
    bool is_active = std::find(active.begin(), active.end(), static_cast<int>(i)) != active.end();
    double limit = is_active ? 1e-10 * cons[i].scale : 1e-12 * cons[i].scale;
    if (cons[i].value(p) > limit) return std::nullopt;
  }
  Vec full = Vec::Zero(static_cast<int>(cons.size()));
  for (int i = 0; i < m; ++i) full[active[i]] = mu[i];
  return std::make_pair(p, full);
}

}  // namespace detail_proj

/// Euclidean projection onto the feasible region. Warm start, when given,
/// must come from a previous projection's `interior` point.
inline ProjectionResult project_detailed(const Vec& target, const FeasibleRegion& region,
                                         const Vec* warm = nullptr,
                                         const ProjectionOptions& opt = {}) {
  if (target.size() != region.aggregators())
    throw DimensionError("project: target size does not match aggregator count");
  auto cons = region_constraints(region);

  ProjectionResult result;
  result.multipliers = Vec::Zero(static_cast<int>(cons.size()));

  bool member = true;
  for (const auto& c : cons)
    if (c.value(target) > opt.member_tol * c.scale) {
      member = false;
      break;
    }
  if (member) {
    result.p = target;
    result.interior = target;
    result.distance = 0.0;
    return result;
  }

  // The origin must be feasible for the region to make sense at all.
  Vec origin = Vec::Zero(target.size());
  bool origin_ok = true;
  for (const auto& c : cons)
    if (c.value(origin) > 1e-9 * c.scale) {
      origin_ok = false;
      break;
    }
  if (!origin_ok)
    throw ConfigError("feasible region does not contain the zero allocation; "
                      "check voltage bounds and limits");

  Vec start;
  if (warm && warm->size() == target.size() &&
      bilevel::detail::strictly_feasible(cons, *warm, 1e-10)) {
    start = *warm;
  } else if (bilevel::detail::strictly_feasible(cons, origin, 1e-10)) {
    start = origin;
  } else {
    auto interior = bilevel::detail::phase_one(cons, origin);
    if (!interior)
      throw SolverError("projection: feasible region has numerically empty interior", origin,
                        0.0);
    start = *interior;
  }

  bilevel::detail::SmoothObjective dist;
  dist.value = [&target](const Vec& p) { return (p - target).squaredNorm(); };
  dist.gradient = [&target](const Vec& p) -> Vec { return 2.0 * (p - target); };
  dist.hessian = [&target](const Vec& p) -> Mat {
    return 2.0 * Mat::Identity(p.size(), p.size());
  };

  bilevel::detail::BarrierOptions bopt;
  bopt.t0 = 1.0;
  bopt.t_max = opt.t_max;
  auto sol = bilevel::detail::barrier_minimize(dist, cons, start, bopt);
  if (!sol.converged)
    throw SolverError("projection barrier did not converge: " + sol.message, sol.x,
                      sol.stationarity);

  result.p = sol.x;
  result.interior = sol.x;
  result.multipliers = sol.multipliers;
  result.newton_steps = sol.newton_steps;

  if (opt.polish) {
    std::vector<int> active;
    for (size_t i = 0; i < cons.size(); ++i)
      if (cons[i].value(sol.x) > -1e-6 * cons[i].scale) active.push_back(static_cast<int>(i));
    if (!active.empty()) {
      auto polished = detail_proj::polish_active_set(target, cons, active, sol.x,
                                                     sol.multipliers);
      if (polished) {
        result.p = polished->first;
        result.multipliers = polished->second;
        result.polished = true;
      }
    }
  }

  result.kkt_residual = detail_proj::kkt_residual(result.p, target, cons, result.multipliers);
  result.distance = (result.p - target).norm();
  return result;
}

inline Vec project(const Vec& target, const FeasibleRegion& region) {
  return project_detailed(target, region).p;
}

}  // namespace bilevel::feasible
