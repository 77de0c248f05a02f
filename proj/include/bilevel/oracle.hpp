#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "bilevel/common.hpp"
#include "bilevel/detail/barrier.hpp"
#include "bilevel/feasible.hpp"
#include "bilevel/system.hpp"

namespace bilevel::oracle {

/// Total utility of the given allocations: sum of buyer utilities at d plus
/// seller utilities of retained generation g - s. This is the quantity the
/// bilevel mechanism maximizes; the simulator evaluates it from the true
/// (hidden) utilities for reporting only.
inline double aggregator_welfare(const ala::AggregatorMarket& market, const Vec& d,
                                 const Vec& s) {
  if (d.size() != static_cast<Eigen::Index>(market.buyers.size()) ||
      s.size() != static_cast<Eigen::Index>(market.sellers.size()))
    throw DimensionError("aggregator_welfare: allocation sizes do not match population");
  double total = 0.0;
  for (size_t i = 0; i < market.buyers.size(); ++i) {
    if (d[i] < -1e-12) throw Error("aggregator_welfare: negative demand allocation");
    total += agents::utility_value(market.buyers[i].utility, std::max(d[i], 0.0));
  }
  for (size_t j = 0; j < market.sellers.size(); ++j) {
    double g = market.sellers[j].g;
    if (s[j] > g + 1e-9) throw Error("aggregator_welfare: supply exceeds generation capacity");
    double retained = std::clamp(g - s[j], 0.0, g);
    total += agents::utility_value(market.sellers[j].utility, retained);
  }
  return total;
}

inline double social_welfare(const System& sys, const std::vector<Vec>& demands,
                             const std::vector<Vec>& supplies) {
  if (demands.size() != sys.markets.size() || supplies.size() != sys.markets.size())
    throw DimensionError("social_welfare: allocation lists do not match aggregator count");
  double total = 0.0;
  for (size_t k = 0; k < sys.markets.size(); ++k)
    total += aggregator_welfare(sys.markets[k], demands[k], supplies[k]);
  return total;
}

/// Welfare-maximizing local allocation for allotment p_k, solved directly
/// from the agents' true utilities by bisection on the shared marginal
/// lambda (all trading buyers at u' = lambda, interior sellers at
/// v' = lambda, balance exact). Deliberately independent of the auction
/// iteration in bilevel::ala.
struct ClearingPoint {
  bool ok = false;
  double lambda = 0.0;   // shared marginal = local price
  Vec d, s;
  double welfare = 0.0;  // Theta_k(p_k)
  double curvature = 0.0;  // d lambda / d p_k (negative)
};

namespace detail_oracle {

inline double max_import(const ala::AggregatorMarket& m) {
  double total = 0.0;
  for (const auto& b : m.buyers) {
    double sat = agents::utility_saturation(b.utility);
    if (std::isinf(sat)) return std::numeric_limits<double>::infinity();
    total += sat;
  }
  return total;
}

inline void allocations_at(const ala::AggregatorMarket& m, double lambda, Vec& d, Vec& s) {
  for (size_t i = 0; i < m.buyers.size(); ++i)
    d[static_cast<Eigen::Index>(i)] =
        std::max(0.0, agents::inverse_marginal(m.buyers[i].utility, lambda));
  for (size_t j = 0; j < m.sellers.size(); ++j) {
    double retained = agents::inverse_marginal(m.sellers[j].utility, lambda);
    s[static_cast<Eigen::Index>(j)] = std::clamp(m.sellers[j].g - retained, 0.0, m.sellers[j].g);
  }
}

}  // namespace detail_oracle

inline ClearingPoint clear_market(const ala::AggregatorMarket& market, double p_k) {
  ClearingPoint pt;
  const int nb = static_cast<int>(market.buyers.size());
  const int ns = static_cast<int>(market.sellers.size());
  pt.d = Vec::Zero(nb);
  pt.s = Vec::Zero(ns);

  double ceiling = 1.0;
  for (const auto& b : market.buyers)
    ceiling = std::max(ceiling, agents::marginal_at_zero(b.utility));
  for (const auto& s : market.sellers)
    ceiling = std::max(ceiling, agents::marginal_at_zero(s.utility));

  double lo = 1e-12, hi = 2.0 * ceiling;
  Vec d(nb), s(ns);
  auto excess = [&](double lambda) {
    detail_oracle::allocations_at(market, lambda, d, s);
    return d.sum() - s.sum() - p_k;
  };

  if (excess(lo) < 0.0 || excess(hi) > 0.0) return pt;  // p_k outside the clearable range
  for (int it = 0; it < 300 && (hi - lo) > 1e-15 * hi; ++it) {
    double mid = 0.5 * (lo + hi);
    (excess(mid) > 0.0 ? lo : hi) = mid;
  }
  pt.lambda = 0.5 * (lo + hi);
  detail_oracle::allocations_at(market, pt.lambda, pt.d, pt.s);
  pt.welfare = aggregator_welfare(market, pt.d, pt.s);

  // dF/dlambda over the active set; lambda'(p) = 1/F'.
  double df = 0.0;
  for (int i = 0; i < nb; ++i)
    if (pt.d[i] > 1e-12) df += 1.0 / agents::utility_second(market.buyers[i].utility, pt.d[i]);
  for (int j = 0; j < ns; ++j) {
    double g = market.sellers[j].g;
    if (pt.s[j] > 1e-12 && pt.s[j] < g - 1e-12)
      df += 1.0 / agents::utility_second(market.sellers[j].utility, g - pt.s[j]);
  }
  pt.curvature = (df < -1e-12) ? 1.0 / df : -1e12;  // flat markets: steep fallback
  pt.ok = true;
  return pt;
}

struct OracleOptions {
  /// With coupling on, the budget constraint evaluates the prices
  /// self-consistently as the clearing prices lambda_k(p_k) of the candidate
  /// allotment. With coupling off, prices are frozen at c_init (or the
  /// zero-allotment clearing prices when c_init is empty).
  bool budget_coupling = true;
  Vec c_init;
  double t_max = 1e12;
};

struct OracleResult {
  Vec p;
  std::vector<Vec> d, s;
  double sw = 0.0;
  Vec c;                   // clearing prices at the optimum
  double kkt_residual = 0.0;  // normalized stationarity of the final solve
  double barrier_gap = 0.0;
  int price_rounds = 0;
  bool converged = false;
  std::string status;
};

/// Full-information social-welfare maximum over allocations and the
/// injection vector, subject to the same feasible region the mechanism
/// projects onto. Uses per-aggregator separability: for fixed p the inner
/// optimum is clear_market(p_k), so the outer problem is a smooth concave
/// maximization in p alone.
inline OracleResult solve_centralized(const System& sys, const Scenario& scenario,
                                      const OracleOptions& opt = {}) {
  const int a = sys.aggregators();
  OracleResult result;

  // Clearing cache: the barrier evaluates value/gradient/hessian at the
  // same iterate in sequence.
  struct Cache {
    Vec p;
    std::vector<ClearingPoint> pts;
    bool ok = false;
  };
  auto cache = std::make_shared<Cache>();
  auto clear_all = [&sys, cache, a](const Vec& p) -> bool {
    if (cache->p.size() == p.size() && cache->p == p) return cache->ok;
    cache->p = p;
    cache->pts.resize(a);
    cache->ok = true;
    for (int k = 0; k < a; ++k) {
      cache->pts[k] = clear_market(sys.markets[k], p[k]);
      if (!cache->pts[k].ok) cache->ok = false;
    }
    return cache->ok;
  };

  Vec c_frozen(a);
  if (opt.c_init.size() == a) {
    c_frozen = opt.c_init;
  } else {
    for (int k = 0; k < a; ++k) {
      auto pt = clear_market(sys.markets[k], 0.0);
      if (!pt.ok)
        throw ConfigError("oracle: market at node " + std::to_string(sys.markets[k].node) +
                          " cannot clear at zero allotment");
      c_frozen[k] = pt.lambda;
    }
  }

  bilevel::detail::SmoothObjective objective;
  objective.in_domain = [clear_all](const Vec& p) { return clear_all(p); };
  objective.value = [clear_all, cache](const Vec& p) {
    clear_all(p);
    double sw = 0.0;
    for (const auto& pt : cache->pts) sw += pt.welfare;
    return -sw;
  };
  objective.gradient = [clear_all, cache](const Vec& p) -> Vec {
    clear_all(p);
    Vec g(p.size());
    for (int k = 0; k < p.size(); ++k) g[k] = -cache->pts[k].lambda;
    return g;
  };
  objective.hessian = [clear_all, cache](const Vec& p) -> Mat {
    clear_all(p);
    Mat h = Mat::Zero(p.size(), p.size());
    for (int k = 0; k < p.size(); ++k)
      h(k, k) = std::clamp(-cache->pts[k].curvature, 1e-9, 1e12);
    return h;
  };

  auto region = feasible::build_region(sys.topo, sys.network, sys.theta(), c_frozen,
                                       scenario.c0b, scenario.beta0, scenario.s0_limit,
                                       scenario.delta);
  auto quads = feasible::region_constraints(region, !opt.budget_coupling);

  // Clearable-range constraints keep the barrier inside the welfare domain.
  for (int k = 0; k < a; ++k) {
    double gen = sys.markets[k].total_generation();
    bilevel::detail::QuadCon lower;
    lower.a = Vec::Zero(a);
    lower.a[k] = -1.0;
    lower.b = -gen * (1.0 - 1e-9);
    lower.scale = std::max(1.0, gen);
    quads.push_back(std::move(lower));

    double imp = detail_oracle::max_import(sys.markets[k]);
    if (std::isfinite(imp)) {
      bilevel::detail::QuadCon upper;
      upper.a = Vec::Zero(a);
      upper.a[k] = 1.0;
      upper.b = -imp * (1.0 - 1e-9);
      upper.scale = std::max(1.0, imp);
      quads.push_back(std::move(upper));
    }
  }

  // The self-consistent budget constraint: the prices inside it respond to
  // the allotment itself, c_k = lambda_k(p_k). Off the clearable domain the
  // value is a large positive wall so searches retreat.
  std::vector<bilevel::detail::GenCon> extras;
  if (opt.budget_coupling) {
    bilevel::detail::GenCon budget;
    double c0b = scenario.c0b, beta0 = scenario.beta0;
    budget.scale = feasible::scales::budget(region);
    budget.value = [clear_all, cache, c0b, beta0](const Vec& p) {
      if (!clear_all(p)) return 1e12;
      double total = p.sum(), rev = 0.0;
      for (int k = 0; k < p.size(); ++k) rev += cache->pts[k].lambda * p[k];
      return c0b * total - rev + beta0 * total * total;
    };
    budget.gradient = [clear_all, cache, c0b, beta0, a](const Vec& p) -> Vec {
      if (!clear_all(p)) return Vec::Zero(a);
      double total = p.sum();
      Vec g(a);
      for (int k = 0; k < a; ++k)
        g[k] = c0b - cache->pts[k].lambda - cache->pts[k].curvature * p[k] + 2.0 * beta0 * total;
      return g;
    };
    budget.hessian = [clear_all, cache, beta0, a](const Vec& p) -> Mat {
      Mat h = 2.0 * beta0 * Mat::Ones(a, a);
      if (!clear_all(p)) return h;
      for (int k = 0; k < a; ++k) {
        // local hyperbola model: lambda'' = 2 lambda'^2 / lambda
        const auto& pt = cache->pts[k];
        double lpp = pt.lambda > 1e-12 ? 2.0 * pt.curvature * pt.curvature / pt.lambda : 0.0;
        h(k, k) += std::max(0.0, -(lpp * p[k] + 2.0 * pt.curvature));
      }
      return h;
    };
    extras.push_back(std::move(budget));
  }

  Vec origin = Vec::Zero(a);
  Vec start;
  if (bilevel::detail::strictly_feasible(quads, extras, origin, 1e-10) && clear_all(origin)) {
    start = origin;
  } else {
    auto interior = bilevel::detail::phase_one(quads, extras, origin);
    if (!interior || !clear_all(*interior))
      throw SolverError("oracle: no strictly feasible clearable start", origin, 0.0);
    start = *interior;
  }

  bilevel::detail::BarrierOptions bopt;
  bopt.t0 = std::max(1e-4, static_cast<double>(quads.size() + extras.size()) /
                               std::max(1.0, std::abs(objective.value(start))));
  bopt.t_max = opt.t_max;
  auto sol = bilevel::detail::barrier_minimize(objective, quads, extras, start, bopt);
  if (!sol.converged)
    throw SolverError("oracle barrier did not converge", sol.x, sol.stationarity);

  result.p = sol.x;
  result.barrier_gap = sol.gap;
  {
    // Refit multipliers on the active set; 1/(t(-g)) loses digits when the
    // residual of an active constraint sits at its cancellation floor.
    Vec grad_f = objective.gradient(sol.x);
    double ref = std::max(1.0, grad_f.cwiseAbs().maxCoeff());
    std::vector<Vec> gradients;
    std::vector<int> index;
    const int mq = static_cast<int>(quads.size());
    for (int i = 0; i < mq + static_cast<int>(extras.size()); ++i) {
      Vec cg = i < mq ? quads[i].gradient(sol.x) : extras[i - mq].gradient(sol.x);
      if (sol.multipliers[i] * cg.cwiseAbs().maxCoeff() >= 1e-7 * ref) {
        gradients.push_back(std::move(cg));
        index.push_back(i);
      }
    }
    auto fit = bilevel::detail::refit_multipliers(grad_f, gradients, index,
                                                  mq + static_cast<int>(extras.size()));
    result.kkt_residual = fit.stationarity / ref;
  }
  result.price_rounds = 1;
  result.converged = true;
  result.status = opt.budget_coupling ? "self-consistent budget optimum"
                                      : "frozen-price optimum";

  result.c = Vec(a);
  result.d.resize(a);
  result.s.resize(a);
  clear_all(result.p);
  double sw = 0.0;
  for (int k = 0; k < a; ++k) {
    result.c[k] = cache->pts[k].lambda;
    result.d[k] = cache->pts[k].d;
    result.s[k] = cache->pts[k].s;
    sw += cache->pts[k].welfare;
  }
  result.sw = sw;
  return result;
}

}  // namespace bilevel::oracle
