#pragma once

#include <cmath>
#include <future>
#include <string>
#include <vector>

#include "bilevel/common.hpp"
#include "bilevel/feasible.hpp"
#include "bilevel/oracle.hpp"
#include "bilevel/system.hpp"

namespace bilevel::dla {

/// The master loop's mutable state between iterations.
struct DsoState {
  Vec p;      // current allotments
  Vec c;      // latest aggregator price reports (the SW gradient)
  Vec theta;  // latest reactive-ratio reports
  std::vector<char> flags;  // a_k from the completed round
  int iteration = 0;
  std::vector<double> sw_trajectory;
  double step_size = 2e-3;
  Vec warm_interior;  // strictly feasible point for the next projection
};

/// One projected-gradient step: p'' = p + eps c, then rebuild the constraint
/// parameters from the fresh reports and project p'' back into the region.
inline DsoState dla_step(DsoState state, const System& sys, const Scenario& scenario) {
  auto region = feasible::build_region(sys.topo, sys.network, state.theta, state.c,
                                       scenario.c0b, scenario.beta0, scenario.s0_limit,
                                       scenario.delta);
  Vec target = state.p + state.step_size * state.c;
  const Vec* warm = state.warm_interior.size() == state.p.size() ? &state.warm_interior : nullptr;
  auto proj = feasible::project_detailed(target, region, warm);
  state.p = proj.p;
  state.warm_interior = proj.interior;
  ++state.iteration;
  return state;
}

enum class Termination { converged, flag_false, iteration_cap };

inline std::string to_string(Termination t) {
  switch (t) {
    case Termination::converged: return "converged";
    case Termination::flag_false: return "flag_false";
    default: return "iteration_cap";
  }
}

struct IterationRecord {
  int iteration;
  double sw;
  double sum_p;
  double c0;
  Vec p;
  Vec c;
};

struct AlaTraceEntry {
  int dla_iteration;
  int node;
  ala::TraceRow row;
};

struct AuctionResult {
  Vec p;      // final allotment (output of the last projection)
  Vec c;      // aggregator prices the final projection was built against
  Vec theta;
  std::vector<Vec> demand, supply, bids;  // from the round that produced c
  std::vector<double> sw_trajectory;
  double dso_profit = 0.0;  // c.p - c0 sum(p), cents
  double wholesale = 0.0;   // c0 at the final allotment
  feasible::ConstraintReport constraints;
  Termination termination = Termination::iteration_cap;
  int iterations = 0;
  int flagged_node = -1;  // node whose auction returned a_k = F, if any
  double flagged_allotment = 0.0;
  std::vector<IterationRecord> records;
};

namespace detail_dla {

struct Round {
  std::vector<ala::AlaResult> results;
  Vec c;
  bool all_balanced = true;
  int failed_index = -1;
  double sw = 0.0;
};

inline Round run_round(const System& sys, const Vec& p, const Vec& warm_prices,
                       const ala::AlaConfig& cfg, bool parallel, int dla_iteration,
                       std::vector<AlaTraceEntry>* trace) {
  const int a = sys.aggregators();
  Round round;
  round.results.resize(a);
  round.c = Vec::Zero(a);

  std::vector<std::vector<ala::TraceRow>> local(trace ? a : 0);
  auto solve_one = [&](int k) {
    round.results[k] = ala::run_ala(sys.markets[k], p[k], warm_prices[k], cfg,
                                    trace ? &local[k] : nullptr);
  };
  if (parallel && a > 1) {
    std::vector<std::future<void>> jobs;
    jobs.reserve(a);
    for (int k = 0; k < a; ++k)
      jobs.push_back(std::async(std::launch::async, solve_one, k));
    for (auto& j : jobs) j.get();
  } else {
    for (int k = 0; k < a; ++k) solve_one(k);
  }

  std::vector<Vec> d(a), s(a);
  for (int k = 0; k < a; ++k) {
    round.c[k] = round.results[k].price;
    d[k] = round.results[k].demand;
    s[k] = round.results[k].supply;
    if (!round.results[k].balanced && round.failed_index < 0) round.failed_index = k;
  }
  round.all_balanced = round.failed_index < 0;
  round.sw = oracle::social_welfare(sys, d, s);
  if (trace)
    for (int k = 0; k < a; ++k)
      for (const auto& row : local[k]) trace->push_back({dla_iteration, sys.markets[k].node, row});
  return round;
}

inline void attach_round(AuctionResult& out, const Round& round) {
  const size_t a = round.results.size();
  out.demand.resize(a);
  out.supply.resize(a);
  out.bids.resize(a);
  for (size_t k = 0; k < a; ++k) {
    out.demand[k] = round.results[k].demand;
    out.supply[k] = round.results[k].supply;
    out.bids[k] = round.results[k].bids;
  }
}

}  // namespace detail_dla

/// Runs the DSO-level auction to termination. Every iteration fans out the
/// aggregator auctions at the current allotment, reads back prices and
/// flags, takes a projected-gradient step on the welfare, and stops on
/// convergence, any a_k = F (the constrained-optimum signal), or the cap.
///
/// Two stabilizers guard the frozen-price budget constraint:
///  - the prices inside the region are exponentially smoothed reports
///    (fresh reports would make the projection over-correct and can lock
///    the loop into a limit cycle);
///  - a projection whose displacement dwarfs the gradient step signals a
///    discontinuous region change (the beta0 = 0 budget halfspace flipping
///    sign); the move is trust-limited and the step size decays.
inline AuctionResult run_dla(const System& sys, const Scenario& scenario,
                             std::vector<AlaTraceEntry>* trace = nullptr) {
  sys.validate();
  const int a = sys.aggregators();
  const auto ala_cfg = scenario.ala_config();
  const Vec theta = sys.theta();

  AuctionResult out;
  out.theta = theta;

  auto record = [&out, &scenario](int iter, const detail_dla::Round& round, const Vec& p) {
    out.sw_trajectory.push_back(round.sw);
    out.records.push_back({iter, round.sw, p.sum(),
                           feasible::wholesale_price(scenario.c0b, scenario.beta0, p), p,
                           round.c});
  };

  auto make_region = [&](const Vec& prices) {
    return feasible::build_region(sys.topo, sys.network, theta, prices, scenario.c0b,
                                  scenario.beta0, scenario.s0_limit, scenario.delta);
  };

  auto finalize = [&](Termination why, Vec p_final, const Vec& c_final,
                      const detail_dla::Round& alloc_round, int iterations) {
    auto region = make_region(c_final);
    auto rep = feasible::evaluate_constraints(p_final, region, scenario.tol.feasibility);
    double volt = std::max(rep.voltage_low.size() ? rep.voltage_low.maxCoeff() : 0.0,
                           rep.voltage_high.size() ? rep.voltage_high.maxCoeff() : 0.0);
    bool off = rep.transformer > 1e-6 || rep.lines.maxCoeff() > 1e-6 || volt > 1e-6 ||
               rep.budget > 1e-6;
    if (off) {
      // Settle against the reported prices so the final state is feasible
      // for the region it is evaluated on.
      p_final = feasible::project_detailed(p_final, region).p;
      rep = feasible::evaluate_constraints(p_final, region, scenario.tol.feasibility);
    }
    out.termination = why;
    out.iterations = iterations;
    out.p = p_final;
    out.c = c_final;
    detail_dla::attach_round(out, alloc_round);
    out.constraints = rep;
    out.wholesale = feasible::wholesale_price(scenario.c0b, scenario.beta0, p_final);
    out.dso_profit = -feasible::budget_residual(p_final, c_final, scenario.c0b, scenario.beta0);
    return out;
  };

  Vec p = Vec::Zero(a);
  Vec warm_prices = Vec::Constant(a, scenario.c0b);
  auto round = detail_dla::run_round(sys, p, warm_prices, ala_cfg, scenario.parallel_ala, 0,
                                     trace);
  record(0, round, p);
  if (!round.all_balanced) {
    out.flagged_node = sys.markets[round.failed_index].node;
    out.flagged_allotment = 0.0;
    return finalize(Termination::flag_false, p, round.c, round, 0);
  }

  Vec region_prices = round.c;
  double eps_eff = scenario.step_size;
  const double eps_floor = scenario.step_size / 65536.0;
  Vec warm_interior;
  Vec prev_dp;
  for (int iter = 1; iter <= scenario.caps.dla; ++iter) {
    // Constraint parameters are rebuilt every iteration from the reports.
    auto region = make_region(region_prices);

    double eps = eps_eff;
    const Vec* warm = warm_interior.size() == a ? &warm_interior : nullptr;
    // Violation of the budget against the *fresh* reports; restoring it is
    // as acceptable to the backtracking rule as improving the welfare.
    double viol_now = std::max(
        0.0, feasible::budget_residual(p, round.c, scenario.c0b, scenario.beta0));
    Vec p_cand;
    detail_dla::Round next;
    bool flipped = false;
    bool accepted = false;
    for (int trial = 0; trial < (scenario.armijo ? 9 : 1); ++trial) {
      auto proj = feasible::project_detailed(p + eps * round.c, region, warm);
      double move = (proj.p - p).norm();
      double ref = std::max(eps * round.c.norm(), 1e-9);
      if (move > 4.0 * ref) {
        // region changed discontinuously; approach it instead of jumping
        p_cand = p + (4.0 * ref / move) * (proj.p - p);
        flipped = true;
        warm_interior.resize(0);
      } else {
        p_cand = proj.p;
        flipped = false;
        warm_interior = proj.interior;
      }
      next = detail_dla::run_round(sys, p_cand, round.c, ala_cfg, scenario.parallel_ala, iter,
                                   trace);
      if (!next.all_balanced) break;  // a_k = F exits regardless of step size
      if (!scenario.armijo) {
        accepted = true;
        break;
      }
      // Backtracking accepts a step that improves the welfare without
      // freshly violating the budget, or one that restores feasibility.
      double viol_next = std::max(
          0.0, feasible::budget_residual(p_cand, next.c, scenario.c0b, scenario.beta0));
      double viol_tol = 1e-9 * feasible::scales::budget(region);
      if (next.sw >= round.sw - 1e-9 && viol_next <= viol_now + viol_tol) {
        accepted = true;
        break;
      }
      if (viol_now > viol_tol && viol_next < viol_now) {
        accepted = true;
        break;
      }
      eps *= 0.5;
    }
    record(iter, next, p_cand);

    if (!next.all_balanced) {
      out.flagged_node = sys.markets[next.failed_index].node;
      out.flagged_allotment = p_cand[next.failed_index];
      return finalize(Termination::flag_false, p_cand, round.c, round, iter);
    }
    (void)accepted;  // armijo exhaustion falls through with the smallest step

    // Oscillating steps mean the effective loop gain is too high for this
    // population's price sensitivity; shrink the step and let aligned
    // progress earn it back.
    Vec dp = p_cand - p;
    bool reversed = prev_dp.size() == a && dp.dot(prev_dp) < 0.0;
    if (flipped)
      eps_eff = std::max(0.5 * eps_eff, eps_floor);
    else if (reversed)
      eps_eff = std::max(0.6 * eps_eff, eps_floor);
    else
      eps_eff = std::min(1.03 * eps_eff, scenario.step_size);
    prev_dp = dp;

    double p_step = dp.cwiseAbs().maxCoeff();
    double c_step = 0.0;
    for (int k = 0; k < a; ++k)
      c_step = std::max(c_step,
                        std::abs(next.c[k] - round.c[k]) / std::max(round.c[k], 1e-12));

    p = p_cand;
    round = next;
    region_prices =
        (1.0 - scenario.price_smoothing) * region_prices + scenario.price_smoothing * round.c;

    // A trust-capped round is mid-restoration, never a settled state.
    if (!flipped && p_step <= scenario.tol.p_step_pu && c_step <= scenario.tol.price_rel)
      return finalize(Termination::converged, p, round.c, round, iter);
  }
  return finalize(Termination::iteration_cap, p, round.c, round, scenario.caps.dla);
}

}  // namespace bilevel::dla
