#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "bilevel/agents.hpp"
#include "bilevel/common.hpp"

namespace bilevel::ala {

struct AlaConfig {
  double damping = 0.5;            // weight on the new price candidate
  double price_rel_tol = 1e-8;     // relative price-step tolerance
  double balance_tol_pu = 1e-6;    // |sum d - sum s - p_k|
  double money_rel_tol = 1e-9;     // budget identity, relative to max(1, sum b)
  double price_floor = 1e-9;       // cents/pu
  int floor_strike_limit = 10;
  int max_iterations = 100;
  double virtual_bid = std::numeric_limits<double>::infinity();  // s0
};

/// One aggregator's local market: its agent population and the reactive
/// ratio it reports alongside the price.
struct AggregatorMarket {
  int node = 0;
  double theta = 0.0;
  std::vector<agents::Buyer> buyers;
  std::vector<agents::Seller> sellers;

  double total_generation() const {
    double g = 0.0;
    for (const auto& s : sellers) g += s.g;
    return g;
  }
};

enum class AlaStatus { balanced, stalled, price_floor, iteration_cap };

struct AlaResult {
  double price = 0.0;  // c_k, cents/pu
  Vec demand;          // d, pu
  Vec supply;          // s, pu
  Vec bids;            // b, cents
  Vec seller_multipliers;  // gamma, cents/pu
  bool balanced = false;   // the a_k flag
  AlaStatus status = AlaStatus::iteration_cap;
  double theta = 0.0;
  int iterations = 0;
  double balance_residual = 0.0;  // pu
  double money_residual = 0.0;    // cents
};

struct TraceRow {
  int iteration;
  double price;
  double total_bids;
  double total_supply;
  double balance;
};

/// Price-taking clearing price c0 = sum(b) / (p_k + sum(s)). A nonpositive
/// denominator has no clearing interpretation and is reported as a stalled
/// market (nullopt).
inline std::optional<double> clearing_price(const Vec& bids, const Vec& offers, double p_k) {
  double tradable = p_k + offers.sum();
  if (!(tradable > 0.0)) return std::nullopt;
  return bids.sum() / tradable;
}

/// Two-step virtual-bid price. A finite s0 interpolates between c0 and the
/// raw proportional price; s0 = inf is the price-taking limit c0.
inline double virtual_price(double c0, const Vec& bids, const Vec& offers, double p_k,
                            double s0) {
  if (!(s0 > 0.0)) throw ConfigError("virtual bid size must be positive");
  if (std::isinf(s0)) return c0;
  double denom = p_k + s0 + offers.sum();
  if (!(denom > 0.0)) throw PriceDomainError("virtual price: nonpositive market volume");
  return (c0 * s0 + bids.sum()) / denom;
}

inline Vec proportional_allocate(const Vec& bids, double price) {
  if (!(price > 0.0)) throw PriceDomainError("proportional allocation needs a positive price");
  return bids / price;
}

/// Runs the aggregator-level auction for allotment p_k. The price iteration
/// is the damped proportional-allocation update; a bracket on the excess
/// demand sign, refined every iteration, guards the updates and takes over
/// by bisection when the fixed point is undefined (pure-export rounds) or
/// non-contractive.
inline AlaResult run_ala(const AggregatorMarket& market, double p_k, double c_init,
                         const AlaConfig& cfg = {},
                         std::vector<TraceRow>* trace = nullptr) {
  AlaResult res;
  res.theta = market.theta;
  const int nb = static_cast<int>(market.buyers.size());
  const int ns = static_cast<int>(market.sellers.size());
  res.demand = Vec::Zero(nb);
  res.supply = Vec::Zero(ns);
  res.bids = Vec::Zero(nb);
  res.seller_multipliers = Vec::Zero(ns);

  if (nb == 0 && ns == 0) {
    res.price = std::max(c_init, cfg.price_floor);
    res.balance_residual = -p_k;
    res.balanced = std::abs(p_k) <= cfg.balance_tol_pu;
    res.status = res.balanced ? AlaStatus::balanced : AlaStatus::stalled;
    return res;
  }

  double c = std::max(c_init, cfg.price_floor);
  double c_lo = 0.0;
  double c_hi = std::numeric_limits<double>::infinity();
  int floor_strikes = 0;
  // Oscillation-adaptive damping: the proportional update's local slope is
  // -(sum of active x)/(sum of bids) and can fall below -1, so a fixed
  // weight may cycle. Sign flips in the price step shrink the weight.
  double alpha = cfg.damping;
  double prev_step = 0.0;

  for (int it = 1; it <= cfg.max_iterations; ++it) {
    res.iterations = it;
    for (int i = 0; i < nb; ++i) {
      auto br = agents::buyer_best_response(market.buyers[i], c);
      res.demand[i] = br.demand;
      res.bids[i] = br.bid;
    }
    for (int j = 0; j < ns; ++j) {
      auto sr = agents::seller_best_response(market.sellers[j], c);
      res.supply[j] = sr.supply;
      res.seller_multipliers[j] = sr.multiplier;
    }
    double sum_d = res.demand.sum();
    double sum_s = res.supply.sum();
    double sum_b = res.bids.sum();
    double balance = sum_d - sum_s - p_k;
    double money = sum_b - c * p_k - c * sum_s;
    res.price = c;
    res.balance_residual = balance;
    res.money_residual = money;
    if (trace) trace->push_back({it, c, sum_b, sum_s, balance});

    double cand;
    auto c0 = clearing_price(res.bids, res.supply, p_k);
    if (c0.has_value())
      cand = virtual_price(*c0, res.bids, res.supply, p_k, cfg.virtual_bid);
    else
      cand = 2.0 * c;  // supply cannot cover the export duty: price must rise
    double c_next = (1.0 - alpha) * c + alpha * cand;

    // Excess demand means the clearing price lies above c, and vice versa;
    // the bracket takes over whenever the damped update would leave it.
    if (balance > 0.0)
      c_lo = std::max(c_lo, c);
    else if (balance < 0.0)
      c_hi = std::min(c_hi, c);

    if (c_next <= c_lo || c_next >= c_hi) {
      if (std::isinf(c_hi))
        c_next = 2.0 * std::max(c, c_lo);
      else if (c_lo > 0.0)
        c_next = std::sqrt(c_lo * c_hi);
      else
        c_next = 0.5 * (c_lo + c_hi);
    }

    double step = c_next - c;
    if (step * prev_step < 0.0)
      alpha = std::max(0.5 * alpha, 0.02);
    else if (step * prev_step > 0.0)
      alpha = std::min(1.2 * alpha, cfg.damping);
    prev_step = step;

    bool balance_ok = std::abs(balance) <= cfg.balance_tol_pu;
    bool money_ok = std::abs(money) <= cfg.money_rel_tol * std::max(1.0, sum_b);
    bool price_stable = std::abs(c_next - c) <= cfg.price_rel_tol * std::max(c, cfg.price_floor);
    bool no_trade = sum_d <= 1e-15 && sum_s <= 1e-15 && std::abs(p_k) <= cfg.balance_tol_pu;
    if (balance_ok && money_ok && (price_stable || no_trade)) {
      res.balanced = true;
      res.status = AlaStatus::balanced;
      return res;
    }

    if (c_next < cfg.price_floor) {
      c_next = cfg.price_floor;
      if (++floor_strikes >= cfg.floor_strike_limit) {
        res.status = AlaStatus::price_floor;
        return res;
      }
    } else {
      floor_strikes = 0;
    }
    c = c_next;
  }
  res.status = AlaStatus::iteration_cap;
  return res;
}

}  // namespace bilevel::ala
