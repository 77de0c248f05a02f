#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "bilevel/ala.hpp"
#include "bilevel/common.hpp"
#include "bilevel/grid.hpp"

namespace bilevel {

/// A network plus the agent populations attached to its aggregator nodes,
/// ordered like network.aggregator_nodes.
struct System {
  grid::RadialNetwork network;
  grid::TopologyMatrices topo;
  std::vector<ala::AggregatorMarket> markets;

  int aggregators() const { return static_cast<int>(markets.size()); }

  Vec theta() const {
    Vec t(aggregators());
    for (int k = 0; k < aggregators(); ++k) t[k] = markets[k].theta;
    return t;
  }

  void validate() const {
    network.validate();
    if (network.aggregator_count() == 0) throw ConfigError("no aggregator nodes configured");
    if (static_cast<int>(markets.size()) != network.aggregator_count())
      throw ConfigError("agent populations do not cover all aggregator nodes");
    for (int k = 0; k < aggregators(); ++k) {
      if (markets[k].node != network.aggregator_nodes[k])
        throw ConfigError("market order does not match aggregator node order at position " +
                          std::to_string(k));
      if (markets[k].buyers.empty() && markets[k].sellers.empty())
        throw ConfigError("aggregator at node " + std::to_string(markets[k].node) +
                          " has no agents");
    }
  }
};

inline System make_system(grid::RadialNetwork network,
                          std::vector<ala::AggregatorMarket> markets) {
  System sys;
  sys.network = std::move(network);
  sys.topo = grid::build_topology(sys.network);
  sys.markets = std::move(markets);
  sys.validate();
  return sys;
}

struct Tolerances {
  double balance_pu = 1e-6;
  double p_step_pu = 1e-5;
  double price_rel = 1e-6;
  double feasibility = 1e-8;
};

struct IterationCaps {
  int dla = 500;
  int ala = 100;
};

/// Market-level configuration for one run: wholesale price model,
/// substation limit, voltage band, step size, solver tolerances.
struct Scenario {
  std::string name = "custom";
  double c0b = 200.0;    // base wholesale price, cents/pu
  double beta0 = 10.0;   // price elasticity, cents/pu^2
  double s0_limit = 25.0;  // substation transformer MVA limit, pu
  double delta = 0.05;   // max voltage deviation, pu
  double step_size = 2e-3;  // gradient step, pu per (cents/pu)
  bool armijo = false;
  /// Weight of the freshest price reports in the budget-constraint prices.
  /// The gradient always uses the fresh reports; averaging only the
  /// constraint parameter damps the projection's over-correction feedback.
  double price_smoothing = 0.35;
  double virtual_bid = std::numeric_limits<double>::infinity();
  double ala_damping = 0.5;
  bool parallel_ala = false;
  Tolerances tol;
  IterationCaps caps;
  std::uint64_t seed = 1;
  double power_base_kva = 100.0;

  ala::AlaConfig ala_config() const {
    ala::AlaConfig cfg;
    cfg.damping = ala_damping;
    cfg.balance_tol_pu = tol.balance_pu;
    cfg.max_iterations = caps.ala;
    cfg.virtual_bid = virtual_bid;
    return cfg;
  }
};

/// The four published parameter sets.
inline Scenario scenario_preset(std::string_view name) {
  Scenario s;
  s.name = std::string(name);
  if (name == "scenario-1") {
    s.c0b = 800.0;
    s.beta0 = 40.0;
    s.s0_limit = 25.0;
  } else if (name == "scenario-2") {
    s.c0b = 200.0;
    s.beta0 = 30.0;
    s.s0_limit = 25.0;
  } else if (name == "scenario-3") {
    s.c0b = 200.0;
    s.beta0 = 10.0;
    s.s0_limit = 25.0;
  } else if (name == "scenario-4") {
    s.c0b = 200.0;
    s.beta0 = 0.0;
    s.s0_limit = 40.0;
  } else {
    throw ConfigError("unknown scenario preset: " + std::string(name));
  }
  return s;
}

inline bool is_scenario_preset(std::string_view name) {
  return name == "scenario-1" || name == "scenario-2" || name == "scenario-3" ||
         name == "scenario-4";
}

}  // namespace bilevel
