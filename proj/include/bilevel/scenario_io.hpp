#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "bilevel/common.hpp"
#include "bilevel/dla.hpp"
#include "bilevel/oracle.hpp"
#include "bilevel/system.hpp"

namespace bilevel::io {

using nlohmann::json;

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

inline std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Network files

inline json network_to_json(const grid::RadialNetwork& net) {
  json lines = json::array();
  for (const auto& l : net.lines_by_node())
    lines.push_back({{"node", l.node},
                     {"parent", l.parent},
                     {"r_pu", l.r_pu},
                     {"x_pu", l.x_pu},
                     {"mva_limit_pu", l.mva_limit_pu}});
  return json{{"v0_pu", net.v0_pu},
              {"s0_limit_pu", net.s0_limit_pu},
              {"aggregator_nodes", net.aggregator_nodes},
              {"lines", lines}};
}

inline grid::RadialNetwork network_from_json(const json& j) {
  grid::RadialNetwork net;
  try {
    net.v0_pu = j.at("v0_pu").get<double>();
    net.s0_limit_pu = j.at("s0_limit_pu").get<double>();
    net.aggregator_nodes = j.at("aggregator_nodes").get<std::vector<int>>();
    for (const auto& lj : j.at("lines")) {
      grid::Line l;
      l.node = lj.at("node").get<int>();
      l.parent = lj.at("parent").get<int>();
      l.r_pu = lj.at("r_pu").get<double>();
      l.x_pu = lj.at("x_pu").get<double>();
      l.mva_limit_pu = lj.at("mva_limit_pu").get<double>();
      net.lines.push_back(l);
      net.node_count = std::max(net.node_count, l.node);
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("network file: ") + e.what());
  }
  net.validate();
  return net;
}

inline grid::RadialNetwork load_network(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return network_from_json(j);
}

// ---------------------------------------------------------------------------
// Agents files

/// Ranges the population generator draws from; recorded in generated files
/// so a population can be re-derived from its seed.
struct GeneratorRanges {
  double buyer_x_min = 120.0, buyer_x_max = 360.0;
  double buyer_y_min = 2.0, buyer_y_max = 10.0;
  // Sellers value retained energy somewhat above the buyers' band; this
  // keeps seller-heavy aggregators from underpricing their neighbors so
  // far that congested laterals turn them into exporters under cheap
  // wholesale supply.
  double seller_x_min = 200.0, seller_x_max = 460.0;
  double seller_y_min = 2.0, seller_y_max = 10.0;
  double g_min = 0.1, g_max = 0.5;
  double theta_min = 0.25, theta_max = 0.45;
};

struct PopulationGroup {
  int node = 0;
  int buyers = 0;
  int sellers = 0;
};

struct PopulationSpec {
  std::vector<PopulationGroup> groups;
  GeneratorRanges ranges;
};

/// The published seventeen-aggregator assignment (303 buyers, 180 sellers).
inline PopulationSpec table1_spec() {
  PopulationSpec spec;
  spec.groups = {{1, 14, 13}, {8, 11, 7},   {12, 25, 5},  {13, 27, 21}, {17, 20, 22},
                 {18, 8, 10}, {22, 21, 15}, {23, 27, 6},  {25, 22, 4},  {26, 21, 22},
                 {27, 5, 3},  {29, 13, 9},  {30, 7, 4},   {31, 19, 19}, {33, 10, 5},
                 {35, 26, 6}, {36, 27, 9}};
  return spec;
}

/// Deterministic population draw: per group, theta first, then buyer (x, y)
/// pairs, then seller (x, y, g) triples, all from one splitmix64 stream.
inline std::vector<ala::AggregatorMarket> gen_agents(const PopulationSpec& spec,
                                                     std::uint64_t seed) {
  Rng rng(seed);
  const auto& r = spec.ranges;
  std::vector<ala::AggregatorMarket> markets;
  markets.reserve(spec.groups.size());
  for (const auto& group : spec.groups) {
    if (group.buyers < 0 || group.sellers < 0)
      throw ConfigError("population counts must be nonnegative");
    ala::AggregatorMarket m;
    m.node = group.node;
    m.theta = rng.uniform(r.theta_min, r.theta_max);
    m.buyers.reserve(group.buyers);
    for (int i = 0; i < group.buyers; ++i) {
      double x = rng.uniform(r.buyer_x_min, r.buyer_x_max);
      double y = rng.uniform(r.buyer_y_min, r.buyer_y_max);
      m.buyers.emplace_back(x, y);
    }
    m.sellers.reserve(group.sellers);
    for (int j = 0; j < group.sellers; ++j) {
      double x = rng.uniform(r.seller_x_min, r.seller_x_max);
      double y = rng.uniform(r.seller_y_min, r.seller_y_max);
      double g = rng.uniform(r.g_min, r.g_max);
      m.sellers.emplace_back(x, y, g);
    }
    markets.push_back(std::move(m));
  }
  return markets;
}

inline json ranges_to_json(const GeneratorRanges& r) {
  return json{{"buyer_x", {r.buyer_x_min, r.buyer_x_max}},
              {"buyer_y", {r.buyer_y_min, r.buyer_y_max}},
              {"seller_x", {r.seller_x_min, r.seller_x_max}},
              {"seller_y", {r.seller_y_min, r.seller_y_max}},
              {"g", {r.g_min, r.g_max}},
              {"theta", {r.theta_min, r.theta_max}}};
}

inline json utility_to_json(const agents::Utility& u) {
  if (const auto* log = std::get_if<agents::LogUtility>(&u))
    return json{{"x", log->x}, {"y", log->y}};
  const auto& quad = std::get<agents::QuadraticUtility>(u);
  return json{{"type", "quadratic"}, {"a", quad.a}, {"b", quad.b}};
}

inline agents::Utility utility_from_json(const json& j) {
  if (j.contains("type") && j.at("type") == "quadratic")
    return agents::QuadraticUtility{j.at("a").get<double>(), j.at("b").get<double>()};
  return agents::LogUtility{j.at("x").get<double>(), j.at("y").get<double>()};
}

inline json agents_to_json(const std::vector<ala::AggregatorMarket>& markets,
                           std::optional<std::uint64_t> seed = std::nullopt,
                           const GeneratorRanges* ranges = nullptr,
                           double power_base_kva = 100.0) {
  json aggs = json::array();
  for (const auto& m : markets) {
    json buyers = json::array();
    for (const auto& b : m.buyers) buyers.push_back(utility_to_json(b.utility));
    json sellers = json::array();
    for (const auto& s : m.sellers) {
      json sj = utility_to_json(s.utility);
      sj["g"] = s.g;
      sellers.push_back(sj);
    }
    aggs.push_back(
        {{"node", m.node}, {"theta", m.theta}, {"buyers", buyers}, {"sellers", sellers}});
  }
  json out{{"power_base_kva", power_base_kva}, {"aggregators", aggs}};
  if (seed) out["seed"] = *seed;
  if (ranges) out["generator"] = ranges_to_json(*ranges);
  return out;
}

inline std::vector<ala::AggregatorMarket> agents_from_json(const json& j) {
  std::vector<ala::AggregatorMarket> markets;
  try {
    for (const auto& aj : j.at("aggregators")) {
      ala::AggregatorMarket m;
      m.node = aj.at("node").get<int>();
      m.theta = aj.at("theta").get<double>();
      for (const auto& bj : aj.at("buyers")) m.buyers.emplace_back(utility_from_json(bj));
      for (const auto& sj : aj.at("sellers"))
        m.sellers.emplace_back(utility_from_json(sj), sj.at("g").get<double>());
      markets.push_back(std::move(m));
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("agents file: ") + e.what());
  }
  return markets;
}

inline std::vector<ala::AggregatorMarket> load_agents(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return agents_from_json(j);
}

/// Loads and cross-validates a network plus its populations. Population
/// order is normalized to the network's aggregator order.
inline System load_system(const std::filesystem::path& network_path,
                          const std::filesystem::path& agents_path) {
  grid::RadialNetwork net = load_network(network_path);
  auto markets = load_agents(agents_path);

  std::unordered_map<int, ala::AggregatorMarket*> by_node;
  for (auto& m : markets) {
    if (!by_node.emplace(m.node, &m).second)
      throw ConfigError("agents file lists node " + std::to_string(m.node) + " twice");
    if (std::find(net.aggregator_nodes.begin(), net.aggregator_nodes.end(), m.node) ==
        net.aggregator_nodes.end())
      throw ConfigError("agents file references node " + std::to_string(m.node) +
                        " which has no aggregator in the network");
  }
  std::vector<ala::AggregatorMarket> ordered;
  ordered.reserve(net.aggregator_nodes.size());
  for (int node : net.aggregator_nodes) {
    auto it = by_node.find(node);
    if (it == by_node.end())
      throw ConfigError("no agent population for aggregator node " + std::to_string(node));
    ordered.push_back(std::move(*it->second));
  }
  return make_system(std::move(net), std::move(ordered));
}

// ---------------------------------------------------------------------------
// Scenario files

inline json scenario_to_json(const Scenario& s) {
  json j{{"name", s.name},
         {"c0b_cents_per_pu", s.c0b},
         {"beta0_cents_per_pu2", s.beta0},
         {"s0_limit_pu", s.s0_limit},
         {"delta_pu", s.delta},
         {"step_size", s.step_size},
         {"armijo", s.armijo},
         {"price_smoothing", s.price_smoothing},
         {"ala_damping", s.ala_damping},
         {"parallel_ala", s.parallel_ala},
         {"tolerances",
          {{"balance_pu", s.tol.balance_pu},
           {"p_step_pu", s.tol.p_step_pu},
           {"price_rel", s.tol.price_rel},
           {"feasibility", s.tol.feasibility}}},
         {"iteration_caps", {{"dla", s.caps.dla}, {"ala", s.caps.ala}}},
         {"seed", s.seed},
         {"power_base_kva", s.power_base_kva}};
  if (std::isinf(s.virtual_bid))
    j["virtual_bid_pu"] = nullptr;
  else
    j["virtual_bid_pu"] = s.virtual_bid;
  return j;
}

inline Scenario scenario_from_json(const json& j) {
  Scenario s;
  try {
    s.name = j.value("name", s.name);
    s.c0b = j.value("c0b_cents_per_pu", s.c0b);
    s.beta0 = j.value("beta0_cents_per_pu2", s.beta0);
    s.s0_limit = j.value("s0_limit_pu", s.s0_limit);
    s.delta = j.value("delta_pu", s.delta);
    s.step_size = j.value("step_size", s.step_size);
    s.armijo = j.value("armijo", s.armijo);
    s.price_smoothing = j.value("price_smoothing", s.price_smoothing);
    s.ala_damping = j.value("ala_damping", s.ala_damping);
    s.parallel_ala = j.value("parallel_ala", s.parallel_ala);
    if (j.contains("virtual_bid_pu") && !j.at("virtual_bid_pu").is_null())
      s.virtual_bid = j.at("virtual_bid_pu").get<double>();
    if (j.contains("tolerances")) {
      const auto& t = j.at("tolerances");
      s.tol.balance_pu = t.value("balance_pu", s.tol.balance_pu);
      s.tol.p_step_pu = t.value("p_step_pu", s.tol.p_step_pu);
      s.tol.price_rel = t.value("price_rel", s.tol.price_rel);
      s.tol.feasibility = t.value("feasibility", s.tol.feasibility);
    }
    if (j.contains("iteration_caps")) {
      const auto& c = j.at("iteration_caps");
      s.caps.dla = c.value("dla", s.caps.dla);
      s.caps.ala = c.value("ala", s.caps.ala);
    }
    s.seed = j.value("seed", s.seed);
    s.power_base_kva = j.value("power_base_kva", s.power_base_kva);
  } catch (const json::exception& e) {
    throw ParseError(std::string("scenario file: ") + e.what());
  }
  if (s.delta <= 0.0 || s.delta >= 1.0) throw ConfigError("scenario delta must lie in (0, 1)");
  if (s.tol.balance_pu <= 0 || s.tol.p_step_pu <= 0 || s.tol.price_rel <= 0 ||
      s.tol.feasibility <= 0)
    throw ConfigError("scenario tolerances must be positive");
  return s;
}

/// Accepts a preset name (scenario-1 .. scenario-4) or a JSON file path.
inline Scenario resolve_scenario(const std::string& name_or_path) {
  if (is_scenario_preset(name_or_path)) return scenario_preset(name_or_path);
  try {
    return scenario_from_json(json::parse(read_text(std::filesystem::path(name_or_path))));
  } catch (const json::exception& e) {
    throw ParseError(name_or_path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Results and traces

inline json constraints_to_json(const feasible::ConstraintReport& rep) {
  const char* names[] = {"transformer", "line", "voltage_low", "voltage_high", "budget"};
  json active = json::array();
  for (const auto& ac : rep.active)
    active.push_back({{"kind", names[static_cast<int>(ac.kind)]},
                      {"index", ac.index},
                      {"residual", ac.residual}});
  return json{{"transformer_residual_pu2", rep.transformer},
              {"max_line_residual_pu2", rep.lines.size() ? rep.lines.maxCoeff() : 0.0},
              {"max_voltage_residual_pu",
               std::max(rep.voltage_low.size() ? rep.voltage_low.maxCoeff() : 0.0,
                        rep.voltage_high.size() ? rep.voltage_high.maxCoeff() : 0.0)},
              {"budget_residual_cents", rep.budget},
              {"worst_scaled", rep.worst_scaled},
              {"feasible", rep.feasible},
              {"active", active}};
}

inline std::vector<double> to_std(const Vec& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

inline json result_to_json(const dla::AuctionResult& res, const System& sys,
                           const Scenario& scenario, const std::string& config_hash) {
  json alloc = json::array();
  for (size_t k = 0; k < res.demand.size(); ++k)
    alloc.push_back({{"node", sys.markets[k].node},
                     {"price_cents_per_pu", res.c[static_cast<Eigen::Index>(k)]},
                     {"demand_pu", to_std(res.demand[k])},
                     {"supply_pu", to_std(res.supply[k])},
                     {"bids_cents", to_std(res.bids[k])}});
  return json{{"termination", dla::to_string(res.termination)},
              {"iterations", res.iterations},
              {"flagged_node", res.flagged_node},
              {"flagged_allotment_pu", res.flagged_allotment},
              {"aggregator_nodes", sys.network.aggregator_nodes},
              {"p_pu", to_std(res.p)},
              {"c_cents_per_pu", to_std(res.c)},
              {"theta", to_std(res.theta)},
              {"sum_p_pu", res.p.sum()},
              {"wholesale_price_cents_per_pu", res.wholesale},
              {"dso_profit_cents", res.dso_profit},
              {"social_welfare_cents",
               res.sw_trajectory.empty() ? 0.0 : res.sw_trajectory.back()},
              {"sw_trajectory_cents", res.sw_trajectory},
              {"allocations", alloc},
              {"constraints", constraints_to_json(res.constraints)},
              {"manifest",
               {{"config_hash", config_hash},
                {"seed", scenario.seed},
                {"power_base_kva", scenario.power_base_kva},
                {"scenario", scenario.name}}}};
}

inline json oracle_to_json(const oracle::OracleResult& res, const System& sys) {
  json alloc = json::array();
  for (size_t k = 0; k < res.d.size(); ++k)
    alloc.push_back({{"node", sys.markets[k].node},
                     {"price_cents_per_pu", res.c[static_cast<Eigen::Index>(k)]},
                     {"demand_pu", to_std(res.d[k])},
                     {"supply_pu", to_std(res.s[k])}});
  return json{{"status", res.status},
              {"converged", res.converged},
              {"p_pu", to_std(res.p)},
              {"c_cents_per_pu", to_std(res.c)},
              {"sum_p_pu", res.p.sum()},
              {"social_welfare_cents", res.sw},
              {"kkt_residual", res.kkt_residual},
              {"price_rounds", res.price_rounds},
              {"allocations", alloc}};
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

inline std::string convergence_csv(const std::vector<dla::IterationRecord>& records,
                                   const std::vector<int>& nodes) {
  std::ostringstream out;
  out << "iteration,sw,sum_p,c0";
  for (int n : nodes) out << ",p_" << n;
  for (int n : nodes) out << ",c_" << n;
  out << "\n";
  for (const auto& r : records) {
    out << r.iteration << ',' << format_double(r.sw) << ',' << format_double(r.sum_p) << ','
        << format_double(r.c0);
    for (Eigen::Index k = 0; k < r.p.size(); ++k) out << ',' << format_double(r.p[k]);
    for (Eigen::Index k = 0; k < r.c.size(); ++k) out << ',' << format_double(r.c[k]);
    out << "\n";
  }
  return out.str();
}

inline std::string ala_trace_csv(const std::vector<dla::AlaTraceEntry>& entries) {
  std::ostringstream out;
  out << "dla_iteration,node,ala_iteration,price,sum_bids,sum_supply,balance_residual\n";
  for (const auto& e : entries)
    out << e.dla_iteration << ',' << e.node << ',' << e.row.iteration << ','
        << format_double(e.row.price) << ',' << format_double(e.row.total_bids) << ','
        << format_double(e.row.total_supply) << ',' << format_double(e.row.balance) << "\n";
  return out.str();
}

inline std::string config_hash(const System& sys, const Scenario& scenario) {
  std::string blob = scenario_to_json(scenario).dump() + network_to_json(sys.network).dump() +
                     agents_to_json(sys.markets).dump();
  return hex64(fnv1a(blob));
}

struct RunArtifacts {
  dla::AuctionResult result;
  std::filesystem::path result_path;
  std::filesystem::path convergence_path;
  std::filesystem::path trace_path;  // empty when tracing is off
};

/// Runs the bilevel auction and writes result.json, convergence.csv and,
/// when requested, ala_trace.csv under out_dir.
inline RunArtifacts run_scenario(const System& sys, const Scenario& scenario,
                                 const std::filesystem::path& out_dir, bool trace = false) {
  std::filesystem::create_directories(out_dir);
  RunArtifacts artifacts;
  std::vector<dla::AlaTraceEntry> trace_rows;
  artifacts.result = dla::run_dla(sys, scenario, trace ? &trace_rows : nullptr);

  artifacts.result_path = out_dir / "result.json";
  write_text(artifacts.result_path,
             result_to_json(artifacts.result, sys, scenario, config_hash(sys, scenario))
                 .dump(2) + "\n");

  artifacts.convergence_path = out_dir / "convergence.csv";
  write_text(artifacts.convergence_path,
             convergence_csv(artifacts.result.records, sys.network.aggregator_nodes));

  if (trace) {
    artifacts.trace_path = out_dir / "ala_trace.csv";
    write_text(artifacts.trace_path, ala_trace_csv(trace_rows));
  }
  return artifacts;
}

}  // namespace bilevel::io
