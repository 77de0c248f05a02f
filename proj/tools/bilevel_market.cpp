// bilevel-market: simulation driver for the bilevel distribution-grid
// energy auction. Subcommands: validate, gen, run, oracle, compare.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "bilevel/scenario_io.hpp"

namespace {

int log_level() {
  const char* env = std::getenv("BILEVEL_MARKET_LOG");
  if (!env) return 1;
  std::string v(env);
  if (v == "quiet") return 0;
  if (v == "debug") return 2;
  return 1;
}

void info(const std::string& msg) {
  if (log_level() >= 1) std::cerr << msg << "\n";
}

bilevel::io::PopulationSpec load_counts(const std::string& path) {
  using nlohmann::json;
  bilevel::io::PopulationSpec spec;
  json j = json::parse(bilevel::io::read_text(path));
  for (const auto& g : j.at("groups"))
    spec.groups.push_back({g.at("node").get<int>(), g.at("buyers").get<int>(),
                           g.at("sellers").get<int>()});
  if (j.contains("ranges")) {
    const auto& r = j.at("ranges");
    auto pair = [&r](const char* key, double& lo, double& hi) {
      if (r.contains(key)) {
        lo = r.at(key).at(0).get<double>();
        hi = r.at(key).at(1).get<double>();
      }
    };
    pair("buyer_x", spec.ranges.buyer_x_min, spec.ranges.buyer_x_max);
    pair("buyer_y", spec.ranges.buyer_y_min, spec.ranges.buyer_y_max);
    pair("seller_x", spec.ranges.seller_x_min, spec.ranges.seller_x_max);
    pair("seller_y", spec.ranges.seller_y_min, spec.ranges.seller_y_max);
    pair("g", spec.ranges.g_min, spec.ranges.g_max);
    pair("theta", spec.ranges.theta_min, spec.ranges.theta_max);
  }
  return spec;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bilevel distribution-grid energy auction simulator"};
  app.require_subcommand(1);

  std::string network_path, agents_path, scenario_arg, out_arg, counts_path;
  std::uint64_t seed = 1;
  bool seed_given = false;
  bool trace = false, parallel = false, no_budget_coupling = false;

  auto* validate = app.add_subcommand("validate", "Parse and validate input files");
  validate->add_option("--network", network_path, "Network JSON")->required();
  validate->add_option("--agents", agents_path, "Agents JSON");

  auto* gen = app.add_subcommand("gen", "Generate a seeded agent population");
  gen->add_option("--network", network_path, "Network JSON")->required();
  gen->add_option("--out", out_arg, "Output agents JSON")->required();
  gen->add_option("--seed", seed, "RNG seed")->default_val(1);
  gen->add_option("--counts", counts_path,
                  "Population spec JSON (default: the bundled 17-aggregator table)");

  auto* run = app.add_subcommand("run", "Run the bilevel auction");
  run->add_option("--network", network_path, "Network JSON")->required();
  run->add_option("--agents", agents_path, "Agents JSON")->required();
  run->add_option("--scenario", scenario_arg, "Scenario file or preset scenario-1..4")
      ->required();
  run->add_option("--out", out_arg, "Output directory")->required();
  run->add_flag("--trace", trace, "Write per-iteration auction traces");
  run->add_flag("--parallel", parallel, "Solve aggregator auctions concurrently");
  run->add_option("--seed", seed, "Override the scenario seed")
      ->each([&seed_given](const std::string&) { seed_given = true; });

  auto* oracle_cmd = app.add_subcommand("oracle", "Solve the full-information benchmark");
  oracle_cmd->add_option("--network", network_path, "Network JSON")->required();
  oracle_cmd->add_option("--agents", agents_path, "Agents JSON")->required();
  oracle_cmd->add_option("--scenario", scenario_arg, "Scenario file or preset")->required();
  oracle_cmd->add_option("--out", out_arg, "Output directory")->required();
  oracle_cmd->add_flag("--no-budget-coupling", no_budget_coupling,
                       "Freeze budget-constraint prices at their zero-allotment values");

  auto* compare = app.add_subcommand("compare", "Run mechanism and oracle, report the SW gap");
  compare->add_option("--network", network_path, "Network JSON")->required();
  compare->add_option("--agents", agents_path, "Agents JSON")->required();
  compare->add_option("--scenario", scenario_arg, "Scenario file or preset")->required();
  compare->add_option("--out", out_arg, "Output directory")->required();
  compare->add_flag("--parallel", parallel, "Solve aggregator auctions concurrently");

  CLI11_PARSE(app, argc, argv);

  try {
    if (validate->parsed()) {
      auto net = bilevel::io::load_network(network_path);
      auto topo = bilevel::grid::build_topology(net);
      info("network ok: " + std::to_string(net.node_count) + " nodes, " +
           std::to_string(net.aggregator_count()) + " aggregators");
      if (!agents_path.empty()) {
        auto sys = bilevel::io::load_system(network_path, agents_path);
        int buyers = 0, sellers = 0;
        for (const auto& m : sys.markets) {
          buyers += static_cast<int>(m.buyers.size());
          sellers += static_cast<int>(m.sellers.size());
        }
        info("agents ok: " + std::to_string(buyers) + " buyers, " +
             std::to_string(sellers) + " sellers");
      }
      (void)topo;
      return 0;
    }

    if (gen->parsed()) {
      auto net = bilevel::io::load_network(network_path);
      bilevel::io::PopulationSpec spec =
          counts_path.empty() ? bilevel::io::table1_spec() : load_counts(counts_path);
      for (const auto& g : spec.groups)
        if (std::find(net.aggregator_nodes.begin(), net.aggregator_nodes.end(), g.node) ==
            net.aggregator_nodes.end())
          throw bilevel::ConfigError("population group at node " + std::to_string(g.node) +
                                     " has no aggregator in the network");
      auto markets = bilevel::io::gen_agents(spec, seed);
      bilevel::io::write_text(
          out_arg,
          bilevel::io::agents_to_json(markets, seed, &spec.ranges).dump(2) + "\n");
      info("wrote " + out_arg);
      return 0;
    }

    auto sys = bilevel::io::load_system(network_path, agents_path);
    auto scenario = bilevel::io::resolve_scenario(scenario_arg);
    if (seed_given) scenario.seed = seed;
    if (parallel) scenario.parallel_ala = true;
    std::filesystem::path out_dir(out_arg);

    if (run->parsed()) {
      auto artifacts = bilevel::io::run_scenario(sys, scenario, out_dir, trace);
      info("termination: " + bilevel::dla::to_string(artifacts.result.termination) + " after " +
           std::to_string(artifacts.result.iterations) + " iterations, SW = " +
           std::to_string(artifacts.result.sw_trajectory.back()) + " cents");
      info("wrote " + artifacts.result_path.string());
      return 0;
    }

    if (oracle_cmd->parsed()) {
      bilevel::oracle::OracleOptions opt;
      opt.budget_coupling = !no_budget_coupling;
      auto res = bilevel::oracle::solve_centralized(sys, scenario, opt);
      std::filesystem::create_directories(out_dir);
      bilevel::io::write_text(out_dir / "oracle.json",
                              bilevel::io::oracle_to_json(res, sys).dump(2) + "\n");
      info("oracle SW = " + std::to_string(res.sw) + " cents (" + res.status + ")");
      return 0;
    }

    if (compare->parsed()) {
      auto artifacts = bilevel::io::run_scenario(sys, scenario, out_dir, false);
      auto res = bilevel::oracle::solve_centralized(sys, scenario);
      bilevel::io::write_text(out_dir / "oracle.json",
                              bilevel::io::oracle_to_json(res, sys).dump(2) + "\n");
      double mech = artifacts.result.sw_trajectory.back();
      double gap = (res.sw - mech) / std::abs(res.sw);
      nlohmann::json summary{{"mechanism_sw_cents", mech},
                             {"oracle_sw_cents", res.sw},
                             {"relative_gap", gap}};
      bilevel::io::write_text(out_dir / "compare.json", summary.dump(2) + "\n");
      std::cout << summary.dump(2) << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
