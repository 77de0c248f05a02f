// Acceptance suite: runs every acceptance criterion at its stated tolerance
// and prints one PASS/FAIL line per criterion. Exits nonzero if any fails.

#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "bilevel/dla.hpp"
#include "bilevel/oracle.hpp"
#include "bilevel/scenario_io.hpp"

using namespace bilevel;

namespace {

struct Harness {
  int failures = 0;
  void check(const std::string& name, bool ok, const std::string& detail) {
    std::printf("%s  %s: %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
  }
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

// --- criterion 2 fixture: 3 aggregators, 12 agents, fixed parameters -------

System three_aggregator_system() {
  grid::RadialNetwork net;
  net.node_count = 3;
  net.v0_pu = 1.0;
  net.s0_limit_pu = 100.0;
  net.lines = {{1, 0, 2e-4, 3e-4, 50.0}, {2, 1, 2e-4, 3e-4, 50.0}, {3, 1, 2e-4, 3e-4, 50.0}};
  net.aggregator_nodes = {1, 2, 3};

  using agents::Buyer;
  using agents::Seller;
  ala::AggregatorMarket m1, m2, m3;
  m1.node = 1;
  m1.theta = 0.30;
  m1.buyers = {Buyer(180.0, 4.0), Buyer(260.0, 2.5)};
  m1.sellers = {Seller(140.0, 5.0, 0.35), Seller(200.0, 3.0, 0.25)};
  m2.node = 2;
  m2.theta = 0.35;
  m2.buyers = {Buyer(320.0, 3.0), Buyer(150.0, 6.0), Buyer(240.0, 2.0)};
  m2.sellers = {Seller(110.0, 7.0, 0.45)};
  m3.node = 3;
  m3.theta = 0.25;
  m3.buyers = {Buyer(120.0, 5.0), Buyer(210.0, 3.5)};
  m3.sellers = {Seller(260.0, 2.0, 0.30), Seller(90.0, 8.0, 0.40)};
  return make_system(std::move(net), {m1, m2, m3});
}

// --- random market draw shared by criteria 3, 4 and 10 ---------------------

ala::AggregatorMarket random_market(Rng& rng, int min_buyers = 0) {
  int nb = min_buyers + static_cast<int>(rng.next_u64() % 6);
  int ns = static_cast<int>(rng.next_u64() % 6);
  if (nb == 0 && ns == 0) nb = 1;
  ala::AggregatorMarket m;
  m.node = 1;
  m.theta = rng.uniform(0.2, 0.5);
  for (int i = 0; i < nb; ++i)
    m.buyers.emplace_back(rng.uniform(50.0, 400.0), rng.uniform(1.0, 8.0));
  for (int j = 0; j < ns; ++j)
    m.sellers.emplace_back(rng.uniform(50.0, 400.0), rng.uniform(1.0, 8.0),
                           rng.uniform(0.1, 0.5));
  return m;
}

double draw_allotment(Rng& rng, const ala::AggregatorMarket& m) {
  double lo = m.sellers.empty() ? 0.0 : -0.7 * m.total_generation();
  double hi = m.buyers.empty() ? 0.0 : 0.4 * static_cast<double>(m.buyers.size());
  return rng.uniform(lo, hi);
}

// --- flat feasibility evaluator for the dense grid oracle ------------------

struct FlatRegion {
  double z0_00, z0_01, z0_11, s0_sq;
  std::vector<std::array<double, 4>> lines;  // h00, h01, h11, limit^2
  std::vector<std::array<double, 4>> volts;  // m0, m1, lo, hi
  double a0, a1, beta0;                      // budget: a.p + beta0 (sum p)^2 <= 0

  explicit FlatRegion(const feasible::FeasibleRegion& r) {
    z0_00 = r.Z0(0, 0);
    z0_01 = r.Z0(0, 1);
    z0_11 = r.Z0(1, 1);
    s0_sq = r.s0_limit * r.s0_limit;
    for (int k = 0; k < r.nodes(); ++k)
      lines.push_back({r.Zk[k](0, 0), r.Zk[k](0, 1), r.Zk[k](1, 1),
                       r.line_limits[k] * r.line_limits[k]});
    for (int k = 0; k < r.M.rows(); ++k)
      volts.push_back({r.M(k, 0), r.M(k, 1), r.v_lower[k], r.v_upper[k]});
    a0 = r.c0b - r.c[0];
    a1 = r.c0b - r.c[1];
    beta0 = r.beta0;
  }

  bool member(double p0, double p1) const {
    if (z0_00 * p0 * p0 + 2 * z0_01 * p0 * p1 + z0_11 * p1 * p1 > s0_sq) return false;
    for (const auto& l : lines)
      if (l[0] * p0 * p0 + 2 * l[1] * p0 * p1 + l[2] * p1 * p1 > l[3]) return false;
    for (const auto& v : volts) {
      double mp = v[0] * p0 + v[1] * p1;
      if (mp < v[2] || mp > v[3]) return false;
    }
    double sum = p0 + p1;
    return a0 * p0 + a1 * p1 + beta0 * sum * sum <= 0.0;
  }
};

// Aggregators on disjoint sibling branches: each branch line caps its own
// aggregator's injection, so the feasible set stays inside [-0.6, 0.6]^2 and
// the grid window provably covers it.
feasible::FeasibleRegion random_region_2(Rng& rng) {
  grid::RadialNetwork net;
  net.node_count = 4;
  net.v0_pu = 1.0;
  auto limit = [&rng] { return rng.uniform(0.25, 0.6); };
  auto imp = [&rng] { return rng.uniform(0.001, 0.05); };
  net.lines = {{1, 0, imp(), imp(), limit()},
               {2, 0, imp(), imp(), limit()},
               {3, 1, imp(), imp(), limit()},
               {4, 2, imp(), imp(), limit()}};
  net.aggregator_nodes = {1, 2};
  net.s0_limit_pu = 1.0;
  auto topo = grid::build_topology(net);
  Vec theta(2), c(2);
  theta << rng.uniform(0.0, 0.6), rng.uniform(0.0, 0.6);
  c << rng.uniform(150.0, 700.0), rng.uniform(150.0, 700.0);
  return feasible::build_region(topo, net, theta, c, rng.uniform(100.0, 600.0),
                                rng.uniform(0.0, 60.0), rng.uniform(0.3, 0.6),
                                rng.uniform(0.02, 0.08));
}

}  // namespace

int main() {
  Harness h;
  const std::string data_dir = BILEVEL_DATA_DIR;

  // 1. Price-model arithmetic against the published (sum p, c0) pairs.
  {
    struct Case {
      double c0b, beta0, sum_p, printed;
    } cases[] = {{800, 40, 1.72, 869}, {200, 30, 10.83, 525}, {200, 10, 21.87, 419}};
    bool ok = true;
    std::string detail;
    for (const auto& cs : cases) {
      double c0 = feasible::wholesale_price(cs.c0b, cs.beta0, Vec::Constant(1, cs.sum_p));
      ok = ok && std::abs(c0 - cs.printed) <= 0.5;
      detail += fmt(c0) + "~" + fmt(cs.printed) + " ";
    }
    h.check("criterion-1 wholesale-price-arithmetic", ok, detail + "(tol 0.5 cents)");
  }

  // 2. Efficiency gap on the seeded 3-aggregator, 12-agent system.
  {
    auto sys = three_aggregator_system();
    Scenario scenario;
    scenario.c0b = 300.0;
    scenario.beta0 = 20.0;
    scenario.s0_limit = 100.0;
    scenario.caps.dla = 50;
    auto res = dla::run_dla(sys, scenario);
    auto best = oracle::solve_centralized(sys, scenario);
    double mech = res.sw_trajectory.back();
    double gap = (best.sw - mech) / std::abs(best.sw);
    bool ok = best.converged && gap < 0.01 && res.iterations <= 50;
    h.check("criterion-2 efficiency-gap", ok,
            "gap " + fmt(100 * gap) + "% after " + std::to_string(res.iterations) +
                " iterations (tol 1%, cap 50)");
  }

  // 3 & 4. Balance identities and marginal-utility structure across 200
  // randomized equilibria.
  {
    Rng rng(2718);
    int n_ok = 0;
    double worst_energy = 0.0, worst_money = 0.0, worst_marginal = 0.0;
    bool kkt_ok = true;
    for (int t = 0; t < 200; ++t) {
      auto m = random_market(rng);
      double p_k = draw_allotment(rng, m);
      auto res = ala::run_ala(m, p_k, 300.0);
      if (!res.balanced) continue;
      ++n_ok;
      double sum_b = res.bids.sum();
      double energy = std::abs(res.demand.sum() - res.supply.sum() - p_k);
      double money = std::abs(sum_b - res.price * p_k - res.price * res.supply.sum()) /
                     std::max(1.0, sum_b);
      worst_energy = std::max(worst_energy, energy);
      worst_money = std::max(worst_money, money / 1e-8 * 1e-8);
      worst_money = std::max(worst_money, money);

      for (int i = 0; i < res.demand.size(); ++i)
        if (res.demand[i] > 1e-9) {
          double rel = std::abs(agents::utility_marginal(m.buyers[i].utility, res.demand[i]) -
                                res.price) / res.price;
          worst_marginal = std::max(worst_marginal, rel);
        }
      for (int j = 0; j < res.supply.size(); ++j) {
        const auto& seller = m.sellers[j];
        if (res.supply[j] > 1e-9 && res.supply[j] < seller.g - 1e-9) {
          double rel = std::abs(agents::utility_marginal(seller.utility,
                                                         seller.g - res.supply[j]) -
                                res.price) / res.price;
          worst_marginal = std::max(worst_marginal, rel);
        } else if (res.supply[j] >= seller.g - 1e-9) {
          kkt_ok = kkt_ok && agents::marginal_at_zero(seller.utility) <= res.price + 1e-6;
        } else {
          kkt_ok = kkt_ok &&
                   agents::utility_marginal(seller.utility, seller.g) >= res.price - 1e-6;
        }
      }
    }
    bool balances_ok = n_ok == 200 && worst_energy <= 1e-6 && worst_money <= 1e-8;
    h.check("criterion-3 ala-balance-identities", balances_ok,
            std::to_string(n_ok) + "/200 equilibria, worst energy " + fmt(worst_energy) +
                " pu, worst money " + fmt(worst_money) + " rel");
    bool marginals_ok = n_ok == 200 && worst_marginal <= 1e-4 && kkt_ok;
    h.check("criterion-4 uniform-marginal-kkt", marginals_ok,
            "worst marginal deviation " + fmt(worst_marginal) + " rel (tol 1e-4)");
  }

  // 5, 6, 9. Full-size scenario runs on the bundled feeder.
  {
    auto net_path = data_dir + "/ieee37.json";
    auto markets = io::gen_agents(io::table1_spec(), 1);
    auto net = io::load_network(net_path);
    auto sys = make_system(std::move(net), std::move(markets));

    bool feas_ok = true, budget_ok = true;
    double profit4 = 0.0;
    int exporters1 = 0;
    double min_p4 = std::numeric_limits<double>::infinity();
    std::string feas_detail, term_detail;

    for (int i = 1; i <= 4; ++i) {
      auto scenario = scenario_preset("scenario-" + std::to_string(i));
      auto res = dla::run_dla(sys, scenario);
      term_detail += "s" + std::to_string(i) + ":" + dla::to_string(res.termination) + " ";

      auto volt = grid::node_voltages(sys.topo, sys.network, res.p, res.theta);
      double vmax = volt.v.maxCoeff(), vmin = volt.v.minCoeff();
      bool vok = vmin >= 1.0 - scenario.delta - 1e-6 && vmax <= 1.0 + scenario.delta + 1e-6;
      double line_worst = res.constraints.lines.maxCoeff();
      bool feas = vok && res.constraints.transformer <= 1e-6 && line_worst <= 1e-6 &&
                  res.constraints.budget <= 1e-6;
      feas_ok = feas_ok && feas;
      feas_detail += "s" + std::to_string(i) + (feas ? ":ok " : ":VIOLATED ");

      budget_ok = budget_ok && res.dso_profit >= -1e-6;
      if (i == 1)
        for (int k = 0; k < res.p.size(); ++k)
          if (res.p[k] < -1e-8) ++exporters1;
      if (i == 4) {
        profit4 = res.dso_profit;
        min_p4 = res.p.minCoeff();
      }
    }
    h.check("criterion-5 scenario-feasibility", feas_ok, feas_detail + term_detail);
    h.check("criterion-6 weak-budget-balance", budget_ok && profit4 > 0.0,
            "profits >= -1e-6 in all runs; scenario-4 profit " + fmt(profit4) + " cents");
    h.check("criterion-9 qualitative-signs",
            exporters1 >= 1 && min_p4 >= -1e-8,
            "scenario-1 exporters " + std::to_string(exporters1) + ", scenario-4 min p " +
                fmt(min_p4));
  }

  // 7. Projection against a dense grid oracle, plus idempotence and
  // non-expansiveness.
  {
    Rng rng(31415);
    int checked = 0;
    double worst_gap = 0.0, worst_idem = 0.0, worst_nonexp = 0.0;
    bool all_ok = true;
    while (checked < 100) {
      auto region = random_region_2(rng);
      Vec target(2);
      target << rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2);
      auto proj = feasible::project_detailed(target, region);
      if (!feasible::evaluate_constraints(proj.p, region).feasible) {
        all_ok = false;
        break;
      }

      FlatRegion flat(region);
      const int pts = 2001;
      const double extent = 0.7;
      double best = std::numeric_limits<double>::infinity();
      for (int i = 0; i < pts; ++i) {
        double p0 = -extent + 1.4 * i / (pts - 1);
        for (int j = 0; j < pts; ++j) {
          double p1 = -extent + 1.4 * j / (pts - 1);
          if (flat.member(p0, p1)) {
            double dx = p0 - target[0], dy = p1 - target[1];
            best = std::min(best, std::sqrt(dx * dx + dy * dy));
          }
        }
      }
      if (!std::isfinite(best)) continue;  // region escaped the grid window
      ++checked;
      worst_gap = std::max(worst_gap, std::abs(proj.distance - best));
      all_ok = all_ok && proj.distance <= best + 1e-9;  // grid points are feasible

      auto again = feasible::project_detailed(proj.p, region);
      worst_idem = std::max(worst_idem, (again.p - proj.p).norm());

      Vec other(2);
      other << rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2);
      auto po = feasible::project_detailed(other, region);
      double expand = (proj.p - po.p).norm() - (target - other).norm();
      worst_nonexp = std::max(worst_nonexp, expand);
    }
    bool ok = all_ok && worst_gap <= 1e-3 && worst_idem <= 2e-6 && worst_nonexp <= 1e-9;
    h.check("criterion-7 projection-correctness", ok,
            std::to_string(checked) + " regions, worst grid gap " + fmt(worst_gap) +
                ", idempotence " + fmt(worst_idem) + ", expansion " + fmt(worst_nonexp));
  }

  // 8. Structural identities on the bundled feeder.
  {
    auto net = io::load_network(data_dir + "/ieee37.json");
    auto topo = grid::build_topology(net);
    bool dut = topo.D == topo.U.transpose();
    Rng rng(999);
    double worst = 0.0;
    for (int t = 0; t < 10; ++t) {
      Vec p(17), theta(17);
      for (int k = 0; k < 17; ++k) {
        p[k] = rng.uniform(-2.0, 2.0);
        theta[k] = rng.uniform(0.0, 0.6);
      }
      auto [fp, fq] = grid::branch_flows(topo, p, theta);
      for (int k = 1; k <= 36; ++k) {
        Mat zk = feasible::line_matrix(k, topo, theta);
        double lhs = p.dot(zk * p);
        double rhs = fp[k - 1] * fp[k - 1] + fq[k - 1] * fq[k - 1];
        worst = std::max(worst, std::abs(lhs - rhs) / std::max(1.0, std::abs(rhs)));
      }
    }
    bool ok = dut && worst <= 1e-12;
    h.check("criterion-8 structural-identities", ok,
            std::string("D=U^T ") + (dut ? "holds" : "FAILS") + ", worst line-quadratic gap " +
                fmt(worst));
  }

  // 10. Gradient identity via finite-difference re-solves.
  {
    Rng rng(1618);
    double worst = 0.0;
    int n_done = 0;
    while (n_done < 20) {
      auto m = random_market(rng, 1);
      double p_k = draw_allotment(rng, m);
      auto res = ala::run_ala(m, p_k, 300.0);
      if (!res.balanced) continue;
      const double hstep = 1e-4;
      auto up = ala::run_ala(m, p_k + hstep, res.price);
      auto dn = ala::run_ala(m, p_k - hstep, res.price);
      if (!up.balanced || !dn.balanced) continue;
      ++n_done;
      double theta_up = oracle::aggregator_welfare(m, up.demand, up.supply);
      double theta_dn = oracle::aggregator_welfare(m, dn.demand, dn.supply);
      double fd = (theta_up - theta_dn) / (2 * hstep);
      worst = std::max(worst, std::abs(res.price - fd) / res.price);
    }
    h.check("criterion-10 gradient-identity", worst <= 1e-3,
            "worst relative deviation " + fmt(worst) + " over 20 aggregators (tol 1e-3)");
  }

  std::printf("%s\n", h.failures == 0 ? "ALL CRITERIA PASSED" : "CRITERIA FAILURES PRESENT");
  return h.failures == 0 ? 0 : 1;
}
