#pragma once

#include <algorithm>
#include <utility>
#include <vector>

#include "bilevel/common.hpp"

namespace bilevel::grid {

/// One distribution line (u(k), k), identified by the node k it feeds.
struct Line {
  int node = 0;
  int parent = 0;
  double r_pu = 0.0;
  double x_pu = 0.0;
  double mva_limit_pu = 0.0;
};

/// Tree-structured feeder. Nodes are 1..N; the root (substation) is node 0
/// and is not part of the node set. Every non-root node has exactly one
/// incoming line.
struct RadialNetwork {
  int node_count = 0;  // N, excluding the root
  std::vector<Line> lines;
  std::vector<int> aggregator_nodes;  // ordered subset of 1..N
  double v0_pu = 1.0;
  double s0_limit_pu = 0.0;  // substation transformer MVA limit

  int aggregator_count() const { return static_cast<int>(aggregator_nodes.size()); }

  /// Lines sorted by node id; lines_by_node()[k-1] feeds node k.
  std::vector<Line> lines_by_node() const {
    std::vector<Line> sorted = lines;
    std::sort(sorted.begin(), sorted.end(),
              [](const Line& a, const Line& b) { return a.node < b.node; });
    return sorted;
  }

  Vec r_vec() const {
    Vec r(node_count);
    for (const Line& l : lines) r[l.node - 1] = l.r_pu;
    return r;
  }
  Vec x_vec() const {
    Vec x(node_count);
    for (const Line& l : lines) x[l.node - 1] = l.x_pu;
    return x;
  }
  Vec line_limits() const {
    Vec s(node_count);
    for (const Line& l : lines) s[l.node - 1] = l.mva_limit_pu;
    return s;
  }

  void validate() const;
};

/// Structure matrices of the radial network.
///   A: N x A node-aggregator incidence (one unit entry per column)
///   D: N x N descendant-or-self indicator
///   U: N x N ancestor-or-self indicator
struct TopologyMatrices {
  Mat A;
  Mat D;
  Mat U;
  std::vector<int> parent;  // parent[k-1] = u(k), node ids

  int nodes() const { return static_cast<int>(D.rows()); }
  int aggregators() const { return static_cast<int>(A.cols()); }
};

inline void RadialNetwork::validate() const {
  const int n = node_count;
  if (n <= 0) throw TopologyError("network has no nodes");
  if (static_cast<int>(lines.size()) != n)
    throw TopologyError("expected one line per non-root node, got " +
                        std::to_string(lines.size()) + " for N=" + std::to_string(n));
  if (v0_pu <= 0.0) throw ConfigError("root voltage must be positive");

  std::vector<int> parent(n + 1, -1);
  for (const Line& l : lines) {
    if (l.node < 1 || l.node > n)
      throw TopologyError("line feeds node " + std::to_string(l.node) +
                          " outside 1.." + std::to_string(n));
    if (parent[l.node] != -1)
      throw TopologyError("node " + std::to_string(l.node) + " has two incoming lines");
    if (l.parent < 0 || l.parent > n || l.parent == l.node)
      throw TopologyError("node " + std::to_string(l.node) + " has invalid parent " +
                          std::to_string(l.parent));
    if (l.r_pu < 0.0 || l.x_pu < 0.0)
      throw TopologyError("negative impedance on line into node " + std::to_string(l.node));
    if (l.mva_limit_pu <= 0.0)
      throw TopologyError("nonpositive MVA limit on line into node " + std::to_string(l.node));
    parent[l.node] = l.parent;
  }

  // Every node must reach the root; a walk longer than N nodes means a cycle.
  for (int k = 1; k <= n; ++k) {
    int cur = k, steps = 0;
    while (cur != 0) {
      cur = parent[cur];
      if (++steps > n)
        throw TopologyError("cycle or disconnected subtree at node " + std::to_string(k));
    }
  }

  std::vector<char> seen(n + 1, 0);
  for (int a : aggregator_nodes) {
    if (a < 1 || a > n)
      throw TopologyError("aggregator node " + std::to_string(a) + " not in network");
    if (seen[a]) throw TopologyError("duplicate aggregator node " + std::to_string(a));
    seen[a] = 1;
  }
}

inline TopologyMatrices build_topology(const RadialNetwork& net) {
  net.validate();
  const int n = net.node_count;
  const int a = net.aggregator_count();

  TopologyMatrices topo;
  topo.parent.assign(n, 0);
  for (const Line& l : net.lines) topo.parent[l.node - 1] = l.parent;

  topo.A = Mat::Zero(n, a);
  for (int j = 0; j < a; ++j) topo.A(net.aggregator_nodes[j] - 1, j) = 1.0;

  // D and U are built independently from their definitions; D = U^T is then
  // a checkable property rather than an assumption.
  topo.D = Mat::Zero(n, n);
  topo.U = Mat::Zero(n, n);
  for (int l = 1; l <= n; ++l) {
    for (int anc = l; anc != 0; anc = topo.parent[anc - 1]) topo.D(anc - 1, l - 1) = 1.0;
  }
  for (int k = 1; k <= n; ++k) {
    for (int anc = k; anc != 0; anc = topo.parent[anc - 1]) topo.U(k - 1, anc - 1) = 1.0;
  }
  return topo;
}

/// Branch flows P = D A p, Q = D A (theta o p).
inline std::pair<Vec, Vec> branch_flows(const TopologyMatrices& topo, const Vec& p,
                                        const Vec& theta) {
  if (p.size() != topo.aggregators() || theta.size() != p.size())
    throw DimensionError("branch_flows: injection/theta size does not match aggregator count");
  Vec inj = topo.A * p;
  Vec inj_q = topo.A * theta.cwiseProduct(p);
  return {topo.D * inj, topo.D * inj_q};
}

struct VoltageSolution {
  Vec v;   // node voltages, pu
  Vec dv;  // per-line voltage drops, pu
};

/// V = V0 1 - U dV with dV = (r o P + x o Q) / V0.
inline VoltageSolution node_voltages(const TopologyMatrices& topo, const RadialNetwork& net,
                                     const Vec& p, const Vec& theta) {
  auto [flow_p, flow_q] = branch_flows(topo, p, theta);
  Vec dv = (net.r_vec().cwiseProduct(flow_p) + net.x_vec().cwiseProduct(flow_q)) / net.v0_pu;
  Vec v = Vec::Constant(topo.nodes(), net.v0_pu) - topo.U * dv;
  return {std::move(v), std::move(dv)};
}

/// Sensitivity of cumulative voltage deviation to injections:
/// M = M_P + M_Q diag(theta), M_P = U diag(r) D A / V0, M_Q likewise with x.
/// Satisfies U dV(p) = M p for every p.
inline Mat voltage_sensitivity(const TopologyMatrices& topo, const RadialNetwork& net,
                               const Vec& theta) {
  if (theta.size() != topo.aggregators())
    throw DimensionError("voltage_sensitivity: theta size does not match aggregator count");
  Mat da = topo.D * topo.A;
  Mat mp = topo.U * net.r_vec().asDiagonal() * da / net.v0_pu;
  Mat mq = topo.U * net.x_vec().asDiagonal() * da / net.v0_pu;
  return mp + mq * theta.asDiagonal();
}

/// Injections, flows and voltages solved together under Eqs of the
/// simplified DistFlow model.
struct GridState {
  Vec p;
  Vec theta;
  Vec flow_p;
  Vec flow_q;
  Vec v;
  Vec dv;
  bool solved = false;
};

inline GridState solve_state(const TopologyMatrices& topo, const RadialNetwork& net,
                             const Vec& p, const Vec& theta) {
  GridState st;
  st.p = p;
  st.theta = theta;
  std::tie(st.flow_p, st.flow_q) = branch_flows(topo, p, theta);
  auto volt = node_voltages(topo, net, p, theta);
  st.v = std::move(volt.v);
  st.dv = std::move(volt.dv);
  st.solved = true;
  return st;
}

}  // namespace bilevel::grid
