#pragma once

// Shared helpers for the test suites: small network builders, random trees,
// and naive reference implementations of the DistFlow sums that serve as
// independent oracles for the matrix-based module code.

#include <map>
#include <vector>

#include "bilevel/common.hpp"
#include "bilevel/grid.hpp"

namespace testsupport {

using bilevel::Vec;
using bilevel::grid::Line;
using bilevel::grid::RadialNetwork;

inline RadialNetwork chain(int n, double r = 0.01, double x = 0.02, double limit = 10.0,
                           std::vector<int> aggregators = {}) {
  RadialNetwork net;
  net.node_count = n;
  net.v0_pu = 1.0;
  net.s0_limit_pu = 100.0;
  for (int k = 1; k <= n; ++k) net.lines.push_back({k, k - 1, r, x, limit});
  if (aggregators.empty()) aggregators.push_back(n);
  net.aggregator_nodes = std::move(aggregators);
  return net;
}

/// Random tree on n nodes: parent of k drawn among 0..k-1.
inline RadialNetwork random_tree(bilevel::Rng& rng, int n, int n_aggregators) {
  RadialNetwork net;
  net.node_count = n;
  net.v0_pu = 1.0;
  net.s0_limit_pu = 100.0;
  for (int k = 1; k <= n; ++k) {
    int parent = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(k));
    net.lines.push_back({k, parent, rng.uniform(0.001, 0.05), rng.uniform(0.001, 0.05),
                         rng.uniform(1.0, 20.0)});
  }
  std::vector<int> nodes(n);
  for (int k = 0; k < n; ++k) nodes[k] = k + 1;
  for (int k = n - 1; k > 0; --k)
    std::swap(nodes[k], nodes[rng.next_u64() % static_cast<std::uint64_t>(k + 1)]);
  nodes.resize(n_aggregators);
  std::sort(nodes.begin(), nodes.end());
  net.aggregator_nodes = nodes;
  return net;
}

/// Reference flows computed directly from the per-node summation form:
/// P_k = p_k + sum over descendants of k, with injections mapped onto
/// aggregator nodes. Deliberately matrix-free.
inline std::pair<Vec, Vec> naive_flows(const RadialNetwork& net, const Vec& p,
                                       const Vec& theta) {
  const int n = net.node_count;
  std::map<int, double> inj_p, inj_q;
  for (int j = 0; j < net.aggregator_count(); ++j) {
    inj_p[net.aggregator_nodes[j]] = p[j];
    inj_q[net.aggregator_nodes[j]] = theta[j] * p[j];
  }
  std::vector<int> parent(n + 1, 0);
  for (const auto& l : net.lines) parent[l.node] = l.parent;

  Vec flow_p = Vec::Zero(n), flow_q = Vec::Zero(n);
  for (int l = 1; l <= n; ++l) {
    double pl = inj_p.count(l) ? inj_p[l] : 0.0;
    double ql = inj_q.count(l) ? inj_q[l] : 0.0;
    // Injection at l contributes to every line on the path from l to root.
    for (int cur = l; cur != 0; cur = parent[cur]) {
      flow_p[cur - 1] += pl;
      flow_q[cur - 1] += ql;
    }
  }
  return {flow_p, flow_q};
}

inline Vec naive_voltages(const RadialNetwork& net, const Vec& p, const Vec& theta) {
  auto [flow_p, flow_q] = naive_flows(net, p, theta);
  const int n = net.node_count;
  Vec r = net.r_vec(), x = net.x_vec();
  std::vector<int> parent(n + 1, 0);
  for (const auto& l : net.lines) parent[l.node] = l.parent;
  Vec v(n);
  for (int k = 1; k <= n; ++k) {
    double drop = 0.0;
    for (int cur = k; cur != 0; cur = parent[cur])
      drop += (r[cur - 1] * flow_p[cur - 1] + x[cur - 1] * flow_q[cur - 1]) / net.v0_pu;
    v[k - 1] = net.v0_pu - drop;
  }
  return v;
}

inline Vec random_vec(bilevel::Rng& rng, int n, double lo, double hi) {
  Vec v(n);
  for (int k = 0; k < n; ++k) v[k] = rng.uniform(lo, hi);
  return v;
}

}  // namespace testsupport
