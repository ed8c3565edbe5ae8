#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "arccap/common.hpp"

namespace arccap::graphcut {

using Labeling = std::vector<std::uint8_t>;

struct Arc {
  int from = 0;
  int to = 0;
  double capacity = 0.0;
};

struct FlowNetwork {
  int node_count = 0;
  int source = 0;
  int sink = 0;
  std::vector<Arc> arcs;

  void add_arc(int from, int to, double capacity) { arcs.push_back({from, to, capacity}); }

  void validate() const {
    if (node_count <= 0) throw ValidationError("flow network: node_count must be positive");
    if (source == sink) throw ValidationError("flow network: source equals sink");
    if (source < 0 || source >= node_count || sink < 0 || sink >= node_count)
      throw ValidationError("flow network: source/sink out of range");
    for (const Arc& a : arcs) {
      if (a.from < 0 || a.from >= node_count || a.to < 0 || a.to >= node_count)
        throw ValidationError("flow network: arc endpoint out of range: " +
                              std::to_string(a.from) + "->" + std::to_string(a.to));
      if (!(a.capacity >= 0.0) || !std::isfinite(a.capacity))
        throw ValidationError("flow network: capacity must be finite and >= 0, got " +
                              std::to_string(a.capacity));
    }
  }
};

struct MaxFlowResult {
  double flow_value = 0.0;
  std::set<int> source_side;  // nodes reachable from source in the residual graph
};

namespace detail {

// Dinic on real capacities. Residuals below kSaturationEps count as
// saturated so rounding noise cannot keep augmenting forever.
class Dinic {
 public:
  static constexpr double kSaturationEps = 1e-12;

  explicit Dinic(const FlowNetwork& net)
      : n_(net.node_count), source_(net.source), sink_(net.sink), adj_(net.node_count) {
    edges_.reserve(net.arcs.size() * 2);
    for (const Arc& a : net.arcs) {
      adj_[a.from].push_back(static_cast<int>(edges_.size()));
      edges_.push_back({a.to, a.capacity});
      adj_[a.to].push_back(static_cast<int>(edges_.size()));
      edges_.push_back({a.from, 0.0});
    }
  }

  double run() {
    double total = 0.0;
    while (bfs()) {
      ptr_.assign(n_, 0);
      while (true) {
        double pushed = dfs(source_, std::numeric_limits<double>::infinity());
        if (pushed <= 0.0) break;
        total += pushed;
      }
    }
    return total;
  }

  // Forward residual reachability from the source.
  std::set<int> source_side() const {
    std::set<int> side;
    std::vector<char> seen(n_, 0);
    std::vector<int> stack{source_};
    seen[source_] = 1;
    while (!stack.empty()) {
      int v = stack.back();
      stack.pop_back();
      side.insert(v);
      for (int id : adj_[v]) {
        const Edge& e = edges_[id];
        if (e.residual > kSaturationEps && !seen[e.to]) {
          seen[e.to] = 1;
          stack.push_back(e.to);
        }
      }
    }
    return side;
  }

 private:
  struct Edge {
    int to;
    double residual;
  };

  bool bfs() {
    level_.assign(n_, -1);
    level_[source_] = 0;
    std::vector<int> queue{source_};
    for (std::size_t head = 0; head < queue.size(); ++head) {
      int v = queue[head];
      for (int id : adj_[v]) {
        const Edge& e = edges_[id];
        if (e.residual > kSaturationEps && level_[e.to] == -1) {
          level_[e.to] = level_[v] + 1;
          queue.push_back(e.to);
        }
      }
    }
    return level_[sink_] != -1;
  }

  double dfs(int v, double limit) {
    if (v == sink_) return limit;
    for (int& i = ptr_[v]; i < static_cast<int>(adj_[v].size()); ++i) {
      int id = adj_[v][i];
      Edge& e = edges_[id];
      if (e.residual <= kSaturationEps || level_[e.to] != level_[v] + 1) continue;
      double pushed = dfs(e.to, std::min(limit, e.residual));
      if (pushed > 0.0) {
        e.residual -= pushed;
        edges_[id ^ 1].residual += pushed;
        return pushed;
      }
    }
    return 0.0;
  }

  int n_;
  int source_;
  int sink_;
  std::vector<Edge> edges_;
  std::vector<std::vector<int>> adj_;
  std::vector<int> level_;
  std::vector<int> ptr_;
};

}  // namespace detail

inline MaxFlowResult max_flow_min_cut(const FlowNetwork& net) {
  net.validate();
  detail::Dinic solver(net);
  MaxFlowResult result;
  result.flow_value = solver.run();
  result.source_side = solver.source_side();
  return result;
}

// Capacity of the cut induced by a source-side set; used to check duality.
inline double cut_capacity(const FlowNetwork& net, const std::set<int>& source_side) {
  double total = 0.0;
  for (const Arc& a : net.arcs) {
    if (source_side.count(a.from) && !source_side.count(a.to)) total += a.capacity;
  }
  return total;
}

struct PairwiseTerm {
  int i = 0;
  int j = 0;
  double weight = 0.0;  // disagreement penalty, must be >= 0
};

// E(y) = sum_i unary[i]*y_i + sum_(i,j) weight*[y_i != y_j]. Label 0 costs
// zero by normalization.
struct BinaryEnergy {
  int n = 0;
  std::vector<double> unary;
  std::vector<PairwiseTerm> pairwise;

  void validate() const {
    if (n <= 0) throw ValidationError("energy: n must be positive");
    if (static_cast<int>(unary.size()) != n)
      throw ValidationError("energy: unary size " + std::to_string(unary.size()) +
                            " != n " + std::to_string(n));
    for (double u : unary)
      if (!std::isfinite(u)) throw ValidationError("energy: non-finite unary");
    std::set<std::pair<int, int>> seen;
    for (const PairwiseTerm& p : pairwise) {
      if (p.i < 0 || p.j < 0 || p.i >= n || p.j >= n)
        throw ValidationError("energy: pairwise index out of range");
      if (p.i == p.j) throw ValidationError("energy: pairwise self-pair");
      if (p.i >= p.j) throw ValidationError("energy: pairwise requires i < j");
      if (!seen.insert({p.i, p.j}).second)
        throw ValidationError("energy: duplicate pairwise pair (" + std::to_string(p.i) +
                              "," + std::to_string(p.j) + ")");
      if (!std::isfinite(p.weight) || p.weight < 0.0)
        throw ValidationError("energy: submodularity violation, pairwise weight " +
                              std::to_string(p.weight) + " < 0");
    }
  }
};

inline double energy_value(const BinaryEnergy& e, const Labeling& y) {
  if (static_cast<int>(y.size()) != e.n)
    throw ValidationError("energy_value: labeling length " + std::to_string(y.size()) +
                          " != n " + std::to_string(e.n));
  double value = 0.0;
  for (int i = 0; i < e.n; ++i)
    if (y[i]) value += e.unary[i];
  for (const PairwiseTerm& p : e.pairwise)
    if (y[p.i] != y[p.j]) value += p.weight;
  return value;
}

struct EnergyMinimum {
  Labeling labeling;
  double value = 0.0;
};

// Exact minimization by reduction to s-t min-cut. Source side carries label
// 1, so the forward-reachable (minimal) source side is the coordinatewise
// minimum over all optimal labelings, i.e. the lexicographically smallest.
inline EnergyMinimum minimize_energy(const BinaryEnergy& e) {
  e.validate();
  FlowNetwork net;
  net.node_count = e.n + 2;
  net.source = e.n;
  net.sink = e.n + 1;
  for (int i = 0; i < e.n; ++i) {
    if (e.unary[i] > 0.0)
      net.add_arc(i, net.sink, e.unary[i]);  // pay unary when i sits on the source side
    else if (e.unary[i] < 0.0)
      net.add_arc(net.source, i, -e.unary[i]);  // pay -unary when i is cut to the sink side
  }
  for (const PairwiseTerm& p : e.pairwise) {
    if (p.weight > 0.0) {
      net.add_arc(p.i, p.j, p.weight);
      net.add_arc(p.j, p.i, p.weight);
    }
  }
  MaxFlowResult cut = max_flow_min_cut(net);
  EnergyMinimum out;
  out.labeling.assign(e.n, 0);
  for (int i = 0; i < e.n; ++i)
    if (cut.source_side.count(i)) out.labeling[i] = 1;
  out.value = energy_value(e, out.labeling);
  return out;
}

}  // namespace arccap::graphcut
