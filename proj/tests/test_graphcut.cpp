#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <vector>

#include "arccap/graphcut.hpp"

using namespace arccap;
using namespace arccap::graphcut;

namespace {

// Independent brute-force oracle: evaluates the energy from its own formula
// and scans all 2^n labelings.
double brute_energy(const BinaryEnergy& e, unsigned mask) {
  double total = 0.0;
  for (int i = 0; i < e.n; ++i)
    if (mask & (1u << i)) total += e.unary[i];
  for (const PairwiseTerm& p : e.pairwise) {
    bool yi = mask & (1u << p.i);
    bool yj = mask & (1u << p.j);
    if (yi != yj) total += p.weight;
  }
  return total;
}

struct BruteMin {
  Labeling labeling;
  double value;
};

BruteMin brute_minimize(const BinaryEnergy& e) {
  double best = brute_energy(e, 0);
  unsigned best_mask = 0;
  for (unsigned mask = 1; mask < (1u << e.n); ++mask) {
    double v = brute_energy(e, mask);
    if (v < best) {
      best = v;
      best_mask = mask;
    }
  }
  Labeling y(e.n, 0);
  for (int i = 0; i < e.n; ++i)
    if (best_mask & (1u << i)) y[i] = 1;
  return {y, best};
}

BinaryEnergy random_energy(Rng& rng, int n) {
  BinaryEnergy e;
  e.n = n;
  for (int i = 0; i < n; ++i) e.unary.push_back(rng.uniform(-2.0, 2.0));
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (rng.next_double() < 0.5) e.pairwise.push_back({i, j, rng.uniform(0.0, 1.0)});
  return e;
}

FlowNetwork random_network(Rng& rng, int n, int arcs) {
  FlowNetwork net;
  net.node_count = n;
  net.source = 0;
  net.sink = n - 1;
  for (int a = 0; a < arcs; ++a) {
    int from = static_cast<int>(rng.next_below(n));
    int to = static_cast<int>(rng.next_below(n));
    if (from == to) continue;
    net.add_arc(from, to, rng.uniform(0.0, 3.0));
  }
  return net;
}

}  // namespace

TEST_CASE("max flow: single arc") {
  FlowNetwork net;
  net.node_count = 2;
  net.source = 0;
  net.sink = 1;
  net.add_arc(0, 1, 7.0);
  MaxFlowResult r = max_flow_min_cut(net);
  CHECK(r.flow_value == Catch::Approx(7.0).margin(1e-12));
  CHECK(r.source_side == std::set<int>{0});
}

TEST_CASE("max flow: disconnected source and sink") {
  FlowNetwork net;
  net.node_count = 4;
  net.source = 0;
  net.sink = 3;
  net.add_arc(0, 1, 2.0);
  net.add_arc(1, 0, 1.0);
  MaxFlowResult r = max_flow_min_cut(net);
  CHECK(r.flow_value == 0.0);
  CHECK(r.source_side == std::set<int>{0, 1});
}

TEST_CASE("max flow: diamond with cross arc") {
  // Cuts by hand: {s}=5, {s,a}=5, {s,b}=6, {s,a,b}=5; minimum 5.
  FlowNetwork net;
  net.node_count = 4;  // s=0, a=1, b=2, t=3
  net.source = 0;
  net.sink = 3;
  net.add_arc(0, 1, 3.0);
  net.add_arc(0, 2, 2.0);
  net.add_arc(1, 3, 2.0);
  net.add_arc(2, 3, 3.0);
  net.add_arc(1, 2, 1.0);
  MaxFlowResult r = max_flow_min_cut(net);
  CHECK(r.flow_value == Catch::Approx(5.0).margin(1e-9));
  CHECK(cut_capacity(net, r.source_side) == Catch::Approx(r.flow_value).margin(1e-9));
}

TEST_CASE("max flow: malformed networks rejected") {
  FlowNetwork net;
  net.node_count = 2;
  net.source = 0;
  net.sink = 1;
  SECTION("negative capacity") {
    net.add_arc(0, 1, -1.0);
    CHECK_THROWS_AS(max_flow_min_cut(net), ValidationError);
  }
  SECTION("bad node id") {
    net.add_arc(0, 5, 1.0);
    CHECK_THROWS_AS(max_flow_min_cut(net), ValidationError);
  }
  SECTION("source equals sink") {
    net.sink = 0;
    CHECK_THROWS_AS(max_flow_min_cut(net), ValidationError);
  }
  SECTION("non-finite capacity") {
    net.add_arc(0, 1, std::numeric_limits<double>::infinity());
    CHECK_THROWS_AS(max_flow_min_cut(net), ValidationError);
  }
}

TEST_CASE("max flow: duality holds on random networks") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    FlowNetwork net = random_network(rng, 2 + static_cast<int>(rng.next_below(7)), 14);
    MaxFlowResult r = max_flow_min_cut(net);
    double cap = cut_capacity(net, r.source_side);
    CHECK(std::abs(r.flow_value - cap) <= 1e-9 * std::max(1.0, cap));
    CHECK(r.source_side.count(net.source) == 1);
    CHECK(r.source_side.count(net.sink) == 0);
  }
}

TEST_CASE("max flow: adding an arc never decreases flow") {
  Rng rng(12);
  for (int trial = 0; trial < 60; ++trial) {
    FlowNetwork net = random_network(rng, 6, 10);
    double before = max_flow_min_cut(net).flow_value;
    int from = static_cast<int>(rng.next_below(5));
    net.add_arc(from, 5, rng.uniform(0.0, 2.0));
    double after = max_flow_min_cut(net).flow_value;
    CHECK(after >= before - 1e-9);
  }
}

TEST_CASE("max flow: parallel arcs and self loops") {
  FlowNetwork net;
  net.node_count = 3;
  net.source = 0;
  net.sink = 2;
  net.add_arc(0, 1, 1.5);
  net.add_arc(0, 1, 2.5);  // parallel arcs add up
  net.add_arc(1, 1, 9.0);  // self loop carries nothing
  net.add_arc(1, 2, 3.0);
  MaxFlowResult r = max_flow_min_cut(net);
  CHECK(r.flow_value == Catch::Approx(3.0).margin(1e-9));
  CHECK(cut_capacity(net, r.source_side) == Catch::Approx(3.0).margin(1e-9));
}

TEST_CASE("max flow: deterministic across runs") {
  Rng rng(13);
  FlowNetwork net = random_network(rng, 7, 18);
  MaxFlowResult a = max_flow_min_cut(net);
  MaxFlowResult b = max_flow_min_cut(net);
  CHECK(a.flow_value == b.flow_value);
  CHECK(a.source_side == b.source_side);
}

TEST_CASE("energy value: examples") {
  BinaryEnergy e;
  e.n = 2;
  e.unary = {0.0, 0.0};
  e.pairwise = {{0, 1, 0.7}};
  CHECK(energy_value(e, {0, 0}) == 0.0);

  e.unary = {1.0, 2.0};
  e.pairwise.clear();
  CHECK(energy_value(e, {1, 1}) == Catch::Approx(3.0));

  e.unary = {1.0, -2.0};
  e.pairwise = {{0, 1, 0.5}};
  CHECK(energy_value(e, {0, 1}) == Catch::Approx(-1.5));

  CHECK_THROWS_AS(energy_value(e, {0, 1, 0}), ValidationError);
}

TEST_CASE("minimize energy: trivial cases") {
  BinaryEnergy e;
  e.n = 3;
  e.unary = {1.0, 1.0, 1.0};
  e.pairwise = {{0, 1, 0.4}, {1, 2, 0.2}};
  EnergyMinimum m = minimize_energy(e);
  CHECK(m.labeling == Labeling{0, 0, 0});
  CHECK(m.value == 0.0);

  BinaryEnergy f;
  f.n = 2;
  f.unary = {-1.0, -1.0};
  f.pairwise = {{0, 1, 0.3}};
  EnergyMinimum mf = minimize_energy(f);
  CHECK(mf.labeling == Labeling{1, 1});
  CHECK(mf.value == Catch::Approx(-2.0));
}

TEST_CASE("minimize energy: submodularity violation rejected") {
  BinaryEnergy e;
  e.n = 2;
  e.unary = {0.0, 0.0};
  e.pairwise = {{0, 1, -0.1}};
  CHECK_THROWS_AS(minimize_energy(e), ValidationError);

  SECTION("duplicate pair rejected") {
    BinaryEnergy d;
    d.n = 2;
    d.unary = {0.0, 0.0};
    d.pairwise = {{0, 1, 0.1}, {0, 1, 0.2}};
    CHECK_THROWS_AS(minimize_energy(d), ValidationError);
  }
}

TEST_CASE("minimize energy: lexicographically smallest among co-optimal") {
  SECTION("fully degenerate energy") {
    BinaryEnergy e;
    e.n = 4;
    e.unary = {0.0, 0.0, 0.0, 0.0};
    e.pairwise = {{0, 1, 0.0}, {2, 3, 0.0}};
    CHECK(minimize_energy(e).labeling == Labeling{0, 0, 0, 0});
  }
  SECTION("tie between (0,0), (1,0), (1,1)") {
    BinaryEnergy e;
    e.n = 2;
    e.unary = {-1.0, 1.0};
    e.pairwise = {{0, 1, 1.0}};
    EnergyMinimum m = minimize_energy(e);
    CHECK(m.value == Catch::Approx(0.0).margin(1e-12));
    CHECK(m.labeling == Labeling{0, 0});
  }
  SECTION("tie between (0,0), (0,1), (1,1)") {
    BinaryEnergy e;
    e.n = 2;
    e.unary = {1.0, -1.0};
    e.pairwise = {{0, 1, 1.0}};
    EnergyMinimum m = minimize_energy(e);
    CHECK(m.value == Catch::Approx(0.0).margin(1e-12));
    CHECK(m.labeling == Labeling{0, 0});
  }
}

TEST_CASE("minimize energy: matches brute force on 200 random instances") {
  Rng rng(42);
  for (int trial = 0; trial < 200; ++trial) {
    int n = 2 + static_cast<int>(rng.next_below(11));  // up to 12 variables
    BinaryEnergy e = random_energy(rng, n);
    BruteMin oracle = brute_minimize(e);
    EnergyMinimum m = minimize_energy(e);
    REQUIRE(m.value == energy_value(e, m.labeling));
    CHECK(m.value == oracle.value);
  }
}
