#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "arccap/common.hpp"
#include "arccap/graphcut.hpp"
#include "arccap/region_graph.hpp"

namespace arccap::arcgame {

using graphcut::BinaryEnergy;
using graphcut::Labeling;

inline int hamming(const Labeling& a, const Labeling& b) {
  if (a.size() != b.size())
    throw ValidationError("hamming: length mismatch " + std::to_string(a.size()) +
                          " vs " + std::to_string(b.size()));
  int count = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) ++count;
  return count;
}

struct MixedStrategy {
  std::vector<Labeling> support;
  std::vector<double> probs;

  void validate() const {
    if (support.size() != probs.size())
      throw ValidationError("mixed strategy: support/probs size mismatch");
    if (support.empty()) throw ValidationError("mixed strategy: empty support");
    double sum = 0.0;
    for (double p : probs) {
      if (!(p >= 0.0) || !std::isfinite(p))
        throw ValidationError("mixed strategy: negative or non-finite probability");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw ValidationError("mixed strategy: probabilities sum to " + std::to_string(sum));
    for (std::size_t i = 0; i < support.size(); ++i) {
      if (support[i].size() != support[0].size())
        throw ValidationError("mixed strategy: support labelings differ in length");
      for (std::size_t j = i + 1; j < support.size(); ++j)
        if (support[i] == support[j])
          throw ValidationError("mixed strategy: duplicate support labeling");
    }
  }
};

struct GameResult {
  MixedStrategy predictor;
  MixedStrategy adversary;
  double value = 0.0;
  double regret = 0.0;
};

inline std::vector<double> node_marginals(const MixedStrategy& s) {
  s.validate();
  std::vector<double> m(s.support[0].size(), 0.0);
  for (std::size_t k = 0; k < s.support.size(); ++k)
    for (std::size_t i = 0; i < m.size(); ++i)
      if (s.support[k][i]) m[i] += s.probs[k];
  for (double& v : m) v = std::clamp(v, 0.0, 1.0);
  return m;
}

struct MatrixGameSolution {
  std::vector<double> row_mix;  // row player maximizes
  std::vector<double> col_mix;  // column player minimizes
  double value = 0.0;
};

namespace detail {

// Dense primal simplex with Bland's rule on the standard game LP:
// shift the payoff positive, then  max 1'q  s.t.  A q <= 1, q >= 0.
// The optimal q scales to the column mixture and the slack reduced costs
// to the row mixture.
inline MatrixGameSolution simplex_game(const std::vector<std::vector<double>>& payoff) {
  const int m = static_cast<int>(payoff.size());
  const int k = static_cast<int>(payoff[0].size());
  double lo = payoff[0][0];
  for (const auto& row : payoff)
    for (double v : row) lo = std::min(lo, v);
  const double shift = 1.0 - lo;

  const int cols = k + m + 1;
  std::vector<std::vector<double>> t(m + 1, std::vector<double>(cols, 0.0));
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < k; ++j) t[i][j] = payoff[i][j] + shift;
    t[i][k + i] = 1.0;
    t[i][cols - 1] = 1.0;
  }
  for (int j = 0; j < k; ++j) t[m][j] = -1.0;

  std::vector<int> basis(m);
  for (int i = 0; i < m; ++i) basis[i] = k + i;

  const double eps = 1e-11;
  const int max_pivots = 2000 + 50 * (m + k);
  for (int pivots = 0;; ++pivots) {
    if (pivots > max_pivots)
      throw ConvergenceError("matrix game: simplex pivot budget exceeded", 0.0);
    int enter = -1;
    for (int j = 0; j < k + m; ++j) {
      if (t[m][j] < -eps) {
        enter = j;
        break;  // Bland: smallest index
      }
    }
    if (enter < 0) break;
    int leave = -1;
    double best_ratio = 0.0;
    for (int i = 0; i < m; ++i) {
      if (t[i][enter] <= eps) continue;
      double ratio = t[i][cols - 1] / t[i][enter];
      if (leave < 0 || ratio < best_ratio - eps ||
          (ratio < best_ratio + eps && basis[i] < basis[leave])) {
        leave = i;
        best_ratio = ratio;
      }
    }
    if (leave < 0)
      throw ConvergenceError("matrix game: LP unbounded (non-finite payoff?)", 0.0);
    double pivot = t[leave][enter];
    for (int j = 0; j < cols; ++j) t[leave][j] /= pivot;
    for (int i = 0; i <= m; ++i) {
      if (i == leave) continue;
      double factor = t[i][enter];
      if (factor == 0.0) continue;
      for (int j = 0; j < cols; ++j) t[i][j] -= factor * t[leave][j];
    }
    basis[leave] = enter;
  }

  const double z = t[m][cols - 1];  // sum of optimal q, equals 1/value of shifted game
  if (!(z > 0.0))
    throw ConvergenceError("matrix game: degenerate LP objective", 0.0);

  MatrixGameSolution sol;
  sol.col_mix.assign(k, 0.0);
  for (int i = 0; i < m; ++i)
    if (basis[i] < k) sol.col_mix[basis[i]] = t[i][cols - 1];
  sol.row_mix.assign(m, 0.0);
  for (int i = 0; i < m; ++i) sol.row_mix[i] = t[m][k + i];

  auto normalize = [](std::vector<double>& v) {
    double sum = 0.0;
    for (double& x : v) {
      if (x < 0.0) x = 0.0;
      sum += x;
    }
    if (sum <= 0.0) throw ConvergenceError("matrix game: zero-mass strategy", 0.0);
    for (double& x : v) x /= sum;
  };
  normalize(sol.col_mix);
  normalize(sol.row_mix);
  sol.value = 1.0 / z - shift;
  return sol;
}

}  // namespace detail

inline MatrixGameSolution solve_matrix_game(const std::vector<std::vector<double>>& payoff,
                                            double tol) {
  if (payoff.empty() || payoff[0].empty())
    throw ValidationError("matrix game: payoff must be at least 1x1");
  const std::size_t k = payoff[0].size();
  for (const auto& row : payoff) {
    if (row.size() != k) throw ValidationError("matrix game: ragged payoff matrix");
    for (double v : row)
      if (!std::isfinite(v)) throw ValidationError("matrix game: non-finite payoff entry");
  }
  if (!(tol > 0.0)) throw ValidationError("matrix game: tol must be positive");

  MatrixGameSolution sol = detail::simplex_game(payoff);

  // The simplex result is only accepted if it verifies as an epsilon-equilibrium.
  double row_br = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < payoff.size(); ++i) {
    double v = 0.0;
    for (std::size_t j = 0; j < k; ++j) v += payoff[i][j] * sol.col_mix[j];
    row_br = std::max(row_br, v);
  }
  double col_br = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < k; ++j) {
    double v = 0.0;
    for (std::size_t i = 0; i < payoff.size(); ++i) v += payoff[i][j] * sol.row_mix[i];
    col_br = std::min(col_br, v);
  }
  double regret = std::max(row_br - sol.value, sol.value - col_br);
  if (regret > tol)
    throw ConvergenceError("matrix game: equilibrium regret " + std::to_string(regret) +
                               " exceeds tol " + std::to_string(tol),
                           regret);
  return sol;
}

inline Labeling predictor_best_response(const std::vector<double>& adversary_marginals) {
  Labeling y(adversary_marginals.size(), 0);
  for (std::size_t i = 0; i < adversary_marginals.size(); ++i) {
    double m = adversary_marginals[i];
    if (!(m >= 0.0 && m <= 1.0))
      throw ValidationError("predictor best response: marginal " + std::to_string(m) +
                            " outside [0,1]");
    y[i] = m > 0.5 ? 1 : 0;  // ties resolve to 0
  }
  return y;
}

// argmax over labelings of E_pred[hamming] - energy. The expected Hamming
// term decomposes per node, so it folds into the unaries and the argmax is
// one more exact min-cut.
inline Labeling adversary_best_response(const BinaryEnergy& e,
                                        const std::vector<double>& predictor_marginals) {
  if (static_cast<int>(predictor_marginals.size()) != e.n)
    throw ValidationError("adversary best response: marginal length mismatch");
  for (double m : predictor_marginals)
    if (!(m >= 0.0 && m <= 1.0))
      throw ValidationError("adversary best response: marginal outside [0,1]");
  BinaryEnergy augmented = e;
  for (int i = 0; i < e.n; ++i)
    augmented.unary[i] = e.unary[i] - (1.0 - 2.0 * predictor_marginals[i]);
  return graphcut::minimize_energy(augmented).labeling;
}

namespace detail {

inline double expected_hamming_vs_marginals(const Labeling& y,
                                            const std::vector<double>& marginals) {
  double total = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i)
    total += y[i] ? (1.0 - marginals[i]) : marginals[i];
  return total;
}

}  // namespace detail

// Zero-sum prediction game: the adversary (row, maximizing) proposes
// worst-case label approximations, the predictor (column, minimizing)
// guesses them; payoff = E[hamming] - E_adv[energy]. Solved by double
// oracle with min-cut best responses, both supports seeded with the MAP
// labeling.
inline GameResult double_oracle(const BinaryEnergy& e, double tol = 1e-6,
                                int max_iter = 200) {
  e.validate();
  if (!(tol > 0.0)) throw ValidationError("double oracle: tol must be positive");
  if (max_iter < 1) throw ValidationError("double oracle: max_iter must be >= 1");

  Labeling map_labeling = graphcut::minimize_energy(e).labeling;
  std::vector<Labeling> adv_support{map_labeling};
  std::vector<Labeling> pred_support{map_labeling};
  std::vector<double> adv_energy{graphcut::energy_value(e, map_labeling)};

  auto contains = [](const std::vector<Labeling>& set, const Labeling& y) {
    return std::find(set.begin(), set.end(), y) != set.end();
  };

  double last_regret = std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < max_iter; ++iter) {
    std::vector<std::vector<double>> payoff(adv_support.size(),
                                            std::vector<double>(pred_support.size()));
    for (std::size_t r = 0; r < adv_support.size(); ++r)
      for (std::size_t c = 0; c < pred_support.size(); ++c)
        payoff[r][c] = hamming(pred_support[c], adv_support[r]) - adv_energy[r];

    MatrixGameSolution restricted = solve_matrix_game(payoff, 1e-9);

    MixedStrategy pred_mix{pred_support, restricted.col_mix};
    MixedStrategy adv_mix{adv_support, restricted.row_mix};
    std::vector<double> pred_marg = node_marginals(pred_mix);
    std::vector<double> adv_marg = node_marginals(adv_mix);

    Labeling adv_br = adversary_best_response(e, pred_marg);
    double adv_br_value = detail::expected_hamming_vs_marginals(adv_br, pred_marg) -
                          graphcut::energy_value(e, adv_br);

    Labeling pred_br = predictor_best_response(adv_marg);
    double mean_adv_energy = 0.0;
    for (std::size_t r = 0; r < adv_support.size(); ++r)
      mean_adv_energy += restricted.row_mix[r] * adv_energy[r];
    double pred_br_value =
        detail::expected_hamming_vs_marginals(pred_br, adv_marg) - mean_adv_energy;

    double regret = std::max({0.0, adv_br_value - restricted.value,
                              restricted.value - pred_br_value});
    last_regret = regret;
    if (regret <= tol) {
      GameResult result;
      result.predictor = std::move(pred_mix);
      result.adversary = std::move(adv_mix);
      result.value = restricted.value;
      result.regret = regret;
      return result;
    }

    bool grew = false;
    if (!contains(adv_support, adv_br)) {
      adv_support.push_back(adv_br);
      adv_energy.push_back(graphcut::energy_value(e, adv_br));
      grew = true;
    }
    if (!contains(pred_support, pred_br)) {
      pred_support.push_back(pred_br);
      grew = true;
    }
    if (!grew)
      throw ConvergenceError("double oracle: stalled with regret " + std::to_string(regret),
                             regret);
  }
  throw ConvergenceError("double oracle: max_iter exceeded, last regret " +
                             std::to_string(last_regret),
                         last_regret);
}

struct ArcWeights {
  std::vector<double> node_weights;
  std::vector<double> edge_weights;
};

// Potentials induced by learned weights. Pairwise terms are clamped at zero
// so inference stays an exact min-cut.
inline BinaryEnergy energy_from_graph(const data::RegionGraph& graph, const ArcWeights& w) {
  BinaryEnergy e;
  e.n = graph.size();
  e.unary.resize(e.n);
  for (int i = 0; i < e.n; ++i) {
    const std::vector<double>& f = graph.regions[i].features;
    if (f.size() != w.node_weights.size())
      throw ValidationError("arc energy: node feature dim " + std::to_string(f.size()) +
                            " != weight dim " + std::to_string(w.node_weights.size()));
    e.unary[i] = std::inner_product(f.begin(), f.end(), w.node_weights.begin(), 0.0);
  }
  for (const data::RegionEdge& edge : graph.edges) {
    std::vector<double> g = graph.edge_features(edge);
    if (g.size() != w.edge_weights.size())
      throw ValidationError("arc energy: edge feature dim mismatch");
    double weight = std::inner_product(g.begin(), g.end(), w.edge_weights.begin(), 0.0);
    e.pairwise.push_back({edge.i, edge.j, std::max(0.0, weight)});
  }
  return e;
}

// phi(x, y): node features scaled by y_i stacked with edge features scaled
// by the agreement indicator [y_i == y_j].
inline std::vector<double> feature_map(const data::RegionGraph& graph, const Labeling& y,
                                       std::size_t node_dim, std::size_t edge_dim) {
  if (static_cast<int>(y.size()) != graph.size())
    throw ValidationError("feature map: labeling length mismatch");
  std::vector<double> phi(node_dim + edge_dim, 0.0);
  for (int i = 0; i < graph.size(); ++i) {
    if (!y[i]) continue;
    const std::vector<double>& f = graph.regions[i].features;
    if (f.size() != node_dim) throw ValidationError("feature map: node feature dim mismatch");
    for (std::size_t d = 0; d < node_dim; ++d) phi[d] += f[d];
  }
  for (const data::RegionEdge& edge : graph.edges) {
    if (y[edge.i] != y[edge.j]) continue;
    std::vector<double> g = graph.edge_features(edge);
    for (std::size_t d = 0; d < edge_dim; ++d) phi[node_dim + d] += g[d];
  }
  return phi;
}

struct ArcTrainConfig {
  double eta0 = 0.1;
  int epochs = 50;
  double game_tol = 1e-6;
  int game_max_iter = 200;
};

struct ArcTrainResult {
  ArcWeights weights;       // averaged iterate
  std::vector<double> epoch_gaps;  // ||mean_x(E_adv[phi] - phi_gold)|| per epoch
};

using GameSolver = std::function<GameResult(const BinaryEnergy&)>;

// Adversarial moment matching: drive adversary-expected features toward the
// gold statistics with a decaying subgradient schedule. One combined update
// per epoch; expectations within an epoch are independent given the epoch's
// weights and reduce in example-index order.
inline ArcTrainResult train_weights(
    const std::vector<std::pair<data::RegionGraph, Labeling>>& examples,
    const ArcTrainConfig& cfg, GameSolver solver = nullptr, int threads = 1) {
  if (examples.empty()) throw ValidationError("arc training: no examples");
  for (const auto& [graph, gold] : examples)
    if (graph.size() == 0) throw ValidationError("arc training: empty region graph");
  const std::size_t node_dim = examples[0].first.regions[0].features.size();
  const std::size_t edge_dim = 2;
  for (const auto& [graph, gold] : examples) {
    for (const data::Region& r : graph.regions)
      if (r.features.size() != node_dim)
        throw ValidationError("arc training: inconsistent node feature dims");
    if (static_cast<int>(gold.size()) != graph.size())
      throw ValidationError("arc training: gold labeling length mismatch");
  }
  if (!solver) {
    solver = [&cfg](const BinaryEnergy& e) {
      return double_oracle(e, cfg.game_tol, cfg.game_max_iter);
    };
  }

  const std::size_t dim = node_dim + edge_dim;
  // Internally this learns the multipliers lambda of the moment constraints
  // E_adv[phi] = phi_gold; the adversary's payoff gains +lambda.phi(y), which
  // as a BinaryEnergy means node potentials -lambda_node.f and disagreement
  // weights +lambda_edge.g. Persisted node weights carry the flipped sign so
  // that inference always reads theta_i = node_weights.f_i.
  std::vector<double> lambda(dim, 0.0);
  std::vector<double> sum_lambda(dim, 0.0);
  ArcTrainResult result;

  auto game_weights = [&]() {
    ArcWeights w;
    w.node_weights.assign(lambda.begin(), lambda.begin() + node_dim);
    for (double& v : w.node_weights) v = -v;
    w.edge_weights.assign(lambda.begin() + node_dim, lambda.end());
    return w;
  };

  std::vector<std::vector<double>> gold_phi(examples.size());
  for (std::size_t x = 0; x < examples.size(); ++x)
    gold_phi[x] = feature_map(examples[x].first, examples[x].second, node_dim, edge_dim);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    ArcWeights w = game_weights();
    std::vector<std::vector<double>> grads(examples.size());
    parallel_for(examples.size(), threads, [&](std::size_t x) {
      const data::RegionGraph& graph = examples[x].first;
      BinaryEnergy e = energy_from_graph(graph, w);
      GameResult game = solver(e);
      std::vector<double> expected(dim, 0.0);
      for (std::size_t k = 0; k < game.adversary.support.size(); ++k) {
        std::vector<double> phi =
            feature_map(graph, game.adversary.support[k], node_dim, edge_dim);
        for (std::size_t d = 0; d < dim; ++d)
          expected[d] += game.adversary.probs[k] * phi[d];
      }
      for (std::size_t d = 0; d < dim; ++d) expected[d] -= gold_phi[x][d];
      grads[x] = std::move(expected);
    });

    std::vector<double> mean_grad(dim, 0.0);
    for (std::size_t x = 0; x < examples.size(); ++x)
      for (std::size_t d = 0; d < dim; ++d) mean_grad[d] += grads[x][d];
    for (double& g : mean_grad) {
      g /= static_cast<double>(examples.size());
      if (!std::isfinite(g)) throw NumericError("arc training: non-finite gradient");
    }

    double gap = 0.0;
    for (double g : mean_grad) gap += g * g;
    result.epoch_gaps.push_back(std::sqrt(gap));

    double eta = cfg.eta0 / std::sqrt(static_cast<double>(epoch));
    for (std::size_t d = 0; d < dim; ++d) {
      lambda[d] -= eta * mean_grad[d];
      sum_lambda[d] += lambda[d];
    }
  }

  for (double& v : sum_lambda) v /= cfg.epochs;
  lambda = sum_lambda;
  result.weights = game_weights();
  return result;
}

}  // namespace arccap::arcgame
