#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "arccap/arcgame.hpp"
#include "arccap/convcap.hpp"
#include "arccap/decode.hpp"
#include "arccap/graphcut.hpp"

namespace arccap::selfcheck {

inline std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2e", v);
  return std::string(buf);
}

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

namespace detail {

inline double enum_energy(const graphcut::BinaryEnergy& e, unsigned mask) {
  double total = 0.0;
  for (int i = 0; i < e.n; ++i)
    if (mask & (1u << i)) total += e.unary[i];
  for (const auto& p : e.pairwise) {
    bool yi = mask & (1u << p.i);
    bool yj = mask & (1u << p.j);
    if (yi != yj) total += p.weight;
  }
  return total;
}

inline graphcut::BinaryEnergy random_energy(Rng& rng, int n) {
  graphcut::BinaryEnergy e;
  e.n = n;
  for (int i = 0; i < n; ++i) e.unary.push_back(rng.uniform(-2.0, 2.0));
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (rng.next_double() < 0.5) e.pairwise.push_back({i, j, rng.uniform(0.0, 1.0)});
  return e;
}

}  // namespace detail

// Min-cut energy minimization against exhaustive enumeration.
inline SuiteResult check_cut_oracle(int instances = 60, int max_n = 10,
                                    std::uint64_t seed = 1001) {
  Rng rng(seed);
  for (int trial = 0; trial < instances; ++trial) {
    int n = 2 + static_cast<int>(rng.next_below(max_n - 1));
    graphcut::BinaryEnergy e = detail::random_energy(rng, n);
    double best = detail::enum_energy(e, 0);
    for (unsigned mask = 1; mask < (1u << n); ++mask)
      best = std::min(best, detail::enum_energy(e, mask));
    graphcut::EnergyMinimum m = graphcut::minimize_energy(e);
    if (m.value != best)
      return {"cut-brute-force", false,
              "instance " + std::to_string(trial) + ": cut " + std::to_string(m.value) +
                  " vs enumeration " + std::to_string(best)};
  }
  return {"cut-brute-force", true, std::to_string(instances) + " instances exact"};
}

// Double oracle against the full payoff-matrix equilibrium.
inline SuiteResult check_game_oracle(int instances = 20, int max_n = 3,
                                     std::uint64_t seed = 1002) {
  Rng rng(seed);
  double worst = 0.0;
  for (int trial = 0; trial < instances; ++trial) {
    int n = 1 + static_cast<int>(rng.next_below(max_n));
    graphcut::BinaryEnergy e = detail::random_energy(rng, n);

    std::vector<graphcut::Labeling> ys;
    for (unsigned mask = 0; mask < (1u << n); ++mask) {
      graphcut::Labeling y(n, 0);
      for (int i = 0; i < n; ++i)
        if (mask & (1u << i)) y[i] = 1;
      ys.push_back(y);
    }
    std::vector<std::vector<double>> payoff(ys.size(), std::vector<double>(ys.size()));
    for (std::size_t r = 0; r < ys.size(); ++r)
      for (std::size_t c = 0; c < ys.size(); ++c)
        payoff[r][c] = arcgame::hamming(ys[c], ys[r]) - detail::enum_energy(e, static_cast<unsigned>(r));
    double full_value = arcgame::solve_matrix_game(payoff, 1e-9).value;

    arcgame::GameResult g = arcgame::double_oracle(e, 1e-6, 200);
    worst = std::max(worst, std::abs(g.value - full_value));
    if (std::abs(g.value - full_value) > 1e-6 || g.regret > 1e-6)
      return {"game-brute-force", false,
              "instance " + std::to_string(trial) + ": |dv| " +
                  sci(std::abs(g.value - full_value)) + ", regret " + sci(g.regret)};
  }
  return {"game-brute-force", true,
          std::to_string(instances) + " instances, max |dv| " + sci(worst)};
}

// Analytic gradients against central differences on a small full-feature
// model. Weights are scaled up from the tiny init so gradients on every
// path clear the relative-error floor.
inline SuiteResult check_gradients(std::uint64_t seed = 1003) {
  convcap::ModelConfig cfg;
  cfg.vocab_size = 7;
  cfg.embed_dim = 6;
  cfg.feature_dim = 4;
  cfg.attn_dim = 6;
  cfg.layers = 2;
  cfg.kernel_width = 3;
  cfg.max_len = 8;
  cfg.seed = seed;
  convcap::ModelParams p = convcap::init_params(cfg);
  for (convcap::TensorView& view : convcap::tensor_views(p))
    for (std::size_t i = 0; i < view.size; ++i) view.data[i] *= 8.0;

  Rng rng(seed + 1);
  std::vector<convcap::TrainExample> batch;
  for (int i = 0; i < 2; ++i) {
    convcap::TrainExample ex;
    ex.image.cells = convcap::Mat(3, 4);
    for (double& v : ex.image.cells.a) v = rng.uniform(-1.0, 1.0);
    ex.image.global_vec.assign(4, 0.0);
    for (int g = 0; g < 3; ++g)
      for (int f = 0; f < 4; ++f) ex.image.global_vec[f] += ex.image.cells(g, f) / 3.0;
    ex.tokens = {1, 4, 6, 5, 2};
    batch.push_back(ex);
  }
  double err = convcap::grad_check(p, batch, 1e-5, 60, seed + 2);
  if (err >= 1e-4)
    return {"gradient-check", false, "max relative error " + sci(err)};
  return {"gradient-check", true, "max relative error " + sci(err)};
}

namespace detail {

struct BeamOracleBest {
  std::vector<int> tokens;
  double score = -1e300;
};

inline void beam_oracle_extend(const decode::Scorer& scorer, int start_id, int end_id,
                               int vocab, int max_len, std::vector<int>& tokens,
                               double score, BeamOracleBest& best) {
  std::vector<int> prefix{start_id};
  prefix.insert(prefix.end(), tokens.begin(), tokens.end());
  std::vector<double> row = scorer(prefix);
  for (int w = 0; w < vocab; ++w) {
    tokens.push_back(w);
    double s = score + row[w];
    if (w == end_id || static_cast<int>(tokens.size()) == max_len) {
      if (s > best.score) best = {tokens, s};
    } else {
      beam_oracle_extend(scorer, start_id, end_id, vocab, max_len, tokens, s, best);
    }
    tokens.pop_back();
  }
}

}  // namespace detail

// Unpruned beam against exhaustive sequence enumeration, and beam-1 against
// a greedy argmax loop.
inline SuiteResult check_beam(int scorers = 10, std::uint64_t seed = 1004) {
  const int vocab = 4;
  const int max_len = 3;
  for (int trial = 0; trial < scorers; ++trial) {
    std::uint64_t scorer_seed = seed + trial;
    decode::Scorer scorer = [scorer_seed](const std::vector<int>& prefix) {
      std::uint64_t h = scorer_seed;
      for (int t : prefix) h = h * 1000003ULL + static_cast<std::uint64_t>(t) + 1;
      Rng rng(h);
      std::vector<double> logits(vocab);
      for (double& v : logits) v = rng.uniform(-3.0, 3.0);
      double max_z = *std::max_element(logits.begin(), logits.end());
      double lse = 0.0;
      for (double v : logits) lse += std::exp(v - max_z);
      lse = max_z + std::log(lse);
      for (double& v : logits) v -= lse;
      return logits;
    };

    decode::DecodeConfig cfg;
    cfg.max_len = max_len;
    cfg.beam_size = 1;
    for (int i = 0; i < max_len; ++i) cfg.beam_size *= vocab;
    std::vector<decode::Hypothesis> ranked = decode::beam_search(scorer, cfg, 1, 0, vocab);

    detail::BeamOracleBest best;
    std::vector<int> tokens;
    detail::beam_oracle_extend(scorer, 1, 0, vocab, max_len, tokens, 0.0, best);
    if (ranked.empty() || ranked[0].tokens != best.tokens)
      return {"beam-exhaustive", false, "scorer " + std::to_string(trial) + " mismatch"};

    decode::DecodeConfig greedy_cfg;
    greedy_cfg.max_len = max_len;
    greedy_cfg.beam_size = 1;
    std::vector<decode::Hypothesis> beam1 = decode::beam_search(scorer, greedy_cfg, 1, 0, vocab);
    std::vector<int> greedy;
    for (int step = 0; step < max_len; ++step) {
      std::vector<int> prefix{1};
      prefix.insert(prefix.end(), greedy.begin(), greedy.end());
      std::vector<double> row = scorer(prefix);
      int arg = 0;
      for (int w = 1; w < vocab; ++w)
        if (row[w] > row[arg]) arg = w;
      greedy.push_back(arg);
      if (arg == 0) break;
    }
    if (beam1.size() != 1 || beam1[0].tokens != greedy)
      return {"beam-exhaustive", false,
              "scorer " + std::to_string(trial) + " beam-1 != greedy"};
  }
  return {"beam-exhaustive", true, std::to_string(scorers) + " scorers exact"};
}

inline std::vector<SuiteResult> run_all() {
  return {check_cut_oracle(), check_game_oracle(), check_gradients(), check_beam()};
}

}  // namespace arccap::selfcheck
