#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "arccap/common.hpp"

namespace arccap::decode {

struct DecodeConfig {
  int beam_size = 2;
  int max_len = 16;
  double fusion_lambda = 0.3;
  double fusion_epsilon = 1e-6;

  void validate() const {
    if (beam_size < 1) throw ValidationError("decode config: beam_size must be >= 1");
    if (max_len < 1) throw ValidationError("decode config: max_len must be >= 1");
    if (!(fusion_epsilon > 0.0))
      throw ValidationError("decode config: fusion_epsilon must be positive");
    if (!(fusion_lambda >= 0.0))
      throw ValidationError("decode config: fusion_lambda must be >= 0");
  }
};

// score[w] = emission[w] + lambda * ln(eps + m(w)) for mapped tokens,
// emission[w] otherwise. Lambda 0 is the exact identity.
inline std::vector<double> fuse(const std::vector<double>& emission,
                                const std::map<int, double>& attribute_marginals,
                                const DecodeConfig& cfg) {
  cfg.validate();
  std::vector<double> scores = emission;
  if (cfg.fusion_lambda == 0.0) return scores;
  for (const auto& [token, marginal] : attribute_marginals) {
    if (!(marginal >= 0.0 && marginal <= 1.0))
      throw ValidationError("fuse: marginal " + std::to_string(marginal) +
                            " outside [0,1] for token " + std::to_string(token));
    if (token < 0 || token >= static_cast<int>(emission.size()))
      throw ValidationError("fuse: mapped token id " + std::to_string(token) +
                            " outside vocabulary");
    scores[token] += cfg.fusion_lambda * std::log(cfg.fusion_epsilon + marginal);
  }
  return scores;
}

struct Hypothesis {
  std::vector<int> tokens;  // generated tokens; includes the end token when emitted
  double score = 0.0;
  bool completed = false;
};

// Prefix (start token included) -> per-token log scores.
using Scorer = std::function<std::vector<double>(const std::vector<int>&)>;

namespace detail {

inline bool ranks_before(const Hypothesis& a, const Hypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  return std::lexicographical_compare(a.tokens.begin(), a.tokens.end(),
                                      b.tokens.begin(), b.tokens.end());
}

}  // namespace detail

// Standard beam search over cumulative log-score, no length normalization.
// Hypotheses complete on the end token or at max_len generated tokens; the
// completed pool is returned ranked, ties in lexicographic token order.
// beam_size 1 is exactly greedy decoding.
inline std::vector<Hypothesis> beam_search(const Scorer& scorer, const DecodeConfig& cfg,
                                           int start_id, int end_id, int vocab_size) {
  cfg.validate();
  if (vocab_size < 1) throw ValidationError("beam search: vocab_size must be >= 1");
  if (start_id < 0 || start_id >= vocab_size || end_id < 0 || end_id >= vocab_size)
    throw ValidationError("beam search: start/end ids outside vocabulary");

  std::vector<Hypothesis> live{{{}, 0.0, false}};
  std::vector<Hypothesis> completed;

  for (int step = 0; step < cfg.max_len && !live.empty(); ++step) {
    std::vector<Hypothesis> candidates;
    candidates.reserve(live.size() * vocab_size);
    for (const Hypothesis& hyp : live) {
      std::vector<int> prefix;
      prefix.reserve(hyp.tokens.size() + 1);
      prefix.push_back(start_id);
      prefix.insert(prefix.end(), hyp.tokens.begin(), hyp.tokens.end());
      std::vector<double> scores = scorer(prefix);
      if (static_cast<int>(scores.size()) != vocab_size)
        throw ValidationError("beam search: scorer returned " +
                              std::to_string(scores.size()) + " scores, expected " +
                              std::to_string(vocab_size));
      for (int w = 0; w < vocab_size; ++w) {
        Hypothesis next;
        next.tokens = hyp.tokens;
        next.tokens.push_back(w);
        next.score = hyp.score + scores[w];
        candidates.push_back(std::move(next));
      }
    }
    std::sort(candidates.begin(), candidates.end(), detail::ranks_before);
    if (static_cast<int>(candidates.size()) > cfg.beam_size)
      candidates.resize(cfg.beam_size);

    live.clear();
    for (Hypothesis& hyp : candidates) {
      if (hyp.tokens.back() == end_id ||
          static_cast<int>(hyp.tokens.size()) == cfg.max_len) {
        hyp.completed = true;
        completed.push_back(std::move(hyp));
      } else {
        live.push_back(std::move(hyp));
      }
    }
  }

  std::sort(completed.begin(), completed.end(), detail::ranks_before);
  return completed;
}

}  // namespace arccap::decode
