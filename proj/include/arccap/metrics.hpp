#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "arccap/common.hpp"
#include "arccap/text.hpp"

namespace arccap::metrics {

using Tokens = std::vector<std::string>;
using Candidates = std::map<std::int64_t, std::string>;

constexpr int kMaxOrder = 4;

// B1..B4, ROUGE-L, CIDEr-D in Table column order; METEOR and SPICE are
// unsupported and serialize as null, never as zero.
struct MetricReport {
  double b1 = 0.0;
  double b2 = 0.0;
  double b3 = 0.0;
  double b4 = 0.0;
  std::optional<double> meteor;  // unsupported
  double rouge_l = 0.0;
  double cider = 0.0;
  std::optional<double> spice;  // unsupported
};

inline nlohmann::ordered_json report_to_json(const MetricReport& r) {
  nlohmann::ordered_json doc;
  doc["B1"] = r.b1;
  doc["B2"] = r.b2;
  doc["B3"] = r.b3;
  doc["B4"] = r.b4;
  doc["M"] = r.meteor.has_value() ? nlohmann::ordered_json(*r.meteor)
                                  : nlohmann::ordered_json(nullptr);
  doc["R"] = r.rouge_l;
  doc["C"] = r.cider;
  doc["S"] = r.spice.has_value() ? nlohmann::ordered_json(*r.spice)
                                 : nlohmann::ordered_json(nullptr);
  return doc;
}

namespace detail {

// n-grams keyed as tokens joined with an unprintable separator.
inline std::map<std::string, int> ngram_counts(const Tokens& tokens, int n) {
  std::map<std::string, int> counts;
  if (static_cast<int>(tokens.size()) < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    std::string key = tokens[i];
    for (int k = 1; k < n; ++k) {
      key.push_back('\x1f');
      key += tokens[i + k];
    }
    ++counts[key];
  }
  return counts;
}

}  // namespace detail

// Tokenized references plus cached per-order document frequencies.
struct RefCorpus {
  std::map<std::int64_t, std::vector<Tokens>> refs;
  std::array<std::map<std::string, int>, kMaxOrder> df;  // images containing the n-gram

  std::size_t num_images() const { return refs.size(); }

  static RefCorpus build(const std::map<std::int64_t, std::vector<std::string>>& raw) {
    RefCorpus corpus;
    for (const auto& [image_id, captions] : raw) {
      if (captions.empty())
        throw ValidationError("reference corpus: image " + std::to_string(image_id) +
                              " has no references");
      std::vector<Tokens> tokenized;
      for (const std::string& caption : captions)
        tokenized.push_back(data::tokenize(caption));
      corpus.refs[image_id] = std::move(tokenized);
    }
    for (const auto& [image_id, captions] : corpus.refs) {
      for (int n = 1; n <= kMaxOrder; ++n) {
        std::map<std::string, int> seen;
        for (const Tokens& ref : captions)
          for (const auto& [key, count] : detail::ngram_counts(ref, n)) seen[key] = 1;
        for (const auto& [key, one] : seen) corpus.df[n - 1][key] += 1;
      }
    }
    return corpus;
  }
};

namespace detail {

inline void check_candidates(const Candidates& candidates, const RefCorpus& refs) {
  if (candidates.empty()) throw ValidationError("metrics: empty candidate set");
  for (const auto& [image_id, caption] : candidates)
    if (!refs.refs.count(image_id))
      throw ValidationError("metrics: candidate image " + std::to_string(image_id) +
                            " has no references");
}

}  // namespace detail

// Corpus-level BLEU-n: clipped modified precisions pooled over the corpus,
// geometric mean over orders 1..n, brevity penalty with the per-image
// effective reference length (closest to the candidate, ties shorter). Any
// zero precision numerator gives 0; no smoothing.
inline double bleu(const Candidates& candidates, const RefCorpus& refs, int n) {
  if (n < 1 || n > kMaxOrder) throw ValidationError("bleu: order must lie in 1..4");
  detail::check_candidates(candidates, refs);

  std::array<std::int64_t, kMaxOrder> numer{}, denom{};
  std::int64_t cand_len_total = 0;
  std::int64_t eff_ref_total = 0;
  for (const auto& [image_id, caption] : candidates) {
    Tokens cand = data::tokenize(caption);
    const std::vector<Tokens>& ref_list = refs.refs.at(image_id);

    std::int64_t cand_len = static_cast<std::int64_t>(cand.size());
    cand_len_total += cand_len;
    std::int64_t best_ref = static_cast<std::int64_t>(ref_list[0].size());
    for (const Tokens& ref : ref_list) {
      auto len = static_cast<std::int64_t>(ref.size());
      auto dist = [&](std::int64_t l) { return std::abs(l - cand_len); };
      if (dist(len) < dist(best_ref) || (dist(len) == dist(best_ref) && len < best_ref))
        best_ref = len;
    }
    eff_ref_total += best_ref;

    for (int k = 1; k <= n; ++k) {
      std::map<std::string, int> cand_counts = detail::ngram_counts(cand, k);
      std::map<std::string, int> max_ref;
      for (const Tokens& ref : ref_list)
        for (const auto& [key, count] : detail::ngram_counts(ref, k))
          max_ref[key] = std::max(max_ref[key], count);
      for (const auto& [key, count] : cand_counts) {
        auto it = max_ref.find(key);
        if (it != max_ref.end()) numer[k - 1] += std::min(count, it->second);
        denom[k - 1] += count;
      }
    }
  }

  double log_precision = 0.0;
  for (int k = 1; k <= n; ++k) {
    if (numer[k - 1] == 0 || denom[k - 1] == 0) return 0.0;
    log_precision += std::log(static_cast<double>(numer[k - 1]) / denom[k - 1]);
  }
  log_precision /= n;
  double bp = 1.0;
  if (cand_len_total < eff_ref_total && cand_len_total > 0)
    bp = std::exp(1.0 - static_cast<double>(eff_ref_total) / cand_len_total);
  if (cand_len_total == 0) return 0.0;
  return bp * std::exp(log_precision);
}

namespace detail {

inline int lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<int> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      if (a[i - 1] == b[j - 1])
        cur[j] = prev[j - 1] + 1;
      else
        cur[j] = std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace detail

// ROUGE-L: per image the max over references of the LCS F-score with
// beta = 1.2; the corpus value is the mean over images.
inline double rouge_l(const Candidates& candidates, const RefCorpus& refs) {
  detail::check_candidates(candidates, refs);
  constexpr double beta = 1.2;
  double total = 0.0;
  for (const auto& [image_id, caption] : candidates) {
    Tokens cand = data::tokenize(caption);
    double best = 0.0;
    for (const Tokens& ref : refs.refs.at(image_id)) {
      if (cand.empty() || ref.empty()) continue;
      int lcs = detail::lcs_length(cand, ref);
      if (lcs == 0) continue;
      double recall = static_cast<double>(lcs) / ref.size();
      double precision = static_cast<double>(lcs) / cand.size();
      double f = (1.0 + beta * beta) * recall * precision /
                 (recall + beta * beta * precision);
      best = std::max(best, f);
    }
    total += best;
  }
  return total / candidates.size();
}

namespace detail {

struct TfIdfVec {
  std::map<std::string, double> weights;
  double norm = 0.0;
  std::int64_t length = 0;  // token count
};

inline TfIdfVec tfidf(const Tokens& tokens, int n, const RefCorpus& refs) {
  TfIdfVec vec;
  vec.length = static_cast<std::int64_t>(tokens.size());
  double log_images = std::log(static_cast<double>(refs.num_images()));
  for (const auto& [key, count] : ngram_counts(tokens, n)) {
    auto it = refs.df[n - 1].find(key);
    double df = it == refs.df[n - 1].end() ? 0.0 : it->second;
    double idf = log_images - std::log(std::max(1.0, df));
    double w = count * idf;
    vec.weights[key] = w;
    vec.norm += w * w;
  }
  vec.norm = std::sqrt(vec.norm);
  return vec;
}

}  // namespace detail

// CIDEr-D: per order 1..4, clipped tf-idf cosine against each reference with
// a Gaussian length penalty (sigma 6), averaged over references and orders,
// scaled by 10; the corpus value is the mean over images.
inline double cider(const Candidates& candidates, const RefCorpus& refs) {
  detail::check_candidates(candidates, refs);
  if (refs.num_images() < 2)
    throw ValidationError("cider: corpus needs at least 2 images for idf");
  constexpr double sigma = 6.0;

  double corpus_total = 0.0;
  for (const auto& [image_id, caption] : candidates) {
    Tokens cand = data::tokenize(caption);
    const std::vector<Tokens>& ref_list = refs.refs.at(image_id);
    std::array<double, kMaxOrder> order_scores{};
    for (int n = 1; n <= kMaxOrder; ++n) {
      detail::TfIdfVec cand_vec = detail::tfidf(cand, n, refs);
      double acc = 0.0;
      for (const Tokens& ref : ref_list) {
        detail::TfIdfVec ref_vec = detail::tfidf(ref, n, refs);
        double dot = 0.0;
        for (const auto& [key, w] : cand_vec.weights) {
          auto it = ref_vec.weights.find(key);
          if (it != ref_vec.weights.end()) dot += std::min(w, it->second) * it->second;
        }
        double sim = 0.0;
        if (cand_vec.norm > 0.0 && ref_vec.norm > 0.0)
          sim = dot / (cand_vec.norm * ref_vec.norm);
        double delta = static_cast<double>(cand_vec.length - ref_vec.length);
        sim *= std::exp(-delta * delta / (2.0 * sigma * sigma));
        acc += sim;
      }
      order_scores[n - 1] = acc / ref_list.size();
    }
    double mean = 0.0;
    for (double s : order_scores) mean += s;
    corpus_total += 10.0 * mean / kMaxOrder;
  }
  return corpus_total / candidates.size();
}

inline MetricReport evaluate_all(const Candidates& candidates, const RefCorpus& refs) {
  MetricReport report;
  report.b1 = bleu(candidates, refs, 1);
  report.b2 = bleu(candidates, refs, 2);
  report.b3 = bleu(candidates, refs, 3);
  report.b4 = bleu(candidates, refs, 4);
  report.rouge_l = rouge_l(candidates, refs);
  report.cider = cider(candidates, refs);
  return report;
}

}  // namespace arccap::metrics
