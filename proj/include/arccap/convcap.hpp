#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "arccap/common.hpp"

namespace arccap::convcap {

// Row-major dense matrix; all model numerics run in double precision.
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, 0.0) {}

  double& operator()(int i, int j) { return a[static_cast<std::size_t>(i) * cols + j]; }
  double operator()(int i, int j) const { return a[static_cast<std::size_t>(i) * cols + j]; }
};

// Causal convolution kernel, taps indexed oldest-first: tap k applies to
// position t - (width-1) + k.
struct ConvKernel {
  int width = 0;
  int in_dim = 0;
  int out_dim = 0;
  std::vector<double> w;  // [width][in_dim][out_dim]

  ConvKernel() = default;
  ConvKernel(int k, int d_in, int d_out)
      : width(k),
        in_dim(d_in),
        out_dim(d_out),
        w(static_cast<std::size_t>(k) * d_in * d_out, 0.0) {}

  double& at(int k, int d, int c) {
    return w[(static_cast<std::size_t>(k) * in_dim + d) * out_dim + c];
  }
  double at(int k, int d, int c) const {
    return w[(static_cast<std::size_t>(k) * in_dim + d) * out_dim + c];
  }
};

inline std::vector<double> weight_norm(const std::vector<double>& v, double g) {
  double norm_sq = 0.0;
  for (double x : v) norm_sq += x * x;
  if (norm_sq <= 0.0) throw NumericError("weight norm: zero direction vector");
  double scale = g / std::sqrt(norm_sq);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * scale;
  return out;
}

// Output at position t depends only on inputs at positions <= t; the left
// edge is zero-padded.
inline Mat masked_conv(const Mat& inputs, const ConvKernel& kernel) {
  if (kernel.width < 1) throw ValidationError("masked conv: width must be >= 1");
  if (inputs.cols != kernel.in_dim)
    throw ValidationError("masked conv: input dim " + std::to_string(inputs.cols) +
                          " != kernel in dim " + std::to_string(kernel.in_dim));
  Mat out(inputs.rows, kernel.out_dim);
  for (int t = 0; t < inputs.rows; ++t) {
    for (int k = 0; k < kernel.width; ++k) {
      int src = t - (kernel.width - 1) + k;
      if (src < 0) continue;
      for (int d = 0; d < kernel.in_dim; ++d) {
        double x = inputs(src, d);
        if (x == 0.0) continue;
        for (int c = 0; c < kernel.out_dim; ++c) out(t, c) += kernel.at(k, d, c) * x;
      }
    }
  }
  return out;
}

struct ImageFeatures {
  Mat cells;                       // G x F
  std::vector<double> global_vec;  // F, pooled over cells

  int num_cells() const { return cells.rows; }
  int feature_dim() const { return cells.cols; }

  void validate() const {
    if (cells.rows < 1) throw ValidationError("image features: need at least one cell");
    if (static_cast<int>(global_vec.size()) != cells.cols)
      throw ValidationError("image features: pooled vector dim mismatch");
    for (double v : cells.a)
      if (!std::isfinite(v)) throw ValidationError("image features: non-finite cell value");
    for (double v : global_vec)
      if (!std::isfinite(v)) throw ValidationError("image features: non-finite pooled value");
  }
};

struct Attention {
  std::vector<double> context;  // F
  std::vector<double> weights;  // G, non-negative, sums to 1
};

// Scaled dot-product attention of one query over the image cells. The
// context mixes the raw cell features; any output projection is the
// caller's.
inline Attention attend(const Mat& query_proj, const Mat& cell_proj,
                        const std::vector<double>& query, const ImageFeatures& features) {
  const int attn_dim = query_proj.rows;
  if (query_proj.cols != static_cast<int>(query.size()))
    throw ValidationError("attend: query dim " + std::to_string(query.size()) +
                          " != projection dim " + std::to_string(query_proj.cols));
  if (cell_proj.cols != features.feature_dim() || cell_proj.rows != attn_dim)
    throw ValidationError("attend: cell projection dims inconsistent");
  const int g_count = features.num_cells();

  std::vector<double> q(attn_dim, 0.0);
  for (int a = 0; a < attn_dim; ++a)
    for (int d = 0; d < query_proj.cols; ++d) q[a] += query_proj(a, d) * query[d];

  std::vector<double> scores(g_count, 0.0);
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(attn_dim));
  for (int g = 0; g < g_count; ++g) {
    double s = 0.0;
    for (int a = 0; a < attn_dim; ++a) {
      double k = 0.0;
      for (int f = 0; f < cell_proj.cols; ++f) k += cell_proj(a, f) * features.cells(g, f);
      s += q[a] * k;
    }
    scores[g] = s * inv_sqrt;
  }

  double max_score = *std::max_element(scores.begin(), scores.end());
  double z = 0.0;
  Attention out;
  out.weights.resize(g_count);
  for (int g = 0; g < g_count; ++g) {
    out.weights[g] = std::exp(scores[g] - max_score);
    z += out.weights[g];
  }
  for (double& w : out.weights) w /= z;
  out.context.assign(features.feature_dim(), 0.0);
  for (int g = 0; g < g_count; ++g)
    for (int f = 0; f < features.feature_dim(); ++f)
      out.context[f] += out.weights[g] * features.cells(g, f);
  return out;
}

struct ModelConfig {
  int vocab_size = 0;    // V
  int embed_dim = 64;    // D
  int feature_dim = 0;   // F
  int attn_dim = 64;     // A
  int layers = 3;
  int kernel_width = 5;
  int max_len = 16;      // generated tokens per caption, end included
  double dropout = 0.0;
  bool use_weight_norm = true;
  bool use_residual = true;
  bool use_attention = true;
  std::uint64_t seed = 1;

  void validate() const {
    if (vocab_size < 1 || embed_dim < 1 || feature_dim < 1 || attn_dim < 1)
      throw ValidationError("model config: dims must be >= 1");
    if (layers < 1 || kernel_width < 1 || max_len < 1)
      throw ValidationError("model config: layers/kernel/max_len must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0))
      throw ValidationError("model config: dropout must lie in [0,1)");
  }
};

struct LayerParams {
  ConvKernel conv_v;           // direction tensor, K x D x 2D
  std::vector<double> conv_g;  // per-output-channel gain, 2D
  std::vector<double> conv_b;  // bias, 2D
  Mat attn_q;                  // A x D
  Mat attn_k;                  // A x F
  Mat attn_o;                  // D x F
};

struct ModelParams {
  ModelConfig cfg;
  Mat embed;     // V x D
  Mat img_proj;  // D x F
  std::vector<LayerParams> layers;
  Mat out_w;  // V x D
  std::vector<double> out_b;  // V
};

// Named views over every trainable tensor, shared by the optimizer, the
// checkpoint writer and the gradient checker.
struct TensorView {
  std::string name;
  double* data;
  std::size_t size;
};

inline std::vector<TensorView> tensor_views(ModelParams& p) {
  std::vector<TensorView> views;
  views.push_back({"embed", p.embed.a.data(), p.embed.a.size()});
  views.push_back({"img_proj", p.img_proj.a.data(), p.img_proj.a.size()});
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    std::string prefix = "layer" + std::to_string(l) + "/";
    LayerParams& lay = p.layers[l];
    views.push_back({prefix + "conv_v", lay.conv_v.w.data(), lay.conv_v.w.size()});
    views.push_back({prefix + "conv_g", lay.conv_g.data(), lay.conv_g.size()});
    views.push_back({prefix + "conv_b", lay.conv_b.data(), lay.conv_b.size()});
    views.push_back({prefix + "attn_q", lay.attn_q.a.data(), lay.attn_q.a.size()});
    views.push_back({prefix + "attn_k", lay.attn_k.a.data(), lay.attn_k.a.size()});
    views.push_back({prefix + "attn_o", lay.attn_o.a.data(), lay.attn_o.a.size()});
  }
  views.push_back({"out_w", p.out_w.a.data(), p.out_w.a.size()});
  views.push_back({"out_b", p.out_b.data(), p.out_b.size()});
  return views;
}

inline ModelParams init_params(const ModelConfig& cfg) {
  cfg.validate();
  ModelParams p;
  p.cfg = cfg;
  const int d = cfg.embed_dim;
  p.embed = Mat(cfg.vocab_size, d);
  p.img_proj = Mat(d, cfg.feature_dim);
  p.layers.resize(cfg.layers);
  for (LayerParams& lay : p.layers) {
    lay.conv_v = ConvKernel(cfg.kernel_width, d, 2 * d);
    lay.conv_g.assign(2 * d, 0.0);
    lay.conv_b.assign(2 * d, 0.0);
    lay.attn_q = Mat(cfg.attn_dim, d);
    lay.attn_k = Mat(cfg.attn_dim, cfg.feature_dim);
    lay.attn_o = Mat(d, cfg.feature_dim);
  }
  p.out_w = Mat(cfg.vocab_size, d);
  p.out_b.assign(cfg.vocab_size, 0.0);

  Rng rng(cfg.seed);
  for (TensorView& view : tensor_views(p))
    for (std::size_t i = 0; i < view.size; ++i) view.data[i] = rng.uniform(-0.05, 0.05);

  // Gains start at the direction norms so the effective kernel is identical
  // with weight normalization on or off.
  for (LayerParams& lay : p.layers) {
    for (int c = 0; c < lay.conv_v.out_dim; ++c) {
      double norm_sq = 0.0;
      for (int k = 0; k < lay.conv_v.width; ++k)
        for (int dd = 0; dd < lay.conv_v.in_dim; ++dd)
          norm_sq += lay.conv_v.at(k, dd, c) * lay.conv_v.at(k, dd, c);
      lay.conv_g[c] = std::sqrt(norm_sq);
    }
  }
  return p;
}

// Per-channel normalized kernel (or the raw direction when the flag is off).
inline ConvKernel effective_kernel(const LayerParams& lay, bool use_weight_norm) {
  if (!use_weight_norm) return lay.conv_v;
  ConvKernel w = lay.conv_v;
  for (int c = 0; c < w.out_dim; ++c) {
    double norm_sq = 0.0;
    for (int k = 0; k < w.width; ++k)
      for (int d = 0; d < w.in_dim; ++d) norm_sq += lay.conv_v.at(k, d, c) * lay.conv_v.at(k, d, c);
    if (norm_sq <= 0.0) throw NumericError("weight norm: zero direction for channel");
    double scale = lay.conv_g[c] / std::sqrt(norm_sq);
    for (int k = 0; k < w.width; ++k)
      for (int d = 0; d < w.in_dim; ++d) w.at(k, d, c) = lay.conv_v.at(k, d, c) * scale;
  }
  return w;
}

// T x V log-probabilities; every row exponentiates to 1.
struct EmissionLattice {
  Mat logprobs;

  void validate() const {
    for (int t = 0; t < logprobs.rows; ++t) {
      double sum = 0.0;
      for (int v = 0; v < logprobs.cols; ++v) {
        double lp = logprobs(t, v);
        if (std::isnan(lp) || lp > 0.5)
          throw ValidationError("emission lattice: invalid log-probability");
        sum += std::exp(lp);
      }
      if (std::abs(sum - 1.0) > 1e-6)
        throw ValidationError("emission lattice: row " + std::to_string(t) +
                              " sums to " + std::to_string(sum));
    }
  }
};

namespace detail {

struct LayerCache {
  Mat input;        // T x D
  Mat conv_out;     // T x 2D, bias included
  Mat glu;          // T x D
  Mat queries;      // T x A (projected)
  Mat attn_weights; // T x G
  Mat contexts;     // T x F
  Mat post_attn;    // T x D
  Mat dropout_mask; // T x D, scaled by 1/(1-p); empty when inactive
};

struct ForwardCache {
  Mat x0;  // embeddings + image projection
  std::vector<LayerCache> layers;
  Mat final_hidden;  // T x D
  Mat logits;        // T x V
  Mat logprobs;      // T x V
};

inline void validate_tokens(const ModelParams& p, const std::vector<int>& tokens,
                            int start_id) {
  if (tokens.empty()) throw ValidationError("forward: empty token prefix");
  if (tokens[0] != start_id)
    throw ValidationError("forward: prefix must begin with the start token");
  if (static_cast<int>(tokens.size()) > p.cfg.max_len)
    throw ValidationError("forward: prefix length " + std::to_string(tokens.size()) +
                          " exceeds max_len " + std::to_string(p.cfg.max_len));
  for (int t : tokens)
    if (t < 0 || t >= p.cfg.vocab_size)
      throw ValidationError("forward: unknown token id " + std::to_string(t));
}

// Full teacher-forced pass. Dropout masks are drawn only when rng is given
// and the rate is positive; otherwise the pass is the eval-mode identity.
inline ForwardCache run_forward(const ModelParams& p, const ImageFeatures& image,
                                const std::vector<int>& tokens, Rng* dropout_rng) {
  const ModelConfig& cfg = p.cfg;
  image.validate();
  if (image.feature_dim() != cfg.feature_dim)
    throw ValidationError("forward: image feature dim " +
                          std::to_string(image.feature_dim()) + " != configured " +
                          std::to_string(cfg.feature_dim));
  const int seq = static_cast<int>(tokens.size());
  const int d = cfg.embed_dim;

  ForwardCache cache;
  cache.x0 = Mat(seq, d);
  std::vector<double> img_bias(d, 0.0);
  for (int i = 0; i < d; ++i)
    for (int f = 0; f < cfg.feature_dim; ++f)
      img_bias[i] += p.img_proj(i, f) * image.global_vec[f];
  for (int t = 0; t < seq; ++t)
    for (int i = 0; i < d; ++i) cache.x0(t, i) = p.embed(tokens[t], i) + img_bias[i];

  Mat x = cache.x0;
  cache.layers.resize(cfg.layers);
  for (int l = 0; l < cfg.layers; ++l) {
    LayerCache& lc = cache.layers[l];
    const LayerParams& lay = p.layers[l];
    lc.input = x;

    ConvKernel w = effective_kernel(lay, cfg.use_weight_norm);
    lc.conv_out = masked_conv(x, w);
    for (int t = 0; t < seq; ++t)
      for (int c = 0; c < 2 * d; ++c) lc.conv_out(t, c) += lay.conv_b[c];

    lc.glu = Mat(seq, d);
    for (int t = 0; t < seq; ++t)
      for (int i = 0; i < d; ++i) {
        double gate = 1.0 / (1.0 + std::exp(-lc.conv_out(t, d + i)));
        lc.glu(t, i) = lc.conv_out(t, i) * gate;
      }

    Mat h = lc.glu;
    if (cfg.use_attention) {
      lc.queries = Mat(seq, cfg.attn_dim);
      lc.attn_weights = Mat(seq, image.num_cells());
      lc.contexts = Mat(seq, cfg.feature_dim);
      for (int t = 0; t < seq; ++t) {
        std::vector<double> query(d);
        for (int i = 0; i < d; ++i) query[i] = lc.glu(t, i);
        Attention att = attend(lay.attn_q, lay.attn_k, query, image);
        for (int a = 0; a < cfg.attn_dim; ++a) {
          double q = 0.0;
          for (int i = 0; i < d; ++i) q += lay.attn_q(a, i) * query[i];
          lc.queries(t, a) = q;  // backward needs the projected query
        }
        for (int g = 0; g < image.num_cells(); ++g) lc.attn_weights(t, g) = att.weights[g];
        for (int f = 0; f < cfg.feature_dim; ++f) lc.contexts(t, f) = att.context[f];
        for (int i = 0; i < d; ++i) {
          double add = 0.0;
          for (int f = 0; f < cfg.feature_dim; ++f) add += lay.attn_o(i, f) * att.context[f];
          h(t, i) += add;
        }
      }
    }
    lc.post_attn = h;

    if (cfg.use_residual)
      for (int t = 0; t < seq; ++t)
        for (int i = 0; i < d; ++i) h(t, i) += x(t, i);

    if (dropout_rng != nullptr && cfg.dropout > 0.0) {
      lc.dropout_mask = Mat(seq, d);
      double keep = 1.0 - cfg.dropout;
      for (int t = 0; t < seq; ++t)
        for (int i = 0; i < d; ++i) {
          double mask = dropout_rng->next_double() < cfg.dropout ? 0.0 : 1.0 / keep;
          lc.dropout_mask(t, i) = mask;
          h(t, i) *= mask;
        }
    }
    x = h;
  }

  cache.final_hidden = x;
  cache.logits = Mat(seq, cfg.vocab_size);
  for (int t = 0; t < seq; ++t)
    for (int v = 0; v < cfg.vocab_size; ++v) {
      double z = p.out_b[v];
      for (int i = 0; i < d; ++i) z += p.out_w(v, i) * x(t, i);
      cache.logits(t, v) = z;
    }

  cache.logprobs = Mat(seq, cfg.vocab_size);
  for (int t = 0; t < seq; ++t) {
    double max_z = cache.logits(t, 0);
    for (int v = 1; v < cfg.vocab_size; ++v) max_z = std::max(max_z, cache.logits(t, v));
    double lse = 0.0;
    for (int v = 0; v < cfg.vocab_size; ++v) lse += std::exp(cache.logits(t, v) - max_z);
    lse = max_z + std::log(lse);
    for (int v = 0; v < cfg.vocab_size; ++v)
      cache.logprobs(t, v) = cache.logits(t, v) - lse;
  }
  return cache;
}

}  // namespace detail

// Next-token distribution for a prefix (eval mode, start token id supplied
// by the caller's vocabulary).
inline std::vector<double> forward(const ModelParams& p, const ImageFeatures& image,
                                   const std::vector<int>& tokens, int start_id) {
  detail::validate_tokens(p, tokens, start_id);
  detail::ForwardCache cache = detail::run_forward(p, image, tokens, nullptr);
  std::vector<double> out(p.cfg.vocab_size);
  int last = static_cast<int>(tokens.size()) - 1;
  for (int v = 0; v < p.cfg.vocab_size; ++v) out[v] = cache.logprobs(last, v);
  return out;
}

// Teacher-forced per-position distributions for the whole sequence.
inline EmissionLattice emission_lattice(const ModelParams& p, const ImageFeatures& image,
                                        const std::vector<int>& tokens, int start_id) {
  detail::validate_tokens(p, tokens, start_id);
  detail::ForwardCache cache = detail::run_forward(p, image, tokens, nullptr);
  return EmissionLattice{cache.logprobs};
}

struct TrainExample {
  ImageFeatures image;
  std::vector<int> tokens;  // start token, body, end token
};

namespace detail {

inline ModelParams zero_like(const ModelParams& p) {
  ModelParams g = p;
  for (TensorView& view : tensor_views(g)) std::fill(view.data, view.data + view.size, 0.0);
  return g;
}

// Accumulates d(total nll)/d(params) for one example; returns its nll sum
// and position count.
inline std::pair<double, int> backward_example(const ModelParams& p, ModelParams& grads,
                                               const ImageFeatures& image,
                                               const std::vector<int>& tokens,
                                               Rng* dropout_rng) {
  const ModelConfig& cfg = p.cfg;
  const int d = cfg.embed_dim;
  if (tokens.size() < 2)
    throw ValidationError("train: sequence needs at least two tokens");
  for (int tok : tokens)
    if (tok < 0 || tok >= cfg.vocab_size)
      throw ValidationError("train: unknown token id " + std::to_string(tok));

  std::vector<int> inputs(tokens.begin(), tokens.end() - 1);
  std::vector<int> targets(tokens.begin() + 1, tokens.end());
  const int seq = static_cast<int>(inputs.size());
  if (seq > cfg.max_len)
    throw ValidationError("train: sequence length exceeds max_len");

  ForwardCache cache = run_forward(p, image, inputs, dropout_rng);

  double nll = 0.0;
  for (int t = 0; t < seq; ++t) nll -= cache.logprobs(t, targets[t]);

  // d nll / d logits = softmax - onehot, per position.
  Mat dlogits(seq, cfg.vocab_size);
  for (int t = 0; t < seq; ++t)
    for (int v = 0; v < cfg.vocab_size; ++v) {
      double soft = std::exp(cache.logprobs(t, v));
      dlogits(t, v) = soft - (v == targets[t] ? 1.0 : 0.0);
    }

  Mat dx(seq, d);
  for (int t = 0; t < seq; ++t)
    for (int v = 0; v < cfg.vocab_size; ++v) {
      double dz = dlogits(t, v);
      if (dz == 0.0) continue;
      grads.out_b[v] += dz;
      for (int i = 0; i < d; ++i) {
        grads.out_w(v, i) += dz * cache.final_hidden(t, i);
        dx(t, i) += p.out_w(v, i) * dz;
      }
    }

  for (int l = cfg.layers - 1; l >= 0; --l) {
    const LayerCache& lc = cache.layers[l];
    const LayerParams& lay = p.layers[l];
    LayerParams& glay = grads.layers[l];

    if (lc.dropout_mask.rows > 0)
      for (int t = 0; t < seq; ++t)
        for (int i = 0; i < d; ++i) dx(t, i) *= lc.dropout_mask(t, i);

    Mat dinput(seq, d);
    if (cfg.use_residual) dinput = dx;  // residual branch

    Mat dglu = dx;  // direct branch into the post-attention sum
    if (cfg.use_attention) {
      const int g_count = image.num_cells();
      const int f_dim = cfg.feature_dim;
      double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg.attn_dim));
      // Cell projections are shared across positions.
      Mat keys(g_count, cfg.attn_dim);
      for (int g = 0; g < g_count; ++g)
        for (int a = 0; a < cfg.attn_dim; ++a) {
          double k = 0.0;
          for (int f = 0; f < f_dim; ++f) k += lay.attn_k(a, f) * image.cells(g, f);
          keys(g, a) = k;
        }
      for (int t = 0; t < seq; ++t) {
        std::vector<double> dctx(f_dim, 0.0);
        for (int i = 0; i < d; ++i) {
          double dz = dx(t, i);
          if (dz == 0.0) continue;
          for (int f = 0; f < f_dim; ++f) {
            glay.attn_o(i, f) += dz * lc.contexts(t, f);
            dctx[f] += lay.attn_o(i, f) * dz;
          }
        }
        std::vector<double> dalpha(g_count, 0.0);
        for (int g = 0; g < g_count; ++g)
          for (int f = 0; f < f_dim; ++f) dalpha[g] += dctx[f] * image.cells(g, f);
        double dot = 0.0;
        for (int g = 0; g < g_count; ++g) dot += lc.attn_weights(t, g) * dalpha[g];
        std::vector<double> dscore(g_count);
        for (int g = 0; g < g_count; ++g)
          dscore[g] = lc.attn_weights(t, g) * (dalpha[g] - dot);

        std::vector<double> dquery(cfg.attn_dim, 0.0);
        for (int g = 0; g < g_count; ++g) {
          double ds = dscore[g] * inv_sqrt;
          if (ds == 0.0) continue;
          for (int a = 0; a < cfg.attn_dim; ++a) {
            dquery[a] += ds * keys(g, a);
            double dkey = ds * lc.queries(t, a);
            for (int f = 0; f < f_dim; ++f)
              glay.attn_k(a, f) += dkey * image.cells(g, f);
          }
        }
        for (int a = 0; a < cfg.attn_dim; ++a) {
          double dq = dquery[a];
          if (dq == 0.0) continue;
          for (int i = 0; i < d; ++i) {
            glay.attn_q(a, i) += dq * lc.glu(t, i);
            dglu(t, i) += lay.attn_q(a, i) * dq;
          }
        }
      }
    }

    Mat dconv(seq, 2 * d);
    for (int t = 0; t < seq; ++t)
      for (int i = 0; i < d; ++i) {
        double dh = dglu(t, i);
        double gate = 1.0 / (1.0 + std::exp(-lc.conv_out(t, d + i)));
        dconv(t, i) = dh * gate;
        dconv(t, d + i) = dh * lc.conv_out(t, i) * gate * (1.0 - gate);
      }

    for (int t = 0; t < seq; ++t)
      for (int c = 0; c < 2 * d; ++c) glay.conv_b[c] += dconv(t, c);

    ConvKernel w = effective_kernel(lay, cfg.use_weight_norm);
    ConvKernel dkernel(cfg.kernel_width, d, 2 * d);
    for (int t = 0; t < seq; ++t) {
      for (int k = 0; k < cfg.kernel_width; ++k) {
        int src = t - (cfg.kernel_width - 1) + k;
        if (src < 0) continue;
        for (int c = 0; c < 2 * d; ++c) {
          double dz = dconv(t, c);
          if (dz == 0.0) continue;
          for (int i = 0; i < d; ++i) {
            dkernel.at(k, i, c) += dz * lc.input(src, i);
            dinput(src, i) += w.at(k, i, c) * dz;
          }
        }
      }
    }

    if (cfg.use_weight_norm) {
      // W_c = g_c v_c / |v_c|; chain through per-channel norms.
      for (int c = 0; c < 2 * d; ++c) {
        double norm_sq = 0.0, vdot = 0.0;
        for (int k = 0; k < cfg.kernel_width; ++k)
          for (int i = 0; i < d; ++i) {
            norm_sq += lay.conv_v.at(k, i, c) * lay.conv_v.at(k, i, c);
            vdot += lay.conv_v.at(k, i, c) * dkernel.at(k, i, c);
          }
        double norm = std::sqrt(norm_sq);
        glay.conv_g[c] += vdot / norm;
        double scale = lay.conv_g[c] / norm;
        for (int k = 0; k < cfg.kernel_width; ++k)
          for (int i = 0; i < d; ++i)
            glay.conv_v.at(k, i, c) +=
                scale * (dkernel.at(k, i, c) - vdot * lay.conv_v.at(k, i, c) / norm_sq);
      }
    } else {
      for (std::size_t i = 0; i < dkernel.w.size(); ++i) glay.conv_v.w[i] += dkernel.w[i];
    }

    dx = dinput;
  }

  std::vector<double> dimg(d, 0.0);
  for (int t = 0; t < seq; ++t) {
    for (int i = 0; i < d; ++i) {
      grads.embed(inputs[t], i) += dx(t, i);
      dimg[i] += dx(t, i);
    }
  }
  for (int i = 0; i < d; ++i)
    for (int f = 0; f < cfg.feature_dim; ++f)
      grads.img_proj(i, f) += dimg[i] * image.global_vec[f];

  return {nll, seq};
}

}  // namespace detail

struct TrainStepResult {
  double loss = 0.0;  // mean cross-entropy per token, nats
};

// One teacher-forced gradient step: exact backprop, global-norm clipping,
// plain gradient descent. Deterministic for a given dropout rng state.
inline TrainStepResult train_step(ModelParams& p, const std::vector<TrainExample>& batch,
                                  double lr, Rng* dropout_rng = nullptr,
                                  double clip_norm = 5.0) {
  if (batch.empty()) throw ValidationError("train step: empty batch");
  if (lr < 0.0) throw ValidationError("train step: negative learning rate");

  ModelParams grads = detail::zero_like(p);
  double total_nll = 0.0;
  int total_tokens = 0;
  for (const TrainExample& ex : batch) {
    auto [nll, count] = detail::backward_example(
        p, grads, ex.image, ex.tokens, p.cfg.dropout > 0.0 ? dropout_rng : nullptr);
    total_nll += nll;
    total_tokens += count;
  }
  double loss = total_nll / total_tokens;
  if (!std::isfinite(loss)) throw NumericError("train step: non-finite loss");

  double norm_sq = 0.0;
  std::vector<TensorView> gviews = tensor_views(grads);
  for (TensorView& view : gviews)
    for (std::size_t i = 0; i < view.size; ++i) {
      view.data[i] /= total_tokens;
      norm_sq += view.data[i] * view.data[i];
    }
  double norm = std::sqrt(norm_sq);
  if (!std::isfinite(norm)) throw NumericError("train step: non-finite gradient");
  double scale = norm > clip_norm ? clip_norm / norm : 1.0;

  std::vector<TensorView> pviews = tensor_views(p);
  for (std::size_t v = 0; v < pviews.size(); ++v)
    for (std::size_t i = 0; i < pviews[v].size; ++i)
      pviews[v].data[i] -= lr * scale * gviews[v].data[i];

  return {loss};
}

// Mean per-token cross-entropy of a batch without updating parameters.
inline double eval_loss(const ModelParams& p, const std::vector<TrainExample>& batch) {
  if (batch.empty()) throw ValidationError("eval loss: empty batch");
  double total_nll = 0.0;
  int total_tokens = 0;
  for (const TrainExample& ex : batch) {
    std::vector<int> inputs(ex.tokens.begin(), ex.tokens.end() - 1);
    detail::ForwardCache cache = detail::run_forward(p, ex.image, inputs, nullptr);
    for (std::size_t t = 0; t + 1 < ex.tokens.size(); ++t)
      total_nll -= cache.logprobs(static_cast<int>(t), ex.tokens[t + 1]);
    total_tokens += static_cast<int>(inputs.size());
  }
  return total_nll / total_tokens;
}

// Central-difference derivative of a scalar function; the probe behind the
// gradient checker.
inline double central_diff(const std::function<double(double)>& fn, double x, double eps) {
  if (!(eps > 0.0)) throw ValidationError("central diff: eps must be positive");
  return (fn(x + eps) - fn(x - eps)) / (2.0 * eps);
}

// Max relative error between analytic and central-difference gradients on a
// random coordinate subset. Requires dropout disabled.
inline double grad_check(const ModelParams& params, const std::vector<TrainExample>& batch,
                         double eps, int coords = 64, std::uint64_t seed = 12345) {
  if (!(eps > 0.0)) throw ValidationError("grad check: eps must be positive");
  if (params.cfg.dropout != 0.0)
    throw ValidationError("grad check: dropout must be disabled");
  if (coords < 50) coords = 50;

  ModelParams p = params;
  ModelParams grads = detail::zero_like(p);
  double total_tokens = 0.0;
  for (const TrainExample& ex : batch) {
    auto [nll, count] = detail::backward_example(p, grads, ex.image, ex.tokens, nullptr);
    total_tokens += count;
  }
  std::vector<TensorView> gviews = tensor_views(grads);
  for (TensorView& view : gviews)
    for (std::size_t i = 0; i < view.size; ++i) view.data[i] /= total_tokens;

  auto loss_at = [&]() {
    double nll = 0.0;
    int count = 0;
    for (const TrainExample& ex : batch) {
      std::vector<int> inputs(ex.tokens.begin(), ex.tokens.end() - 1);
      detail::ForwardCache cache = detail::run_forward(p, ex.image, inputs, nullptr);
      for (std::size_t t = 0; t + 1 < ex.tokens.size(); ++t)
        nll -= cache.logprobs(static_cast<int>(t), ex.tokens[t + 1]);
      count += static_cast<int>(inputs.size());
    }
    return nll / count;
  };

  std::vector<TensorView> pviews = tensor_views(p);
  std::size_t total_size = 0;
  for (TensorView& view : pviews) total_size += view.size;

  Rng rng(seed);
  double max_rel = 0.0;
  for (int probe = 0; probe < coords; ++probe) {
    std::size_t flat = static_cast<std::size_t>(rng.next_below(total_size));
    std::size_t v = 0;
    while (flat >= pviews[v].size) {
      flat -= pviews[v].size;
      ++v;
    }
    double* slot = pviews[v].data + flat;
    double original = *slot;
    *slot = original + eps;
    double hi = loss_at();
    *slot = original - eps;
    double lo = loss_at();
    *slot = original;
    double numeric = (hi - lo) / (2.0 * eps);
    double analytic = gviews[v].data[flat];
    double rel = std::abs(analytic - numeric) /
                 std::max({1.0, std::abs(analytic), std::abs(numeric)});
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace arccap::convcap
