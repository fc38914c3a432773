// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tabrep/batcher.hpp"
#include "tabrep/errors.hpp"
#include "tabrep/rng.hpp"
#include "tabrep/tokenizer.hpp"

namespace tabrep {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

struct BackboneConfig {
  enum class Activation { Gelu, Relu };

  int d_model = 64;
  int n_heads = 8;
  int n_layers = 4;
  int ffn_mult = 4;
  double dropout = 0.1;
  Activation activation = Activation::Gelu;

  int head_dim() const { return d_model / n_heads; }
  int ffn_dim() const { return ffn_mult * d_model; }

  void validate() const {
    if (d_model <= 0 || n_heads <= 0 || n_layers < 1 || ffn_mult <= 0)
      throw ConfigError("backbone: dimensions must be positive");
    if (d_model % n_heads != 0) throw ConfigError("backbone: d_model not divisible by n_heads");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("backbone: dropout out of range");
  }
};

/// Named presets: S(16,4,4), M(64,8,4), L(128,8,8), XL(192,16,36).
BackboneConfig backbone_preset(std::string_view name);

/// Closed-form parameter count of the encoder stack (layer norms, attention,
/// FFN, final norm). Embeddings and the projection head are excluded.
std::int64_t backbone_param_count(const BackboneConfig& config);

inline constexpr double kLayerNormEps = 1e-5;

/// Reference to one parameter tensor; Eigen stores matrices column-major, so
/// `data` points at rows*cols contiguous scalars in column-major order.
template <typename S>
struct TensorRef {
  std::string name;
  S* data = nullptr;
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  bool decay = false;     // participates in weight decay
  bool backbone = false;  // part of the encoder stack (frozen during frozen transfer)

  std::int64_t size() const { return rows * cols; }
};

/// All learnable state. Activations are laid out d x N with one column per
/// position: embedding column t is token t's vector, head_w row r is the
/// output weight of target id r+2.
template <typename S>
struct Model {
  BackboneConfig config;
  std::int64_t vocab_size = 0;

  Mat<S> embedding;  // d x vocab_size

  struct Layer {
    Vec<S> ln1_g, ln1_b;
    Mat<S> wq, wk, wv, wo;
    Vec<S> bq, bk, bv, bo;
    Vec<S> ln2_g, ln2_b;
    Mat<S> w1;  // ffn x d
    Vec<S> b1;
    Mat<S> w2;  // d x ffn
    Vec<S> b2;
  };
  std::vector<Layer> layers;

  Vec<S> lnf_g, lnf_b;

  Mat<S> head_w;  // target_size x d
  Vec<S> head_b;  // target_size

  std::int64_t target_size() const { return vocab_size - 2; }

  static Model init(const BackboneConfig& config, std::int64_t vocab_size, Rng& rng);
  static Model zeros(const BackboneConfig& config, std::int64_t vocab_size);
  static Model zeros_like(const Model& other) { return zeros(other.config, other.vocab_size); }
  void set_zero();
  bool all_finite() const;

  std::vector<TensorRef<S>> tensors();
  std::vector<TensorRef<const S>> tensors() const;

  /// Grow the vocabulary: appends freshly initialized embedding columns and
  /// head rows for ids [vocab_size, new_vocab_size); existing parameters are
  /// untouched.
  void extend_vocab(std::int64_t new_vocab_size, Rng& rng);
};

template <typename S>
struct EncodeCache;

/// Pure lookup of token embeddings; no positional or column/table bias.
template <typename S>
Mat<S> embed(const Model<S>& model, std::span<const std::int64_t> ids);

/// Pre-norm Transformer encoder over a padded batch. `x0` holds batch*width
/// embedding columns (position (e, p) at column e*width + p). Pad positions
/// are excluded from attention keys; dropout is active only in train mode and
/// draws from `dropout_rng` in a fixed order. Returns the final-norm output.
template <typename S>
Mat<S> encode(const Model<S>& model, const Mat<S>& x0, std::size_t batch, std::size_t width,
              std::span<const std::uint8_t> pad_flags, bool train, Rng* dropout_rng,
              EncodeCache<S>* cache = nullptr);

/// Affine projection into the union target space. Input columns are position
/// vectors; output is (target_size x n), one column of logits per position.
template <typename S>
Mat<S> project_head(const Model<S>& model, const Mat<S>& vectors);

struct CeLoss {
  double loss = 0.0;          // mean over positions; 0 when none
  bool any_positions = false; // false flags a zero-mask batch
};

/// Cross-entropy restricted to each position's subspace: the softmax is
/// computed over exactly the range's logits (an orthogonal projection onto the
/// column's target space, not an additive -inf mask). Accumulates in double.
/// `logits` is (target_size x n); `targets` holds global value ids.
template <typename S>
CeLoss restricted_cross_entropy(const Mat<S>& logits, std::span<const std::int64_t> targets,
                                std::span<const SubspaceRange> ranges);

/// Arithmetic mean over non-pad positions of each row; (d x batch) output.
template <typename S>
Mat<S> mean_pool(const Mat<S>& ctx, std::size_t batch, std::size_t width,
                 std::span<const std::uint8_t> pad_flags);

struct StepStats {
  double loss = 0.0;
  bool any_masked = false;
  std::size_t n_masked = 0;
  double top1 = 0.0;  // fraction of masked cells recovered at rank 1
  double top3 = 0.0;
};

/// Forward pass and restricted-CE loss over a padded batch; per-position
/// logits are computed on each masked cell's subspace slice only, which is
/// arithmetically identical to slicing full head logits.
template <typename S>
StepStats forward_loss(const Model<S>& model, const PaddedBatch& batch, bool train,
                       Rng* dropout_rng);

/// forward_loss plus backward: accumulates parameter gradients of the mean
/// masked-cell loss into `grads` (caller zeroes beforehand).
template <typename S>
StepStats forward_backward(const Model<S>& model, const PaddedBatch& batch, bool train,
                           Rng* dropout_rng, Model<S>& grads);

struct ImputeCandidate {
  int local_index = 0;
  double probability = 0.0;
  std::string value;        // decoded representative ("" when is_missing)
  bool is_missing = false;  // candidate is the NAN category
};

/// Replace the hidden cells of one raw row with MASK, run the encoder in eval
/// mode, and return the top-k candidates per hidden cell under the
/// subspace-restricted softmax. k is clamped to the subspace size.
template <typename S>
std::vector<std::vector<ImputeCandidate>> impute(const Model<S>& model,
                                                 const TableTokenizer& tokenizer,
                                                 const UnionVocabulary& vocab,
                                                 std::span<const std::string> row,
                                                 std::span<const int> hidden_cols, int k);

// ----------------------------------------------------------------------------
// implementation
// ----------------------------------------------------------------------------

inline BackboneConfig backbone_preset(std::string_view name) {
  BackboneConfig config;
  if (name == "S") {
    config.d_model = 16;
    config.n_heads = 4;
    config.n_layers = 4;
  } else if (name == "M") {
    config.d_model = 64;
    config.n_heads = 8;
    config.n_layers = 4;
  } else if (name == "L") {
    config.d_model = 128;
    config.n_heads = 8;
    config.n_layers = 8;
  } else if (name == "XL") {
    config.d_model = 192;
    config.n_heads = 16;
    config.n_layers = 36;
  } else {
    throw ConfigError("unknown backbone preset '" + std::string(name) + "'");
  }
  return config;
}

inline std::int64_t backbone_param_count(const BackboneConfig& config) {
  config.validate();
  const std::int64_t d = config.d_model;
  const std::int64_t f = config.ffn_dim();
  const std::int64_t per_layer = 2 * (2 * d)        // pre-norm scales/shifts
                                 + 4 * (d * d + d)  // Q, K, V, O projections
                                 + (f * d + f)      // FFN in
                                 + (d * f + d);     // FFN out
  return config.n_layers * per_layer + 2 * d;       // + final norm
}

namespace detail {

template <typename S>
void fill_trunc_normal(Mat<S>& m, Rng& rng, double stddev = 0.02) {
  for (std::int64_t j = 0; j < m.cols(); ++j)
    for (std::int64_t i = 0; i < m.rows(); ++i)
      m(i, j) = static_cast<S>(rng.truncated_normal(stddev));
}

template <typename S>
void fill_trunc_normal(Vec<S>& v, Rng& rng, double stddev = 0.02) {
  for (std::int64_t i = 0; i < v.size(); ++i) v(i) = static_cast<S>(rng.truncated_normal(stddev));
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

/// Numerically stable softmax cross-entropy over a logit slice, in double.
/// Writes softmax probabilities to probs_out when non-null; returns -log p[target].
template <typename S>
double slice_softmax_ce(const S* logits, int len, int target, double* probs_out) {
  double max_logit = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < len; ++i) max_logit = std::max(max_logit, static_cast<double>(logits[i]));
  double sum = 0.0;
  for (int i = 0; i < len; ++i) sum += std::exp(static_cast<double>(logits[i]) - max_logit);
  const double log_sum = std::log(sum);
  if (probs_out) {
    for (int i = 0; i < len; ++i)
      probs_out[i] = std::exp(static_cast<double>(logits[i]) - max_logit) / sum;
  }
  return log_sum - (static_cast<double>(logits[target]) - max_logit);
}

/// Rank of the target logit (strict greater, ties broken by lower index).
template <typename S>
int logit_rank(const S* logits, int len, int target) {
  int rank = 0;
  const double t = static_cast<double>(logits[target]);
  for (int i = 0; i < len; ++i) {
    const double v = static_cast<double>(logits[i]);
    if (v > t || (v == t && i < target)) ++rank;
  }
  return rank;
}

}  // namespace detail

template <typename S>
Model<S> Model<S>::init(const BackboneConfig& config, std::int64_t vocab_size, Rng& rng) {
  config.validate();
  if (vocab_size < 2) throw ConfigError("model: vocab must contain at least PAD and MASK");
  const int d = config.d_model;
  const int f = config.ffn_dim();

  Model model;
  model.config = config;
  model.vocab_size = vocab_size;
  model.embedding.resize(d, vocab_size);
  detail::fill_trunc_normal(model.embedding, rng);

  model.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& layer : model.layers) {
    layer.ln1_g = Vec<S>::Ones(d);
    layer.ln1_b = Vec<S>::Zero(d);
    layer.wq.resize(d, d);
    layer.wk.resize(d, d);
    layer.wv.resize(d, d);
    layer.wo.resize(d, d);
    detail::fill_trunc_normal(layer.wq, rng);
    detail::fill_trunc_normal(layer.wk, rng);
    detail::fill_trunc_normal(layer.wv, rng);
    detail::fill_trunc_normal(layer.wo, rng);
    layer.bq = Vec<S>::Zero(d);
    layer.bk = Vec<S>::Zero(d);
    layer.bv = Vec<S>::Zero(d);
    layer.bo = Vec<S>::Zero(d);
    layer.ln2_g = Vec<S>::Ones(d);
    layer.ln2_b = Vec<S>::Zero(d);
    layer.w1.resize(f, d);
    layer.w2.resize(d, f);
    detail::fill_trunc_normal(layer.w1, rng);
    detail::fill_trunc_normal(layer.w2, rng);
    layer.b1 = Vec<S>::Zero(f);
    layer.b2 = Vec<S>::Zero(d);
  }
  model.lnf_g = Vec<S>::Ones(d);
  model.lnf_b = Vec<S>::Zero(d);

  model.head_w.resize(model.target_size(), d);
  detail::fill_trunc_normal(model.head_w, rng);
  model.head_b = Vec<S>::Zero(model.target_size());
  return model;
}

template <typename S>
Model<S> Model<S>::zeros(const BackboneConfig& config, std::int64_t vocab_size) {
  config.validate();
  const int d = config.d_model;
  const int f = config.ffn_dim();
  Model model;
  model.config = config;
  model.vocab_size = vocab_size;
  model.embedding = Mat<S>::Zero(d, vocab_size);
  model.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& layer : model.layers) {
    layer.ln1_g = Vec<S>::Zero(d);
    layer.ln1_b = Vec<S>::Zero(d);
    layer.wq = Mat<S>::Zero(d, d);
    layer.wk = Mat<S>::Zero(d, d);
    layer.wv = Mat<S>::Zero(d, d);
    layer.wo = Mat<S>::Zero(d, d);
    layer.bq = Vec<S>::Zero(d);
    layer.bk = Vec<S>::Zero(d);
    layer.bv = Vec<S>::Zero(d);
    layer.bo = Vec<S>::Zero(d);
    layer.ln2_g = Vec<S>::Zero(d);
    layer.ln2_b = Vec<S>::Zero(d);
    layer.w1 = Mat<S>::Zero(f, d);
    layer.b1 = Vec<S>::Zero(f);
    layer.w2 = Mat<S>::Zero(d, f);
    layer.b2 = Vec<S>::Zero(d);
  }
  model.lnf_g = Vec<S>::Zero(d);
  model.lnf_b = Vec<S>::Zero(d);
  model.head_w = Mat<S>::Zero(model.target_size(), d);
  model.head_b = Vec<S>::Zero(model.target_size());
  return model;
}

template <typename S>
void Model<S>::set_zero() {
  for (auto& ref : tensors()) std::fill(ref.data, ref.data + ref.size(), S(0));
}

template <typename S>
bool Model<S>::all_finite() const {
  for (const auto& ref : tensors()) {
    for (std::int64_t i = 0; i < ref.size(); ++i) {
      if (!std::isfinite(static_cast<double>(ref.data[i]))) return false;
    }
  }
  return true;
}

namespace detail {

template <typename S, typename M>
void collect_tensors(M& model, std::vector<TensorRef<S>>& out) {
  auto add = [&out](const std::string& name, auto& tensor, bool decay, bool backbone) {
    out.push_back({name, tensor.data(), tensor.rows(), tensor.cols(), decay, backbone});
  };
  add("embedding", model.embedding, true, false);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    auto& layer = model.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    add(p + "ln1.g", layer.ln1_g, false, true);
    add(p + "ln1.b", layer.ln1_b, false, true);
    add(p + "attn.wq", layer.wq, true, true);
    add(p + "attn.bq", layer.bq, false, true);
    add(p + "attn.wk", layer.wk, true, true);
    add(p + "attn.bk", layer.bk, false, true);
    add(p + "attn.wv", layer.wv, true, true);
    add(p + "attn.bv", layer.bv, false, true);
    add(p + "attn.wo", layer.wo, true, true);
    add(p + "attn.bo", layer.bo, false, true);
    add(p + "ln2.g", layer.ln2_g, false, true);
    add(p + "ln2.b", layer.ln2_b, false, true);
    add(p + "ffn.w1", layer.w1, true, true);
    add(p + "ffn.b1", layer.b1, false, true);
    add(p + "ffn.w2", layer.w2, true, true);
    add(p + "ffn.b2", layer.b2, false, true);
  }
  add("lnf.g", model.lnf_g, false, true);
  add("lnf.b", model.lnf_b, false, true);
  add("head.w", model.head_w, true, false);
  add("head.b", model.head_b, false, false);
}

}  // namespace detail

template <typename S>
std::vector<TensorRef<S>> Model<S>::tensors() {
  std::vector<TensorRef<S>> out;
  detail::collect_tensors<S>(*this, out);
  return out;
}

template <typename S>
std::vector<TensorRef<const S>> Model<S>::tensors() const {
  std::vector<TensorRef<const S>> out;
  detail::collect_tensors<const S>(*this, out);
  return out;
}

template <typename S>
void Model<S>::extend_vocab(std::int64_t new_vocab_size, Rng& rng) {
  if (new_vocab_size < vocab_size) throw ConfigError("extend_vocab: vocabulary cannot shrink");
  if (new_vocab_size == vocab_size) return;
  const std::int64_t d = config.d_model;
  const std::int64_t added = new_vocab_size - vocab_size;

  Mat<S> fresh_emb(d, added);
  detail::fill_trunc_normal(fresh_emb, rng);
  Mat<S> new_embedding(d, new_vocab_size);
  new_embedding.leftCols(vocab_size) = embedding;
  new_embedding.rightCols(added) = fresh_emb;
  embedding = std::move(new_embedding);

  Mat<S> fresh_head(added, d);
  detail::fill_trunc_normal(fresh_head, rng);
  Mat<S> new_head(new_vocab_size - 2, d);
  new_head.topRows(vocab_size - 2) = head_w;
  new_head.bottomRows(added) = fresh_head;
  head_w = std::move(new_head);

  Vec<S> new_bias = Vec<S>::Zero(new_vocab_size - 2);
  new_bias.head(vocab_size - 2) = head_b;
  head_b = std::move(new_bias);

  vocab_size = new_vocab_size;
}

template <typename S>
Mat<S> embed(const Model<S>& model, std::span<const std::int64_t> ids) {
  Mat<S> x(model.config.d_model, static_cast<std::int64_t>(ids.size()));
  for (std::size_t n = 0; n < ids.size(); ++n) {
    const std::int64_t id = ids[n];
    if (id < 0 || id >= model.vocab_size)
      throw ContractError("embed: token id " + std::to_string(id) + " outside vocabulary of " +
                          std::to_string(model.vocab_size));
    x.col(static_cast<std::int64_t>(n)) = model.embedding.col(id);
  }
  return x;
}

/// Per-layer activations retained for the backward pass.
template <typename S>
struct EncodeCache {
  std::size_t batch = 0, width = 0;
  Mat<S> x0;
  struct LayerCache {
    Mat<S> xhat1, xn1;          // LN1 normalized / scaled output
    Vec<S> rstd1;
    Mat<S> q, k, v;             // projections (d x N)
    std::vector<Mat<S>> probs;      // per (elem, head): softmax attention (W x W)
    std::vector<Mat<S>> drop_mask;  // per (elem, head), train only: 0 or 1/(1-p)
    Mat<S> ctx;                 // concatenated head outputs before wo
    Mat<S> x_mid;               // residual stream after attention
    Mat<S> xhat2, xn2;
    Vec<S> rstd2;
    Mat<S> h_pre;               // FFN pre-activation (f x N)
    Mat<S> a_drop;              // FFN activation after dropout (f x N)
    Mat<S> ffn_drop_mask;       // train only
  };
  std::vector<LayerCache> layers;
  Mat<S> x_final;  // residual stream entering the final norm
  Mat<S> xhat_f;
  Vec<S> rstd_f;
};

namespace detail {

/// LayerNorm over each column. Fills xhat (normalized), rstd, and out.
template <typename S>
void layer_norm(const Mat<S>& x, const Vec<S>& gamma, const Vec<S>& beta, Mat<S>& xhat,
                Vec<S>& rstd, Mat<S>& out) {
  const auto n = x.cols();
  const auto d = x.rows();
  xhat.resize(d, n);
  out.resize(d, n);
  rstd.resize(n);
  for (std::int64_t j = 0; j < n; ++j) {
    const S mu = x.col(j).mean();
    const S var = (x.col(j).array() - mu).square().mean();
    const S r = S(1) / std::sqrt(var + static_cast<S>(kLayerNormEps));
    rstd(j) = r;
    xhat.col(j) = (x.col(j).array() - mu) * r;
    out.col(j) = gamma.array() * xhat.col(j).array() + beta.array();
  }
}

/// Backward of layer_norm. Adds parameter gradients, returns dx.
template <typename S>
Mat<S> layer_norm_backward(const Mat<S>& dy, const Mat<S>& xhat, const Vec<S>& rstd,
                           const Vec<S>& gamma, Vec<S>& dgamma, Vec<S>& dbeta) {
  const auto n = dy.cols();
  const auto d = dy.rows();
  Mat<S> dx(d, n);
  for (std::int64_t j = 0; j < n; ++j) {
    dgamma.array() += dy.col(j).array() * xhat.col(j).array();
    dbeta += dy.col(j);
    const Vec<S> dxhat = (dy.col(j).array() * gamma.array()).matrix();
    const S mean_dxhat = dxhat.mean();
    const S mean_dxhat_xhat = (dxhat.array() * xhat.col(j).array()).mean();
    dx.col(j) = ((dxhat.array() - mean_dxhat) - xhat.col(j).array() * mean_dxhat_xhat) * rstd(j);
  }
  return dx;
}

template <typename S>
void apply_activation(const BackboneConfig& config, const Mat<S>& h, Mat<S>& out) {
  out.resize(h.rows(), h.cols());
  if (config.activation == BackboneConfig::Activation::Relu) {
    out = h.cwiseMax(S(0));
    return;
  }
  for (std::int64_t j = 0; j < h.cols(); ++j)
    for (std::int64_t i = 0; i < h.rows(); ++i)
      out(i, j) = static_cast<S>(gelu(static_cast<double>(h(i, j))));
}

template <typename S>
void activation_backward(const BackboneConfig& config, const Mat<S>& h, Mat<S>& dh) {
  if (config.activation == BackboneConfig::Activation::Relu) {
    dh = (h.array() > S(0)).select(dh, Mat<S>::Zero(dh.rows(), dh.cols()));
    return;
  }
  for (std::int64_t j = 0; j < h.cols(); ++j)
    for (std::int64_t i = 0; i < h.rows(); ++i)
      dh(i, j) *= static_cast<S>(gelu_grad(static_cast<double>(h(i, j))));
}

/// Dropout mask with inverted scaling; draws in storage order.
template <typename S>
Mat<S> dropout_mask(std::int64_t rows, std::int64_t cols, double p, Rng& rng) {
  const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
  Mat<S> mask(rows, cols);
  for (std::int64_t j = 0; j < cols; ++j)
    for (std::int64_t i = 0; i < rows; ++i)
      mask(i, j) = rng.bernoulli(p) ? S(0) : keep_scale;
  return mask;
}

}  // namespace detail

template <typename S>
Mat<S> encode(const Model<S>& model, const Mat<S>& x0, std::size_t batch, std::size_t width,
              std::span<const std::uint8_t> pad_flags, bool train, Rng* dropout_rng,
              EncodeCache<S>* cache) {
  const BackboneConfig& config = model.config;
  const std::int64_t n = static_cast<std::int64_t>(batch * width);
  if (x0.cols() != n || x0.rows() != config.d_model)
    throw ContractError("encode: activation shape mismatch");
  if (pad_flags.size() != static_cast<std::size_t>(n))
    throw ContractError("encode: pad flag count mismatch");
  if (train && config.dropout > 0.0 && dropout_rng == nullptr)
    throw ContractError("encode: train mode requires a dropout rng");

  const int d = config.d_model;
  const int heads = config.n_heads;
  const int dh = config.head_dim();
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  const bool use_dropout = train && config.dropout > 0.0;
  const std::int64_t w = static_cast<std::int64_t>(width);

  if (cache) {
    cache->batch = batch;
    cache->width = width;
    cache->x0 = x0;
    cache->layers.clear();
    cache->layers.resize(model.layers.size());
  }

  Mat<S> x = x0;
  EncodeCache<S> local;  // scratch when caller does not need a cache
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& layer = model.layers[l];
    auto& lc = cache ? cache->layers[l] : local.layers.emplace_back();

    detail::layer_norm(x, layer.ln1_g, layer.ln1_b, lc.xhat1, lc.rstd1, lc.xn1);

    lc.q = layer.wq * lc.xn1;
    lc.q.colwise() += layer.bq;
    lc.k = layer.wk * lc.xn1;
    lc.k.colwise() += layer.bk;
    lc.v = layer.wv * lc.xn1;
    lc.v.colwise() += layer.bv;

    lc.ctx.resize(d, n);
    lc.probs.assign(batch * static_cast<std::size_t>(heads), Mat<S>());
    if (use_dropout) lc.drop_mask.assign(batch * static_cast<std::size_t>(heads), Mat<S>());

    for (std::size_t e = 0; e < batch; ++e) {
      const std::int64_t col0 = static_cast<std::int64_t>(e) * w;
      for (int h = 0; h < heads; ++h) {
        const auto qh = lc.q.block(h * dh, col0, dh, w);
        const auto kh = lc.k.block(h * dh, col0, dh, w);
        const auto vh = lc.v.block(h * dh, col0, dh, w);

        Mat<S> scores = (qh.transpose() * kh) * scale;  // (W x W), rows = queries
        for (std::int64_t j = 0; j < w; ++j) {
          if (pad_flags[e * width + static_cast<std::size_t>(j)])
            scores.col(j).setConstant(-std::numeric_limits<S>::infinity());
        }
        // Row-wise softmax; every row has at least one real key.
        Mat<S>& probs = lc.probs[e * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)];
        probs.resize(w, w);
        for (std::int64_t i = 0; i < w; ++i) {
          const S row_max = scores.row(i).maxCoeff();
          probs.row(i) = (scores.row(i).array() - row_max).exp();
          const S denom = probs.row(i).sum();
          probs.row(i) /= denom;
        }

        const Mat<S>* attn_probs = &probs;
        Mat<S> dropped;
        if (use_dropout) {
          Mat<S>& mask =
              lc.drop_mask[e * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)];
          mask = detail::dropout_mask<S>(w, w, config.dropout, *dropout_rng);
          dropped = probs.cwiseProduct(mask);
          attn_probs = &dropped;
        }
        lc.ctx.block(h * dh, col0, dh, w) = vh * attn_probs->transpose();
      }
    }

    Mat<S> attn_out = layer.wo * lc.ctx;
    attn_out.colwise() += layer.bo;
    x += attn_out;
    if (cache) lc.x_mid = x;

    detail::layer_norm(x, layer.ln2_g, layer.ln2_b, lc.xhat2, lc.rstd2, lc.xn2);
    lc.h_pre = layer.w1 * lc.xn2;
    lc.h_pre.colwise() += layer.b1;
    Mat<S> a;
    detail::apply_activation(config, lc.h_pre, a);
    if (use_dropout) {
      lc.ffn_drop_mask = detail::dropout_mask<S>(a.rows(), a.cols(), config.dropout, *dropout_rng);
      lc.a_drop = a.cwiseProduct(lc.ffn_drop_mask);
    } else {
      lc.a_drop = std::move(a);
    }
    Mat<S> ffn_out = layer.w2 * lc.a_drop;
    ffn_out.colwise() += layer.b2;
    x += ffn_out;

    if (!x.allFinite())
      throw NumericsError("encode: non-finite activations after layer " + std::to_string(l));
    if (!cache) local.layers.clear();
  }

  Mat<S> out;
  if (cache) {
    cache->x_final = x;
    detail::layer_norm(x, model.lnf_g, model.lnf_b, cache->xhat_f, cache->rstd_f, out);
  } else {
    Mat<S> xhat;
    Vec<S> rstd;
    detail::layer_norm(x, model.lnf_g, model.lnf_b, xhat, rstd, out);
  }
  return out;
}

template <typename S>
Mat<S> project_head(const Model<S>& model, const Mat<S>& vectors) {
  if (vectors.rows() != model.config.d_model)
    throw ContractError("project_head: vector dimension mismatch");
  Mat<S> logits = model.head_w * vectors;
  logits.colwise() += model.head_b;
  return logits;
}

template <typename S>
CeLoss restricted_cross_entropy(const Mat<S>& logits, std::span<const std::int64_t> targets,
                                std::span<const SubspaceRange> ranges) {
  if (targets.size() != ranges.size() ||
      logits.cols() != static_cast<std::int64_t>(targets.size()))
    throw ContractError("restricted_cross_entropy: shape mismatch");
  CeLoss result;
  if (targets.empty()) return result;

  double total = 0.0;
  std::vector<double> slice;
  for (std::size_t p = 0; p < targets.size(); ++p) {
    const auto& range = ranges[p];
    const std::int64_t local = targets[p] - 2 - range.start;
    if (range.start < 0 || range.start + range.length > logits.rows() || local < 0 ||
        local >= range.length)
      throw ContractError("restricted_cross_entropy: target outside its subspace");
    slice.resize(static_cast<std::size_t>(range.length));
    for (int i = 0; i < range.length; ++i)
      slice[static_cast<std::size_t>(i)] =
          static_cast<double>(logits(range.start + i, static_cast<std::int64_t>(p)));
    total += detail::slice_softmax_ce(slice.data(), range.length, static_cast<int>(local), nullptr);
  }
  result.loss = total / static_cast<double>(targets.size());
  result.any_positions = true;
  return result;
}

template <typename S>
Mat<S> mean_pool(const Mat<S>& ctx, std::size_t batch, std::size_t width,
                 std::span<const std::uint8_t> pad_flags) {
  if (ctx.cols() != static_cast<std::int64_t>(batch * width))
    throw ContractError("mean_pool: shape mismatch");
  Mat<S> pooled = Mat<S>::Zero(ctx.rows(), static_cast<std::int64_t>(batch));
  for (std::size_t e = 0; e < batch; ++e) {
    std::int64_t real = 0;
    for (std::size_t p = 0; p < width; ++p) {
      if (pad_flags[e * width + p]) continue;
      pooled.col(static_cast<std::int64_t>(e)) +=
          ctx.col(static_cast<std::int64_t>(e * width + p));
      ++real;
    }
    if (real == 0) throw ContractError("mean_pool: all-pad row");
    pooled.col(static_cast<std::int64_t>(e)) /= static_cast<S>(real);
  }
  return pooled;
}

namespace detail {

/// Shared forward: encode the batch, compute sliced logits per masked cell and
/// the mean restricted CE. Fills per-cell softmax probabilities (double) and
/// slice logits when grads are requested.
template <typename S>
struct MaskedForward {
  StepStats stats;
  Mat<S> encoded;               // final-norm output (d x N)
  std::vector<std::vector<double>> probs;  // per masked cell, softmax over slice
};

template <typename S>
MaskedForward<S> masked_forward(const Model<S>& model, const PaddedBatch& batch, bool train,
                                Rng* dropout_rng, EncodeCache<S>* cache, bool want_probs) {
  MaskedForward<S> fwd;
  const std::size_t n_masked = batch.masked.size();
  fwd.stats.n_masked = n_masked;

  const Mat<S> x0 = embed(model, std::span<const std::int64_t>(batch.ids));
  fwd.encoded = encode(model, x0, batch.batch_size, batch.width,
                       std::span<const std::uint8_t>(batch.pad_flags), train, dropout_rng, cache);

  if (n_masked == 0) return fwd;
  fwd.stats.any_masked = true;

  double total = 0.0;
  std::size_t hits1 = 0, hits3 = 0;
  if (want_probs) fwd.probs.resize(n_masked);
  std::vector<double> slice;
  std::vector<double> probs_buf;
  for (std::size_t m = 0; m < n_masked; ++m) {
    const auto& cell = batch.masked[m];
    const auto col = static_cast<std::int64_t>(cell.elem * batch.width +
                                               static_cast<std::size_t>(cell.pos));
    const auto& range = cell.range;
    const std::int64_t local = cell.target - 2 - range.start;
    if (local < 0 || local >= range.length)
      throw ContractError("loss: masked-cell target outside its subspace");

    // logits on the subspace slice only: head rows [start, start+len).
    slice.resize(static_cast<std::size_t>(range.length));
    Eigen::Map<Vec<double>> slice_map(slice.data(), range.length);
    slice_map = (model.head_w.middleRows(range.start, range.length) * fwd.encoded.col(col) +
                 model.head_b.segment(range.start, range.length))
                    .template cast<double>();

    probs_buf.resize(slice.size());
    total += slice_softmax_ce(slice.data(), range.length, static_cast<int>(local),
                              want_probs ? probs_buf.data() : nullptr);
    if (want_probs) fwd.probs[m].assign(probs_buf.begin(), probs_buf.end());

    const int rank = logit_rank(slice.data(), range.length, static_cast<int>(local));
    if (rank < 1) ++hits1;
    if (rank < 3) ++hits3;
  }
  fwd.stats.loss = total / static_cast<double>(n_masked);
  fwd.stats.top1 = static_cast<double>(hits1) / static_cast<double>(n_masked);
  fwd.stats.top3 = static_cast<double>(hits3) / static_cast<double>(n_masked);
  return fwd;
}

/// Backward through the encoder stack given d(loss)/d(encoded output).
template <typename S>
void encode_backward(const Model<S>& model, const PaddedBatch& batch, const EncodeCache<S>& cache,
                     Mat<S> dy, Model<S>& grads) {
  const BackboneConfig& config = model.config;
  const int d = config.d_model;
  const int heads = config.n_heads;
  const int dh = config.head_dim();
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  const std::size_t batch_size = cache.batch;
  const std::size_t width = cache.width;
  const std::int64_t w = static_cast<std::int64_t>(width);
  const bool used_dropout = !cache.layers.empty() && !cache.layers.front().drop_mask.empty();

  // Final norm.
  Mat<S> dx =
      layer_norm_backward(dy, cache.xhat_f, cache.rstd_f, model.lnf_g, grads.lnf_g, grads.lnf_b);

  for (std::size_t li = model.layers.size(); li-- > 0;) {
    const auto& layer = model.layers[li];
    const auto& lc = cache.layers[li];
    auto& gl = grads.layers[li];

    // FFN block: x = x_mid + w2 * a_drop + b2.
    Mat<S> d_ffn_out = dx;  // residual passes dx through unchanged
    gl.b2 += d_ffn_out.rowwise().sum();
    gl.w2 += d_ffn_out * lc.a_drop.transpose();
    Mat<S> da = layer.w2.transpose() * d_ffn_out;
    if (used_dropout) da = da.cwiseProduct(lc.ffn_drop_mask);
    activation_backward(config, lc.h_pre, da);
    gl.b1 += da.rowwise().sum();
    gl.w1 += da * lc.xn2.transpose();
    const Mat<S> dxn2 = layer.w1.transpose() * da;
    dx += layer_norm_backward(dxn2, lc.xhat2, lc.rstd2, layer.ln2_g, gl.ln2_g, gl.ln2_b);

    // Attention block: x_mid = x_in + wo * ctx + bo.
    Mat<S> d_attn_out = dx;
    gl.bo += d_attn_out.rowwise().sum();
    gl.wo += d_attn_out * lc.ctx.transpose();
    const Mat<S> dctx = layer.wo.transpose() * d_attn_out;

    Mat<S> dq = Mat<S>::Zero(d, dctx.cols());
    Mat<S> dk = Mat<S>::Zero(d, dctx.cols());
    Mat<S> dv = Mat<S>::Zero(d, dctx.cols());
    for (std::size_t e = 0; e < batch_size; ++e) {
      const std::int64_t col0 = static_cast<std::int64_t>(e) * w;
      for (int h = 0; h < heads; ++h) {
        const auto qh = lc.q.block(h * dh, col0, dh, w);
        const auto kh = lc.k.block(h * dh, col0, dh, w);
        const auto vh = lc.v.block(h * dh, col0, dh, w);
        const Mat<S>& probs =
            lc.probs[e * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)];
        const auto dctx_h = dctx.block(h * dh, col0, dh, w);

        Mat<S> p_used = probs;
        if (used_dropout) {
          const Mat<S>& mask =
              lc.drop_mask[e * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)];
          p_used = probs.cwiseProduct(mask);
        }
        // ctx_h = vh * p_used^T
        dv.block(h * dh, col0, dh, w) += dctx_h * p_used;
        Mat<S> dp = dctx_h.transpose() * vh;  // (W x W), grad wrt p_used
        if (used_dropout) {
          const Mat<S>& mask =
              lc.drop_mask[e * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)];
          dp = dp.cwiseProduct(mask);
        }
        // Softmax backward per query row; pad keys have prob 0 so their
        // score gradient vanishes automatically.
        Mat<S> dscores(w, w);
        for (std::int64_t i = 0; i < w; ++i) {
          const S dot = probs.row(i).dot(dp.row(i));
          dscores.row(i) = probs.row(i).array() * (dp.row(i).array() - dot);
        }
        dq.block(h * dh, col0, dh, w) += (kh * dscores.transpose()) * scale;
        dk.block(h * dh, col0, dh, w) += (qh * dscores) * scale;
      }
    }

    gl.bq += dq.rowwise().sum();
    gl.bk += dk.rowwise().sum();
    gl.bv += dv.rowwise().sum();
    gl.wq += dq * lc.xn1.transpose();
    gl.wk += dk * lc.xn1.transpose();
    gl.wv += dv * lc.xn1.transpose();
    const Mat<S> dxn1 =
        layer.wq.transpose() * dq + layer.wk.transpose() * dk + layer.wv.transpose() * dv;
    dx += layer_norm_backward(dxn1, lc.xhat1, lc.rstd1, layer.ln1_g, gl.ln1_g, gl.ln1_b);
  }

  // Scatter into embedding gradients.
  for (std::size_t n = 0; n < batch.ids.size(); ++n)
    grads.embedding.col(batch.ids[n]) += dx.col(static_cast<std::int64_t>(n));
}

}  // namespace detail

template <typename S>
StepStats forward_loss(const Model<S>& model, const PaddedBatch& batch, bool train,
                       Rng* dropout_rng) {
  return detail::masked_forward(model, batch, train, dropout_rng, nullptr, false).stats;
}

template <typename S>
StepStats forward_backward(const Model<S>& model, const PaddedBatch& batch, bool train,
                           Rng* dropout_rng, Model<S>& grads) {
  EncodeCache<S> cache;
  auto fwd = detail::masked_forward(model, batch, train, dropout_rng, &cache, true);
  if (!fwd.stats.any_masked) return fwd.stats;

  const std::size_t n_masked = batch.masked.size();
  const double inv_n = 1.0 / static_cast<double>(n_masked);

  // d(loss)/d(encoded): accumulate (p - onehot)/n through each cell's slice.
  Mat<S> dy = Mat<S>::Zero(fwd.encoded.rows(), fwd.encoded.cols());
  for (std::size_t m = 0; m < n_masked; ++m) {
    const auto& cell = batch.masked[m];
    const auto col = static_cast<std::int64_t>(cell.elem * batch.width +
                                               static_cast<std::size_t>(cell.pos));
    const auto& range = cell.range;
    const std::int64_t local = cell.target - 2 - range.start;

    Vec<S> dlogits(range.length);
    for (int i = 0; i < range.length; ++i) {
      double g = fwd.probs[m][static_cast<std::size_t>(i)] * inv_n;
      if (i == local) g -= inv_n;
      dlogits(i) = static_cast<S>(g);
    }
    grads.head_b.segment(range.start, range.length) += dlogits;
    grads.head_w.middleRows(range.start, range.length) +=
        dlogits * fwd.encoded.col(col).transpose();
    dy.col(col) += model.head_w.middleRows(range.start, range.length).transpose() * dlogits;
  }

  detail::encode_backward(model, batch, cache, std::move(dy), grads);
  return fwd.stats;
}

template <typename S>
std::vector<std::vector<ImputeCandidate>> impute(const Model<S>& model,
                                                 const TableTokenizer& tokenizer,
                                                 const UnionVocabulary& vocab,
                                                 std::span<const std::string> row,
                                                 std::span<const int> hidden_cols, int k) {
  if (k < 1) throw ConfigError("impute: k must be at least 1");
  auto ids = encode_row(tokenizer, vocab, row);
  const auto& ranges = vocab.find(tokenizer.table_id);
  for (const int c : hidden_cols) {
    if (c < 0 || c >= static_cast<int>(ids.size()))
      throw ConfigError("impute: hidden column index out of range");
    ids[static_cast<std::size_t>(c)] = UnionVocabulary::kMaskId;
  }

  const std::vector<std::uint8_t> pad_flags(ids.size(), 0);
  const Mat<S> x0 = embed(model, std::span<const std::int64_t>(ids));
  const Mat<S> encoded = encode(model, x0, 1, ids.size(),
                                std::span<const std::uint8_t>(pad_flags), false, nullptr,
                                static_cast<EncodeCache<S>*>(nullptr));

  std::vector<std::vector<ImputeCandidate>> result;
  result.reserve(hidden_cols.size());
  std::vector<double> slice;
  std::vector<double> probs;
  for (const int c : hidden_cols) {
    const auto& range = vocab.subspace(ranges.columns[static_cast<std::size_t>(c)]);
    slice.resize(static_cast<std::size_t>(range.length));
    Eigen::Map<Vec<double>> slice_map(slice.data(), range.length);
    slice_map = (model.head_w.middleRows(range.start, range.length) * encoded.col(c) +
                 model.head_b.segment(range.start, range.length))
                    .template cast<double>();
    probs.resize(slice.size());
    detail::slice_softmax_ce(slice.data(), range.length, 0, probs.data());

    const int take = std::min(k, range.length);
    std::vector<int> order(slice.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(),
                     [&probs](int a, int b) { return probs[static_cast<std::size_t>(a)] >
                                                     probs[static_cast<std::size_t>(b)]; });

    const auto& col_tok = tokenizer.columns[static_cast<std::size_t>(c)];
    std::vector<ImputeCandidate> candidates;
    candidates.reserve(static_cast<std::size_t>(take));
    for (int i = 0; i < take; ++i) {
      ImputeCandidate cand;
      cand.local_index = order[static_cast<std::size_t>(i)];
      cand.probability = probs[static_cast<std::size_t>(cand.local_index)];
      cand.is_missing = cand.local_index == col_tok.nan_slot();
      cand.value = col_tok.decode(cand.local_index);
      candidates.push_back(std::move(cand));
    }
    result.push_back(std::move(candidates));
  }
  return result;
}

}  // namespace tabrep
