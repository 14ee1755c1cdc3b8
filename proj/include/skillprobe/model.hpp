#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "skillprobe/errors.hpp"
#include "skillprobe/numerics.hpp"

namespace skillprobe {

/// Reserved token ids shared by every vocabulary.
namespace tokens {
inline constexpr int pad = 0;
inline constexpr int unk = 1;
inline constexpr int mask = 2;
inline constexpr int first_regular = 8;
}  // namespace tokens

struct ModelConfig {
  std::size_t num_layers = 4;
  std::size_t d = 64;
  std::size_t d_m = 256;
  std::size_t num_heads = 4;
  std::size_t vocab_size = 512;
  std::size_t max_positions = 160;
  Activation activation = Activation::gelu;

  std::size_t head_dim() const { return d / num_heads; }
  std::size_t neuron_count() const { return num_layers * d_m; }

  void validate() const {
    if (num_layers == 0 || d == 0 || d_m == 0 || num_heads == 0 || vocab_size == 0 ||
        max_positions == 0)
      throw ConfigError("model config: all sizes must be positive");
    if (d % num_heads != 0) throw ConfigError("model config: d must be divisible by num_heads");
    if (d_m < d) throw ConfigError("model config: d_m must be at least d");
    if (vocab_size <= static_cast<std::size_t>(tokens::first_regular))
      throw ConfigError("model config: vocabulary too small for reserved tokens");
  }
  bool operator==(const ModelConfig&) const = default;
};

struct NeuronId {
  std::size_t layer = 0;
  std::size_t index = 0;
  auto operator<=>(const NeuronId&) const = default;
  std::size_t flat(std::size_t width) const { return layer * width + index; }
  static NeuronId from_flat(std::size_t flat, std::size_t width) {
    return {flat / width, flat % width};
  }
};

struct LayerWeights {
  Matrix ln1_gain, ln1_bias;
  Matrix wq, bq, wk, bk, wv, bv, wo, bo;  // d x d (input x output), biases 1 x d
  Matrix ln2_gain, ln2_bias;
  Matrix ffn_k;   // width x d, row i holds neuron i's input weights
  Matrix ffn_b1;  // 1 x width
  Matrix ffn_v;   // width x d, row i holds neuron i's output weights
  Matrix ffn_b2;  // 1 x d

  std::size_t ffn_width() const { return ffn_k.rows(); }
  bool operator==(const LayerWeights&) const = default;
};

/// All parameters of the encoder. The LM head is tied to token_embedding.
struct ModelWeights {
  ModelConfig config;
  Matrix token_embedding;     // vocab x d
  Matrix position_embedding;  // max_positions x d
  std::vector<LayerWeights> layers;
  Matrix final_ln_gain, final_ln_bias;
  Matrix lm_bias;  // 1 x vocab
  // Original neuron indices kept per layer after pruning; empty for dense layers.
  std::vector<std::vector<std::size_t>> ffn_kept;

  bool pruned() const {
    for (const auto& k : ffn_kept)
      if (!k.empty()) return true;
    return false;
  }
  bool operator==(const ModelWeights&) const = default;
};

/// Calls f(name, tensor, is_bias) for every tensor in serialization order.
template <class W, class F>
void visit_tensors(W& w, F&& f) {
  f("token_embedding", w.token_embedding, false);
  f("position_embedding", w.position_embedding, false);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& L = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    f(p + "ln1_gain", L.ln1_gain, false);
    f(p + "ln1_bias", L.ln1_bias, true);
    f(p + "wq", L.wq, false);
    f(p + "bq", L.bq, true);
    f(p + "wk", L.wk, false);
    f(p + "bk", L.bk, true);
    f(p + "wv", L.wv, false);
    f(p + "bv", L.bv, true);
    f(p + "wo", L.wo, false);
    f(p + "bo", L.bo, true);
    f(p + "ln2_gain", L.ln2_gain, false);
    f(p + "ln2_bias", L.ln2_bias, true);
    f(p + "ffn_k", L.ffn_k, false);
    f(p + "ffn_b1", L.ffn_b1, true);
    f(p + "ffn_v", L.ffn_v, false);
    f(p + "ffn_b2", L.ffn_b2, true);
  }
  f("final_ln_gain", w.final_ln_gain, false);
  f("final_ln_bias", w.final_ln_bias, true);
  f("lm_bias", w.lm_bias, true);
}

inline std::size_t parameter_count(const ModelWeights& w) {
  std::size_t n = 0;
  visit_tensors(w, [&](const std::string&, const Matrix& m, bool) { n += m.size(); });
  return n;
}

/// Residual bottleneck inserted after a sublayer: y = x + f(x D + bd) U + bu.
struct Adapter {
  Matrix down, down_bias, up, up_bias;  // d x r, 1 x r, r x d, 1 x d
  bool operator==(const Adapter&) const = default;
};

struct AdapterParams {
  std::size_t bottleneck = 8;
  std::vector<std::array<Adapter, 2>> layers;  // [after attention, after FFN]
  bool operator==(const AdapterParams&) const = default;
};

template <class A, class F>
void visit_adapter_tensors(A& a, F&& f) {
  for (std::size_t l = 0; l < a.layers.size(); ++l)
    for (std::size_t s = 0; s < 2; ++s) {
      auto& ad = a.layers[l][s];
      const std::string p = "adapters." + std::to_string(l) + "." + std::to_string(s) + ".";
      f(p + "down", ad.down, false);
      f(p + "down_bias", ad.down_bias, true);
      f(p + "up", ad.up, false);
      f(p + "up_bias", ad.up_bias, true);
    }
}

inline ModelWeights init_weights(const ModelConfig& config, SeededRng& rng) {
  config.validate();
  const std::size_t d = config.d;
  auto normal = [&](std::size_t r, std::size_t c) {
    Matrix m(r, c);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.truncated_normal(0.02);
    return m;
  };
  ModelWeights w;
  w.config = config;
  w.token_embedding = normal(config.vocab_size, d);
  w.position_embedding = normal(config.max_positions, d);
  w.layers.resize(config.num_layers);
  for (auto& L : w.layers) {
    L.ln1_gain = Matrix(1, d, 1.0);
    L.ln1_bias = Matrix(1, d);
    L.wq = normal(d, d);
    L.bq = Matrix(1, d);
    L.wk = normal(d, d);
    L.bk = Matrix(1, d);
    L.wv = normal(d, d);
    L.bv = Matrix(1, d);
    L.wo = normal(d, d);
    L.bo = Matrix(1, d);
    L.ln2_gain = Matrix(1, d, 1.0);
    L.ln2_bias = Matrix(1, d);
    L.ffn_k = normal(config.d_m, d);
    L.ffn_b1 = Matrix(1, config.d_m);
    L.ffn_v = normal(config.d_m, d);
    L.ffn_b2 = Matrix(1, d);
  }
  w.final_ln_gain = Matrix(1, d, 1.0);
  w.final_ln_bias = Matrix(1, d);
  w.lm_bias = Matrix(1, config.vocab_size);
  w.ffn_kept.assign(config.num_layers, {});
  return w;
}

/// Adapters with random down-projections and zero up-projections, so a fresh
/// set is the identity map.
inline AdapterParams init_adapters(const ModelConfig& config, std::size_t bottleneck,
                                   SeededRng& rng) {
  AdapterParams a;
  a.bottleneck = bottleneck;
  a.layers.resize(config.num_layers);
  for (auto& pair : a.layers)
    for (auto& ad : pair) {
      ad.down = Matrix(config.d, bottleneck);
      for (std::size_t i = 0; i < ad.down.size(); ++i) ad.down[i] = rng.truncated_normal(0.02);
      ad.down_bias = Matrix(1, bottleneck);
      ad.up = Matrix(bottleneck, config.d);
      ad.up_bias = Matrix(1, config.d);
    }
  return a;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// FFN inner activations captured at fixed positions, indexed
/// (sample, position slot, layer, neuron).
struct ActivationTrace {
  std::vector<std::size_t> positions;
  std::size_t batch = 0;
  std::size_t layers = 0;
  std::size_t width = 0;
  std::vector<double> values;

  std::size_t offset(std::size_t s, std::size_t p, std::size_t l) const {
    return ((s * positions.size() + p) * layers + l) * width;
  }
  double at(std::size_t s, std::size_t p, std::size_t l, std::size_t n) const {
    return values[offset(s, p, l) + n];
  }
  std::span<const double> neurons(std::size_t s, std::size_t p, std::size_t l) const {
    return {values.data() + offset(s, p, l), width};
  }
};

struct HookRows {
  std::span<const std::size_t> sample_id;  // caller-supplied id of each row's sample
  std::span<const std::size_t> position;   // position of each row within its sequence
};

/// Edits FFN activations in place between f(xK^T + b1) and the V projection.
class ActivationHook {
 public:
  virtual ~ActivationHook() = default;
  virtual void apply(std::size_t layer, Matrix& activations, const HookRows& rows) const = 0;
};

struct ForwardOptions {
  const Matrix* prompts = nullptr;  // l x d block placed before the tokens
  const AdapterParams* adapters = nullptr;
  // Per-sample output positions; empty means one output at the slot right
  // after the prompt block (where the MASK token sits).
  std::vector<std::vector<std::size_t>> output_positions;
  std::vector<int> vocab_subset;  // empty means the full vocabulary
  std::vector<std::size_t> capture_positions;
  const ActivationHook* hook = nullptr;
  std::vector<std::size_t> sample_ids;  // defaults to batch index
};

struct ForwardOutput {
  Matrix logits;  // (total outputs) x (vocab or subset)
  std::optional<ActivationTrace> trace;
};

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

struct NormCache {
  Matrix xhat;
  std::vector<double> rstd;
};

inline Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias,
                         NormCache* cache) {
  const std::size_t n = x.cols();
  Matrix y(x.rows(), n);
  if (cache) {
    cache->xhat = Matrix(x.rows(), n);
    cache->rstd.assign(x.rows(), 0.0);
  }
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double* xr = x.data() + r * n;
    double mean = 0.0;
    for (std::size_t c = 0; c < n; ++c) mean += xr[c];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    double* yr = y.data() + r * n;
    for (std::size_t c = 0; c < n; ++c) {
      const double xh = (xr[c] - mean) * rstd;
      if (cache) cache->xhat(r, c) = xh;
      yr[c] = xh * gain[c] + bias[c];
    }
    if (cache) cache->rstd[r] = rstd;
  }
  return y;
}

inline Matrix layer_norm_backward(const Matrix& dy, const Matrix& gain, const NormCache& cache,
                                  Matrix* dgain, Matrix* dbias) {
  const std::size_t n = dy.cols();
  Matrix dx(dy.rows(), n);
  std::vector<double> dxhat(n);
  for (std::size_t r = 0; r < dy.rows(); ++r) {
    const double* dyr = dy.data() + r * n;
    const double* xh = cache.xhat.data() + r * n;
    double mean_d = 0.0, mean_dx = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      dxhat[c] = dyr[c] * gain[c];
      mean_d += dxhat[c];
      mean_dx += dxhat[c] * xh[c];
      if (dgain) (*dgain)[c] += dyr[c] * xh[c];
      if (dbias) (*dbias)[c] += dyr[c];
    }
    mean_d /= static_cast<double>(n);
    mean_dx /= static_cast<double>(n);
    double* dxr = dx.data() + r * n;
    for (std::size_t c = 0; c < n; ++c)
      dxr[c] = cache.rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
  }
  return dx;
}

using HeadBlock = Eigen::Map<EigenRowMajor, 0, Eigen::OuterStride<>>;
using ConstHeadBlock = Eigen::Map<const EigenRowMajor, 0, Eigen::OuterStride<>>;

/// Rows [row, row + T) and columns [col, col + width) of m.
inline HeadBlock head_block(Matrix& m, std::size_t row, std::size_t col, std::size_t T,
                            std::size_t width) {
  return {m.data() + row * m.cols() + col, static_cast<Eigen::Index>(T),
          static_cast<Eigen::Index>(width), Eigen::OuterStride<>(static_cast<Eigen::Index>(m.cols()))};
}
inline ConstHeadBlock head_block(const Matrix& m, std::size_t row, std::size_t col,
                                 std::size_t T, std::size_t width) {
  return {m.data() + row * m.cols() + col, static_cast<Eigen::Index>(T),
          static_cast<Eigen::Index>(width), Eigen::OuterStride<>(static_cast<Eigen::Index>(m.cols()))};
}
inline Eigen::Map<EigenRowMajor> square_block(double* p, std::size_t T) {
  return {p, static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(T)};
}
inline Eigen::Map<const EigenRowMajor> square_block(const double* p, std::size_t T) {
  return {p, static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(T)};
}

/// Row-wise softmax of a T x T block. Plain loops keep the summation order
/// independent of memory alignment.
inline void softmax_rows(double* p, std::size_t T) {
  for (std::size_t i = 0; i < T; ++i) {
    double* r = p + i * T;
    double mx = r[0];
    for (std::size_t j = 1; j < T; ++j) mx = std::max(mx, r[j]);
    for (std::size_t j = 0; j < T; ++j) r[j] -= mx;
  }
  exp_inplace(p, T * T);
  for (std::size_t i = 0; i < T; ++i) {
    double* r = p + i * T;
    double sum = 0.0;
    for (std::size_t j = 0; j < T; ++j) sum += r[j];
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < T; ++j) r[j] *= inv;
  }
}

struct AdapterCache {
  Matrix input;
  Matrix hidden;
  Matrix hidden_grad;  // f'(pre-activation)
};

inline Matrix adapter_forward(const Adapter& ad, const Matrix& x, Activation f,
                              AdapterCache* cache) {
  Matrix pre = matmul(x, ad.down);
  add_row_bias(pre, ad.down_bias);
  Matrix hidden = apply(f, pre, cache ? &cache->hidden_grad : nullptr);
  Matrix y = matmul(hidden, ad.up);
  add_row_bias(y, ad.up_bias);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += x[i];
  if (cache) {
    cache->input = x;
    cache->hidden = std::move(hidden);
  }
  return y;
}

struct LayerCache {
  NormCache ln1;
  Matrix u1, q, k, v;
  std::vector<double> probs;  // attention probabilities per sample and head
  Matrix context;
  std::optional<AdapterCache> ad_attn;
  NormCache ln2;
  Matrix u2;
  Matrix act_grad;  // f'(xK^T + b1)
  Matrix act;       // FFN activation after any hook
  std::optional<AdapterCache> ad_ffn;
};

}  // namespace detail

/// Intermediates retained by forward() for backward(). Treat as opaque.
struct ForwardTape {
  bool valid() const { return valid_; }

  bool valid_ = false;
  const Matrix* prompts_ = nullptr;
  const AdapterParams* adapters_ = nullptr;
  std::size_t prompt_len_ = 0;
  std::vector<std::vector<int>> sequences_;
  std::vector<std::size_t> offsets_;  // first row of each sample
  std::vector<std::size_t> lengths_;
  std::vector<std::size_t> output_rows_;
  std::vector<int> vocab_subset_;
  std::vector<detail::LayerCache> layers_;
  detail::NormCache final_norm_;
  Matrix final_out_;  // normalized hidden states at output rows
};

inline ForwardOutput forward(const ModelWeights& w, std::span<const std::vector<int>> sequences,
                             const ForwardOptions& opt, ForwardTape* tape = nullptr) {
  const ModelConfig& cfg = w.config;
  const std::size_t d = cfg.d;
  const std::size_t prompt_len = opt.prompts ? opt.prompts->rows() : 0;
  if (opt.prompts && opt.prompts->cols() != d)
    throw ShapeError("prompt block " + opt.prompts->shape_str() + " does not match width " +
                     std::to_string(d));
  if (opt.adapters && opt.adapters->layers.size() != w.layers.size())
    throw ShapeError("adapter layer count does not match model");
  const std::size_t batch = sequences.size();
  if (!opt.output_positions.empty() && opt.output_positions.size() != batch)
    throw ShapeError("output_positions must list every sample");
  if (!opt.sample_ids.empty() && opt.sample_ids.size() != batch)
    throw ShapeError("sample_ids must list every sample");

  std::vector<std::size_t> offsets(batch), lengths(batch);
  std::size_t rows = 0;
  for (std::size_t s = 0; s < batch; ++s) {
    const std::size_t len = prompt_len + sequences[s].size();
    if (len > cfg.max_positions)
      throw LengthError("sequence of length " + std::to_string(len) + " exceeds " +
                        std::to_string(cfg.max_positions) + " positions");
    if (len == 0) throw LengthError("empty sequence");
    for (int t : sequences[s])
      if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size)
        throw VocabError("token id " + std::to_string(t) + " outside vocabulary of " +
                         std::to_string(cfg.vocab_size));
    for (std::size_t p : opt.capture_positions)
      if (p >= len) throw LengthError("capture position " + std::to_string(p) + " out of range");
    offsets[s] = rows;
    lengths[s] = len;
    rows += len;
  }
  std::vector<std::size_t> row_sample(rows), row_position(rows);
  for (std::size_t s = 0; s < batch; ++s)
    for (std::size_t p = 0; p < lengths[s]; ++p) {
      row_sample[offsets[s] + p] = opt.sample_ids.empty() ? s : opt.sample_ids[s];
      row_position[offsets[s] + p] = p;
    }

  // Embeddings.
  Matrix h(rows, d);
  for (std::size_t s = 0; s < batch; ++s)
    for (std::size_t p = 0; p < lengths[s]; ++p) {
      double* hr = h.data() + (offsets[s] + p) * d;
      const double* src = p < prompt_len
                              ? opt.prompts->data() + p * d
                              : w.token_embedding.data() +
                                    static_cast<std::size_t>(sequences[s][p - prompt_len]) * d;
      const double* pos = w.position_embedding.data() + p * d;
      for (std::size_t c = 0; c < d; ++c) hr[c] = src[c] + pos[c];
    }

  std::optional<ActivationTrace> trace;
  if (!opt.capture_positions.empty()) {
    std::size_t width = 0;
    for (const auto& L : w.layers) width = std::max(width, L.ffn_width());
    trace.emplace();
    trace->positions = opt.capture_positions;
    trace->batch = batch;
    trace->layers = w.layers.size();
    trace->width = width;
    trace->values.assign(batch * opt.capture_positions.size() * w.layers.size() * width, 0.0);
  }

  if (tape) {
    tape->layers_.clear();
    tape->layers_.resize(w.layers.size());
  }
  const std::size_t heads = cfg.num_heads;
  const std::size_t dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const HookRows hook_rows{row_sample, row_position};

  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const LayerWeights& L = w.layers[l];
    detail::LayerCache local;
    detail::LayerCache& c = tape ? tape->layers_[l] : local;

    c.u1 = detail::layer_norm(h, L.ln1_gain, L.ln1_bias, tape ? &c.ln1 : nullptr);
    c.q = matmul(c.u1, L.wq);
    add_row_bias(c.q, L.bq);
    c.k = matmul(c.u1, L.wk);
    add_row_bias(c.k, L.bk);
    c.v = matmul(c.u1, L.wv);
    add_row_bias(c.v, L.bv);

    c.context = Matrix(rows, d);
    std::size_t prob_size = 0;
    for (std::size_t s = 0; s < batch; ++s) prob_size += heads * lengths[s] * lengths[s];
    c.probs.assign(prob_size, 0.0);
    std::size_t prob_off = 0;
    for (std::size_t s = 0; s < batch; ++s) {
      const std::size_t T = lengths[s], base = offsets[s];
      for (std::size_t hd = 0; hd < heads; ++hd) {
        const std::size_t col = hd * dh;
        auto P = detail::square_block(c.probs.data() + prob_off, T);
        P.noalias() = detail::head_block(c.q, base, col, T, dh) *
                      detail::head_block(c.k, base, col, T, dh).transpose();
        P *= scale;
        detail::softmax_rows(P.data(), T);
        detail::head_block(c.context, base, col, T, dh).noalias() =
            P * detail::head_block(c.v, base, col, T, dh);
        prob_off += T * T;
      }
    }
    Matrix attn = matmul(c.context, L.wo);
    add_row_bias(attn, L.bo);
    if (opt.adapters) {
      if (tape) c.ad_attn.emplace();
      attn = detail::adapter_forward(opt.adapters->layers[l][0], attn, cfg.activation,
                                     tape ? &*c.ad_attn : nullptr);
    }
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += attn[i];

    c.u2 = detail::layer_norm(h, L.ln2_gain, L.ln2_bias, tape ? &c.ln2 : nullptr);
    Matrix z = matmul_nt(c.u2, L.ffn_k);
    add_row_bias(z, L.ffn_b1);
    c.act = apply(cfg.activation, z, tape ? &c.act_grad : nullptr);
    if (opt.hook) opt.hook->apply(l, c.act, hook_rows);
    if (trace) {
      const std::size_t width = L.ffn_width();
      for (std::size_t s = 0; s < batch; ++s)
        for (std::size_t pi = 0; pi < opt.capture_positions.size(); ++pi) {
          const double* src = c.act.data() + (offsets[s] + opt.capture_positions[pi]) * width;
          std::copy(src, src + width, trace->values.begin() +
                                          static_cast<std::ptrdiff_t>(trace->offset(s, pi, l)));
        }
    }
    Matrix ffn = matmul(c.act, L.ffn_v);
    add_row_bias(ffn, L.ffn_b2);
    if (opt.adapters) {
      if (tape) c.ad_ffn.emplace();
      ffn = detail::adapter_forward(opt.adapters->layers[l][1], ffn, cfg.activation,
                                    tape ? &*c.ad_ffn : nullptr);
    }
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += ffn[i];
  }

  // Output rows.
  std::vector<std::size_t> out_rows;
  for (std::size_t s = 0; s < batch; ++s) {
    if (opt.output_positions.empty()) {
      if (prompt_len >= lengths[s]) throw LengthError("no slot after the prompt block");
      out_rows.push_back(offsets[s] + prompt_len);
    } else {
      for (std::size_t p : opt.output_positions[s]) {
        if (p >= lengths[s]) throw LengthError("output position out of range");
        out_rows.push_back(offsets[s] + p);
      }
    }
  }
  Matrix gathered(out_rows.size(), d);
  for (std::size_t i = 0; i < out_rows.size(); ++i)
    std::copy_n(h.data() + out_rows[i] * d, d, gathered.data() + i * d);
  detail::NormCache final_cache;
  Matrix final_out = detail::layer_norm(gathered, w.final_ln_gain, w.final_ln_bias, &final_cache);

  Matrix logits;
  if (opt.vocab_subset.empty()) {
    logits = matmul_nt(final_out, w.token_embedding);
    add_row_bias(logits, w.lm_bias);
  } else {
    Matrix sub(opt.vocab_subset.size(), d);
    Matrix sub_bias(1, opt.vocab_subset.size());
    for (std::size_t i = 0; i < opt.vocab_subset.size(); ++i) {
      const int t = opt.vocab_subset[i];
      if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size)
        throw VocabError("vocab subset token " + std::to_string(t) + " outside vocabulary");
      std::copy_n(w.token_embedding.data() + static_cast<std::size_t>(t) * d, d,
                  sub.data() + i * d);
      sub_bias[i] = w.lm_bias[static_cast<std::size_t>(t)];
    }
    logits = matmul_nt(final_out, sub);
    add_row_bias(logits, sub_bias);
  }

  if (tape) {
    tape->valid_ = true;
    tape->prompts_ = opt.prompts;
    tape->adapters_ = opt.adapters;
    tape->prompt_len_ = prompt_len;
    tape->sequences_.assign(sequences.begin(), sequences.end());
    tape->offsets_ = std::move(offsets);
    tape->lengths_ = std::move(lengths);
    tape->output_rows_ = std::move(out_rows);
    tape->vocab_subset_ = opt.vocab_subset;
    tape->final_norm_ = std::move(final_cache);
    tape->final_out_ = std::move(final_out);
  }
  return {std::move(logits), std::move(trace)};
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

enum class TrainableKind { prompts, biases, adapters, all_weights };

/// Gradient buffers. Tensors outside the trainable set stay empty (0 x 0).
struct Gradients {
  ModelWeights model;
  Matrix prompts;
  AdapterParams adapters;
};

inline Gradients make_gradients(const ModelWeights& w, const Matrix* prompts,
                                const AdapterParams* adapters, TrainableKind kind) {
  Gradients g;
  g.model.config = w.config;
  g.model.layers.resize(w.layers.size());
  g.model.ffn_kept = w.ffn_kept;
  // Pair up tensors by visiting both structures in lockstep.
  std::vector<Matrix*> dst;
  visit_tensors(g.model, [&](const std::string&, Matrix& m, bool) { dst.push_back(&m); });
  std::size_t i = 0;
  visit_tensors(w, [&](const std::string&, const Matrix& m, bool is_bias) {
    const bool selected = kind == TrainableKind::all_weights ||
                          (kind == TrainableKind::biases && is_bias);
    if (selected) *dst[i] = Matrix(m.rows(), m.cols());
    ++i;
  });
  if (kind == TrainableKind::prompts) {
    if (!prompts) throw StateError("prompt gradients requested without a prompt block");
    g.prompts = Matrix(prompts->rows(), prompts->cols());
  }
  if (kind == TrainableKind::adapters) {
    if (!adapters) throw StateError("adapter gradients requested without adapters");
    g.adapters.bottleneck = adapters->bottleneck;
    g.adapters.layers.resize(adapters->layers.size());
    std::vector<Matrix*> adst;
    visit_adapter_tensors(g.adapters,
                          [&](const std::string&, Matrix& m, bool) { adst.push_back(&m); });
    std::size_t j = 0;
    visit_adapter_tensors(*adapters, [&](const std::string&, const Matrix& m, bool) {
      *adst[j++] = Matrix(m.rows(), m.cols());
    });
  }
  return g;
}

namespace detail {

inline Matrix adapter_backward(const Adapter& ad, const AdapterCache& c, const Matrix& dy,
                               Adapter* grad) {
  Matrix dhidden = matmul_nt(dy, ad.up);
  Matrix dpre(dhidden.rows(), dhidden.cols());
  for (std::size_t i = 0; i < dpre.size(); ++i) dpre[i] = dhidden[i] * c.hidden_grad[i];
  if (grad && !grad->up.empty()) {
    matmul_tn_acc(c.hidden, dy, grad->up);
    add_column_sums(dy, grad->up_bias);
    matmul_tn_acc(c.input, dpre, grad->down);
    add_column_sums(dpre, grad->down_bias);
  }
  Matrix dx = matmul_nt(dpre, ad.down);
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
  return dx;
}

}  // namespace detail

/// Gradients of sum(dlogits * logits) for the selected parameter set.
inline Gradients backward(const ModelWeights& w, const ForwardTape& tape, const Matrix& dlogits,
                          TrainableKind kind) {
  if (!tape.valid_) throw StateError("backward called without a recorded forward pass");
  const ModelConfig& cfg = w.config;
  const std::size_t d = cfg.d;
  if (dlogits.rows() != tape.output_rows_.size())
    throw ShapeError("dlogits has " + std::to_string(dlogits.rows()) + " rows, forward produced " +
                     std::to_string(tape.output_rows_.size()));
  if (kind == TrainableKind::adapters && !tape.adapters_)
    throw StateError("adapter gradients requested but forward ran without adapters");
  Gradients g = make_gradients(w, tape.prompts_, tape.adapters_, kind);
  const bool weights = kind == TrainableKind::all_weights;
  const bool biases = weights || kind == TrainableKind::biases;

  // LM head.
  const std::vector<int>& subset = tape.vocab_subset_;
  Matrix dfinal;
  if (subset.empty()) {
    if (dlogits.cols() != cfg.vocab_size) throw ShapeError("dlogits width mismatch");
    dfinal = matmul(dlogits, w.token_embedding);
    if (weights) matmul_tn_acc(dlogits, tape.final_out_, g.model.token_embedding);
    if (biases) add_column_sums(dlogits, g.model.lm_bias);
  } else {
    if (dlogits.cols() != subset.size()) throw ShapeError("dlogits width mismatch");
    Matrix sub(subset.size(), d);
    for (std::size_t i = 0; i < subset.size(); ++i)
      std::copy_n(w.token_embedding.data() + static_cast<std::size_t>(subset[i]) * d, d,
                  sub.data() + i * d);
    dfinal = matmul(dlogits, sub);
    if (weights) {
      Matrix dsub = matmul_tn(dlogits, tape.final_out_);
      for (std::size_t i = 0; i < subset.size(); ++i)
        for (std::size_t c = 0; c < d; ++c)
          g.model.token_embedding(static_cast<std::size_t>(subset[i]), c) += dsub(i, c);
    }
    if (biases)
      for (std::size_t r = 0; r < dlogits.rows(); ++r)
        for (std::size_t i = 0; i < subset.size(); ++i)
          g.model.lm_bias[static_cast<std::size_t>(subset[i])] += dlogits(r, i);
  }
  Matrix dgathered = detail::layer_norm_backward(dfinal, w.final_ln_gain, tape.final_norm_,
                                                 weights ? &g.model.final_ln_gain : nullptr,
                                                 biases ? &g.model.final_ln_bias : nullptr);
  std::size_t rows = 0;
  for (std::size_t len : tape.lengths_) rows += len;
  Matrix dh(rows, d);
  for (std::size_t i = 0; i < tape.output_rows_.size(); ++i)
    for (std::size_t c = 0; c < d; ++c) dh(tape.output_rows_[i], c) += dgathered(i, c);

  const std::size_t heads = cfg.num_heads;
  const std::size_t dh_width = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh_width));

  for (std::size_t li = w.layers.size(); li-- > 0;) {
    const LayerWeights& L = w.layers[li];
    const detail::LayerCache& c = tape.layers_[li];
    LayerWeights& G = g.model.layers[li];
    Adapter* gad_attn = nullptr;
    Adapter* gad_ffn = nullptr;
    if (kind == TrainableKind::adapters) {
      gad_attn = &g.adapters.layers[li][0];
      gad_ffn = &g.adapters.layers[li][1];
    }

    // FFN sublayer: h_out = h_mid + adapter(act V + b2).
    Matrix dffn = dh;
    if (tape.adapters_)
      dffn = detail::adapter_backward(tape.adapters_->layers[li][1], *c.ad_ffn, dffn, gad_ffn);
    if (weights) matmul_tn_acc(c.act, dffn, G.ffn_v);
    if (biases) add_column_sums(dffn, G.ffn_b2);
    Matrix dz = matmul_nt(dffn, L.ffn_v);
    for (std::size_t i = 0; i < dz.size(); ++i) dz[i] *= c.act_grad[i];
    if (weights) matmul_tn_acc(dz, c.u2, G.ffn_k);
    if (biases) add_column_sums(dz, G.ffn_b1);
    Matrix du2 = matmul(dz, L.ffn_k);
    Matrix dmid = detail::layer_norm_backward(du2, L.ln2_gain, c.ln2,
                                              weights ? &G.ln2_gain : nullptr,
                                              biases ? &G.ln2_bias : nullptr);
    for (std::size_t i = 0; i < dmid.size(); ++i) dmid[i] += dh[i];

    // Attention sublayer: h_mid = h_in + adapter(context Wo + bo).
    Matrix dattn = dmid;
    if (tape.adapters_)
      dattn = detail::adapter_backward(tape.adapters_->layers[li][0], *c.ad_attn, dattn, gad_attn);
    if (weights) matmul_tn_acc(c.context, dattn, G.wo);
    if (biases) add_column_sums(dattn, G.bo);
    Matrix dcontext = matmul_nt(dattn, L.wo);

    Matrix dq(rows, d), dk(rows, d), dv(rows, d);
    std::size_t prob_off = 0;
    detail::EigenRowMajor dP;
    for (std::size_t s = 0; s < tape.lengths_.size(); ++s) {
      const std::size_t T = tape.lengths_[s], base = tape.offsets_[s];
      for (std::size_t hd = 0; hd < heads; ++hd) {
        const std::size_t col = hd * dh_width;
        const auto P = detail::square_block(c.probs.data() + prob_off, T);
        const auto dctx = detail::head_block(dcontext, base, col, T, dh_width);
        detail::head_block(dv, base, col, T, dh_width).noalias() += P.transpose() * dctx;
        dP.noalias() = dctx * detail::head_block(c.v, base, col, T, dh_width).transpose();
        // Softmax backward: dS = P * (dP - rowsum(P * dP)), then the score scale.
        for (std::size_t i = 0; i < T; ++i) {
          const double* pr = P.data() + i * T;
          double* gr = dP.data() + i * T;
          double dot = 0.0;
          for (std::size_t j = 0; j < T; ++j) dot += pr[j] * gr[j];
          for (std::size_t j = 0; j < T; ++j) gr[j] = pr[j] * (gr[j] - dot) * scale;
        }
        detail::head_block(dq, base, col, T, dh_width).noalias() +=
            dP * detail::head_block(c.k, base, col, T, dh_width);
        detail::head_block(dk, base, col, T, dh_width).noalias() +=
            dP.transpose() * detail::head_block(c.q, base, col, T, dh_width);
        prob_off += T * T;
      }
    }
    if (weights) {
      matmul_tn_acc(c.u1, dq, G.wq);
      matmul_tn_acc(c.u1, dk, G.wk);
      matmul_tn_acc(c.u1, dv, G.wv);
    }
    if (biases) {
      add_column_sums(dq, G.bq);
      add_column_sums(dk, G.bk);
      add_column_sums(dv, G.bv);
    }
    Matrix du1 = matmul_nt(dq, L.wq);
    axpy(1.0, matmul_nt(dk, L.wk), du1);
    axpy(1.0, matmul_nt(dv, L.wv), du1);
    Matrix din = detail::layer_norm_backward(du1, L.ln1_gain, c.ln1,
                                             weights ? &G.ln1_gain : nullptr,
                                             biases ? &G.ln1_bias : nullptr);
    for (std::size_t i = 0; i < din.size(); ++i) dh[i] = dmid[i] + din[i];
  }

  // Embeddings.
  for (std::size_t s = 0; s < tape.lengths_.size(); ++s)
    for (std::size_t p = 0; p < tape.lengths_[s]; ++p) {
      const double* src = dh.data() + (tape.offsets_[s] + p) * d;
      if (p < tape.prompt_len_) {
        if (kind == TrainableKind::prompts)
          for (std::size_t c = 0; c < d; ++c) g.prompts(p, c) += src[c];
      } else if (weights) {
        const auto t = static_cast<std::size_t>(tape.sequences_[s][p - tape.prompt_len_]);
        for (std::size_t c = 0; c < d; ++c) g.model.token_embedding(t, c) += src[c];
      }
      if (weights)
        for (std::size_t c = 0; c < d; ++c) g.model.position_embedding(p, c) += src[c];
    }
  return g;
}

/// (param, grad) pairs for every non-empty gradient tensor.
inline void collect_trainable(ModelWeights& w, Gradients& g, std::vector<Matrix*>& params,
                              std::vector<const Matrix*>& grads) {
  std::vector<Matrix*> gm;
  visit_tensors(g.model, [&](const std::string&, Matrix& m, bool) { gm.push_back(&m); });
  std::size_t i = 0;
  visit_tensors(w, [&](const std::string&, Matrix& m, bool) {
    if (!gm[i]->empty()) {
      params.push_back(&m);
      grads.push_back(gm[i]);
    }
    ++i;
  });
}

inline void collect_trainable(AdapterParams& a, Gradients& g, std::vector<Matrix*>& params,
                              std::vector<const Matrix*>& grads) {
  std::vector<Matrix*> ga;
  visit_adapter_tensors(g.adapters, [&](const std::string&, Matrix& m, bool) { ga.push_back(&m); });
  std::size_t i = 0;
  visit_adapter_tensors(a, [&](const std::string&, Matrix& m, bool) {
    if (i < ga.size() && !ga[i]->empty()) {
      params.push_back(&m);
      grads.push_back(ga[i]);
    }
    ++i;
  });
}

/// Row-wise softmax cross-entropy. Returns the mean loss and writes the
/// gradient of the mean into dlogits.
inline double softmax_cross_entropy(const Matrix& logits, std::span<const std::size_t> targets,
                                    Matrix& dlogits) {
  if (targets.size() != logits.rows()) throw ShapeError("one target per logit row required");
  dlogits = Matrix(logits.rows(), logits.cols());
  double loss = 0.0;
  const double inv = 1.0 / static_cast<double>(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double v : row) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    loss += lse - row[targets[r]];
    for (std::size_t c = 0; c < row.size(); ++c)
      dlogits(r, c) = std::exp(row[c] - lse) * inv;
    dlogits(r, targets[r]) -= inv;
  }
  return loss * inv;
}

// ---------------------------------------------------------------------------
// Masked-LM pre-training
// ---------------------------------------------------------------------------

struct MlmConfig {
  std::size_t steps = 3000;
  std::size_t batch = 16;
  double lr = 1e-3;
  double mask_prob = 0.15;
  // Tokens masked at their own rate (salient-span style); empty = none.
  std::vector<int> focus_tokens;
  double focus_mask_prob = 0.15;
};

/// Standard MLM with 80/10/10 mask/random/keep replacement and Adam over
/// every tensor. Returns the loss of each step.
inline std::vector<double> mlm_pretrain(ModelWeights& w,
                                        const std::vector<std::vector<int>>& corpus,
                                        SeededRng& rng, const MlmConfig& cfg) {
  if (corpus.empty()) throw InputError("mlm_pretrain: empty corpus");
  for (const auto& seq : corpus) {
    if (seq.empty()) throw InputError("mlm_pretrain: empty sequence in corpus");
    for (int t : seq)
      if (t < 0 || static_cast<std::size_t>(t) >= w.config.vocab_size)
        throw VocabError("mlm_pretrain: token " + std::to_string(t) + " outside vocabulary");
  }
  AdamState adam(AdamConfig{.lr = cfg.lr});
  std::vector<double> losses;
  losses.reserve(cfg.steps);
  const auto regular = static_cast<std::uint64_t>(w.config.vocab_size - tokens::first_regular);
  std::vector<char> focus(w.config.vocab_size, 0);
  for (int t : cfg.focus_tokens)
    if (t >= 0 && static_cast<std::size_t>(t) < focus.size()) focus[static_cast<std::size_t>(t)] = 1;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<std::vector<int>> batch;
    ForwardOptions opt;
    std::vector<std::size_t> targets;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      std::vector<int> seq = corpus[rng.below(corpus.size())];
      std::vector<std::size_t> chosen;
      for (std::size_t p = 0; p < seq.size(); ++p)
        if (rng.bernoulli(focus[static_cast<std::size_t>(seq[p])] ? cfg.focus_mask_prob : cfg.mask_prob))
          chosen.push_back(p);
      if (chosen.empty()) chosen.push_back(rng.below(seq.size()));
      for (std::size_t p : chosen) {
        targets.push_back(static_cast<std::size_t>(seq[p]));
        const double r = rng.uniform();
        if (r < 0.8)
          seq[p] = tokens::mask;
        else if (r < 0.9)
          seq[p] = tokens::first_regular + static_cast<int>(rng.below(regular));
      }
      opt.output_positions.push_back(std::move(chosen));
      batch.push_back(std::move(seq));
    }
    ForwardTape tape;
    ForwardOutput out = forward(w, batch, opt, &tape);
    Matrix dlogits;
    losses.push_back(softmax_cross_entropy(out.logits, targets, dlogits));
    Gradients g = backward(w, tape, dlogits, TrainableKind::all_weights);
    std::vector<Matrix*> params;
    std::vector<const Matrix*> grads;
    collect_trainable(w, g, params, grads);
    adam.step(params, grads);
  }
  return losses;
}

// ---------------------------------------------------------------------------
// Weight files
// ---------------------------------------------------------------------------

// Layout (little-endian): "SKPW", u32 version, u32 flags (bit 0: pruned),
// u32 x 7 config (layers, d, d_m, heads, vocab, max_positions, activation),
// if pruned: per layer u32 count followed by that many u32 kept indices,
// then every tensor as f32 in visit_tensors order.
inline constexpr std::array<char, 4> kWeightMagic{'S', 'K', 'P', 'W'};
inline constexpr std::uint32_t kWeightVersion = 1;

namespace detail {
inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
}  // namespace detail

inline std::size_t weight_header_bytes(const ModelWeights& w) {
  std::size_t n = 4 + 4 + 4 + 7 * 4;
  if (w.pruned())
    for (const auto& k : w.ffn_kept) n += 4 + 4 * k.size();
  return n;
}

inline std::string serialize_weights(const ModelWeights& w) {
  std::string buf(kWeightMagic.begin(), kWeightMagic.end());
  detail::put_u32(buf, kWeightVersion);
  const bool pruned = w.pruned();
  detail::put_u32(buf, pruned ? 1u : 0u);
  const ModelConfig& c = w.config;
  for (std::size_t v : {c.num_layers, c.d, c.d_m, c.num_heads, c.vocab_size, c.max_positions})
    detail::put_u32(buf, static_cast<std::uint32_t>(v));
  detail::put_u32(buf, c.activation == Activation::gelu ? 0u : 1u);
  if (pruned)
    for (const auto& kept : w.ffn_kept) {
      detail::put_u32(buf, static_cast<std::uint32_t>(kept.size()));
      for (std::size_t i : kept) detail::put_u32(buf, static_cast<std::uint32_t>(i));
    }
  visit_tensors(w, [&](const std::string&, const Matrix& m, bool) {
    for (double v : m.values()) detail::put_u32(buf, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  });
  return buf;
}

inline ModelWeights deserialize_weights(const std::string& buf) {
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > buf.size()) throw IoError("weight file truncated");
  };
  auto u32 = [&] {
    need(4);
    const std::uint32_t v = detail::get_u32(p + pos);
    pos += 4;
    return v;
  };
  need(4);
  if (!std::equal(kWeightMagic.begin(), kWeightMagic.end(), buf.begin()))
    throw FormatError("weight file: bad magic bytes");
  pos = 4;
  const std::uint32_t version = u32();
  if (version != kWeightVersion)
    throw FormatError("weight file: unsupported version " + std::to_string(version));
  const std::uint32_t flags = u32();
  ModelConfig c;
  c.num_layers = u32();
  c.d = u32();
  c.d_m = u32();
  c.num_heads = u32();
  c.vocab_size = u32();
  c.max_positions = u32();
  const std::uint32_t act = u32();
  if (act > 1) throw FormatError("weight file: unknown activation");
  c.activation = act == 0 ? Activation::gelu : Activation::relu;
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("weight file: ") + e.what());
  }
  if (c.num_layers > 4096 || c.d > 65536 || c.d_m > 1 << 20 || c.vocab_size > 1 << 24 ||
      c.max_positions > 1 << 20)
    throw FormatError("weight file: implausible configuration");
  SeededRng dummy(0);
  ModelWeights w = init_weights(c, dummy);
  if (flags & 1u) {
    for (std::size_t l = 0; l < c.num_layers; ++l) {
      const std::uint32_t count = u32();
      if (count > c.d_m) throw FormatError("weight file: kept list longer than d_m");
      auto& kept = w.ffn_kept[l];
      for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t idx = u32();
        if (idx >= c.d_m) throw FormatError("weight file: kept index out of range");
        kept.push_back(idx);
      }
      if (!kept.empty()) {
        auto& L = w.layers[l];
        L.ffn_k = Matrix(kept.size(), c.d);
        L.ffn_b1 = Matrix(1, kept.size());
        L.ffn_v = Matrix(kept.size(), c.d);
      }
    }
  }
  visit_tensors(w, [&](const std::string&, Matrix& m, bool) {
    need(4 * m.size());
    for (std::size_t i = 0; i < m.size(); ++i) {
      m[i] = static_cast<double>(std::bit_cast<float>(detail::get_u32(p + pos)));
      pos += 4;
    }
  });
  if (pos != buf.size()) throw FormatError("weight file: trailing bytes");
  return w;
}

inline void save_weights(const ModelWeights& w, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const std::string buf = serialize_weights(w);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

inline ModelWeights load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_weights(buf);
}

/// Weights rounded to the 32-bit storage precision of weight files.
inline ModelWeights round_to_storage(ModelWeights w) {
  visit_tensors(w, [](const std::string&, Matrix& m, bool) {
    for (double& v : m.values()) v = static_cast<double>(static_cast<float>(v));
  });
  return w;
}

}  // namespace skillprobe
