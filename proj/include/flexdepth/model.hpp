#pragma once

// Post-layer-norm encoder-decoder transformer whose every layer output is
// exposed as a tap. The token embedding is shared by source input, target
// input and the output projection, so any decoder tap can be turned into
// logits with the same matrix.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "flexdepth/config.hpp"
#include "flexdepth/ops.hpp"
#include "flexdepth/rng.hpp"
#include "flexdepth/tensor.hpp"

namespace flexdepth {

/// Row-major [rows x cols] matrix of token ids, one sequence per row.
struct TokenMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int32_t> ids;

  TokenMatrix() = default;
  TokenMatrix(std::size_t r, std::size_t c, std::vector<std::int32_t> values)
      : rows(r), cols(c), ids(std::move(values)) {
    if (ids.size() != rows * cols) throw DimensionError("token matrix size mismatch");
  }

  static TokenMatrix single(std::span<const std::int32_t> sequence) {
    return TokenMatrix(1, sequence.size(), {sequence.begin(), sequence.end()});
  }

  std::int32_t at(std::size_t r, std::size_t c) const { return ids[r * cols + c]; }
};

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
};

struct AttentionParams {
  Linear query;
  Linear key;
  Linear value;
  Linear output;
};

struct EncoderLayerParams {
  AttentionParams self_attn;
  LayerNormParams norm1;
  Linear ff1;
  Linear ff2;
  LayerNormParams norm2;
};

struct DecoderLayerParams {
  AttentionParams self_attn;
  LayerNormParams norm1;
  AttentionParams cross_attn;
  LayerNormParams norm2;
  Linear ff1;
  Linear ff2;
  LayerNormParams norm3;
};

struct ModelParams;

namespace detail {

template <typename Visitor>
void visit_linear(const std::string& prefix, Linear& l, Visitor& visit) {
  visit(prefix + ".weight", l.weight);
  visit(prefix + ".bias", l.bias);
}

template <typename Visitor>
void visit_norm(const std::string& prefix, LayerNormParams& n, Visitor& visit) {
  visit(prefix + ".gain", n.gain);
  visit(prefix + ".bias", n.bias);
}

template <typename Visitor>
void visit_attention(const std::string& prefix, AttentionParams& a, Visitor& visit) {
  visit_linear(prefix + ".query", a.query, visit);
  visit_linear(prefix + ".key", a.key, visit);
  visit_linear(prefix + ".value", a.value, visit);
  visit_linear(prefix + ".output", a.output, visit);
}

}  // namespace detail

/// Complete parameter set of one model.
struct ModelParams {
  ModelConfig config;
  Tensor embedding;  // [V x d_model], also the output projection
  std::vector<EncoderLayerParams> encoder;
  std::vector<DecoderLayerParams> decoder;

  /// Visits (name, tensor) pairs in canonical checkpoint order.
  template <typename Visitor>
  void for_each_parameter(Visitor&& visit) {
    visit(std::string("embedding"), embedding);
    for (std::size_t i = 0; i < encoder.size(); ++i) {
      const std::string p = "encoder." + std::to_string(i + 1);
      auto& layer = encoder[i];
      detail::visit_attention(p + ".self_attn", layer.self_attn, visit);
      detail::visit_norm(p + ".norm1", layer.norm1, visit);
      detail::visit_linear(p + ".ff1", layer.ff1, visit);
      detail::visit_linear(p + ".ff2", layer.ff2, visit);
      detail::visit_norm(p + ".norm2", layer.norm2, visit);
    }
    for (std::size_t j = 0; j < decoder.size(); ++j) {
      const std::string p = "decoder." + std::to_string(j + 1);
      auto& layer = decoder[j];
      detail::visit_attention(p + ".self_attn", layer.self_attn, visit);
      detail::visit_norm(p + ".norm1", layer.norm1, visit);
      detail::visit_attention(p + ".cross_attn", layer.cross_attn, visit);
      detail::visit_norm(p + ".norm2", layer.norm2, visit);
      detail::visit_linear(p + ".ff1", layer.ff1, visit);
      detail::visit_linear(p + ".ff2", layer.ff2, visit);
      detail::visit_norm(p + ".norm3", layer.norm3, visit);
    }
  }

  template <typename Visitor>
  void for_each_parameter(Visitor&& visit) const {
    // Tensor is a handle, so handing out copies still aliases the storage.
    const_cast<ModelParams*>(this)->for_each_parameter(
        [&visit](const std::string& name, Tensor& t) { visit(name, static_cast<const Tensor&>(t)); });
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for_each_parameter([&out](const std::string&, const Tensor& t) { out.push_back(t); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for_each_parameter([&total](const std::string&, const Tensor& t) { total += t.numel(); });
    return total;
  }

  void zero_grad() {
    for_each_parameter([](const std::string&, Tensor& t) { t.zero_grad(); });
  }

  /// Deep copy with fresh leaf tensors.
  ModelParams clone() const { return truncated(config.enc_layers, config.dec_layers); }

  /// Deep copy of the embedding plus encoder layers 1..n and decoder layers
  /// 1..m, configured as an (n, m) model.
  ModelParams truncated(int n, int m) const {
    if (n < 1 || n > config.enc_layers || m < 1 || m > config.dec_layers) {
      throw ConfigError("truncate: (" + std::to_string(n) + ", " + std::to_string(m) +
                        ") outside model depth (" + std::to_string(config.enc_layers) + ", " +
                        std::to_string(config.dec_layers) + ")");
    }
    ModelParams out;
    out.config = config;
    out.config.enc_layers = n;
    out.config.dec_layers = m;
    out.embedding = embedding;
    out.encoder.assign(encoder.begin(), encoder.begin() + n);
    out.decoder.assign(decoder.begin(), decoder.begin() + m);
    out.for_each_parameter(
        [](const std::string&, Tensor& t) { t = t.clone(t.requires_grad()); });
    return out;
  }
};

namespace detail {

inline Linear make_linear(int in, int out, Rng& rng) {
  const double limit = std::sqrt(6.0 / (in + out));
  std::vector<float> w(static_cast<std::size_t>(in) * out);
  for (float& x : w) x = static_cast<float>(rng.uniform(-limit, limit));
  return Linear{Tensor({static_cast<std::size_t>(in), static_cast<std::size_t>(out)}, std::move(w),
                       true),
                Tensor::zeros({static_cast<std::size_t>(out)}, true)};
}

inline LayerNormParams make_norm(int d) {
  return LayerNormParams{Tensor::full({static_cast<std::size_t>(d)}, 1.0f, true),
                         Tensor::zeros({static_cast<std::size_t>(d)}, true)};
}

inline AttentionParams make_attention(int d, Rng& rng) {
  AttentionParams a;
  a.query = make_linear(d, d, rng);
  a.key = make_linear(d, d, rng);
  a.value = make_linear(d, d, rng);
  a.output = make_linear(d, d, rng);
  return a;
}

}  // namespace detail

/// Seeded random initialization: Xavier-uniform projections, zero biases,
/// unit layer-norm gains, embedding ~ N(0, 1/d_model).
inline ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  ModelParams p;
  p.config = config;
  const int d = config.d_model;
  std::vector<float> table(static_cast<std::size_t>(config.vocab_size) * d);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(d));
  for (float& x : table) x = static_cast<float>(rng.normal() * stddev);
  p.embedding = Tensor({static_cast<std::size_t>(config.vocab_size), static_cast<std::size_t>(d)},
                       std::move(table), true);
  for (int i = 0; i < config.enc_layers; ++i) {
    EncoderLayerParams layer;
    layer.self_attn = detail::make_attention(d, rng);
    layer.norm1 = detail::make_norm(d);
    layer.ff1 = detail::make_linear(d, config.d_ff, rng);
    layer.ff2 = detail::make_linear(config.d_ff, d, rng);
    layer.norm2 = detail::make_norm(d);
    p.encoder.push_back(std::move(layer));
  }
  for (int j = 0; j < config.dec_layers; ++j) {
    DecoderLayerParams layer;
    layer.self_attn = detail::make_attention(d, rng);
    layer.norm1 = detail::make_norm(d);
    layer.cross_attn = detail::make_attention(d, rng);
    layer.norm2 = detail::make_norm(d);
    layer.ff1 = detail::make_linear(d, config.d_ff, rng);
    layer.ff2 = detail::make_linear(config.d_ff, d, rng);
    layer.norm3 = detail::make_norm(d);
    p.decoder.push_back(std::move(layer));
  }
  return p;
}

/// Every parameter zero, including layer-norm gains; all logits are then 0.
inline ModelParams zero_params(const ModelConfig& config) {
  ModelParams p = init_params(config, 0);
  p.for_each_parameter([](const std::string&, Tensor& t) {
    std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0f);
  });
  return p;
}

/// Ordered per-layer hidden states; tap(k) is 1-based to match layer k.
struct LayerTapOutputs {
  std::vector<Tensor> taps;

  std::size_t size() const { return taps.size(); }
  const Tensor& tap(std::size_t k) const { return taps.at(k - 1); }
  const Tensor& last() const { return taps.back(); }
};

/// Dropout state for one forward pass. Each dropout call consumes the next
/// call index, so masks depend only on (seed, step, call order).
struct ForwardContext {
  float dropout = 0.0f;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::uint64_t calls = 0;

  static ForwardContext inference() { return {}; }

  Tensor apply_dropout(const Tensor& x) {
    if (dropout == 0.0f) return x;
    return flexdepth::dropout(x, dropout, DropoutKey{seed, step, calls++});
  }
};

/// Sinusoidal table: PE(pos, 2k) = sin(pos / 10000^(2k/d)), PE(pos, 2k+1) =
/// cos of the same angle.
inline Tensor positional_encoding(std::size_t length, std::size_t d_model) {
  std::vector<float> table(length * d_model);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < d_model; ++i) {
      const double k2 = static_cast<double>(i - i % 2);
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, k2 / static_cast<double>(d_model));
      table[pos * d_model + i] = static_cast<float>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return Tensor({length, d_model}, std::move(table));
}

inline Tensor linear(const Tensor& x, const Linear& l) {
  return add(matmul(x, l.weight), l.bias);
}

/// Scaled dot-product attention with `heads` heads.
///
/// query holds batch * q_len rows and memory holds batch * k_len rows, both of
/// width d_model. Disallowed (query, key) pairs are excluded before the
/// softmax; fully masked rows attend uniformly.
inline Tensor multi_head_attention(const Tensor& query, const Tensor& memory,
                                   std::shared_ptr<const AttentionMask> mask,
                                   const AttentionParams& params, int heads) {
  const std::size_t d = query.shape().back();
  const std::size_t batch = mask->batch;
  const std::size_t tq = mask->q_len;
  const std::size_t tk = mask->k_len;
  const auto h = static_cast<std::size_t>(heads);
  if (memory.shape().back() != d || d % h != 0) {
    throw DimensionError("attention: widths " + shape_string(query.shape()) + " and " +
                         shape_string(memory.shape()) + " incompatible with " +
                         std::to_string(heads) + " heads");
  }
  if (query.numel() != batch * tq * d || memory.numel() != batch * tk * d) {
    throw DimensionError("attention: mask [" + std::to_string(batch) + "x" + std::to_string(tq) +
                         "x" + std::to_string(tk) + "] does not match query " +
                         shape_string(query.shape()) + " / memory " +
                         shape_string(memory.shape()));
  }
  const std::size_t dh = d / h;
  auto split = [&](const Tensor& x, std::size_t len) {
    return permute(reshape(x, {batch, len, h, dh}), {0, 2, 1, 3});
  };
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
  const Tensor q = split(scale(linear(query, params.query), inv_sqrt), tq);
  const Tensor k = split(linear(memory, params.key), tk);
  const Tensor v = split(linear(memory, params.value), tk);
  const Tensor weights = masked_softmax(matmul_nt(q, k), std::move(mask));
  const Tensor context = permute(matmul(weights, v), {0, 2, 1, 3});
  return linear(reshape(context, {batch * tq, d}), params.output);
}

namespace detail {

inline std::shared_ptr<AttentionMask> key_padding_mask(const TokenMatrix& keys,
                                                       std::size_t q_len, std::int32_t pad_id) {
  auto mask = std::make_shared<AttentionMask>();
  mask->batch = keys.rows;
  mask->q_len = q_len;
  mask->k_len = keys.cols;
  mask->allowed.resize(keys.rows * q_len * keys.cols);
  for (std::size_t b = 0; b < keys.rows; ++b) {
    for (std::size_t q = 0; q < q_len; ++q) {
      for (std::size_t k = 0; k < keys.cols; ++k) {
        mask->allowed[(b * q_len + q) * keys.cols + k] = keys.at(b, k) != pad_id;
      }
    }
  }
  return mask;
}

inline std::shared_ptr<AttentionMask> causal_mask(std::size_t batch, std::size_t len) {
  auto mask = std::make_shared<AttentionMask>();
  mask->batch = batch;
  mask->q_len = len;
  mask->k_len = len;
  mask->allowed.resize(batch * len * len);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t q = 0; q < len; ++q) {
      for (std::size_t k = 0; k < len; ++k) mask->allowed[(b * len + q) * len + k] = k <= q;
    }
  }
  return mask;
}

/// embedding * sqrt(d_model) + positional encoding, then dropout.
inline Tensor embed(const TokenMatrix& tokens, const ModelParams& params, ForwardContext& ctx) {
  const auto d = static_cast<std::size_t>(params.config.d_model);
  if (tokens.cols > static_cast<std::size_t>(params.config.max_len)) {
    throw ConfigError("sequence length " + std::to_string(tokens.cols) + " exceeds max_len " +
                      std::to_string(params.config.max_len));
  }
  Tensor x = scale(embedding(params.embedding, tokens.ids), std::sqrt(static_cast<float>(d)));
  x = add(reshape(x, {tokens.rows, tokens.cols, d}), positional_encoding(tokens.cols, d));
  return ctx.apply_dropout(reshape(x, {tokens.rows * tokens.cols, d}));
}

inline Tensor feed_forward(const Tensor& x, const Linear& ff1, const Linear& ff2) {
  return linear(relu(linear(x, ff1)), ff2);
}

inline Tensor sublayer(const Tensor& residual, const Tensor& update, const LayerNormParams& norm,
                       ForwardContext& ctx) {
  return layer_norm(add(residual, ctx.apply_dropout(update)), norm.gain, norm.bias);
}

inline void check_depth(const char* what, int value, int limit) {
  if (value < 1 || value > limit) {
    throw ConfigError(std::string(what) + " layer count " + std::to_string(value) +
                      " outside [1, " + std::to_string(limit) + "]");
  }
}

}  // namespace detail

/// Computes encoder layers one at a time: advance() maps enc_{i-1} to enc_i.
/// Pad keys are masked in self-attention.
class EncoderStepper {
 public:
  EncoderStepper(const TokenMatrix& src, const ModelParams& params, ForwardContext& ctx)
      : params_(params),
        ctx_(ctx),
        mask_(detail::key_padding_mask(src, src.cols, params.config.pad_id)),
        state_(detail::embed(src, params, ctx)) {}

  int depth() const { return depth_; }

  const Tensor& advance() {
    detail::check_depth("encoder", depth_ + 1, static_cast<int>(params_.encoder.size()));
    const auto& layer = params_.encoder[static_cast<std::size_t>(depth_)];
    const int heads = params_.config.heads;
    state_ = detail::sublayer(state_, multi_head_attention(state_, state_, mask_, layer.self_attn, heads),
                              layer.norm1, ctx_);
    state_ = detail::sublayer(state_, detail::feed_forward(state_, layer.ff1, layer.ff2),
                              layer.norm2, ctx_);
    ++depth_;
    return state_;
  }

 private:
  const ModelParams& params_;
  ForwardContext& ctx_;
  std::shared_ptr<const AttentionMask> mask_;
  Tensor state_;
  int depth_ = 0;
};

/// Runs encoder layers 1..n over a batch of source rows; returns enc_1..enc_n,
/// each [rows * cols x d_model].
inline LayerTapOutputs encoder_forward(const TokenMatrix& src, int n, const ModelParams& params,
                                       ForwardContext& ctx) {
  detail::check_depth("encoder", n, static_cast<int>(params.encoder.size()));
  EncoderStepper stepper(src, params, ctx);
  LayerTapOutputs out;
  for (int i = 0; i < n; ++i) out.taps.push_back(stepper.advance());
  return out;
}

/// Runs decoder layers 1..m over teacher-forced target rows; every layer
/// cross-attends to the single encoder tap `memory`. Returns dec_1..dec_m.
inline LayerTapOutputs decoder_forward(const TokenMatrix& tgt_in, const Tensor& memory,
                                       const TokenMatrix& src, int m, const ModelParams& params,
                                       ForwardContext& ctx) {
  detail::check_depth("decoder", m, static_cast<int>(params.decoder.size()));
  if (src.rows != tgt_in.rows) {
    throw DimensionError("decoder: " + std::to_string(tgt_in.rows) + " target rows vs " +
                         std::to_string(src.rows) + " source rows");
  }
  const auto& cfg = params.config;
  const auto self_mask = detail::causal_mask(tgt_in.rows, tgt_in.cols);
  const auto cross_mask = detail::key_padding_mask(src, tgt_in.cols, cfg.pad_id);
  LayerTapOutputs out;
  Tensor y = detail::embed(tgt_in, params, ctx);
  for (int j = 0; j < m; ++j) {
    const auto& layer = params.decoder[static_cast<std::size_t>(j)];
    y = detail::sublayer(y, multi_head_attention(y, y, self_mask, layer.self_attn, cfg.heads),
                         layer.norm1, ctx);
    y = detail::sublayer(y, multi_head_attention(y, memory, cross_mask, layer.cross_attn, cfg.heads),
                         layer.norm2, ctx);
    y = detail::sublayer(y, detail::feed_forward(y, layer.ff1, layer.ff2), layer.norm3, ctx);
    out.taps.push_back(y);
  }
  return out;
}

/// Shared output projection: tap [rows x d_model] times embedding^T.
inline Tensor project_logits(const Tensor& tap, const ModelParams& params) {
  if (tap.shape().back() != static_cast<std::size_t>(params.config.d_model)) {
    throw DimensionError("project_logits: tap " + shape_string(tap.shape()) +
                         " does not have width " + std::to_string(params.config.d_model));
  }
  return matmul_nt(tap, params.embedding);
}

}  // namespace flexdepth
