#pragma once

// Vanilla and N x M (multi-layer softmax) training objectives, Adam with the
// inverse-square-root warmup schedule, and the checkpointing training loop.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flexdepth/checkpoint.hpp"
#include "flexdepth/data.hpp"
#include "flexdepth/model.hpp"
#include "flexdepth/ops.hpp"

namespace flexdepth {

enum class Algorithm { kVanilla, kNxM };

inline std::string to_string(Algorithm a) { return a == Algorithm::kVanilla ? "vanilla" : "nxm"; }

inline Algorithm parse_algorithm(std::string_view name) {
  if (name == "vanilla") return Algorithm::kVanilla;
  if (name == "nxm") return Algorithm::kNxM;
  throw ConfigError("unknown algorithm '" + std::string(name) + "' (expected vanilla or nxm)");
}

struct TrainConfig {
  Algorithm algorithm = Algorithm::kNxM;
  int steps = 5000;
  int batch_size = 32;
  double base_scale = 1.0;
  int warmup_steps = 400;
  double beta1 = 0.9;
  double beta2 = 0.997;
  double eps = 1e-9;
  int checkpoint_every = 100;
  int keep_last = 5;
  std::uint64_t seed = 1;
  /// Optional N x M row-major weights for the aggregate; empty means the
  /// unweighted mean.
  std::vector<double> loss_weights;

  void validate() const {
    if (steps < 0) throw ConfigError("train config: steps must be >= 0");
    if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
    if (checkpoint_every < 1) throw ConfigError("train config: checkpoint_every must be >= 1");
    if (keep_last < 1) throw ConfigError("train config: keep_last must be >= 1");
    if (steps > 0 && steps < checkpoint_every) {
      throw ConfigError("train config: steps must be >= checkpoint_every");
    }
    if (warmup_steps < 1) throw ConfigError("train config: warmup_steps must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"algorithm", to_string(c.algorithm)},
                     {"steps", c.steps},
                     {"batch_size", c.batch_size},
                     {"lr_schedule", {{"base_scale", c.base_scale}, {"warmup_steps", c.warmup_steps}}},
                     {"adam", {{"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}}},
                     {"checkpoint_every", c.checkpoint_every},
                     {"keep_last", c.keep_last},
                     {"seed", c.seed}};
  if (!c.loss_weights.empty()) j["loss_weights"] = c.loss_weights;
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (j.contains("algorithm")) c.algorithm = parse_algorithm(j.at("algorithm").get<std::string>());
  auto take = [](const nlohmann::json& obj, const char* key, auto& field) {
    if (obj.contains(key)) obj.at(key).get_to(field);
  };
  take(j, "steps", c.steps);
  take(j, "batch_size", c.batch_size);
  if (j.contains("lr_schedule")) {
    take(j.at("lr_schedule"), "base_scale", c.base_scale);
    take(j.at("lr_schedule"), "warmup_steps", c.warmup_steps);
  }
  if (j.contains("adam")) {
    take(j.at("adam"), "beta1", c.beta1);
    take(j.at("adam"), "beta2", c.beta2);
    take(j.at("adam"), "eps", c.eps);
  }
  take(j, "checkpoint_every", c.checkpoint_every);
  take(j, "keep_last", c.keep_last);
  take(j, "seed", c.seed);
  take(j, "loss_weights", c.loss_weights);
}

// ---------------------------------------------------------------------------
// Objectives

/// Forward context for a training step; dropout comes from the model config.
inline ForwardContext training_context(const ModelConfig& config, std::uint64_t seed,
                                       std::uint64_t step) {
  return ForwardContext{config.dropout, seed, step, 0};
}

inline Tensor token_loss(const Tensor& tap, const Batch& batch, const ModelParams& params) {
  return cross_entropy(project_logits(tap, params), batch.tgt_out.ids, params.config.pad_id,
                       params.config.label_smoothing);
}

/// Standard objective: enc_N feeds all M decoder layers; loss on dec_M only.
inline Tensor vanilla_loss(const ModelParams& params, const Batch& batch, ForwardContext& ctx) {
  const auto& cfg = params.config;
  const auto enc = encoder_forward(batch.src, cfg.enc_layers, params, ctx);
  const auto dec = decoder_forward(batch.tgt_in, enc.last(), batch.src, cfg.dec_layers, params, ctx);
  return token_loss(dec.last(), batch, params);
}

/// N x M matrix of per-layer-pair losses and their aggregate.
struct LossGrid {
  int n = 0;
  int m = 0;
  std::vector<Tensor> cells;  // row-major, cells[(i-1)*m + (j-1)] = loss_{i,j}
  Tensor aggregate;

  const Tensor& cell(int i, int j) const {
    return cells.at(static_cast<std::size_t>((i - 1) * m + (j - 1)));
  }
  float value(int i, int j) const { return cell(i, j).item(); }
};

/// Multi-layer softmax objective. For each encoder depth i, enc_i is derived
/// from enc_{i-1}; a fresh decoder sweep then cross-attends to enc_i at every
/// layer and each dec_j is projected and scored. The aggregate is the mean of
/// the N*M losses, or a normalized weighted mean when weights are given.
inline LossGrid nxm_loss(const ModelParams& params, const Batch& batch, ForwardContext& ctx,
                         std::span<const double> weights = {}) {
  const auto& cfg = params.config;
  const int n_layers = cfg.enc_layers;
  const int m_layers = cfg.dec_layers;
  if (!weights.empty() && weights.size() != static_cast<std::size_t>(n_layers * m_layers)) {
    throw ConfigError("nxm_loss: expected " + std::to_string(n_layers * m_layers) +
                      " loss weights, got " + std::to_string(weights.size()));
  }
  LossGrid grid;
  grid.n = n_layers;
  grid.m = m_layers;
  EncoderStepper encoder(batch.src, params, ctx);
  for (int i = 1; i <= n_layers; ++i) {
    const Tensor enc_i = encoder.advance();
    const auto dec = decoder_forward(batch.tgt_in, enc_i, batch.src, m_layers, params, ctx);
    for (int j = 1; j <= m_layers; ++j) grid.cells.push_back(token_loss(dec.tap(j), batch, params));
  }
  if (weights.empty()) {
    grid.aggregate = scale(add_n(grid.cells), 1.0f / static_cast<float>(grid.cells.size()));
  } else {
    double total = 0.0;
    for (double w : weights) total += w;
    if (!(total > 0.0)) throw ConfigError("nxm_loss: loss weights must have a positive sum");
    std::vector<Tensor> terms;
    for (std::size_t k = 0; k < grid.cells.size(); ++k) {
      terms.push_back(scale(grid.cells[k], static_cast<float>(weights[k] / total)));
    }
    grid.aggregate = add_n(terms);
  }
  return grid;
}

/// Which layers receive a nonzero gradient from a single loss_{i,j}.
struct GradientReport {
  int keep_i = 0;
  int keep_j = 0;
  std::vector<bool> encoder;  // encoder[k-1]: layer k touched
  std::vector<bool> decoder;
  bool embedding = false;
};

namespace detail {

template <typename LayerT>
bool layer_has_gradient(LayerT& layer) {
  const std::string prefix;
  bool any = false;
  auto check = [&any](const std::string&, Tensor& t) {
    if (!t.has_grad()) return;
    for (float g : t.grad()) {
      if (g != 0.0f) {
        any = true;
        return;
      }
    }
  };
  if constexpr (std::is_same_v<LayerT, EncoderLayerParams>) {
    detail::visit_attention(prefix, layer.self_attn, check);
    detail::visit_norm(prefix, layer.norm1, check);
    detail::visit_linear(prefix, layer.ff1, check);
    detail::visit_linear(prefix, layer.ff2, check);
    detail::visit_norm(prefix, layer.norm2, check);
  } else {
    detail::visit_attention(prefix, layer.self_attn, check);
    detail::visit_norm(prefix, layer.norm1, check);
    detail::visit_attention(prefix, layer.cross_attn, check);
    detail::visit_norm(prefix, layer.norm2, check);
    detail::visit_linear(prefix, layer.ff1, check);
    detail::visit_linear(prefix, layer.ff2, check);
    detail::visit_norm(prefix, layer.norm3, check);
  }
  return any;
}

}  // namespace detail

/// Backpropagates loss_{i,j} alone and reports per-layer gradient support.
/// Parameter gradients are cleared before and after.
inline GradientReport gradient_reach(ModelParams& params, const Batch& batch, ForwardContext& ctx,
                                     int keep_i, int keep_j) {
  detail::check_depth("encoder", keep_i, params.config.enc_layers);
  detail::check_depth("decoder", keep_j, params.config.dec_layers);
  params.zero_grad();
  const LossGrid grid = nxm_loss(params, batch, ctx);
  grid.cell(keep_i, keep_j).backward();

  GradientReport report;
  report.keep_i = keep_i;
  report.keep_j = keep_j;
  for (auto& layer : params.encoder) report.encoder.push_back(detail::layer_has_gradient(layer));
  for (auto& layer : params.decoder) report.decoder.push_back(detail::layer_has_gradient(layer));
  if (params.embedding.has_grad()) {
    for (float g : params.embedding.grad()) report.embedding = report.embedding || g != 0.0f;
  }
  params.zero_grad();
  return report;
}

// ---------------------------------------------------------------------------
// Optimization

/// lr(step) = base_scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)
inline double noam_learning_rate(double base_scale, int d_model, int warmup_steps, std::int64_t step) {
  const auto s = static_cast<double>(std::max<std::int64_t>(step, 1));
  return base_scale / std::sqrt(static_cast<double>(d_model)) *
         std::min(1.0 / std::sqrt(s), s * std::pow(static_cast<double>(warmup_steps), -1.5));
}

class Adam {
 public:
  Adam(std::vector<Tensor> params, double beta1, double beta2, double eps)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      first_.emplace_back(p.numel(), 0.0f);
      second_.emplace_back(p.numel(), 0.0f);
    }
  }

  std::int64_t steps_taken() const { return t_; }

  /// Applies one update from the current gradients, then clears them.
  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const auto b1 = static_cast<float>(beta1_);
    const auto b2 = static_cast<float>(beta2_);
    const auto step_size = static_cast<float>(lr / c1);
    const auto inv_c2 = static_cast<float>(1.0 / c2);
    const auto eps = static_cast<float>(eps_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor& p = params_[k];
      if (!p.has_grad()) continue;
      const auto g = p.grad();
      auto w = p.mutable_data();
      auto& m = first_[k];
      auto& v = second_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = b1 * m[i] + (1.0f - b1) * g[i];
        v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
        w[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
      }
      p.zero_grad();
    }
  }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> first_;
  std::vector<std::vector<float>> second_;
  double beta1_;
  double beta2_;
  double eps_;
  std::int64_t t_ = 0;
};

/// One optimizer step at a time over an endless, epoch-reshuffled stream.
class Trainer {
 public:
  Trainer(ModelParams& params, const TrainConfig& config)
      : params_(params),
        config_(config),
        adam_(params.parameters(), config.beta1, config.beta2, config.eps) {
    config_.validate();
  }

  std::int64_t step_count() const { return step_; }

  /// Runs forward, backward and the Adam update; returns the step's loss.
  float step(const Batch& batch) {
    ++step_;
    ForwardContext ctx = training_context(params_.config, config_.seed, static_cast<std::uint64_t>(step_));
    Tensor loss;
    if (config_.algorithm == Algorithm::kVanilla) {
      loss = vanilla_loss(params_, batch, ctx);
    } else {
      loss = nxm_loss(params_, batch, ctx, config_.loss_weights).aggregate;
    }
    const float value = loss.item();
    loss.backward();
    adam_.step(noam_learning_rate(config_.base_scale, params_.config.d_model, config_.warmup_steps, step_));
    return value;
  }

 private:
  ModelParams& params_;
  TrainConfig config_;
  Adam adam_;
  std::int64_t step_ = 0;
};

struct TrainResult {
  std::vector<std::filesystem::path> checkpoints;  // retained, oldest first
  std::vector<std::pair<std::int64_t, double>> log;
  double first_loss = 0.0;
  double seconds = 0.0;
};

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::int64_t step) {
  char name[32];
  std::snprintf(name, sizeof name, "ckpt-%08lld.bin", static_cast<long long>(step));
  return dir / name;
}

/// The `count` highest-step checkpoints in `dir`, oldest first.
inline std::vector<std::filesystem::path> latest_checkpoints(const std::filesystem::path& dir,
                                                             std::size_t count) {
  std::vector<std::filesystem::path> found;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (name.starts_with("ckpt-") && name.ends_with(".bin")) found.push_back(entry.path());
  }
  std::sort(found.begin(), found.end());
  if (found.size() > count) found.erase(found.begin(), found.end() - static_cast<std::ptrdiff_t>(count));
  return found;
}

using ProgressFn = std::function<void(std::int64_t step, double interval_loss)>;

/// Runs `steps` updates, saving a checkpoint every checkpoint_every steps
/// (keeping the newest keep_last) and appending "step<TAB>mean loss" for each
/// interval to train.log in `out_dir`.
inline TrainResult train(ModelParams& params, const Corpus& corpus, const Vocab& vocab,
                         const TrainConfig& config, const std::filesystem::path& out_dir,
                         const ProgressFn& progress = {}) {
  config.validate();
  if (corpus.pairs.empty()) throw ConfigError("train: corpus is empty");
  if (vocab.size() != static_cast<std::size_t>(params.config.vocab_size)) {
    throw ConfigError("train: vocabulary has " + std::to_string(vocab.size()) +
                      " entries but the model expects " + std::to_string(params.config.vocab_size));
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  const auto log_path = out_dir / "train.log";
  std::ofstream log(log_path, std::ios::trunc);
  if (ec || !log) throw IoError("checkpoint directory " + out_dir.string() + " is not writable");

  TrainResult result;
  const auto started = std::chrono::steady_clock::now();
  Trainer trainer(params, config);
  BatchOptions bopt{static_cast<std::size_t>(config.batch_size), config.seed, true,
                    static_cast<std::size_t>(params.config.max_len)};
  const auto encoded = encode_corpus(corpus, vocab, bopt.max_len);
  std::vector<Batch> epoch;
  std::size_t cursor = 0;
  std::uint64_t epoch_index = 0;
  std::deque<std::filesystem::path> kept;
  double interval_sum = 0.0;
  int interval_count = 0;
  for (int s = 1; s <= config.steps; ++s) {
    if (cursor == epoch.size()) {
      epoch = batches(encoded, bopt, epoch_index++);
      cursor = 0;
    }
    const double loss = trainer.step(epoch[cursor++]);
    if (s == 1) result.first_loss = loss;
    interval_sum += loss;
    ++interval_count;
    if (s % config.checkpoint_every == 0) {
      const double mean = interval_sum / interval_count;
      interval_sum = 0.0;
      interval_count = 0;
      const auto path = checkpoint_path(out_dir, s);
      save_checkpoint(path, params, s);
      kept.push_back(path);
      while (kept.size() > static_cast<std::size_t>(config.keep_last)) {
        std::filesystem::remove(kept.front());
        kept.pop_front();
      }
      char line[64];
      std::snprintf(line, sizeof line, "%d\t%.6f\n", s, mean);
      log << line << std::flush;
      result.log.emplace_back(s, mean);
      if (progress) progress(s, mean);
    }
  }
  result.checkpoints.assign(kept.begin(), kept.end());
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

}  // namespace flexdepth
