#pragma once

// Autoregressive decoding at any (n, m) depth of a trained model: greedy and
// beam search with a length penalty, plus timed corpus translation.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flexdepth/checkpoint.hpp"
#include "flexdepth/data.hpp"
#include "flexdepth/model.hpp"

namespace flexdepth {

struct DecodeConfig {
  int enc_layers = 1;  // n
  int dec_layers = 1;  // m
  int beam = 4;
  double alpha = 0.6;
  int max_len = 0;  // emitted-token cap including EOS; 0 means source length + 8

  void validate(const ModelConfig& model) const {
    if (enc_layers < 1 || enc_layers > model.enc_layers) {
      throw ConfigError("decode: --enc-layers " + std::to_string(enc_layers) + " outside [1, " +
                        std::to_string(model.enc_layers) + "]");
    }
    if (dec_layers < 1 || dec_layers > model.dec_layers) {
      throw ConfigError("decode: --dec-layers " + std::to_string(dec_layers) + " outside [1, " +
                        std::to_string(model.dec_layers) + "]");
    }
    if (beam < 1) throw ConfigError("decode: beam must be >= 1");
    if (alpha < 0.0) throw ConfigError("decode: alpha must be >= 0");
    if (max_len < 0) throw ConfigError("decode: max_len must be >= 0");
  }
};

/// ((5 + length) / 6)^alpha
inline double length_penalty(std::size_t length, double alpha) {
  return std::pow((5.0 + static_cast<double>(length)) / 6.0, alpha);
}

/// Encodes one source once at depth n, then scores next tokens for batches
/// of equal-length target prefixes through m decoder layers.
class DecoderSession {
 public:
  DecoderSession(const ModelParams& params, std::span<const std::int32_t> src, int n, int m)
      : params_(params), src_(TokenMatrix::single(src)), m_(m) {
    if (src.empty()) throw ConfigError("decode: empty source sentence");
    NoGradGuard no_grad;
    auto ctx = ForwardContext::inference();
    memory_ = encoder_forward(src_, n, params, ctx).last();
  }

  std::size_t source_length() const { return src_.cols; }

  /// Natural-log next-token distributions, one row per prefix. Prefixes
  /// exclude BOS and must all have the same length.
  std::vector<std::vector<double>> next_log_probs(
      const std::vector<std::vector<std::int32_t>>& prefixes) const {
    NoGradGuard no_grad;
    const std::size_t rows = prefixes.size();
    const std::size_t len = prefixes.front().size() + 1;
    const auto& cfg = params_.config;
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const std::size_t s = src_.cols;

    TokenMatrix tgt(rows, len, std::vector<std::int32_t>(rows * len));
    TokenMatrix src(rows, s, std::vector<std::int32_t>(rows * s));
    std::vector<float> memory(rows * s * d);
    for (std::size_t r = 0; r < rows; ++r) {
      if (prefixes[r].size() + 1 != len) throw DimensionError("decode: ragged prefixes");
      tgt.ids[r * len] = cfg.bos_id;
      std::copy(prefixes[r].begin(), prefixes[r].end(), tgt.ids.begin() + static_cast<std::ptrdiff_t>(r * len + 1));
      std::copy(src_.ids.begin(), src_.ids.end(), src.ids.begin() + static_cast<std::ptrdiff_t>(r * s));
      std::copy(memory_.data().begin(), memory_.data().end(), memory.begin() + static_cast<std::ptrdiff_t>(r * s * d));
    }
    auto ctx = ForwardContext::inference();
    const Tensor mem({rows * s, d}, std::move(memory));
    const auto dec = decoder_forward(tgt, mem, src, m_, params_, ctx);

    const auto hidden = dec.last().data();
    std::vector<float> last_rows(rows * d);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(hidden.begin() + static_cast<std::ptrdiff_t>((r * len + len - 1) * d), d,
                  last_rows.begin() + static_cast<std::ptrdiff_t>(r * d));
    }
    const Tensor logits = project_logits(Tensor({rows, d}, std::move(last_rows)), params_);
    const std::size_t vocab = logits.dim(1);
    const auto lv = logits.data();
    std::vector<std::vector<double>> out(rows, std::vector<double>(vocab));
    for (std::size_t r = 0; r < rows; ++r) {
      const float* row = lv.data() + r * vocab;
      double peak = row[0];
      for (std::size_t k = 1; k < vocab; ++k) peak = std::max(peak, static_cast<double>(row[k]));
      double z = 0.0;
      for (std::size_t k = 0; k < vocab; ++k) z += std::exp(row[k] - peak);
      const double log_z = peak + std::log(z);
      for (std::size_t k = 0; k < vocab; ++k) out[r][k] = row[k] - log_z;
    }
    return out;
  }

  /// Tokens the search may emit: everything except pad and BOS.
  bool emittable(std::int32_t id) const {
    return id != params_.config.pad_id && id != params_.config.bos_id;
  }

 private:
  const ModelParams& params_;
  TokenMatrix src_;
  int m_;
  Tensor memory_;
};

namespace detail {

inline std::size_t output_cap(const DecodeConfig& cfg, std::size_t src_len, const ModelConfig& model) {
  const std::size_t requested = cfg.max_len > 0 ? static_cast<std::size_t>(cfg.max_len) : src_len + 8;
  return std::min(requested, static_cast<std::size_t>(model.max_len));
}

}  // namespace detail

struct Hypothesis {
  std::vector<std::int32_t> ids;  // emitted tokens, EOS included when finished by EOS
  double log_prob = 0.0;
  bool finished = false;
};

/// Argmax decoding (ties go to the lowest id); the result excludes EOS.
inline std::vector<std::int32_t> greedy_decode(const ModelParams& params,
                                               std::span<const std::int32_t> src,
                                               const DecodeConfig& cfg) {
  cfg.validate(params.config);
  DecoderSession session(params, src, cfg.enc_layers, cfg.dec_layers);
  const std::size_t cap = detail::output_cap(cfg, src.size(), params.config);
  std::vector<std::int32_t> out;
  while (out.size() < cap) {
    const auto lp = session.next_log_probs({out}).front();
    std::int32_t best = -1;
    for (std::size_t k = 0; k < lp.size(); ++k) {
      const auto id = static_cast<std::int32_t>(k);
      if (!session.emittable(id)) continue;
      if (best < 0 || lp[k] > lp[static_cast<std::size_t>(best)]) best = id;
    }
    if (best == params.config.eos_id) break;
    out.push_back(best);
  }
  return out;
}

/// Beam search. Each step expands every live hypothesis over the vocabulary
/// and keeps the `beam` best by running log-probability; hypotheses ending in
/// EOS or reaching the length cap move to the completed pool. The answer
/// maximizes log_prob / length_penalty(|ids|, alpha). Ties anywhere resolve to
/// the lexicographically smallest id sequence.
inline Hypothesis beam_search(const ModelParams& params, std::span<const std::int32_t> src,
                              const DecodeConfig& cfg) {
  cfg.validate(params.config);
  DecoderSession session(params, src, cfg.enc_layers, cfg.dec_layers);
  const std::size_t cap = detail::output_cap(cfg, src.size(), params.config);
  const std::int32_t eos = params.config.eos_id;
  const auto width = static_cast<std::size_t>(cfg.beam);

  auto score = [&](const Hypothesis& h) { return h.log_prob / length_penalty(h.ids.size(), cfg.alpha); };
  auto better_running = [](const Hypothesis& a, const Hypothesis& b) {
    if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
    return a.ids < b.ids;
  };

  std::vector<Hypothesis> live{Hypothesis{}};
  std::vector<Hypothesis> completed;
  double best_completed = -std::numeric_limits<double>::infinity();
  for (std::size_t t = 1; t <= cap && !live.empty(); ++t) {
    std::vector<std::vector<std::int32_t>> prefixes;
    for (const auto& h : live) prefixes.push_back(h.ids);
    const auto lps = session.next_log_probs(prefixes);
    std::vector<Hypothesis> expansions;
    expansions.reserve(live.size() * lps.front().size());
    for (std::size_t r = 0; r < live.size(); ++r) {
      for (std::size_t k = 0; k < lps[r].size(); ++k) {
        const auto id = static_cast<std::int32_t>(k);
        if (!session.emittable(id)) continue;
        Hypothesis h{live[r].ids, live[r].log_prob + lps[r][k], false};
        h.ids.push_back(id);
        expansions.push_back(std::move(h));
      }
    }
    const std::size_t keep = std::min(width, expansions.size());
    std::partial_sort(expansions.begin(), expansions.begin() + static_cast<std::ptrdiff_t>(keep),
                      expansions.end(), better_running);
    live.clear();
    for (std::size_t k = 0; k < keep; ++k) {
      Hypothesis& h = expansions[k];
      h.finished = h.ids.back() == eos || h.ids.size() == cap;
      if (h.finished) {
        best_completed = std::max(best_completed, score(h));
        completed.push_back(std::move(h));
      } else {
        live.push_back(std::move(h));
      }
    }
    if (!live.empty() && !completed.empty()) {
      // Log-probs only fall and the penalty is largest at the cap, so this
      // bounds every score a live hypothesis can still reach.
      const double bound = live.front().log_prob / length_penalty(cap, cfg.alpha);
      if (bound < best_completed) break;
    }
  }
  auto best = std::min_element(completed.begin(), completed.end(),
                               [&](const Hypothesis& a, const Hypothesis& b) {
                                 const double sa = score(a);
                                 const double sb = score(b);
                                 if (sa != sb) return sa > sb;
                                 return a.ids < b.ids;
                               });
  return *best;
}

/// Beam search result without the trailing EOS.
inline std::vector<std::int32_t> beam_decode(const ModelParams& params,
                                             std::span<const std::int32_t> src,
                                             const DecodeConfig& cfg) {
  auto ids = beam_search(params, src, cfg).ids;
  if (!ids.empty() && ids.back() == params.config.eos_id) ids.pop_back();
  return ids;
}

/// Dispatches to greedy search for beam 1, beam search otherwise.
inline std::vector<std::int32_t> decode(const ModelParams& params, std::span<const std::int32_t> src,
                                        const DecodeConfig& cfg) {
  return cfg.beam == 1 ? greedy_decode(params, src, cfg) : beam_decode(params, src, cfg);
}

inline std::string translate(const ModelParams& params, const Vocab& vocab, const std::string& sentence,
                             const DecodeConfig& cfg) {
  return vocab.decode(decode(params, vocab.encode(sentence), cfg));
}

struct TimedDecode {
  std::vector<std::string> translations;
  double seconds_total = 0.0;   // model/vocab loading plus search
  double seconds_decode = 0.0;  // search only
};

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

inline TimedDecode timed_search(const ModelParams& params, const Vocab& vocab,
                                const std::vector<std::string>& sources, const DecodeConfig& cfg) {
  if (sources.empty()) throw ConfigError("decode: no source sentences");
  cfg.validate(params.config);
  translate(params, vocab, sources.front(), cfg);  // untimed warmup
  TimedDecode out;
  out.translations.reserve(sources.size());
  const auto start = std::chrono::steady_clock::now();
  for (const auto& sentence : sources) out.translations.push_back(translate(params, vocab, sentence, cfg));
  out.seconds_decode = seconds_since(start);
  out.seconds_total = out.seconds_decode;
  return out;
}

}  // namespace detail

/// Translates every sentence sequentially on the calling thread. The total
/// time covers loading the checkpoint and vocabulary plus search; one
/// warmup sentence is decoded untimed first.
inline TimedDecode timed_decode_corpus(const std::filesystem::path& checkpoint,
                                       const std::filesystem::path& vocab_path,
                                       const std::vector<std::string>& sources, const DecodeConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  const ModelParams params = load_checkpoint(checkpoint).params;
  const Vocab vocab = read_vocab(vocab_path);
  const double load_seconds = detail::seconds_since(start);
  TimedDecode out = detail::timed_search(params, vocab, sources, cfg);
  out.seconds_total = load_seconds + out.seconds_decode;
  return out;
}

/// In-memory variant: nothing to load, so both timings cover search only.
inline TimedDecode timed_decode_corpus(const ModelParams& params, const Vocab& vocab,
                                       const std::vector<std::string>& sources, const DecodeConfig& cfg) {
  return detail::timed_search(params, vocab, sources, cfg);
}

inline nlohmann::json timing_report(const DecodeConfig& cfg, const TimedDecode& result) {
  return {{"n", cfg.enc_layers},
          {"m", cfg.dec_layers},
          {"beam", cfg.beam},
          {"alpha", cfg.alpha},
          {"sentences", result.translations.size()},
          {"seconds_total", result.seconds_total},
          {"seconds_decode", result.seconds_decode}};
}

}  // namespace flexdepth
