#pragma once

// BLEU, the (n, m) quality/timing matrix, oracle-configuration counts,
// parameter accounting and training step-time comparison.

#include <algorithm>
#include <array>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "flexdepth/checkpoint.hpp"
#include "flexdepth/data.hpp"
#include "flexdepth/decoding.hpp"
#include "flexdepth/training.hpp"

namespace flexdepth {

// ---------------------------------------------------------------------------
// BLEU

enum class Smoothing { kNone, kAddOneOnZero };

struct BleuScore {
  double score = 0.0;  // percentage
  std::array<double, 4> precisions{};
  double brevity_penalty = 0.0;
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;
  bool empty_hypothesis = false;  // scored 0 by convention
};

/// Clipped n-gram matches and hypothesis n-gram totals for n = 1..4.
struct NgramStats {
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;

  NgramStats& operator+=(const NgramStats& o) {
    for (std::size_t k = 0; k < 4; ++k) {
      matches[k] += o.matches[k];
      totals[k] += o.totals[k];
    }
    hyp_len += o.hyp_len;
    ref_len += o.ref_len;
    return *this;
  }
};

namespace detail {

inline std::vector<std::string> lowercase(std::vector<std::string> tokens) {
  for (auto& tok : tokens) {
    for (char& c : tok) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  return tokens;
}

inline std::map<std::vector<std::string>, std::size_t> ngram_counts(const std::vector<std::string>& tokens,
                                                                    std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

}  // namespace detail

inline NgramStats ngram_stats(const std::vector<std::string>& hyp_tokens,
                              const std::vector<std::string>& ref_tokens) {
  const auto hyp = detail::lowercase(hyp_tokens);
  const auto ref = detail::lowercase(ref_tokens);
  NgramStats s;
  s.hyp_len = hyp.size();
  s.ref_len = ref.size();
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto h = detail::ngram_counts(hyp, n);
    const auto r = detail::ngram_counts(ref, n);
    for (const auto& [gram, count] : h) {
      s.totals[n - 1] += count;
      if (auto it = r.find(gram); it != r.end()) s.matches[n - 1] += std::min(count, it->second);
    }
  }
  return s;
}

/// Geometric mean of the four precisions times the brevity penalty. With
/// kAddOneOnZero, an order with no match counts as one match (and an order
/// the hypothesis is too short to contain counts as 1/1).
inline BleuScore bleu_from_stats(const NgramStats& s, Smoothing smoothing) {
  BleuScore out;
  out.hyp_len = s.hyp_len;
  out.ref_len = s.ref_len;
  if (s.hyp_len == 0) {
    out.empty_hypothesis = true;
    return out;
  }
  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t k = 0; k < 4; ++k) {
    double matches = static_cast<double>(s.matches[k]);
    double total = static_cast<double>(s.totals[k]);
    if (smoothing == Smoothing::kAddOneOnZero && matches == 0.0) {
      matches = 1.0;
      total = std::max(total, 1.0);
    }
    out.precisions[k] = total > 0.0 ? matches / total : 0.0;
    if (out.precisions[k] <= 0.0) {
      zero = true;
    } else {
      log_sum += std::log(out.precisions[k]);
    }
  }
  const double h = static_cast<double>(s.hyp_len);
  const double r = static_cast<double>(s.ref_len);
  out.brevity_penalty = h < r ? std::exp(1.0 - r / h) : 1.0;
  out.score = zero ? 0.0 : 100.0 * out.brevity_penalty * std::exp(log_sum / 4.0);
  return out;
}

/// Lowercased, whitespace-tokenized sentence BLEU.
inline BleuScore sentence_bleu(const std::vector<std::string>& hyp, const std::vector<std::string>& ref,
                               Smoothing smoothing = Smoothing::kNone) {
  if (ref.empty()) throw ConfigError("sentence_bleu: empty reference");
  return bleu_from_stats(ngram_stats(hyp, ref), smoothing);
}

inline BleuScore sentence_bleu(const std::string& hyp, const std::string& ref,
                               Smoothing smoothing = Smoothing::kNone) {
  return sentence_bleu(split_tokens(hyp), split_tokens(ref), smoothing);
}

/// Corpus BLEU from counts pooled over all pairs; never smoothed.
inline BleuScore corpus_bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
  if (hyps.size() != refs.size()) {
    throw ConfigError("corpus_bleu: " + std::to_string(hyps.size()) + " hypotheses vs " +
                      std::to_string(refs.size()) + " references");
  }
  if (hyps.empty()) throw ConfigError("corpus_bleu: empty corpus");
  NgramStats total;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto ref = split_tokens(refs[i]);
    if (ref.empty()) throw ConfigError("corpus_bleu: empty reference at line " + std::to_string(i + 1));
    total += ngram_stats(split_tokens(hyps[i]), ref);
  }
  return bleu_from_stats(total, Smoothing::kNone);
}

inline nlohmann::json to_json_value(const BleuScore& b) {
  return {{"score", b.score},
          {"precisions", b.precisions},
          {"brevity_penalty", b.brevity_penalty},
          {"hyp_len", b.hyp_len},
          {"ref_len", b.ref_len},
          {"empty_hypothesis", b.empty_hypothesis}};
}

// ---------------------------------------------------------------------------
// Quality / timing matrix

struct BenchmarkCell {
  BleuScore bleu;
  double seconds_total = 0.0;
  double seconds_decode = 0.0;
};

struct BenchmarkMatrix {
  int n = 0;
  int m = 0;
  std::string model_tag;  // "nxm" or "vanilla"
  std::vector<std::optional<BenchmarkCell>> cells;  // row-major; empty when absent
  std::vector<std::string> errors;                  // one message per failed cell

  std::optional<BenchmarkCell>& at(int i, int j) {
    return cells.at(static_cast<std::size_t>((i - 1) * m + (j - 1)));
  }
  const std::optional<BenchmarkCell>& at(int i, int j) const {
    return cells.at(static_cast<std::size_t>((i - 1) * m + (j - 1)));
  }
};

enum class MatrixMetric { kBleu, kSecondsTotal, kSecondsDecode };

namespace detail {

inline std::optional<double> metric_of(const std::optional<BenchmarkCell>& cell, MatrixMetric metric) {
  if (!cell) return std::nullopt;
  switch (metric) {
    case MatrixMetric::kBleu: return cell->bleu.score;
    case MatrixMetric::kSecondsTotal: return cell->seconds_total;
    case MatrixMetric::kSecondsDecode: return cell->seconds_decode;
  }
  return std::nullopt;
}

inline std::string format_fixed(double v, int digits) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(digits) << v;
  return out.str();
}

inline std::vector<std::string> reference_targets(const Corpus& corpus) {
  std::vector<std::string> refs;
  refs.reserve(corpus.pairs.size());
  for (const auto& p : corpus.pairs) refs.push_back(p.target);
  return refs;
}

inline std::vector<std::string> source_sentences(const Corpus& corpus) {
  std::vector<std::string> sources;
  sources.reserve(corpus.pairs.size());
  for (const auto& p : corpus.pairs) sources.push_back(p.source);
  return sources;
}

}  // namespace detail

/// CSV with a header "n,m=1,...,m=M" and one row per n; absent cells are "NA".
inline std::string render_csv(const BenchmarkMatrix& matrix, MatrixMetric metric) {
  std::ostringstream out;
  out << "n";
  for (int j = 1; j <= matrix.m; ++j) out << ",m=" << j;
  out << '\n';
  const int digits = metric == MatrixMetric::kBleu ? 2 : 4;
  for (int i = 1; i <= matrix.n; ++i) {
    out << i;
    for (int j = 1; j <= matrix.m; ++j) {
      const auto v = detail::metric_of(matrix.at(i, j), metric);
      out << ',' << (v ? detail::format_fixed(*v, digits) : "NA");
    }
    out << '\n';
  }
  return out.str();
}

/// Aligned table: rows are encoder depths, columns decoder depths.
inline std::string render_table(const BenchmarkMatrix& matrix, MatrixMetric metric) {
  const int digits = metric == MatrixMetric::kBleu ? 2 : 3;
  constexpr int kWidth = 9;
  std::ostringstream out;
  out << std::setw(6) << "n\\m";
  for (int j = 1; j <= matrix.m; ++j) out << std::setw(kWidth) << j;
  out << '\n';
  for (int i = 1; i <= matrix.n; ++i) {
    out << std::setw(6) << i;
    for (int j = 1; j <= matrix.m; ++j) {
      const auto v = detail::metric_of(matrix.at(i, j), metric);
      out << std::setw(kWidth) << (v ? detail::format_fixed(*v, digits) : "-");
    }
    out << '\n';
  }
  return out.str();
}

/// Decode settings shared by every cell; n and m are filled per cell.
inline DecodeConfig cell_config(const DecodeConfig& settings, int n, int m) {
  DecodeConfig cfg = settings;
  cfg.enc_layers = n;
  cfg.dec_layers = m;
  return cfg;
}

namespace detail {

inline BenchmarkCell score_cell(const TimedDecode& timed, const std::vector<std::string>& refs) {
  return BenchmarkCell{corpus_bleu(timed.translations, refs), timed.seconds_total, timed.seconds_decode};
}

}  // namespace detail

/// Every (n, m) of one N x M checkpoint, decoded and scored on `test`. Each
/// cell reloads the checkpoint so seconds_total includes loading.
inline BenchmarkMatrix quality_timing_matrix(const std::filesystem::path& checkpoint,
                                             const std::filesystem::path& vocab_path, const Corpus& test,
                                             const DecodeConfig& settings) {
  if (test.pairs.empty()) throw ConfigError("benchmark: empty test corpus");
  std::ifstream in(checkpoint, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + checkpoint.string());
  const auto config = read_checkpoint_header(in, checkpoint).at("config").get<ModelConfig>();
  BenchmarkMatrix matrix{config.enc_layers, config.dec_layers, "nxm", {}, {}};
  matrix.cells.resize(static_cast<std::size_t>(matrix.n * matrix.m));
  const auto sources = detail::source_sentences(test);
  const auto refs = detail::reference_targets(test);
  for (int i = 1; i <= matrix.n; ++i) {
    for (int j = 1; j <= matrix.m; ++j) {
      const auto timed = timed_decode_corpus(checkpoint, vocab_path, sources, cell_config(settings, i, j));
      matrix.at(i, j) = detail::score_cell(timed, refs);
    }
  }
  return matrix;
}

/// Vanilla comparison: one separately trained (n, m) checkpoint per cell,
/// always decoded at its full depth. Missing or failing cells are left absent.
inline BenchmarkMatrix quality_timing_matrix(
    const std::map<std::pair<int, int>, std::filesystem::path>& vanilla, int n_max, int m_max,
    const std::filesystem::path& vocab_path, const Corpus& test, const DecodeConfig& settings) {
  if (test.pairs.empty()) throw ConfigError("benchmark: empty test corpus");
  BenchmarkMatrix matrix{n_max, m_max, "vanilla", {}, {}};
  matrix.cells.resize(static_cast<std::size_t>(n_max * m_max));
  const auto sources = detail::source_sentences(test);
  const auto refs = detail::reference_targets(test);
  for (int i = 1; i <= n_max; ++i) {
    for (int j = 1; j <= m_max; ++j) {
      const auto it = vanilla.find({i, j});
      if (it == vanilla.end() || !std::filesystem::exists(it->second)) continue;
      try {
        const auto timed = timed_decode_corpus(it->second, vocab_path, sources, cell_config(settings, i, j));
        matrix.at(i, j) = detail::score_cell(timed, refs);
      } catch (const std::exception& e) {
        matrix.errors.push_back("cell (" + std::to_string(i) + "," + std::to_string(j) + "): " + e.what());
      }
    }
  }
  return matrix;
}

/// In-memory N x M matrix; timings cover search only.
inline BenchmarkMatrix quality_timing_matrix(const ModelParams& params, const Vocab& vocab, const Corpus& test,
                                             const DecodeConfig& settings) {
  if (test.pairs.empty()) throw ConfigError("benchmark: empty test corpus");
  BenchmarkMatrix matrix{params.config.enc_layers, params.config.dec_layers, "nxm", {}, {}};
  matrix.cells.resize(static_cast<std::size_t>(matrix.n * matrix.m));
  const auto sources = detail::source_sentences(test);
  const auto refs = detail::reference_targets(test);
  for (int i = 1; i <= matrix.n; ++i) {
    for (int j = 1; j <= matrix.m; ++j) {
      const auto timed = timed_decode_corpus(params, vocab, sources, cell_config(settings, i, j));
      matrix.at(i, j) = detail::score_cell(timed, refs);
    }
  }
  return matrix;
}

// ---------------------------------------------------------------------------
// Oracle configurations

struct OracleDistribution {
  int n = 0;
  int m = 0;
  std::vector<std::size_t> counts;  // row-major [n][m]
  std::size_t total = 0;
  std::vector<std::pair<int, int>> choice;  // per sentence

  std::size_t count(int i, int j) const {
    return counts.at(static_cast<std::size_t>((i - 1) * m + (j - 1)));
  }
};

/// Worker count from FLEXDEPTH_THREADS (default 1).
inline unsigned configured_threads() {
  const char* env = std::getenv("FLEXDEPTH_THREADS");
  if (env == nullptr) return 1;
  const long v = std::strtol(env, nullptr, 10);
  return v >= 1 ? static_cast<unsigned>(v) : 1u;
}

/// Best (n, m) for one source: highest smoothed sentence BLEU, ties going to
/// the smaller m, then the smaller n.
inline std::pair<int, int> oracle_choice(const ModelParams& params, const Vocab& vocab, const SentencePair& pair,
                                         const DecodeConfig& settings) {
  const auto ref = split_tokens(pair.target);
  const auto src = vocab.encode(pair.source);
  std::pair<int, int> best{0, 0};
  double best_score = -1.0;
  for (int j = 1; j <= params.config.dec_layers; ++j) {
    for (int i = 1; i <= params.config.enc_layers; ++i) {
      const auto hyp = vocab.decode(decode(params, src, cell_config(settings, i, j)));
      const double score = sentence_bleu(split_tokens(hyp), ref, Smoothing::kAddOneOnZero).score;
      if (score > best_score) {
        best_score = score;
        best = {i, j};
      }
    }
  }
  return best;
}

/// Counts, over `test`, which (n, m) yields each sentence's best translation.
/// Sentences are spread over `threads` workers; the result does not depend
/// on the worker count.
inline OracleDistribution oracle_distribution(const ModelParams& params, const Vocab& vocab, const Corpus& test,
                                              const DecodeConfig& settings, unsigned threads = 1) {
  if (test.pairs.empty()) throw ConfigError("oracle: empty test corpus");
  cell_config(settings, 1, 1).validate(params.config);
  OracleDistribution dist{params.config.enc_layers, params.config.dec_layers, {}, test.pairs.size(), {}};
  dist.counts.assign(static_cast<std::size_t>(dist.n * dist.m), 0);
  dist.choice.resize(test.pairs.size());

  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> failures(std::max(1u, threads));
  auto work = [&](unsigned worker) {
    try {
      for (std::size_t k = next++; k < test.pairs.size(); k = next++) {
        dist.choice[k] = oracle_choice(params, vocab, test.pairs[k], settings);
      }
    } catch (...) {
      failures[worker] = std::current_exception();
      next = test.pairs.size();
    }
  };
  if (threads <= 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < threads; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  for (const auto& f : failures) {
    if (f) std::rethrow_exception(f);
  }
  for (const auto& [i, j] : dist.choice) ++dist.counts[static_cast<std::size_t>((i - 1) * dist.m + (j - 1))];
  return dist;
}

/// Heatmap counts: header "n,m=1,...", one row per n.
inline std::string render_csv(const OracleDistribution& dist) {
  std::ostringstream out;
  out << "n";
  for (int j = 1; j <= dist.m; ++j) out << ",m=" << j;
  out << '\n';
  for (int i = 1; i <= dist.n; ++i) {
    out << i;
    for (int j = 1; j <= dist.m; ++j) out << ',' << dist.count(i, j);
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Parameter accounting

/// Closed-form trainable scalar count; the shared embedding/projection
/// matrix is counted once.
inline std::int64_t count_params(const ModelConfig& c) {
  const std::int64_t d = c.d_model;
  const std::int64_t ff = c.d_ff;
  const std::int64_t attention = 4 * (d * d + d);
  const std::int64_t norm = 2 * d;
  const std::int64_t feed_forward = (d * ff + ff) + (ff * d + d);
  const std::int64_t encoder_layer = attention + feed_forward + 2 * norm;
  const std::int64_t decoder_layer = 2 * attention + feed_forward + 3 * norm;
  return static_cast<std::int64_t>(c.vocab_size) * d + c.enc_layers * encoder_layer +
         c.dec_layers * decoder_layer;
}

/// Scalars held by a training checkpoint that also stores the two Adam
/// moment slots per parameter.
inline std::int64_t count_checkpoint_scalars(const ModelConfig& c, int optimizer_slots = 2) {
  return count_params(c) * (1 + optimizer_slots);
}

/// Sum of count(f) over every (n, m) truncation of `c`.
inline std::int64_t sum_over_depths(const ModelConfig& c,
                                    const std::function<std::int64_t(const ModelConfig&)>& count) {
  std::int64_t total = 0;
  for (int n = 1; n <= c.enc_layers; ++n) {
    for (int m = 1; m <= c.dec_layers; ++m) {
      ModelConfig sub = c;
      sub.enc_layers = n;
      sub.dec_layers = m;
      total += count(sub);
    }
  }
  return total;
}

// ---------------------------------------------------------------------------
// Training step time

struct StepTimeReport {
  int n = 0;
  int m = 0;
  int measured_steps = 0;
  double seconds_nxm = 0.0;      // mean per N x M step
  double seconds_vanilla = 0.0;  // mean per vanilla (N, M) step
  std::vector<double> seconds_cells;  // row-major mean per vanilla (n, m) step
  double r_nxm = 0.0;  // seconds_nxm / seconds_vanilla
  double r_sum = 0.0;  // sum(seconds_cells) / seconds_vanilla
};

inline void to_json(nlohmann::json& j, const StepTimeReport& r) {
  j = nlohmann::json{{"n", r.n},
                     {"m", r.m},
                     {"measured_steps", r.measured_steps},
                     {"seconds_nxm", r.seconds_nxm},
                     {"seconds_vanilla", r.seconds_vanilla},
                     {"seconds_cells", r.seconds_cells},
                     {"r_nxm", r.r_nxm},
                     {"r_sum", r.r_sum}};
}

inline void from_json(const nlohmann::json& j, StepTimeReport& r) {
  j.at("n").get_to(r.n);
  j.at("m").get_to(r.m);
  j.at("measured_steps").get_to(r.measured_steps);
  j.at("seconds_nxm").get_to(r.seconds_nxm);
  j.at("seconds_vanilla").get_to(r.seconds_vanilla);
  j.at("seconds_cells").get_to(r.seconds_cells);
  j.at("r_nxm").get_to(r.r_nxm);
  j.at("r_sum").get_to(r.r_sum);
  if (r.seconds_cells.size() != static_cast<std::size_t>(r.n * r.m)) {
    throw ConfigError("step-time report: seconds_cells has " + std::to_string(r.seconds_cells.size()) +
                      " entries, expected " + std::to_string(r.n * r.m));
  }
}

namespace detail {

/// Mean wall-clock of Trainer::step over batches[1..]; batches[0] warms up.
inline double mean_step_seconds(const ModelConfig& model, TrainConfig train_cfg, Algorithm algorithm,
                                const std::vector<Batch>& batches) {
  ModelParams params = init_params(model, train_cfg.seed);
  train_cfg.algorithm = algorithm;
  train_cfg.steps = 0;
  train_cfg.loss_weights.clear();
  Trainer trainer(params, train_cfg);
  trainer.step(batches.front());
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t k = 1; k < batches.size(); ++k) trainer.step(batches[k]);
  return seconds_since(start) / static_cast<double>(batches.size() - 1);
}

}  // namespace detail

/// Mean step time of N x M training, vanilla (N, M) training, and each
/// vanilla (n, m) model, all on the same batches.
inline StepTimeReport step_time_benchmark(const ModelConfig& model, const TrainConfig& train_cfg,
                                          const std::vector<Batch>& batches) {
  if (batches.size() < 10) throw ConfigError("step-bench: needs at least 10 batches");
  model.validate();
  StepTimeReport r;
  r.n = model.enc_layers;
  r.m = model.dec_layers;
  r.measured_steps = static_cast<int>(batches.size() - 1);
  r.seconds_nxm = detail::mean_step_seconds(model, train_cfg, Algorithm::kNxM, batches);
  r.seconds_vanilla = detail::mean_step_seconds(model, train_cfg, Algorithm::kVanilla, batches);
  double sum = 0.0;
  for (int i = 1; i <= r.n; ++i) {
    for (int j = 1; j <= r.m; ++j) {
      ModelConfig sub = model;
      sub.enc_layers = i;
      sub.dec_layers = j;
      const double s = detail::mean_step_seconds(sub, train_cfg, Algorithm::kVanilla, batches);
      r.seconds_cells.push_back(s);
      sum += s;
    }
  }
  r.r_nxm = r.seconds_nxm / r.seconds_vanilla;
  r.r_sum = sum / r.seconds_vanilla;
  return r;
}

}  // namespace flexdepth
