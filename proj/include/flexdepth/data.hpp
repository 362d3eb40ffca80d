#pragma once

// Synthetic sequence-to-sequence tasks, a shared word-level vocabulary,
// corpus/vocab file formats, and padded batch construction.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "flexdepth/errors.hpp"
#include "flexdepth/model.hpp"
#include "flexdepth/rng.hpp"

namespace flexdepth {

enum class Task { kCopy, kReverse, kSort, kSynthTranslate };

inline std::string to_string(Task task) {
  switch (task) {
    case Task::kCopy: return "copy";
    case Task::kReverse: return "reverse";
    case Task::kSort: return "sort";
    case Task::kSynthTranslate: return "synth_translate";
  }
  return "?";
}

inline Task parse_task(std::string_view name) {
  if (name == "copy") return Task::kCopy;
  if (name == "reverse") return Task::kReverse;
  if (name == "sort") return Task::kSort;
  if (name == "synth_translate") return Task::kSynthTranslate;
  throw ConfigError("unknown task '" + std::string(name) +
                    "' (expected copy, reverse, sort or synth_translate)");
}

inline std::vector<std::string> split_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  for (std::string tok; in >> tok;) out.push_back(std::move(tok));
  return out;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

struct SentencePair {
  std::string source;
  std::string target;

  bool operator==(const SentencePair&) const = default;
};

struct Corpus {
  std::vector<SentencePair> pairs;
  Task task = Task::kCopy;
  std::uint64_t seed = 0;

  std::size_t size() const { return pairs.size(); }
};

struct GenerateOptions {
  Task task = Task::kCopy;
  std::size_t size = 1000;
  std::size_t min_len = 4;
  std::size_t max_len = 12;
  std::size_t vocab_size = 64;  // distinct content tokens
  std::uint64_t seed = 0;
  std::size_t model_max_len = 32;  // sequences must leave room for BOS/EOS
};

inline void to_json(nlohmann::json& j, const GenerateOptions& o) {
  j = nlohmann::json{{"task", to_string(o.task)},   {"size", o.size},
                     {"min_len", o.min_len},        {"max_len", o.max_len},
                     {"vocab_size", o.vocab_size},  {"seed", o.seed},
                     {"model_max_len", o.model_max_len}};
}

namespace detail {

inline std::string content_token(std::size_t index, std::size_t vocab_size) {
  const std::size_t width = std::to_string(vocab_size - 1).size();
  std::string digits = std::to_string(index);
  return "t" + std::string(width - digits.size(), '0') + digits;
}

/// Seeded bijection over token indices used by synth_translate.
inline std::vector<std::size_t> substitution_table(std::size_t vocab_size, std::uint64_t seed) {
  std::vector<std::size_t> table(vocab_size);
  for (std::size_t i = 0; i < vocab_size; ++i) table[i] = i;
  Rng rng(splitmix64(seed ^ 0x5eed7ab1e5ULL));
  rng.shuffle(table);
  return table;
}

}  // namespace detail

/// Deterministic target for one source under a task. For synth_translate,
/// tokens are substituted through the seeded bijection, then adjacent pairs
/// are swapped ((a b)(c d) e -> (B A)(D C) E).
inline std::vector<std::size_t> task_target(Task task, std::vector<std::size_t> source,
                                            const std::vector<std::size_t>& substitution) {
  switch (task) {
    case Task::kCopy:
      return source;
    case Task::kReverse:
      std::reverse(source.begin(), source.end());
      return source;
    case Task::kSort:
      std::sort(source.begin(), source.end());
      return source;
    case Task::kSynthTranslate:
      for (auto& tok : source) tok = substitution[tok];
      for (std::size_t i = 0; i + 1 < source.size(); i += 2) std::swap(source[i], source[i + 1]);
      return source;
  }
  return source;
}

inline Corpus generate(const GenerateOptions& opt) {
  if (opt.vocab_size < 5) throw ConfigError("generate: vocab_size must be >= 5");
  if (opt.size == 0) throw ConfigError("generate: size must be >= 1");
  if (opt.min_len < 1 || opt.min_len > opt.max_len) {
    throw ConfigError("generate: length range [" + std::to_string(opt.min_len) + ", " +
                      std::to_string(opt.max_len) + "] is invalid");
  }
  if (opt.max_len + 2 > opt.model_max_len) {
    throw ConfigError("generate: max_len " + std::to_string(opt.max_len) +
                      " leaves no room for BOS/EOS within " + std::to_string(opt.model_max_len));
  }
  const auto substitution = detail::substitution_table(opt.vocab_size, opt.seed);
  Rng rng(opt.seed);
  Corpus corpus;
  corpus.task = opt.task;
  corpus.seed = opt.seed;
  corpus.pairs.reserve(opt.size);
  for (std::size_t n = 0; n < opt.size; ++n) {
    const auto len = static_cast<std::size_t>(
        rng.between(static_cast<std::int64_t>(opt.min_len), static_cast<std::int64_t>(opt.max_len)));
    std::vector<std::size_t> src(len);
    for (auto& tok : src) tok = rng.below(opt.vocab_size);
    const auto tgt = task_target(opt.task, src, substitution);
    auto render = [&](const std::vector<std::size_t>& ids) {
      std::vector<std::string> words;
      for (auto id : ids) words.push_back(detail::content_token(id, opt.vocab_size));
      return join_tokens(words);
    };
    corpus.pairs.push_back({render(src), render(tgt)});
  }
  return corpus;
}

/// Word-level vocabulary with reserved ids pad=0, bos=1, eos=2, unk=3.
class Vocab {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kBos = 1;
  static constexpr std::int32_t kEos = 2;
  static constexpr std::int32_t kUnk = 3;
  static constexpr std::int32_t kReserved = 4;

  Vocab() : tokens_{"<pad>", "<s>", "</s>", "<unk>"} {
    for (std::int32_t id = 0; id < kReserved; ++id) ids_.emplace(tokens_[static_cast<std::size_t>(id)], id);
  }

  /// Reserved entries followed by the given tokens in order.
  explicit Vocab(const std::vector<std::string>& content) : Vocab() {
    for (const auto& tok : content) {
      if (ids_.contains(tok)) throw ConfigError("vocab: duplicate token '" + tok + "'");
      ids_.emplace(tok, static_cast<std::int32_t>(tokens_.size()));
      tokens_.push_back(tok);
    }
  }

  std::size_t size() const { return tokens_.size(); }

  std::int32_t id_of(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
  }

  const std::string& token_of(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  std::vector<std::string> content_tokens() const { return {tokens_.begin() + kReserved, tokens_.end()}; }

  std::vector<std::int32_t> encode(std::string_view sentence) const {
    std::vector<std::int32_t> out;
    for (const auto& tok : split_tokens(sentence)) out.push_back(id_of(tok));
    return out;
  }

  std::string decode(std::span<const std::int32_t> ids) const {
    std::vector<std::string> words;
    for (auto id : ids) words.push_back(token_of(id));
    return join_tokens(words);
  }

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> ids_;
};

/// Union of source and target tokens, sorted, after the reserved ids.
inline Vocab build_vocab(const Corpus& corpus) {
  std::set<std::string> tokens;
  for (const auto& pair : corpus.pairs) {
    for (auto& tok : split_tokens(pair.source)) tokens.insert(std::move(tok));
    for (auto& tok : split_tokens(pair.target)) tokens.insert(std::move(tok));
  }
  return Vocab(std::vector<std::string>(tokens.begin(), tokens.end()));
}

/// Padded teacher-forcing batch. tgt_in = BOS + y, tgt_out = y + EOS.
struct Batch {
  TokenMatrix src;
  TokenMatrix tgt_in;
  TokenMatrix tgt_out;
  std::vector<std::uint8_t> src_pad_mask;  // 1 where src is padding
  std::vector<std::uint8_t> tgt_pad_mask;  // 1 where tgt_out is padding

  std::size_t size() const { return src.rows; }
};

/// Builds one batch from encoded pairs, padding to the longest row.
inline Batch make_batch(const std::vector<std::pair<std::vector<std::int32_t>, std::vector<std::int32_t>>>& rows) {
  std::size_t s = 1;
  std::size_t t = 1;
  for (const auto& [src, tgt] : rows) {
    s = std::max(s, src.size());
    t = std::max(t, tgt.size() + 1);
  }
  const std::size_t b = rows.size();
  Batch batch;
  batch.src = TokenMatrix(b, s, std::vector<std::int32_t>(b * s, Vocab::kPad));
  batch.tgt_in = TokenMatrix(b, t, std::vector<std::int32_t>(b * t, Vocab::kPad));
  batch.tgt_out = TokenMatrix(b, t, std::vector<std::int32_t>(b * t, Vocab::kPad));
  batch.src_pad_mask.assign(b * s, 1);
  batch.tgt_pad_mask.assign(b * t, 1);
  for (std::size_t r = 0; r < b; ++r) {
    const auto& [src, tgt] = rows[r];
    for (std::size_t c = 0; c < src.size(); ++c) {
      batch.src.ids[r * s + c] = src[c];
      batch.src_pad_mask[r * s + c] = 0;
    }
    batch.tgt_in.ids[r * t] = Vocab::kBos;
    for (std::size_t c = 0; c < tgt.size(); ++c) {
      batch.tgt_in.ids[r * t + c + 1] = tgt[c];
      batch.tgt_out.ids[r * t + c] = tgt[c];
    }
    batch.tgt_out.ids[r * t + tgt.size()] = Vocab::kEos;
    for (std::size_t c = 0; c <= tgt.size(); ++c) batch.tgt_pad_mask[r * t + c] = 0;
  }
  return batch;
}

struct BatchOptions {
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  bool shuffle = true;
  std::size_t max_len = 32;
};

using EncodedPair = std::pair<std::vector<std::int32_t>, std::vector<std::int32_t>>;

/// Token ids for every pair; rejects pairs that do not fit max_len with BOS/EOS.
inline std::vector<EncodedPair> encode_corpus(const Corpus& corpus, const Vocab& vocab,
                                              std::size_t max_len) {
  std::vector<EncodedPair> encoded;
  encoded.reserve(corpus.pairs.size());
  for (std::size_t i = 0; i < corpus.pairs.size(); ++i) {
    auto src = vocab.encode(corpus.pairs[i].source);
    auto tgt = vocab.encode(corpus.pairs[i].target);
    if (src.size() + 2 > max_len || tgt.size() + 2 > max_len) {
      throw ConfigError("batches: pair " + std::to_string(i) + " longer than max_len - 2 = " +
                        std::to_string(max_len - 2));
    }
    if (src.empty() || tgt.empty()) {
      throw ConfigError("batches: pair " + std::to_string(i) + " has an empty side");
    }
    encoded.emplace_back(std::move(src), std::move(tgt));
  }
  return encoded;
}

/// One epoch of batches. Each pair appears exactly once; with shuffle on,
/// the order is a seeded permutation that differs per epoch.
inline std::vector<Batch> batches(const std::vector<EncodedPair>& encoded,
                                  const BatchOptions& opt, std::uint64_t epoch = 0) {
  if (opt.batch_size < 1) throw ConfigError("batches: batch_size must be >= 1");
  std::vector<std::size_t> order(encoded.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (opt.shuffle) {
    Rng rng(counter_hash(opt.seed, epoch, 0xba7c4, 0));
    rng.shuffle(order);
  }
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
    const std::size_t end = std::min(order.size(), start + opt.batch_size);
    std::vector<EncodedPair> rows;
    for (std::size_t k = start; k < end; ++k) rows.push_back(encoded[order[k]]);
    out.push_back(make_batch(rows));
  }
  return out;
}

inline std::vector<Batch> batches(const Corpus& corpus, const Vocab& vocab, const BatchOptions& opt,
                                  std::uint64_t epoch = 0) {
  if (opt.batch_size < 1) throw ConfigError("batches: batch_size must be >= 1");
  return batches(encode_corpus(corpus, vocab, opt.max_len), opt, epoch);
}

// ---------------------------------------------------------------------------
// Files

inline void write_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write corpus " + path.string());
  for (const auto& pair : corpus.pairs) out << pair.source << '\t' << pair.target << '\n';
  if (!out) throw IoError("failed writing corpus " + path.string());
}

inline Corpus read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read corpus " + path.string());
  Corpus corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": missing TAB separator");
    }
    corpus.pairs.push_back({line.substr(0, tab), line.substr(tab + 1)});
  }
  if (corpus.pairs.empty()) throw IoError("corpus " + path.string() + " is empty");
  return corpus;
}

/// One content token per line; line k holds id k + 4.
inline void write_vocab(const std::filesystem::path& path, const Vocab& vocab) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write vocab " + path.string());
  for (const auto& tok : vocab.content_tokens()) out << tok << '\n';
}

inline Vocab read_vocab(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read vocab " + path.string());
  std::vector<std::string> tokens;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) tokens.push_back(line);
  }
  return Vocab(tokens);
}

}  // namespace flexdepth
