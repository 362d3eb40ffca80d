#pragma once

// Brute-force search oracle: scores every output sequence up to a length
// cap and returns the best one under the length-penalized objective.

#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "flexdepth/decoding.hpp"

namespace flexdepth::testing {

struct EnumeratedBest {
  std::vector<std::int32_t> ids;  // includes EOS when the sequence ends with it
  double log_prob = -std::numeric_limits<double>::infinity();
  double score = -std::numeric_limits<double>::infinity();
  std::size_t sequences = 0;
};

/// Complete sequences are those ending in EOS at length <= cap, plus every
/// EOS-free sequence of exactly length cap. Ties go to the smaller sequence.
inline EnumeratedBest enumerate_best(const ModelParams& params, std::span<const std::int32_t> src, int n, int m,
                                     std::size_t cap, double alpha) {
  DecoderSession session(params, src, n, m);
  const auto vocab = static_cast<std::int32_t>(params.config.vocab_size);
  EnumeratedBest best;
  std::vector<std::int32_t> prefix;
  std::function<void(double)> walk = [&](double logp) {
    const auto lp = session.next_log_probs({prefix}).front();
    for (std::int32_t id = 0; id < vocab; ++id) {
      if (!session.emittable(id)) continue;
      prefix.push_back(id);
      const double total = logp + lp[static_cast<std::size_t>(id)];
      if (id == params.config.eos_id || prefix.size() == cap) {
        ++best.sequences;
        const double score = total / length_penalty(prefix.size(), alpha);
        if (score > best.score || (score == best.score && prefix < best.ids)) {
          best.score = score;
          best.log_prob = total;
          best.ids = prefix;
        }
      } else {
        walk(total);
      }
      prefix.pop_back();
    }
  };
  walk(0.0);
  return best;
}

}  // namespace flexdepth::testing
