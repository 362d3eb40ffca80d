#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "flexdepth/errors.hpp"

namespace flexdepth {

/// Architecture of one encoder-decoder transformer. The same config serves
/// vanilla and N x M training; only the loss differs.
struct ModelConfig {
  int enc_layers = 4;  // N
  int dec_layers = 4;  // M
  int d_model = 64;
  int heads = 4;
  int d_ff = 256;
  int vocab_size = 68;
  int max_len = 32;
  float dropout = 0.1f;
  float label_smoothing = 0.1f;
  std::int32_t pad_id = 0;
  std::int32_t bos_id = 1;
  std::int32_t eos_id = 2;

  int head_dim() const { return d_model / heads; }

  void validate() const {
    auto require = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError("model config: " + what);
    };
    require(enc_layers >= 1, "enc_layers must be >= 1");
    require(dec_layers >= 1, "dec_layers must be >= 1");
    require(d_model >= 1 && heads >= 1, "d_model and heads must be positive");
    require(d_model % heads == 0, "d_model must be divisible by heads");
    require(d_ff >= 1, "d_ff must be positive");
    require(max_len >= 2, "max_len must be >= 2");
    require(dropout >= 0.0f && dropout < 1.0f, "dropout must lie in [0, 1)");
    require(label_smoothing >= 0.0f && label_smoothing < 1.0f,
            "label_smoothing must lie in [0, 1)");
    require(pad_id != bos_id && pad_id != eos_id && bos_id != eos_id,
            "pad/bos/eos ids must be distinct");
    require(pad_id >= 0 && bos_id >= 0 && eos_id >= 0, "reserved ids must be non-negative");
    require(pad_id < vocab_size && bos_id < vocab_size && eos_id < vocab_size,
            "reserved ids must be < vocab_size");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"enc_layers", c.enc_layers},
                     {"dec_layers", c.dec_layers},
                     {"d_model", c.d_model},
                     {"heads", c.heads},
                     {"d_ff", c.d_ff},
                     {"vocab_size", c.vocab_size},
                     {"max_len", c.max_len},
                     {"dropout", c.dropout},
                     {"label_smoothing", c.label_smoothing},
                     {"pad_id", c.pad_id},
                     {"bos_id", c.bos_id},
                     {"eos_id", c.eos_id}};
}

/// Missing keys keep their defaults, so partial config files are valid.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  auto take = [&j](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  take("enc_layers", c.enc_layers);
  take("dec_layers", c.dec_layers);
  take("d_model", c.d_model);
  take("heads", c.heads);
  take("d_ff", c.d_ff);
  take("vocab_size", c.vocab_size);
  take("max_len", c.max_len);
  take("dropout", c.dropout);
  take("label_smoothing", c.label_smoothing);
  take("pad_id", c.pad_id);
  take("bos_id", c.bos_id);
  take("eos_id", c.eos_id);
}

}  // namespace flexdepth
