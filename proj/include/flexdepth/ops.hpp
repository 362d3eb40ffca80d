#pragma once

// Differentiable operations over flexdepth::Tensor.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "flexdepth/errors.hpp"
#include "flexdepth/rng.hpp"
#include "flexdepth/tensor.hpp"

namespace flexdepth {

namespace detail {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using MatrixMap = Eigen::Map<RowMatrix>;

inline ConstMatrixMap cmap(std::span<const float> s, std::size_t offset, std::size_t rows,
                           std::size_t cols) {
  return ConstMatrixMap(s.data() + offset, static_cast<Eigen::Index>(rows),
                        static_cast<Eigen::Index>(cols));
}

inline MatrixMap mmap(std::span<float> s, std::size_t offset, std::size_t rows,
                      std::size_t cols) {
  return MatrixMap(s.data() + offset, static_cast<Eigen::Index>(rows),
                   static_cast<Eigen::Index>(cols));
}

inline std::size_t leading(const Shape& shape, std::size_t trailing) {
  std::size_t n = 1;
  for (std::size_t i = 0; i + trailing < shape.size(); ++i) n *= shape[i];
  return n;
}

inline bool is_suffix(const Shape& shape, const Shape& suffix) {
  if (suffix.size() > shape.size()) return false;
  return std::equal(suffix.begin(), suffix.end(), shape.end() - suffix.size());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

/// a + b, where b either matches a or matches a trailing suffix of a's shape.
inline Tensor add(const Tensor& a, const Tensor& b) {
  if (!detail::is_suffix(a.shape(), b.shape())) {
    throw DimensionError("add: cannot broadcast " + shape_string(b.shape()) + " onto " +
                         shape_string(a.shape()));
  }
  const auto av = a.data();
  const auto bv = b.data();
  const std::size_t nb = bv.size();
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < av.size(); i += nb) {
    for (std::size_t j = 0; j < nb; ++j) out[i + j] = av[i + j] + bv[j];
  }
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, [nb](detail::Node& self) {
    const auto g = std::span<const float>(self.grad);
    if (auto ga = detail::parent_grad(self, 0); !ga.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (auto gb = detail::parent_grad(self, 1); !gb.empty()) {
      for (std::size_t i = 0; i < g.size(); i += nb) {
        for (std::size_t j = 0; j < nb; ++j) gb[j] += g[i + j];
      }
    }
  });
}

/// Elementwise product of equally shaped tensors.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
  }
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
    const auto& g = self.grad;
    const auto& av = self.parents[0]->data;
    const auto& bv = self.parents[1]->data;
    if (auto ga = detail::parent_grad(self, 0); !ga.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (auto gb = detail::parent_grad(self, 1); !gb.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Tensor scale(const Tensor& a, float factor) {
  std::vector<float> out(a.data().begin(), a.data().end());
  for (float& x : out) x *= factor;
  return detail::make_result(a.shape(), std::move(out), {&a}, [factor](detail::Node& self) {
    auto ga = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * factor;
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<float> out(a.data().begin(), a.data().end());
  for (float& x : out) x = x > 0.0f ? x : 0.0f;
  return detail::make_result(a.shape(), std::move(out), {&a}, [](detail::Node& self) {
    auto ga = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      if (self.data[i] > 0.0f) ga[i] += self.grad[i];
    }
  });
}

/// Sum of all elements, as a scalar.
inline Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (float x : a.data()) total += x;
  return detail::make_result({}, {static_cast<float>(total)}, {&a}, [](detail::Node& self) {
    auto ga = detail::parent_grad(self, 0);
    const float g = self.grad[0];
    for (float& x : ga) x += g;
  });
}

/// Sum of equally shaped tensors, accumulated left to right.
inline Tensor add_n(const std::vector<Tensor>& terms) {
  if (terms.empty()) throw DimensionError("add_n: no terms");
  const Shape& shape = terms.front().shape();
  std::vector<float> out(terms.front().numel(), 0.0f);
  for (const Tensor& t : terms) {
    if (t.shape() != shape) {
      throw DimensionError("add_n: shapes " + shape_string(shape) + " and " +
                           shape_string(t.shape()) + " differ");
    }
    const auto tv = t.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += tv[i];
  }
  return detail::make_result(shape, std::move(out), terms, [](detail::Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto gk = detail::parent_grad(self, k);
      for (std::size_t i = 0; i < gk.size(); ++i) gk[i] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Matrix products

namespace detail {

struct MatmulPlan {
  std::size_t batch;       // number of independent products
  std::size_t p, q, r;     // each product is [p x q] . [q x r]
  bool shared_rhs;         // rhs is one 2-D matrix used by every batch entry
  Shape out_shape;
};

inline MatmulPlan plan_matmul(const Tensor& a, const Tensor& b, bool transpose_b,
                              const char* name) {
  auto fail = [&] {
    throw DimensionError(std::string(name) + ": incompatible shapes " + shape_string(a.shape()) +
                         " and " + shape_string(b.shape()));
  };
  if (a.rank() < 2 || b.rank() < 2) fail();
  MatmulPlan plan{};
  const std::size_t b_rows = b.shape()[b.rank() - 2];
  const std::size_t b_cols = b.shape()[b.rank() - 1];
  plan.q = a.shape().back();
  plan.r = transpose_b ? b_rows : b_cols;
  if ((transpose_b ? b_cols : b_rows) != plan.q) fail();
  plan.out_shape = a.shape();
  plan.out_shape.back() = plan.r;
  if (b.rank() == 2) {
    plan.shared_rhs = true;
    plan.batch = 1;
    plan.p = a.numel() / plan.q;
  } else {
    if (a.rank() != b.rank() ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      fail();
    }
    plan.shared_rhs = false;
    plan.batch = leading(a.shape(), 2);
    plan.p = a.shape()[a.rank() - 2];
  }
  return plan;
}

}  // namespace detail

/// Matrix product over the last two axes. b is either a 2-D matrix shared by
/// every leading index of a, or carries the same leading axes as a.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto plan = detail::plan_matmul(a, b, false, "matmul");
  const std::size_t a_step = plan.p * plan.q;
  const std::size_t b_step = plan.shared_rhs ? 0 : plan.q * plan.r;
  const std::size_t c_step = plan.p * plan.r;
  std::vector<float> out(shape_numel(plan.out_shape));
  for (std::size_t t = 0; t < plan.batch; ++t) {
    detail::mmap(out, t * c_step, plan.p, plan.r).noalias() =
        detail::cmap(a.data(), t * a_step, plan.p, plan.q) *
        detail::cmap(b.data(), t * b_step, plan.q, plan.r);
  }
  return detail::make_result(
      plan.out_shape, std::move(out), {&a, &b},
      [plan, a_step, b_step, c_step](detail::Node& self) {
        const auto& av = self.parents[0]->data;
        const auto& bv = self.parents[1]->data;
        auto ga = detail::parent_grad(self, 0);
        auto gb = detail::parent_grad(self, 1);
        for (std::size_t t = 0; t < plan.batch; ++t) {
          const auto gc = detail::cmap(self.grad, t * c_step, plan.p, plan.r);
          if (!ga.empty()) {
            detail::mmap(ga, t * a_step, plan.p, plan.q).noalias() +=
                gc * detail::cmap(bv, t * b_step, plan.q, plan.r).transpose();
          }
          if (!gb.empty()) {
            detail::mmap(gb, t * b_step, plan.q, plan.r).noalias() +=
                detail::cmap(av, t * a_step, plan.p, plan.q).transpose() * gc;
          }
        }
      });
}

/// a . transpose(b) over the last two axes; b is [r x q] or [... x r x q].
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const auto plan = detail::plan_matmul(a, b, true, "matmul_nt");
  const std::size_t a_step = plan.p * plan.q;
  const std::size_t b_step = plan.shared_rhs ? 0 : plan.q * plan.r;
  const std::size_t c_step = plan.p * plan.r;
  std::vector<float> out(shape_numel(plan.out_shape));
  for (std::size_t t = 0; t < plan.batch; ++t) {
    detail::mmap(out, t * c_step, plan.p, plan.r).noalias() =
        detail::cmap(a.data(), t * a_step, plan.p, plan.q) *
        detail::cmap(b.data(), t * b_step, plan.r, plan.q).transpose();
  }
  return detail::make_result(
      plan.out_shape, std::move(out), {&a, &b},
      [plan, a_step, b_step, c_step](detail::Node& self) {
        const auto& av = self.parents[0]->data;
        const auto& bv = self.parents[1]->data;
        auto ga = detail::parent_grad(self, 0);
        auto gb = detail::parent_grad(self, 1);
        for (std::size_t t = 0; t < plan.batch; ++t) {
          const auto gc = detail::cmap(self.grad, t * c_step, plan.p, plan.r);
          if (!ga.empty()) {
            detail::mmap(ga, t * a_step, plan.p, plan.q).noalias() +=
                gc * detail::cmap(bv, t * b_step, plan.r, plan.q);
          }
          if (!gb.empty()) {
            detail::mmap(gb, t * b_step, plan.r, plan.q).noalias() +=
                gc.transpose() * detail::cmap(av, t * a_step, plan.p, plan.q);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalizations

/// Softmax along `axis`, using max subtraction. NaN input throws.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " +
                         shape_string(x.shape()));
  }
  const std::size_t n = x.shape()[axis];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  const std::size_t outer = x.numel() / (n * inner);
  const auto xv = x.data();
  std::vector<float> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      float peak = -std::numeric_limits<float>::infinity();
      for (std::size_t k = 0; k < n; ++k) {
        const float v = xv[base + k * inner];
        if (std::isnan(v)) throw NumericError("softmax: NaN input");
        peak = std::max(peak, v);
      }
      float total = 0.0f;
      for (std::size_t k = 0; k < n; ++k) {
        const float e = std::exp(xv[base + k * inner] - peak);
        out[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= total;
    }
  }
  return detail::make_result(x.shape(), std::move(out), {&x},
                             [n, inner, outer](detail::Node& self) {
                               auto gx = detail::parent_grad(self, 0);
                               const auto& y = self.data;
                               const auto& g = self.grad;
                               for (std::size_t o = 0; o < outer; ++o) {
                                 for (std::size_t in = 0; in < inner; ++in) {
                                   const std::size_t base = o * n * inner + in;
                                   float dot = 0.0f;
                                   for (std::size_t k = 0; k < n; ++k) {
                                     dot += g[base + k * inner] * y[base + k * inner];
                                   }
                                   for (std::size_t k = 0; k < n; ++k) {
                                     const std::size_t idx = base + k * inner;
                                     gx[idx] += y[idx] * (g[idx] - dot);
                                   }
                                 }
                               }
                             });
}

/// Which (query, key) pairs may attend, per batch entry: allowed[b][q][k].
struct AttentionMask {
  std::size_t batch = 1;
  std::size_t q_len = 0;
  std::size_t k_len = 0;
  std::vector<std::uint8_t> allowed;

  bool at(std::size_t b, std::size_t q, std::size_t k) const {
    return allowed[(b * q_len + q) * k_len + k] != 0;
  }
};

/// Softmax over the last axis of scores [batch, heads, q_len, k_len] (or
/// [q_len, k_len] for a single unbatched head). Disallowed keys get zero
/// weight; a row with no allowed key falls back to uniform weights.
inline Tensor masked_softmax(const Tensor& scores, std::shared_ptr<const AttentionMask> mask) {
  const std::size_t rank = scores.rank();
  if (rank < 2 || scores.shape()[rank - 2] != mask->q_len ||
      scores.shape()[rank - 1] != mask->k_len) {
    throw DimensionError("attention mask [" + std::to_string(mask->q_len) + "x" +
                         std::to_string(mask->k_len) + "] does not fit scores " +
                         shape_string(scores.shape()));
  }
  const std::size_t lead = detail::leading(scores.shape(), 2);
  if (lead % mask->batch != 0) {
    throw DimensionError("attention mask batch " + std::to_string(mask->batch) +
                         " does not divide scores " + shape_string(scores.shape()));
  }
  const std::size_t heads = lead / mask->batch;
  const std::size_t tq = mask->q_len;
  const std::size_t tk = mask->k_len;
  const auto sv = scores.data();
  std::vector<float> out(sv.size(), 0.0f);
  for (std::size_t l = 0; l < lead; ++l) {
    const std::size_t b = l / heads;
    for (std::size_t q = 0; q < tq; ++q) {
      const std::size_t row = (l * tq + q) * tk;
      const std::uint8_t* allowed = mask->allowed.data() + (b * tq + q) * tk;
      float peak = -std::numeric_limits<float>::infinity();
      for (std::size_t k = 0; k < tk; ++k) {
        if (std::isnan(sv[row + k])) throw NumericError("masked_softmax: NaN input");
        if (allowed[k]) peak = std::max(peak, sv[row + k]);
      }
      if (peak == -std::numeric_limits<float>::infinity()) {
        const float uniform = 1.0f / static_cast<float>(tk);
        for (std::size_t k = 0; k < tk; ++k) out[row + k] = uniform;
        continue;
      }
      float total = 0.0f;
      for (std::size_t k = 0; k < tk; ++k) {
        if (!allowed[k]) continue;
        const float e = std::exp(sv[row + k] - peak);
        out[row + k] = e;
        total += e;
      }
      for (std::size_t k = 0; k < tk; ++k) out[row + k] /= total;
    }
  }
  // Masked entries have y == 0 and uniform rows have constant output, so the
  // plain softmax rule is exact for every row except the uniform fallback.
  return detail::make_result(
      scores.shape(), std::move(out), {&scores}, [mask, heads, tq, tk, lead](detail::Node& self) {
        auto gx = detail::parent_grad(self, 0);
        const auto& y = self.data;
        const auto& g = self.grad;
        for (std::size_t l = 0; l < lead; ++l) {
          const std::size_t b = l / heads;
          for (std::size_t q = 0; q < tq; ++q) {
            const std::size_t row = (l * tq + q) * tk;
            const std::uint8_t* allowed = mask->allowed.data() + (b * tq + q) * tk;
            bool any = false;
            for (std::size_t k = 0; k < tk; ++k) any = any || allowed[k];
            if (!any) continue;
            float dot = 0.0f;
            for (std::size_t k = 0; k < tk; ++k) dot += g[row + k] * y[row + k];
            for (std::size_t k = 0; k < tk; ++k) gx[row + k] += y[row + k] * (g[row + k] - dot);
          }
        }
      });
}

/// Normalizes each vector along the last axis, then applies gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         float eps = 1e-6f) {
  const std::size_t d = x.shape().back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gain " + shape_string(gain.shape()) + " / bias " +
                         shape_string(bias.shape()) + " do not match width " + std::to_string(d));
  }
  const std::size_t rows = x.numel() / d;
  const auto xv = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  auto normalized = std::make_shared<std::vector<float>>(xv.size());
  auto inv_std = std::make_shared<std::vector<float>>(rows);
  std::vector<float> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t k = 0; k < d; ++k) mean += row[k];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t k = 0; k < d; ++k) var += (row[k] - mean) * (row[k] - mean);
    var /= static_cast<double>(d);
    const float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
    (*inv_std)[r] = inv;
    for (std::size_t k = 0; k < d; ++k) {
      const float xhat = static_cast<float>(row[k] - mean) * inv;
      (*normalized)[r * d + k] = xhat;
      out[r * d + k] = xhat * gv[k] + bv[k];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {&x, &gain, &bias},
      [d, rows, normalized, inv_std](detail::Node& self) {
        const auto& g = self.grad;
        const auto& gv = self.parents[1]->data;
        auto gx = detail::parent_grad(self, 0);
        auto ggain = detail::parent_grad(self, 1);
        auto gbias = detail::parent_grad(self, 2);
        const auto& xhat = *normalized;
        std::vector<float> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t base = r * d;
          if (!ggain.empty()) {
            for (std::size_t k = 0; k < d; ++k) ggain[k] += g[base + k] * xhat[base + k];
          }
          if (!gbias.empty()) {
            for (std::size_t k = 0; k < d; ++k) gbias[k] += g[base + k];
          }
          if (gx.empty()) continue;
          float mean_d = 0.0f;
          float mean_dx = 0.0f;
          for (std::size_t k = 0; k < d; ++k) {
            dxhat[k] = g[base + k] * gv[k];
            mean_d += dxhat[k];
            mean_dx += dxhat[k] * xhat[base + k];
          }
          mean_d /= static_cast<float>(d);
          mean_dx /= static_cast<float>(d);
          const float inv = (*inv_std)[r];
          for (std::size_t k = 0; k < d; ++k) {
            gx[base + k] += inv * (dxhat[k] - mean_d - xhat[base + k] * mean_dx);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Loss

/// Mean label-smoothed negative log-likelihood over non-pad positions.
/// The smoothed target puts (1 - smoothing) on the gold token plus
/// smoothing / V on every token.
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                            std::int32_t pad_id, float label_smoothing) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw DimensionError("cross_entropy: logits " + shape_string(logits.shape()) +
                         " do not match " + std::to_string(targets.size()) + " targets");
  }
  if (!(label_smoothing >= 0.0f && label_smoothing < 1.0f)) {
    throw ConfigError("cross_entropy: label smoothing must lie in [0, 1)");
  }
  const std::size_t rows = logits.dim(0);
  const std::size_t vocab = logits.dim(1);
  std::size_t support = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::int32_t t = targets[r];
    if (t == pad_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " at position " +
                       std::to_string(r) + " outside vocabulary of " + std::to_string(vocab));
    }
    ++support;
  }
  if (support == 0) throw IndexError("cross_entropy: empty loss support");

  const auto lv = logits.data();
  auto probs = std::make_shared<std::vector<float>>(lv.size(), 0.0f);
  const double on_weight = 1.0 - label_smoothing;
  const double off_weight = static_cast<double>(label_smoothing) / static_cast<double>(vocab);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == pad_id) continue;
    const float* row = lv.data() + r * vocab;
    float peak = row[0];
    for (std::size_t k = 1; k < vocab; ++k) peak = std::max(peak, row[k]);
    double z = 0.0;
    for (std::size_t k = 0; k < vocab; ++k) z += std::exp(static_cast<double>(row[k] - peak));
    const double log_z = std::log(z) + peak;
    double row_loss = -on_weight * (row[targets[r]] - log_z);
    if (off_weight > 0.0) {
      double sum_logp = 0.0;
      for (std::size_t k = 0; k < vocab; ++k) sum_logp += row[k] - log_z;
      row_loss -= off_weight * sum_logp;
    }
    total += row_loss;
    for (std::size_t k = 0; k < vocab; ++k) {
      (*probs)[r * vocab + k] = static_cast<float>(std::exp(row[k] - log_z));
    }
  }
  const float loss = static_cast<float>(total / static_cast<double>(support));
  std::vector<std::int32_t> kept(targets.begin(), targets.end());
  return detail::make_result(
      {}, {loss}, {&logits},
      [probs, kept = std::move(kept), pad_id, vocab, support, on_weight,
       off_weight](detail::Node& self) {
        auto gl = detail::parent_grad(self, 0);
        const float g = self.grad[0] / static_cast<float>(support);
        const auto on = static_cast<float>(on_weight);
        const auto off = static_cast<float>(off_weight);
        for (std::size_t r = 0; r < kept.size(); ++r) {
          if (kept[r] == pad_id) continue;
          for (std::size_t k = 0; k < vocab; ++k) {
            float target = off;
            if (static_cast<std::int32_t>(k) == kept[r]) target += on;
            gl[r * vocab + k] += g * ((*probs)[r * vocab + k] - target);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Indexing and layout

/// Rows of `table` [V x d] selected by `ids`, giving [ids.size() x d].
inline Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids) {
  if (table.rank() != 2) {
    throw DimensionError("embedding: table must be 2-D, got " + shape_string(table.shape()));
  }
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  std::vector<float> out(ids.size() * d);
  const auto tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("embedding: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d, out.begin() + i * d);
  }
  std::vector<std::int32_t> kept(ids.begin(), ids.end());
  return detail::make_result({ids.size(), d}, std::move(out), {&table},
                             [kept = std::move(kept), d](detail::Node& self) {
                               auto gt = detail::parent_grad(self, 0);
                               for (std::size_t i = 0; i < kept.size(); ++i) {
                                 float* dst = gt.data() + kept[i] * d;
                                 const float* src = self.grad.data() + i * d;
                                 for (std::size_t k = 0; k < d; ++k) dst[k] += src[k];
                               }
                             });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                         shape_string(shape));
  }
  std::vector<float> out(x.data().begin(), x.data().end());
  return detail::make_result(std::move(shape), std::move(out), {&x}, [](detail::Node& self) {
    auto gx = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

namespace detail {

inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

/// Walks the output of a permutation in order. For each output element,
/// calls visit(out_index, in_index). The innermost axis is a tight loop.
template <typename Visit>
void for_each_permuted(const Shape& out_shape, const std::vector<std::size_t>& in_strides,
                       Visit&& visit) {
  const std::size_t rank = out_shape.size();
  if (rank == 0) {
    visit(0, 0);
    return;
  }
  const std::size_t inner = out_shape[rank - 1];
  const std::size_t inner_stride = in_strides[rank - 1];
  const std::size_t total = shape_numel(out_shape);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t in_base = 0;
  for (std::size_t out = 0; out < total; out += inner) {
    for (std::size_t k = 0; k < inner; ++k) visit(out + k, in_base + k * inner_stride);
    for (std::size_t i = rank - 1; i-- > 0;) {
      in_base += in_strides[i];
      if (++counter[i] < out_shape[i]) break;
      in_base -= counter[i] * in_strides[i];
      counter[i] = 0;
    }
  }
}

}  // namespace detail

/// Reorders axes: output axis i is input axis perm[i].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  if (perm.size() != x.rank()) {
    throw DimensionError("permute: " + std::to_string(perm.size()) + " axes given for " +
                         shape_string(x.shape()));
  }
  std::vector<bool> used(perm.size(), false);
  for (std::size_t p : perm) {
    if (p >= perm.size() || used[p]) throw DimensionError("permute: invalid axis order");
    used[p] = true;
  }
  Shape out_shape(perm.size());
  std::vector<std::size_t> in_strides(perm.size());
  const auto strides = detail::strides_of(x.shape());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    out_shape[i] = x.shape()[perm[i]];
    in_strides[i] = strides[perm[i]];
  }
  const auto xv = x.data();
  std::vector<float> out(xv.size());
  detail::for_each_permuted(out_shape, in_strides,
                            [&](std::size_t o, std::size_t i) { out[o] = xv[i]; });
  return detail::make_result(out_shape, std::move(out), {&x},
                             [out_shape, in_strides](detail::Node& self) {
                               auto gx = detail::parent_grad(self, 0);
                               const auto& g = self.grad;
                               detail::for_each_permuted(
                                   out_shape, in_strides,
                                   [&](std::size_t o, std::size_t i) { gx[i] += g[o]; });
                             });
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("transpose: expected 2-D, got " + shape_string(x.shape()));
  return permute(x, {1, 0});
}

/// Joins tensors along `axis`; all other extents must agree.
inline Tensor concatenate(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concatenate: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concatenate: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Tensor& part : parts) {
    const Shape& s = part.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) {
      throw DimensionError("concatenate: " + shape_string(s) + " incompatible with " +
                           shape_string(first));
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  std::vector<std::size_t> widths;
  for (const Tensor& part : parts) widths.push_back(part.shape()[axis] * inner);
  const std::size_t out_width = out_shape[axis] * inner;
  std::vector<float> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * widths[k]), widths[k],
                  out.begin() + static_cast<std::ptrdiff_t>(o * out_width + offset));
    }
    offset += widths[k];
  }
  return detail::make_result(std::move(out_shape), std::move(out), parts,
                             [widths, outer, out_width](detail::Node& self) {
                               std::size_t offset = 0;
                               for (std::size_t k = 0; k < widths.size(); ++k) {
                                 auto gk = detail::parent_grad(self, k);
                                 if (!gk.empty()) {
                                   for (std::size_t o = 0; o < outer; ++o) {
                                     for (std::size_t i = 0; i < widths[k]; ++i) {
                                       gk[o * widths[k] + i] +=
                                           self.grad[o * out_width + offset + i];
                                     }
                                   }
                                 }
                                 offset += widths[k];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Dropout

/// Identifies one dropout call: (global seed, training step, call index).
struct DropoutKey {
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::uint64_t call = 0;
};

/// Inverted dropout. The keep/drop decision for element i is a pure function
/// of (key, i), so a replayed step reproduces its masks exactly.
inline Tensor dropout(const Tensor& x, float rate, DropoutKey key) {
  if (!(rate >= 0.0f && rate < 1.0f)) throw ConfigError("dropout: rate must lie in [0, 1)");
  if (rate == 0.0f) return x;
  const float keep_scale = 1.0f / (1.0f - rate);
  auto factors = std::make_shared<std::vector<float>>(x.numel());
  const auto xv = x.data();
  std::vector<float> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double u = unit_from_bits(counter_hash(key.seed, key.step, key.call, i));
    const float f = u < rate ? 0.0f : keep_scale;
    (*factors)[i] = f;
    out[i] = xv[i] * f;
  }
  return detail::make_result(x.shape(), std::move(out), {&x}, [factors](detail::Node& self) {
    auto gx = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * (*factors)[i];
  });
}

}  // namespace flexdepth
