#pragma once

// Central-difference gradient oracle.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "flexdepth/tensor.hpp"

namespace flexdepth::testing {

struct GradientCheck {
  double relative_error = 0.0;       // over all leaves as one vector
  std::vector<double> leaf_errors;   // same measure restricted to each leaf
};

/// Compares reverse-mode gradients of loss_fn() against central differences
/// for every element of every leaf. Errors are norm-wise:
/// |g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|).
inline GradientCheck check_gradients(const std::function<Tensor()>& loss_fn, std::vector<Tensor> leaves,
                                     double eps = 1e-3) {
  for (auto& leaf : leaves) leaf.zero_grad();
  loss_fn().backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& leaf : leaves) {
    if (leaf.has_grad()) {
      analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
    } else {
      analytic.emplace_back(leaf.numel(), 0.0);
    }
  }

  auto ratio = [](double diff2, double a2, double n2) {
    const double scale = std::sqrt(std::max(a2, n2));
    return scale > 0.0 ? std::sqrt(diff2) / scale : 0.0;
  };
  GradientCheck result;
  double total_diff2 = 0.0, total_a2 = 0.0, total_n2 = 0.0;
  NoGradGuard no_grad;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto values = leaves[l].mutable_data();
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const float original = values[i];
      const float plus = original + static_cast<float>(eps);
      const float minus = original - static_cast<float>(eps);
      values[i] = plus;
      const double f_plus = loss_fn().item();
      values[i] = minus;
      const double f_minus = loss_fn().item();
      values[i] = original;
      const double numeric = (f_plus - f_minus) / (static_cast<double>(plus) - static_cast<double>(minus));
      const double a = analytic[l][i];
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
    }
    result.leaf_errors.push_back(ratio(diff2, a2, n2));
    total_diff2 += diff2;
    total_a2 += a2;
    total_n2 += n2;
  }
  result.relative_error = ratio(total_diff2, total_a2, total_n2);
  for (auto& leaf : leaves) leaf.zero_grad();
  return result;
}

}  // namespace flexdepth::testing
