#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "css/tensor.hpp"

namespace css {

/// Compares reverse-mode gradients of a scalar function against central
/// differences, perturbing every coordinate of every tensor in `wrt`.
/// Returns the maximum relative error, with denominator
/// max(|analytic|, |numeric|, 1e-8). Discrepancies below the central
/// difference rounding bound 100 * macheps * max(|f|, 1) / eps count as zero.
inline double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> wrt, double eps = 1e-5) {
  for (auto& t : wrt) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor y = f();
  if (y.numel() != 1) throw ContractError("grad_check: function must be scalar-valued");
  const double round_off =
      100.0 * std::numeric_limits<double>::epsilon() * std::max(std::abs(y.item()), 1.0) / eps;
  backward(y);
  std::vector<std::vector<double>> analytic;
  for (auto& t : wrt) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.numel(), 0.0);
    }
  }
  double worst = 0.0;
  NoGradGuard no_grad;
  for (std::size_t w = 0; w < wrt.size(); ++w) {
    auto values = wrt[w].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + eps;
      const double fp = f().item();
      values[i] = orig - eps;
      const double fm = f().item();
      values[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[w][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::max(0.0, std::abs(a - numeric) - round_off) / denom);
    }
  }
  for (auto& t : wrt) t.zero_grad();
  return worst;
}

/// Single-input form: f maps x to a scalar.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-5) {
  return grad_check([&] { return f(x); }, std::vector<Tensor>{x}, eps);
}

}  // namespace css
