#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "bcat/error.hpp"
#include "bcat/tensor.hpp"

namespace bcat {

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for the selected
/// coordinates of leaf `x` (all coordinates when `coords` is empty). `f` reads
/// `x` in place and returns a scalar. `x` is restored afterwards.
template <typename T, typename Fn>
std::vector<double> finite_difference_gradient(Fn&& f, const Tensor<T>& x, double h,
                                               std::span<const std::size_t> coords = {}) {
  if (!(h > 0.0)) throw Error("finite_difference_gradient: step must be positive");
  const double base = f();
  const double again = f();
  if (base != again) throw NumericError("finite_difference_gradient: function is not deterministic");

  auto data = x.mutable_data();
  std::vector<std::size_t> all;
  if (coords.empty()) {
    all.resize(data.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    coords = all;
  }
  std::vector<double> grad(coords.size());
  for (std::size_t c = 0; c < coords.size(); ++c) {
    const std::size_t i = coords[c];
    const T saved = data[i];
    data[i] = static_cast<T>(saved + h);
    const double up = f();
    data[i] = static_cast<T>(saved - h);
    const double down = f();
    data[i] = saved;
    grad[c] = (up - down) / (2.0 * h);
  }
  return grad;
}

/// Norm-wise relative error ||a - b|| / max(||a||, ||b||); 0 when both vanish.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("relative_error: length mismatch");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

/// Largest per-coordinate |a - b| / max(|a|, |b|, floor).
inline double max_elementwise_relative_error(std::span<const double> a, std::span<const double> b,
                                             double floor = 0.0) {
  if (a.size() != b.size()) throw ShapeError("max_elementwise_relative_error: length mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    if (denom == 0.0) continue;
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace bcat
