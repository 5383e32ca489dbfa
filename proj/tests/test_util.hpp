#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "ctrlcap/ctrlcap.hpp"

namespace testutil {

using ctrlcap::Tensor;

inline Tensor random_tensor(ctrlcap::Rng& rng, ctrlcap::Shape shape, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
  std::vector<double> v(ctrlcap::shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// Central differences of a scalar function with respect to every entry of
/// a leaf tensor.
inline std::vector<double> numeric_grad(const std::function<double()>& f, Tensor& leaf, double h = 1e-6) {
  std::vector<double> g(leaf.numel());
  auto w = leaf.mutable_data();
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double orig = w[i];
    w[i] = orig + h;
    const double fp = f();
    w[i] = orig - h;
    const double fm = f();
    w[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// max_i |a_i - b_i| / max(1e-8, |a_i| + |b_i|) with a floor on tiny values.
inline double max_rel_error(const std::vector<double>& a, const std::vector<double>& b, double abs_floor = 1e-7) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = std::abs(a[i] - b[i]);
    if (diff < abs_floor) continue;
    worst = std::max(worst, diff / std::max(1e-8, std::abs(a[i]) + std::abs(b[i])));
  }
  return worst;
}

/// Analytic gradient of f at leaf, computed by a fresh backward pass.
inline std::vector<double> analytic_grad(const std::function<Tensor()>& f, Tensor& leaf) {
  leaf.zero_grad();
  ctrlcap::backward(f());
  auto g = leaf.grad();
  return {g.begin(), g.end()};
}

}  // namespace testutil
