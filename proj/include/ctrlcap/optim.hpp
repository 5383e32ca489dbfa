#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "ctrlcap/tensor.hpp"

namespace ctrlcap {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

inline void zero_grads(NamedParams& params) {
  for (auto& [_, t] : params) t.zero_grad();
}

inline double grad_norm(const NamedParams& params) {
  double s = 0.0;
  for (const auto& [_, t] : params)
    if (t.has_grad())
      for (double g : t.grad()) s += g * g;
  return std::sqrt(s);
}

/// Rescales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_grad_norm(NamedParams& params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    const double f = max_norm / norm;
    for (auto& [_, t] : params)
      if (t.has_grad())
        for (double& g : t.mutable_grad()) g *= f;
  }
  return norm;
}

class Adam {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam() = default;
  explicit Adam(Options opt) : opt_(opt) {}

  void step(NamedParams& params, double lr) {
    if (m_.empty()) {
      for (auto& [_, t] : params) {
        m_.emplace_back(t.numel(), 0.0);
        v_.emplace_back(t.numel(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw UsageError("Adam: parameter list changed between steps");
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t p = 0; p < params.size(); ++p) {
      Tensor& t = params[p].second;
      if (!t.has_grad()) continue;
      auto g = t.grad();
      auto w = t.mutable_data();
      auto& m = m_[p];
      auto& v = v_[p];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g[i];
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] -= lr * mhat / (std::sqrt(vhat) + opt_.eps);
      }
      t.check_finite("adam");
    }
  }

  long steps() const { return t_; }

 private:
  Options opt_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace ctrlcap
