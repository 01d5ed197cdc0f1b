#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "mambastyle/autodiff.hpp"
#include "mambastyle/errors.hpp"

namespace mambastyle {

/// Adam with bias correction over a fixed list of parameters.
template <typename T>
class Adam {
 public:
  Adam(std::vector<BasicVar<T>> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  /// Applies one update from the accumulated gradients. Throws
  /// NumericalError, leaving parameters untouched, on a non-finite gradient.
  void step() {
    for (const auto& p : params_) {
      if (p.has_grad() && !p.node()->grad.all_finite()) {
        throw NumericalError("adam: non-finite gradient");
      }
    }
    double sq = 0.0;
    for (const auto& p : params_) {
      if (!p.has_grad()) continue;
      for (T g : p.node()->grad.data()) sq += static_cast<double>(g) * g;
    }
    last_norm_ = std::sqrt(sq);
    const double factor = clip_norm_ > 0.0 && last_norm_ > clip_norm_ ? clip_norm_ / last_norm_ : 1.0;
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      const T* g = p.node()->grad.data().data();
      T* value = p.mutable_value().data().data();
      double* m = m_[i].data();
      double* v = v_[i].data();
      const std::size_t n = p.size();
      for (std::size_t j = 0; j < n; ++j) {
        const double gj = g[j] * factor;
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * gj;
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
        const double update = lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
        value[j] = static_cast<T>(value[j] - update);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  [[nodiscard]] std::size_t steps() const { return t_; }
  void set_lr(double lr) { lr_ = lr; }
  [[nodiscard]] double lr() const { return lr_; }
  /// Rescales the joint gradient to at most `norm` before each update; 0 disables.
  void set_clip_norm(double norm) { clip_norm_ = norm; }
  /// Joint gradient norm before clipping at the last step.
  [[nodiscard]] double last_norm() const { return last_norm_; }

 private:
  std::vector<BasicVar<T>> params_;
  double lr_, beta1_, beta2_, eps_;
  double clip_norm_ = 0.0, last_norm_ = 0.0;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace mambastyle
