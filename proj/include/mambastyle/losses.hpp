#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "mambastyle/ops.hpp"
#include "mambastyle/params.hpp"

namespace mambastyle::losses {

/// Frozen random 3-stage CNN (3 -> 16 -> 32 -> 32, ReLU, 2x2 pooling). Its
/// stage activations serve as the perceptual space and the feature
/// extractor for Frechet distances.
template <typename T>
struct FeatureNet {
  std::array<Conv<T>, 3> stages;

  static FeatureNet make(ParameterSet<T>& ps, Rng& rng) {
    FeatureNet n;
    const std::size_t widths[4] = {3, 16, 32, 32};
    for (std::size_t s = 0; s < 3; ++s) {
      n.stages[s] = Conv<T>::make(ps, "features." + std::to_string(s), widths[s], widths[s + 1], 3, rng, 1,
                                  1.4142135623730951);
    }
    ps.set_trainable(false);
    return n;
  }

  /// Stage outputs of x[3,H,W]; H and W must be divisible by 8.
  [[nodiscard]] std::array<BasicVar<T>, 3> forward(const BasicVar<T>& x) const {
    std::array<BasicVar<T>, 3> out;
    auto h = x;
    for (std::size_t s = 0; s < 3; ++s) {
      h = ops::avg_pool2d(ops::relu(ops::conv2d(h, stages[s].weight, stages[s].bias, 1, stages[s].pad)), 2, 2);
      out[s] = h;
    }
    return out;
  }

  /// Globally pooled stage activations concatenated: 16 + 32 + 32 values.
  [[nodiscard]] std::vector<double> embed(const BasicTensor<T>& image) const {
    NoGradGuard guard;
    std::vector<double> v;
    for (const auto& f : forward(constant(image))) {
      const auto pooled = ops::spatial_mean(f).value();
      for (std::size_t i = 0; i < pooled.size(); ++i) v.push_back(pooled[i]);
    }
    return v;
  }
};

/// Sum over stages of the mean squared feature difference.
template <typename T>
BasicVar<T> perceptual(const BasicVar<T>& a, const BasicVar<T>& b, const FeatureNet<T>& net) {
  auto fa = net.forward(a);
  auto fb = net.forward(b);
  BasicVar<T> total;
  for (std::size_t s = 0; s < 3; ++s) {
    auto term = ops::mse(fa[s], fb[s]);
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total;
}

/// mean |(w_hat_e - w_hat) - d|
template <typename T>
BasicVar<T> loss_edit(const BasicVar<T>& w_hat_e, const BasicVar<T>& w_hat, const BasicVar<T>& d) {
  if (w_hat_e.shape() != w_hat.shape() || w_hat.shape() != d.shape()) {
    throw ShapeError("loss_edit: shapes " + shape_str(w_hat_e.shape()) + ", " + shape_str(w_hat.shape()) + ", " +
                     shape_str(d.shape()));
  }
  return ops::mean_abs(ops::sub(ops::sub(w_hat_e, w_hat), d));
}

struct LossWeights {
  double rec = 1.0;
  double perc = 0.8;
  double id = 0.0;
  double structure = 0.0;
  double edit = 1.0;
};

/// Component losses; undefined members count as absent.
template <typename T>
struct LossTerms {
  BasicVar<T> rec, perc, id, structure, edit;
};

/// Evaluates `f`, re-labelling numerical failures with the term name.
template <typename T>
BasicVar<T> named_term(const char* name, const std::function<BasicVar<T>()>& f) {
  BasicVar<T> v;
  try {
    v = f();
  } catch (const NumericalError& e) {
    throw NumericalError(std::string("loss term '") + name + "': " + e.what());
  }
  if (v.defined() && !v.value().all_finite()) {
    throw NumericalError(std::string("loss term '") + name + "' is not finite");
  }
  return v;
}

/// Weighted sum of the defined terms with nonzero weight.
template <typename T>
BasicVar<T> loss_total(const LossTerms<T>& t, const LossWeights& w) {
  const std::pair<const char*, std::pair<const BasicVar<T>*, double>> parts[] = {
      {"rec", {&t.rec, w.rec}},           {"perc", {&t.perc, w.perc}}, {"id", {&t.id, w.id}},
      {"struct", {&t.structure, w.structure}}, {"edit", {&t.edit, w.edit}}};
  BasicVar<T> total = constant(BasicTensor<T>::scalar(T{0}));
  for (const auto& [name, p] : parts) {
    const auto& [term, weight] = p;
    if (!term->defined()) continue;
    if (!term->value().all_finite()) {
      throw NumericalError(std::string("loss term '") + name + "' is not finite");
    }
    if (weight == 0.0) continue;
    total = ops::add(total, ops::scale(*term, weight));
  }
  return total;
}

}  // namespace mambastyle::losses
