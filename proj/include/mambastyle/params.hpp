#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mambastyle/autodiff.hpp"
#include "mambastyle/errors.hpp"
#include "mambastyle/rng.hpp"
#include "mambastyle/tensor.hpp"

namespace mambastyle {

/// Ordered, named collection of parameter handles. Registration order is
/// the checkpoint order and the optimizer order.
template <typename T>
class ParameterSet {
 public:
  BasicVar<T> add(const std::string& name, BasicTensor<T> value, bool trainable = true) {
    if (index_.contains(name)) {
      throw ContractError("parameter registered twice: " + name);
    }
    BasicVar<T> v(std::move(value), trainable);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, v);
    return v;
  }

  [[nodiscard]] const std::vector<std::pair<std::string, BasicVar<T>>>& entries() const { return entries_; }
  [[nodiscard]] std::size_t count() const { return entries_.size(); }

  [[nodiscard]] bool contains(const std::string& name) const { return index_.contains(name); }

  [[nodiscard]] BasicVar<T> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw ContractError("unknown parameter: " + name);
    }
    return entries_[it->second].second;
  }

  /// Total element count.
  [[nodiscard]] std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [_, v] : entries_) {
      n += v.size();
    }
    return n;
  }

  [[nodiscard]] std::vector<BasicVar<T>> trainable() const {
    std::vector<BasicVar<T>> out;
    for (const auto& [_, v] : entries_) {
      if (v.requires_grad()) {
        out.push_back(v);
      }
    }
    return out;
  }

  void set_trainable(bool trainable) {
    for (auto& [_, v] : entries_) {
      v.set_requires_grad(trainable);
    }
  }

  void zero_grad() {
    for (auto& [_, v] : entries_) {
      v.zero_grad();
    }
  }

  void fill(T value) {
    for (auto& [_, v] : entries_) {
      for (auto& x : v.mutable_value().data()) {
        x = value;
      }
    }
  }

 private:
  std::vector<std::pair<std::string, BasicVar<T>>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

namespace init {

/// He-style normal init with std = gain / sqrt(fan_in).
template <typename T>
BasicTensor<T> fan_in_normal(Shape shape, std::size_t fan_in, Rng& rng, double gain = 1.0) {
  return BasicTensor<T>::randn(std::move(shape), rng, gain / std::sqrt(static_cast<double>(fan_in)));
}

}  // namespace init

/// Affine map x[M,in] -> [M,out] stored as weight[in,out] + bias[out].
template <typename T>
struct Linear {
  BasicVar<T> weight;
  BasicVar<T> bias;

  static Linear make(ParameterSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                     double gain = 1.0, double bias_value = 0.0) {
    Linear l;
    l.weight = ps.add(name + ".weight", init::fan_in_normal<T>(Shape{in, out}, in, rng, gain));
    l.bias = ps.add(name + ".bias", BasicTensor<T>::full(Shape{out}, static_cast<T>(bias_value)));
    return l;
  }
};

/// Per-feature affine parameters of a layer norm.
template <typename T>
struct NormParams {
  BasicVar<T> gamma;
  BasicVar<T> beta;

  static NormParams make(ParameterSet<T>& ps, const std::string& name, std::size_t c) {
    return {ps.add(name + ".gamma", BasicTensor<T>::full(Shape{c}, T{1})),
            ps.add(name + ".beta", BasicTensor<T>(Shape{c}))};
  }
};

template <typename T>
struct Conv {
  BasicVar<T> weight;  // [O, C, K, K]
  BasicVar<T> bias;    // [O]
  std::size_t stride = 1;
  std::size_t pad = 0;

  static Conv make(ParameterSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
                   Rng& rng, std::size_t stride = 1, double gain = 1.0) {
    Conv c;
    c.weight = ps.add(name + ".weight", init::fan_in_normal<T>(Shape{out, in, k, k}, in * k * k, rng, gain));
    c.bias = ps.add(name + ".bias", BasicTensor<T>(Shape{out}));
    c.stride = stride;
    c.pad = k / 2;
    return c;
  }
};

}  // namespace mambastyle
