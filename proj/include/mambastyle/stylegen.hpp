#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "mambastyle/config.hpp"
#include "mambastyle/ops.hpp"
#include "mambastyle/params.hpp"

namespace mambastyle::stylegen {

inline constexpr double kActGain = 1.4142135623730951;

template <typename T>
BasicVar<T> lrelu_gain(const BasicVar<T>& x) {
  return ops::scale(ops::leaky_relu(x), kActGain);
}

/// Style-modulated convolution: s = affine(style), kernel scaled by s per
/// input channel, optionally demodulated, then a same-padded conv + bias.
template <typename T>
BasicVar<T> mod_conv(const BasicVar<T>& x, const BasicVar<T>& style, const Linear<T>& affine,
                     const BasicVar<T>& kernel, const BasicVar<T>& bias, bool demodulate) {
  auto s = ops::reshape(ops::linear(ops::reshape(style, Shape{1, style.size()}), affine.weight, affine.bias),
                        Shape{kernel.dim(1)});
  return ops::conv2d(x, ops::modulate_weight(kernel, s, demodulate), bias, 1, kernel.dim(2) / 2);
}

template <typename T>
struct GenLayer {
  Linear<T> affine;  // d_w -> C_in, bias 1
  BasicVar<T> kernel;
  BasicVar<T> bias;
  BasicVar<T> noise_strength;  // only with noise enabled
  bool upsample = false;
};

/// Frozen toy generator: mapping MLP, constant 4x4 input, two modulated 3x3
/// convs per resolution and a single toRGB head.
template <typename T>
struct GeneratorParams {
  std::vector<Linear<T>> mapping;
  BasicVar<T> const_input;
  std::vector<GenLayer<T>> layers;
  Linear<T> rgb_affine;
  BasicVar<T> rgb_kernel;
  BasicVar<T> rgb_bias;
  std::size_t inject_layer = 0;
  std::size_t d_w = 0;
  bool noise = false;

  [[nodiscard]] std::size_t depth() const { return layers.size(); }

  static GeneratorParams make(ParameterSet<T>& ps, const PipelineConfig& cfg, Rng& rng) {
    GeneratorParams g;
    g.inject_layer = cfg.inject_layer;
    g.d_w = cfg.d_w;
    g.noise = cfg.noise;
    std::size_t in = cfg.d_z;
    for (std::size_t i = 0; i < 4; ++i) {
      g.mapping.push_back(
          Linear<T>::make(ps, "gen.mapping." + std::to_string(i), in, cfg.d_w, rng, i < 3 ? kActGain : 1.0));
      in = cfg.d_w;
    }
    const std::size_t c0 = cfg.layer_channels(0);
    g.const_input = ps.add("gen.const", BasicTensor<T>::randn(Shape{c0, 4, 4}, rng));
    std::size_t prev_c = c0, prev_res = 4;
    for (std::size_t i = 0; i < cfg.layers; ++i) {
      const std::string name = "gen.layer." + std::to_string(i);
      const std::size_t c = cfg.layer_channels(i), res = cfg.layer_resolution(i);
      GenLayer<T> l;
      l.affine = Linear<T>::make(ps, name + ".affine", cfg.d_w, prev_c, rng, 1.0, 1.0);
      l.kernel = ps.add(name + ".kernel", BasicTensor<T>::randn(Shape{c, prev_c, 3, 3}, rng));
      l.bias = ps.add(name + ".bias", BasicTensor<T>::randn(Shape{c}, rng, 0.1));
      if (cfg.noise) {
        l.noise_strength = ps.add(name + ".noise_strength", BasicTensor<T>::full(Shape{1}, T(0.1)));
      }
      l.upsample = res > prev_res;
      g.layers.push_back(l);
      prev_c = c;
      prev_res = res;
    }
    g.rgb_affine = Linear<T>::make(ps, "gen.rgb.affine", cfg.d_w, prev_c, rng, 1.0, 1.0);
    g.rgb_kernel = ps.add("gen.rgb.kernel", init::fan_in_normal<T>(Shape{3, prev_c, 1, 1}, prev_c, rng, 0.35));
    g.rgb_bias = ps.add("gen.rgb.bias", BasicTensor<T>(Shape{3}));
    return g;
  }

  /// Shape of the activation at the injection layer.
  [[nodiscard]] Shape inject_shape() const {
    const auto& k = layers.at(inject_layer).kernel;
    std::size_t res = 4;
    for (std::size_t i = 0; i <= inject_layer; ++i) {
      if (layers[i].upsample) res *= 2;
    }
    return Shape{k.dim(0), res, res};
  }
};

/// z[d_z] -> w+[L_g, d_w], one shared row broadcast to every layer.
template <typename T>
BasicVar<T> mapping(const BasicVar<T>& z, const GeneratorParams<T>& g) {
  auto h = ops::reshape(z, Shape{1, z.size()});
  for (std::size_t i = 0; i < g.mapping.size(); ++i) {
    h = ops::linear(h, g.mapping[i].weight, g.mapping[i].bias);
    if (i + 1 < g.mapping.size()) h = ops::leaky_relu(h);
  }
  return ops::repeat_rows(ops::reshape(h, Shape{g.d_w}), g.depth());
}

template <typename T>
struct SynthesisHooks {
  BasicVar<T> inject;              // added to layer k's output when defined
  BasicVar<T>* capture = nullptr;  // receives layer k's output before injection
  Rng* noise_rng = nullptr;        // required when the generator has noise
};

/// w+[L_g, d_w] -> image[3, R, R].
template <typename T>
BasicVar<T> synthesize(const BasicVar<T>& w, const GeneratorParams<T>& g, const SynthesisHooks<T>& hooks = {}) {
  if (w.shape() != Shape{g.depth(), g.d_w}) {
    throw ShapeError("synthesize: latent " + shape_str(w.shape()) + " vs [" + std::to_string(g.depth()) + "x" +
                     std::to_string(g.d_w) + "]");
  }
  if (hooks.inject.defined() && hooks.inject.shape() != g.inject_shape()) {
    throw ShapeError("synthesize: injected features " + shape_str(hooks.inject.shape()) + " vs layer activation " +
                     shape_str(g.inject_shape()));
  }
  auto x = g.const_input;
  for (std::size_t i = 0; i < g.depth(); ++i) {
    const auto& l = g.layers[i];
    if (l.upsample) x = ops::upsample2x(x);
    x = mod_conv(x, ops::slice(w, i, i + 1), l.affine, l.kernel, l.bias, true);
    if (g.noise) {
      if (hooks.noise_rng == nullptr) throw ContractError("synthesize: noise enabled but no noise RNG given");
      auto n = constant(BasicTensor<T>::randn(Shape{x.dim(1) * x.dim(2), 1}, *hooks.noise_rng));
      x = ops::add(x, ops::reshape(ops::mul(n, l.noise_strength), Shape{x.dim(1), x.dim(2)}));
    }
    x = lrelu_gain(x);
    if (i == g.inject_layer) {
      if (hooks.capture != nullptr) *hooks.capture = x;
      if (hooks.inject.defined()) x = ops::add(x, hooks.inject);
    }
  }
  return mod_conv(x, ops::slice(w, g.depth() - 1, g.depth()), g.rgb_affine, g.rgb_kernel, g.rgb_bias, false);
}

template <typename T>
struct Dispatched {
  BasicVar<T> w_hat;
  BasicVar<T> image;
};

/// w_hat = w' + d, image = G(w_hat) with f_k injected. d = 0 is inversion.
template <typename T>
Dispatched<T> dispatch(const BasicVar<T>& w_prime, const BasicVar<T>& f_k, const BasicVar<T>& d,
                       const GeneratorParams<T>& g, Rng* noise_rng = nullptr) {
  if (w_prime.shape() != d.shape()) {
    throw ShapeError("dispatch: latent " + shape_str(w_prime.shape()) + " vs direction " + shape_str(d.shape()));
  }
  Dispatched<T> out;
  out.w_hat = ops::add(w_prime, d);
  SynthesisHooks<T> hooks;
  hooks.inject = f_k;
  hooks.noise_rng = noise_rng;
  out.image = synthesize(out.w_hat, g, hooks);
  return out;
}

/// Fixed orthonormal W-space directions. A direction tensor replicates one
/// unit vector across all L_g rows, scaled so each row has the given norm.
class DirectionBank {
 public:
  DirectionBank(std::size_t size, std::size_t layers, std::size_t d_w, Rng rng) : layers_(layers), d_w_(d_w) {
    if (size == 0 || size > d_w) throw ConfigError("direction bank size must be in [1, d_w]");
    for (std::size_t k = 0; k < size; ++k) {
      std::vector<double> v(d_w);
      for (auto& x : v) x = rng.normal();
      for (const auto& u : basis_) {
        double dot = 0.0;
        for (std::size_t i = 0; i < d_w; ++i) dot += v[i] * u[i];
        for (std::size_t i = 0; i < d_w; ++i) v[i] -= dot * u[i];
      }
      double norm = 0.0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      for (auto& x : v) x /= norm;
      basis_.push_back(std::move(v));
    }
  }

  [[nodiscard]] std::size_t size() const { return basis_.size(); }
  [[nodiscard]] const std::vector<double>& unit(std::size_t k) const { return basis_.at(k); }

  /// Direction k with per-row norm `row_norm` (sign included).
  [[nodiscard]] Tensor direction(std::size_t k, double row_norm) const {
    Tensor d(Shape{layers_, d_w_});
    const auto& u = basis_.at(k);
    for (std::size_t r = 0; r < layers_; ++r) {
      for (std::size_t i = 0; i < d_w_; ++i) d[r * d_w_ + i] = static_cast<float>(row_norm * u[i]);
    }
    return d;
  }

  /// Random bank member with random sign and norm uniform in [lo, hi].
  [[nodiscard]] Tensor sample(Rng& rng, double lo, double hi) const {
    const std::size_t k = rng.below(basis_.size());
    const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    return direction(k, sign * rng.uniform(lo, hi));
  }

 private:
  std::size_t layers_, d_w_;
  std::vector<std::vector<double>> basis_;
};

}  // namespace mambastyle::stylegen
