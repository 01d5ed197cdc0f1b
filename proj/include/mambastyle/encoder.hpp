#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "mambastyle/config.hpp"
#include "mambastyle/ops.hpp"
#include "mambastyle/params.hpp"
#include "mambastyle/vssm.hpp"

namespace mambastyle::encoder {

template <typename T>
struct ResBlock {
  Conv<T> first, second;

  static ResBlock make(ParameterSet<T>& ps, const std::string& name, std::size_t c, Rng& rng) {
    return {Conv<T>::make(ps, name + ".conv1", c, c, 3, rng, 1, 1.4142135623730951),
            Conv<T>::make(ps, name + ".conv2", c, c, 3, rng, 1, 0.5)};
  }
};

template <typename T>
BasicVar<T> conv(const BasicVar<T>& x, const Conv<T>& c) {
  return ops::conv2d(x, c.weight, c.bias, c.stride, c.pad);
}

template <typename T>
BasicVar<T> res_block(const BasicVar<T>& x, const ResBlock<T>& b) {
  return ops::add(x, conv(ops::leaky_relu(conv(x, b.first)), b.second));
}

/// Picks the refinement block flavour from the ablation switches.
inline vssm::MixerKind mixer_kind(const PipelineConfig& cfg) {
  if (cfg.disable_vssm) return vssm::MixerKind::identity;
  if (cfg.vit_blocks) return vssm::MixerKind::attention;
  return vssm::MixerKind::vssm;
}

inline vssm::ScanMode scan_mode_2d(const PipelineConfig& cfg) {
  return cfg.disable_ss2d ? vssm::ScanMode::single : vssm::ScanMode::ss2d;
}

template <typename T>
struct EncoderParams {
  Conv<T> stem;
  std::array<Conv<T>, 3> down;
  std::array<std::vector<ResBlock<T>>, 3> stages;
  Linear<T> patch_proj;
  BasicVar<T> pos;  // [G*G, c2]
  std::array<vssm::MixerParams<T>, 3> refine;
  std::array<NormParams<T>, 3> head_norm;
  std::array<Linear<T>, 3> head_proj;
  std::vector<std::size_t> rows;
  std::size_t resolution = 0, patch = 0, d_w = 0, head_side = 1;
  vssm::ScanOptions scan;

  static EncoderParams make(ParameterSet<T>& ps, const PipelineConfig& cfg, Rng& rng) {
    EncoderParams e;
    e.resolution = cfg.resolution;
    e.patch = cfg.patch;
    e.d_w = cfg.d_w;
    e.head_side = cfg.h3_side();
    e.rows = cfg.head_rows();
    e.scan = {cfg.zoh, cfg.scan_algo};
    const auto& ch = cfg.enc_channels;
    e.stem = Conv<T>::make(ps, "enc.stem", 3, cfg.enc_stem, 3, rng, 1, 1.4142135623730951);
    std::size_t prev = cfg.enc_stem;
    for (std::size_t s = 0; s < 3; ++s) {
      const std::string name = "enc.stage" + std::to_string(s + 1);
      e.down[s] = Conv<T>::make(ps, name + ".down", prev, ch[s], 3, rng, 1, 1.4142135623730951);
      for (std::size_t b = 0; b < 2; ++b) {
        e.stages[s].push_back(ResBlock<T>::make(ps, name + ".block" + std::to_string(b), ch[s], rng));
      }
      prev = ch[s];
    }
    const std::size_t grid = cfg.resolution / cfg.patch;
    e.patch_proj = Linear<T>::make(ps, "enc.patch.proj", 3 * cfg.patch * cfg.patch, ch[1], rng);
    e.pos = ps.add("enc.patch.pos", BasicTensor<T>::randn(Shape{grid * grid, ch[1]}, rng, 0.02));
    const auto kind = mixer_kind(cfg);
    for (std::size_t s = 0; s < 3; ++s) {
      const std::string name = "enc.refine" + std::to_string(s + 1);
      e.refine[s] = vssm::MixerParams<T>::make(ps, name, kind, ch[s], ch[s] * cfg.expand, cfg.states,
                                               scan_mode_2d(cfg), cfg.shared_routes, rng);
    }
    for (std::size_t s = 0; s < 3; ++s) {
      const std::string name = "enc.head" + std::to_string(s + 1);
      e.head_norm[s] = NormParams<T>::make(ps, name + ".norm", ch[s]);
      const std::size_t grid = cfg.h3_side() * cfg.h3_side();
      e.head_proj[s] = Linear<T>::make(ps, name + ".proj", ch[s] * grid, e.rows[s] * cfg.d_w, rng, 0.25);
    }
    return e;
  }

  /// Adds a per-row latent offset (e.g. the generator's mean w) to the head
  /// biases so training starts from the average latent.
  void set_latent_offset(const BasicTensor<T>& w_avg) {
    std::size_t row = 0;
    for (std::size_t s = 0; s < 3; ++s) {
      auto& b = head_proj[s].bias.mutable_value();
      for (std::size_t r = 0; r < rows[s]; ++r, ++row) {
        for (std::size_t i = 0; i < d_w; ++i) b[r * d_w + i] = w_avg[row * d_w + i];
      }
    }
  }
};

/// Three residual stages at strides 4, 8 and 16.
template <typename T>
std::array<BasicVar<T>, 3> backbone(const BasicVar<T>& x, const EncoderParams<T>& e) {
  if (x.shape() != Shape{3, e.resolution, e.resolution}) {
    throw ShapeError("backbone: expected [3x" + std::to_string(e.resolution) + "x" + std::to_string(e.resolution) +
                     "], got " + shape_str(x.shape()));
  }
  auto h = ops::avg_pool2d(ops::leaky_relu(conv(x, e.stem)), 2, 2);
  std::array<BasicVar<T>, 3> out;
  for (std::size_t s = 0; s < 3; ++s) {
    h = ops::avg_pool2d(ops::leaky_relu(conv(h, e.down[s])), 2, 2);
    for (const auto& b : e.stages[s]) h = res_block(h, b);
    out[s] = h;
  }
  return out;
}

/// Patch tokens with positional table, laid out like H2.
template <typename T>
BasicVar<T> patch_embed(const BasicVar<T>& x, const EncoderParams<T>& e) {
  if (e.patch == 0 || x.dim(1) % e.patch != 0 || x.dim(2) % e.patch != 0) {
    throw ConfigError("patch_embed: patch size " + std::to_string(e.patch) + " does not divide " +
                      shape_str(x.shape()));
  }
  auto tokens = ops::linear(ops::patchify(x, e.patch), e.patch_proj.weight, e.patch_proj.bias);
  const std::size_t grid = x.dim(1) / e.patch;
  return ops::from_sequence(ops::add(tokens, e.pos), grid, x.dim(2) / e.patch);
}

template <typename T>
struct Encoded {
  BasicVar<T> w_prime;  // [L_g, d_w]
  BasicVar<T> h3_hat;   // refined stride-16 features
};

/// LN over channels, average-pool to a side x side grid, flatten, linear.
template <typename T>
BasicVar<T> head(const BasicVar<T>& f, const NormParams<T>& norm, const Linear<T>& proj, std::size_t rows,
                 std::size_t d_w, std::size_t side) {
  auto normed = ops::from_sequence(ops::layer_norm(ops::to_sequence(f), norm.gamma, norm.beta), f.dim(1), f.dim(2));
  auto pooled = ops::avg_pool2d(normed, f.dim(1) / side, f.dim(2) / side);
  auto out = ops::linear(ops::reshape(pooled, Shape{1, pooled.size()}), proj.weight, proj.bias);
  return ops::reshape(out, Shape{rows, d_w});
}

/// x -> (w', H3_hat). Heads 1..3 (from H1..H3) give coarse, middle and fine rows.
template <typename T>
Encoded<T> encode(const BasicVar<T>& x, const EncoderParams<T>& e) {
  auto h = backbone(x, e);
  h[1] = ops::add(h[1], patch_embed(x, e));
  std::array<BasicVar<T>, 3> refined;
  for (std::size_t s = 0; s < 3; ++s) refined[s] = vssm::mixer_forward(h[s], e.refine[s], e.scan);
  std::vector<BasicVar<T>> parts;
  for (std::size_t s = 0; s < 3; ++s) {
    parts.push_back(head(refined[s], e.head_norm[s], e.head_proj[s], e.rows[s], e.d_w, e.head_side));
  }
  return {ops::concat(parts), refined[2]};
}

}  // namespace mambastyle::encoder
