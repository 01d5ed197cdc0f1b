#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "mambastyle/config.hpp"
#include "mambastyle/encoder.hpp"
#include "mambastyle/ops.hpp"
#include "mambastyle/params.hpp"
#include "mambastyle/ssm.hpp"
#include "mambastyle/stylegen.hpp"
#include "mambastyle/vssm.hpp"

namespace mambastyle::fuser {

template <typename T>
struct Conv1dParams {
  BasicVar<T> weight;  // [O, C, 3]
  BasicVar<T> bias;    // [O]
};

template <typename T>
struct ModBlock {
  Linear<T> affine;  // flatten(d) -> C, bias 1
  BasicVar<T> kernel;
  BasicVar<T> bias;
  bool upsample = false;
};

template <typename T>
struct FuserParams {
  // direction branch
  std::vector<Conv1dParams<T>> dir_conv1d;
  ssm::SsmParams<T> dir_ssm;
  Conv<T> dir_conv2d;
  vssm::MixerParams<T> dir_refine;
  // feature branch
  std::array<Conv<T>, 2> feat;
  // fusion
  Conv<T> merge;
  vssm::MixerParams<T> merge_refine;
  std::array<ModBlock<T>, 2> modulated;
  std::size_t extra_upsamples = 0;
  Conv<T> out;

  std::size_t layers = 0, d_w = 0, side = 0, h3_channels = 0;
  vssm::ScanOptions scan;

  static FuserParams make(ParameterSet<T>& ps, const PipelineConfig& cfg, std::size_t out_channels, Rng& rng) {
    FuserParams f;
    f.layers = cfg.layers;
    f.d_w = cfg.d_w;
    f.side = cfg.h3_side();
    f.h3_channels = cfg.enc_channels[2];
    f.scan = {cfg.zoh, cfg.scan_algo};
    const std::size_t c = cfg.fuser_channels;
    const std::size_t gain_fan = 3;

    std::size_t halvings = 0;
    for (std::size_t len = cfg.d_w; len > f.side * f.side; len /= 2) ++halvings;
    const std::size_t n_conv = halvings == 0 ? 1 : halvings;
    for (std::size_t i = 0; i < n_conv; ++i) {
      const std::size_t in = i == 0 ? cfg.layers : c;
      const std::string name = "fuser.dir.conv1d." + std::to_string(i);
      f.dir_conv1d.push_back({ps.add(name + ".weight", init::fan_in_normal<T>(Shape{c, in, gain_fan}, in * gain_fan,
                                                                               rng, 1.4142135623730951)),
                              ps.add(name + ".bias", BasicTensor<T>(Shape{c}))});
    }
    f.dir_ssm = ssm::SsmParams<T>::make(ps, "fuser.dir.ssm", c, cfg.states, rng);
    f.dir_conv2d = Conv<T>::make(ps, "fuser.dir.conv2d", c, c, 3, rng, 1, 1.4142135623730951);
    const auto kind = encoder::mixer_kind(cfg);
    const auto mode = encoder::scan_mode_2d(cfg);
    f.dir_refine = vssm::MixerParams<T>::make(ps, "fuser.dir.refine", kind, c, c * cfg.expand, cfg.states, mode,
                                              cfg.shared_routes, rng);
    f.feat[0] = Conv<T>::make(ps, "fuser.feat.0", f.h3_channels, c, 3, rng, 1, 1.4142135623730951);
    f.feat[1] = Conv<T>::make(ps, "fuser.feat.1", c, c, 3, rng, 1, 1.4142135623730951);
    f.merge = Conv<T>::make(ps, "fuser.merge", 2 * c, c, 3, rng, 1, 1.4142135623730951);
    f.merge_refine = vssm::MixerParams<T>::make(ps, "fuser.merge.refine", kind, c, c * cfg.expand, cfg.states, mode,
                                                cfg.shared_routes, rng);

    std::size_t ups = 0;
    for (std::size_t r = f.side; r < cfg.layer_resolution(cfg.inject_layer); r *= 2) ++ups;
    for (std::size_t i = 0; i < 2; ++i) {
      const std::string name = "fuser.mod." + std::to_string(i);
      ModBlock<T> m;
      m.affine = Linear<T>::make(ps, name + ".affine", cfg.layers * cfg.d_w, c, rng, 1.0, 1.0);
      m.kernel = ps.add(name + ".kernel", BasicTensor<T>::randn(Shape{c, c, 3, 3}, rng));
      m.bias = ps.add(name + ".bias", BasicTensor<T>(Shape{c}));
      m.upsample = ups > 0;
      if (ups > 0) --ups;
      f.modulated[i] = m;
    }
    f.extra_upsamples = ups;
    f.out.weight = ps.add("fuser.out.weight", BasicTensor<T>(Shape{out_channels, c, 1, 1}));
    f.out.bias = ps.add("fuser.out.bias", BasicTensor<T>(Shape{out_channels}));
    return f;
  }
};

template <typename T>
BasicVar<T> conv_act(const BasicVar<T>& x, const Conv<T>& c) {
  return ops::leaky_relu(ops::conv2d(x, c.weight, c.bias, c.stride, c.pad));
}

/// d[L_g, d_w] -> H_d[C, h, w] on the H3 grid: 1D conv stack, S6 scan,
/// reshape to 2D, conv, refinement block.
template <typename T>
BasicVar<T> direction_branch(const BasicVar<T>& d, const FuserParams<T>& f) {
  if (d.shape() != Shape{f.layers, f.d_w}) {
    throw ShapeError("direction_branch: direction " + shape_str(d.shape()) + " vs [" + std::to_string(f.layers) +
                     "x" + std::to_string(f.d_w) + "]");
  }
  auto h = d;
  for (const auto& c : f.dir_conv1d) {
    h = ops::leaky_relu(ops::conv1d(h, c.weight, c.bias, 1, 1));
    if (h.dim(1) > f.side * f.side) {
      h = ops::reshape(ops::avg_pool2d(ops::reshape(h, Shape{h.dim(0), 1, h.dim(1)}), 1, 2),
                       Shape{h.dim(0), h.dim(1) / 2});
    }
  }
  auto seq = ssm::s6_forward(ops::transpose(h), f.dir_ssm, f.scan.zoh, f.scan.algo);  // [h*w, C]
  auto grid = ops::from_sequence(seq, f.side, f.side);
  return vssm::mixer_forward(conv_act(grid, f.dir_conv2d), f.dir_refine, f.scan);
}

/// (H3_hat, d) -> F_k_hat shaped like the generator's layer-k activation.
template <typename T>
BasicVar<T> fuse(const BasicVar<T>& h3_hat, const BasicVar<T>& d, const FuserParams<T>& f) {
  if (h3_hat.shape() != Shape{f.h3_channels, f.side, f.side}) {
    throw ShapeError("fuse: features " + shape_str(h3_hat.shape()) + " vs [" + std::to_string(f.h3_channels) + "x" +
                     std::to_string(f.side) + "x" + std::to_string(f.side) + "]");
  }
  auto h_d = direction_branch(d, f);
  auto h_m = conv_act(conv_act(h3_hat, f.feat[0]), f.feat[1]);
  auto x = vssm::mixer_forward(conv_act(ops::concat<T>({h_d, h_m}), f.merge), f.merge_refine, f.scan);
  auto style = ops::reshape(d, Shape{d.size()});
  for (const auto& m : f.modulated) {
    if (m.upsample) x = ops::upsample2x(x);
    x = stylegen::lrelu_gain(stylegen::mod_conv(x, style, m.affine, m.kernel, m.bias, true));
  }
  for (std::size_t i = 0; i < f.extra_upsamples; ++i) x = ops::upsample2x(x);
  return ops::conv2d(x, f.out.weight, f.out.bias);
}

}  // namespace mambastyle::fuser
