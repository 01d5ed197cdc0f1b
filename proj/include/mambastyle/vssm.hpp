#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mambastyle/ops.hpp"
#include "mambastyle/params.hpp"
#include "mambastyle/ssm.hpp"

namespace mambastyle::vssm {

/// The four SS2D traversal orders of an HxW grid.
enum class Route { LR, RL, TB, BT };

inline constexpr std::array<Route, 4> kRoutes = {Route::LR, Route::RL, Route::TB, Route::BT};

inline const char* route_name(Route r) {
  switch (r) {
    case Route::LR: return "LR";
    case Route::RL: return "RL";
    case Route::TB: return "TB";
    case Route::BT: return "BT";
  }
  return "?";
}

/// perm[k] = row-major site index visited at sequence position k.
inline std::vector<std::size_t> route_permutation(Route r, std::size_t h, std::size_t w) {
  std::vector<std::size_t> perm(h * w);
  if (r == Route::LR || r == Route::RL) {
    for (std::size_t k = 0; k < h * w; ++k) perm[k] = k;
  } else {
    std::size_t k = 0;
    for (std::size_t j = 0; j < w; ++j) {
      for (std::size_t i = 0; i < h; ++i) perm[k++] = i * w + j;
    }
  }
  if (r == Route::RL || r == Route::BT) {
    std::reverse(perm.begin(), perm.end());
  }
  return perm;
}

inline std::vector<std::size_t> invert_permutation(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t k = 0; k < perm.size(); ++k) inv[perm[k]] = k;
  return inv;
}

/// A route's sequence of f[C,H,W] as [H*W, C].
template <typename T>
BasicVar<T> expand_route(const BasicVar<T>& f, Route r) {
  return ops::gather_rows(ops::to_sequence(f), route_permutation(r, f.dim(1), f.dim(2)));
}

/// Inverse of expand_route: sequence [H*W, C] back onto the grid.
template <typename T>
BasicVar<T> merge_route(const BasicVar<T>& seq, Route r, std::size_t h, std::size_t w) {
  return ops::from_sequence(ops::gather_rows(seq, invert_permutation(route_permutation(r, h, w))), h, w);
}

/// All four route sequences in LR, RL, TB, BT order.
template <typename T>
std::array<BasicVar<T>, 4> ss2d_expand(const BasicVar<T>& f) {
  if (f.shape().size() != 3) {
    throw ShapeError("ss2d_expand: expected [C,H,W], got " + shape_str(f.shape()));
  }
  return {expand_route(f, Route::LR), expand_route(f, Route::RL), expand_route(f, Route::TB),
          expand_route(f, Route::BT)};
}

struct ScanOptions {
  ssm::ZohMode zoh = ssm::ZohMode::simplified;
  ssm::ScanAlgo algo = ssm::ScanAlgo::sequential;
};

/// S6 along each route, mapped back and summed LR+RL+TB+BT. `routes` holds
/// four parameter sets, or one shared by every route.
template <typename T>
BasicVar<T> ss2d(const BasicVar<T>& f, const std::vector<ssm::SsmParams<T>>& routes, const ScanOptions& opt = {}) {
  if (routes.size() != 4 && routes.size() != 1) {
    throw ConfigError("ss2d: need 4 route parameter sets or 1 shared set");
  }
  if (f.shape().size() != 3 || f.dim(0) != routes[0].channels()) {
    throw ShapeError("ss2d: feature map " + shape_str(f.shape()) + " vs " + std::to_string(routes[0].channels()) +
                     " channels");
  }
  const std::size_t h = f.dim(1), w = f.dim(2);
  auto seq = ops::to_sequence(f);
  BasicVar<T> total;
  for (std::size_t i = 0; i < 4; ++i) {
    const Route r = kRoutes[i];
    const auto& p = routes.size() == 4 ? routes[i] : routes[0];
    auto y = ssm::s6_forward(ops::gather_rows(seq, route_permutation(r, h, w)), p, opt.zoh, opt.algo);
    auto back = ops::gather_rows(y, invert_permutation(route_permutation(r, h, w)));
    total = total.defined() ? ops::add(total, back) : back;
  }
  return ops::from_sequence(total, h, w);
}

/// What the selective-scan slot inside a block does.
enum class ScanMode {
  ss2d,    // four-route 2D scan
  seq1d,   // one S6 over a 1xL map, 1x3 depthwise kernel
  single,  // one row-major S6 over a 2D map, 3x3 depthwise kernel
};

template <typename T>
struct VssmBlockParams {
  NormParams<T> norm_in;
  Linear<T> in_proj;       // C -> D
  BasicVar<T> dw_weight;   // [D, KH, KW]
  BasicVar<T> dw_bias;     // [D]
  std::vector<ssm::SsmParams<T>> scan;
  NormParams<T> norm_out;  // over D
  Linear<T> gate_proj;     // C -> D
  Linear<T> out_proj;      // D -> C
  ScanMode mode = ScanMode::ss2d;

  [[nodiscard]] std::size_t channels() const { return in_proj.weight.dim(0); }
  [[nodiscard]] std::size_t inner() const { return in_proj.weight.dim(1); }

  static VssmBlockParams make(ParameterSet<T>& ps, const std::string& name, std::size_t channels,
                              std::size_t inner, std::size_t states, ScanMode mode, bool shared_routes, Rng& rng) {
    VssmBlockParams p;
    p.mode = mode;
    p.norm_in = NormParams<T>::make(ps, name + ".norm_in", channels);
    p.in_proj = Linear<T>::make(ps, name + ".in_proj", channels, inner, rng);
    const std::size_t kh = mode == ScanMode::seq1d ? 1 : 3;
    p.dw_weight = ps.add(name + ".dw.weight", init::fan_in_normal<T>(Shape{inner, kh, 3}, kh * 3, rng));
    p.dw_bias = ps.add(name + ".dw.bias", BasicTensor<T>(Shape{inner}));
    const std::size_t n = (mode == ScanMode::ss2d && !shared_routes) ? 4 : 1;
    for (std::size_t i = 0; i < n; ++i) {
      const std::string suffix = n == 4 ? route_name(kRoutes[i]) : "shared";
      p.scan.push_back(ssm::SsmParams<T>::make(ps, name + ".ssm." + suffix, inner, states, rng));
    }
    p.norm_out = NormParams<T>::make(ps, name + ".norm_out", inner);
    p.gate_proj = Linear<T>::make(ps, name + ".gate_proj", channels, inner, rng);
    p.out_proj = Linear<T>::make(ps, name + ".out_proj", inner, channels, rng, 0.5);
    return p;
  }
};

/// f + OutProj( Norm(Scan(SiLU(DWConv(InProj(Norm(f)))))) * SiLU(GateProj(Norm(f))) )
template <typename T>
BasicVar<T> vssm_block(const BasicVar<T>& f, const VssmBlockParams<T>& p, const ScanOptions& opt = {}) {
  if (f.shape().size() != 3 || f.dim(0) != p.channels()) {
    throw ShapeError("vssm_block: feature map " + shape_str(f.shape()) + " vs " + std::to_string(p.channels()) +
                     " channels");
  }
  if (p.mode == ScanMode::seq1d && f.dim(1) != 1) {
    throw ShapeError("vssm_block: 1D scan expects a [C,1,L] map");
  }
  const std::size_t h = f.dim(1), w = f.dim(2);
  auto normed = ops::layer_norm(ops::to_sequence(f), p.norm_in.gamma, p.norm_in.beta);
  auto u = ops::linear(normed, p.in_proj.weight, p.in_proj.bias);
  auto map = ops::silu(ops::depthwise_conv2d(ops::from_sequence(u, h, w), p.dw_weight, p.dw_bias));
  BasicVar<T> scanned;
  switch (p.mode) {
    case ScanMode::ss2d: scanned = ops::to_sequence(ss2d(map, p.scan, opt)); break;
    case ScanMode::seq1d:
    case ScanMode::single: scanned = ssm::s6_forward(ops::to_sequence(map), p.scan[0], opt.zoh, opt.algo); break;
  }
  auto branch = ops::layer_norm(scanned, p.norm_out.gamma, p.norm_out.beta);
  auto gate = ops::silu(ops::linear(normed, p.gate_proj.weight, p.gate_proj.bias));
  auto out = ops::linear(ops::mul(branch, gate), p.out_proj.weight, p.out_proj.bias);
  return ops::add(f, ops::from_sequence(out, h, w));
}

// ---------------------------------------------------------------------------
// Single-head transformer block, the drop-in replacement for ablations.

template <typename T>
struct AttentionBlockParams {
  NormParams<T> norm1;
  Linear<T> query, key, value, proj;
  NormParams<T> norm2;
  Linear<T> mlp_in, mlp_out;

  static AttentionBlockParams make(ParameterSet<T>& ps, const std::string& name, std::size_t c, Rng& rng) {
    AttentionBlockParams p;
    p.norm1 = NormParams<T>::make(ps, name + ".norm1", c);
    p.query = Linear<T>::make(ps, name + ".query", c, c, rng);
    p.key = Linear<T>::make(ps, name + ".key", c, c, rng);
    p.value = Linear<T>::make(ps, name + ".value", c, c, rng);
    p.proj = Linear<T>::make(ps, name + ".proj", c, c, rng, 0.5);
    p.norm2 = NormParams<T>::make(ps, name + ".norm2", c);
    p.mlp_in = Linear<T>::make(ps, name + ".mlp_in", c, 2 * c, rng);
    p.mlp_out = Linear<T>::make(ps, name + ".mlp_out", 2 * c, c, rng, 0.5);
    return p;
  }
};

template <typename T>
BasicVar<T> attention_block(const BasicVar<T>& f, const AttentionBlockParams<T>& p) {
  const std::size_t h = f.dim(1), w = f.dim(2), c = f.dim(0);
  auto seq = ops::to_sequence(f);
  auto n1 = ops::layer_norm(seq, p.norm1.gamma, p.norm1.beta);
  auto q = ops::linear(n1, p.query.weight, p.query.bias);
  auto k = ops::linear(n1, p.key.weight, p.key.bias);
  auto v = ops::linear(n1, p.value.weight, p.value.bias);
  auto scores = ops::scale(ops::matmul(q, ops::transpose(k)), 1.0 / std::sqrt(static_cast<double>(c)));
  auto attended = ops::matmul(ops::softmax_rows(scores), v);
  auto x = ops::add(seq, ops::linear(attended, p.proj.weight, p.proj.bias));
  auto n2 = ops::layer_norm(x, p.norm2.gamma, p.norm2.beta);
  auto hidden = ops::silu(ops::linear(n2, p.mlp_in.weight, p.mlp_in.bias));
  x = ops::add(x, ops::linear(hidden, p.mlp_out.weight, p.mlp_out.bias));
  return ops::from_sequence(x, h, w);
}

// ---------------------------------------------------------------------------

enum class MixerKind { vssm, attention, identity };

/// Refinement block slot: VSSM normally, a transformer block or nothing
/// under ablation.
template <typename T>
struct MixerParams {
  MixerKind kind = MixerKind::vssm;
  VssmBlockParams<T> vssm;
  AttentionBlockParams<T> attention;

  static MixerParams make(ParameterSet<T>& ps, const std::string& name, MixerKind kind, std::size_t channels,
                          std::size_t inner, std::size_t states, ScanMode mode, bool shared_routes, Rng& rng) {
    MixerParams p;
    p.kind = kind;
    if (kind == MixerKind::vssm) {
      p.vssm = VssmBlockParams<T>::make(ps, name, channels, inner, states, mode, shared_routes, rng);
    } else if (kind == MixerKind::attention) {
      p.attention = AttentionBlockParams<T>::make(ps, name, channels, rng);
    }
    return p;
  }
};

template <typename T>
BasicVar<T> mixer_forward(const BasicVar<T>& f, const MixerParams<T>& p, const ScanOptions& opt = {}) {
  switch (p.kind) {
    case MixerKind::vssm: return vssm_block(f, p.vssm, opt);
    case MixerKind::attention: return attention_block(f, p.attention);
    case MixerKind::identity: return f;
  }
  return f;
}

}  // namespace mambastyle::vssm
