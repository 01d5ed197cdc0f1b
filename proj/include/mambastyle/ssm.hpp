#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mambastyle/autodiff.hpp"
#include "mambastyle/errors.hpp"
#include "mambastyle/ops.hpp"
#include "mambastyle/params.hpp"
#include "mambastyle/tensor.hpp"

namespace mambastyle::ssm {

/// How B is discretised. Both modes use Abar = exp(delta * A).
enum class ZohMode {
  exact,       // Bbar = (delta*A)^-1 (exp(delta*A) - 1) * delta * B
  simplified,  // Bbar = delta * B
};

enum class ScanAlgo { sequential, parallel };

namespace detail {

/// expm1(z) / z, continuous at 0.
inline double phi(double z) {
  if (std::abs(z) < 1e-4) {
    return 1.0 + z / 2.0 + z * z / 6.0;
  }
  return std::expm1(z) / z;
}

/// d/dz [expm1(z) / z].
inline double phi_prime(double z) {
  if (std::abs(z) < 1e-3) {
    return 0.5 + z / 3.0 + z * z / 8.0;
  }
  return (z * std::exp(z) - std::expm1(z)) / (z * z);
}

/// Bbar / B for one (delta, a) pair.
inline double bbar_factor(double delta, double a, ZohMode mode) {
  return mode == ZohMode::simplified ? delta : delta * phi(delta * a);
}

}  // namespace detail

/// Elementwise zero-order hold for a diagonal system. All three tensors share
/// one shape. Requires a < 0 and delta >= 0 (delta = 0 is the identity step).
template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> zoh_discretize(const BasicTensor<T>& a_diag, const BasicTensor<T>& b,
                                                         const BasicTensor<T>& delta, ZohMode mode) {
  if (a_diag.shape() != b.shape() || a_diag.shape() != delta.shape()) {
    throw ShapeError("zoh_discretize: shapes must match");
  }
  auto a_bar = BasicTensor<T>::uninitialized(a_diag.shape());
  auto b_bar = BasicTensor<T>::uninitialized(a_diag.shape());
  for (std::size_t i = 0; i < a_diag.size(); ++i) {
    const double a = a_diag[i], d = delta[i];
    if (!(d >= 0.0)) {
      throw DomainError("zoh_discretize: step size must be non-negative, got " + std::to_string(d));
    }
    if (!(a < 0.0)) {
      throw DomainError("zoh_discretize: state matrix must be strictly negative, got " + std::to_string(a));
    }
    a_bar[i] = static_cast<T>(std::exp(d * a));
    b_bar[i] = static_cast<T>(detail::bbar_factor(d, a, mode) * static_cast<double>(b[i]));
  }
  return {std::move(a_bar), std::move(b_bar)};
}

/// Discretised per-step coefficients for L steps, D channels, N states.
template <typename T>
struct DiscreteStep {
  BasicTensor<T> a_bar;    // [L, D, N]
  BasicTensor<T> b_bar_x;  // [L, D, N], Bbar_t * x_t premultiplied

  [[nodiscard]] std::size_t length() const { return a_bar.dim(0); }
  [[nodiscard]] std::size_t channels() const { return a_bar.dim(1); }
  [[nodiscard]] std::size_t states() const { return a_bar.dim(2); }
};

/// Builds the per-step coefficients from x[L,D], delta[L,D], A[D,N], B[L,N].
template <typename T>
DiscreteStep<T> discretize(const BasicTensor<T>& x, const BasicTensor<T>& delta, const BasicTensor<T>& a,
                           const BasicTensor<T>& b, ZohMode mode) {
  const std::size_t len = x.dim(0), ch = x.dim(1), ns = a.dim(1);
  if (delta.shape() != x.shape() || a.dim(0) != ch || b.dim(0) != len || b.dim(1) != ns) {
    throw ShapeError("discretize: x " + shape_str(x.shape()) + ", delta " + shape_str(delta.shape()) + ", A " +
                     shape_str(a.shape()) + ", B " + shape_str(b.shape()));
  }
  DiscreteStep<T> s{BasicTensor<T>::uninitialized(Shape{len, ch, ns}), BasicTensor<T>::uninitialized(Shape{len, ch, ns})};
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t c = 0; c < ch; ++c) {
      const double dt = delta[t * ch + c];
      if (!(dt >= 0.0)) {
        throw DomainError("discretize: negative step size");
      }
      const double xt = x[t * ch + c];
      for (std::size_t n = 0; n < ns; ++n) {
        const double av = a[c * ns + n];
        const std::size_t k = (t * ch + c) * ns + n;
        s.a_bar[k] = static_cast<T>(std::exp(dt * av));
        s.b_bar_x[k] = static_cast<T>(detail::bbar_factor(dt, av, mode) * static_cast<double>(b[t * ns + n]) * xt);
      }
    }
  }
  return s;
}

/// Hidden states h[L,D,N] by the left-to-right recurrence, h_0 = 0.
template <typename T>
BasicTensor<T> scan_states_sequential(const DiscreteStep<T>& s) {
  const std::size_t len = s.length(), lanes = s.channels() * s.states();
  auto h = BasicTensor<T>::uninitialized(s.a_bar.shape());
  std::vector<T> state(lanes, T{0});
  for (std::size_t t = 0; t < len; ++t) {
    const T* a = s.a_bar.data().data() + t * lanes;
    const T* bx = s.b_bar_x.data().data() + t * lanes;
    T* out = h.data().data() + t * lanes;
    for (std::size_t k = 0; k < lanes; ++k) {
      state[k] = a[k] * state[k] + bx[k];
      out[k] = state[k];
    }
  }
  count_macs(len * lanes);
  return h;
}

/// Element of the recurrence monoid: h -> a * h + b.
template <typename T>
struct ScanPair {
  T a;
  T b;
};

/// Composition "p then q"; associative with identity {1, 0}.
template <typename T>
ScanPair<T> combine(const ScanPair<T>& p, const ScanPair<T>& q) {
  return {p.a * q.a, q.a * p.b + q.b};
}

/// Same states as scan_states_sequential via a work-efficient (Blelloch)
/// up-sweep/down-sweep over a fixed power-of-two tree; depth O(log L).
template <typename T>
BasicTensor<T> scan_states_parallel(const DiscreteStep<T>& s) {
  const std::size_t len = s.length(), lanes = s.channels() * s.states();
  std::size_t padded = 1;
  while (padded < len) {
    padded <<= 1;
  }
  std::vector<T> a(padded * lanes, T{1}), b(padded * lanes, T{0});
  std::copy(s.a_bar.data().begin(), s.a_bar.data().end(), a.begin());
  std::copy(s.b_bar_x.data().begin(), s.b_bar_x.data().end(), b.begin());

  auto apply = [&](std::size_t left, std::size_t right) {  // right <- left then right
    T* al = a.data() + left * lanes;
    T* bl = b.data() + left * lanes;
    T* ar = a.data() + right * lanes;
    T* br = b.data() + right * lanes;
    for (std::size_t k = 0; k < lanes; ++k) {
      br[k] = ar[k] * bl[k] + br[k];
      ar[k] = al[k] * ar[k];
    }
  };

  for (std::size_t stride = 1; stride < padded; stride <<= 1) {
    for (std::size_t i = 2 * stride - 1; i < padded; i += 2 * stride) {
      apply(i - stride, i);
    }
  }
  std::fill_n(a.data() + (padded - 1) * lanes, lanes, T{1});
  std::fill_n(b.data() + (padded - 1) * lanes, lanes, T{0});
  std::vector<T> ta(lanes), tb(lanes);
  for (std::size_t stride = padded >> 1; stride >= 1; stride >>= 1) {
    for (std::size_t i = 2 * stride - 1; i < padded; i += 2 * stride) {
      const std::size_t l = i - stride;
      T* al = a.data() + l * lanes;
      T* bl = b.data() + l * lanes;
      T* ar = a.data() + i * lanes;
      T* br = b.data() + i * lanes;
      std::copy_n(al, lanes, ta.data());
      std::copy_n(bl, lanes, tb.data());
      std::copy_n(ar, lanes, al);
      std::copy_n(br, lanes, bl);
      for (std::size_t k = 0; k < lanes; ++k) {  // parent prefix then left subtree
        br[k] = ta[k] * br[k] + tb[k];
        ar[k] = ar[k] * ta[k];
      }
    }
    if (stride == 1) {
      break;
    }
  }

  // exclusive prefix then own element gives the inclusive state
  BasicTensor<T> h(s.a_bar.shape());
  for (std::size_t t = 0; t < len; ++t) {
    const T* ex = b.data() + t * lanes;
    const T* at = s.a_bar.data().data() + t * lanes;
    const T* bt = s.b_bar_x.data().data() + t * lanes;
    T* out = h.data().data() + t * lanes;
    for (std::size_t k = 0; k < lanes; ++k) {
      out[k] = at[k] * ex[k] + bt[k];
    }
  }
  count_macs(len * lanes);
  return h;
}

/// y[t,c] = sum_n C[t,n] h[t,c,n] + D[c] x[t,c].
template <typename T>
BasicTensor<T> readout(const BasicTensor<T>& h, const BasicTensor<T>& x, const BasicTensor<T>& c_t,
                       const BasicTensor<T>& d_skip) {
  const std::size_t len = h.dim(0), ch = h.dim(1), ns = h.dim(2);
  if (x.dim(0) != len || x.dim(1) != ch || c_t.dim(0) != len || c_t.dim(1) != ns || d_skip.size() != ch) {
    throw ShapeError("scan: length/channel mismatch between steps " + shape_str(h.shape()) + ", x " +
                     shape_str(x.shape()) + ", C " + shape_str(c_t.shape()));
  }
  auto y = BasicTensor<T>::uninitialized(Shape{len, ch});
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t c = 0; c < ch; ++c) {
      T acc = d_skip[c] * x[t * ch + c];
      const T* hs = h.data().data() + (t * ch + c) * ns;
      const T* cs = c_t.data().data() + t * ns;
      for (std::size_t n = 0; n < ns; ++n) {
        acc += cs[n] * hs[n];
      }
      y[t * ch + c] = acc;
    }
  }
  count_macs(len * ch * ns);
  return y;
}

template <typename T>
void check_scan_inputs(const DiscreteStep<T>& s, const BasicTensor<T>& x) {
  if (s.b_bar_x.shape() != s.a_bar.shape() || x.rank() != 2 || x.dim(0) != s.length() || x.dim(1) != s.channels()) {
    throw ShapeError("scan: steps " + shape_str(s.a_bar.shape()) + " vs x " + shape_str(x.shape()));
  }
}

template <typename T>
BasicTensor<T> scan_sequential(const DiscreteStep<T>& s, const BasicTensor<T>& x, const BasicTensor<T>& c_t,
                               const BasicTensor<T>& d_skip) {
  check_scan_inputs(s, x);
  return readout(scan_states_sequential(s), x, c_t, d_skip);
}

template <typename T>
BasicTensor<T> scan_parallel(const DiscreteStep<T>& s, const BasicTensor<T>& x, const BasicTensor<T>& c_t,
                             const BasicTensor<T>& d_skip) {
  check_scan_inputs(s, x);
  return readout(scan_states_parallel(s), x, c_t, d_skip);
}

/// Fused differentiable selective scan.
///   x[L,D], delta[L,D] (> 0), a[D,N] (< 0), b[L,N], c[L,N], d_skip[D] -> y[L,D]
/// Backward runs the adjoint recurrence right-to-left over stored states.
template <typename T>
BasicVar<T> selective_scan(const BasicVar<T>& x, const BasicVar<T>& delta, const BasicVar<T>& a,
                           const BasicVar<T>& b, const BasicVar<T>& c, const BasicVar<T>& d_skip,
                           ZohMode mode = ZohMode::simplified, ScanAlgo algo = ScanAlgo::sequential) {
  const std::size_t len = x.dim(0), ch = x.dim(1), ns = a.dim(1);
  if (c.shape() != b.shape()) {
    throw ShapeError("selective_scan: B and C shapes differ");
  }
  auto steps = discretize(x.value(), delta.value(), a.value(), b.value(), mode);
  auto h = std::make_shared<BasicTensor<T>>(algo == ScanAlgo::parallel ? scan_states_parallel(steps)
                                                                       : scan_states_sequential(steps));
  auto abar_t = std::make_shared<BasicTensor<T>>(std::move(steps.a_bar));
  auto y = readout(*h, x.value(), c.value(), d_skip.value());
  count_macs(len * ch * ns);  // Bbar * x

  return make_result<T>(
      "selective_scan", std::move(y), {x, delta, a, b, c, d_skip},
      [x, delta, a, b, c, d_skip, h, abar_t, mode, len, ch, ns](const BasicTensor<T>& gy) {
        const auto& xv = x.value();
        const auto& dv = delta.value();
        const auto& av = a.value();
        const auto& bv = b.value();
        const auto& cv = c.value();
        const auto& dsk = d_skip.value();
        auto gx = BasicTensor<T>::uninitialized(x.shape());
        auto gdelta = BasicTensor<T>::uninitialized(delta.shape());
        std::vector<double> ga(ch * ns, 0.0), gb(len * ns, 0.0), gc(len * ns, 0.0), gd(ch, 0.0);
        std::vector<double> gh(ch * ns, 0.0);  // adjoint of h_t carried right-to-left
        for (std::size_t tt = len; tt-- > 0;) {
          for (std::size_t k = 0; k < ch; ++k) {
            const double g = gy[tt * ch + k];
            const double xt = xv[tt * ch + k];
            const double dt = dv[tt * ch + k];
            gd[k] += g * xt;
            double gxt = g * static_cast<double>(dsk[k]);
            double gdt = 0.0;
            for (std::size_t n = 0; n < ns; ++n) {
              const std::size_t lane = k * ns + n;
              const double hv = (*h)[tt * ch * ns + lane];
              const double hprev = tt > 0 ? static_cast<double>((*h)[(tt - 1) * ch * ns + lane]) : 0.0;
              gc[tt * ns + n] += g * hv;
              const double adj = gh[lane] + g * static_cast<double>(cv[tt * ns + n]);
              const double am = av[lane];
              const double abar = (*abar_t)[tt * ch * ns + lane];
              const double bn = bv[tt * ns + n];
              // h_t = abar * h_{t-1} + F(dt, a) * B * x
              const double g_abar = adj * hprev;
              gdt += g_abar * abar * am;
              ga[lane] += g_abar * abar * dt;
              const double factor = detail::bbar_factor(dt, am, mode);
              const double g_bbx = adj * xt;  // d/d(F*B)
              gxt += adj * factor * bn;
              gb[tt * ns + n] += g_bbx * factor;
              if (mode == ZohMode::simplified) {
                gdt += g_bbx * bn;
              } else {
                gdt += g_bbx * bn * abar;
                ga[lane] += g_bbx * bn * dt * dt * detail::phi_prime(dt * am);
              }
              gh[lane] = adj * abar;
            }
            gx[tt * ch + k] = static_cast<T>(gxt);
            gdelta[tt * ch + k] = static_cast<T>(gdt);
          }
        }
        auto pack = [](const std::vector<double>& v, const Shape& shape) {
          auto t = BasicTensor<T>::uninitialized(shape);
          for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<T>(v[i]);
          return t;
        };
        ops::detail::accum(x, std::move(gx));
        ops::detail::accum(delta, std::move(gdelta));
        ops::detail::accum(a, pack(ga, a.shape()));
        ops::detail::accum(b, pack(gb, b.shape()));
        ops::detail::accum(c, pack(gc, c.shape()));
        ops::detail::accum(d_skip, pack(gd, d_skip.shape()));
      });
}

/// Selective state-space parameters for D channels with N states each.
template <typename T>
struct SsmParams {
  BasicVar<T> a_log;       // [D, N], A = -exp(a_log)
  BasicVar<T> b_proj;      // [N, D]
  BasicVar<T> c_proj;      // [N, D]
  BasicVar<T> delta_proj;  // [1, D]
  BasicVar<T> delta_bias;  // [D]
  BasicVar<T> d_skip;      // [D]

  [[nodiscard]] std::size_t channels() const { return a_log.dim(0); }
  [[nodiscard]] std::size_t states() const { return a_log.dim(1); }

  /// a_log = log(1..N) per channel; softplus(delta_bias) log-uniform in
  /// [1e-3, 1e-1]; D = 1.
  static SsmParams make(ParameterSet<T>& ps, const std::string& name, std::size_t channels, std::size_t states,
                        Rng& rng) {
    if (channels == 0 || states == 0) {
      throw ConfigError("SsmParams: channels and states must be >= 1");
    }
    BasicTensor<T> a_log(Shape{channels, states});
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t n = 0; n < states; ++n) {
        a_log[c * states + n] = static_cast<T>(std::log(static_cast<double>(n + 1)));
      }
    }
    BasicTensor<T> bias(Shape{channels});
    for (auto& v : bias.data()) {
      const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
      v = static_cast<T>(std::log(std::expm1(dt)));
    }
    const double s = 1.0 / std::sqrt(static_cast<double>(channels));
    SsmParams p;
    p.a_log = ps.add(name + ".a_log", std::move(a_log));
    p.b_proj = ps.add(name + ".b_proj", BasicTensor<T>::randn(Shape{states, channels}, rng, s));
    p.c_proj = ps.add(name + ".c_proj", BasicTensor<T>::randn(Shape{states, channels}, rng, s));
    p.delta_proj = ps.add(name + ".delta_proj", BasicTensor<T>::randn(Shape{1, channels}, rng, 0.1 * s));
    p.delta_bias = ps.add(name + ".delta_bias", std::move(bias));
    p.d_skip = ps.add(name + ".d_skip", BasicTensor<T>::full(Shape{channels}, T{1}));
    return p;
  }
};

template <typename T>
struct Selection {
  BasicVar<T> b;      // [L, N]
  BasicVar<T> c;      // [L, N]
  BasicVar<T> delta;  // [L, D]
};

/// Input-dependent B_t, C_t and softplus-positive delta_t for x[L,D].
template <typename T>
Selection<T> select(const BasicVar<T>& x, const SsmParams<T>& p) {
  if (x.shape().size() != 2 || x.dim(1) != p.channels()) {
    throw ShapeError("s6: input " + shape_str(x.shape()) + " vs " + std::to_string(p.channels()) + " channels");
  }
  Selection<T> s;
  s.b = ops::matmul(x, ops::transpose(p.b_proj));
  s.c = ops::matmul(x, ops::transpose(p.c_proj));
  auto r = ops::matmul(x, ops::transpose(p.delta_proj));  // [L, 1]
  auto spread = ops::matmul(r, constant(BasicTensor<T>::full(Shape{1, p.channels()}, T{1})));
  s.delta = ops::softplus(ops::add(spread, p.delta_bias));
  return s;
}

/// S6 over one sequence x[L,D] -> y[L,D].
template <typename T>
BasicVar<T> s6_forward(const BasicVar<T>& x, const SsmParams<T>& p, ZohMode mode = ZohMode::simplified,
                       ScanAlgo algo = ScanAlgo::sequential) {
  auto sel = select(x, p);
  auto a = ops::scale(ops::exp(p.a_log), -1.0);
  return selective_scan(x, sel.delta, a, sel.b, sel.c, p.d_skip, mode, algo);
}

}  // namespace mambastyle::ssm
