#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mambastyle/autodiff.hpp"
#include "mambastyle/blas.hpp"
#include "mambastyle/errors.hpp"
#include "mambastyle/tensor.hpp"

/// Differentiable operations. Every op takes and returns `BasicVar<T>`;
/// inputs are never modified.
namespace mambastyle::ops {

namespace detail {

template <typename T>
void accum(const BasicVar<T>& v, const BasicTensor<T>& g) {
  if (v.requires_grad()) {
    v.node()->accumulate(g);
  }
}

template <typename T>
void accum(const BasicVar<T>& v, BasicTensor<T>&& g) {
  if (v.requires_grad()) {
    v.node()->accumulate(std::move(g));
  }
}

template <typename T>
T sigmoid(T x) {
  return x >= T{0} ? T{1} / (T{1} + std::exp(-x)) : std::exp(x) / (T{1} + std::exp(x));
}

template <typename T>
T softplus(T x) {
  return x > T{20} ? x : std::log1p(std::exp(x));
}

/// True when `b` broadcasts onto `a` by the trailing-dimension rule.
inline bool suffix_of(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) {
    return false;
  }
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

template <typename T>
BasicVar<T> unary(const char* name, const BasicVar<T>& a, T (*f)(T), T (*df)(T, T)) {
  const auto& x = a.value();
  auto y = BasicTensor<T>::uninitialized(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = f(x[i]);
  }
  auto out_value = y;
  return make_result<T>(name, std::move(y), {a}, [a, df, out_value](const BasicTensor<T>& g) {
    const auto& xv = a.value();
    auto gx = BasicTensor<T>::uninitialized(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
      gx[i] = g[i] * df(xv[i], out_value[i]);
    }
    accum(a, std::move(gx));
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

enum class Elementwise { add, sub, mul, exp, softplus, silu, relu, scale };

template <typename T>
BasicVar<T> add(const BasicVar<T>& a, const BasicVar<T>& b);
template <typename T>
BasicVar<T> sub(const BasicVar<T>& a, const BasicVar<T>& b);
template <typename T>
BasicVar<T> mul(const BasicVar<T>& a, const BasicVar<T>& b);

namespace detail {

template <typename T>
BasicVar<T> binary(Elementwise op, const BasicVar<T>& a, const BasicVar<T>& b) {
  const auto& x = a.value();
  const auto& y = b.value();
  if (!suffix_of(x.shape(), y.shape())) {
    throw ShapeError("elementwise: cannot broadcast " + shape_str(y.shape()) + " onto " + shape_str(x.shape()));
  }
  const std::size_t n = x.size();
  const std::size_t m = y.size();
  auto z = BasicTensor<T>::uninitialized(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T yv = y[i % m];
    switch (op) {
      case Elementwise::add: z[i] = x[i] + yv; break;
      case Elementwise::sub: z[i] = x[i] - yv; break;
      default: z[i] = x[i] * yv; break;
    }
  }
  const char* name = op == Elementwise::add ? "add" : op == Elementwise::sub ? "sub" : "mul";
  return make_result<T>(name, std::move(z), {a, b}, [op, a, b](const BasicTensor<T>& g) {
    const auto& xv = a.value();
    const auto& yv = b.value();
    const std::size_t n = xv.size();
    const std::size_t m = yv.size();
    if (a.requires_grad()) {
      auto ga = BasicTensor<T>::uninitialized(xv.shape());
      for (std::size_t i = 0; i < n; ++i) {
        ga[i] = op == Elementwise::mul ? g[i] * yv[i % m] : g[i];
      }
      accum(a, std::move(ga));
    }
    if (b.requires_grad()) {
      std::vector<double> acc(m, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double gi = static_cast<double>(g[i]);
        switch (op) {
          case Elementwise::add: acc[i % m] += gi; break;
          case Elementwise::sub: acc[i % m] -= gi; break;
          default: acc[i % m] += gi * static_cast<double>(xv[i]); break;
        }
      }
      auto gb = BasicTensor<T>::uninitialized(yv.shape());
      for (std::size_t j = 0; j < m; ++j) {
        gb[j] = static_cast<T>(acc[j]);
      }
      accum(b, std::move(gb));
    }
  });
}

}  // namespace detail

template <typename T>
BasicVar<T> add(const BasicVar<T>& a, const BasicVar<T>& b) {
  return detail::binary(Elementwise::add, a, b);
}

template <typename T>
BasicVar<T> sub(const BasicVar<T>& a, const BasicVar<T>& b) {
  return detail::binary(Elementwise::sub, a, b);
}

template <typename T>
BasicVar<T> mul(const BasicVar<T>& a, const BasicVar<T>& b) {
  return detail::binary(Elementwise::mul, a, b);
}

template <typename T>
BasicVar<T> scale(const BasicVar<T>& a, double factor) {
  const auto& x = a.value();
  const T f = static_cast<T>(factor);
  auto y = BasicTensor<T>::uninitialized(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = x[i] * f;
  }
  return make_result<T>("scale", std::move(y), {a}, [a, f](const BasicTensor<T>& g) {
    auto gx = BasicTensor<T>::uninitialized(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) {
      gx[i] = g[i] * f;
    }
    detail::accum(a, std::move(gx));
  });
}

template <typename T>
BasicVar<T> exp(const BasicVar<T>& a) {
  return detail::unary<T>(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
BasicVar<T> softplus(const BasicVar<T>& a) {
  return detail::unary<T>(
      "softplus", a, [](T x) { return detail::softplus(x); }, [](T x, T) { return detail::sigmoid(x); });
}

template <typename T>
BasicVar<T> silu(const BasicVar<T>& a) {
  return detail::unary<T>(
      "silu", a, [](T x) { return x * detail::sigmoid(x); },
      [](T x, T) {
        const T s = detail::sigmoid(x);
        return s * (T{1} + x * (T{1} - s));
      });
}

template <typename T>
BasicVar<T> relu(const BasicVar<T>& a) {
  return detail::unary<T>(
      "relu", a, [](T x) { return x > T{0} ? x : T{0}; }, [](T x, T) { return x > T{0} ? T{1} : T{0}; });
}

/// Leaky ReLU with slope 0.2 on the negative side.
template <typename T>
BasicVar<T> leaky_relu(const BasicVar<T>& a) {
  return detail::unary<T>(
      "leaky_relu", a, [](T x) { return x > T{0} ? x : T(0.2) * x; },
      [](T x, T) { return x > T{0} ? T{1} : T(0.2); });
}

template <typename T>
BasicVar<T> abs(const BasicVar<T>& a) {
  return detail::unary<T>(
      "abs", a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > T{0} ? T{1} : (x < T{0} ? T{-1} : T{0}); });
}

template <typename T>
BasicVar<T> square(const BasicVar<T>& a) {
  return detail::unary<T>(
      "square", a, [](T x) { return x * x; }, [](T x, T) { return T{2} * x; });
}

/// Tag-dispatched entry point; `b` is required for add/sub/mul and ignored
/// otherwise, `factor` is used by `scale`.
template <typename T>
BasicVar<T> elementwise(Elementwise op, const BasicVar<T>& a, const BasicVar<T>* b = nullptr,
                        double factor = 1.0) {
  switch (op) {
    case Elementwise::add:
    case Elementwise::sub:
    case Elementwise::mul:
      if (b == nullptr) {
        throw ContractError("elementwise: binary op without second operand");
      }
      return detail::binary(op, a, *b);
    case Elementwise::exp: return exp(a);
    case Elementwise::softplus: return softplus(a);
    case Elementwise::silu: return silu(a);
    case Elementwise::relu: return relu(a);
    case Elementwise::scale: return scale(a, factor);
  }
  throw ContractError("elementwise: unknown op");
}

// ---------------------------------------------------------------------------
// Reductions (double accumulation)

template <typename T>
BasicVar<T> sum(const BasicVar<T>& a) {
  const double s = a.value().sum();
  return make_result<T>("sum", BasicTensor<T>::scalar(static_cast<T>(s)), {a}, [a](const BasicTensor<T>& g) {
    detail::accum(a, BasicTensor<T>::full(a.shape(), g[0]));
  });
}

template <typename T>
BasicVar<T> mean(const BasicVar<T>& a) {
  const double n = static_cast<double>(a.size());
  const double s = a.value().sum() / n;
  return make_result<T>("mean", BasicTensor<T>::scalar(static_cast<T>(s)), {a}, [a, n](const BasicTensor<T>& g) {
    detail::accum(a, BasicTensor<T>::full(a.shape(), static_cast<T>(static_cast<double>(g[0]) / n)));
  });
}

/// Per-channel average over (H, W): [C,H,W] -> [C].
template <typename T>
BasicVar<T> spatial_mean(const BasicVar<T>& a) {
  if (a.shape().size() != 3) {
    throw ShapeError("spatial_mean: expected [C,H,W], got " + shape_str(a.shape()));
  }
  const std::size_t c = a.dim(0);
  const std::size_t hw = a.dim(1) * a.dim(2);
  BasicTensor<T> y(Shape{c});
  const auto& x = a.value();
  for (std::size_t i = 0; i < c; ++i) {
    double acc = 0.0;
    for (std::size_t p = 0; p < hw; ++p) {
      acc += static_cast<double>(x[i * hw + p]);
    }
    y[i] = static_cast<T>(acc / static_cast<double>(hw));
  }
  return make_result<T>("spatial_mean", std::move(y), {a}, [a, c, hw](const BasicTensor<T>& g) {
    BasicTensor<T> gx(a.shape());
    for (std::size_t i = 0; i < c; ++i) {
      const T v = static_cast<T>(static_cast<double>(g[i]) / static_cast<double>(hw));
      std::fill_n(gx.data().data() + i * hw, hw, v);
    }
    detail::accum(a, std::move(gx));
  });
}

template <typename T>
BasicVar<T> mse(const BasicVar<T>& a, const BasicVar<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mse: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  return mean(square(sub(a, b)));
}

template <typename T>
BasicVar<T> mean_abs(const BasicVar<T>& a) {
  return mean(abs(a));
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
BasicVar<T> reshape(const BasicVar<T>& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  return make_result<T>("reshape", a.value().reshaped(std::move(shape)), {a}, [a](const BasicTensor<T>& g) {
    detail::accum(a, g.reshaped(a.shape()));
  });
}

template <typename T>
BasicTensor<T> transpose_tensor(const BasicTensor<T>& x) {
  const std::size_t m = x.dim(0);
  const std::size_t n = x.dim(1);
  auto y = BasicTensor<T>::uninitialized(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      y[j * m + i] = x[i * n + j];
    }
  }
  return y;
}

template <typename T>
BasicVar<T> transpose(const BasicVar<T>& a) {
  if (a.shape().size() != 2) {
    throw ShapeError("transpose: expected rank 2, got " + shape_str(a.shape()));
  }
  return make_result<T>("transpose", transpose_tensor(a.value()), {a}, [a](const BasicTensor<T>& g) {
    detail::accum(a, transpose_tensor(g));
  });
}

/// Rows of a [R, ...] tensor picked by `index` (duplicates allowed).
template <typename T>
BasicVar<T> gather_rows(const BasicVar<T>& a, std::vector<std::size_t> index) {
  const std::size_t rows = a.dim(0);
  const std::size_t width = a.size() / rows;
  Shape shape = a.shape();
  shape[0] = index.size();
  auto y = BasicTensor<T>::uninitialized(shape);
  const auto& x = a.value();
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= rows) {
      throw ShapeError("gather_rows: index out of range");
    }
    std::copy_n(x.data().data() + index[r] * width, width, y.data().data() + r * width);
  }
  return make_result<T>("gather_rows", std::move(y), {a},
                        [a, index = std::move(index), width](const BasicTensor<T>& g) {
                          BasicTensor<T> gx(a.shape());
                          for (std::size_t r = 0; r < index.size(); ++r) {
                            T* dst = gx.data().data() + index[r] * width;
                            const T* src = g.data().data() + r * width;
                            for (std::size_t j = 0; j < width; ++j) {
                              dst[j] += src[j];
                            }
                          }
                          detail::accum(a, std::move(gx));
                        });
}

/// Concatenation along the leading dimension.
template <typename T>
BasicVar<T> concat(const std::vector<BasicVar<T>>& parts) {
  if (parts.empty()) {
    throw ShapeError("concat: no inputs");
  }
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t lead = 0;
  for (const auto& p : parts) {
    Shape t(p.shape().begin() + 1, p.shape().end());
    if (t != tail) {
      throw ShapeError("concat: trailing shapes differ: " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    lead += p.dim(0);
  }
  Shape shape = parts[0].shape();
  shape[0] = lead;
  auto y = BasicTensor<T>::uninitialized(shape);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), y.data().begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.size();
  }
  return make_result<T>("concat", std::move(y), parts, [parts](const BasicTensor<T>& g) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) {
        auto gp = BasicTensor<T>::uninitialized(p.shape());
        std::copy_n(g.data().data() + off, p.size(), gp.data().data());
        detail::accum(p, std::move(gp));
      }
      off += p.size();
    }
  });
}

/// Rows [begin, end) of the leading dimension.
template <typename T>
BasicVar<T> slice(const BasicVar<T>& a, std::size_t begin, std::size_t end) {
  if (begin >= end || end > a.dim(0)) {
    throw ShapeError("slice: bad range");
  }
  const std::size_t width = a.size() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = end - begin;
  auto y = BasicTensor<T>::uninitialized(shape);
  std::copy_n(a.value().data().data() + begin * width, y.size(), y.data().data());
  return make_result<T>("slice", std::move(y), {a}, [a, begin, width](const BasicTensor<T>& g) {
    BasicTensor<T> gx(a.shape());
    std::copy_n(g.data().data(), g.size(), gx.data().data() + begin * width);
    detail::accum(a, std::move(gx));
  });
}

/// [C] -> [rows, C], every row a copy of the input.
template <typename T>
BasicVar<T> repeat_rows(const BasicVar<T>& a, std::size_t rows) {
  const std::size_t c = a.size();
  auto y = BasicTensor<T>::uninitialized(Shape{rows, c});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.value().data().data(), c, y.data().data() + r * c);
  }
  return make_result<T>("repeat_rows", std::move(y), {a}, [a, rows, c](const BasicTensor<T>& g) {
    auto gx = BasicTensor<T>::uninitialized(a.shape());
    for (std::size_t j = 0; j < c; ++j) {
      double acc = 0.0;
      for (std::size_t r = 0; r < rows; ++r) {
        acc += static_cast<double>(g[r * c + j]);
      }
      gx[j] = static_cast<T>(acc);
    }
    detail::accum(a, std::move(gx));
  });
}

/// [C,H,W] image split into non-overlapping PxP patches, one flattened patch
/// (channel-major) per row, patches in row-major grid order.
template <typename T>
BasicVar<T> patchify(const BasicVar<T>& a, std::size_t patch) {
  if (a.shape().size() != 3) {
    throw ShapeError("patchify: expected [C,H,W]");
  }
  const std::size_t c = a.dim(0), h = a.dim(1), w = a.dim(2);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw ConfigError("patchify: patch size " + std::to_string(patch) + " does not divide " + shape_str(a.shape()));
  }
  const std::size_t gh = h / patch, gw = w / patch, width = c * patch * patch;
  // index[k] = source offset of output element k
  auto index = std::make_shared<std::vector<std::size_t>>(gh * gw * width);
  for (std::size_t pi = 0; pi < gh; ++pi) {
    for (std::size_t pj = 0; pj < gw; ++pj) {
      const std::size_t row = pi * gw + pj;
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t u = 0; u < patch; ++u) {
          for (std::size_t v = 0; v < patch; ++v) {
            (*index)[row * width + (ch * patch + u) * patch + v] =
                (ch * h + pi * patch + u) * w + pj * patch + v;
          }
        }
      }
    }
  }
  auto y = BasicTensor<T>::uninitialized(Shape{gh * gw, width});
  for (std::size_t k = 0; k < y.size(); ++k) {
    y[k] = a.value()[(*index)[k]];
  }
  return make_result<T>("patchify", std::move(y), {a}, [a, index](const BasicTensor<T>& g) {
    BasicTensor<T> gx(a.shape());
    for (std::size_t k = 0; k < g.size(); ++k) {
      gx[(*index)[k]] += g[k];
    }
    detail::accum(a, std::move(gx));
  });
}

/// Nearest-neighbour 2x upsampling of [C,H,W].
template <typename T>
BasicVar<T> upsample2x(const BasicVar<T>& a) {
  if (a.shape().size() != 3) {
    throw ShapeError("upsample2x: expected [C,H,W]");
  }
  const std::size_t c = a.dim(0), h = a.dim(1), w = a.dim(2);
  auto y = BasicTensor<T>::uninitialized(Shape{c, 2 * h, 2 * w});
  const auto& x = a.value();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < 2 * h; ++i) {
      const T* src = x.data().data() + (ch * h + i / 2) * w;
      T* dst = y.data().data() + (ch * 2 * h + i) * 2 * w;
      for (std::size_t j = 0; j < 2 * w; ++j) {
        dst[j] = src[j / 2];
      }
    }
  }
  return make_result<T>("upsample2x", std::move(y), {a}, [a, c, h, w](const BasicTensor<T>& g) {
    BasicTensor<T> gx(a.shape());
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t i = 0; i < 2 * h; ++i) {
        const T* src = g.data().data() + (ch * 2 * h + i) * 2 * w;
        T* dst = gx.data().data() + (ch * h + i / 2) * w;
        for (std::size_t j = 0; j < 2 * w; ++j) {
          dst[j / 2] += src[j];
        }
      }
    }
    detail::accum(a, std::move(gx));
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
BasicVar<T> matmul(const BasicVar<T>& a, const BasicVar<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto y = BasicTensor<T>::uninitialized(Shape{m, n});
  blas::gemm(false, false, m, n, k, T{1}, a.value().data().data(), k, b.value().data().data(), n, T{0},
             y.data().data(), n);
  count_macs(m * n * k);
  return make_result<T>("matmul", std::move(y), {a, b}, [a, b, m, k, n](const BasicTensor<T>& g) {
    if (a.requires_grad()) {
      auto ga = BasicTensor<T>::uninitialized(a.shape());
      blas::gemm(false, true, m, k, n, T{1}, g.data().data(), n, b.value().data().data(), n, T{0},
                 ga.data().data(), k);
      detail::accum(a, std::move(ga));
    }
    if (b.requires_grad()) {
      auto gb = BasicTensor<T>::uninitialized(b.shape());
      blas::gemm(true, false, k, n, m, T{1}, a.value().data().data(), k, g.data().data(), n, T{0},
                 gb.data().data(), n);
      detail::accum(b, std::move(gb));
    }
  });
}

/// x[M,K] * w[K,N] + bias[N].
template <typename T>
BasicVar<T> linear(const BasicVar<T>& x, const BasicVar<T>& w, const BasicVar<T>& bias) {
  auto y = matmul(x, w);
  return bias.defined() ? add(y, bias) : y;
}

// ---------------------------------------------------------------------------
// Convolutions

namespace detail {

struct ConvGeometry {
  std::size_t c, h, w;        // input
  std::size_t o, kh, kw;      // kernel
  std::size_t sh, sw, ph, pw; // stride / padding
  std::size_t oh, ow;         // output

  [[nodiscard]] bool is_pointwise() const { return kh == 1 && kw == 1 && sh == 1 && sw == 1 && ph == 0 && pw == 0; }
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& k, std::size_t sh, std::size_t sw, std::size_t ph,
                                  std::size_t pw, const char* name) {
  if (x.size() != 3 || k.size() != 4 || k[1] != x[0]) {
    throw ShapeError(std::string(name) + ": input " + shape_str(x) + " incompatible with kernel " + shape_str(k));
  }
  ConvGeometry g{x[0], x[1], x[2], k[0], k[2], k[3], sh, sw, ph, pw, 0, 0};
  if (sh == 0 || sw == 0) {
    throw ShapeError(std::string(name) + ": stride must be positive");
  }
  const std::size_t eh = g.h + 2 * ph, ew = g.w + 2 * pw;
  if (eh < g.kh || ew < g.kw || (eh - g.kh) % sh != 0 || (ew - g.kw) % sw != 0) {
    throw ShapeError(std::string(name) + ": non-integral output size for input " + shape_str(x) + ", kernel " +
                     shape_str(k) + ", stride " + std::to_string(sh) + "x" + std::to_string(sw) + ", pad " +
                     std::to_string(ph) + "x" + std::to_string(pw));
  }
  g.oh = (eh - g.kh) / sh + 1;
  g.ow = (ew - g.kw) / sw + 1;
  return g;
}

// Output columns j whose input column j*sw + v - pw lies inside [0, w).
inline std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t v) {
  const std::size_t lo = v >= g.pw ? 0 : (g.pw - v + g.sw - 1) / g.sw;
  if (g.w + g.pw <= v) return {lo, lo};
  const std::size_t hi = std::min(g.ow, (g.w - 1 + g.pw - v) / g.sw + 1);
  return {std::min(lo, hi), hi};
}

template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t u = 0; u < g.kh; ++u) {
      for (std::size_t v = 0; v < g.kw; ++v) {
        T* row = col + ((c * g.kh + u) * g.kw + v) * plane;
        const auto [lo, hi] = valid_columns(g, v);
        for (std::size_t i = 0; i < g.oh; ++i) {
          const std::ptrdiff_t yi = static_cast<std::ptrdiff_t>(i * g.sh + u) - static_cast<std::ptrdiff_t>(g.ph);
          T* out = row + i * g.ow;
          if (yi < 0 || yi >= static_cast<std::ptrdiff_t>(g.h) || lo == hi) {
            std::fill_n(out, g.ow, T{0});
            continue;
          }
          const T* src = x + (c * g.h + static_cast<std::size_t>(yi)) * g.w + (lo * g.sw + v - g.pw);
          std::fill_n(out, lo, T{0});
          if (g.sw == 1) {
            std::copy_n(src, hi - lo, out + lo);
          } else {
            for (std::size_t j = lo; j < hi; ++j) out[j] = src[(j - lo) * g.sw];
          }
          std::fill(out + hi, out + g.ow, T{0});
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* x) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t u = 0; u < g.kh; ++u) {
      for (std::size_t v = 0; v < g.kw; ++v) {
        const T* row = col + ((c * g.kh + u) * g.kw + v) * plane;
        const auto [lo, hi] = valid_columns(g, v);
        if (lo == hi) continue;
        for (std::size_t i = 0; i < g.oh; ++i) {
          const std::ptrdiff_t yi = static_cast<std::ptrdiff_t>(i * g.sh + u) - static_cast<std::ptrdiff_t>(g.ph);
          if (yi < 0 || yi >= static_cast<std::ptrdiff_t>(g.h)) {
            continue;
          }
          T* dst = x + (c * g.h + static_cast<std::size_t>(yi)) * g.w + (lo * g.sw + v - g.pw);
          const T* in = row + i * g.ow;
          for (std::size_t j = lo; j < hi; ++j) {
            dst[(j - lo) * g.sw] += in[j];
          }
        }
      }
    }
  }
}

/// Cross-correlation with an arbitrary (KH, KW) kernel; the public conv
/// entry points are thin wrappers around this.
template <typename T>
BasicVar<T> conv_general(const char* name, const BasicVar<T>& x, const BasicVar<T>& w, const BasicVar<T>& bias,
                         std::size_t sh, std::size_t sw, std::size_t ph, std::size_t pw) {
  const ConvGeometry geo = conv_geometry(x.shape(), w.shape(), sh, sw, ph, pw, name);
  if (bias.defined() && bias.size() != geo.o) {
    throw ShapeError(std::string(name) + ": bias size mismatch");
  }
  const std::size_t plane = geo.oh * geo.ow;
  const std::size_t ckk = geo.c * geo.kh * geo.kw;

  std::shared_ptr<BasicTensor<T>> col;
  const T* col_ptr = x.value().data().data();
  if (!geo.is_pointwise()) {
    col = std::make_shared<BasicTensor<T>>(BasicTensor<T>::uninitialized(Shape{ckk, plane}));
    im2col(geo, x.value().data().data(), col->data().data());
    col_ptr = col->data().data();
  }

  auto y = BasicTensor<T>::uninitialized(Shape{geo.o, geo.oh, geo.ow});
  blas::gemm(false, false, geo.o, plane, ckk, T{1}, w.value().data().data(), ckk, col_ptr, plane, T{0},
             y.data().data(), plane);
  if (bias.defined()) {
    for (std::size_t o = 0; o < geo.o; ++o) {
      const T b = bias.value()[o];
      T* row = y.data().data() + o * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        row[p] += b;
      }
    }
  }
  count_macs(geo.o * ckk * plane);

  std::vector<BasicVar<T>> inputs{x, w};
  if (bias.defined()) {
    inputs.push_back(bias);
  }
  return make_result<T>(name, std::move(y), std::move(inputs), [x, w, bias, geo, col](const BasicTensor<T>& g) {
    const std::size_t plane = geo.oh * geo.ow;
    const std::size_t ckk = geo.c * geo.kh * geo.kw;
    const T* colp = col ? col->data().data() : x.value().data().data();
    if (w.requires_grad()) {
      auto gw = BasicTensor<T>::uninitialized(w.shape());
      blas::gemm(false, true, geo.o, ckk, plane, T{1}, g.data().data(), plane, colp, plane, T{0},
                 gw.data().data(), ckk);
      accum(w, std::move(gw));
    }
    if (x.requires_grad()) {
      auto gx = geo.is_pointwise() ? BasicTensor<T>::uninitialized(x.shape()) : BasicTensor<T>(x.shape());
      if (geo.is_pointwise()) {
        blas::gemm(true, false, ckk, plane, geo.o, T{1}, w.value().data().data(), ckk, g.data().data(), plane,
                   T{0}, gx.data().data(), plane);
      } else {
        auto gcol = BasicTensor<T>::uninitialized(Shape{ckk, plane});
        blas::gemm(true, false, ckk, plane, geo.o, T{1}, w.value().data().data(), ckk, g.data().data(), plane,
                   T{0}, gcol.data().data(), plane);
        col2im(geo, gcol.data().data(), gx.data().data());
      }
      accum(x, std::move(gx));
    }
    if (bias.defined() && bias.requires_grad()) {
      auto gb = BasicTensor<T>::uninitialized(bias.shape());
      for (std::size_t o = 0; o < geo.o; ++o) {
        double acc = 0.0;
        for (std::size_t p = 0; p < plane; ++p) {
          acc += static_cast<double>(g[o * plane + p]);
        }
        gb[o] = static_cast<T>(acc);
      }
      accum(bias, std::move(gb));
    }
  });
}

}  // namespace detail

/// x[C,H,W] (*) w[O,C,K,K] (+ bias[O]) with square kernel, stride and
/// symmetric zero padding; cross-correlation semantics.
template <typename T>
BasicVar<T> conv2d(const BasicVar<T>& x, const BasicVar<T>& w, const BasicVar<T>& bias = {}, std::size_t stride = 1,
                   std::size_t pad = 0) {
  if (w.shape().size() == 4 && (w.dim(2) != w.dim(3) || w.dim(2) % 2 == 0)) {
    throw ShapeError("conv2d: kernel must be square with odd size, got " + shape_str(w.shape()));
  }
  return detail::conv_general("conv2d", x, w, bias, stride, stride, pad, pad);
}

/// x[C,L] (*) w[O,C,K] (+ bias[O]) along the sequence axis.
template <typename T>
BasicVar<T> conv1d(const BasicVar<T>& x, const BasicVar<T>& w, const BasicVar<T>& bias = {}, std::size_t stride = 1,
                   std::size_t pad = 0) {
  if (x.shape().size() != 2 || w.shape().size() != 3) {
    throw ShapeError("conv1d: expected x[C,L] and w[O,C,K]");
  }
  auto x3 = reshape(x, Shape{x.dim(0), 1, x.dim(1)});
  auto w4 = reshape(w, Shape{w.dim(0), w.dim(1), 1, w.dim(2)});
  auto y = detail::conv_general("conv1d", x3, w4, bias, 1, stride, 0, pad);
  return reshape(y, Shape{y.dim(0), y.dim(2)});
}

/// Per-channel "same" convolution: x[C,H,W], w[C,KH,KW] with odd KH, KW.
template <typename T>
BasicVar<T> depthwise_conv2d(const BasicVar<T>& x, const BasicVar<T>& w, const BasicVar<T>& bias = {}) {
  if (x.shape().size() != 3 || w.shape().size() != 3 || w.dim(0) != x.dim(0) || w.dim(1) % 2 == 0 ||
      w.dim(2) % 2 == 0) {
    throw ShapeError("depthwise_conv2d: input " + shape_str(x.shape()) + ", kernel " + shape_str(w.shape()));
  }
  const std::size_t c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t kh = w.dim(1), kw = w.dim(2), ph = kh / 2, pw = kw / 2;
  auto y = BasicTensor<T>::uninitialized(x.shape());
  const auto& xv = x.value();
  const auto& wv = w.value();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T b = bias.defined() ? bias.value()[ch] : T{0};
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < wd; ++j) {
        T acc = b;
        for (std::size_t u = 0; u < kh; ++u) {
          const std::ptrdiff_t yi = static_cast<std::ptrdiff_t>(i + u) - static_cast<std::ptrdiff_t>(ph);
          if (yi < 0 || yi >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t v = 0; v < kw; ++v) {
            const std::ptrdiff_t xj = static_cast<std::ptrdiff_t>(j + v) - static_cast<std::ptrdiff_t>(pw);
            if (xj < 0 || xj >= static_cast<std::ptrdiff_t>(wd)) continue;
            acc += wv[(ch * kh + u) * kw + v] * xv[(ch * h + static_cast<std::size_t>(yi)) * wd + static_cast<std::size_t>(xj)];
          }
        }
        y[(ch * h + i) * wd + j] = acc;
      }
    }
  }
  count_macs(c * kh * kw * h * wd);
  std::vector<BasicVar<T>> inputs{x, w};
  if (bias.defined()) {
    inputs.push_back(bias);
  }
  return make_result<T>("depthwise_conv2d", std::move(y), std::move(inputs),
                        [x, w, bias, c, h, wd, kh, kw, ph, pw](const BasicTensor<T>& g) {
                          const auto& xv = x.value();
                          const auto& wv = w.value();
                          BasicTensor<T> gx(x.shape());
                          BasicTensor<T> gw(w.shape());
                          for (std::size_t ch = 0; ch < c; ++ch) {
                            for (std::size_t i = 0; i < h; ++i) {
                              for (std::size_t j = 0; j < wd; ++j) {
                                const T go = g[(ch * h + i) * wd + j];
                                for (std::size_t u = 0; u < kh; ++u) {
                                  const std::ptrdiff_t yi = static_cast<std::ptrdiff_t>(i + u) - static_cast<std::ptrdiff_t>(ph);
                                  if (yi < 0 || yi >= static_cast<std::ptrdiff_t>(h)) continue;
                                  for (std::size_t v = 0; v < kw; ++v) {
                                    const std::ptrdiff_t xj = static_cast<std::ptrdiff_t>(j + v) - static_cast<std::ptrdiff_t>(pw);
                                    if (xj < 0 || xj >= static_cast<std::ptrdiff_t>(wd)) continue;
                                    const std::size_t xi = (ch * h + static_cast<std::size_t>(yi)) * wd + static_cast<std::size_t>(xj);
                                    gx[xi] += go * wv[(ch * kh + u) * kw + v];
                                    gw[(ch * kh + u) * kw + v] += go * xv[xi];
                                  }
                                }
                              }
                            }
                          }
                          detail::accum(x, std::move(gx));
                          detail::accum(w, std::move(gw));
                          if (bias.defined() && bias.requires_grad()) {
                            BasicTensor<T> gb(bias.shape());
                            for (std::size_t ch = 0; ch < c; ++ch) {
                              double acc = 0.0;
                              for (std::size_t p = 0; p < h * wd; ++p) {
                                acc += static_cast<double>(g[ch * h * wd + p]);
                              }
                              gb[ch] = static_cast<T>(acc);
                            }
                            detail::accum(bias, std::move(gb));
                          }
                        });
}

/// Non-overlapping fh x fw average pooling of x[C,H,W].
template <typename T>
BasicVar<T> avg_pool2d(const BasicVar<T>& x, std::size_t fh, std::size_t fw) {
  if (x.shape().size() != 3 || fh == 0 || fw == 0 || x.dim(1) % fh != 0 || x.dim(2) % fw != 0) {
    throw ShapeError("avg_pool2d: input " + shape_str(x.shape()) + " not divisible by " + std::to_string(fh) + "x" +
                     std::to_string(fw));
  }
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), oh = h / fh, ow = w / fw;
  const double inv = 1.0 / static_cast<double>(fh * fw);
  auto y = BasicTensor<T>::uninitialized(Shape{c, oh, ow});
  const auto& xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (std::size_t u = 0; u < fh; ++u) {
          for (std::size_t v = 0; v < fw; ++v) {
            acc += static_cast<double>(xv[(ch * h + i * fh + u) * w + j * fw + v]);
          }
        }
        y[(ch * oh + i) * ow + j] = static_cast<T>(acc * inv);
      }
    }
  }
  return make_result<T>("avg_pool2d", std::move(y), {x}, [x, fh, fw, c, h, w, oh, ow, inv](const BasicTensor<T>& g) {
    auto gx = BasicTensor<T>::uninitialized(x.shape());
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
          gx[(ch * h + i) * w + j] = static_cast<T>(g[(ch * oh + i / fh) * ow + j / fw] * inv);
        }
      }
    }
    detail::accum(x, std::move(gx));
  });
}

/// StyleGAN2 weight modulation: w'[o,i,k] = s[i] * w[o,i,k], optionally
/// demodulated by 1/sqrt(sum_{i,k} w'^2 + eps) per output channel.
template <typename T>
BasicVar<T> modulate_weight(const BasicVar<T>& w, const BasicVar<T>& style, bool demodulate, double eps = 1e-8) {
  if (w.shape().size() != 4 || style.size() != w.dim(1)) {
    throw ShapeError("modulate_weight: kernel " + shape_str(w.shape()) + ", style " + shape_str(style.shape()));
  }
  const std::size_t o = w.dim(0), in = w.dim(1), kk = w.dim(2) * w.dim(3);
  const auto& wv = w.value();
  const auto& sv = style.value();
  auto mod = BasicTensor<T>::uninitialized(w.shape());
  std::vector<T> inv_norm(o, T{1});
  for (std::size_t a = 0; a < o; ++a) {
    double ss = 0.0;
    for (std::size_t i = 0; i < in; ++i) {
      for (std::size_t k = 0; k < kk; ++k) {
        const std::size_t idx = (a * in + i) * kk + k;
        mod[idx] = sv[i] * wv[idx];
        ss += static_cast<double>(mod[idx]) * static_cast<double>(mod[idx]);
      }
    }
    if (demodulate) {
      inv_norm[a] = static_cast<T>(1.0 / std::sqrt(ss + eps));
      for (std::size_t j = 0; j < in * kk; ++j) {
        mod[a * in * kk + j] *= inv_norm[a];
      }
    }
  }
  return make_result<T>("modulate_weight", std::move(mod), {w, style},
                        [w, style, demodulate, o, in, kk, inv_norm](const BasicTensor<T>& g) {
                          const auto& wv = w.value();
                          const auto& sv = style.value();
                          // gradient w.r.t. the pre-demodulation weight w' = s * w
                          auto gm = BasicTensor<T>::uninitialized(w.shape());
                          for (std::size_t a = 0; a < o; ++a) {
                            const std::size_t base = a * in * kk;
                            if (!demodulate) {
                              std::copy_n(g.data().data() + base, in * kk, gm.data().data() + base);
                              continue;
                            }
                            const double n = static_cast<double>(inv_norm[a]);
                            double dot = 0.0;
                            for (std::size_t i = 0; i < in; ++i) {
                              const double si = static_cast<double>(sv[i]);
                              for (std::size_t k = 0; k < kk; ++k) {
                                const std::size_t j = base + i * kk + k;
                                dot += static_cast<double>(g[j]) * (si * static_cast<double>(wv[j]));
                              }
                            }
                            const double n3dot = n * n * n * dot;
                            for (std::size_t i = 0; i < in; ++i) {
                              const double si = static_cast<double>(sv[i]);
                              for (std::size_t k = 0; k < kk; ++k) {
                                const std::size_t j = base + i * kk + k;
                                gm[j] = static_cast<T>(n * static_cast<double>(g[j]) - n3dot * (si * static_cast<double>(wv[j])));
                              }
                            }
                          }
                          if (w.requires_grad()) {
                            auto gw = BasicTensor<T>::uninitialized(w.shape());
                            for (std::size_t a = 0; a < o; ++a) {
                              for (std::size_t i = 0; i < in; ++i) {
                                const T si = sv[i];
                                const std::size_t row = (a * in + i) * kk;
                                for (std::size_t k = 0; k < kk; ++k) gw[row + k] = gm[row + k] * si;
                              }
                            }
                            detail::accum(w, std::move(gw));
                          }
                          if (style.requires_grad()) {
                            std::vector<double> acc(in, 0.0);
                            for (std::size_t a = 0; a < o; ++a) {
                              for (std::size_t i = 0; i < in; ++i) {
                                const std::size_t row = (a * in + i) * kk;
                                double sum = 0.0;
                                for (std::size_t k = 0; k < kk; ++k) {
                                  sum += static_cast<double>(gm[row + k]) * static_cast<double>(wv[row + k]);
                                }
                                acc[i] += sum;
                              }
                            }
                            auto gs = BasicTensor<T>::uninitialized(style.shape());
                            for (std::size_t i = 0; i < in; ++i) {
                              gs[i] = static_cast<T>(acc[i]);
                            }
                            detail::accum(style, std::move(gs));
                          }
                        });
}

// ---------------------------------------------------------------------------
// Normalisation and attention helpers

/// Per-row layer norm of x[M,C] with affine gamma[C], beta[C].
template <typename T>
BasicVar<T> layer_norm(const BasicVar<T>& x, const BasicVar<T>& gamma, const BasicVar<T>& beta, double eps = 1e-5) {
  if (x.shape().size() != 2 || gamma.size() != x.dim(1) || beta.size() != x.dim(1)) {
    throw ShapeError("layer_norm: x " + shape_str(x.shape()) + ", gamma " + shape_str(gamma.shape()));
  }
  const std::size_t m = x.dim(0), c = x.dim(1);
  auto xhat = std::make_shared<BasicTensor<T>>(BasicTensor<T>::uninitialized(x.shape()));
  auto inv_std = std::make_shared<std::vector<double>>(m);
  auto y = BasicTensor<T>::uninitialized(x.shape());
  const auto& xv = x.value();
  for (std::size_t r = 0; r < m; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += static_cast<double>(xv[r * c + j]);
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = static_cast<double>(xv[r * c + j]) - mu;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double xh = (static_cast<double>(xv[r * c + j]) - mu) * is;
      (*xhat)[r * c + j] = static_cast<T>(xh);
      y[r * c + j] = static_cast<T>(xh * static_cast<double>(gamma.value()[j]) + static_cast<double>(beta.value()[j]));
    }
  }
  return make_result<T>("layer_norm", std::move(y), {x, gamma, beta},
                        [x, gamma, beta, xhat, inv_std, m, c](const BasicTensor<T>& g) {
                          const auto& gv = gamma.value();
                          if (x.requires_grad()) {
                            auto gx = BasicTensor<T>::uninitialized(x.shape());
                            for (std::size_t r = 0; r < m; ++r) {
                              double mean_g = 0.0, mean_gx = 0.0;
                              for (std::size_t j = 0; j < c; ++j) {
                                const double gh = static_cast<double>(g[r * c + j]) * static_cast<double>(gv[j]);
                                mean_g += gh;
                                mean_gx += gh * static_cast<double>((*xhat)[r * c + j]);
                              }
                              mean_g /= static_cast<double>(c);
                              mean_gx /= static_cast<double>(c);
                              for (std::size_t j = 0; j < c; ++j) {
                                const double gh = static_cast<double>(g[r * c + j]) * static_cast<double>(gv[j]);
                                gx[r * c + j] = static_cast<T>((*inv_std)[r] *
                                                               (gh - mean_g - static_cast<double>((*xhat)[r * c + j]) * mean_gx));
                              }
                            }
                            detail::accum(x, std::move(gx));
                          }
                          if (gamma.requires_grad() || beta.requires_grad()) {
                            std::vector<double> gg(c, 0.0), gb(c, 0.0);
                            for (std::size_t r = 0; r < m; ++r) {
                              for (std::size_t j = 0; j < c; ++j) {
                                gg[j] += static_cast<double>(g[r * c + j]) * static_cast<double>((*xhat)[r * c + j]);
                                gb[j] += static_cast<double>(g[r * c + j]);
                              }
                            }
                            BasicTensor<T> tg(gamma.shape()), tb(beta.shape());
                            for (std::size_t j = 0; j < c; ++j) {
                              tg[j] = static_cast<T>(gg[j]);
                              tb[j] = static_cast<T>(gb[j]);
                            }
                            detail::accum(gamma, std::move(tg));
                            detail::accum(beta, std::move(tb));
                          }
                        });
}

/// Row-wise softmax of x[M,N].
template <typename T>
BasicVar<T> softmax_rows(const BasicVar<T>& x) {
  if (x.shape().size() != 2) {
    throw ShapeError("softmax_rows: expected rank 2");
  }
  const std::size_t m = x.dim(0), n = x.dim(1);
  auto y = BasicTensor<T>::uninitialized(x.shape());
  for (std::size_t r = 0; r < m; ++r) {
    const T* row = x.value().data().data() + r * n;
    const T mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)) / z);
  }
  auto yv = y;
  return make_result<T>("softmax_rows", std::move(y), {x}, [x, yv, m, n](const BasicTensor<T>& g) {
    auto gx = BasicTensor<T>::uninitialized(x.shape());
    for (std::size_t r = 0; r < m; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(g[r * n + j]) * static_cast<double>(yv[r * n + j]);
      for (std::size_t j = 0; j < n; ++j) {
        gx[r * n + j] = static_cast<T>(static_cast<double>(yv[r * n + j]) * (static_cast<double>(g[r * n + j]) - dot));
      }
    }
    detail::accum(x, std::move(gx));
  });
}

// ---------------------------------------------------------------------------
// Layout helpers for [C,H,W] feature maps

/// [C,H,W] -> [H*W, C] (one row per spatial site, row-major sites).
template <typename T>
BasicVar<T> to_sequence(const BasicVar<T>& f) {
  return transpose(reshape(f, Shape{f.dim(0), f.dim(1) * f.dim(2)}));
}

/// [H*W, C] -> [C,H,W].
template <typename T>
BasicVar<T> from_sequence(const BasicVar<T>& s, std::size_t h, std::size_t w) {
  return reshape(transpose(s), Shape{s.dim(1), h, w});
}

}  // namespace mambastyle::ops
