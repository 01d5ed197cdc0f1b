#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mambastyle/errors.hpp"
#include "mambastyle/losses.hpp"
#include "mambastyle/tensor.hpp"

namespace mambastyle::metrics {

template <typename T>
double mse(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mse: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return a.size() == 0 ? 0.0 : s / static_cast<double>(a.size());
}

namespace detail {

struct Plane {
  std::size_t h = 0, w = 0;
  std::vector<double> v;
  double at(std::size_t y, std::size_t x) const { return v[y * w + x]; }
};

inline Plane halve(const Plane& p) {
  Plane q{p.h / 2, p.w / 2, {}};
  q.v.resize(q.h * q.w);
  for (std::size_t y = 0; y < q.h; ++y) {
    for (std::size_t x = 0; x < q.w; ++x) {
      q.v[y * q.w + x] = 0.25 * (p.at(2 * y, 2 * x) + p.at(2 * y, 2 * x + 1) + p.at(2 * y + 1, 2 * x) +
                                 p.at(2 * y + 1, 2 * x + 1));
    }
  }
  return q;
}

// Separable normalized Gaussian taps, clipped to the plane size (odd).
inline std::vector<double> gaussian_taps(std::size_t size, double sigma) {
  std::vector<double> g(size);
  const double c = static_cast<double>(size / 2);
  double sum = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - c;
    g[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    sum += g[i];
  }
  for (auto& x : g) x /= sum;
  return g;
}

inline Plane filter_valid(const Plane& p, const std::vector<double>& g) {
  const std::size_t k = g.size();
  Plane rows{p.h, p.w - k + 1, {}};
  rows.v.assign(rows.h * rows.w, 0.0);
  for (std::size_t y = 0; y < rows.h; ++y) {
    for (std::size_t x = 0; x < rows.w; ++x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < k; ++i) acc += g[i] * p.at(y, x + i);
      rows.v[y * rows.w + x] = acc;
    }
  }
  Plane out{p.h - k + 1, rows.w, {}};
  out.v.assign(out.h * out.w, 0.0);
  for (std::size_t y = 0; y < out.h; ++y) {
    for (std::size_t x = 0; x < out.w; ++x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < k; ++i) acc += g[i] * rows.at(y + i, x);
      out.v[y * out.w + x] = acc;
    }
  }
  return out;
}

struct SsimTerms {
  double luminance_cs = 0.0;  // mean of l * cs
  double cs = 0.0;            // mean of cs
};

// l and cs written as 1 - (distance term) / (energy term), so identical
// inputs give exactly 1 whatever the rounding of the energy terms.
inline SsimTerms ssim_terms(const Plane& a, const Plane& b, double range) {
  const double c1 = (0.01 * range) * (0.01 * range);
  const double c2 = (0.03 * range) * (0.03 * range);
  std::size_t size = std::min<std::size_t>(11, std::min(a.h, a.w));
  if (size % 2 == 0) --size;
  const auto g = gaussian_taps(size, 1.5);
  Plane aa{a.h, a.w, {}}, bb{a.h, a.w, {}}, dd{a.h, a.w, {}};
  aa.v.resize(a.v.size());
  bb.v.resize(a.v.size());
  dd.v.resize(a.v.size());
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    const double diff = a.v[i] - b.v[i];
    aa.v[i] = a.v[i] * a.v[i];
    bb.v[i] = b.v[i] * b.v[i];
    dd.v[i] = diff * diff;
  }
  const auto mu_a = filter_valid(a, g), mu_b = filter_valid(b, g);
  const auto e_aa = filter_valid(aa, g), e_bb = filter_valid(bb, g), e_dd = filter_valid(dd, g);
  SsimTerms t;
  const std::size_t n = mu_a.v.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double ma = mu_a.v[i], mb = mu_b.v[i], dm = ma - mb;
    const double va = e_aa.v[i] - ma * ma, vb = e_bb.v[i] - mb * mb;
    const double l = 1.0 - dm * dm / (ma * ma + mb * mb + c1);
    const double cs = 1.0 - (e_dd.v[i] - dm * dm) / (va + vb + c2);
    t.luminance_cs += l * cs;
    t.cs += cs;
  }
  t.luminance_cs /= static_cast<double>(n);
  t.cs /= static_cast<double>(n);
  return t;
}

}  // namespace detail

inline constexpr std::array<double, 5> kMsSsimWeights = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
inline constexpr double kImageRange = 2.0;  // images live in roughly [-1, 1]

/// Scales used for an image whose short side is `side`: 32 -> 3, 64 -> 4, 128+ -> 5.
inline std::size_t ms_ssim_scales(std::size_t side) {
  if (side < 32) throw ConfigError("ms_ssim: images must be at least 32x32, got side " + std::to_string(side));
  std::size_t n = 3;
  while (n < kMsSsimWeights.size() && (side >> n) >= 8) ++n;
  return n;
}

/// Multi-scale SSIM of two [C,H,W] images, averaged over channels.
/// Negative contrast-structure terms are clamped to zero.
template <typename T>
double ms_ssim(const BasicTensor<T>& x, const BasicTensor<T>& y, double range = kImageRange) {
  if (x.shape() != y.shape() || x.rank() != 3) {
    throw ShapeError("ms_ssim: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  }
  const std::size_t ch = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t scales = ms_ssim_scales(std::min(h, w));
  double wsum = 0.0;
  for (std::size_t s = 0; s < scales; ++s) wsum += kMsSsimWeights[s];

  double total = 0.0;
  for (std::size_t c = 0; c < ch; ++c) {
    detail::Plane a{h, w, {}}, b{h, w, {}};
    a.v.resize(h * w);
    b.v.resize(h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
      a.v[i] = x[c * h * w + i];
      b.v[i] = y[c * h * w + i];
    }
    double value = 1.0;
    for (std::size_t s = 0; s < scales; ++s) {
      const auto t = detail::ssim_terms(a, b, range);
      const double term = s + 1 == scales ? t.luminance_cs : t.cs;
      value *= std::pow(std::max(term, 0.0), kMsSsimWeights[s] / wsum);
      if (s + 1 < scales) {
        a = detail::halve(a);
        b = detail::halve(b);
      }
    }
    total += value;
  }
  return total / static_cast<double>(ch);
}

/// Gaussian statistics of a feature set.
struct FeatureStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
  std::size_t count = 0;

  [[nodiscard]] std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }

  /// Mean and unbiased covariance (population covariance for one sample).
  static FeatureStats from(const std::vector<std::vector<double>>& features) {
    if (features.empty()) throw ConfigError("feature stats: empty set");
    const auto f = static_cast<Eigen::Index>(features.front().size());
    Eigen::MatrixXd x(static_cast<Eigen::Index>(features.size()), f);
    for (std::size_t i = 0; i < features.size(); ++i) {
      if (static_cast<Eigen::Index>(features[i].size()) != f) throw ShapeError("feature stats: ragged feature set");
      for (Eigen::Index j = 0; j < f; ++j) x(static_cast<Eigen::Index>(i), j) = features[i][j];
    }
    FeatureStats s;
    s.count = features.size();
    s.mean = x.colwise().mean().transpose();
    const Eigen::MatrixXd centered = x.rowwise() - s.mean.transpose();
    const double denom = s.count > 1 ? static_cast<double>(s.count - 1) : 1.0;
    s.covariance = (centered.transpose() * centered) / denom;
    return s;
  }
};

namespace detail {

// Symmetric PSD square root; eigenvalues below -tol are an error.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what) {
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success) throw NumericalError(std::string(what) + ": eigendecomposition failed");
  const double tol = 1e-6 * std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  Eigen::VectorXd ev = es.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < -tol) {
      throw NumericalError(std::string(what) + ": matrix is not positive semidefinite (eigenvalue " +
                           std::to_string(ev(i)) + ")");
    }
    ev(i) = std::sqrt(std::max(ev(i), 0.0));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)). The trace of the product
/// root is taken as Tr((S1^(1/2) S2 S1^(1/2))^(1/2)), which is symmetric.
inline double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
  if (a.dim() != b.dim()) {
    throw ShapeError("frechet_distance: feature dims " + std::to_string(a.dim()) + " vs " + std::to_string(b.dim()));
  }
  const double mean_term = (a.mean - b.mean).squaredNorm();
  const Eigen::MatrixXd ra = detail::psd_sqrt(a.covariance, "frechet_distance");
  detail::psd_sqrt(b.covariance, "frechet_distance");
  const Eigen::MatrixXd cross = detail::psd_sqrt(ra * b.covariance * ra, "frechet_distance");
  const double trace = a.covariance.trace() + b.covariance.trace() - 2.0 * cross.trace();
  return std::max(0.0, mean_term + trace);
}

template <typename T>
FeatureStats image_stats(const std::vector<BasicTensor<T>>& images, const losses::FeatureNet<T>& net) {
  std::vector<std::vector<double>> feats;
  feats.reserve(images.size());
  for (const auto& im : images) feats.push_back(net.embed(im));
  return FeatureStats::from(feats);
}

/// Perceptual-proxy distance between two images under a frozen feature net.
template <typename T>
double perceptual_distance(const BasicTensor<T>& a, const BasicTensor<T>& b, const losses::FeatureNet<T>& net) {
  NoGradGuard guard;
  return static_cast<double>(losses::perceptual(constant(a), constant(b), net).value().item());
}

enum class Reference { source, other };

/// Edits every image of `set_b` with `d_attr` and returns the Frechet
/// distance of the edited set to set B (Reference::source) or set A.
template <typename Model, typename T>
double editing_quality(const std::vector<BasicTensor<T>>& set_a, const std::vector<BasicTensor<T>>& set_b,
                       const Model& model, const BasicTensor<T>& d_attr, Reference against = Reference::source) {
  if (set_b.empty() || (against == Reference::other && set_a.empty())) {
    throw ConfigError("editing_quality: empty split");
  }
  std::vector<BasicTensor<T>> edited;
  edited.reserve(set_b.size());
  for (const auto& x : set_b) edited.push_back(model.edit(x, d_attr));
  const auto& ref = against == Reference::source ? set_b : set_a;
  return frechet_distance(image_stats(ref, model.features()), image_stats(edited, model.features()));
}

/// Splits latents by the sign of their projection on `unit`: indices that
/// already carry the attribute (positive, set A) and the rest (set B).
template <typename T>
std::array<std::vector<std::size_t>, 2> split_by_attribute(const std::vector<BasicTensor<T>>& latents,
                                                           const std::vector<double>& unit) {
  std::array<std::vector<std::size_t>, 2> out;
  for (std::size_t i = 0; i < latents.size(); ++i) {
    const auto& w = latents[i];
    const std::size_t rows = w.dim(0), cols = w.dim(1);
    if (cols != unit.size()) throw ShapeError("split_by_attribute: latent width vs direction");
    double proj = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) proj += w[r * cols + c] * unit[c];
    }
    out[proj > 0.0 ? 0 : 1].push_back(i);
  }
  return out;
}

}  // namespace mambastyle::metrics
