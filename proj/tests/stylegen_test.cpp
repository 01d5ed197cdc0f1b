#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "mambastyle/stylegen.hpp"
#include "support/gradcheck.hpp"

using namespace mambastyle;
using namespace mambastyle::stylegen;
using testsupport::DTensor;
using testsupport::DVar;
using testsupport::grad_rel_error;
using testsupport::rand_tensor;
using testsupport::weighted_sum;

namespace {

struct TinyGen {
  PipelineConfig cfg = PipelineConfig::tiny();
  ParameterSet<float> ps;
  GeneratorParams<float> g;
  TinyGen() {
    Rng rng(5);
    g = GeneratorParams<float>::make(ps, cfg, rng);
  }
};

struct TinyGenD {
  PipelineConfig cfg = PipelineConfig::tiny();
  ParameterSet<double> ps;
  GeneratorParams<double> g;
  explicit TinyGenD(std::uint64_t seed = 5) {
    Rng rng(seed);
    g = GeneratorParams<double>::make(ps, cfg, rng);
  }
};

}  // namespace

// Per-channel std of a demodulated conv over 10k Monte-Carlo inputs; only the
// centre pixel is read so zero padding does not shrink the variance.
TEST(ModConv, DemodulationKeepsUnitStd) {
  Rng rng(11);
  ParameterSet<float> ps;
  const std::size_t cin = 12, cout = 8, d_w = 16;
  auto affine = Linear<float>::make(ps, "affine", d_w, cin, rng, 1.0, 1.0);
  auto kernel = ps.add("kernel", Tensor::randn(Shape{cout, cin, 3, 3}, rng));
  auto bias = ps.add("bias", Tensor(Shape{cout}));
  auto style = constant(Tensor::randn(Shape{d_w}, rng, 3.0));

  NoGradGuard guard;
  std::vector<double> sum(cout, 0.0), sq(cout, 0.0);
  const int samples = 10000;
  for (int s = 0; s < samples; ++s) {
    auto x = constant(Tensor::randn(Shape{cin, 3, 3}, rng));
    const auto y = mod_conv(x, style, affine, kernel, bias, true).value();
    for (std::size_t o = 0; o < cout; ++o) {
      const double v = y[o * 9 + 4];
      sum[o] += v;
      sq[o] += v * v;
    }
  }
  for (std::size_t o = 0; o < cout; ++o) {
    const double mean = sum[o] / samples;
    const double sd = std::sqrt(sq[o] / samples - mean * mean);
    EXPECT_GE(sd, 0.7) << "channel " << o;
    EXPECT_LE(sd, 1.3) << "channel " << o;
  }
}

TEST(ModConv, WithoutDemodulationStdFollowsStyle) {
  Rng rng(12);
  ParameterSet<float> ps;
  auto affine = Linear<float>::make(ps, "affine", 4, 6, rng, 1.0, 1.0);
  affine.weight.mutable_value() = Tensor(affine.weight.shape());
  auto kernel = ps.add("kernel", Tensor::randn(Shape{4, 6, 3, 3}, rng));
  auto bias = ps.add("bias", Tensor(Shape{4}));
  auto x = constant(Tensor::randn(Shape{6, 5, 5}, rng));
  auto style = constant(Tensor(Shape{4}));
  NoGradGuard guard;
  const auto base = mod_conv(x, style, affine, kernel, bias, false).value();
  affine.bias.mutable_value() = Tensor::full(affine.bias.shape(), 3.0f);
  const auto scaled = mod_conv(x, style, affine, kernel, bias, false).value();
  const auto demod = mod_conv(x, style, affine, kernel, bias, true).value();
  affine.bias.mutable_value() = Tensor::full(affine.bias.shape(), 1.0f);
  const auto demod_base = mod_conv(x, style, affine, kernel, bias, true).value();
  for (std::size_t i = 0; i < base.size(); ++i) {
    EXPECT_NEAR(scaled[i], 3.0f * base[i], 1e-4f * (1.0f + std::fabs(base[i])));
    EXPECT_NEAR(demod[i], demod_base[i], 1e-4f);
  }
}

TEST(Generator, MappingBroadcastsOneRow) {
  TinyGen t;
  Rng rng(1);
  const auto w = mapping(constant(Tensor::randn(Shape{t.cfg.d_z}, rng)), t.g).value();
  ASSERT_EQ(w.shape(), (Shape{t.cfg.layers, t.cfg.d_w}));
  for (std::size_t r = 1; r < t.cfg.layers; ++r) {
    for (std::size_t i = 0; i < t.cfg.d_w; ++i) EXPECT_EQ(w[r * t.cfg.d_w + i], w[i]);
  }
}

TEST(Generator, ShapesAndInjectionSlot) {
  TinyGen t;
  EXPECT_EQ(t.g.depth(), t.cfg.layers);
  EXPECT_EQ(t.g.inject_shape(), (Shape{t.cfg.layer_channels(t.cfg.inject_layer),
                                       t.cfg.layer_resolution(t.cfg.inject_layer),
                                       t.cfg.layer_resolution(t.cfg.inject_layer)}));
  Rng rng(2);
  auto w = constant(Tensor::randn(Shape{t.cfg.layers, t.cfg.d_w}, rng));
  EXPECT_EQ(synthesize(w, t.g).shape(), (Shape{3, t.cfg.resolution, t.cfg.resolution}));

  const PipelineConfig def;
  ParameterSet<float> ps;
  Rng r2(3);
  auto g = GeneratorParams<float>::make(ps, def, r2);
  EXPECT_EQ(g.inject_shape(), (Shape{def.layer_channels(def.inject_layer), 32, 32}));
}

TEST(Generator, RejectsBadShapes) {
  TinyGen t;
  Rng rng(2);
  auto bad_w = constant(Tensor::randn(Shape{t.cfg.layers + 1, t.cfg.d_w}, rng));
  EXPECT_THROW((void)synthesize(bad_w, t.g), ShapeError);
  auto w = constant(Tensor::randn(Shape{t.cfg.layers, t.cfg.d_w}, rng));
  SynthesisHooks<float> hooks;
  hooks.inject = constant(Tensor(Shape{1, 2, 2}));
  EXPECT_THROW((void)synthesize(w, t.g, hooks), ShapeError);
  auto d = constant(Tensor(Shape{t.cfg.layers, t.cfg.d_w + 1}));
  EXPECT_THROW((void)dispatch(w, Var{}, d, t.g), ShapeError);
}

TEST(Generator, CaptureAndReplay) {
  TinyGen t;
  Rng rng(4);
  auto w = constant(Tensor::randn(Shape{t.cfg.layers, t.cfg.d_w}, rng));
  NoGradGuard guard;
  Var captured;
  SynthesisHooks<float> cap;
  cap.capture = &captured;
  const auto plain = synthesize(w, t.g, cap).value();
  ASSERT_TRUE(captured.defined());
  EXPECT_EQ(captured.shape(), t.g.inject_shape());

  SynthesisHooks<float> zero;
  zero.inject = constant(Tensor(t.g.inject_shape()));
  EXPECT_EQ(synthesize(w, t.g, zero).value().vec(), plain.vec());

  // Re-injecting the captured activation doubles layer k downstream.
  SynthesisHooks<float> twice;
  twice.inject = constant(captured.value());
  const auto boosted = synthesize(w, t.g, twice).value();
  double diff = 0.0;
  for (std::size_t i = 0; i < plain.size(); ++i) diff += std::fabs(boosted[i] - plain[i]);
  EXPECT_GT(diff, 1e-3);
}

TEST(Generator, DispatchWithZeroEditIsInversion) {
  TinyGen t;
  Rng rng(6);
  auto w = constant(Tensor::randn(Shape{t.cfg.layers, t.cfg.d_w}, rng));
  auto f = constant(Tensor::randn(t.g.inject_shape(), rng, 0.1));
  auto d = constant(Tensor::randn(Shape{t.cfg.layers, t.cfg.d_w}, rng));
  NoGradGuard guard;
  const auto edited = dispatch(w, f, d, t.g);
  const auto& wh = edited.w_hat.value();
  for (std::size_t i = 0; i < wh.size(); ++i) EXPECT_EQ(wh[i], w.value()[i] + d.value()[i]);

  const auto zero = constant(Tensor(Shape{t.cfg.layers, t.cfg.d_w}));
  SynthesisHooks<float> hooks;
  hooks.inject = f;
  EXPECT_EQ(dispatch(w, f, zero, t.g).image.value().vec(), synthesize(w, t.g, hooks).value().vec());
}

TEST(Generator, NoiseNeedsRngAndIsSeeded) {
  auto cfg = PipelineConfig::tiny();
  cfg.noise = true;
  ParameterSet<float> ps;
  Rng rng(7);
  auto g = GeneratorParams<float>::make(ps, cfg, rng);
  auto w = constant(Tensor::randn(Shape{cfg.layers, cfg.d_w}, rng));
  EXPECT_THROW((void)synthesize(w, g), ContractError);
  Rng n1(3), n2(3), n3(4);
  SynthesisHooks<float> h1, h2, h3;
  h1.noise_rng = &n1;
  h2.noise_rng = &n2;
  h3.noise_rng = &n3;
  const auto a = synthesize(w, g, h1).value().vec();
  EXPECT_EQ(a, synthesize(w, g, h2).value().vec());
  EXPECT_NE(a, synthesize(w, g, h3).value().vec());
}

TEST(Generator, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    TinyGenD t(seed);
    Rng rng(seed + 10);
    auto w = DVar(rand_tensor(Shape{t.cfg.layers, t.cfg.d_w}, rng));
    auto f = DVar(rand_tensor(t.g.inject_shape(), rng, -0.2, 0.2));
    const double err = grad_rel_error(
        [&](const std::vector<DVar>& in) {
          SynthesisHooks<double> hooks;
          hooks.inject = in[1];
          return weighted_sum(synthesize(in[0], t.g, hooks));
        },
        {w, f}, 1e-5, 24, seed);
    EXPECT_LT(err, 1e-4) << "seed " << seed;
  }
}

TEST(Generator, MappingGradients) {
  TinyGenD t;
  Rng rng(9);
  auto z = DVar(rand_tensor(Shape{t.cfg.d_z}, rng));
  const double err = grad_rel_error(
      [&](const std::vector<DVar>& in) { return weighted_sum(mapping(in[0], t.g)); }, {z}, 1e-5);
  EXPECT_LT(err, 1e-4);
}

TEST(DirectionBank, OrthonormalAndScaled) {
  DirectionBank bank(6, 5, 16, Rng(3));
  for (std::size_t a = 0; a < bank.size(); ++a) {
    for (std::size_t b = 0; b < bank.size(); ++b) {
      double dot = 0.0;
      for (std::size_t i = 0; i < 16; ++i) dot += bank.unit(a)[i] * bank.unit(b)[i];
      EXPECT_NEAR(dot, a == b ? 1.0 : 0.0, 1e-12);
    }
  }
  const auto d = bank.direction(2, -1.5);
  ASSERT_EQ(d.shape(), (Shape{5, 16}));
  for (std::size_t r = 0; r < 5; ++r) {
    double n = 0.0;
    for (std::size_t i = 0; i < 16; ++i) n += double(d[r * 16 + i]) * d[r * 16 + i];
    EXPECT_NEAR(std::sqrt(n), 1.5, 1e-5);
  }
  Rng rng(4);
  for (int k = 0; k < 50; ++k) {
    const auto s = bank.sample(rng, 0.5, 2.0);
    double n = 0.0;
    for (std::size_t i = 0; i < 16; ++i) n += double(s[i]) * s[i];
    EXPECT_GE(std::sqrt(n), 0.5 - 1e-5);
    EXPECT_LE(std::sqrt(n), 2.0 + 1e-5);
  }
  EXPECT_THROW(DirectionBank(17, 5, 16, Rng(1)), ConfigError);
}
