#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "mambastyle/vssm.hpp"
#include "support/gradcheck.hpp"

using namespace mambastyle;
using namespace mambastyle::vssm;
using testsupport::DTensor;
using testsupport::DVar;
using testsupport::grad_rel_error;
using testsupport::rand_tensor;
using testsupport::weighted_sum;

namespace {

std::vector<float> column(const Var& seq) { return seq.value().vec(); }

// Naive S6 over seq[L,D] in double with explicit loops.
std::vector<double> naive_s6(const std::vector<double>& x, std::size_t len, std::size_t ch,
                             const ssm::SsmParams<float>& p) {
  const std::size_t ns = p.states();
  const auto& al = p.a_log.value();
  const auto& bp = p.b_proj.value();
  const auto& cp = p.c_proj.value();
  const auto& dp = p.delta_proj.value();
  const auto& db = p.delta_bias.value();
  const auto& ds = p.d_skip.value();
  std::vector<double> h(ch * ns, 0.0), y(len * ch, 0.0);
  for (std::size_t t = 0; t < len; ++t) {
    std::vector<double> b(ns, 0.0), c(ns, 0.0);
    double r = 0.0;
    for (std::size_t k = 0; k < ch; ++k) {
      for (std::size_t n = 0; n < ns; ++n) {
        b[n] += bp[n * ch + k] * x[t * ch + k];
        c[n] += cp[n * ch + k] * x[t * ch + k];
      }
      r += dp[k] * x[t * ch + k];
    }
    for (std::size_t k = 0; k < ch; ++k) {
      const double delta = std::log1p(std::exp(r + db[k]));
      double acc = ds[k] * x[t * ch + k];
      for (std::size_t n = 0; n < ns; ++n) {
        const double a = -std::exp(static_cast<double>(al[k * ns + n]));
        h[k * ns + n] = std::exp(delta * a) * h[k * ns + n] + delta * b[n] * x[t * ch + k];
        acc += c[n] * h[k * ns + n];
      }
      y[t * ch + k] = acc;
    }
  }
  return y;
}

std::vector<ssm::SsmParams<float>> make_routes(ParameterSet<float>& ps, std::size_t ch, std::size_t ns, Rng& rng) {
  std::vector<ssm::SsmParams<float>> routes;
  for (int i = 0; i < 4; ++i) {
    auto p = ssm::SsmParams<float>::make(ps, "r" + std::to_string(i), ch, ns, rng);
    for (auto& v : p.delta_bias.mutable_value().data()) v = static_cast<float>(rng.uniform(-1.0, 0.5));
    for (auto& v : p.d_skip.mutable_value().data()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    routes.push_back(p);
  }
  return routes;
}

Var transpose_hw(const Var& f) {
  const std::size_t c = f.dim(0), h = f.dim(1), w = f.dim(2);
  Tensor t(Shape{c, w, h});
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) t[(k * w + j) * h + i] = f.value()[(k * h + i) * w + j];
  return constant(t);
}

}  // namespace

TEST(Ss2dExpand, TwoByTwoExample) {
  auto f = constant(Tensor(Shape{1, 2, 2}, std::vector<float>{1, 2, 3, 4}));
  auto r = ss2d_expand(f);
  EXPECT_EQ(column(r[0]), (std::vector<float>{1, 2, 3, 4}));
  EXPECT_EQ(column(r[1]), (std::vector<float>{4, 3, 2, 1}));
  EXPECT_EQ(column(r[2]), (std::vector<float>{1, 3, 2, 4}));
  EXPECT_EQ(column(r[3]), (std::vector<float>{4, 2, 3, 1}));
}

TEST(Ss2dExpand, Singleton) {
  auto f = constant(Tensor(Shape{1, 1, 1}, std::vector<float>{7}));
  for (const auto& s : ss2d_expand(f)) EXPECT_EQ(column(s), (std::vector<float>{7}));
}

TEST(Ss2dExpand, RoutesArePermutations) {
  Rng rng(1);
  auto f = constant(Tensor::randn(Shape{3, 4, 5}, rng));
  auto sorted_input = f.value().vec();
  std::sort(sorted_input.begin(), sorted_input.end());
  for (const auto& s : ss2d_expand(f)) {
    auto v = s.value().vec();
    std::sort(v.begin(), v.end());
    EXPECT_EQ(v, sorted_input);
  }
  for (Route r : kRoutes) {
    auto perm = route_permutation(r, 4, 5);
    std::vector<bool> hit(perm.size(), false);
    for (auto i : perm) hit[i] = true;
    EXPECT_TRUE(std::all_of(hit.begin(), hit.end(), [](bool b) { return b; }));
  }
  auto lr = route_permutation(Route::LR, 4, 5), rl = route_permutation(Route::RL, 4, 5);
  std::reverse(lr.begin(), lr.end());
  EXPECT_EQ(lr, rl);
  auto tb = route_permutation(Route::TB, 4, 5), bt = route_permutation(Route::BT, 4, 5);
  std::reverse(tb.begin(), tb.end());
  EXPECT_EQ(tb, bt);
}

TEST(Ss2dExpand, InverseIsBitwiseIdentity) {
  Rng rng(2);
  auto f = constant(Tensor::randn(Shape{3, 4, 5}, rng));
  auto routes = ss2d_expand(f);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_TRUE(merge_route(routes[i], kRoutes[i], 4, 5).value().identical(f.value()));
  }
}

TEST(Ss2d, SkipOnlyGivesFourTimesInput) {
  Rng rng(3);
  ParameterSet<float> ps;
  std::vector<ssm::SsmParams<float>> routes;
  for (int i = 0; i < 4; ++i) routes.push_back(ssm::SsmParams<float>::make(ps, "r" + std::to_string(i), 2, 3, rng));
  for (auto& [name, v] : ps.entries()) {
    if (name.ends_with(".d_skip")) continue;
    auto copy = v;
    for (auto& x : copy.mutable_value().data()) x = 0.0f;
  }
  auto f = constant(Tensor::randn(Shape{2, 3, 4}, rng));
  auto y = ss2d(f, routes).value();
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_FLOAT_EQ(y[i], 4.0f * f.value()[i]);
}

TEST(Ss2d, SingletonIsFourSingleSteps) {
  Rng rng(4);
  ParameterSet<float> ps;
  auto routes = make_routes(ps, 3, 4, rng);
  std::vector<ssm::SsmParams<float>> shared{routes[0]};
  auto f = constant(Tensor::randn(Shape{3, 1, 1}, rng));
  auto y = ss2d(f, shared).value();
  auto single = ssm::s6_forward(ops::to_sequence(f), routes[0]).value();
  for (std::size_t k = 0; k < 3; ++k) EXPECT_FLOAT_EQ(y[k], 4.0f * single[k]);
}

TEST(Ss2d, MatchesPerRouteOracle) {
  for (std::uint64_t seed : {5u, 6u, 7u}) {
    Rng rng(seed);
    ParameterSet<float> ps;
    const std::size_t ch = 3, h = 3, w = 4;
    auto routes = make_routes(ps, ch, 4, rng);
    auto f = constant(Tensor::randn(Shape{ch, h, w}, rng));
    auto y = ss2d(f, routes).value();
    std::vector<double> ref(ch * h * w, 0.0);
    for (std::size_t r = 0; r < 4; ++r) {
      auto perm = route_permutation(kRoutes[r], h, w);
      std::vector<double> seq(h * w * ch);
      for (std::size_t k = 0; k < perm.size(); ++k)
        for (std::size_t c = 0; c < ch; ++c) seq[k * ch + c] = f.value()[c * h * w + perm[k]];
      auto out = naive_s6(seq, h * w, ch, routes[r]);
      for (std::size_t k = 0; k < perm.size(); ++k)
        for (std::size_t c = 0; c < ch; ++c) ref[c * h * w + perm[k]] += out[k * ch + c];
    }
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-5);
  }
}

TEST(Ss2d, TransposeConsistency) {
  Rng rng(8);
  ParameterSet<float> ps;
  auto routes = make_routes(ps, 2, 4, rng);
  auto f = constant(Tensor::randn(Shape{2, 3, 5}, rng));
  auto y = ss2d(f, routes);
  std::vector<ssm::SsmParams<float>> swapped{routes[2], routes[3], routes[0], routes[1]};
  auto yt = ss2d(transpose_hw(f), swapped);
  EXPECT_LT(max_abs_diff(transpose_hw(y).value(), yt.value()), 1e-6);
}

TEST(Ss2d, RejectsWrongChannels) {
  Rng rng(9);
  ParameterSet<float> ps;
  auto routes = make_routes(ps, 2, 4, rng);
  EXPECT_THROW(ss2d(constant(Tensor(Shape{3, 2, 2})), routes), ShapeError);
}

namespace {

VssmBlockParams<float> block(ParameterSet<float>& ps, std::size_t c, ScanMode mode, Rng& rng, bool shared = false) {
  return VssmBlockParams<float>::make(ps, "blk", c, c, 4, mode, shared, rng);
}

}  // namespace

TEST(VssmBlock, ZeroBranchIsBitwiseResidual) {
  Rng rng(10);
  ParameterSet<float> ps;
  auto p = block(ps, 4, ScanMode::ss2d, rng);
  for (auto& x : p.out_proj.weight.mutable_value().data()) x = 0.0f;
  auto f = constant(Tensor::randn(Shape{4, 3, 5}, rng));
  EXPECT_TRUE(vssm_block(f, p).value().identical(f.value()));
}

TEST(VssmBlock, ZeroInputZeroOutput) {
  Rng rng(11);
  ParameterSet<float> ps;
  auto p = block(ps, 4, ScanMode::ss2d, rng);
  auto y = vssm_block(constant(Tensor(Shape{4, 3, 3})), p).value();
  EXPECT_EQ(y.max_abs(), 0.0);
}

TEST(VssmBlock, PreservesShape) {
  Rng rng(12);
  for (auto [c, h, w] : {std::tuple<std::size_t, std::size_t, std::size_t>{3, 1, 1}, {4, 2, 7}, {2, 5, 3}}) {
    ParameterSet<float> ps;
    auto p = block(ps, c, ScanMode::ss2d, rng);
    auto f = constant(Tensor::randn(Shape{c, h, w}, rng));
    EXPECT_EQ(vssm_block(f, p).shape(), f.shape());
  }
}

TEST(VssmBlock, SharedRoutesRegisterOneParameterSet) {
  Rng rng(13);
  ParameterSet<float> a, b;
  auto pa = block(a, 4, ScanMode::ss2d, rng, false);
  auto pb = block(b, 4, ScanMode::ss2d, rng, true);
  EXPECT_EQ(pa.scan.size(), 4u);
  EXPECT_EQ(pb.scan.size(), 1u);
  EXPECT_GT(a.numel(), b.numel());
}

TEST(VssmBlock, SingleRouteMatchesSequenceMode) {
  Rng rng(22);
  ParameterSet<float> ps;
  auto p = block(ps, 3, ScanMode::single, rng);
  EXPECT_EQ(p.scan.size(), 1u);
  auto f = constant(Tensor::randn(Shape{3, 2, 4}, rng));
  EXPECT_EQ(vssm_block(f, p).shape(), f.shape());
}

TEST(VssmBlock, OneDimensionalModeNeedsFlatMap) {
  Rng rng(14);
  ParameterSet<float> ps;
  auto p = block(ps, 3, ScanMode::seq1d, rng);
  EXPECT_EQ(vssm_block(constant(Tensor::randn(Shape{3, 1, 9}, rng)), p).shape(), (Shape{3, 1, 9}));
  EXPECT_THROW(vssm_block(constant(Tensor(Shape{3, 2, 2})), p), ShapeError);
}

TEST(GradCheck, VssmBlockAllModes) {
  for (auto mode : {ScanMode::ss2d, ScanMode::seq1d, ScanMode::single}) {
    for (std::uint64_t seed : {15u, 16u, 17u}) {
      Rng rng(seed);
      ParameterSet<double> ps;
      auto p = VssmBlockParams<double>::make(ps, "b", 3, 4, 2, mode, false, rng);
      for (auto& [name, v] : ps.entries()) {
        if (name.ends_with("delta_bias")) {
          auto copy = v;
          for (auto& x : copy.mutable_value().data()) x = rng.uniform(-1.0, 0.0);
        }
      }
      const Shape shape = mode == ScanMode::seq1d ? Shape{3, 1, 6} : Shape{3, 2, 3};
      std::vector<DVar> inputs{DVar(rand_tensor(shape, rng))};
      for (const auto& [_, v] : ps.entries()) inputs.push_back(v);
      auto err = grad_rel_error([&p](const auto& in) { return weighted_sum(vssm_block(in[0], p)); }, inputs);
      EXPECT_LT(err, 1e-4) << "seed " << seed;
    }
  }
}

TEST(GradCheck, AttentionBlock) {
  for (std::uint64_t seed : {18u, 19u, 20u}) {
    Rng rng(seed);
    ParameterSet<double> ps;
    auto p = AttentionBlockParams<double>::make(ps, "a", 4, rng);
    std::vector<DVar> inputs{DVar(rand_tensor({4, 2, 3}, rng))};
    for (const auto& [_, v] : ps.entries()) inputs.push_back(v);
    auto err = grad_rel_error([&p](const auto& in) { return weighted_sum(attention_block(in[0], p)); }, inputs);
    EXPECT_LT(err, 1e-4) << "seed " << seed;
  }
}

TEST(Mixer, IdentityKindPassesThrough) {
  Rng rng(21);
  ParameterSet<float> ps;
  auto p = MixerParams<float>::make(ps, "m", MixerKind::identity, 4, 4, 2, ScanMode::ss2d, false, rng);
  EXPECT_EQ(ps.count(), 0u);
  auto f = constant(Tensor::randn(Shape{4, 2, 2}, rng));
  EXPECT_TRUE(mixer_forward(f, p).value().identical(f.value()));
}
