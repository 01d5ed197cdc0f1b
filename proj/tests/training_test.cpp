#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mambastyle/training.hpp"
#include "support/gradcheck.hpp"

using namespace mambastyle;
using namespace mambastyle::training;
using testsupport::DTensor;
using testsupport::DVar;
using testsupport::grad_rel_error;
using testsupport::rand_tensor;

namespace {

std::vector<std::vector<float>> snapshot(const ParameterSet<float>& ps) {
  std::vector<std::vector<float>> out;
  for (const auto& [name, v] : ps.entries()) out.push_back(v.value().vec());
  return out;
}

template <typename T>
std::vector<const TrainPair<T>*> all_of(const std::vector<TrainPair<T>>& data) {
  std::vector<const TrainPair<T>*> out;
  for (const auto& p : data) out.push_back(&p);
  return out;
}

}  // namespace

TEST(SynthPair, ZeroEditReusesTheImage) {
  Model m(PipelineConfig::tiny());
  Rng rng(1);
  const auto z = Tensor::randn(Shape{m.config().d_z}, rng);
  const auto p = synth_pair(z, Tensor(m.latent_shape()), m.generator());
  EXPECT_FALSE(p.is_edit());
  EXPECT_EQ(p.x.vec(), p.x_e.vec());
  EXPECT_EQ(p.w_plus.vec(), p.w_plus_e.vec());
}

TEST(SynthPair, EditedLatentIsExactSum) {
  Model m(PipelineConfig::tiny());
  Rng rng(2);
  const auto z = Tensor::randn(Shape{m.config().d_z}, rng);
  const auto d = m.bank().direction(1, 1.0);
  const auto p = synth_pair(z, d, m.generator());
  EXPECT_TRUE(p.is_edit());
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_EQ(p.w_plus_e[i], p.w_plus[i] + d[i]);
  NoGradGuard guard;
  EXPECT_EQ(p.x_e.vec(), stylegen::synthesize(constant(p.w_plus_e), m.generator()).value().vec());
}

TEST(SynthPair, DatasetIsSeeded) {
  Model m(PipelineConfig::tiny());
  const auto a = synth_dataset(m, 6, Rng(4));
  const auto b = synth_dataset(m, 6, Rng(4));
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].x.vec(), b[i].x.vec());
    EXPECT_EQ(a[i].d.vec(), b[i].d.vec());
  }
}

TEST(SynthPair, InversionShareFollowsProbability) {
  auto cfg = PipelineConfig::tiny();
  cfg.p_inv = 0.25;
  Model m(cfg);
  const auto data = synth_dataset(m, 200, Rng(8));
  std::size_t inversions = 0;
  for (const auto& p : data) inversions += p.is_edit() ? 0 : 1;
  EXPECT_NEAR(static_cast<double>(inversions) / 200.0, 0.25, 0.08);
}

// Monte-Carlo sweep: mean image distance grows with the edit norm.
TEST(SynthPair, ImageDistanceGrowsWithEditNorm) {
  Model m(PipelineConfig::tiny());
  Rng rng(5);
  const double norms[] = {0.0, 0.5, 1.0, 2.0, 4.0};
  std::vector<double> mean_dist(5, 0.0);
  for (int s = 0; s < 100; ++s) {
    const auto z = Tensor::randn(Shape{m.config().d_z}, rng);
    const std::size_t k = rng.below(m.bank().size());
    for (std::size_t j = 0; j < 5; ++j) {
      const auto p = synth_pair(z, m.bank().direction(k, norms[j]), m.generator());
      mean_dist[j] += std::sqrt(metrics::mse(p.x, p.x_e)) / 100.0;
    }
  }
  EXPECT_EQ(mean_dist[0], 0.0);
  for (std::size_t j = 1; j < 5; ++j) EXPECT_GT(mean_dist[j], mean_dist[j - 1]) << "norm " << norms[j];
}

TEST(LossEdit, Examples) {
  Rng rng(1);
  const auto w = Tensor::randn(Shape{4, 6}, rng);
  const auto we = Tensor::randn(Shape{4, 6}, rng);
  Tensor d(w.shape()), off(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i) {
    d[i] = we[i] - w[i];
    off[i] = we[i] + 0.1f;
  }
  EXPECT_EQ(losses::loss_edit(constant(we), constant(w), constant(d)).value().item(), 0.0f);
  EXPECT_NEAR(losses::loss_edit(constant(off), constant(w), constant(d)).value().item(), 0.1, 1e-6);

  const auto r = Tensor::randn(w.shape(), rng);
  double brute = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) brute += std::fabs((double(r[i]) - w[i]) - d[i]);
  EXPECT_NEAR(losses::loss_edit(constant(r), constant(w), constant(d)).value().item(), brute / 24.0, 1e-6);
  EXPECT_THROW((void)losses::loss_edit(constant(r), constant(Tensor(Shape{4, 5})), constant(d)), ShapeError);
}

TEST(LossTotal, Examples) {
  Model m(PipelineConfig::tiny());
  Rng rng(3);
  const auto x = Tensor::randn(Shape{3, 16, 16}, rng);
  losses::LossTerms<float> t;
  t.rec = ops::mse(constant(x), constant(x));
  t.perc = losses::perceptual(constant(x), constant(x), m.features());
  EXPECT_EQ(t.rec.value().item(), 0.0f);
  EXPECT_EQ(t.perc.value().item(), 0.0f);

  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + (i % 2 == 0 ? 0.25f : -0.25f);
  t.rec = ops::mse(constant(y), constant(x));
  t.perc = losses::perceptual(constant(y), constant(x), m.features());
  t.edit = constant(Tensor::scalar(0.7f));
  EXPECT_EQ(losses::loss_total(t, {0, 0, 0, 0, 0}).value().item(), 0.0f);
  EXPECT_NEAR(losses::loss_total(t, {1, 0, 0, 0, 0}).value().item(), 0.0625, 1e-6);
  EXPECT_NEAR(losses::loss_total(t, {1, 0, 0, 0, 2}).value().item(), 0.0625 + 1.4, 1e-5);
}

TEST(LossTotal, NonFiniteTermIsNamed) {
  losses::LossTerms<float> t;
  t.rec = constant(Tensor::scalar(0.5f));
  Tensor bad = Tensor::scalar(0.0f);
  bad[0] = std::numeric_limits<float>::quiet_NaN();
  t.edit = constant(bad);
  try {
    (void)losses::loss_total(t, {});
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("edit"), std::string::npos);
  }
}

// Hand-rolled Adam on two scalars; the first gradient (norm 5) is clipped to 1.
TEST(Adam, MatchesReferenceWithClipping) {
  Var p(Tensor(Shape{2}, std::vector<float>{1.0f, -2.0f}), true);
  Adam<float> opt({p}, 0.1);
  opt.set_clip_norm(1.0);
  const std::vector<std::vector<double>> grads = {{3.0, 4.0}, {0.1, -0.2}};
  std::vector<double> ref = {1.0, -2.0}, m(2, 0.0), v(2, 0.0);
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    const auto& g = grads[t - 1];
    const double norm = std::hypot(g[0], g[1]);
    const double f = norm > 1.0 ? 1.0 / norm : 1.0;
    p.zero_grad();
    p.node()->accumulate(Tensor(Shape{2}, std::vector<float>{float(g[0]), float(g[1])}));
    opt.step();
    EXPECT_NEAR(opt.last_norm(), norm, 1e-6);
    for (std::size_t j = 0; j < 2; ++j) {
      m[j] = 0.9 * m[j] + 0.1 * g[j] * f;
      v[j] = 0.999 * v[j] + 0.001 * g[j] * f * g[j] * f;
      const double mh = m[j] / (1 - std::pow(0.9, double(t))), vh = v[j] / (1 - std::pow(0.999, double(t)));
      ref[j] = float(ref[j] - 0.1 * mh / (std::sqrt(vh) + 1e-8));
      EXPECT_NEAR(p.value()[j], ref[j], 1e-6) << "step " << t << " entry " << j;
    }
  }
}

TEST(LrSchedule, WarmupThenCosine) {
  PipelineConfig cfg;
  cfg.lr = 1.0;
  cfg.warmup = 4;
  cfg.lr_schedule = LrSchedule::cosine;
  EXPECT_DOUBLE_EQ(lr_at(cfg, 0, 12), 0.25);
  EXPECT_DOUBLE_EQ(lr_at(cfg, 3, 12), 1.0);
  EXPECT_DOUBLE_EQ(lr_at(cfg, 4, 12), 1.0);
  EXPECT_NEAR(lr_at(cfg, 8, 12), 0.5, 1e-12);
  EXPECT_NEAR(lr_at(cfg, 11, 12), 0.5 * (1 + std::cos(3.14159265358979 * 7 / 8)), 1e-12);
  cfg.lr_schedule = LrSchedule::constant;
  EXPECT_DOUBLE_EQ(lr_at(cfg, 11, 12), 1.0);
}

TEST(Train, AppliesScheduleAndClip) {
  auto cfg = PipelineConfig::tiny();
  cfg.lr = 1e-2;
  cfg.warmup = 2;
  cfg.grad_clip = 1e-3;
  Model m(cfg);
  const auto data = synth_dataset(m, 2, Rng(1));
  TrainOptions opt;
  opt.steps = 4;
  const auto hist = train(m, data, opt);
  ASSERT_EQ(hist.size(), 4u);
  EXPECT_DOUBLE_EQ(hist[0].lr, 5e-3);
  EXPECT_DOUBLE_EQ(hist[1].lr, 1e-2);
  EXPECT_NEAR(hist[3].lr, 5e-3, 1e-12);
  for (const auto& s : hist) EXPECT_GT(s.grad_norm, 0.0);
}

TEST(TrainStep, ZeroLearningRateKeepsParameters) {
  auto cfg = PipelineConfig::tiny();
  Model m(cfg);
  const auto data = synth_dataset(m, 2, Rng(1));
  const auto before = snapshot(m.trainable());
  Adam<float> opt(m.trainable().trainable(), 0.0);
  const auto s = train_step(m, all_of(data), weights_from(cfg), opt);
  EXPECT_GT(s.loss, 0.0);
  EXPECT_EQ(snapshot(m.trainable()), before);
}

TEST(TrainStep, GeneratorAndFeaturesStayFrozen) {
  auto cfg = PipelineConfig::tiny();
  cfg.steps = 5;
  Model m(cfg);
  const auto data = synth_dataset(m, 4, Rng(1));
  const auto gen = snapshot(m.generator_params());
  const auto enc = snapshot(m.trainable());
  std::vector<std::vector<float>> feats;
  for (const auto& c : m.features().stages) feats.push_back(c.weight.value().vec());
  TrainOptions opt;
  opt.steps = 5;
  (void)train(m, data, opt);
  EXPECT_EQ(snapshot(m.generator_params()), gen);
  for (std::size_t s = 0; s < 3; ++s) EXPECT_EQ(m.features().stages[s].weight.value().vec(), feats[s]);
  EXPECT_NE(snapshot(m.trainable()), enc);
}

TEST(TrainStep, NonFiniteInputAbortsWithoutUpdate) {
  auto cfg = PipelineConfig::tiny();
  Model m(cfg);
  auto data = synth_dataset(m, 2, Rng(1));
  data[1].x[5] = std::numeric_limits<float>::infinity();
  const auto before = snapshot(m.trainable());
  Adam<float> opt(m.trainable().trainable(), 1e-2);
  EXPECT_THROW((void)train_step(m, all_of(data), weights_from(cfg), opt), NumericalError);
  EXPECT_EQ(snapshot(m.trainable()), before);
  EXPECT_EQ(opt.steps(), 0u);
}

TEST(TrainStep, OverfitsOneBatch) {
  auto cfg = PipelineConfig::tiny();
  Model m(cfg);
  const auto data = synth_dataset(m, 2, Rng(3));
  Adam<float> opt(m.trainable().trainable(), 1e-3);
  std::vector<double> windows(20, 0.0);
  for (std::size_t step = 0; step < 200; ++step) {
    windows[step / 10] += train_step(m, all_of(data), weights_from(cfg), opt).loss / 10.0;
  }
  for (std::size_t w = 1; w < windows.size(); ++w) EXPECT_LT(windows[w], windows[w - 1]) << "window " << w;
}

TEST(TrainStep, InversionOnlyBatchHasNoEditTerm) {
  auto cfg = PipelineConfig::tiny();
  cfg.p_inv = 1.0;
  Model m(cfg);
  const auto data = synth_dataset(m, 2, Rng(3));
  Adam<float> opt(m.trainable().trainable(), cfg.lr);
  const auto s = train_step(m, all_of(data), weights_from(cfg), opt);
  EXPECT_EQ(s.edits, 0u);
  EXPECT_EQ(s.edit, 0.0);
}

// End-to-end encode -> fuse -> dispatch -> loss, 32 sampled trainable
// entries, central differences in double. The step stays small so probes
// rarely straddle a ReLU kink in the feature net.
TEST(TrainStep, EndToEndGradientsMatchFiniteDifferences) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto cfg = PipelineConfig::tiny();
    cfg.seed = seed;
    BasicModel<double> m(cfg);
    Rng rng(seed + 40);
    auto out_w = m.trainable().get("fuser.out.weight");
    out_w.mutable_value() = rand_tensor(out_w.shape(), rng, -0.3, 0.3);
    const auto z = BasicTensor<double>::randn(Shape{cfg.d_z}, rng);
    const auto pair = synth_pair(z, m.bank().direction(0, 1.0).cast<double>(), m.generator());
    const auto w = weights_from(cfg);

    std::vector<DVar> inputs;
    for (const char* name : {"enc.stem.weight", "enc.stage2.block0.conv1.weight", "enc.refine3.out_proj.weight",
                             "enc.head1.proj.weight", "fuser.dir.ssm.c_proj", "fuser.feat.0.weight",
                             "fuser.mod.1.kernel", "fuser.out.weight"}) {
      inputs.push_back(m.trainable().get(name));
    }
    const double err = grad_rel_error(
        [&](const std::vector<DVar>&) { return losses::loss_total(pair_terms(m, pair, w), w); }, inputs, 1e-6, 4,
        seed);
    EXPECT_LT(err, 1e-3) << "seed " << seed;
  }
}

TEST(Train, SeededRunsAreBitIdentical) {
  auto cfg = PipelineConfig::tiny();
  TrainOptions opt;
  opt.steps = 6;
  Model a(cfg), b(cfg);
  (void)train(a, synth_dataset(a, 4, Rng(2)), opt);
  (void)train(b, synth_dataset(b, 4, Rng(2)), opt);
  EXPECT_EQ(snapshot(a.trainable()), snapshot(b.trainable()));
}

TEST(Train, LogHasOneRecordPerStep) {
  auto cfg = PipelineConfig::tiny();
  Model m(cfg);
  std::ostringstream log;
  TrainOptions opt;
  opt.steps = 3;
  opt.log = &log;
  (void)train(m, synth_dataset(m, 4, Rng(2)), opt);
  std::istringstream in(log.str());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    const auto rec = nlohmann::json::parse(line);
    EXPECT_EQ(rec.at("step").get<std::size_t>(), n);
    for (const char* key : {"loss", "rec", "perc", "id", "struct", "edit", "ms"}) EXPECT_TRUE(rec.contains(key));
    ++n;
  }
  EXPECT_EQ(n, 3u);
}

TEST(Evaluate, ReportsInversionAndEditMetrics) {
  auto cfg = PipelineConfig::tiny();
  cfg.resolution = 32;
  cfg.layers = 7;
  cfg.gen_channels = {6, 5, 4, 4};
  cfg.inject_layer = 5;
  Model m(cfg);
  const auto data = synth_dataset(m, 4, Rng(6));
  const auto e = evaluate(m, data);
  EXPECT_EQ(e.pairs, 4u);
  EXPECT_GT(e.inversion_mse, 0.0);
  EXPECT_GE(e.inversion_ms_ssim, 0.0);
  EXPECT_LE(e.inversion_ms_ssim, 1.0);
}

TEST(Evaluate, SkipsMsSsimBelowMinimumSide) {
  Model m(PipelineConfig::tiny());
  const auto e = evaluate(m, synth_dataset(m, 2, Rng(7)));
  EXPECT_TRUE(std::isnan(e.inversion_ms_ssim));
  EXPECT_GT(e.inversion_mse, 0.0);
}
