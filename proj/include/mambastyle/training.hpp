#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mambastyle/losses.hpp"
#include "mambastyle/metrics.hpp"
#include "mambastyle/optim.hpp"
#include "mambastyle/pipeline.hpp"

namespace mambastyle::training {

/// One synthetic example: X = G(w+), X_e = G(w+ + d).
template <typename T>
struct TrainPair {
  BasicTensor<T> z;
  BasicTensor<T> d;
  BasicTensor<T> w_plus;
  BasicTensor<T> w_plus_e;
  BasicTensor<T> x;
  BasicTensor<T> x_e;

  [[nodiscard]] bool is_edit() const { return d.max_abs() != 0.0; }
};

template <typename T>
TrainPair<T> synth_pair(const BasicTensor<T>& z, const BasicTensor<T>& d,
                        const stylegen::GeneratorParams<T>& g) {
  NoGradGuard guard;
  TrainPair<T> p;
  p.z = z;
  p.d = d;
  p.w_plus = stylegen::mapping(constant(z), g).value();
  p.w_plus_e = ops::add(constant(p.w_plus), constant(d)).value();
  p.x = stylegen::synthesize(constant(p.w_plus), g).value();
  p.x_e = p.is_edit() ? stylegen::synthesize(constant(p.w_plus_e), g).value() : p.x;
  return p;
}

/// `n` pairs; each direction is zeroed with probability p_inv.
template <typename T>
std::vector<TrainPair<T>> synth_dataset(const BasicModel<T>& model, std::size_t n, Rng rng) {
  const auto& cfg = model.config();
  std::vector<TrainPair<T>> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto z = BasicTensor<T>::randn(Shape{cfg.d_z}, rng);
    BasicTensor<T> d(model.latent_shape());
    if (rng.uniform() >= cfg.p_inv) {
      d = model.bank().sample(rng, cfg.edit_norm_min, cfg.edit_norm_max).template cast<T>();
    }
    out.push_back(synth_pair(z, d, model.generator()));
  }
  return out;
}

inline losses::LossWeights weights_from(const PipelineConfig& cfg) {
  losses::LossWeights w{cfg.lambda_rec, cfg.lambda_perc, cfg.lambda_id, cfg.lambda_struct, cfg.lambda_edit};
  if (cfg.disable_loss_edit) w.edit = 0.0;
  return w;
}

struct StepStats {
  double loss = 0.0;
  double rec = 0.0;
  double perc = 0.0;
  double edit = 0.0;
  std::size_t edits = 0;
  double grad_norm = 0.0;  // before clipping
  double lr = 0.0;
  double ms = 0.0;
};

/// Loss of a single pair: the inversion path always, the edit path and
/// the latent-consistency term when the pair carries a direction.
template <typename T>
losses::LossTerms<T> pair_terms(const BasicModel<T>& model, const TrainPair<T>& p, const losses::LossWeights& w) {
  using losses::named_term;
  const auto x = constant(p.x);
  const auto enc = encoder::encode(x, model.encoder());
  const auto zero = constant(BasicTensor<T>(model.latent_shape()));
  const auto inv = model.run_encoded(enc, zero);

  losses::LossTerms<T> t;
  std::vector<std::pair<BasicVar<T>, BasicVar<T>>> images{{inv.image, x}};
  if (p.is_edit()) {
    const auto d = constant(p.d);
    const auto ed = model.run_encoded(enc, d);
    images.emplace_back(ed.image, constant(p.x_e));
    if (w.edit > 0.0) {
      t.edit = named_term<T>("edit", [&] {
        const auto enc_e = encoder::encode(constant(p.x_e), model.encoder());
        return losses::loss_edit(enc_e.w_prime, enc.w_prime, d);
      });
    }
  }
  const double inv_n = 1.0 / static_cast<double>(images.size());
  t.rec = named_term<T>("rec", [&] {
    BasicVar<T> s;
    for (const auto& [a, b] : images) s = s.defined() ? ops::add(s, ops::mse(a, b)) : ops::mse(a, b);
    return ops::scale(s, inv_n);
  });
  if (w.perc > 0.0) {
    t.perc = named_term<T>("perc", [&] {
      BasicVar<T> s;
      for (const auto& [a, b] : images) {
        auto v = losses::perceptual(a, b, model.features());
        s = s.defined() ? ops::add(s, v) : v;
      }
      return ops::scale(s, inv_n);
    });
  }
  return t;
}

/// Forward, backward and one Adam update over `batch`. Gradients of the
/// per-pair losses are averaged. A NumericalError leaves parameters as they
/// were and propagates.
template <typename T>
StepStats train_step(BasicModel<T>& model, const std::vector<const TrainPair<T>*>& batch,
                     const losses::LossWeights& w, Adam<T>& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  StepStats s;
  opt.zero_grad();
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  try {
    for (const auto* p : batch) {
      auto terms = pair_terms(model, *p, w);
      auto total = losses::loss_total(terms, w);
      s.loss += total.value().item() * inv_b;
      s.rec += terms.rec.value().item() * inv_b;
      if (terms.perc.defined()) s.perc += terms.perc.value().item() * inv_b;
      if (terms.edit.defined()) {
        s.edit += terms.edit.value().item();
        ++s.edits;
      }
      backward(ops::scale(total, inv_b));
    }
    opt.step();
    s.grad_norm = opt.last_norm();
  } catch (const NumericalError&) {
    opt.zero_grad();
    throw;
  }
  opt.zero_grad();
  if (s.edits > 0) s.edit /= static_cast<double>(s.edits);
  s.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return s;
}

inline nlohmann::json log_record(std::size_t step, const StepStats& s) {
  return {{"step", step}, {"loss", s.loss}, {"rec", s.rec}, {"perc", s.perc}, {"id", 0.0}, {"struct", 0.0},
          {"edit", s.edit}, {"grad_norm", s.grad_norm}, {"lr", s.lr}, {"ms", s.ms}};
}

/// Learning rate for `step` of `total`: linear warmup, then constant or
/// cosine decay to zero.
inline double lr_at(const PipelineConfig& cfg, std::size_t step, std::size_t total) {
  if (step < cfg.warmup) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup);
  if (cfg.lr_schedule == LrSchedule::constant || total <= cfg.warmup) return cfg.lr;
  const double progress = static_cast<double>(step - cfg.warmup) / static_cast<double>(total - cfg.warmup);
  return cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

struct TrainOptions {
  std::size_t steps = 0;
  std::ostream* log = nullptr;  // newline-delimited JSON, one record per step
  std::function<void(std::size_t, const StepStats&)> on_step;
};

/// Runs `opt.steps` updates over batches drawn in a fixed shuffled order.
template <typename T>
std::vector<StepStats> train(BasicModel<T>& model, const std::vector<TrainPair<T>>& data, const TrainOptions& opt) {
  const auto& cfg = model.config();
  if (data.empty()) throw ConfigError("train: empty dataset");
  Adam<T> adam(model.trainable().trainable(), cfg.lr, cfg.beta1, cfg.beta2);
  adam.set_clip_norm(cfg.grad_clip);
  const auto weights = weights_from(cfg);
  Rng rng = Rng(cfg.seed).split(5);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  std::vector<StepStats> history;
  history.reserve(opt.steps);
  for (std::size_t step = 0; step < opt.steps; ++step) {
    std::vector<const TrainPair<T>*> batch;
    while (batch.size() < std::min(cfg.batch, data.size())) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        cursor = 0;
      }
      batch.push_back(&data[order[cursor++]]);
    }
    adam.set_lr(lr_at(cfg, step, opt.steps));
    auto s = train_step(model, batch, weights, adam);
    s.lr = adam.lr();
    history.push_back(s);
    if (opt.log != nullptr) *opt.log << log_record(step, s).dump() << '\n';
    if (opt.on_step) opt.on_step(step, s);
  }
  return history;
}

struct EvalSummary {
  double inversion_mse = 0.0;
  double inversion_ms_ssim = 0.0;  // NaN below the 32 px MS-SSIM minimum
  double inversion_perceptual = 0.0;
  double edit_mse = 0.0;
  double loss_edit = 0.0;
  std::size_t pairs = 0;
  std::size_t edits = 0;
};

/// Train-set metrics: every pair is inverted, pairs with a direction are
/// also edited and scored with the latent-consistency loss.
template <typename T>
EvalSummary evaluate(const BasicModel<T>& model, const std::vector<TrainPair<T>>& data) {
  NoGradGuard guard;
  EvalSummary s;
  const auto zero = constant(BasicTensor<T>(model.latent_shape()));
  const bool ssim = model.config().resolution >= 32;
  for (const auto& p : data) {
    const auto enc = encoder::encode(constant(p.x), model.encoder());
    const auto inv = model.run_encoded(enc, zero).image.value();
    s.inversion_mse += metrics::mse(inv, p.x);
    if (ssim) s.inversion_ms_ssim += metrics::ms_ssim(inv, p.x);
    s.inversion_perceptual += metrics::perceptual_distance(inv, p.x, model.features());
    ++s.pairs;
    if (p.is_edit()) {
      const auto d = constant(p.d);
      s.edit_mse += metrics::mse(model.run_encoded(enc, d).image.value(), p.x_e);
      const auto enc_e = encoder::encode(constant(p.x_e), model.encoder());
      s.loss_edit += losses::loss_edit(enc_e.w_prime, enc.w_prime, d).value().item();
      ++s.edits;
    }
  }
  if (s.pairs > 0) {
    s.inversion_mse /= static_cast<double>(s.pairs);
    s.inversion_ms_ssim = ssim ? s.inversion_ms_ssim / static_cast<double>(s.pairs)
                               : std::numeric_limits<double>::quiet_NaN();
    s.inversion_perceptual /= static_cast<double>(s.pairs);
  }
  if (s.edits > 0) {
    s.edit_mse /= static_cast<double>(s.edits);
    s.loss_edit /= static_cast<double>(s.edits);
  }
  return s;
}

}  // namespace mambastyle::training
