#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "mambastyle/config.hpp"
#include "mambastyle/encoder.hpp"
#include "mambastyle/fuser.hpp"
#include "mambastyle/losses.hpp"
#include "mambastyle/params.hpp"
#include "mambastyle/stylegen.hpp"

namespace mambastyle {

/// Generator, encoder, optional fuser, direction bank and the frozen
/// feature network, built from one validated config.
template <typename T>
class BasicModel {
 public:
  explicit BasicModel(const PipelineConfig& cfg)
      : cfg_((cfg.validate(), cfg)), bank_(cfg.bank_size, cfg.layers, cfg.d_w, Rng(cfg.generator_seed).split(7)) {
    Rng gen_rng = Rng(cfg.generator_seed).split(1);
    generator_ = stylegen::GeneratorParams<T>::make(generator_params_, cfg, gen_rng);
    generator_params_.set_trainable(false);

    Rng rng = Rng(cfg.seed).split(2);
    encoder_ = encoder::EncoderParams<T>::make(trainable_, cfg, rng);
    if (!cfg.disable_fuser) {
      fuser_ = fuser::FuserParams<T>::make(trainable_, cfg, generator_.inject_shape()[0], rng);
    }
    Rng feat_rng = Rng(cfg.feature_seed).split(3);
    features_ = losses::FeatureNet<T>::make(feature_params_, feat_rng);

    encoder_.set_latent_offset(mean_latent(256));
    check_contracts();
  }

  BasicModel(const BasicModel&) = delete;
  BasicModel& operator=(const BasicModel&) = delete;
  BasicModel(BasicModel&&) noexcept = default;

  [[nodiscard]] const PipelineConfig& config() const { return cfg_; }
  [[nodiscard]] const stylegen::GeneratorParams<T>& generator() const { return generator_; }
  [[nodiscard]] const encoder::EncoderParams<T>& encoder() const { return encoder_; }
  [[nodiscard]] bool has_fuser() const { return fuser_.has_value(); }
  [[nodiscard]] const fuser::FuserParams<T>& fuser() const { return *fuser_; }
  [[nodiscard]] const stylegen::DirectionBank& bank() const { return bank_; }
  [[nodiscard]] const losses::FeatureNet<T>& features() const { return features_; }

  /// Encoder + fuser parameters.
  [[nodiscard]] ParameterSet<T>& trainable() { return trainable_; }
  [[nodiscard]] const ParameterSet<T>& trainable() const { return trainable_; }
  [[nodiscard]] ParameterSet<T>& generator_params() { return generator_params_; }
  [[nodiscard]] const ParameterSet<T>& generator_params() const { return generator_params_; }

  /// Every inference parameter: generator first, then encoder and fuser.
  [[nodiscard]] std::vector<std::pair<std::string, BasicVar<T>>> inference_params() const {
    auto all = generator_params_.entries();
    const auto& rest = trainable_.entries();
    all.insert(all.end(), rest.begin(), rest.end());
    return all;
  }

  [[nodiscard]] Shape latent_shape() const { return Shape{cfg_.layers, cfg_.d_w}; }

  struct Forward {
    BasicVar<T> w_prime;
    BasicVar<T> h3_hat;
    BasicVar<T> f_k;  // undefined without a fuser
    BasicVar<T> w_hat;
    BasicVar<T> image;
  };

  /// encode -> fuse -> dispatch for image x and direction d.
  [[nodiscard]] Forward run(const BasicVar<T>& x, const BasicVar<T>& d) const {
    auto enc = encoder::encode(x, encoder_);
    return run_encoded(enc, d);
  }

  /// fuse -> dispatch reusing an encoder output.
  [[nodiscard]] Forward run_encoded(const encoder::Encoded<T>& enc, const BasicVar<T>& d) const {
    Forward out;
    out.w_prime = enc.w_prime;
    out.h3_hat = enc.h3_hat;
    if (fuser_) out.f_k = fuser::fuse(enc.h3_hat, d, *fuser_);
    auto disp = stylegen::dispatch(enc.w_prime, out.f_k, d, generator_);
    out.w_hat = disp.w_hat;
    out.image = disp.image;
    return out;
  }

  [[nodiscard]] BasicTensor<T> invert(const BasicTensor<T>& x) const {
    NoGradGuard guard;
    return run(constant(x), constant(BasicTensor<T>(latent_shape()))).image.value();
  }

  [[nodiscard]] BasicTensor<T> edit(const BasicTensor<T>& x, const BasicTensor<T>& d) const {
    NoGradGuard guard;
    return run(constant(x), constant(d)).image.value();
  }

  /// Mean of mapping(z) over `n` fixed samples.
  [[nodiscard]] BasicTensor<T> mean_latent(std::size_t n) const {
    NoGradGuard guard;
    Rng rng = Rng(cfg_.generator_seed).split(11);
    BasicTensor<T> acc(latent_shape());
    std::vector<double> sum(acc.size(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      auto w = stylegen::mapping(constant(BasicTensor<T>::randn(Shape{cfg_.d_z}, rng)), generator_).value();
      for (std::size_t j = 0; j < sum.size(); ++j) sum[j] += w[j];
    }
    for (std::size_t j = 0; j < sum.size(); ++j) acc[j] = static_cast<T>(sum[j] / static_cast<double>(n));
    return acc;
  }

 private:
  void check_contracts() const {
    std::size_t rows = 0;
    for (auto r : encoder_.rows) rows += r;
    if (rows != cfg_.layers) {
      throw ConfigError("encoder heads produce " + std::to_string(rows) + " rows for " +
                        std::to_string(cfg_.layers) + " generator layers");
    }
    const Shape h3{cfg_.enc_channels[2], cfg_.h3_side(), cfg_.h3_side()};
    if (fuser_ && (fuser_->h3_channels != h3[0] || fuser_->side != h3[1])) {
      throw ConfigError("fuser input does not match the encoder's H3 shape " + shape_str(h3));
    }
    if (fuser_) {
      std::size_t res = cfg_.h3_side();
      for (const auto& m : fuser_->modulated) {
        if (m.upsample) res *= 2;
      }
      for (std::size_t i = 0; i < fuser_->extra_upsamples; ++i) res *= 2;
      const Shape fk{fuser_->out.weight.dim(0), res, res};
      if (fk != generator_.inject_shape()) {
        throw ConfigError("fuser output " + shape_str(fk) + " does not match generator layer " +
                          std::to_string(cfg_.inject_layer) + " activation " + shape_str(generator_.inject_shape()));
      }
    }
  }

  PipelineConfig cfg_;
  ParameterSet<T> generator_params_;
  ParameterSet<T> trainable_;
  ParameterSet<T> feature_params_;
  stylegen::GeneratorParams<T> generator_;
  encoder::EncoderParams<T> encoder_;
  std::optional<fuser::FuserParams<T>> fuser_;
  stylegen::DirectionBank bank_;
  losses::FeatureNet<T> features_;
};

using Model = BasicModel<float>;

}  // namespace mambastyle
