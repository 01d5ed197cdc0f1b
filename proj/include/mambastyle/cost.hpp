#pragma once

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "mambastyle/autodiff.hpp"
#include "mambastyle/pipeline.hpp"
#include "mambastyle/ssm.hpp"

namespace mambastyle::cost {

// MACs charged per (step, channel, state) by the S6 kernels: Bbar*x, the
// state update and the C readout.
inline constexpr std::uint64_t kScanMacsPerState = 3;

struct CostReport {
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  double latency_ms = 0.0;

  [[nodiscard]] double gmacs() const { return static_cast<double>(macs) / 1e9; }
};

/// Median wall time of `trials` calls after `warmup` untimed ones.
template <typename F>
double median_ms(F&& f, std::size_t trials = 30, std::size_t warmup = 5) {
  for (std::size_t i = 0; i < warmup; ++i) f();
  std::vector<double> t(trials);
  for (auto& v : t) {
    const auto start = std::chrono::steady_clock::now();
    f();
    v = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  }
  if (t.empty()) return 0.0;
  std::nth_element(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(t.size() / 2), t.end());
  return t[t.size() / 2];
}

/// MACs issued by one call of `f`.
template <typename F>
std::uint64_t count_macs_of(F&& f) {
  MacCounter counter;
  f();
  return counter.count();
}

/// Inference cost of the full pipeline on one R x R image: generator,
/// encoder and fuser parameters; MACs and latency of one edit.
template <typename T>
CostReport measure(const BasicModel<T>& model, std::size_t trials = 30, std::size_t warmup = 5) {
  const auto& cfg = model.config();
  Rng rng(cfg.seed);
  const auto x = BasicTensor<T>::uniform(Shape{3, cfg.resolution, cfg.resolution}, rng, -1.0, 1.0);
  const auto d = model.bank().direction(0, 1.0).template cast<T>();
  CostReport r;
  r.params = model.generator_params().numel() + model.trainable().numel();
  r.macs = count_macs_of([&] { (void)model.edit(x, d); });
  r.latency_ms = median_ms([&] { (void)model.edit(x, d); }, trials, warmup);
  return r;
}

struct ScanTiming {
  std::size_t length = 0;
  double median_ms = 0.0;
  double ratio = 0.0;  // to the previous row; 0 for the first
};

/// Median s6_forward latency over a ladder of sequence lengths.
inline std::vector<ScanTiming> scan_scaling(const std::vector<std::size_t>& lengths, std::size_t channels,
                                            std::size_t states, ssm::ScanAlgo algo = ssm::ScanAlgo::sequential,
                                            std::size_t trials = 30, std::size_t warmup = 5) {
  ParameterSet<float> ps;
  Rng rng(17);
  const auto p = ssm::SsmParams<float>::make(ps, "scan", channels, states, rng);
  std::vector<ScanTiming> rows;
  NoGradGuard guard;
  for (std::size_t len : lengths) {
    const auto x = constant(Tensor::randn(Shape{len, channels}, rng));
    ScanTiming row;
    row.length = len;
    row.median_ms =
        median_ms([&] { (void)ssm::s6_forward(x, p, ssm::ZohMode::simplified, algo); }, trials, warmup);
    if (!rows.empty()) row.ratio = row.median_ms / rows.back().median_ms;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace mambastyle::cost
