#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "estsel/rng.hpp"
#include "estsel/tmle.hpp"
#include "estsel/views.hpp"

namespace estsel {

/// Static treatment regimen a(0..horizon) with censoring set to zero.
struct Regimen {
  std::vector<int> treatment;

  size_t horizon() const { return treatment.empty() ? 0 : treatment.size() - 1; }
  static Regimen constant(int value, size_t horizon) { return {std::vector<int>(horizon + 1, value)}; }
  friend bool operator==(const Regimen&, const Regimen&) = default;
};

enum class VarianceMethod { InfluenceCurve, Bootstrap, CrossValidatedIC };

std::string_view to_string(VarianceMethod method);
std::optional<VarianceMethod> parse_variance_method(std::string_view text);

struct LtmleConfig {
  NuisanceConfig nuisance;
  std::optional<double> cumulative_bound = 40.0;  // cap on |H_t|
  VarianceMethod variance = VarianceMethod::InfluenceCurve;
  size_t bootstrap_replicates = 200;
  bool percentile_ci = false;
  EffectScale scale = EffectScale::Difference;

  void validate() const;
};

/// Treatment-specific mean under `regimen` by targeted iterated conditional
/// expectations. Inference always uses the influence curve.
EstimateResult ice_mean(const LongitudinalData& data, const Regimen& regimen, const LtmleConfig& cfg,
                        const FoldPlan& folds);

/// psi(regimen1) - psi(regimen0) (or their ratio) using one set of
/// treatment and censoring fits. `stream` drives bootstrap replicates.
EstimateResult ltmle_contrast(const LongitudinalData& data, const Regimen& regimen1, const Regimen& regimen0,
                              const LtmleConfig& cfg, const FoldPlan& folds, SeededStream stream = {});

struct BootstrapResult {
  double variance = 0.0;
  double se = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  size_t failures = 0;
  std::vector<double> replicates;
};

/// The closure receives resampled unit indices and a stream for the
/// replicate's own randomness (fold plans).
using BootstrapClosure = std::function<double(std::span<const size_t>, SeededStream)>;

/// Replicate b uses stream.substream(b). Wald CI around `point` with the
/// bootstrap SE unless `percentile` is set.
BootstrapResult bootstrap_variance(size_t n_units, const BootstrapClosure& estimator, size_t replicates,
                                   SeededStream stream, double point, bool percentile = false);

}  // namespace estsel
