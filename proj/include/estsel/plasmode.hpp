#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "estsel/learners.hpp"
#include "estsel/ltmle.hpp"
#include "estsel/rng.hpp"
#include "estsel/tmle.hpp"
#include "estsel/views.hpp"

namespace estsel {

enum class TruthMethod { NullByDesign, MonteCarloGformula };

std::string_view to_string(TruthMethod method);

/// For Ratio scale `mc_se` refers to log(value).
struct TrueEffect {
  EffectScale scale = EffectScale::Difference;
  double value = 0.0;
  double mc_se = 0.0;
  TruthMethod method = TruthMethod::NullByDesign;

  static TrueEffect null_by_design(EffectScale scale);
  bool is_null() const;
};

// ---- outcome-blind --------------------------------------------------------

enum class NodeKind { TimeVarying, Treatment, Censoring, Outcome };

struct OutcomeBlindSpec {
  std::vector<double> lambda_grid{0.001, 0.01, 0.1, 1.0};
  size_t cv_folds = 5;
  /// Periods of history (L and A) each conditional model sees besides W.
  size_t history_lags = 1;
  /// Replaces the main-term coefficient of every treatment input in the
  /// time-varying covariate and outcome models; interactions with treatment
  /// are zeroed.
  std::optional<double> treatment_override;
  /// Shifts each treatment model's intercept so that its mean prediction on
  /// the source equals this prevalence.
  std::optional<double> exposure_prevalence;
};

/// One fitted conditional model. History is a flat vector of slots:
/// W, then per time L(t), A(t), C(t), and finally Y.
struct GeneratorNode {
  std::string name;
  NodeKind kind = NodeKind::Outcome;
  size_t time = 0;
  size_t slot = 0;
  std::vector<size_t> inputs;
  std::vector<std::string> term_names;  // intercept first
  Eigen::VectorXd coefficients;         // aligned with term_names; empty when constant
  std::optional<double> constant;       // response was constant on the source
  Family family = Family::Binomial;
  double lambda = 0.0;
  double residual_sd = 0.0;  // Gaussian nodes
  double shift = 0.0;        // rarity shift already added to the intercept
  bool fallback = false;
  size_t fitted_rows = 0;

  double linear_predictor(const double* history) const;
  /// E[node | history]: a probability for binary nodes.
  double mean(const double* history) const;
  double draw(const double* history, SeededStream& stream) const;
};

struct OutcomeBlindGenerator {
  LongitudinalData source;  // baseline rows are resampled from here
  OutcomeBlindSpec spec;
  std::vector<GeneratorNode> nodes;  // in simulation order
  size_t slots = 0;

  size_t slot_w(size_t j) const { return j; }
  size_t slot_l(size_t t, size_t j) const;
  size_t slot_a(size_t t) const;
  size_t slot_c(size_t t) const;
  size_t slot_y() const;
  const GeneratorNode& node(std::string_view name) const;
};

/// Fits every conditional model in acyclic order (ridge logistic with
/// pairwise interactions; Gaussian ridge for continuous nodes), picking the
/// penalty by V-fold CV. `stream` drives the fold plans.
OutcomeBlindGenerator fit_generative_models(const LongitudinalData& source, const OutcomeBlindSpec& spec,
                                            SeededStream stream);
OutcomeBlindGenerator fit_generative_models(const Dataset& source, const OutcomeBlindSpec& spec, SeededStream stream);

/// Baseline (W, L(0)) rows resampled from the source; everything after is simulated.
LongitudinalData outcome_blind_generate(const OutcomeBlindGenerator& generator, size_t n, SeededStream stream);

/// Replicate j uses stream.substream(j) under both regimens (common random
/// numbers). The terminal outcome contributes its conditional mean.
TrueEffect compute_truth(const OutcomeBlindGenerator& generator, const Regimen& regimen1, const Regimen& regimen0,
                         EffectScale scale, size_t replicates, SeededStream stream, int workers = 0);

/// Per-replicate counterfactual outcome means; the kernel behind compute_truth.
/// `workers` = 1 runs the serial reference loop.
std::vector<double> counterfactual_outcomes(const OutcomeBlindGenerator& generator, const Regimen& regimen,
                                            size_t replicates, SeededStream stream, int workers = 0);

TrueEffect contrast_truth(std::span<const double> y1, std::span<const double> y0, EffectScale scale);

// ---- treatment-blind ------------------------------------------------------

/// Logistic model for P(Delta = 1) on cluster covariates, individual
/// covariates and the (permuted) treatment, written by a separate party.
struct MissingnessMechanism {
  double intercept = 0.0;
  std::vector<std::pair<std::string, double>> coefficients;
  std::string sha256;  // of the text it was parsed from

  static MissingnessMechanism parse(std::string_view json_text);
  static MissingnessMechanism load(const std::filesystem::path& path);
};

struct TreatmentBlindSpec {
  MissingnessMechanism mechanism;
  std::vector<int> strata;  // per cluster; empty for an unrestricted permutation
};

struct TreatmentBlindDraw {
  ClusterStudyData data;
  TrueEffect truth;
};

/// Permutes cluster treatment (within strata), redraws Delta and blanks Y.
/// Individuals whose source outcome is missing stay unmeasured.
TreatmentBlindDraw treatment_blind_generate(const ClusterStudyData& source, const TreatmentBlindSpec& spec,
                                            EffectScale scale, SeededStream stream);

std::string sha256_hex(std::string_view bytes);

}  // namespace estsel
