#pragma once

#include <optional>
#include <string>
#include <vector>

#include "estsel/ltmle.hpp"
#include "estsel/rng.hpp"
#include "estsel/tmle.hpp"
#include "estsel/views.hpp"

namespace estsel {

enum class Stage1Method { EmpiricalMean, TmleParametric, TmleSuperLearner };

std::string_view to_string(Stage1Method method);
std::optional<Stage1Method> parse_stage1_method(std::string_view text);

struct ClusterSummary {
  std::string id;
  double endpoint = 0.0;  // missingness-adjusted cluster mean, in [0,1]
  double se = 0.0;
  double treatment = 0.0;
  Eigen::VectorXd covariates;
  size_t individuals = 0;
  Stage1Method method = Stage1Method::EmpiricalMean;
  Diagnostics diagnostics;
};

struct ClusterSummaries {
  std::vector<std::string> covariate_names;
  std::vector<ClusterSummary> clusters;

  size_t size() const { return clusters.size(); }
  Eigen::VectorXd endpoints() const;
  Eigen::VectorXd treatment() const;
  Eigen::MatrixXd covariates() const;
};

/// Library used by TmleSuperLearner when the nuisance config does not name one.
std::vector<LearnerSpec> default_library();

/// Runs the missing-outcome estimator separately inside every cluster. Cluster c
/// draws its fold plan from stream.substream(c).
ClusterSummaries stage1_endpoints(const ClusterStudyData& data, Stage1Method method, const NuisanceConfig& cfg,
                                  SeededStream stream);

/// Indices into the cluster covariates; empty means unadjusted.
using AdjustmentSet = std::vector<size_t>;

struct ApsConfig {
  std::vector<AdjustmentSet> candidates{AdjustmentSet{}};
  size_t folds = 0;  // 0: 10, reduced below 20 clusters
  std::vector<int> strata;

  /// Unadjusted plus each listed covariate alone.
  static ApsConfig limited(const std::vector<size_t>& shortlist);
  /// Unadjusted, every singleton, then the listed pairs.
  static ApsConfig expanded(size_t n_covariates, const std::vector<std::pair<size_t, size_t>>& pairs = {});
};

struct ApsSelection {
  size_t index = 0;
  AdjustmentSet adjustment;
  std::vector<double> cv_variance;  // per candidate
  FoldPlan folds;
};

ApsSelection adaptive_prespec(const ClusterSummaries& summaries, const ApsConfig& aps, SeededStream stream,
                              EffectScale scale = EffectScale::Ratio, double p_treated = 0.5);

/// Cross-validated IC variance of the Stage-2 estimator (already divided by N).
double cv_ic_variance(const ClusterSummaries& summaries, const AdjustmentSet& adjustment, const FoldPlan& folds,
                      EffectScale scale, double p_treated = 0.5);

struct Stage2Options {
  EffectScale scale = EffectScale::Ratio;
  VarianceMethod variance = VarianceMethod::InfluenceCurve;
  double p_treated = 0.5;
};

/// `folds` is required for CrossValidatedIC.
EstimateResult stage2_effect(const ClusterSummaries& summaries, const AdjustmentSet& adjustment,
                             const Stage2Options& options, const FoldPlan* folds = nullptr);

struct TwoStageConfig {
  Stage1Method stage1 = Stage1Method::TmleParametric;
  NuisanceConfig nuisance;
  ApsConfig aps;
  Stage2Options stage2;
};

struct TwoStageResult {
  EstimateResult estimate;
  ApsSelection selection;
};

/// Stage 2 with adaptive pre-specification on already computed summaries.
TwoStageResult two_stage_from_summaries(const ClusterSummaries& summaries, const TwoStageConfig& cfg,
                                        SeededStream stream);

/// Full pipeline; substream(0) drives Stage 1, substream(1) the APS folds.
TwoStageResult two_stage_tmle(const ClusterStudyData& data, const TwoStageConfig& cfg, SeededStream stream);

}  // namespace estsel
