#pragma once

#include <Eigen/Dense>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "estsel/learners.hpp"
#include "estsel/superlearner.hpp"
#include "estsel/views.hpp"

namespace estsel {

enum class NuisanceMethod { EmpiricalMean, Parametric, SuperLearner };

struct SuperLearnerConfig {
  std::vector<LearnerSpec> library;
  EnsembleMode mode = EnsembleMode::Discrete;
  std::optional<Loss> loss;  // defaults to NegLogLikelihood for [0,1] responses
};

struct NuisanceModel {
  NuisanceMethod method = NuisanceMethod::Parametric;
  LearnerSpec learner = LearnerSpec::main_terms();
  SuperLearnerConfig super_learner;

  static NuisanceModel empirical_mean() { return {NuisanceMethod::EmpiricalMean, {}, {}}; }
  static NuisanceModel parametric(LearnerSpec spec) { return {NuisanceMethod::Parametric, spec, {}}; }
  static NuisanceModel super_learner_with(SuperLearnerConfig cfg) {
    return {NuisanceMethod::SuperLearner, {}, std::move(cfg)};
  }
};

struct Bounds {
  double lower = 0.025;
  double upper = 0.975;
  friend bool operator==(const Bounds&, const Bounds&) = default;
};

struct NuisanceConfig {
  NuisanceModel outcome;
  NuisanceModel propensity;
  bool screening = false;
  double screening_alpha = 0.10;
  std::optional<Bounds> truncation = Bounds{};
};

/// A fitted outcome regression or propensity score. Responses that are
/// constant on the fitting rows give that constant exactly (deterministic node).
class NuisanceFit {
 public:
  enum class Kind { Constant, Learner, SuperLearner };

  static NuisanceFit fit(const NuisanceModel& model, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                         const FoldPlan* folds, bool screening, double screening_alpha);

  Eigen::VectorXd predict(const Eigen::MatrixXd& x) const;
  Kind kind() const { return kind_; }
  bool deterministic() const { return deterministic_; }
  int fallbacks() const { return fallbacks_; }
  bool learner_fell_back() const { return fallbacks_ > 0; }
  bool gaussian() const { return gaussian_; }

 private:
  Kind kind_ = Kind::Constant;
  double constant_ = 0.0;
  bool deterministic_ = false;
  bool gaussian_ = false;
  int fallbacks_ = 0;
  FittedLearner learner_;
  SuperLearnerFit super_learner_;
};

enum class EffectScale { Mean, Difference, Ratio };

std::string_view to_string(EffectScale scale);

struct Diagnostics {
  double g_min = 1.0;
  double g_max = 0.0;
  double max_clever_covariate = 0.0;
  int fallbacks = 0;
  bool positivity_flag = false;
  bool fluctuation_converged = true;
  bool outcome_rescaled = false;
  double outcome_min = 0.0;
  double outcome_max = 1.0;
  bool empty_risk_set = false;
  std::vector<std::string> notes;

  void merge(const Diagnostics& other);
};

/// Point estimate plus influence-curve based inference. For Ratio scale the
/// variance, SE and p-value refer to log(psi); the CI is on the natural scale.
struct EstimateResult {
  double psi = 0.0;
  Eigen::VectorXd ic;
  double variance = 0.0;
  double se = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  double p_value = 1.0;
  double epsilon = 0.0;
  EffectScale scale = EffectScale::Mean;
  size_t n_independent = 0;
  Diagnostics diagnostics;
};

/// Fills variance/SE/CI/p-value from a variance on the inference scale.
void set_wald_inference(EstimateResult& result, double variance);

struct IcVariance {
  double variance = 0.0;
  double se = 0.0;
  double half_width = 0.0;
};

/// Sample variance of the influence curve over the number of independent units.
IcVariance ic_variance(std::span<const double> ic, size_t n_independent);

/// Collapses individual-level IC values to one per cluster, scaled so that
/// ic_variance over clusters estimates the same quantity.
Eigen::VectorXd aggregate_ic_by_cluster(const Eigen::VectorXd& ic, std::span<const size_t> cluster_of_row,
                                        size_t n_clusters);

Eigen::VectorXd truncate_scores(const Eigen::VectorXd& g, const std::optional<Bounds>& bounds);

struct Fluctuation {
  double epsilon = 0.0;
  bool converged = true;
};

/// Maximum-likelihood epsilon of the intercept-free logistic submodel
/// logit Q*(eps) = offset + eps * H. Offsets of +-inf are held fixed.
Fluctuation fit_fluctuation(const Eigen::VectorXd& offset, const Eigen::VectorXd& clever,
                            const Eigen::VectorXd& outcome);

Eigen::VectorXd fluctuate(const Eigen::VectorXd& q, const Eigen::VectorXd& clever, double epsilon);

EstimateResult tmle_ate(const PointData& data, const NuisanceConfig& cfg, const FoldPlan& folds);
EstimateResult tmle_ate(const Dataset& data, const NuisanceConfig& cfg, const FoldPlan& folds);

EstimateResult tmle_missing_mean(const MissingData& data, const NuisanceConfig& cfg, const FoldPlan& folds);
EstimateResult tmle_missing_mean(const Dataset& data, const NuisanceConfig& cfg, const FoldPlan& folds);

}  // namespace estsel
