#include "estsel/twostage.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "estsel/errors.hpp"
#include "estsel/stats.hpp"

namespace estsel {

namespace {

struct Stage2Fit {
  FittedLearner q;
  double epsilon[2] = {0.0, 0.0};
};

Eigen::MatrixXd working_design(const Eigen::VectorXd& a, const Eigen::MatrixXd& e, const AdjustmentSet& adj) {
  Eigen::MatrixXd x(a.size(), static_cast<Eigen::Index>(adj.size()) + 1);
  x.col(0) = a;
  for (size_t k = 0; k < adj.size(); ++k) x.col(static_cast<Eigen::Index>(k) + 1) = e.col(static_cast<Eigen::Index>(adj[k]));
  return x;
}

double arm_probability(double p_treated, int arm) { return arm == 1 ? p_treated : 1.0 - p_treated; }

Stage2Fit fit_stage2(const Eigen::VectorXd& y, const Eigen::VectorXd& a, const Eigen::MatrixXd& e,
                     const AdjustmentSet& adj, std::span<const size_t> rows, double p_treated) {
  const Eigen::VectorXd yt = take_rows(y, rows);
  const Eigen::VectorXd at = take_rows(a, rows);
  const Eigen::MatrixXd x = working_design(at, take_rows(e, rows), adj);
  Stage2Fit fit;
  fit.q = fit_learner(LearnerSpec::main_terms(), x, yt);
  const Eigen::VectorXd q = fit.q.predict(x);
  for (int arm = 0; arm <= 1; ++arm) {
    std::vector<Eigen::Index> in_arm;
    for (Eigen::Index i = 0; i < at.size(); ++i) {
      if (at[i] == arm) in_arm.push_back(i);
    }
    if (in_arm.empty()) throw Error(ErrorCode::DegenerateArm, "no cluster in arm " + std::to_string(arm));
    Eigen::VectorXd offset(static_cast<Eigen::Index>(in_arm.size())), out(offset.size());
    for (size_t k = 0; k < in_arm.size(); ++k) {
      offset[static_cast<Eigen::Index>(k)] = logit(q[in_arm[k]]);
      out[static_cast<Eigen::Index>(k)] = yt[in_arm[k]];
    }
    const Eigen::VectorXd h = Eigen::VectorXd::Constant(offset.size(), 1.0 / arm_probability(p_treated, arm));
    fit.epsilon[arm] = fit_fluctuation(offset, h, out).epsilon;
  }
  return fit;
}

// Targeted Q*(arm, E) for the listed clusters.
Eigen::VectorXd targeted(const Stage2Fit& fit, int arm, const Eigen::MatrixXd& e, const AdjustmentSet& adj,
                         double p_treated) {
  const Eigen::VectorXd a = Eigen::VectorXd::Constant(e.rows(), arm);
  const Eigen::VectorXd q = fit.q.predict(working_design(a, e, adj));
  const Eigen::VectorXd h = Eigen::VectorXd::Constant(e.rows(), 1.0 / arm_probability(p_treated, arm));
  return fluctuate(q, h, fit.epsilon[arm]);
}

struct ArmIc {
  double mu[2] = {0.0, 0.0};
  Eigen::VectorXd ic[2];
};

ArmIc arm_ic(const Stage2Fit& fit, const Eigen::VectorXd& y, const Eigen::VectorXd& a, const Eigen::MatrixXd& e,
             const AdjustmentSet& adj, double p_treated, const double* mu = nullptr) {
  ArmIc out;
  for (int arm = 0; arm <= 1; ++arm) {
    const Eigen::VectorXd qs = targeted(fit, arm, e, adj, p_treated);
    out.mu[arm] = mu ? mu[arm] : qs.mean();
    Eigen::VectorXd ic(y.size());
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      const double h = a[i] == arm ? 1.0 / arm_probability(p_treated, arm) : 0.0;
      ic[i] = h * (y[i] - qs[i]) + qs[i] - out.mu[arm];
    }
    out.ic[arm] = std::move(ic);
  }
  return out;
}

Eigen::VectorXd combine(const ArmIc& arms, EffectScale scale) {
  if (scale == EffectScale::Ratio) return arms.ic[1] / arms.mu[1] - arms.ic[0] / arms.mu[0];
  return arms.ic[1] - arms.ic[0];
}

void check_arms(const ClusterSummaries& s, double p_treated) {
  if (!(p_treated > 0.0 && p_treated < 1.0)) throw Error(ErrorCode::InvalidConfig, "randomization probability must lie in (0,1)");
  size_t treated = 0;
  for (const auto& c : s.clusters) treated += c.treatment == 1.0;
  if (treated == 0 || treated == s.size()) throw Error(ErrorCode::DegenerateArm, "both arms need at least one cluster");
}

FoldPlan aps_folds(const ClusterSummaries& s, const ApsConfig& aps, SeededStream stream) {
  const size_t n = s.size();
  const size_t v = aps.folds ? aps.folds : default_fold_count(n);
  if (n < 2 * v) {
    throw Error(ErrorCode::TooFewClusters, std::to_string(n) + " clusters cannot support " + std::to_string(v) +
                                               " selection folds");
  }
  std::vector<int> strata = aps.strata;
  if (strata.empty()) {
    for (const auto& c : s.clusters) strata.push_back(static_cast<int>(c.treatment));
  }
  return make_folds(n, v, stream, strata);
}

}  // namespace

std::string_view to_string(Stage1Method method) {
  switch (method) {
    case Stage1Method::EmpiricalMean: return "empirical_mean";
    case Stage1Method::TmleParametric: return "tmle_parametric";
    case Stage1Method::TmleSuperLearner: return "tmle_super_learner";
  }
  return "unknown";
}

std::optional<Stage1Method> parse_stage1_method(std::string_view text) {
  if (text == "empirical_mean") return Stage1Method::EmpiricalMean;
  if (text == "tmle_parametric") return Stage1Method::TmleParametric;
  if (text == "tmle_super_learner") return Stage1Method::TmleSuperLearner;
  return std::nullopt;
}

Eigen::VectorXd ClusterSummaries::endpoints() const {
  Eigen::VectorXd out(static_cast<Eigen::Index>(size()));
  for (size_t i = 0; i < size(); ++i) out[static_cast<Eigen::Index>(i)] = clusters[i].endpoint;
  return out;
}

Eigen::VectorXd ClusterSummaries::treatment() const {
  Eigen::VectorXd out(static_cast<Eigen::Index>(size()));
  for (size_t i = 0; i < size(); ++i) out[static_cast<Eigen::Index>(i)] = clusters[i].treatment;
  return out;
}

Eigen::MatrixXd ClusterSummaries::covariates() const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(size()), static_cast<Eigen::Index>(covariate_names.size()));
  for (size_t i = 0; i < size(); ++i) out.row(static_cast<Eigen::Index>(i)) = clusters[i].covariates.transpose();
  return out;
}

std::vector<LearnerSpec> default_library() {
  return {LearnerSpec::intercept_only(), LearnerSpec::main_terms(), LearnerSpec::ridge(1.0),
          LearnerSpec::ridge_interactions(1.0)};
}

ClusterSummaries stage1_endpoints(const ClusterStudyData& data, Stage1Method method, const NuisanceConfig& cfg,
                                  SeededStream stream) {
  if (data.size() < 2) throw Error(ErrorCode::TooFewClusters, "at least two clusters are required");
  NuisanceConfig nc = cfg;
  switch (method) {
    case Stage1Method::EmpiricalMean:
      nc.outcome = NuisanceModel::empirical_mean();
      break;
    case Stage1Method::TmleParametric:
      nc.outcome = NuisanceModel::parametric(LearnerSpec::main_terms());
      nc.propensity = NuisanceModel::parametric(LearnerSpec::main_terms());
      break;
    case Stage1Method::TmleSuperLearner:
      if (nc.outcome.method != NuisanceMethod::SuperLearner) {
        nc.outcome = NuisanceModel::super_learner_with({default_library(), EnsembleMode::Discrete, {}});
      }
      if (nc.propensity.method != NuisanceMethod::SuperLearner) {
        nc.propensity = NuisanceModel::super_learner_with({default_library(), EnsembleMode::Discrete, {}});
      }
      break;
  }

  ClusterSummaries out;
  out.covariate_names = data.cluster_covariate_names;
  for (size_t c = 0; c < data.size(); ++c) {
    const MissingData& part = data.individuals[c];
    const size_t n = part.size();
    FoldPlan plan;
    if (n >= 2) {
      plan = make_folds(n, std::min(default_fold_count(n), n), stream.substream(c));
    } else {
      plan = FoldPlan{n, 2, std::vector<int>(n, 0), false, GroupingUnit::Row};
    }
    ClusterSummary s;
    s.id = data.ids[c];
    s.treatment = data.treatment[static_cast<Eigen::Index>(c)];
    s.covariates = data.cluster_covariates.row(static_cast<Eigen::Index>(c)).transpose();
    s.individuals = n;
    s.method = method;
    try {
      EstimateResult r = tmle_missing_mean(part, nc, plan);
      s.endpoint = std::clamp(r.psi, 0.0, 1.0);
      s.se = r.se;
      s.diagnostics = std::move(r.diagnostics);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::NoMeasuredOutcomes) {
        throw Error(ErrorCode::NoMeasuredOutcomes, "cluster '" + s.id + "' has no measured outcome");
      }
      throw;
    }
    out.clusters.push_back(std::move(s));
  }
  return out;
}

ApsConfig ApsConfig::limited(const std::vector<size_t>& shortlist) {
  ApsConfig cfg;
  for (size_t j : shortlist) cfg.candidates.push_back({j});
  return cfg;
}

ApsConfig ApsConfig::expanded(size_t n_covariates, const std::vector<std::pair<size_t, size_t>>& pairs) {
  ApsConfig cfg;
  for (size_t j = 0; j < n_covariates; ++j) cfg.candidates.push_back({j});
  for (const auto& [i, j] : pairs) cfg.candidates.push_back({i, j});
  return cfg;
}

double cv_ic_variance(const ClusterSummaries& s, const AdjustmentSet& adj, const FoldPlan& folds, EffectScale scale,
                      double p_treated) {
  check_arms(s, p_treated);
  const Eigen::VectorXd y = s.endpoints();
  const Eigen::VectorXd a = s.treatment();
  const Eigen::MatrixXd e = s.covariates();
  std::vector<size_t> all(s.size());
  for (size_t i = 0; i < all.size(); ++i) all[i] = i;
  const ArmIc full = arm_ic(fit_stage2(y, a, e, adj, all, p_treated), y, a, e, adj, p_treated);

  double total = 0.0;
  size_t used = 0;
  for (size_t v = 0; v < folds.folds; ++v) {
    const auto valid = folds.validation(v);
    if (valid.empty()) continue;
    const auto train = folds.training(v);
    const Stage2Fit fit = fit_stage2(y, a, e, adj, train, p_treated);
    const ArmIc held = arm_ic(fit, take_rows(y, valid), take_rows(a, valid), take_rows(e, valid), adj, p_treated, full.mu);
    const Eigen::VectorXd ic = combine(held, scale);
    total += ic.squaredNorm() / static_cast<double>(ic.size());
    ++used;
  }
  return total / static_cast<double>(used) / static_cast<double>(s.size());
}

ApsSelection adaptive_prespec(const ClusterSummaries& s, const ApsConfig& aps, SeededStream stream, EffectScale scale,
                              double p_treated) {
  if (aps.candidates.empty() || !aps.candidates.front().empty()) {
    throw Error(ErrorCode::InvalidConfig, "the unadjusted candidate must come first");
  }
  for (const auto& cand : aps.candidates) {
    for (size_t j : cand) {
      if (j >= s.covariate_names.size()) throw Error(ErrorCode::InvalidConfig, "adjustment covariate index out of range");
    }
  }
  ApsSelection out;
  out.folds = aps_folds(s, aps, stream);
  if (aps.candidates.size() == 1) {
    out.cv_variance.push_back(std::numeric_limits<double>::quiet_NaN());
    return out;
  }
  for (const auto& cand : aps.candidates) out.cv_variance.push_back(cv_ic_variance(s, cand, out.folds, scale, p_treated));
  for (size_t k = 1; k < out.cv_variance.size(); ++k) {
    if (out.cv_variance[k] < out.cv_variance[out.index]) out.index = k;
  }
  out.adjustment = aps.candidates[out.index];
  return out;
}

EstimateResult stage2_effect(const ClusterSummaries& s, const AdjustmentSet& adj, const Stage2Options& options,
                             const FoldPlan* folds) {
  check_arms(s, options.p_treated);
  if (options.scale == EffectScale::Mean) throw Error(ErrorCode::InvalidConfig, "stage 2 needs a ratio or difference scale");
  const Eigen::VectorXd y = s.endpoints();
  const Eigen::VectorXd a = s.treatment();
  const Eigen::MatrixXd e = s.covariates();
  std::vector<size_t> all(s.size());
  for (size_t i = 0; i < all.size(); ++i) all[i] = i;
  const Stage2Fit fit = fit_stage2(y, a, e, adj, all, options.p_treated);
  ArmIc arms = arm_ic(fit, y, a, e, adj, options.p_treated);

  EstimateResult r;
  r.scale = options.scale;
  r.n_independent = s.size();
  if (options.scale == EffectScale::Ratio) {
    // An arm whose endpoints are all zero has a zero targeted mean; the fit
    // only approaches it numerically.
    for (int arm = 0; arm <= 1; ++arm) {
      bool any = false;
      for (Eigen::Index i = 0; i < y.size(); ++i) any = any || (a[i] == arm && y[i] > 0.0);
      if (!any) arms.mu[arm] = 0.0;
    }
    if (!(arms.mu[0] > 0.0)) throw Error(ErrorCode::ZeroDenominator, "control-arm mean is zero");
    if (!(arms.mu[1] > 0.0)) throw Error(ErrorCode::ZeroDenominator, "treated-arm mean is zero; log ratio undefined");
    r.psi = arms.mu[1] / arms.mu[0];
  } else {
    r.psi = arms.mu[1] - arms.mu[0];
  }
  r.epsilon = fit.epsilon[1];
  r.ic = combine(arms, options.scale);
  r.diagnostics.fallbacks = fit.q.fallback ? 1 : 0;
  for (const auto& c : s.clusters) r.diagnostics.merge(c.diagnostics);

  double variance = 0.0;
  if (options.variance == VarianceMethod::CrossValidatedIC) {
    if (folds == nullptr) throw Error(ErrorCode::InvalidConfig, "cross-validated IC variance needs a fold plan");
    variance = cv_ic_variance(s, adj, *folds, options.scale, options.p_treated);
  } else if (options.variance == VarianceMethod::InfluenceCurve) {
    variance = ic_variance(std::span<const double>(r.ic.data(), r.ic.size()), r.n_independent).variance;
  } else {
    throw Error(ErrorCode::InvalidConfig, "stage 2 supports ic or cv_ic variance");
  }
  set_wald_inference(r, variance);
  return r;
}

TwoStageResult two_stage_from_summaries(const ClusterSummaries& s, const TwoStageConfig& cfg, SeededStream stream) {
  TwoStageResult out;
  out.selection = adaptive_prespec(s, cfg.aps, stream, cfg.stage2.scale, cfg.stage2.p_treated);
  out.estimate = stage2_effect(s, out.selection.adjustment, cfg.stage2, &out.selection.folds);
  return out;
}

TwoStageResult two_stage_tmle(const ClusterStudyData& data, const TwoStageConfig& cfg, SeededStream stream) {
  const ClusterSummaries s = stage1_endpoints(data, cfg.stage1, cfg.nuisance, stream.substream(0));
  return two_stage_from_summaries(s, cfg, stream.substream(1));
}

}  // namespace estsel
