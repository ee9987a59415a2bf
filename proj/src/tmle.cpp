#include "estsel/tmle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "estsel/errors.hpp"
#include "estsel/stats.hpp"

namespace estsel {

namespace {

constexpr int kFluctuationIterations = 200;

bool is_constant(const Eigen::VectorXd& y) {
  return y.size() > 0 && (y.array() == y[0]).all();
}

Eigen::VectorXd clamp_unit(const Eigen::VectorXd& q) { return q.cwiseMax(0.0).cwiseMin(1.0); }

Eigen::VectorXd clamp_probability(const Eigen::VectorXd& g) {
  return g.cwiseMax(kProbabilityFloor).cwiseMin(1.0 - kProbabilityFloor);
}

Eigen::VectorXd logit_vector(const Eigen::VectorXd& q) { return q.unaryExpr([](double p) { return logit(p); }); }

struct Score {
  double value = 0.0;
  double slope = 0.0;
};

Score score_at(const Eigen::VectorXd& offset, const Eigen::VectorXd& h, const Eigen::VectorXd& y, double eps) {
  Score s;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (h[i] == 0.0) continue;
    const double p = expit(offset[i] + eps * h[i]);
    s.value += h[i] * (y[i] - p);
    s.slope -= h[i] * h[i] * p * (1.0 - p);
  }
  return s;
}

void record_propensity(Diagnostics& d, const Eigen::VectorXd& raw) {
  if (raw.size() == 0) return;
  d.g_min = std::min(d.g_min, raw.minCoeff());
  d.g_max = std::max(d.g_max, raw.maxCoeff());
}

EstimateResult constant_outcome_result(size_t n, EffectScale scale, double psi) {
  EstimateResult r;
  r.scale = scale;
  r.psi = psi;
  r.ic = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  r.n_independent = n;
  set_wald_inference(r, 0.0);
  return r;
}

}  // namespace

std::string_view to_string(EffectScale scale) {
  switch (scale) {
    case EffectScale::Mean: return "mean";
    case EffectScale::Difference: return "difference";
    case EffectScale::Ratio: return "ratio";
  }
  return "unknown";
}

void Diagnostics::merge(const Diagnostics& o) {
  g_min = std::min(g_min, o.g_min);
  g_max = std::max(g_max, o.g_max);
  max_clever_covariate = std::max(max_clever_covariate, o.max_clever_covariate);
  fallbacks += o.fallbacks;
  positivity_flag = positivity_flag || o.positivity_flag;
  fluctuation_converged = fluctuation_converged && o.fluctuation_converged;
  empty_risk_set = empty_risk_set || o.empty_risk_set;
  notes.insert(notes.end(), o.notes.begin(), o.notes.end());
}

NuisanceFit NuisanceFit::fit(const NuisanceModel& model, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                             const FoldPlan* folds, bool screening, double screening_alpha) {
  if (y.size() == 0) throw Error(ErrorCode::EmptyDataset, "nuisance regression has no rows");
  NuisanceFit out;
  const bool unit_interval = y.minCoeff() >= 0.0 && y.maxCoeff() <= 1.0;
  if (is_constant(y)) {
    out.kind_ = Kind::Constant;
    out.constant_ = y[0];
    out.deterministic_ = true;
    return out;
  }
  switch (model.method) {
    case NuisanceMethod::EmpiricalMean:
      out.kind_ = Kind::Constant;
      out.constant_ = y.mean();
      return out;
    case NuisanceMethod::Parametric: {
      ScreeningOptions so{screening, screening_alpha, unit_interval ? Family::Binomial : Family::Gaussian};
      out.kind_ = Kind::Learner;
      out.learner_ = fit_screened(model.learner, x, y, so);
      out.fallbacks_ = out.learner_.fallback ? 1 : 0;
      out.gaussian_ = model.learner.family == Family::Gaussian;
      return out;
    }
    case NuisanceMethod::SuperLearner: {
      if (folds == nullptr || folds->n != static_cast<size_t>(y.size())) {
        throw Error(ErrorCode::DimensionMismatch, "super learner needs a fold plan over the fitting rows");
      }
      const Loss loss = model.super_learner.loss.value_or(unit_interval ? Loss::NegLogLikelihood : Loss::SquaredError);
      ScreeningOptions so{screening, screening_alpha, unit_interval ? Family::Binomial : Family::Gaussian};
      out.kind_ = Kind::SuperLearner;
      out.super_learner_ = fit_super_learner(model.super_learner.library, x, y, *folds, loss,
                                             model.super_learner.mode, so);
      out.fallbacks_ = out.super_learner_.fallbacks;
      return out;
    }
  }
  return out;
}

Eigen::VectorXd NuisanceFit::predict(const Eigen::MatrixXd& x) const {
  switch (kind_) {
    case Kind::Constant: return Eigen::VectorXd::Constant(x.rows(), constant_);
    case Kind::Learner: return learner_.predict(x);
    case Kind::SuperLearner: return super_learner_.predict(x);
  }
  return {};
}

void set_wald_inference(EstimateResult& r, double variance) {
  r.variance = std::max(variance, 0.0);
  r.se = std::sqrt(r.variance);
  double z = 0.0;
  if (r.scale == EffectScale::Ratio) {
    if (!(r.psi > 0.0)) throw Error(ErrorCode::ZeroDenominator, "ratio estimate is not positive");
    const double log_psi = std::log(r.psi);
    r.ci_lo = std::exp(log_psi - kZ975 * r.se);
    r.ci_hi = std::exp(log_psi + kZ975 * r.se);
    z = log_psi;
  } else {
    r.ci_lo = r.psi - kZ975 * r.se;
    r.ci_hi = r.psi + kZ975 * r.se;
    z = r.psi;
  }
  if (r.se > 0.0) {
    r.p_value = two_sided_p(z / r.se);
  } else {
    r.p_value = z == 0.0 ? 1.0 : 0.0;
  }
}

IcVariance ic_variance(std::span<const double> ic, size_t n_independent) {
  if (ic.size() < 2 || n_independent < 2) {
    throw Error(ErrorCode::TooFewUnits, "influence-curve variance needs at least two units");
  }
  IcVariance out;
  out.variance = sample_variance(ic) / static_cast<double>(n_independent);
  out.se = std::sqrt(out.variance);
  out.half_width = kZ975 * out.se;
  return out;
}

Eigen::VectorXd aggregate_ic_by_cluster(const Eigen::VectorXd& ic, std::span<const size_t> cluster_of_row,
                                        size_t n_clusters) {
  if (static_cast<size_t>(ic.size()) != cluster_of_row.size()) {
    throw Error(ErrorCode::DimensionMismatch, "cluster map length differs from IC length");
  }
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_clusters));
  for (size_t i = 0; i < cluster_of_row.size(); ++i) out[cluster_of_row[i]] += ic[i];
  // Cluster mean times the cluster's share of the sample, rescaled by N.
  out *= static_cast<double>(n_clusters) / static_cast<double>(ic.size());
  return out;
}

Eigen::VectorXd truncate_scores(const Eigen::VectorXd& g, const std::optional<Bounds>& bounds) {
  if (!bounds) return g;
  if (!(bounds->lower > 0.0 && bounds->lower < bounds->upper && bounds->upper < 1.0)) {
    throw Error(ErrorCode::InvalidBounds, "truncation bounds must satisfy 0 < lower < upper < 1");
  }
  return g.cwiseMax(bounds->lower).cwiseMin(bounds->upper);
}

Fluctuation fit_fluctuation(const Eigen::VectorXd& offset, const Eigen::VectorXd& h, const Eigen::VectorXd& y) {
  Fluctuation out;
  const double tolerance = 1e-12 * (1.0 + h.cwiseAbs().sum());
  Score s = score_at(offset, h, y, 0.0);
  if (std::fabs(s.value) <= tolerance || s.slope == 0.0) {
    out.converged = std::fabs(s.value) <= tolerance;
    return out;
  }
  // The score is decreasing in epsilon: bracket the root, then safeguarded Newton.
  double lo = 0.0, hi = 0.0;
  double s_lo = s.value, s_hi = s.value;
  double step = 1.0;
  if (s.value > 0) {
    while (s_hi > 0 && step < 1e8) {
      lo = hi;
      s_lo = s_hi;
      hi = step;
      s_hi = score_at(offset, h, y, hi).value;
      step *= 4;
    }
  } else {
    while (s_lo < 0 && step < 1e8) {
      hi = lo;
      s_hi = s_lo;
      lo = -step;
      s_lo = score_at(offset, h, y, lo).value;
      step *= 4;
    }
  }
  if (s_lo < 0 || s_hi > 0) {
    out.converged = false;
    out.epsilon = std::fabs(s_lo) < std::fabs(s_hi) ? lo : hi;
    return out;
  }
  double eps = std::clamp(0.0, lo, hi);
  s = score_at(offset, h, y, eps);
  for (int it = 0; it < kFluctuationIterations; ++it) {
    if (std::fabs(s.value) <= tolerance) {
      out.epsilon = eps;
      out.converged = true;
      return out;
    }
    if (s.value > 0) lo = eps; else hi = eps;
    double next = s.slope < 0 ? eps - s.value / s.slope : 0.5 * (lo + hi);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (next == eps || hi - lo <= 1e-15 * (1.0 + std::fabs(eps))) {
      out.epsilon = eps;
      out.converged = std::fabs(s.value) <= 1e3 * tolerance;
      return out;
    }
    eps = next;
    s = score_at(offset, h, y, eps);
  }
  out.epsilon = eps;
  out.converged = std::fabs(s.value) <= tolerance;
  return out;
}

Eigen::VectorXd fluctuate(const Eigen::VectorXd& q, const Eigen::VectorXd& clever, double epsilon) {
  Eigen::VectorXd out(q.size());
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    out[i] = (epsilon == 0.0 || clever[i] == 0.0) ? q[i] : expit(logit(q[i]) + epsilon * clever[i]);
  }
  return out;
}

EstimateResult tmle_ate(const PointData& data, const NuisanceConfig& cfg, const FoldPlan& folds) {
  const Eigen::Index n = static_cast<Eigen::Index>(data.size());
  if (n < 2) throw Error(ErrorCode::TooFewUnits, "ATE estimation needs at least two units");
  if (data.treatment.size() != n || data.covariates.rows() != n) {
    throw Error(ErrorCode::DimensionMismatch, "treatment, covariates and outcome lengths differ");
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    if (data.treatment[i] != 0.0 && data.treatment[i] != 1.0) {
      throw Error(ErrorCode::DomainViolation, "treatment value not in {0,1} at row " + std::to_string(i));
    }
  }
  if (is_constant(data.treatment)) {
    throw Error(ErrorCode::PositivityCollapse, "treatment does not vary; both arms are required");
  }
  if (is_constant(data.outcome)) return constant_outcome_result(static_cast<size_t>(n), EffectScale::Difference, 0.0);

  Diagnostics diag;
  const double y_min = data.outcome.minCoeff();
  const double y_max = data.outcome.maxCoeff();
  Eigen::VectorXd y = data.outcome;
  double range = 1.0;
  if (y_min < 0.0 || y_max > 1.0) {
    range = y_max - y_min;
    y = (data.outcome.array() - y_min) / range;
    diag.outcome_rescaled = true;
    diag.outcome_min = y_min;
    diag.outcome_max = y_max;
  }

  // Outcome regression on (A, W).
  Eigen::MatrixXd qx(n, data.covariates.cols() + 1);
  qx.col(0) = data.treatment;
  qx.rightCols(data.covariates.cols()) = data.covariates;
  const NuisanceFit q_fit = NuisanceFit::fit(cfg.outcome, qx, y, &folds, cfg.screening, cfg.screening_alpha);
  Eigen::MatrixXd qx1 = qx, qx0 = qx;
  qx1.col(0).setOnes();
  qx0.col(0).setZero();
  const Eigen::VectorXd q_obs = clamp_unit(q_fit.predict(qx));
  const Eigen::VectorXd q1 = clamp_unit(q_fit.predict(qx1));
  const Eigen::VectorXd q0 = clamp_unit(q_fit.predict(qx0));

  const NuisanceFit g_fit =
      NuisanceFit::fit(cfg.propensity, data.covariates, data.treatment, &folds, cfg.screening, cfg.screening_alpha);
  const Eigen::VectorXd g_raw = clamp_probability(g_fit.predict(data.covariates));
  record_propensity(diag, g_raw);
  const Eigen::VectorXd g1 = truncate_scores(g_raw, cfg.truncation);
  diag.fallbacks = q_fit.fallbacks() + g_fit.fallbacks();
  if (g_fit.learner_fell_back() || (cfg.truncation && (g_raw.minCoeff() < cfg.truncation->lower ||
                                                       g_raw.maxCoeff() > cfg.truncation->upper))) {
    diag.positivity_flag = true;
  }

  Eigen::VectorXd h_obs(n), h1(n), h0(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    h1[i] = 1.0 / g1[i];
    h0[i] = -1.0 / (1.0 - g1[i]);
    h_obs[i] = data.treatment[i] == 1.0 ? h1[i] : h0[i];
  }
  diag.max_clever_covariate = h_obs.cwiseAbs().maxCoeff();

  const Fluctuation fl = fit_fluctuation(logit_vector(q_obs), h_obs, y);
  diag.fluctuation_converged = fl.converged;
  const Eigen::VectorXd qs_obs = fluctuate(q_obs, h_obs, fl.epsilon);
  const Eigen::VectorXd qs1 = fluctuate(q1, h1, fl.epsilon);
  const Eigen::VectorXd qs0 = fluctuate(q0, h0, fl.epsilon);

  EstimateResult r;
  r.scale = EffectScale::Difference;
  r.epsilon = fl.epsilon;
  r.psi = (qs1 - qs0).mean();
  r.ic = h_obs.cwiseProduct(y - qs_obs) + qs1 - qs0 - Eigen::VectorXd::Constant(n, r.psi);
  r.psi *= range;
  r.ic *= range;
  r.n_independent = static_cast<size_t>(n);
  r.diagnostics = std::move(diag);
  set_wald_inference(r, ic_variance(std::span<const double>(r.ic.data(), r.ic.size()), r.n_independent).variance);
  return r;
}

EstimateResult tmle_ate(const Dataset& data, const NuisanceConfig& cfg, const FoldPlan& folds) {
  return tmle_ate(point_data(data), cfg, folds);
}

EstimateResult tmle_missing_mean(const MissingData& data, const NuisanceConfig& cfg, const FoldPlan& folds) {
  const Eigen::Index n = static_cast<Eigen::Index>(data.size());
  if (n < 1) throw Error(ErrorCode::EmptyDataset, "no units");
  std::vector<size_t> measured_rows;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (data.measured[i] == 1.0) {
      if (std::isnan(data.outcome[i])) {
        throw Error(ErrorCode::DomainViolation, "measured unit " + std::to_string(i) + " has no outcome");
      }
      measured_rows.push_back(static_cast<size_t>(i));
    }
  }
  if (measured_rows.empty()) throw Error(ErrorCode::NoMeasuredOutcomes, "no unit has a measured outcome");

  Eigen::VectorXd y = Eigen::VectorXd::Zero(n);
  for (size_t i : measured_rows) y[static_cast<Eigen::Index>(i)] = data.outcome[static_cast<Eigen::Index>(i)];
  const Eigen::VectorXd y_measured = take_rows(y, measured_rows);
  const double p_measured = static_cast<double>(measured_rows.size()) / static_cast<double>(n);

  EstimateResult r;
  r.scale = EffectScale::Mean;
  r.n_independent = static_cast<size_t>(n);

  if (cfg.outcome.method == NuisanceMethod::EmpiricalMean) {
    r.psi = y_measured.mean();
    r.ic.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) r.ic[i] = data.measured[i] / p_measured * (y[i] - r.psi);
    set_wald_inference(r, n >= 2 ? ic_variance(std::span<const double>(r.ic.data(), n), r.n_independent).variance : 0.0);
    return r;
  }

  Diagnostics diag;
  const double y_min = y_measured.minCoeff();
  const double y_max = y_measured.maxCoeff();
  double shift = 0.0, range = 1.0;
  if (y_min < 0.0 || y_max > 1.0) {
    shift = y_min;
    range = y_max - y_min;
    diag.outcome_rescaled = true;
    diag.outcome_min = y_min;
    diag.outcome_max = y_max;
  }
  const Eigen::VectorXd ys = (y.array() - shift) / range;
  const Eigen::VectorXd ys_measured = take_rows(ys, measured_rows);

  const FoldPlan measured_folds = folds.restrict_to(measured_rows);
  const Eigen::MatrixXd x_measured = take_rows(data.covariates, measured_rows);
  const NuisanceFit q_fit =
      NuisanceFit::fit(cfg.outcome, x_measured, ys_measured, &measured_folds, cfg.screening, cfg.screening_alpha);
  const Eigen::VectorXd q = clamp_unit(q_fit.predict(data.covariates));

  const NuisanceFit g_fit =
      NuisanceFit::fit(cfg.propensity, data.covariates, data.measured, &folds, cfg.screening, cfg.screening_alpha);
  Eigen::VectorXd g = g_fit.predict(data.covariates);
  if (!g_fit.deterministic()) {
    g = clamp_probability(g);
    record_propensity(diag, g);
    if (g_fit.learner_fell_back() || (cfg.truncation && g.minCoeff() < cfg.truncation->lower)) {
      diag.positivity_flag = true;
      diag.notes.push_back("measurement probability near zero in part of the covariate space");
    }
    g = truncate_scores(g, cfg.truncation);
  } else {
    record_propensity(diag, g);
  }
  diag.fallbacks = q_fit.fallbacks() + g_fit.fallbacks();

  Eigen::VectorXd h_all = g.cwiseInverse();
  Eigen::VectorXd h_obs = Eigen::VectorXd::Zero(n);
  for (size_t i : measured_rows) h_obs[static_cast<Eigen::Index>(i)] = h_all[static_cast<Eigen::Index>(i)];
  diag.max_clever_covariate = h_obs.maxCoeff();

  const Fluctuation fl = fit_fluctuation(logit_vector(take_rows(q, measured_rows)),
                                         take_rows(h_all, measured_rows), ys_measured);
  diag.fluctuation_converged = fl.converged;
  const Eigen::VectorXd qs = fluctuate(q, h_all, fl.epsilon);

  r.epsilon = fl.epsilon;
  r.psi = qs.mean();
  r.ic = h_obs.cwiseProduct(ys - qs) + qs - Eigen::VectorXd::Constant(n, r.psi);
  r.psi = shift + range * r.psi;
  r.ic *= range;
  r.diagnostics = std::move(diag);
  set_wald_inference(r, n >= 2 ? ic_variance(std::span<const double>(r.ic.data(), n), r.n_independent).variance : 0.0);
  return r;
}

EstimateResult tmle_missing_mean(const Dataset& data, const NuisanceConfig& cfg, const FoldPlan& folds) {
  return tmle_missing_mean(missing_data(data), cfg, folds);
}

}  // namespace estsel
