#include "estsel/ltmle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "estsel/dataset.hpp"
#include "estsel/errors.hpp"
#include "estsel/stats.hpp"

namespace estsel {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Eigen::VectorXd clamp_unit(const Eigen::VectorXd& q) { return q.cwiseMax(0.0).cwiseMin(1.0); }

Eigen::VectorXd bounded(const NuisanceFit& fit, const Eigen::VectorXd& p) {
  if (fit.deterministic()) return p;
  return p.cwiseMax(kProbabilityFloor).cwiseMin(1.0 - kProbabilityFloor);
}

// W, L(0..t), then A(0..last_a) when last_a >= 0.
Eigen::MatrixXd history(const LongitudinalData& d, std::span<const size_t> rows, size_t t, int last_a,
                        std::optional<std::pair<size_t, double>> set_a = std::nullopt) {
  const Eigen::Index p = d.baseline.cols();
  const Eigen::Index q = static_cast<Eigen::Index>(d.time_varying_names.size());
  const Eigen::Index a_cols = last_a + 1;
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), p + q * static_cast<Eigen::Index>(t + 1) + a_cols);
  for (size_t k = 0; k < rows.size(); ++k) {
    const auto r = static_cast<Eigen::Index>(k);
    const auto i = static_cast<Eigen::Index>(rows[k]);
    x.row(r).head(p) = d.baseline.row(i);
    for (size_t s = 0; s <= t; ++s) x.row(r).segment(p + q * static_cast<Eigen::Index>(s), q) = d.time_varying[s].row(i);
    for (Eigen::Index s = 0; s < a_cols; ++s) {
      double a = d.treatment(i, s);
      if (set_a && static_cast<Eigen::Index>(set_a->first) == s) a = set_a->second;
      x(r, p + q * static_cast<Eigen::Index>(t + 1) + s) = a;
    }
  }
  return x;
}

bool follows(const LongitudinalData& d, const Regimen& regimen, size_t i, size_t through) {
  for (size_t s = 0; s <= through; ++s) {
    if (!d.reached(i, s)) return false;
    if (d.treatment(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s)) != regimen.treatment[s]) return false;
    if (d.censoring(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s)) != 0.0) return false;
  }
  return true;
}

// Units reached at t whose history through t-1 matches the regimen.
std::vector<size_t> prediction_set(const LongitudinalData& d, const Regimen& regimen, size_t t) {
  std::vector<size_t> out;
  for (size_t i = 0; i < d.size(); ++i) {
    if (!d.reached(i, t)) continue;
    if (t == 0 || follows(d, regimen, i, t - 1)) out.push_back(i);
  }
  return out;
}

struct TreatmentMechanism {
  std::vector<NuisanceFit> treatment;
  std::vector<std::optional<NuisanceFit>> censoring;
  int fallbacks = 0;
};

TreatmentMechanism fit_mechanism(const LongitudinalData& d, const LtmleConfig& cfg, const FoldPlan& folds) {
  TreatmentMechanism m;
  const auto& nc = cfg.nuisance;
  for (size_t t = 0; t <= d.horizon; ++t) {
    std::vector<size_t> rows;
    for (size_t i = 0; i < d.size(); ++i) {
      if (d.reached(i, t)) rows.push_back(i);
    }
    if (rows.empty()) throw Error(ErrorCode::EmptyDataset, "no subject reaches time " + std::to_string(t));
    const FoldPlan sub = folds.restrict_to(rows);
    Eigen::VectorXd a(static_cast<Eigen::Index>(rows.size())), c(static_cast<Eigen::Index>(rows.size()));
    for (size_t k = 0; k < rows.size(); ++k) {
      a[static_cast<Eigen::Index>(k)] = d.treatment(static_cast<Eigen::Index>(rows[k]), static_cast<Eigen::Index>(t));
      c[static_cast<Eigen::Index>(k)] = d.censoring(static_cast<Eigen::Index>(rows[k]), static_cast<Eigen::Index>(t));
    }
    m.treatment.push_back(NuisanceFit::fit(nc.propensity, history(d, rows, t, static_cast<int>(t) - 1), a, &sub,
                                           nc.screening, nc.screening_alpha));
    m.fallbacks += m.treatment.back().fallbacks();
    if (d.has_censoring) {
      // Models P(C(t) = 1 | history); uncensored probability is the complement.
      m.censoring.push_back(NuisanceFit::fit(nc.propensity, history(d, rows, t, static_cast<int>(t)), c, &sub,
                                             nc.screening, nc.screening_alpha));
      m.fallbacks += m.censoring.back()->fallbacks();
    } else {
      m.censoring.push_back(std::nullopt);
    }
  }
  return m;
}

struct Weights {
  std::vector<Eigen::VectorXd> clever;  // per t, over the prediction set
  std::vector<std::vector<size_t>> rows;
  double g_min = 1.0;
  double g_max = 0.0;
  bool truncated = false;
};

Weights regimen_weights(const LongitudinalData& d, const Regimen& regimen, const TreatmentMechanism& m,
                        const std::optional<double>& bound) {
  Weights w;
  Eigen::VectorXd cumulative = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(d.size()));
  for (size_t t = 0; t <= d.horizon; ++t) {
    const auto rows = prediction_set(d, regimen, t);
    Eigen::VectorXd h(static_cast<Eigen::Index>(rows.size()));
    if (!rows.empty()) {
      const double a_t = regimen.treatment[t];
      Eigen::VectorXd ga = bounded(m.treatment[t], m.treatment[t].predict(history(d, rows, t, static_cast<int>(t) - 1)));
      if (a_t == 0.0) ga = Eigen::VectorXd::Ones(ga.size()) - ga;
      Eigen::VectorXd gc = Eigen::VectorXd::Ones(ga.size());
      if (m.censoring[t]) {
        const Eigen::VectorXd pc = bounded(
            *m.censoring[t],
            m.censoring[t]->predict(history(d, rows, t, static_cast<int>(t), std::make_pair(t, a_t))));
        gc -= pc;
      }
      for (size_t k = 0; k < rows.size(); ++k) {
        const auto kk = static_cast<Eigen::Index>(k);
        const double factor = ga[kk] * gc[kk];
        w.g_min = std::min(w.g_min, factor);
        w.g_max = std::max(w.g_max, factor);
        double& cum = cumulative[static_cast<Eigen::Index>(rows[k])];
        cum *= factor;
        double value = cum > 0.0 ? 1.0 / cum : std::numeric_limits<double>::infinity();
        if (bound && value > *bound) {
          value = *bound;
          w.truncated = true;
        }
        h[kk] = value;
      }
    }
    w.clever.push_back(std::move(h));
    w.rows.push_back(rows);
  }
  return w;
}

struct Scaling {
  double shift = 0.0;
  double range = 1.0;
  bool rescaled = false;
};

Scaling outcome_scaling(const LongitudinalData& d) {
  Scaling s;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (Eigen::Index i = 0; i < d.outcome.size(); ++i) {
    if (std::isnan(d.outcome[i])) continue;
    lo = std::min(lo, d.outcome[i]);
    hi = std::max(hi, d.outcome[i]);
  }
  if (!std::isfinite(lo)) throw Error(ErrorCode::NoMeasuredOutcomes, "no subject has an observed outcome");
  if (lo < 0.0 || hi > 1.0) {
    s.shift = lo;
    s.range = hi > lo ? hi - lo : 1.0;
    s.rescaled = true;
  }
  return s;
}

EstimateResult ice_core(const LongitudinalData& d, const Regimen& regimen, const LtmleConfig& cfg,
                        const FoldPlan& folds, const TreatmentMechanism& mech) {
  const size_t n = d.size();
  const size_t horizon = d.horizon;
  const Scaling scaling = outcome_scaling(d);
  const Weights weights = regimen_weights(d, regimen, mech, cfg.cumulative_bound);
  const auto& nc = cfg.nuisance;

  Diagnostics diag;
  diag.g_min = weights.g_min;
  diag.g_max = weights.g_max;
  diag.fallbacks = mech.fallbacks;
  diag.outcome_rescaled = scaling.rescaled;
  if (weights.truncated) diag.positivity_flag = true;

  // Targeted pseudo-outcome of the step above, indexed by subject (NaN where undefined).
  Eigen::VectorXd next = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n), kNaN);
  for (size_t i = 0; i < n; ++i) {
    if (!std::isnan(d.outcome[static_cast<Eigen::Index>(i)])) {
      next[static_cast<Eigen::Index>(i)] = (d.outcome[static_cast<Eigen::Index>(i)] - scaling.shift) / scaling.range;
    }
  }
  Eigen::VectorXd ic = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  Eigen::VectorXd q0_star;

  for (size_t step = 0; step <= horizon; ++step) {
    const size_t t = horizon - step;
    const auto& pred_rows = weights.rows[t];
    std::vector<size_t> risk_rows;
    std::vector<size_t> risk_pos;  // position within pred_rows
    for (size_t k = 0; k < pred_rows.size(); ++k) {
      const size_t i = pred_rows[k];
      if (follows(d, regimen, i, t) && !std::isnan(next[static_cast<Eigen::Index>(i)])) {
        risk_rows.push_back(i);
        risk_pos.push_back(k);
      }
    }
    const Eigen::MatrixXd x_pred = history(d, pred_rows, t, -1);
    Eigen::VectorXd q(static_cast<Eigen::Index>(pred_rows.size()));
    if (risk_rows.empty()) {
      double fallback = 0.0;
      size_t count = 0;
      for (Eigen::Index i = 0; i < next.size(); ++i) {
        if (!std::isnan(next[i])) {
          fallback += next[i];
          ++count;
        }
      }
      if (count == 0) {
        for (Eigen::Index i = 0; i < d.outcome.size(); ++i) {
          if (!std::isnan(d.outcome[i])) {
            fallback += (d.outcome[i] - scaling.shift) / scaling.range;
            ++count;
          }
        }
      }
      q.setConstant(fallback / static_cast<double>(count));
      diag.empty_risk_set = true;
      diag.notes.push_back("empty risk set at time " + std::to_string(t));
    } else {
      Eigen::VectorXd y(static_cast<Eigen::Index>(risk_rows.size()));
      for (size_t k = 0; k < risk_rows.size(); ++k) y[static_cast<Eigen::Index>(k)] = next[static_cast<Eigen::Index>(risk_rows[k])];
      const FoldPlan sub = folds.restrict_to(risk_rows);
      const NuisanceFit fit =
          NuisanceFit::fit(nc.outcome, history(d, risk_rows, t, -1), y, &sub, nc.screening, nc.screening_alpha);
      diag.fallbacks += fit.fallbacks();
      q = clamp_unit(fit.predict(x_pred));

      Eigen::VectorXd offset(static_cast<Eigen::Index>(risk_rows.size())), h(offset.size());
      for (size_t k = 0; k < risk_rows.size(); ++k) {
        offset[static_cast<Eigen::Index>(k)] = logit(q[static_cast<Eigen::Index>(risk_pos[k])]);
        h[static_cast<Eigen::Index>(k)] = weights.clever[t][static_cast<Eigen::Index>(risk_pos[k])];
      }
      const Fluctuation fl = fit_fluctuation(offset, h, y);
      diag.fluctuation_converged = diag.fluctuation_converged && fl.converged;
      q = fluctuate(q, weights.clever[t], fl.epsilon);
      for (size_t k = 0; k < risk_rows.size(); ++k) {
        const auto i = static_cast<Eigen::Index>(risk_rows[k]);
        ic[i] += h[static_cast<Eigen::Index>(k)] * (next[i] - q[static_cast<Eigen::Index>(risk_pos[k])]);
      }
      if (h.size() > 0) diag.max_clever_covariate = std::max(diag.max_clever_covariate, h.maxCoeff());
    }

    next.setConstant(kNaN);
    for (size_t k = 0; k < pred_rows.size(); ++k) next[static_cast<Eigen::Index>(pred_rows[k])] = q[static_cast<Eigen::Index>(k)];
    if (t == 0) q0_star = q;
  }

  EstimateResult r;
  r.scale = EffectScale::Mean;
  r.n_independent = n;
  r.psi = q0_star.mean();
  ic += q0_star - Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n), r.psi);
  r.psi = scaling.shift + scaling.range * r.psi;
  r.ic = ic * scaling.range;
  r.diagnostics = std::move(diag);
  set_wald_inference(r, n >= 2 ? ic_variance(std::span<const double>(r.ic.data(), r.ic.size()), n).variance : 0.0);
  return r;
}

void check_regimen(const LongitudinalData& d, const Regimen& regimen) {
  if (regimen.treatment.size() != d.horizon + 1) {
    throw Error(ErrorCode::InvalidConfig, "regimen covers " + std::to_string(regimen.treatment.size()) +
                                              " time points but data have " + std::to_string(d.horizon + 1));
  }
  for (int a : regimen.treatment) {
    if (a != 0 && a != 1) throw Error(ErrorCode::InvalidConfig, "regimen treatment values must be 0 or 1");
  }
}

EstimateResult contrast_estimate(const LongitudinalData& d, const Regimen& r1, const Regimen& r0,
                                 const LtmleConfig& cfg, const FoldPlan& folds) {
  const TreatmentMechanism mech = fit_mechanism(d, cfg, folds);
  const EstimateResult e1 = ice_core(d, r1, cfg, folds, mech);
  const EstimateResult e0 = r1 == r0 ? e1 : ice_core(d, r0, cfg, folds, mech);
  EstimateResult r;
  r.scale = cfg.scale;
  r.n_independent = d.size();
  r.diagnostics = e1.diagnostics;
  if (!(r1 == r0)) {
    Diagnostics d0 = e0.diagnostics;
    d0.fallbacks = 0;  // mechanism fallbacks already counted once
    r.diagnostics.merge(d0);
  }
  if (cfg.scale == EffectScale::Ratio) {
    if (!(e0.psi > 0.0) || !(e1.psi > 0.0)) throw Error(ErrorCode::ZeroDenominator, "treatment-specific mean is zero");
    r.psi = e1.psi / e0.psi;
    r.ic = e1.ic / e1.psi - e0.ic / e0.psi;
  } else {
    r.psi = e1.psi - e0.psi;
    r.ic = e1.ic - e0.ic;
  }
  return r;
}

}  // namespace

std::string_view to_string(VarianceMethod method) {
  switch (method) {
    case VarianceMethod::InfluenceCurve: return "ic";
    case VarianceMethod::Bootstrap: return "bootstrap";
    case VarianceMethod::CrossValidatedIC: return "cv_ic";
  }
  return "unknown";
}

std::optional<VarianceMethod> parse_variance_method(std::string_view text) {
  if (text == "ic") return VarianceMethod::InfluenceCurve;
  if (text == "bootstrap") return VarianceMethod::Bootstrap;
  if (text == "cv_ic") return VarianceMethod::CrossValidatedIC;
  return std::nullopt;
}

void LtmleConfig::validate() const {
  if (cumulative_bound && !(*cumulative_bound > 1.0)) {
    throw Error(ErrorCode::InvalidConfig, "cumulative weight bound must exceed 1");
  }
  if (variance == VarianceMethod::Bootstrap && bootstrap_replicates < 200) {
    throw Error(ErrorCode::InvalidConfig, "bootstrap needs at least 200 replicates");
  }
  if (variance == VarianceMethod::CrossValidatedIC) {
    throw Error(ErrorCode::InvalidConfig, "cross-validated IC variance applies to two-stage estimators only");
  }
  if (scale == EffectScale::Mean) throw Error(ErrorCode::InvalidConfig, "a contrast needs a difference or ratio scale");
}

EstimateResult ice_mean(const LongitudinalData& data, const Regimen& regimen, const LtmleConfig& cfg,
                        const FoldPlan& folds) {
  check_regimen(data, regimen);
  if (folds.n != data.size()) throw Error(ErrorCode::DimensionMismatch, "fold plan does not cover every subject");
  return ice_core(data, regimen, cfg, folds, fit_mechanism(data, cfg, folds));
}

EstimateResult ltmle_contrast(const LongitudinalData& data, const Regimen& regimen1, const Regimen& regimen0,
                              const LtmleConfig& cfg, const FoldPlan& folds, SeededStream stream) {
  cfg.validate();
  check_regimen(data, regimen1);
  check_regimen(data, regimen0);
  if (folds.n != data.size()) throw Error(ErrorCode::DimensionMismatch, "fold plan does not cover every subject");

  EstimateResult r = contrast_estimate(data, regimen1, regimen0, cfg, folds);
  const bool ratio = cfg.scale == EffectScale::Ratio;
  if (cfg.variance == VarianceMethod::InfluenceCurve) {
    set_wald_inference(r, ic_variance(std::span<const double>(r.ic.data(), r.ic.size()), r.n_independent).variance);
    return r;
  }

  const size_t folds_v = folds.folds;
  const BootstrapClosure closure = [&](std::span<const size_t> idx, SeededStream s) {
    const LongitudinalData boot = data.subset(idx);
    const FoldPlan plan = make_folds(boot.size(), std::min(folds_v, boot.size()), s);
    const double psi = contrast_estimate(boot, regimen1, regimen0, cfg, plan).psi;
    return ratio ? std::log(psi) : psi;
  };
  const double point = ratio ? std::log(r.psi) : r.psi;
  const BootstrapResult b =
      bootstrap_variance(data.size(), closure, cfg.bootstrap_replicates, stream, point, cfg.percentile_ci);
  set_wald_inference(r, b.variance);
  r.ci_lo = ratio ? std::exp(b.ci_lo) : b.ci_lo;
  r.ci_hi = ratio ? std::exp(b.ci_hi) : b.ci_hi;
  if (b.failures > 0) r.diagnostics.notes.push_back(std::to_string(b.failures) + " bootstrap replicates failed");
  return r;
}

BootstrapResult bootstrap_variance(size_t n_units, const BootstrapClosure& estimator, size_t replicates,
                                   SeededStream stream, double point, bool percentile) {
  if (replicates < 2) throw Error(ErrorCode::InvalidConfig, "bootstrap needs replicates");
  BootstrapResult out;
  for (size_t b = 0; b < replicates; ++b) {
    SeededStream s = stream.substream(b);
    const auto idx = resample_indices(n_units, n_units, s);
    try {
      const double value = estimator(idx, s.substream(1));
      if (!std::isfinite(value)) throw Error(ErrorCode::DomainViolation, "non-finite replicate");
      out.replicates.push_back(value);
    } catch (const Error&) {
      ++out.failures;
    }
  }
  if (static_cast<double>(out.failures) > 0.10 * static_cast<double>(replicates)) {
    throw Error(ErrorCode::BootstrapFailure, std::to_string(out.failures) + " of " + std::to_string(replicates) +
                                                 " bootstrap replicates failed");
  }
  out.variance = sample_variance(out.replicates);
  out.se = std::sqrt(out.variance);
  if (percentile) {
    std::vector<double> sorted = out.replicates;
    std::sort(sorted.begin(), sorted.end());
    const auto quantile = [&](double p) {
      const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
      const auto lo = static_cast<size_t>(std::floor(h));
      const size_t hi = std::min(lo + 1, sorted.size() - 1);
      return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
    };
    out.ci_lo = quantile(0.025);
    out.ci_hi = quantile(0.975);
  } else {
    out.ci_lo = point - kZ975 * out.se;
    out.ci_hi = point + kZ975 * out.se;
  }
  return out;
}

}  // namespace estsel
