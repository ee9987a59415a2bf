#include "estsel/demo.hpp"

#include <cmath>
#include <limits>

#include "estsel/stats.hpp"

namespace estsel {

LongitudinalData demo_panel(const DemoPanelOptions& o, SeededStream s) {
  constexpr double kNA = std::numeric_limits<double>::quiet_NaN();
  const auto n = static_cast<Eigen::Index>(o.subjects);
  const auto q = static_cast<Eigen::Index>(o.time_varying);
  LongitudinalData d;
  d.horizon = o.horizon;
  d.has_censoring = o.censoring;
  d.baseline_names = {"W1", "W2"};
  for (Eigen::Index j = 0; j < q; ++j) d.time_varying_names.push_back("L" + std::to_string(j + 1));
  d.baseline.resize(n, 2);
  d.time_varying.assign(o.horizon + 1, Eigen::MatrixXd::Constant(n, q, kNA));
  d.treatment = Eigen::MatrixXd::Constant(n, static_cast<Eigen::Index>(o.horizon + 1), kNA);
  d.censoring = d.treatment;
  d.outcome = Eigen::VectorXd::Constant(n, kNA);
  for (Eigen::Index i = 0; i < n; ++i) {
    d.subject_ids.push_back("p" + std::to_string(i + 1));
    const double w1 = s.bernoulli(0.45);
    const double w2 = s.normal();
    d.baseline(i, 0) = w1;
    d.baseline(i, 1) = w2;
    double a = 0.0, treated = 0.0, l1 = 0.0;
    bool censored = false;
    for (size_t t = 0; t <= o.horizon; ++t) {
      for (Eigen::Index j = 0; j < q; ++j) {
        const double p = expit(-0.4 + 0.5 * w1 - 0.3 * w2 + 0.6 * l1 - 0.4 * a + 0.2 * static_cast<double>(j));
        d.time_varying[t](i, j) = s.bernoulli(p);
      }
      l1 = q > 0 ? d.time_varying[t](i, 0) : 0.0;
      a = s.bernoulli(expit(-0.2 + 0.4 * w2 + 0.7 * l1 + 1.2 * a));
      treated += a;
      d.treatment(i, static_cast<Eigen::Index>(t)) = a;
      const double c = o.censoring ? s.bernoulli(expit(-3.5 + 0.5 * l1)) : 0.0;
      d.censoring(i, static_cast<Eigen::Index>(t)) = c;
      if (c == 1.0) {
        censored = true;
        break;
      }
    }
    if (!censored) {
      const double lp = -1.2 + 0.5 * w1 + 0.4 * w2 + 0.5 * l1 + o.treatment_effect * treated / static_cast<double>(o.horizon + 1);
      d.outcome[i] = s.bernoulli(expit(lp));
    }
  }
  return d;
}

ClusterStudyData demo_trial(const DemoTrialOptions& o, SeededStream s) {
  ClusterStudyData d;
  d.cluster_covariate_names = {"pair", "E1", "E2"};
  d.covariate_time_varying = {false, true};
  const auto n = static_cast<Eigen::Index>(o.clusters);
  d.cluster_covariates.resize(n, 3);
  d.treatment.resize(n);
  for (Eigen::Index c = 0; c < n; ++c) {
    d.ids.push_back("c" + std::to_string(c + 1));
    const double pair = static_cast<double>(c / 2);
    const double e1 = s.normal();
    const double e2 = s.bernoulli(0.5);
    d.cluster_covariates.row(c) << pair, e1, e2;
    d.treatment[c] = static_cast<double>(c % 2);
    const double u = 0.3 * s.normal();
    MissingData part;
    part.covariate_names = {"W", "M"};
    const auto m = static_cast<Eigen::Index>(o.per_cluster);
    part.covariates.resize(m, 2);
    part.measured.resize(m);
    part.outcome.resize(m);
    Eigen::VectorXd underlying(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      const double w = s.bernoulli(0.5);
      const double mm = s.normal();
      part.covariates(i, 0) = w;
      part.covariates(i, 1) = mm;
      underlying[i] = s.bernoulli(expit(-1.0 + 0.5 * e1 + 0.3 * e2 + 0.4 * w + 0.3 * mm + u));
      part.measured[i] = s.bernoulli(o.measured);
      part.outcome[i] = part.measured[i] == 1.0 ? underlying[i] : std::numeric_limits<double>::quiet_NaN();
    }
    d.individuals.push_back(std::move(part));
    d.underlying_outcome.push_back(std::move(underlying));
  }
  return d;
}

Schema schema_of(const Dataset& ds) {
  Schema s;
  for (const auto& c : ds.columns()) {
    s.roles.emplace_back(c.name, c.role);
    if (c.cluster_level) s.cluster_level.push_back(c.name);
  }
  return s;
}

}  // namespace estsel
