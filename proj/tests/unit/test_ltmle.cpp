#include <cmath>
#include <map>

#include "doctest.h"
#include "estsel/errors.hpp"
#include "estsel/ltmle.hpp"
#include "estsel/stats.hpp"

using namespace estsel;

namespace {

constexpr double kNA = std::numeric_limits<double>::quiet_NaN();

LongitudinalData empty_data(size_t n, size_t horizon, size_t p, size_t q, bool censoring) {
  LongitudinalData d;
  d.horizon = horizon;
  for (size_t i = 0; i < n; ++i) d.subject_ids.push_back(std::to_string(i));
  for (size_t j = 0; j < p; ++j) d.baseline_names.push_back("W" + std::to_string(j));
  for (size_t j = 0; j < q; ++j) d.time_varying_names.push_back("L" + std::to_string(j));
  d.baseline = Eigen::MatrixXd::Zero(n, p);
  d.time_varying.assign(horizon + 1, Eigen::MatrixXd::Constant(n, q, kNA));
  d.treatment = Eigen::MatrixXd::Constant(n, horizon + 1, kNA);
  d.censoring = Eigen::MatrixXd::Constant(n, horizon + 1, kNA);
  d.outcome = Eigen::VectorXd::Constant(n, kNA);
  d.has_censoring = censoring;
  return d;
}

// W, A(0), L(1), A(1), Y all binary.
LongitudinalData two_period(SeededStream s, size_t n) {
  LongitudinalData d = empty_data(n, 1, 1, 1, false);
  for (size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const double w = s.bernoulli(0.45);
    const double a0 = s.bernoulli(0.3 + 0.4 * w);
    const double l1 = s.bernoulli(0.2 + 0.3 * w + 0.3 * a0);
    const double a1 = s.bernoulli(0.25 + 0.25 * l1 + 0.3 * a0);
    d.baseline(r, 0) = w;
    d.time_varying[0](r, 0) = 0.0;
    d.time_varying[1](r, 0) = l1;
    d.treatment(r, 0) = a0;
    d.treatment(r, 1) = a1;
    d.censoring(r, 0) = 0.0;
    d.censoring(r, 1) = 0.0;
    d.outcome[r] = s.bernoulli(0.1 + 0.2 * w + 0.25 * l1 + 0.15 * a1 + 0.1 * a0);
  }
  return d;
}

double brute_force_gformula(const LongitudinalData& d, int a0, int a1) {
  const double n = static_cast<double>(d.size());
  double psi = 0.0;
  for (int w = 0; w <= 1; ++w) {
    double nw = 0, nwa = 0;
    std::array<double, 2> nl{0, 0}, ysum{0, 0}, ycount{0, 0};
    for (size_t i = 0; i < d.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      if (d.baseline(r, 0) != w) continue;
      nw += 1;
      if (d.treatment(r, 0) != a0) continue;
      nwa += 1;
      const int l = static_cast<int>(d.time_varying[1](r, 0));
      nl[l] += 1;
      if (d.treatment(r, 1) != a1) continue;
      ysum[l] += d.outcome[r];
      ycount[l] += 1;
    }
    for (int l = 0; l <= 1; ++l) psi += ysum[l] / ycount[l] * nl[l] / nwa * nw / n;
  }
  return psi;
}

LtmleConfig saturated_config() {
  LtmleConfig cfg;
  cfg.nuisance.outcome = NuisanceModel::parametric(LearnerSpec::ridge_interactions(0.0, Family::Gaussian));
  cfg.nuisance.propensity = NuisanceModel::parametric(LearnerSpec::ridge_interactions(0.0, Family::Gaussian));
  cfg.nuisance.truncation.reset();
  cfg.cumulative_bound.reset();
  return cfg;
}

// Censoring depends on covariates; non-followers and censored subjects stop early.
LongitudinalData censored_panel(SeededStream s, size_t n, size_t horizon) {
  LongitudinalData d = empty_data(n, horizon, 2, 2, true);
  for (size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    d.baseline(r, 0) = s.bernoulli(0.5);
    d.baseline(r, 1) = s.normal();
    double risk = -2.0 + 0.5 * d.baseline(r, 0);
    for (size_t t = 0; t <= horizon; ++t) {
      const auto c = static_cast<Eigen::Index>(t);
      d.time_varying[t](r, 0) = s.bernoulli(expit(-0.5 + 0.4 * d.baseline(r, 1)));
      d.time_varying[t](r, 1) = s.normal();
      const double a = s.bernoulli(expit(-0.3 + 0.8 * d.time_varying[t](r, 0)));
      d.treatment(r, c) = a;
      const double cens = s.bernoulli(expit(-2.5 + 0.5 * d.time_varying[t](r, 0)));
      d.censoring(r, c) = cens;
      risk += 0.3 * d.time_varying[t](r, 0) - 0.4 * a;
      if (cens == 1.0) break;
      if (t == horizon) d.outcome[r] = s.bernoulli(expit(risk));
    }
  }
  return d;
}

}  // namespace

TEST_CASE("single time point without censoring matches the missing-outcome TMLE") {
  SeededStream s(8, 0);
  const size_t n = 300;
  LongitudinalData d = empty_data(n, 0, 2, 1, false);
  MissingData m;
  m.covariates.resize(n, 3);
  m.measured.resize(n);
  m.outcome.resize(n);
  for (size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    d.baseline(r, 0) = s.bernoulli(0.5);
    d.baseline(r, 1) = s.normal();
    d.time_varying[0](r, 0) = s.normal();
    d.treatment(r, 0) = s.bernoulli(expit(0.5 * d.baseline(r, 1)));
    d.censoring(r, 0) = 0.0;
    d.outcome[r] = s.bernoulli(expit(d.treatment(r, 0) + d.baseline(r, 0)));
    m.covariates.row(r) << d.baseline(r, 0), d.baseline(r, 1), d.time_varying[0](r, 0);
    m.measured[r] = d.treatment(r, 0);
    m.outcome[r] = d.treatment(r, 0) == 1.0 ? d.outcome[r] : kNA;
  }
  LtmleConfig cfg;
  cfg.nuisance.outcome = NuisanceModel::parametric(LearnerSpec::main_terms());
  cfg.nuisance.propensity = NuisanceModel::parametric(LearnerSpec::main_terms());
  cfg.nuisance.truncation.reset();
  cfg.cumulative_bound.reset();
  const FoldPlan plan = make_folds(n, 5, SeededStream(8, 1));
  const auto ice = ice_mean(d, Regimen::constant(1, 0), cfg, plan);
  const auto tm = tmle_missing_mean(m, cfg.nuisance, plan);
  CHECK(std::fabs(ice.psi - tm.psi) < 1e-10);
  CHECK(std::fabs(ice.variance - tm.variance) < 1e-10);
}

TEST_CASE("censoring as missingness agrees with the missing-outcome TMLE") {
  SeededStream s(9, 0);
  const size_t n = 400;
  LongitudinalData d = empty_data(n, 0, 1, 1, true);
  MissingData m;
  m.covariates.resize(n, 2);
  m.measured.resize(n);
  m.outcome.resize(n);
  for (size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    d.baseline(r, 0) = s.normal();
    d.time_varying[0](r, 0) = s.bernoulli(0.4);
    d.treatment(r, 0) = 1.0;
    d.censoring(r, 0) = s.bernoulli(expit(-1.0 + d.baseline(r, 0)));
    const double y = s.bernoulli(expit(d.time_varying[0](r, 0) - d.baseline(r, 0)));
    if (d.censoring(r, 0) == 0.0) d.outcome[r] = y;
    m.covariates.row(r) << d.baseline(r, 0), d.time_varying[0](r, 0);
    m.measured[r] = 1.0 - d.censoring(r, 0);
    m.outcome[r] = d.outcome[r];
  }
  LtmleConfig cfg;
  cfg.nuisance.outcome = NuisanceModel::parametric(LearnerSpec::main_terms());
  cfg.nuisance.propensity = NuisanceModel::parametric(LearnerSpec::main_terms());
  cfg.nuisance.truncation.reset();
  cfg.cumulative_bound.reset();
  const FoldPlan plan = make_folds(n, 5, SeededStream(9, 1));
  const auto ice = ice_mean(d, Regimen::constant(1, 0), cfg, plan);
  const auto tm = tmle_missing_mean(m, cfg.nuisance, plan);
  CHECK(std::fabs(ice.psi - tm.psi) < 1e-10);
  CHECK((ice.ic - tm.ic).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("two-period saturated ICE equals the brute-force g-formula") {
  const LongitudinalData d = two_period(SeededStream(17, 0), 3000);
  const LtmleConfig cfg = saturated_config();
  const FoldPlan plan = make_folds(d.size(), 5, SeededStream(17, 1));
  for (int a0 = 0; a0 <= 1; ++a0) {
    for (int a1 = 0; a1 <= 1; ++a1) {
      const auto r = ice_mean(d, Regimen{{a0, a1}}, cfg, plan);
      CHECK(std::fabs(r.psi - brute_force_gformula(d, a0, a1)) < 1e-8);
    }
  }
  LtmleConfig contrast = cfg;
  const auto c = ltmle_contrast(d, Regimen::constant(1, 1), Regimen::constant(0, 1), contrast, plan);
  CHECK(std::fabs(c.psi - (brute_force_gformula(d, 1, 1) - brute_force_gformula(d, 0, 0))) < 1e-8);
  CHECK(std::fabs(c.ic.mean()) < 1e-8);
}

TEST_CASE("deterministic outcome for followers gives one") {
  LongitudinalData d = two_period(SeededStream(3, 0), 400);
  for (size_t i = 0; i < d.size(); ++i) {
    if (d.treatment(static_cast<Eigen::Index>(i), 0) == 1 && d.treatment(static_cast<Eigen::Index>(i), 1) == 1) {
      d.outcome[static_cast<Eigen::Index>(i)] = 1.0;
    }
  }
  LtmleConfig cfg;
  cfg.nuisance.outcome = NuisanceModel::parametric(LearnerSpec::main_terms());
  cfg.nuisance.propensity = NuisanceModel::parametric(LearnerSpec::main_terms());
  const auto r = ice_mean(d, Regimen::constant(1, 1), cfg, make_folds(d.size(), 5, SeededStream(3, 1)));
  CHECK(r.psi == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("identical regimens give an exact zero contrast") {
  const LongitudinalData d = censored_panel(SeededStream(21, 0), 300, 2);
  LtmleConfig cfg;
  const auto r = ltmle_contrast(d, Regimen::constant(1, 2), Regimen::constant(1, 2), cfg,
                                make_folds(d.size(), 5, SeededStream(21, 1)));
  CHECK(r.psi == 0.0);
  CHECK(r.ic.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("targeting, truncation and pseudo-outcome bounds over random panels") {
  for (uint64_t seed = 0; seed < 12; ++seed) {
    const LongitudinalData d = censored_panel(SeededStream(seed, 5), 500, 3);
    LtmleConfig cfg;
    cfg.nuisance.outcome = NuisanceModel::parametric(LearnerSpec::main_terms());
    cfg.nuisance.propensity = NuisanceModel::parametric(LearnerSpec::main_terms());
    cfg.cumulative_bound = seed % 2 ? std::optional<double>(40.0) : std::optional<double>(8.0);
    const FoldPlan plan = make_folds(d.size(), 5, SeededStream(seed, 6));
    for (int a : {0, 1}) {
      const auto r = ice_mean(d, Regimen::constant(a, 3), cfg, plan);
      CHECK(r.psi >= 0.0);
      CHECK(r.psi <= 1.0);
      CHECK(r.diagnostics.max_clever_covariate <= *cfg.cumulative_bound);
      if (r.diagnostics.fluctuation_converged) CHECK(std::fabs(r.ic.mean()) < 1e-6);
    }
  }
}

TEST_CASE("empty risk set is flagged, not fatal") {
  LongitudinalData d = two_period(SeededStream(4, 0), 200);
  for (size_t i = 0; i < d.size(); ++i) d.treatment(static_cast<Eigen::Index>(i), 1) = 0.0;
  LtmleConfig cfg;
  const auto r = ice_mean(d, Regimen::constant(1, 1), cfg, make_folds(d.size(), 5, SeededStream(4, 1)));
  CHECK(r.diagnostics.empty_risk_set);
  CHECK(std::isfinite(r.psi));
}

TEST_CASE("configuration checks") {
  const LongitudinalData d = two_period(SeededStream(5, 0), 50);
  LtmleConfig cfg;
  cfg.cumulative_bound = 0.5;
  CHECK_THROWS_AS(ltmle_contrast(d, Regimen::constant(1, 1), Regimen::constant(0, 1), cfg,
                                 make_folds(50, 5, SeededStream(1, 1))),
                  Error);
  cfg.cumulative_bound = 40;
  cfg.variance = VarianceMethod::Bootstrap;
  cfg.bootstrap_replicates = 100;
  CHECK_THROWS_AS(cfg.validate(), Error);
  CHECK_THROWS_AS(ice_mean(d, Regimen::constant(1, 3), LtmleConfig{}, make_folds(50, 5, SeededStream(1, 1))), Error);
}

TEST_CASE("bootstrap variance") {
  SUBCASE("constant closure") {
    const auto b = bootstrap_variance(50, [](std::span<const size_t>, SeededStream) { return 3.0; }, 200,
                                      SeededStream(1, 0), 3.0);
    CHECK(b.variance == 0.0);
    CHECK(b.ci_lo == 3.0);
  }
  SUBCASE("mean of iid normals") {
    SeededStream s(55, 0);
    std::vector<double> x(500);
    for (auto& v : x) v = s.normal();
    const auto closure = [&](std::span<const size_t> idx, SeededStream) {
      double total = 0.0;
      for (size_t i : idx) total += x[i];
      return total / static_cast<double>(idx.size());
    };
    const double truth_var = sample_variance(x) / 500.0;
    const auto b = bootstrap_variance(500, closure, 1000, SeededStream(55, 1), mean(x));
    CHECK(std::fabs(b.variance / (1.0 / 500.0) - 1.0) < 0.15);
    CHECK(std::fabs(b.variance / truth_var - 1.0) < 0.15);
    const auto again = bootstrap_variance(500, closure, 1000, SeededStream(55, 1), mean(x));
    CHECK(again.variance == b.variance);
    const auto pct = bootstrap_variance(500, closure, 1000, SeededStream(55, 1), mean(x), true);
    CHECK(pct.ci_lo < mean(x));
    CHECK(pct.ci_hi > mean(x));
  }
  SUBCASE("too many failed replicates") {
    int calls = 0;
    const auto flaky = [&](std::span<const size_t>, SeededStream) -> double {
      if (++calls % 5 == 0) throw Error(ErrorCode::PositivityCollapse, "x");
      return 1.0;
    };
    try {
      bootstrap_variance(10, flaky, 200, SeededStream(1, 1), 1.0);
      FAIL("expected BootstrapFailure");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::BootstrapFailure);
    }
  }
}

TEST_CASE("bootstrap contrast is reproducible") {
  const LongitudinalData d = censored_panel(SeededStream(30, 0), 200, 1);
  LtmleConfig cfg;
  cfg.variance = VarianceMethod::Bootstrap;
  const FoldPlan plan = make_folds(d.size(), 5, SeededStream(30, 1));
  const auto a = ltmle_contrast(d, Regimen::constant(1, 1), Regimen::constant(0, 1), cfg, plan, SeededStream(30, 2));
  const auto b = ltmle_contrast(d, Regimen::constant(1, 1), Regimen::constant(0, 1), cfg, plan, SeededStream(30, 2));
  CHECK(a.variance == b.variance);
  CHECK(a.variance > 0.0);
  CHECK(a.ci_lo == doctest::Approx(a.psi - 1.96 * a.se));
}
