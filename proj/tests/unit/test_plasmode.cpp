#include <cmath>
#include <set>

#include "doctest.h"
#include "estsel/errors.hpp"
#include "estsel/plasmode.hpp"
#include "estsel/stats.hpp"

using namespace estsel;

namespace {

constexpr double kNA = std::numeric_limits<double>::quiet_NaN();

// W1 binary, W2 normal, one binary L, treatment and censoring per period.
LongitudinalData panel(SeededStream s, size_t n, size_t horizon, bool censoring, double a_rate = -1.0) {
  LongitudinalData d;
  d.horizon = horizon;
  d.baseline_names = {"W1", "W2"};
  d.time_varying_names = {"L"};
  d.has_censoring = censoring;
  d.baseline.resize(n, 2);
  d.time_varying.assign(horizon + 1, Eigen::MatrixXd::Constant(n, 1, kNA));
  d.treatment = Eigen::MatrixXd::Constant(n, horizon + 1, kNA);
  d.censoring = Eigen::MatrixXd::Constant(n, horizon + 1, kNA);
  d.outcome = Eigen::VectorXd::Constant(n, kNA);
  for (size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    d.subject_ids.push_back(std::to_string(i));
    d.baseline(r, 0) = s.bernoulli(0.4);
    d.baseline(r, 1) = s.normal();
    double a = 0.0;
    bool censored = false;
    for (size_t t = 0; t <= horizon; ++t) {
      d.time_varying[t](r, 0) = s.bernoulli(expit(-0.5 + 0.6 * d.baseline(r, 0) + 0.5 * a));
      const double pa = a_rate >= 0 ? a_rate : expit(-0.3 + 0.5 * d.baseline(r, 1) + 0.8 * d.time_varying[t](r, 0));
      a = s.bernoulli(pa);
      d.treatment(r, t) = a;
      const double c = censoring ? s.bernoulli(0.05) : 0.0;
      d.censoring(r, t) = c;
      if (c == 1.0) {
        censored = true;
        break;
      }
    }
    if (!censored) d.outcome[r] = s.bernoulli(expit(-0.7 + 0.5 * d.baseline(r, 0) + 0.7 * a + 0.4 * d.time_varying[horizon](r, 0)));
  }
  return d;
}

double prevalence(const LongitudinalData& d) {
  double s = 0, k = 0;
  for (Eigen::Index i = 0; i < d.outcome.size(); ++i) {
    if (!std::isnan(d.outcome[i])) {
      s += d.outcome[i];
      ++k;
    }
  }
  return s / k;
}

ClusterStudyData clusters(SeededStream s, size_t n_clusters, size_t per_cluster) {
  ClusterStudyData d;
  d.cluster_covariate_names = {"E1"};
  d.cluster_covariates.resize(n_clusters, 1);
  d.treatment.resize(n_clusters);
  d.covariate_time_varying = {false, true};
  for (size_t c = 0; c < n_clusters; ++c) {
    const auto r = static_cast<Eigen::Index>(c);
    d.ids.push_back("c" + std::to_string(c));
    d.cluster_covariates(r, 0) = s.normal();
    d.treatment[r] = c < n_clusters / 2 ? 1.0 : 0.0;
    MissingData part;
    part.covariate_names = {"W", "M"};
    part.covariates.resize(per_cluster, 2);
    part.measured = Eigen::VectorXd::Ones(per_cluster);
    part.outcome.resize(per_cluster);
    for (size_t i = 0; i < per_cluster; ++i) {
      part.covariates(i, 0) = s.bernoulli(0.5);
      part.covariates(i, 1) = s.normal();
      part.outcome[i] = s.bernoulli(0.3);
    }
    d.individuals.push_back(part);
    d.underlying_outcome.push_back(part.outcome);
  }
  return d;
}

MissingnessMechanism mechanism(double intercept, std::vector<std::pair<std::string, double>> coefs = {}) {
  std::string text = "{\"intercept\": " + std::to_string(intercept) + ", \"coefficients\": {";
  for (size_t k = 0; k < coefs.size(); ++k) {
    text += (k ? ", \"" : "\"") + coefs[k].first + "\": " + std::to_string(coefs[k].second);
  }
  return MissingnessMechanism::parse(text + "}}");
}

}  // namespace

TEST_CASE("treatment model recovers a constant propensity") {
  const LongitudinalData src = panel(SeededStream(1, 0), 5000, 0, false, 0.5);
  const auto g = fit_generative_models(src, OutcomeBlindSpec{}, SeededStream(1, 1));
  const auto& a = g.node("A(0)");
  std::vector<double> h(g.slots, 0.0);
  double worst = 0.0;
  for (size_t i = 0; i < src.size(); ++i) {
    h[g.slot_w(0)] = src.baseline(i, 0);
    h[g.slot_w(1)] = src.baseline(i, 1);
    h[g.slot_l(0, 0)] = src.time_varying[0](i, 0);
    worst = std::max(worst, std::fabs(a.mean(h.data()) - 0.5));
  }
  CHECK(worst < 0.02);
}

TEST_CASE("never-censored source gives a censoring model at the floor") {
  LongitudinalData src = panel(SeededStream(2, 0), 300, 1, false);
  src.has_censoring = true;
  src.censoring.setZero();
  const auto g = fit_generative_models(src, OutcomeBlindSpec{}, SeededStream(2, 1));
  std::vector<double> h(g.slots, 1.0);
  CHECK(g.node("C(0)").mean(h.data()) <= 1e-4);
  CHECK(g.node("C(1)").mean(h.data()) <= 1e-4);
}

TEST_CASE("refitting an identical source reproduces every coefficient") {
  const LongitudinalData src = panel(SeededStream(3, 0), 400, 2, true);
  const auto a = fit_generative_models(src, OutcomeBlindSpec{}, SeededStream(3, 1));
  const auto b = fit_generative_models(src, OutcomeBlindSpec{}, SeededStream(3, 1));
  REQUIRE(a.nodes.size() == b.nodes.size());
  for (size_t k = 0; k < a.nodes.size(); ++k) {
    CHECK(a.nodes[k].name == b.nodes[k].name);
    CHECK(a.nodes[k].lambda == b.nodes[k].lambda);
    CHECK(a.nodes[k].coefficients == b.nodes[k].coefficients);
    CHECK(a.nodes[k].term_names.size() == static_cast<size_t>(std::max<Eigen::Index>(1, a.nodes[k].coefficients.size())));
  }
  // L(t), A(t), C(t) per period after the first, then Y.
  CHECK(a.nodes.front().name == "A(0)");
  CHECK(a.nodes[2].name == "L(1)");
  CHECK(a.nodes.back().name == "Y");
}

TEST_CASE("outcome-blind draws") {
  const LongitudinalData src = panel(SeededStream(4, 0), 600, 2, true);
  const auto g = fit_generative_models(src, OutcomeBlindSpec{}, SeededStream(4, 1));
  const LongitudinalData out = outcome_blind_generate(g, 500, SeededStream(4, 2));

  SUBCASE("baseline rows come from the source") {
    std::set<std::vector<double>> rows;
    for (size_t i = 0; i < src.size(); ++i) rows.insert({src.baseline(i, 0), src.baseline(i, 1), src.time_varying[0](i, 0)});
    for (size_t i = 0; i < out.size(); ++i) {
      CHECK(rows.count({out.baseline(i, 0), out.baseline(i, 1), out.time_varying[0](i, 0)}) == 1);
    }
  }
  SUBCASE("output passes schema validation") {
    CHECK(validate_schema(to_long(out), StudyType::Longitudinal).empty());
  }
  SUBCASE("identical inputs give identical data") {
    const LongitudinalData again = outcome_blind_generate(g, 500, SeededStream(4, 2));
    CHECK(to_long(again).column("Y").missing == to_long(out).column("Y").missing);
    CHECK(to_long(again).column("L").values == to_long(out).column("L").values);
    CHECK(again.treatment.isApprox(out.treatment) == (again.treatment.array() == out.treatment.array()).all());
  }
}

TEST_CASE("synthetic outcome prevalence tracks the source") {
  const LongitudinalData src = panel(SeededStream(5, 0), 800, 1, true);
  const auto g = fit_generative_models(src, OutcomeBlindSpec{}, SeededStream(5, 1));
  std::vector<double> prev;
  for (uint64_t r = 0; r < 100; ++r) prev.push_back(prevalence(outcome_blind_generate(g, src.size(), SeededStream(5, 100 + r))));
  CHECK(std::fabs(mean(prev) - prevalence(src)) < 0.03);
}

TEST_CASE("rarity shift sets the exposure prevalence") {
  const LongitudinalData src = panel(SeededStream(6, 0), 1000, 0, false);
  OutcomeBlindSpec spec;
  spec.exposure_prevalence = 0.1;
  const auto g = fit_generative_models(src, spec, SeededStream(6, 1));
  const LongitudinalData out = outcome_blind_generate(g, 5000, SeededStream(6, 2));
  CHECK(out.treatment.col(0).mean() == doctest::Approx(0.1).epsilon(0.25));
  CHECK(g.node("A(0)").shift < 0.0);
}

TEST_CASE("truth under common random numbers") {
  const LongitudinalData src = panel(SeededStream(7, 0), 500, 2, true);
  const auto always = Regimen::constant(1, 2), never = Regimen::constant(0, 2);

  SUBCASE("identical regimens give exactly zero") {
    const auto g = fit_generative_models(src, OutcomeBlindSpec{}, SeededStream(7, 1));
    const TrueEffect t = compute_truth(g, always, always, EffectScale::Difference, 2000, SeededStream(7, 2));
    CHECK(t.value == 0.0);
    CHECK(t.method == TruthMethod::MonteCarloGformula);
  }
  SUBCASE("zero treatment override gives a null truth") {
    OutcomeBlindSpec spec;
    spec.treatment_override = 0.0;
    const auto g = fit_generative_models(src, spec, SeededStream(7, 1));
    const TrueEffect t = compute_truth(g, always, never, EffectScale::Difference, 5000, SeededStream(7, 2));
    CHECK(std::fabs(t.value) <= t.mc_se);
    const TrueEffect r = compute_truth(g, always, never, EffectScale::Ratio, 5000, SeededStream(7, 2));
    CHECK(std::fabs(std::log(r.value)) <= r.mc_se);
  }
  SUBCASE("serial and parallel kernels agree bit for bit") {
    const auto g = fit_generative_models(src, OutcomeBlindSpec{}, SeededStream(7, 1));
    const auto a = counterfactual_outcomes(g, always, 3000, SeededStream(7, 3), 1);
    const auto b = counterfactual_outcomes(g, always, 3000, SeededStream(7, 3), 4);
    CHECK(a == b);
  }
  SUBCASE("wrong regimen length") {
    const auto g = fit_generative_models(src, OutcomeBlindSpec{}, SeededStream(7, 1));
    CHECK_THROWS_AS(compute_truth(g, Regimen::constant(1, 1), never, EffectScale::Difference, 10, SeededStream(7, 2)), Error);
  }
}

TEST_CASE("one-period truth matches the exact mixture over the source") {
  const LongitudinalData src = panel(SeededStream(8, 0), 400, 0, false);
  const auto g = fit_generative_models(src, OutcomeBlindSpec{}, SeededStream(8, 1));
  const auto& y = g.node("Y");
  REQUIRE(!y.constant);
  // Exact E[Y_a] = average over source rows of expit(beta' design(W, L0, a)).
  auto exact = [&](double a) {
    Eigen::MatrixXd x(src.size(), 4);
    x.col(0) = src.baseline.col(0);
    x.col(1) = src.baseline.col(1);
    x.col(2) = src.time_varying[0].col(0);
    x.col(3).setConstant(a);
    const std::vector<size_t> cols{0, 1, 2, 3};
    const Eigen::MatrixXd d = design_matrix(x, cols, true);
    const Eigen::VectorXd eta = (d * y.coefficients.tail(y.coefficients.size() - 1)).array() + y.coefficients[0];
    double s = 0.0;
    for (Eigen::Index i = 0; i < eta.size(); ++i) s += std::clamp(expit(eta[i]), 1e-4, 1 - 1e-4);
    return s / static_cast<double>(eta.size());
  };
  const TrueEffect t = compute_truth(g, Regimen::constant(1, 0), Regimen::constant(0, 0), EffectScale::Difference, 100000,
                                     SeededStream(8, 2));
  CHECK(std::fabs(t.value - (exact(1) - exact(0))) < 3.0 * t.mc_se);
  const TrueEffect m = compute_truth(g, Regimen::constant(1, 0), {}, EffectScale::Mean, 100000, SeededStream(8, 2));
  CHECK(std::fabs(m.value - exact(1)) < 3.0 * m.mc_se);
}

TEST_CASE("MC-SE shrinks with the square root of the replicate count") {
  const LongitudinalData src = panel(SeededStream(9, 0), 400, 1, false);
  const auto g = fit_generative_models(src, OutcomeBlindSpec{}, SeededStream(9, 1));
  std::vector<double> ratios;
  for (uint64_t s = 0; s < 5; ++s) {
    const auto a = compute_truth(g, Regimen::constant(1, 1), Regimen::constant(0, 1), EffectScale::Difference, 20000,
                                 SeededStream(90, s));
    const auto b = compute_truth(g, Regimen::constant(1, 1), Regimen::constant(0, 1), EffectScale::Difference, 40000,
                                 SeededStream(91, s));
    ratios.push_back(b.mc_se / a.mc_se);
  }
  CHECK(mean(ratios) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(0.10));
}

TEST_CASE("treatment-blind generation") {
  const ClusterStudyData src = clusters(SeededStream(10, 0), 28, 60);

  SUBCASE("permutation keeps the treated count and the truth is null") {
    const auto draw = treatment_blind_generate(src, {mechanism(0.8)}, EffectScale::Ratio, SeededStream(10, 1));
    CHECK(draw.data.treatment.sum() == src.treatment.sum());
    CHECK(draw.truth.value == 1.0);
    CHECK(draw.truth.mc_se == 0.0);
    CHECK(draw.truth.method == TruthMethod::NullByDesign);
    CHECK(draw.truth.is_null());
    CHECK(treatment_blind_generate(src, {mechanism(0.8)}, EffectScale::Difference, SeededStream(10, 1)).truth.value == 0.0);
  }
  SUBCASE("covariates and underlying outcomes are untouched") {
    const auto draw = treatment_blind_generate(src, {mechanism(0.5, {{"E1", 0.3}, {"W", -0.4}, {"A", 0.2}, {"M", 0.1}})},
                                               EffectScale::Ratio, SeededStream(10, 2));
    CHECK((draw.data.cluster_covariates.array() == src.cluster_covariates.array()).all());
    for (size_t c = 0; c < src.size(); ++c) {
      CHECK((draw.data.individuals[c].covariates.array() == src.individuals[c].covariates.array()).all());
      CHECK((draw.data.underlying_outcome[c].array() == src.underlying_outcome[c].array()).all());
      for (Eigen::Index i = 0; i < draw.data.individuals[c].outcome.size(); ++i) {
        const auto& part = draw.data.individuals[c];
        CHECK((part.measured[i] == 1.0 ? part.outcome[i] == src.underlying_outcome[c][i] : std::isnan(part.outcome[i])));
      }
    }
    CHECK(validate_schema(to_long(draw.data), StudyType::ClusterTwoStage).empty());
  }
  SUBCASE("intercept-only mechanism hits the requested rate") {
    const ClusterStudyData big = clusters(SeededStream(10, 3), 50, 100);
    const auto draw = treatment_blind_generate(big, {mechanism(logit(0.7))}, EffectScale::Ratio, SeededStream(10, 4));
    double measured = 0, total = 0;
    for (const auto& part : draw.data.individuals) {
      measured += part.measured.sum();
      total += static_cast<double>(part.size());
    }
    CHECK(std::fabs(measured / total - 0.7) < 0.02);
  }
  SUBCASE("strata restrict the permutation") {
    std::vector<int> strata(28);
    for (size_t c = 0; c < 28; ++c) strata[c] = static_cast<int>(c / 14);
    ClusterStudyData paired = src;
    for (size_t c = 0; c < 28; ++c) paired.treatment[static_cast<Eigen::Index>(c)] = c % 2;
    for (uint64_t r = 0; r < 20; ++r) {
      const auto draw = treatment_blind_generate(paired, {mechanism(0.0), strata}, EffectScale::Ratio, SeededStream(11, r));
      CHECK(draw.data.treatment.head(14).sum() == 7.0);
      CHECK(draw.data.treatment.tail(14).sum() == 7.0);
    }
  }
  SUBCASE("degenerate or malformed mechanisms") {
    CHECK_THROWS_AS(treatment_blind_generate(src, {mechanism(-800.0)}, EffectScale::Ratio, SeededStream(12, 0)), Error);
    CHECK_THROWS_AS(treatment_blind_generate(src, {mechanism(0.0, {{"nope", 1.0}})}, EffectScale::Ratio, SeededStream(12, 0)),
                    Error);
    CHECK_THROWS_AS(MissingnessMechanism::parse("{\"coefficients\": {}}"), Error);
    CHECK_THROWS_AS(MissingnessMechanism::parse("not json"), Error);
    try {
      treatment_blind_generate(src, {mechanism(60.0)}, EffectScale::Ratio, SeededStream(12, 0));
      FAIL("expected InvalidMechanism");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::InvalidMechanism);
      CHECK(std::string(e.what()).find("c0") != std::string::npos);
    }
  }
}

TEST_CASE("mechanism hash") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  const auto m = MissingnessMechanism::parse("{\"intercept\": 0.5}");
  CHECK(m.sha256 == sha256_hex("{\"intercept\": 0.5}"));
  CHECK(m.coefficients.empty());
}
