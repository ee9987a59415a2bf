#include <cmath>

#include "doctest.h"
#include "estsel/errors.hpp"
#include "estsel/stats.hpp"
#include "estsel/twostage.hpp"

using namespace estsel;

namespace {

constexpr double kNA = std::numeric_limits<double>::quiet_NaN();

// Clusters alternate arms; E1 shifts the cluster outcome rate, E2 is noise.
ClusterStudyData trial(SeededStream s, size_t clusters, size_t per_cluster, double missing, double e1_effect = 0.0) {
  ClusterStudyData d;
  d.cluster_covariate_names = {"E1", "E2"};
  d.cluster_covariates.resize(clusters, 2);
  d.treatment.resize(clusters);
  for (size_t c = 0; c < clusters; ++c) {
    const auto r = static_cast<Eigen::Index>(c);
    d.ids.push_back("clinic" + std::to_string(c));
    d.cluster_covariates(r, 0) = s.uniform();
    d.cluster_covariates(r, 1) = s.normal();
    d.treatment[r] = c % 2;
    const double rate = std::clamp(0.3 + e1_effect * d.cluster_covariates(r, 0) + 0.05 * s.normal(), 0.02, 0.98);
    MissingData part;
    part.covariate_names = {"W", "M"};
    part.covariates.resize(per_cluster, 2);
    part.measured.resize(per_cluster);
    part.outcome.resize(per_cluster);
    Eigen::VectorXd underlying(per_cluster);
    for (size_t i = 0; i < per_cluster; ++i) {
      const auto k = static_cast<Eigen::Index>(i);
      part.covariates(k, 0) = s.bernoulli(0.5);
      part.covariates(k, 1) = s.normal();
      underlying[k] = s.bernoulli(std::clamp(rate + 0.1 * (part.covariates(k, 0) - 0.5), 0.0, 1.0));
      part.measured[k] = s.bernoulli(1.0 - missing);
      part.outcome[k] = part.measured[k] == 1.0 ? underlying[k] : kNA;
    }
    d.individuals.push_back(std::move(part));
    d.underlying_outcome.push_back(underlying);
  }
  return d;
}

ClusterSummaries summaries_from(const std::vector<double>& y, const std::vector<double>& a) {
  ClusterSummaries s;
  for (size_t i = 0; i < y.size(); ++i) {
    ClusterSummary c;
    c.id = std::to_string(i);
    c.endpoint = y[i];
    c.treatment = a[i];
    c.covariates = Eigen::VectorXd::Zero(0);
    s.clusters.push_back(c);
  }
  return s;
}

// Unadjusted working model: Q* reduces to training arm means.
double unadjusted_cv_oracle(const ClusterSummaries& s, const FoldPlan& folds) {
  const size_t n = s.size();
  double full[2] = {0, 0}, count[2] = {0, 0};
  for (const auto& c : s.clusters) {
    full[static_cast<int>(c.treatment)] += c.endpoint;
    count[static_cast<int>(c.treatment)] += 1;
  }
  const double mu1 = full[1] / count[1], mu0 = full[0] / count[0];
  double total = 0.0;
  size_t used = 0;
  for (size_t v = 0; v < folds.folds; ++v) {
    double tr[2] = {0, 0}, tc[2] = {0, 0};
    std::vector<size_t> valid;
    for (size_t i = 0; i < n; ++i) {
      if (static_cast<size_t>(folds.fold_of[i]) == v) {
        valid.push_back(i);
      } else {
        tr[static_cast<int>(s.clusters[i].treatment)] += s.clusters[i].endpoint;
        tc[static_cast<int>(s.clusters[i].treatment)] += 1;
      }
    }
    if (valid.empty()) continue;
    const double m1 = tr[1] / tc[1], m0 = tr[0] / tc[0];
    double ss = 0.0;
    for (size_t i : valid) {
      const double y = s.clusters[i].endpoint;
      const bool treated = s.clusters[i].treatment == 1.0;
      const double ic1 = (treated ? (y - m1) / 0.5 : 0.0) + m1 - mu1;
      const double ic0 = (!treated ? (y - m0) / 0.5 : 0.0) + m0 - mu0;
      const double ic = ic1 / mu1 - ic0 / mu0;
      ss += ic * ic;
    }
    total += ss / static_cast<double>(valid.size());
    ++used;
  }
  return total / static_cast<double>(used) / static_cast<double>(n);
}

}  // namespace

TEST_CASE("fully measured cluster: all stage-1 methods give the sample mean") {
  ClusterStudyData d = trial(SeededStream(1, 0), 4, 40, 0.0);
  NuisanceConfig cfg;
  for (auto m : {Stage1Method::EmpiricalMean, Stage1Method::TmleParametric, Stage1Method::TmleSuperLearner}) {
    const auto s = stage1_endpoints(d, m, cfg, SeededStream(1, 1));
    for (size_t c = 0; c < s.size(); ++c) {
      CHECK(std::fabs(s.clusters[c].endpoint - d.individuals[c].outcome.mean()) < 1e-8);
    }
  }
}

TEST_CASE("stage-1 TMLE endpoints recover pre-deletion cluster means under MCAR") {
  size_t within = 0, total = 0;
  for (uint64_t seed = 0; seed < 5; ++seed) {
    const ClusterStudyData d = trial(SeededStream(seed, 10), 28, 80, 0.3);
    const auto s = stage1_endpoints(d, Stage1Method::TmleParametric, NuisanceConfig{}, SeededStream(seed, 11));
    REQUIRE(s.size() == 28);
    for (size_t c = 0; c < 28; ++c) {
      within += std::fabs(s.clusters[c].endpoint - d.underlying_outcome[c].mean()) < 2.0 * s.clusters[c].se;
      ++total;
    }
  }
  CHECK(static_cast<double>(within) / static_cast<double>(total) >= 0.90);
}

TEST_CASE("single-individual cluster returns that individual's outcome") {
  ClusterStudyData d = trial(SeededStream(2, 0), 3, 5, 0.0);
  d.individuals[1].covariates = d.individuals[1].covariates.topRows(1).eval();
  d.individuals[1].measured = Eigen::VectorXd::Ones(1);
  d.individuals[1].outcome = Eigen::VectorXd::Constant(1, 1.0);
  for (auto m : {Stage1Method::EmpiricalMean, Stage1Method::TmleParametric, Stage1Method::TmleSuperLearner}) {
    CHECK(stage1_endpoints(d, m, NuisanceConfig{}, SeededStream(2, 1)).clusters[1].endpoint == 1.0);
  }
}

TEST_CASE("cluster without measured outcomes is named") {
  ClusterStudyData d = trial(SeededStream(3, 0), 3, 5, 0.0);
  d.individuals[2].measured.setZero();
  d.individuals[2].outcome.setConstant(kNA);
  try {
    stage1_endpoints(d, Stage1Method::TmleParametric, NuisanceConfig{}, SeededStream(3, 1));
    FAIL("expected NoMeasuredOutcomes");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NoMeasuredOutcomes);
    CHECK(std::string(e.what()).find("clinic2") != std::string::npos);
  }
}

TEST_CASE("stage 2 on identical endpoints") {
  const auto s = summaries_from(std::vector<double>(10, 0.4), {0, 1, 0, 1, 0, 1, 0, 1, 0, 1});
  Stage2Options ratio;
  CHECK(stage2_effect(s, {}, ratio).psi == doctest::Approx(1.0).epsilon(1e-14));
  Stage2Options diff;
  diff.scale = EffectScale::Difference;
  CHECK(std::fabs(stage2_effect(s, {}, diff).psi) < 1e-14);
}

TEST_CASE("unadjusted ratio of arm means 0.55 / 0.50") {
  const auto s = summaries_from({0.50, 0.55, 0.45, 0.60, 0.55, 0.50}, {0, 0, 0, 1, 1, 1});
  const auto r = stage2_effect(s, {}, Stage2Options{});
  CHECK(r.psi == doctest::Approx(1.10).epsilon(1e-12));
  CHECK(r.ci_lo < r.psi);
  CHECK(r.ci_hi > r.psi);
  CHECK(std::log(r.ci_hi) - std::log(r.psi) == doctest::Approx(1.96 * r.se));
  CHECK(r.p_value == doctest::Approx(two_sided_p(std::log(r.psi) / r.se)));
  CHECK(r.n_independent == 6);
}

TEST_CASE("unadjusted two-stage with empirical means equals the ratio of raw arm means") {
  const ClusterStudyData d = trial(SeededStream(12, 0), 20, 15, 0.0);
  const auto s = stage1_endpoints(d, Stage1Method::EmpiricalMean, NuisanceConfig{}, SeededStream(12, 1));
  double m[2] = {0, 0}, k[2] = {0, 0};
  for (size_t c = 0; c < d.size(); ++c) {
    m[static_cast<int>(d.treatment[static_cast<Eigen::Index>(c)])] += d.individuals[c].outcome.mean();
    k[static_cast<int>(d.treatment[static_cast<Eigen::Index>(c)])] += 1;
  }
  const auto r = stage2_effect(s, {}, Stage2Options{});
  CHECK(std::fabs(r.psi - (m[1] / k[1]) / (m[0] / k[0])) < 1e-10);
}

TEST_CASE("stage-2 errors") {
  CHECK_THROWS_AS(stage2_effect(summaries_from({0.2, 0.3}, {1, 1}), {}, Stage2Options{}), Error);
  try {
    stage2_effect(summaries_from({0.2, 0.3, 0.0, 0.0}, {1, 1, 0, 0}), {}, Stage2Options{});
    FAIL("expected ZeroDenominator");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ZeroDenominator);
  }
  try {
    adaptive_prespec(summaries_from({0.2, 0.3, 0.4}, {1, 0, 1}), ApsConfig{}, SeededStream(1, 1));
    FAIL("expected TooFewClusters");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::TooFewClusters);
  }
}

TEST_CASE("adaptive pre-specification") {
  const ClusterStudyData d = trial(SeededStream(40, 0), 28, 30, 0.1, 0.4);
  const auto s = stage1_endpoints(d, Stage1Method::EmpiricalMean, NuisanceConfig{}, SeededStream(40, 1));

  SUBCASE("unadjusted only") {
    const auto sel = adaptive_prespec(s, ApsConfig{}, SeededStream(40, 2));
    CHECK(sel.index == 0);
    CHECK(sel.adjustment.empty());
    CHECK(sel.folds.folds == 10);
  }
  SUBCASE("duplicates resolve to the earlier candidate") {
    ApsConfig aps;
    aps.candidates = {{}, {0}, {0}};
    const auto sel = adaptive_prespec(s, aps, SeededStream(40, 2));
    CHECK(sel.cv_variance[1] == sel.cv_variance[2]);
    CHECK(sel.index != 2);
  }
  SUBCASE("unadjusted CV variance matches fold arithmetic") {
    const auto sel = adaptive_prespec(s, ApsConfig::limited({0, 1}), SeededStream(40, 2));
    CHECK(sel.cv_variance[0] == doctest::Approx(unadjusted_cv_oracle(s, sel.folds)).epsilon(1e-9));
  }
}

TEST_CASE("adaptive pre-specification favours the prognostic covariate") {
  size_t picked = 0;
  const int reps = 500;
  for (int r = 0; r < reps; ++r) {
    ClusterSummaries s;
    s.covariate_names = {"E1", "E2"};
    SeededStream g(900, static_cast<uint64_t>(r));
    for (size_t c = 0; c < 28; ++c) {
      ClusterSummary cs;
      cs.id = std::to_string(c);
      cs.treatment = c % 2;
      cs.covariates = Eigen::Vector2d(g.uniform(), g.normal());
      cs.endpoint = std::clamp(0.3 + 0.4 * cs.covariates[0] + 0.03 * g.normal(), 0.0, 1.0);
      s.clusters.push_back(cs);
    }
    picked += adaptive_prespec(s, ApsConfig::limited({0, 1}), SeededStream(901, static_cast<uint64_t>(r))).index == 1;
  }
  CHECK(picked > reps / 2);
}

TEST_CASE("relabelling clusters leaves estimates unchanged") {
  ClusterStudyData d = trial(SeededStream(60, 0), 24, 20, 0.2, 0.3);
  TwoStageConfig cfg;
  cfg.aps = ApsConfig::expanded(2);
  cfg.stage2.variance = VarianceMethod::CrossValidatedIC;
  const auto a = two_stage_tmle(d, cfg, SeededStream(60, 1));
  for (auto& id : d.ids) id = "renamed-" + id;
  const auto b = two_stage_tmle(d, cfg, SeededStream(60, 1));
  CHECK(a.estimate.psi == b.estimate.psi);
  CHECK(a.estimate.variance == b.estimate.variance);
  CHECK(a.selection.index == b.selection.index);
}

TEST_CASE("permuted treatment gives a log ratio centred at zero") {
  std::vector<double> logs;
  for (uint64_t r = 0; r < 200; ++r) {
    ClusterStudyData d = trial(SeededStream(70, r), 28, 15, 0.2, 0.3);
    SeededStream perm(71, r);
    std::vector<double> arms(28);
    for (size_t c = 0; c < 28; ++c) arms[c] = c < 14;
    perm.shuffle(std::span<double>(arms));
    for (size_t c = 0; c < 28; ++c) d.treatment[static_cast<Eigen::Index>(c)] = arms[c];
    TwoStageConfig cfg;
    cfg.stage1 = Stage1Method::EmpiricalMean;
    const auto res = two_stage_tmle(d, cfg, SeededStream(72, r));
    CHECK(std::fabs(res.estimate.ic.mean()) < 1e-6);
    logs.push_back(std::log(res.estimate.psi));
  }
  CHECK(std::fabs(mean(logs)) < 2.0 * std::sqrt(sample_variance(logs) / logs.size()));
}
