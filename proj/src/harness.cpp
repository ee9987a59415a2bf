#include "estsel/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "estsel/errors.hpp"
#include "estsel/format.hpp"
#include "estsel/stats.hpp"
#include "estsel/superlearner.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

#ifndef ESTSEL_VERSION
#define ESTSEL_VERSION "0.0.0"
#endif

namespace estsel {

using ojson = nlohmann::ordered_json;
using json = nlohmann::json;

namespace {

[[noreturn]] void bad_config(const std::string& message) { throw Error(ErrorCode::InvalidConfig, message); }

template <typename T, typename Parse>
T parse_enum(const json& j, const char* key, T fallback, Parse parse) {
  if (!j.contains(key)) return fallback;
  const auto text = j.at(key).get<std::string>();
  const auto v = parse(text);
  if (!v) bad_config("unknown " + std::string(key) + " '" + text + "'");
  return *v;
}

std::optional<Family> parse_family(std::string_view s) {
  if (s == "binomial") return Family::Binomial;
  if (s == "gaussian") return Family::Gaussian;
  return std::nullopt;
}

std::optional<EffectScale> parse_scale(std::string_view s) {
  if (s == "difference") return EffectScale::Difference;
  if (s == "ratio") return EffectScale::Ratio;
  if (s == "mean") return EffectScale::Mean;
  return std::nullopt;
}

std::optional<EstimatorType> parse_estimator_type(std::string_view s) {
  if (s == "tmle_ate") return EstimatorType::TmleAte;
  if (s == "ltmle") return EstimatorType::Ltmle;
  if (s == "two_stage") return EstimatorType::TwoStage;
  return std::nullopt;
}

ojson learner_json(const LearnerSpec& l) {
  ojson j{{"kind", std::string(to_string(l.kind))}, {"family", std::string(to_string(l.family))}};
  if (l.kind == LearnerKind::GlmRidge || l.kind == LearnerKind::GlmRidgeInteractions) j["lambda"] = l.lambda;
  return j;
}

LearnerSpec learner_from(const json& j) {
  LearnerSpec l;
  l.kind = parse_enum(j, "kind", LearnerKind::GlmMainTerms, parse_learner_kind);
  l.family = parse_enum(j, "family", Family::Binomial, parse_family);
  l.lambda = j.value("lambda", 0.0);
  if (l.lambda < 0.0) bad_config("learner lambda must be non-negative");
  return l;
}

ojson model_json(const NuisanceModel& m) {
  switch (m.method) {
    case NuisanceMethod::EmpiricalMean: return ojson{{"method", "empirical_mean"}};
    case NuisanceMethod::Parametric: return ojson{{"method", "parametric"}, {"learner", learner_json(m.learner)}};
    case NuisanceMethod::SuperLearner: {
      ojson j{{"method", "super_learner"}};
      j["library"] = ojson::array();
      for (const auto& l : m.super_learner.library) j["library"].push_back(learner_json(l));
      j["ensemble"] = m.super_learner.mode == EnsembleMode::Discrete ? "discrete" : "convex";
      if (m.super_learner.loss) {
        j["loss"] = *m.super_learner.loss == Loss::NegLogLikelihood ? "neg_log_likelihood" : "squared_error";
      }
      return j;
    }
  }
  return {};
}

NuisanceModel model_from(const json& j) {
  const std::string method = j.value("method", std::string("parametric"));
  if (method == "empirical_mean") return NuisanceModel::empirical_mean();
  if (method == "parametric") {
    return NuisanceModel::parametric(j.contains("learner") ? learner_from(j.at("learner")) : LearnerSpec::main_terms());
  }
  if (method == "super_learner") {
    SuperLearnerConfig sl;
    for (const auto& l : j.value("library", json::array())) sl.library.push_back(learner_from(l));
    if (sl.library.empty()) bad_config("super learner library is empty");
    const std::string mode = j.value("ensemble", std::string("discrete"));
    if (mode != "discrete" && mode != "convex") bad_config("ensemble must be discrete or convex");
    sl.mode = mode == "discrete" ? EnsembleMode::Discrete : EnsembleMode::Convex;
    if (j.contains("loss")) {
      const std::string loss = j.at("loss").get<std::string>();
      if (loss != "neg_log_likelihood" && loss != "squared_error") bad_config("unknown loss '" + loss + "'");
      sl.loss = loss == "neg_log_likelihood" ? Loss::NegLogLikelihood : Loss::SquaredError;
    }
    return NuisanceModel::super_learner_with(std::move(sl));
  }
  bad_config("unknown nuisance method '" + method + "'");
}

ojson nuisance_json(const NuisanceConfig& n) {
  ojson j{{"outcome", model_json(n.outcome)}, {"propensity", model_json(n.propensity)}, {"screening", n.screening}};
  if (n.screening) j["screening_alpha"] = n.screening_alpha;
  j["truncation"] = n.truncation ? ojson::array({n.truncation->lower, n.truncation->upper}) : ojson();
  return j;
}

NuisanceConfig nuisance_from(const json& j) {
  NuisanceConfig n;
  if (j.contains("outcome")) n.outcome = model_from(j.at("outcome"));
  if (j.contains("propensity")) n.propensity = model_from(j.at("propensity"));
  n.screening = j.value("screening", false);
  n.screening_alpha = j.value("screening_alpha", 0.10);
  if (j.contains("truncation")) {
    const auto& t = j.at("truncation");
    if (t.is_null()) {
      n.truncation.reset();
    } else {
      if (!t.is_array() || t.size() != 2) bad_config("truncation must be [lower, upper] or null");
      n.truncation = Bounds{t[0].get<double>(), t[1].get<double>()};
    }
  }
  return n;
}

ojson aps_json(const ApsSpec& a) {
  ojson j;
  switch (a.kind) {
    case ApsSpec::Kind::Unadjusted: j["type"] = "unadjusted"; break;
    case ApsSpec::Kind::Limited:
      j["type"] = "limited";
      j["shortlist"] = a.shortlist;
      break;
    case ApsSpec::Kind::Expanded:
      j["type"] = "expanded";
      j["pairs"] = ojson::array();
      for (const auto& [x, y] : a.pairs) j["pairs"].push_back({x, y});
      break;
  }
  if (!a.strata_column.empty()) j["strata"] = a.strata_column;
  return j;
}

ApsSpec aps_from(const json& j) {
  ApsSpec a;
  const std::string type = j.value("type", std::string("unadjusted"));
  if (type == "unadjusted") {
    a.kind = ApsSpec::Kind::Unadjusted;
  } else if (type == "limited") {
    a.kind = ApsSpec::Kind::Limited;
    a.shortlist = j.value("shortlist", std::vector<std::string>{});
  } else if (type == "expanded") {
    a.kind = ApsSpec::Kind::Expanded;
    for (const auto& p : j.value("pairs", json::array())) {
      if (!p.is_array() || p.size() != 2) bad_config("APS pairs must be two-element arrays");
      a.pairs.emplace_back(p[0].get<std::string>(), p[1].get<std::string>());
    }
  } else {
    bad_config("unknown APS type '" + type + "'");
  }
  a.strata_column = j.value("strata", std::string());
  return a;
}

ojson estimator_json(const EstimatorSpec& e) {
  ojson j{{"id", e.id}, {"type", std::string(to_string(e.type))}};
  if (!e.attributes.empty()) j["attributes"] = e.attributes;
  j["nuisance"] = nuisance_json(e.nuisance);
  j["folds"] = e.folds;
  j["variance"] = std::string(to_string(e.variance));
  if (e.type == EstimatorType::Ltmle) {
    j["cumulative_bound"] = e.cumulative_bound ? ojson(*e.cumulative_bound) : ojson();
    j["bootstrap_replicates"] = e.bootstrap_replicates;
    j["percentile_ci"] = e.percentile_ci;
  }
  if (e.type == EstimatorType::TwoStage) {
    j["stage1"] = std::string(to_string(e.stage1));
    j["aps"] = aps_json(e.aps);
    j["p_treated"] = e.p_treated;
  }
  return j;
}

EstimatorSpec estimator_from(const json& j) {
  EstimatorSpec e;
  e.id = j.at("id").get<std::string>();
  e.type = parse_enum(j, "type", EstimatorType::Ltmle, parse_estimator_type);
  if (j.contains("attributes")) e.attributes = j.at("attributes").get<std::map<std::string, std::string>>();
  if (j.contains("nuisance")) e.nuisance = nuisance_from(j.at("nuisance"));
  e.folds = j.value("folds", size_t{0});
  e.variance = parse_enum(j, "variance", VarianceMethod::InfluenceCurve, parse_variance_method);
  if (j.contains("cumulative_bound")) {
    const auto& b = j.at("cumulative_bound");
    e.cumulative_bound = b.is_null() ? std::nullopt : std::optional<double>(b.get<double>());
  }
  e.bootstrap_replicates = j.value("bootstrap_replicates", size_t{200});
  e.percentile_ci = j.value("percentile_ci", false);
  e.stage1 = parse_enum(j, "stage1", Stage1Method::TmleParametric, parse_stage1_method);
  if (j.contains("aps")) e.aps = aps_from(j.at("aps"));
  e.p_treated = j.value("p_treated", 0.5);
  return e;
}

std::vector<double> column_values(const ClusterStudyData& d, const std::string& column) {
  const auto& names = d.cluster_covariate_names;
  const auto it = std::find(names.begin(), names.end(), column);
  if (it == names.end()) bad_config("strata column '" + column + "' is not a cluster-level covariate");
  const auto j = static_cast<Eigen::Index>(it - names.begin());
  std::vector<double> v;
  for (Eigen::Index c = 0; c < d.cluster_covariates.rows(); ++c) v.push_back(d.cluster_covariates(c, j));
  return v;
}

// Integer labels by order of first appearance.
std::vector<int> strata_labels(const std::vector<double>& values) {
  std::vector<double> seen;
  std::vector<int> out;
  for (double v : values) {
    auto it = std::find(seen.begin(), seen.end(), v);
    if (it == seen.end()) {
      seen.push_back(v);
      it = seen.end() - 1;
    }
    out.push_back(static_cast<int>(it - seen.begin()));
  }
  return out;
}

PointData point_from(const LongitudinalData& d) {
  if (d.horizon != 0) bad_config("tmle_ate needs single time-point data");
  PointData p;
  const auto n = static_cast<Eigen::Index>(d.size());
  const auto pb = d.baseline.cols();
  const auto pl = d.time_varying.empty() ? 0 : d.time_varying[0].cols();
  p.covariates.resize(n, pb + pl);
  p.covariates.leftCols(pb) = d.baseline;
  if (pl > 0) p.covariates.rightCols(pl) = d.time_varying[0];
  p.covariate_names = d.baseline_names;
  for (const auto& name : d.time_varying_names) p.covariate_names.push_back(name);
  p.treatment = d.treatment.col(0);
  p.outcome = d.outcome;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (std::isnan(p.outcome[i])) bad_config("tmle_ate cannot handle censored outcomes; use ltmle");
  }
  return p;
}

double endpoint_coverage(const ClusterSummaries& s, const ClusterStudyData& data) {
  if (data.underlying_outcome.size() != s.size()) return std::numeric_limits<double>::quiet_NaN();
  double covered = 0.0, counted = 0.0;
  for (size_t c = 0; c < s.size(); ++c) {
    double sum = 0.0, k = 0.0;
    for (Eigen::Index i = 0; i < data.underlying_outcome[c].size(); ++i) {
      const double y = data.underlying_outcome[c][i];
      if (!std::isnan(y)) {
        sum += y;
        k += 1.0;
      }
    }
    if (k == 0.0) continue;
    const double target = sum / k;
    const auto& cs = s.clusters[c];
    covered += std::fabs(cs.endpoint - target) <= kZ975 * cs.se ? 1.0 : 0.0;
    counted += 1.0;
  }
  return counted > 0 ? covered / counted : std::numeric_limits<double>::quiet_NaN();
}

struct Stage1Entry {
  std::optional<ClusterSummaries> summaries;
  std::string error;
};

EstimateResult run_single(const StudyConfig& cfg, const EstimatorSpec& e, const LongitudinalData& data,
                          SeededStream stream) {
  const size_t n = data.size();
  const size_t v = e.folds > 0 ? e.folds : default_fold_count(n);
  const FoldPlan folds = make_folds(n, v, stream.substream(0));
  if (e.type == EstimatorType::TmleAte) {
    if (cfg.scale != EffectScale::Difference) bad_config("tmle_ate estimates differences only; use ltmle for ratios");
    return tmle_ate(point_from(data), e.nuisance, folds);
  }
  LtmleConfig lc;
  lc.nuisance = e.nuisance;
  lc.cumulative_bound = e.cumulative_bound;
  lc.variance = e.variance;
  lc.bootstrap_replicates = e.bootstrap_replicates;
  lc.percentile_ci = e.percentile_ci;
  if (cfg.scale == EffectScale::Mean) {
    lc.validate();
    return ice_mean(data, cfg.regimen1, lc, folds);
  }
  lc.scale = cfg.scale;
  return ltmle_contrast(data, cfg.regimen1, cfg.regimen0, lc, folds, stream.substream(1));
}

std::string fixed2(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f", x);
  return buf;
}

std::string percent(double x) { return format_trimmed(100.0 * x, 2); }

std::string cell(double x, int decimals = 4) {
  if (std::isnan(x)) return "NA";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", decimals, x);
  return buf;
}

std::string describe(const LearnerSpec& l) { return l.name(); }

std::string describe(const NuisanceModel& m) {
  switch (m.method) {
    case NuisanceMethod::EmpiricalMean: return "empirical mean";
    case NuisanceMethod::Parametric: return describe(m.learner);
    case NuisanceMethod::SuperLearner: {
      std::string s = std::string(m.super_learner.mode == EnsembleMode::Discrete ? "discrete" : "convex") + " Super Learner {";
      for (size_t k = 0; k < m.super_learner.library.size(); ++k) s += (k ? ", " : "") + describe(m.super_learner.library[k]);
      return s + "}";
    }
  }
  return "";
}

std::string describe(const EstimatorSpec& e) {
  std::string s;
  if (e.type == EstimatorType::TwoStage) {
    s = "Two-Stage TMLE; stage 1 " + std::string(to_string(e.stage1)) + "; APS ";
    switch (e.aps.kind) {
      case ApsSpec::Kind::Unadjusted: s += "unadjusted only"; break;
      case ApsSpec::Kind::Limited: {
        s += "limited {";
        for (size_t k = 0; k < e.aps.shortlist.size(); ++k) s += (k ? ", " : "") + e.aps.shortlist[k];
        s += "}";
        break;
      }
      case ApsSpec::Kind::Expanded: s += "expanded"; break;
    }
    return s + "; " + std::string(to_string(e.variance)) + " variance";
  }
  s = std::string(e.type == EstimatorType::TmleAte ? "TMLE" : "longitudinal TMLE") + "; Qbar " +
      describe(e.nuisance.outcome) + "; g " + describe(e.nuisance.propensity);
  if (e.nuisance.screening) s += "; screening";
  s += e.nuisance.truncation ? "; g truncated to [" + format_number(e.nuisance.truncation->lower) + ", " +
                                   format_number(e.nuisance.truncation->upper) + "]"
                             : "; no truncation";
  if (e.type == EstimatorType::Ltmle && e.cumulative_bound) s += "; |H| capped at " + format_number(*e.cumulative_bound);
  return s + "; " + std::string(to_string(e.variance)) + " variance";
}

std::optional<EffectSummary> illustration_of(const StudyResults& r) {
  std::vector<double> psi, lo, hi;
  for (const auto& rec : r.records) {
    if (rec.estimator_id != r.selection.winner || rec.failed) continue;
    psi.push_back(rec.psi_hat);
    lo.push_back(rec.ci_lo);
    hi.push_back(rec.ci_hi);
  }
  if (psi.empty()) return std::nullopt;
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
  };
  return EffectSummary{r.config.scale, median(psi), median(lo), median(hi)};
}

ojson truth_json(const TrueEffect& t) {
  return ojson{{"scale", std::string(to_string(t.scale))},
               {"value", t.value},
               {"mc_se", t.mc_se},
               {"method", std::string(to_string(t.method))}};
}

ojson generator_audit(const OutcomeBlindGenerator& g) {
  ojson nodes = ojson::array();
  for (const auto& n : g.nodes) {
    ojson node{{"node", n.name}, {"rows", n.fitted_rows}};
    if (n.constant) {
      node["constant"] = *n.constant;
    } else {
      node["family"] = std::string(to_string(n.family));
      node["lambda"] = n.lambda;
      if (n.shift != 0.0) node["rarity_shift"] = n.shift;
      if (n.family == Family::Gaussian) node["residual_sd"] = n.residual_sd;
      if (n.fallback) node["fallback"] = true;
      ojson coefs = ojson::object();
      for (Eigen::Index k = 0; k < n.coefficients.size(); ++k) coefs[n.term_names[static_cast<size_t>(k)]] = n.coefficients[k];
      node["coefficients"] = coefs;
    }
    nodes.push_back(node);
  }
  return nodes;
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(ErrorCode::FileNotFound, "cannot open '" + p.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error(ErrorCode::FileNotFound, "cannot write '" + p.string() + "'");
  out << text;
}

}  // namespace

std::string_view version_string() { return ESTSEL_VERSION; }

std::string_view to_string(EstimatorType type) {
  switch (type) {
    case EstimatorType::TmleAte: return "tmle_ate";
    case EstimatorType::Ltmle: return "ltmle";
    case EstimatorType::TwoStage: return "two_stage";
  }
  return "unknown";
}

ApsConfig ApsSpec::resolve(const std::vector<std::string>& names) const {
  auto index = [&](const std::string& name) {
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) bad_config("APS covariate '" + name + "' is not a cluster-level covariate");
    return static_cast<size_t>(it - names.begin());
  };
  switch (kind) {
    case Kind::Unadjusted: return ApsConfig{};
    case Kind::Limited: {
      std::vector<size_t> idx;
      for (const auto& s : shortlist) idx.push_back(index(s));
      return ApsConfig::limited(idx);
    }
    case Kind::Expanded: {
      std::vector<std::pair<size_t, size_t>> idx;
      for (const auto& [a, b] : pairs) idx.emplace_back(index(a), index(b));
      return ApsConfig::expanded(names.size(), idx);
    }
  }
  return ApsConfig{};
}

Candidate EstimatorSpec::candidate() const {
  Candidate c{id, attributes};
  if (type == EstimatorType::TwoStage) {
    c.attributes.try_emplace("stage1", std::string(to_string(stage1)) + " " + nuisance_json(nuisance).dump());
    c.attributes.try_emplace("effect", aps_json(aps).dump() + " " + std::string(to_string(variance)));
  } else {
    ojson key = nuisance_json(nuisance);
    if (type == EstimatorType::Ltmle) key["cumulative_bound"] = cumulative_bound ? ojson(*cumulative_bound) : ojson();
    c.attributes.try_emplace("nuisance", key.dump());
    c.attributes.try_emplace("variance_method", std::string(to_string(variance)));
  }
  return c;
}

std::filesystem::path StudyConfig::resolve(const std::filesystem::path& p) const {
  if (p.empty() || p.is_absolute() || base_dir.empty()) return p;
  return base_dir / p;
}

std::vector<std::string> StudyConfig::candidate_ids() const {
  std::vector<std::string> ids;
  for (const auto& c : candidates) ids.push_back(c.id);
  return ids;
}

std::vector<Candidate> StudyConfig::selection_candidates() const {
  std::vector<Candidate> out;
  for (const auto& c : candidates) out.push_back(c.candidate());
  return out;
}

ojson to_json(const StudyConfig& c) {
  ojson j;
  j["name"] = c.name;
  j["study_type"] = std::string(to_string(c.study_type));
  ojson roles = ojson::array();
  for (const auto& [name, role] : c.schema.roles) roles.push_back({{"column", name}, {"role", std::string(to_string(role))}});
  j["dataset"] = {{"path", c.dataset.generic_string()},
                  {"roles", roles},
                  {"categorical", c.schema.categorical},
                  {"cluster_level", c.schema.cluster_level}};
  ojson g;
  if (c.generator.kind == GeneratorKind::OutcomeBlind) {
    const auto& s = c.generator.outcome_blind;
    g = {{"kind", "outcome_blind"},
         {"sample_size", c.generator.sample_size},
         {"lambda_grid", s.lambda_grid},
         {"cv_folds", s.cv_folds},
         {"history_lags", s.history_lags},
         {"treatment_override", s.treatment_override ? ojson(*s.treatment_override) : ojson()},
         {"exposure_prevalence", s.exposure_prevalence ? ojson(*s.exposure_prevalence) : ojson()}};
  } else {
    g = {{"kind", "treatment_blind"}, {"mechanism", c.generator.mechanism.generic_string()}};
    if (!c.generator.strata_column.empty()) g["strata"] = c.generator.strata_column;
  }
  j["generator"] = g;
  j["estimand"] = {{"scale", std::string(to_string(c.scale))},
                   {"regimen1", c.regimen1.treatment},
                   {"regimen0", c.regimen0.treatment}};
  j["candidates"] = ojson::array();
  for (const auto& e : c.candidates) j["candidates"].push_back(estimator_json(e));
  j["iterations"] = c.iterations;
  j["seed"] = c.seed;
  j["workers"] = c.workers;
  j["truth_replicates"] = c.truth_replicates;
  j["selection"] = to_json(c.scheme);
  j["output_dir"] = c.output_dir.generic_string();
  return j;
}

StudyConfig config_from_json(const json& j, const std::filesystem::path& base_dir) {
  StudyConfig c;
  c.base_dir = base_dir;
  try {
    c.name = j.value("name", std::string("study"));
    c.study_type = parse_enum(j, "study_type", StudyType::Longitudinal, parse_study_type);
    const auto& d = j.at("dataset");
    c.dataset = d.at("path").get<std::string>();
    for (const auto& r : d.value("roles", json::array())) {
      const std::string role = r.at("role").get<std::string>();
      const auto parsed = parse_role(role);
      if (!parsed) bad_config("unknown role '" + role + "'");
      c.schema.roles.emplace_back(r.at("column").get<std::string>(), *parsed);
    }
    c.schema.categorical = d.value("categorical", std::vector<std::string>{});
    c.schema.cluster_level = d.value("cluster_level", std::vector<std::string>{});

    const auto& g = j.at("generator");
    const std::string kind = g.at("kind").get<std::string>();
    c.generator.sample_size = g.value("sample_size", size_t{0});
    if (kind == "outcome_blind") {
      auto& s = c.generator.outcome_blind;
      c.generator.kind = GeneratorKind::OutcomeBlind;
      s.lambda_grid = g.value("lambda_grid", s.lambda_grid);
      s.cv_folds = g.value("cv_folds", s.cv_folds);
      s.history_lags = g.value("history_lags", s.history_lags);
      if (g.contains("treatment_override") && !g["treatment_override"].is_null()) {
        s.treatment_override = g["treatment_override"].get<double>();
      }
      if (g.contains("exposure_prevalence") && !g["exposure_prevalence"].is_null()) {
        s.exposure_prevalence = g["exposure_prevalence"].get<double>();
      }
    } else if (kind == "treatment_blind") {
      c.generator.kind = GeneratorKind::TreatmentBlind;
      c.generator.mechanism = g.at("mechanism").get<std::string>();
      c.generator.strata_column = g.value("strata", std::string());
    } else {
      bad_config("unknown generator kind '" + kind + "'");
    }

    const auto& e = j.at("estimand");
    c.scale = parse_enum(e, "scale", EffectScale::Difference, parse_scale);
    c.regimen1.treatment = e.value("regimen1", std::vector<int>{1});
    c.regimen0.treatment = e.value("regimen0", std::vector<int>{0});

    for (const auto& cand : j.at("candidates")) c.candidates.push_back(estimator_from(cand));
    c.iterations = j.value("iterations", size_t{1000});
    c.seed = j.value("seed", uint64_t{1});
    c.workers = j.value("workers", 0);
    c.truth_replicates = j.value("truth_replicates", size_t{100000});
    if (!j.contains("selection") || j["selection"].is_string()) {
      const std::string preset = j.value("selection", std::string(c.study_type == StudyType::ClusterTwoStage ? "trial" : "observational"));
      if (preset == "observational") {
        c.scheme = SelectionScheme::observational();
      } else if (preset == "trial") {
        c.scheme = SelectionScheme::trial(c.iterations);
      } else {
        bad_config("unknown selection preset '" + preset + "'");
      }
    } else {
      c.scheme = scheme_from_json(j["selection"]);
    }
    c.output_dir = j.value("output_dir", std::string("out"));
  } catch (const json::exception& ex) {
    bad_config(std::string("malformed study config: ") + ex.what());
  }
  return c;
}

StudyConfig load_config(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    bad_config("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j, path.parent_path());
}

std::vector<std::string> validate_config(const StudyConfig& c) {
  std::vector<std::string> problems;
  if (c.candidates.empty()) problems.push_back("no candidate estimators");
  std::set<std::string> ids;
  for (const auto& e : c.candidates) {
    if (e.id.empty()) problems.push_back("candidate with an empty id");
    if (!ids.insert(e.id).second) problems.push_back("duplicate candidate id '" + e.id + "'");
    const bool cluster = c.study_type == StudyType::ClusterTwoStage;
    if ((e.type == EstimatorType::TwoStage) != cluster) {
      problems.push_back("candidate '" + e.id + "' (" + std::string(to_string(e.type)) + ") does not fit a " +
                         std::string(to_string(c.study_type)) + " study");
    }
    if (e.type == EstimatorType::TmleAte && c.scale != EffectScale::Difference) {
      problems.push_back("candidate '" + e.id + "': tmle_ate estimates differences only");
    }
    if (e.type == EstimatorType::Ltmle) {
      LtmleConfig lc;
      lc.cumulative_bound = e.cumulative_bound;
      lc.variance = e.variance;
      lc.bootstrap_replicates = e.bootstrap_replicates;
      try {
        lc.validate();
      } catch (const Error& err) {
        problems.push_back("candidate '" + e.id + "': " + err.what());
      }
    }
    if (e.type == EstimatorType::TwoStage && e.variance == VarianceMethod::Bootstrap) {
      problems.push_back("candidate '" + e.id + "': two-stage variance must be ic or cv_ic");
    }
  }
  if (c.iterations < 100) problems.push_back("iterations must be at least 100 for a selection run");
  if (c.workers < 0) problems.push_back("workers must be non-negative");
  if (c.generator.kind == GeneratorKind::OutcomeBlind) {
    if (c.study_type == StudyType::ClusterTwoStage) problems.push_back("outcome-blind generation needs individual-level data");
    if (c.truth_replicates < 100000) problems.push_back("truth_replicates must be at least 100000");
  } else if (c.study_type != StudyType::ClusterTwoStage) {
    problems.push_back("treatment-blind generation needs a cluster_two_stage study");
  }
  try {
    c.scheme.validate();
  } catch (const Error& err) {
    problems.push_back(err.what());
  }

  // Dataset-dependent checks.
  std::optional<Dataset> data;
  try {
    data.emplace(load_dataset(c.resolve(c.dataset), c.schema));
  } catch (const Error& err) {
    problems.push_back(err.what());
    return problems;
  }
  for (const auto& f : validate_schema(*data, c.study_type)) {
    problems.push_back("dataset: " + (f.column.empty() ? std::string() : "column '" + f.column + "': ") + f.message);
  }
  if (c.study_type != StudyType::ClusterTwoStage) {
    try {
      const LongitudinalData wide = to_wide(*data);
      for (const auto* r : {&c.regimen1, &c.regimen0}) {
        if (r->treatment.size() != wide.horizon + 1) {
          problems.push_back("regimen length " + std::to_string(r->treatment.size()) + " does not match " +
                             std::to_string(wide.horizon + 1) + " time points");
        }
      }
    } catch (const Error& err) {
      problems.push_back(err.what());
    }
  } else {
    try {
      const ClusterStudyData cs = cluster_study(*data);
      for (const auto& e : c.candidates) {
        if (e.type != EstimatorType::TwoStage) continue;
        try {
          e.aps.resolve(cs.cluster_covariate_names);
          if (!e.aps.strata_column.empty()) column_values(cs, e.aps.strata_column);
        } catch (const Error& err) {
          problems.push_back("candidate '" + e.id + "': " + err.what());
        }
      }
      if (c.generator.kind == GeneratorKind::TreatmentBlind) {
        const auto m = MissingnessMechanism::load(c.resolve(c.generator.mechanism));
        const auto& indiv = cs.individuals.empty() ? std::vector<std::string>{} : cs.individuals.front().covariate_names;
        for (const auto& [name, beta] : m.coefficients) {
          const bool known = std::count(cs.cluster_covariate_names.begin(), cs.cluster_covariate_names.end(), name) ||
                             std::count(indiv.begin(), indiv.end(), name) || name == cs.treatment_name;
          if (!known) problems.push_back("mechanism references unknown column '" + name + "'");
        }
        if (!c.generator.strata_column.empty()) column_values(cs, c.generator.strata_column);
      }
    } catch (const Error& err) {
      problems.push_back(err.what());
    }
  }
  return problems;
}

StudyInputs prepare_inputs(const StudyConfig& c) {
  StudyInputs in{load_dataset(c.resolve(c.dataset), c.schema), std::nullopt, std::nullopt, std::nullopt, ""};
  const auto findings = validate_schema(in.source, c.study_type);
  if (!findings.empty()) {
    throw Error(ErrorCode::SchemaMismatch, "dataset fails validation: " +
                                               (findings.front().column.empty() ? "" : findings.front().column + ": ") +
                                               findings.front().message);
  }
  if (c.generator.kind == GeneratorKind::OutcomeBlind) {
    in.generator = fit_generative_models(to_wide(in.source), c.generator.outcome_blind, SeededStream(c.seed, 0).substream(1));
  } else {
    in.clusters = cluster_study(in.source);
    TreatmentBlindSpec spec;
    spec.mechanism = MissingnessMechanism::load(c.resolve(c.generator.mechanism));
    if (!c.generator.strata_column.empty()) spec.strata = strata_labels(column_values(*in.clusters, c.generator.strata_column));
    in.mechanism_sha256 = spec.mechanism.sha256;
    in.treatment_blind = std::move(spec);
  }
  return in;
}

TrueEffect study_truth(const StudyConfig& c, const StudyInputs& in) {
  if (c.generator.kind == GeneratorKind::TreatmentBlind) return TrueEffect::null_by_design(c.scale);
  return compute_truth(*in.generator, c.regimen1, c.regimen0, c.scale, c.truth_replicates,
                       SeededStream(c.seed, 0).substream(0), c.workers);
}

std::vector<IterationRecord> run_iteration(const StudyConfig& c, const StudyInputs& in, size_t iteration) {
  const SeededStream stream(c.seed, iteration);
  // Every candidate draws its fold plans and resamples from the same stream,
  // so candidates are compared on identical randomness.
  const SeededStream shared = stream.substream(1);
  std::vector<IterationRecord> out;
  auto fail_all = [&](const std::string& why) {
    for (const auto& e : c.candidates) out.push_back(IterationRecord::failure(e.id, iteration, why));
    return out;
  };

  if (c.generator.kind == GeneratorKind::OutcomeBlind) {
    LongitudinalData data;
    try {
      const size_t n = c.generator.sample_size > 0 ? c.generator.sample_size : in.generator->source.size();
      data = outcome_blind_generate(*in.generator, n, stream.substream(0));
    } catch (const std::exception& e) {
      return fail_all(std::string("generation: ") + e.what());
    }
    for (const auto& e : c.candidates) {
      try {
        out.push_back(IterationRecord::from_estimate(e.id, iteration, run_single(c, e, data, shared)));
      } catch (const std::exception& ex) {
        out.push_back(IterationRecord::failure(e.id, iteration, ex.what()));
      } catch (...) {
        out.push_back(IterationRecord::failure(e.id, iteration, "unknown error"));
      }
    }
    return out;
  }

  ClusterStudyData data;
  try {
    data = treatment_blind_generate(*in.clusters, *in.treatment_blind, c.scale, stream.substream(0)).data;
  } catch (const std::exception& e) {
    return fail_all(std::string("generation: ") + e.what());
  }
  std::map<std::string, Stage1Entry> stage1_cache;
  for (const auto& e : c.candidates) {
    try {
      const std::string key = std::string(to_string(e.stage1)) + nuisance_json(e.nuisance).dump();
      auto it = stage1_cache.find(key);
      if (it == stage1_cache.end()) {
        Stage1Entry entry;
        try {
          entry.summaries = stage1_endpoints(data, e.stage1, e.nuisance, shared.substream(0));
        } catch (const std::exception& ex) {
          entry.error = ex.what();
        }
        it = stage1_cache.emplace(key, std::move(entry)).first;
      }
      if (!it->second.summaries) throw Error(ErrorCode::InvalidConfig, "stage 1: " + it->second.error);
      const ClusterSummaries& s = *it->second.summaries;
      TwoStageConfig tc;
      tc.stage1 = e.stage1;
      tc.nuisance = e.nuisance;
      tc.aps = e.aps.resolve(s.covariate_names);
      if (!e.aps.strata_column.empty()) tc.aps.strata = strata_labels(column_values(data, e.aps.strata_column));
      tc.stage2.scale = c.scale;
      tc.stage2.variance = e.variance;
      tc.stage2.p_treated = e.p_treated;
      const TwoStageResult r = two_stage_from_summaries(s, tc, shared.substream(1));
      IterationRecord rec = IterationRecord::from_estimate(e.id, iteration, r.estimate);
      rec.endpoint_coverage = endpoint_coverage(s, data);
      out.push_back(std::move(rec));
    } catch (const std::exception& ex) {
      out.push_back(IterationRecord::failure(e.id, iteration, ex.what()));
    } catch (...) {
      out.push_back(IterationRecord::failure(e.id, iteration, "unknown error"));
    }
  }
  return out;
}

StudyResults run_study(const StudyConfig& config) {
  const auto problems = validate_config(config);
  if (!problems.empty()) {
    std::string all;
    for (const auto& p : problems) all += (all.empty() ? "" : "; ") + p;
    throw Error(ErrorCode::InvalidConfig, all);
  }
  return run_study(config, prepare_inputs(config));
}

StudyResults run_study(const StudyConfig& config, const StudyInputs& inputs) {
  const auto start = std::chrono::steady_clock::now();
  StudyResults res;
  res.config = config;
  res.mechanism_sha256 = inputs.mechanism_sha256;
  res.truth = study_truth(config, inputs);
  if (inputs.generator) res.generator_audit = generator_audit(*inputs.generator);

  const size_t r = config.iterations;
  std::vector<std::vector<IterationRecord>> per(r);
  if (config.workers == 1) {
    for (size_t i = 0; i < r; ++i) per[i] = run_iteration(config, inputs, i + 1);
  } else {
#ifdef _OPENMP
    const int threads = config.workers > 0 ? config.workers : omp_get_max_threads();
#pragma omp parallel for schedule(dynamic) num_threads(threads)
#endif
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(r); ++i) {
      per[static_cast<size_t>(i)] = run_iteration(config, inputs, static_cast<size_t>(i) + 1);
    }
  }

  // Deterministic merge: candidate order, then iteration.
  for (size_t k = 0; k < config.candidates.size(); ++k) {
    for (size_t i = 0; i < r; ++i) res.records.push_back(per[i][k]);
  }
  res.metrics = compute_metrics(res.records, res.truth, config.candidate_ids(), false);
  try {
    res.selection = select_estimator(res.metrics, config.selection_candidates(), config.scheme);
  } catch (const Error& e) {
    res.selection.scheme = config.scheme.name;
    res.selection.notes.push_back(std::string("selection impossible: ") + e.what());
  }
  res.illustration = illustration_of(res);
  res.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

std::string format_effect(const EffectSummary& e) {
  switch (e.scale) {
    case EffectScale::Ratio:
      return "risk ratio=" + fixed2(e.psi) + ", 95%CI: " + fixed2(e.ci_lo) + "-" + fixed2(e.ci_hi);
    case EffectScale::Difference: {
      const std::string sep = (e.ci_lo < 0.0 || e.ci_hi < 0.0) ? " to " : "-";
      return percent(e.psi) + "% (95%CI: " + percent(e.ci_lo) + sep + percent(e.ci_hi) + "%)";
    }
    case EffectScale::Mean:
      return "mean=" + fixed2(e.psi) + ", 95%CI: " + fixed2(e.ci_lo) + "-" + fixed2(e.ci_hi);
  }
  return "";
}

std::string emit_report(const StudyResults& r, ReportFormat format) {
  const auto& c = r.config;
  const bool null_truth = r.truth.is_null();
  if (format == ReportFormat::Json) {
    ojson j;
    j["study"] = {{"name", c.name},
                  {"study_type", std::string(to_string(c.study_type))},
                  {"dataset", c.dataset.generic_string()},
                  {"iterations", c.iterations},
                  {"seed", c.seed},
                  {"version", std::string(version_string())}};
    j["candidates"] = ojson::array();
    for (const auto& e : c.candidates) j["candidates"].push_back({{"id", e.id}, {"description", describe(e)}, {"attributes", e.candidate().attributes}});
    j["generator"] = {{"kind", c.generator.kind == GeneratorKind::OutcomeBlind ? "outcome_blind" : "treatment_blind"},
                      {"mechanism_sha256", r.mechanism_sha256}};
    j["truth"] = truth_json(r.truth);
    j["metrics"] = to_json(r.metrics);
    j["selection"] = to_json(r.selection);
    j["primary_analysis"] = r.selection.winner;
    j["sensitivity_analyses"] = r.selection.sensitivity;
    if (r.illustration) j["illustration"] = format_effect(*r.illustration);
    return j.dump(2) + "\n";
  }

  std::ostringstream md;
  md << "# Statistical Analysis Plan: " << c.name << "\n\n";
  md << "## Study\n\n";
  md << "- Study type: " << to_string(c.study_type) << "\n";
  md << "- Source data: `" << c.dataset.generic_string() << "`\n";
  md << "- Effect scale: " << to_string(c.scale);
  if (c.study_type != StudyType::ClusterTwoStage) {
    auto regimen = [](const Regimen& g) {
      std::string s;
      for (int a : g.treatment) s += std::to_string(a);
      return s;
    };
    md << " (regimen " << regimen(c.regimen1) << " vs " << regimen(c.regimen0) << ")";
  }
  md << "\n- Simulation iterations: " << c.iterations << ", master seed " << c.seed << "\n";
  md << "- Software version: " << version_string() << "\n\n";

  md << "## Candidate estimators\n\n| Id | Specification |\n|---|---|\n";
  for (const auto& e : c.candidates) md << "| " << e.id << " | " << describe(e) << " |\n";
  md << "\n";

  md << "## Data-generating process\n\n";
  if (c.generator.kind == GeneratorKind::OutcomeBlind) {
    const auto& s = c.generator.outcome_blind;
    md << "Outcome-blind plasmode: baseline covariates resampled from the source; treatment, censoring, "
          "time-varying covariates and outcome simulated from ridge-penalized models with pairwise interactions "
          "(penalty chosen by " << s.cv_folds << "-fold CV).";
    if (s.treatment_override) md << " Treatment coefficients fixed at " << format_number(*s.treatment_override) << ".";
    if (s.exposure_prevalence) md << " Exposure prevalence shifted to " << format_number(*s.exposure_prevalence) << ".";
    md << "\n\n";
  } else {
    md << "Treatment-blind plasmode: cluster treatment permuted";
    if (!c.generator.strata_column.empty()) md << " within strata of `" << c.generator.strata_column << "`";
    md << "; measurement drawn from an independently specified mechanism.\n\n";
    md << "- Mechanism file: `" << c.generator.mechanism.generic_string() << "`\n";
    md << "- Mechanism SHA-256: `" << r.mechanism_sha256 << "`\n\n";
  }
  md << "True effect: " << format_number(r.truth.value) << " (" << to_string(r.truth.scale) << ", "
     << to_string(r.truth.method) << ", MC-SE " << cell(r.truth.mc_se) << ")\n\n";

  md << "## Performance metrics\n\n";
  if (r.truth.scale == EffectScale::Ratio) md << "Computed on the log scale.\n\n";
  md << "| Estimator | Bias | Variance | MSE | Bias/Variance | Bias/SE | Variance ratio | Oracle coverage | "
        "CI coverage | "
     << (null_truth ? "Type-I error" : "Power") << " | Failures |\n";
  md << "|---|---|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& m : r.metrics.estimators) {
    if (!m.available) {
      md << "| " << m.estimator_id << " | NA | NA | NA | NA | NA | NA | NA | NA | NA | " << m.failures << " |\n";
      continue;
    }
    md << "| " << m.estimator_id << " | " << cell(m.bias) << " | " << cell(m.variance) << " | " << cell(m.mse) << " | "
       << cell(m.bias_variance_ratio) << " | " << cell(m.bias_se_ratio) << " | " << cell(m.variance_ratio) << " | "
       << cell(m.oracle_coverage, 3) << " | " << cell(m.ci_coverage, 3) << " | " << cell(m.rejection_rate, 3) << " | "
       << m.failures << " |\n";
  }
  bool any_endpoint = false;
  for (const auto& m : r.metrics.estimators) any_endpoint = any_endpoint || std::isfinite(m.endpoint_coverage);
  if (any_endpoint) {
    md << "\nCluster endpoint coverage: ";
    bool first = true;
    for (const auto& m : r.metrics.estimators) {
      md << (first ? "" : ", ") << m.estimator_id << " " << cell(m.endpoint_coverage, 3);
      first = false;
    }
    md << "\n";
  }
  md << "\n";

  md << "## Selection\n\nScheme: " << r.selection.scheme << "\n\n";
  for (const auto& note : r.selection.notes) md << "- " << note << "\n";
  if (!r.selection.notes.empty()) md << "\n";
  for (size_t k = 0; k < r.selection.steps.size(); ++k) {
    const auto& s = r.selection.steps[k];
    md << "### Step " << k + 1 << ": " << s.step << "\n\n";
    for (const auto& l : s.levels) {
      md << "- " << (l.passed ? "meets" : "fails") << " constraints: " << l.level.substr(0, 120);
      md << " (";
      bool first = true;
      for (const auto& [name, value] : l.values) {
        md << (first ? "" : ", ") << name << " " << cell(value);
        first = false;
      }
      md << ")";
      if (!l.note.empty()) md << ". " << l.note;
      md << "\n";
    }
    if (s.relaxed) md << "- No level met the constraints; relaxed to the closest.\n";
    md << "- Retained: ";
    for (size_t m = 0; m < s.remaining.size(); ++m) md << (m ? ", " : "") << s.remaining[m];
    md << "\n\n";
  }

  md << "## Primary analysis\n\n";
  if (r.selection.winner.empty()) {
    md << "No estimator could be selected.\n\n";
  } else {
    md << "**" << r.selection.winner << "**";
    for (const auto& e : c.candidates) {
      if (e.id == r.selection.winner) md << ": " << describe(e);
    }
    md << "\n\n";
    if (r.illustration) md << "Effect statement format (simulation median): " << format_effect(*r.illustration) << "\n\n";
  }
  md << "## Sensitivity analyses\n\n";
  if (r.selection.sensitivity.empty()) {
    md << "None: none met constraints.\n";
  } else {
    for (const auto& s : r.selection.sensitivity) md << "- " << s << "\n";
  }
  return md.str();
}

void persist_results(const StudyResults& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_iterations_csv(r.records, dir / "iterations.csv");
  write_text(dir / "metrics.json", to_json(r.metrics).dump(2) + "\n");
  write_text(dir / "selection.json", to_json(r.selection).dump(2) + "\n");
  write_text(dir / "report.md", emit_report(r, ReportFormat::Markdown));
  ojson manifest;
  manifest["version"] = std::string(version_string());
  manifest["seed"] = r.config.seed;
  manifest["config"] = to_json(r.config);
  manifest["mechanism_sha256"] = r.mechanism_sha256;
  manifest["truth"] = truth_json(r.truth);
  manifest["wall_clock_seconds"] = r.wall_clock_seconds;
  manifest["generator_audit"] = r.generator_audit.is_null() ? ojson::array() : r.generator_audit;
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

StudyResults load_results(const std::filesystem::path& dir) {
  StudyResults r;
  json manifest;
  try {
    manifest = json::parse(read_text(dir / "manifest.json"));
    r.config = config_from_json(manifest.at("config"), dir);
    r.mechanism_sha256 = manifest.value("mechanism_sha256", std::string());
    r.wall_clock_seconds = manifest.value("wall_clock_seconds", 0.0);
    r.metrics = metrics_from_json(json::parse(read_text(dir / "metrics.json")));
    r.selection = selection_from_json(json::parse(read_text(dir / "selection.json")));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::SchemaMismatch, std::string("malformed results in '") + dir.string() + "': " + e.what());
  }
  r.truth = r.metrics.truth;
  r.records = read_iterations_csv(dir / "iterations.csv");
  r.illustration = illustration_of(r);
  return r;
}

}  // namespace estsel
