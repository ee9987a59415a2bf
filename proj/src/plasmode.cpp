#include "estsel/plasmode.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "estsel/errors.hpp"
#include "estsel/stats.hpp"
#include "estsel/superlearner.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace estsel {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

bool is_binary(const Eigen::VectorXd& y) {
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (y[i] != 0.0 && y[i] != 1.0) return false;
  }
  return true;
}

bool is_treatment_slot(const OutcomeBlindGenerator& g, size_t slot) {
  for (size_t t = 0; t <= g.source.horizon; ++t) {
    if (g.slot_a(t) == slot) return true;
  }
  return false;
}

std::string slot_name(const OutcomeBlindGenerator& g, size_t slot) {
  const auto& s = g.source;
  const size_t p = s.baseline_names.size();
  if (slot < p) return s.baseline_names[slot];
  if (slot == g.slot_y()) return s.outcome_name;
  const size_t q = s.time_varying_names.size();
  const size_t t = (slot - p) / (q + 2);
  const size_t k = (slot - p) % (q + 2);
  const std::string when = "(" + std::to_string(t) + ")";
  if (k < q) return s.time_varying_names[k] + when;
  return (k == q ? s.treatment_name : s.censoring_name) + when;
}

// Source trajectories laid out in history slots; NaN where never observed.
Eigen::MatrixXd source_history(const OutcomeBlindGenerator& g) {
  const auto& s = g.source;
  const size_t n = s.size();
  Eigen::MatrixXd h = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(g.slots), kNaN);
  for (size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (size_t j = 0; j < s.baseline_names.size(); ++j) h(r, g.slot_w(j)) = s.baseline(r, j);
    for (size_t t = 0; t <= s.horizon; ++t) {
      if (!s.reached(i, t)) break;
      for (size_t j = 0; j < s.time_varying_names.size(); ++j) h(r, g.slot_l(t, j)) = s.time_varying[t](r, j);
      h(r, g.slot_a(t)) = s.treatment(r, t);
      h(r, g.slot_c(t)) = s.has_censoring ? s.censoring(r, t) : 0.0;
    }
    h(r, g.slot_y()) = s.outcome[r];
  }
  return h;
}

std::vector<size_t> node_inputs(const OutcomeBlindGenerator& g, NodeKind kind, size_t t, size_t column) {
  const auto& s = g.source;
  const size_t lags = g.spec.history_lags;
  const size_t from = t >= lags ? t - lags : 0;
  std::vector<size_t> in;
  for (size_t j = 0; j < s.baseline_names.size(); ++j) in.push_back(g.slot_w(j));
  for (size_t u = from; u <= t; ++u) {
    const bool current = u == t;
    for (size_t j = 0; j < s.time_varying_names.size(); ++j) {
      if (current && kind == NodeKind::TimeVarying && j >= column) break;
      in.push_back(g.slot_l(u, j));
    }
    if (!current || kind == NodeKind::Censoring || kind == NodeKind::Outcome) in.push_back(g.slot_a(u));
  }
  return in;
}

std::vector<std::string> term_names(const OutcomeBlindGenerator& g, const std::vector<size_t>& inputs) {
  std::vector<std::string> names{"(intercept)"};
  for (size_t in : inputs) names.push_back(slot_name(g, in));
  for (size_t a = 0; a < inputs.size(); ++a) {
    for (size_t b = a + 1; b < inputs.size(); ++b) names.push_back(slot_name(g, inputs[a]) + ":" + slot_name(g, inputs[b]));
  }
  return names;
}

void fit_node(GeneratorNode& node, const Eigen::MatrixXd& history, const OutcomeBlindSpec& spec, SeededStream stream) {
  std::vector<size_t> rows;
  for (Eigen::Index i = 0; i < history.rows(); ++i) {
    bool ok = !std::isnan(history(i, node.slot));
    for (size_t in : node.inputs) ok = ok && !std::isnan(history(i, in));
    if (ok) rows.push_back(static_cast<size_t>(i));
  }
  if (rows.empty()) throw Error(ErrorCode::EmptyDataset, "no source rows observe node " + node.name);
  node.fitted_rows = rows.size();
  const size_t k = node.inputs.size();
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(k));
  Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
  for (size_t r = 0; r < rows.size(); ++r) {
    for (size_t j = 0; j < k; ++j) x(r, j) = history(rows[r], node.inputs[j]);
    y[r] = history(rows[r], node.slot);
  }
  node.family = is_binary(y) ? Family::Binomial : Family::Gaussian;
  if ((y.array() == y[0]).all()) {
    node.constant = y[0];
    return;
  }

  // Grid values are per-observation penalties; the learner penalizes the summed loss.
  std::vector<LearnerSpec> library;
  const double scale = static_cast<double>(rows.size());
  for (double lambda : spec.lambda_grid) library.push_back(LearnerSpec::ridge_interactions(lambda * scale, node.family));
  size_t best = 0;
  if (library.size() > 1 && rows.size() >= 2) {
    const size_t v = std::min(spec.cv_folds, rows.size());
    const FoldPlan folds = make_folds(rows.size(), v, stream);
    const Loss loss = node.family == Family::Binomial ? Loss::NegLogLikelihood : Loss::SquaredError;
    const CvResult cv = cv_risks(library, x, y, folds, loss);
    double best_risk = std::numeric_limits<double>::infinity();
    for (size_t l = 0; l < library.size(); ++l) {
      if (cv.risks[l] < best_risk) {
        best_risk = cv.risks[l];
        best = l;
      }
    }
  }
  node.lambda = spec.lambda_grid[best];
  const FittedLearner fit = fit_learner(library[best], x, y);
  node.fallback = fit.fallback;
  node.coefficients = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(1 + k + k * (k - (k > 0 ? 1 : 0)) / 2));
  if (fit.coefficients.size() == node.coefficients.size()) {
    node.coefficients = fit.coefficients;
  } else {
    node.coefficients[0] = fit.coefficients[0];
  }
  if (node.family == Family::Gaussian) {
    double ss = 0.0;
    std::vector<double> h(static_cast<size_t>(history.cols()));
    for (size_t r = 0; r < rows.size(); ++r) {
      for (Eigen::Index c = 0; c < history.cols(); ++c) h[static_cast<size_t>(c)] = history(rows[r], c);
      const double e = y[static_cast<Eigen::Index>(r)] - node.linear_predictor(h.data());
      ss += e * e;
    }
    node.residual_sd = std::sqrt(ss / static_cast<double>(rows.size()));
  }
}

// Intercept shift making the mean fitted probability on the source equal `target`.
double rarity_shift(const GeneratorNode& node, const Eigen::MatrixXd& history, double target) {
  std::vector<double> lp;
  std::vector<double> h(static_cast<size_t>(history.cols()));
  for (Eigen::Index i = 0; i < history.rows(); ++i) {
    if (std::isnan(history(i, node.slot))) continue;
    for (Eigen::Index c = 0; c < history.cols(); ++c) h[static_cast<size_t>(c)] = history(i, c);
    lp.push_back(node.linear_predictor(h.data()));
  }
  auto gap = [&](double d) {
    double s = 0.0;
    for (double v : lp) s += expit(v + d);
    return s / static_cast<double>(lp.size()) - target;
  };
  double lo = -40.0, hi = 40.0;
  for (int it = 0; it < 200 && hi - lo > 1e-12; ++it) {
    const double mid = 0.5 * (lo + hi);
    (gap(mid) < 0.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

void apply_override(GeneratorNode& node, const OutcomeBlindGenerator& g, double value) {
  if (node.constant || node.coefficients.size() == 0) return;
  const size_t k = node.inputs.size();
  for (size_t j = 0; j < k; ++j) {
    if (is_treatment_slot(g, node.inputs[j])) node.coefficients[static_cast<Eigen::Index>(1 + j)] = value;
  }
  size_t pos = 1 + k;
  for (size_t a = 0; a < k; ++a) {
    for (size_t b = a + 1; b < k; ++b, ++pos) {
      if (is_treatment_slot(g, node.inputs[a]) || is_treatment_slot(g, node.inputs[b])) {
        node.coefficients[static_cast<Eigen::Index>(pos)] = 0.0;
      }
    }
  }
}

void check_regimen(const OutcomeBlindGenerator& g, const Regimen& r) {
  if (r.treatment.size() != g.source.horizon + 1) {
    throw Error(ErrorCode::InvalidConfig, "regimen length " + std::to_string(r.treatment.size()) +
                                              " does not match horizon " + std::to_string(g.source.horizon));
  }
}

double counterfactual_one(const OutcomeBlindGenerator& g, const Regimen& r, SeededStream s, std::vector<double>& h) {
  const auto& src = g.source;
  const auto i = static_cast<Eigen::Index>(s.below(src.size()));
  std::fill(h.begin(), h.end(), kNaN);
  for (size_t j = 0; j < src.baseline_names.size(); ++j) h[g.slot_w(j)] = src.baseline(i, j);
  for (size_t j = 0; j < src.time_varying_names.size(); ++j) h[g.slot_l(0, j)] = src.time_varying[0](i, j);
  for (const auto& node : g.nodes) {
    switch (node.kind) {
      case NodeKind::Treatment: h[node.slot] = r.treatment[node.time]; break;
      case NodeKind::Censoring: h[node.slot] = 0.0; break;
      case NodeKind::TimeVarying: h[node.slot] = node.draw(h.data(), s); break;
      case NodeKind::Outcome: return node.mean(h.data());
    }
  }
  return kNaN;
}

}  // namespace

std::string_view to_string(TruthMethod method) {
  return method == TruthMethod::NullByDesign ? "null_by_design" : "monte_carlo_gformula";
}

TrueEffect TrueEffect::null_by_design(EffectScale scale) {
  TrueEffect t;
  t.scale = scale;
  t.value = scale == EffectScale::Ratio ? 1.0 : 0.0;
  t.method = TruthMethod::NullByDesign;
  return t;
}

bool TrueEffect::is_null() const {
  if (scale == EffectScale::Ratio) return value == 1.0;
  if (scale == EffectScale::Difference) return value == 0.0;
  return false;
}

double GeneratorNode::linear_predictor(const double* h) const {
  if (constant) return *constant;
  const size_t k = inputs.size();
  double eta = coefficients[0];
  for (size_t j = 0; j < k; ++j) eta += coefficients[static_cast<Eigen::Index>(1 + j)] * h[inputs[j]];
  Eigen::Index pos = static_cast<Eigen::Index>(1 + k);
  for (size_t a = 0; a < k; ++a) {
    const double xa = h[inputs[a]];
    for (size_t b = a + 1; b < k; ++b) eta += coefficients[pos++] * xa * h[inputs[b]];
  }
  return eta;
}

double GeneratorNode::mean(const double* h) const {
  if (constant) return *constant;
  const double eta = linear_predictor(h);
  if (family == Family::Gaussian) return eta;
  return std::clamp(expit(eta), kProbabilityFloor, 1.0 - kProbabilityFloor);
}

double GeneratorNode::draw(const double* h, SeededStream& stream) const {
  if (constant) return *constant;
  if (family == Family::Gaussian) return linear_predictor(h) + residual_sd * stream.normal();
  return stream.bernoulli(mean(h)) ? 1.0 : 0.0;
}

size_t OutcomeBlindGenerator::slot_l(size_t t, size_t j) const {
  return source.baseline_names.size() + t * (source.time_varying_names.size() + 2) + j;
}
size_t OutcomeBlindGenerator::slot_a(size_t t) const { return slot_l(t, source.time_varying_names.size()); }
size_t OutcomeBlindGenerator::slot_c(size_t t) const { return slot_a(t) + 1; }
size_t OutcomeBlindGenerator::slot_y() const { return slot_l(source.horizon + 1, 0); }

const GeneratorNode& OutcomeBlindGenerator::node(std::string_view name) const {
  for (const auto& n : nodes) {
    if (n.name == name) return n;
  }
  throw Error(ErrorCode::InvalidConfig, "generator has no node '" + std::string(name) + "'");
}

OutcomeBlindGenerator fit_generative_models(const LongitudinalData& source, const OutcomeBlindSpec& spec,
                                            SeededStream stream) {
  if (source.size() == 0) throw Error(ErrorCode::EmptyDataset, "generator source has no subjects");
  if (spec.lambda_grid.empty()) throw Error(ErrorCode::InvalidConfig, "empty penalty grid");
  if (spec.cv_folds < 2) throw Error(ErrorCode::InvalidConfig, "generator CV needs at least 2 folds");
  if (spec.exposure_prevalence && !(*spec.exposure_prevalence > 0.0 && *spec.exposure_prevalence < 1.0)) {
    throw Error(ErrorCode::InvalidConfig, "exposure prevalence must lie in (0,1)");
  }
  OutcomeBlindGenerator g;
  g.source = source;
  g.spec = spec;
  g.slots = g.slot_y() + 1;

  const size_t q = source.time_varying_names.size();
  for (size_t t = 0; t <= source.horizon; ++t) {
    if (t > 0) {
      for (size_t j = 0; j < q; ++j) {
        GeneratorNode n;
        n.kind = NodeKind::TimeVarying;
        n.time = t;
        n.slot = g.slot_l(t, j);
        n.inputs = node_inputs(g, n.kind, t, j);
        g.nodes.push_back(n);
      }
    }
    GeneratorNode a;
    a.kind = NodeKind::Treatment;
    a.time = t;
    a.slot = g.slot_a(t);
    a.inputs = node_inputs(g, a.kind, t, 0);
    g.nodes.push_back(a);
    if (source.has_censoring) {
      GeneratorNode c;
      c.kind = NodeKind::Censoring;
      c.time = t;
      c.slot = g.slot_c(t);
      c.inputs = node_inputs(g, c.kind, t, 0);
      g.nodes.push_back(c);
    }
  }
  GeneratorNode y;
  y.kind = NodeKind::Outcome;
  y.time = source.horizon;
  y.slot = g.slot_y();
  y.inputs = node_inputs(g, y.kind, source.horizon, 0);
  g.nodes.push_back(y);

  const Eigen::MatrixXd history = source_history(g);
  for (size_t k = 0; k < g.nodes.size(); ++k) {
    auto& n = g.nodes[k];
    n.name = slot_name(g, n.slot);
    n.term_names = term_names(g, n.inputs);
    fit_node(n, history, spec, stream.substream(k));
    if (n.kind == NodeKind::Treatment && spec.exposure_prevalence && !n.constant) {
      n.shift = rarity_shift(n, history, *spec.exposure_prevalence);
      n.coefficients[0] += n.shift;
    }
    if (spec.treatment_override && (n.kind == NodeKind::TimeVarying || n.kind == NodeKind::Outcome)) {
      apply_override(n, g, *spec.treatment_override);
    }
  }
  return g;
}

OutcomeBlindGenerator fit_generative_models(const Dataset& source, const OutcomeBlindSpec& spec, SeededStream stream) {
  return fit_generative_models(to_wide(source), spec, stream);
}

LongitudinalData outcome_blind_generate(const OutcomeBlindGenerator& g, size_t n, SeededStream stream) {
  const auto& src = g.source;
  const std::vector<size_t> picks = resample_indices(src.size(), n, stream);
  LongitudinalData out;
  out.horizon = src.horizon;
  out.baseline_names = src.baseline_names;
  out.time_varying_names = src.time_varying_names;
  out.has_censoring = src.has_censoring;
  out.subject_name = src.subject_name;
  out.time_name = src.time_name;
  out.treatment_name = src.treatment_name;
  out.censoring_name = src.censoring_name;
  out.outcome_name = src.outcome_name;
  const auto rows = static_cast<Eigen::Index>(n);
  const size_t periods = src.horizon + 1;
  out.baseline.resize(rows, static_cast<Eigen::Index>(src.baseline_names.size()));
  out.time_varying.assign(periods,
                          Eigen::MatrixXd::Constant(rows, static_cast<Eigen::Index>(src.time_varying_names.size()), kNaN));
  out.treatment = Eigen::MatrixXd::Constant(rows, static_cast<Eigen::Index>(periods), kNaN);
  out.censoring = Eigen::MatrixXd::Constant(rows, static_cast<Eigen::Index>(periods), kNaN);
  out.outcome = Eigen::VectorXd::Constant(rows, kNaN);

  std::vector<double> h(g.slots);
  for (size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const auto s = static_cast<Eigen::Index>(picks[i]);
    out.subject_ids.push_back("s" + std::to_string(i + 1));
    std::fill(h.begin(), h.end(), kNaN);
    for (size_t j = 0; j < src.baseline_names.size(); ++j) h[g.slot_w(j)] = out.baseline(r, j) = src.baseline(s, j);
    for (size_t j = 0; j < src.time_varying_names.size(); ++j) {
      h[g.slot_l(0, j)] = out.time_varying[0](r, j) = src.time_varying[0](s, j);
    }
    for (const auto& node : g.nodes) {
      const double v = node.draw(h.data(), stream);
      h[node.slot] = v;
      if (node.kind == NodeKind::TimeVarying) {
        out.time_varying[node.time](r, static_cast<Eigen::Index>(node.slot - g.slot_l(node.time, 0))) = v;
      } else if (node.kind == NodeKind::Treatment) {
        out.treatment(r, node.time) = v;
        if (!src.has_censoring) out.censoring(r, node.time) = 0.0;
      } else if (node.kind == NodeKind::Censoring) {
        out.censoring(r, node.time) = v;
        if (v == 1.0) break;
      } else {
        out.outcome[r] = v;
      }
    }
  }
  return out;
}

std::vector<double> counterfactual_outcomes(const OutcomeBlindGenerator& g, const Regimen& regimen, size_t replicates,
                                            SeededStream stream, int workers) {
  check_regimen(g, regimen);
  std::vector<double> y(replicates);
  if (workers == 1) {
    std::vector<double> h(g.slots);
    for (size_t j = 0; j < replicates; ++j) y[j] = counterfactual_one(g, regimen, stream.substream(j), h);
    return y;
  }
#ifdef _OPENMP
  const int threads = workers > 0 ? workers : omp_get_max_threads();
#pragma omp parallel num_threads(threads)
#endif
  {
    std::vector<double> h(g.slots);
#ifdef _OPENMP
#pragma omp for schedule(static)
#endif
    for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(replicates); ++j) {
      y[static_cast<size_t>(j)] = counterfactual_one(g, regimen, stream.substream(static_cast<uint64_t>(j)), h);
    }
  }
  return y;
}

TrueEffect contrast_truth(std::span<const double> y1, std::span<const double> y0, EffectScale scale) {
  if (y1.size() < 2 || (scale != EffectScale::Mean && y0.size() < 2)) {
    throw Error(ErrorCode::TooFewUnits, "truth needs at least two replicates per regimen");
  }
  const double m = static_cast<double>(y1.size());
  const double mu1 = mean(y1), v1 = sample_variance(y1);
  TrueEffect t;
  t.scale = scale;
  t.method = TruthMethod::MonteCarloGformula;
  if (scale == EffectScale::Mean) {
    t.value = mu1;
    t.mc_se = std::sqrt(v1 / m);
    return t;
  }
  const double m0 = static_cast<double>(y0.size());
  const double mu0 = mean(y0), v0 = sample_variance(y0);
  if (scale == EffectScale::Difference) {
    t.value = mu1 - mu0;
    t.mc_se = std::sqrt(v1 / m + v0 / m0);
  } else {
    if (!(mu0 > 0.0) || !(mu1 > 0.0)) throw Error(ErrorCode::ZeroDenominator, "counterfactual mean is not positive");
    t.value = mu1 / mu0;
    t.mc_se = std::sqrt(v1 / (m * mu1 * mu1) + v0 / (m0 * mu0 * mu0));
  }
  return t;
}

TrueEffect compute_truth(const OutcomeBlindGenerator& g, const Regimen& regimen1, const Regimen& regimen0,
                         EffectScale scale, size_t replicates, SeededStream stream, int workers) {
  const std::vector<double> y1 = counterfactual_outcomes(g, regimen1, replicates, stream, workers);
  if (scale == EffectScale::Mean) return contrast_truth(y1, {}, scale);
  const std::vector<double> y0 =
      regimen0 == regimen1 ? y1 : counterfactual_outcomes(g, regimen0, replicates, stream, workers);
  return contrast_truth(y1, y0, scale);
}

MissingnessMechanism MissingnessMechanism::parse(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidMechanism, std::string("mechanism is not valid JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("intercept") || !j["intercept"].is_number()) {
    throw Error(ErrorCode::InvalidMechanism, "mechanism needs a numeric 'intercept'");
  }
  MissingnessMechanism m;
  m.intercept = j["intercept"].get<double>();
  if (j.contains("coefficients")) {
    if (!j["coefficients"].is_object()) throw Error(ErrorCode::InvalidMechanism, "'coefficients' must be an object");
    for (const auto& [name, value] : j["coefficients"].items()) {
      if (!value.is_number()) throw Error(ErrorCode::InvalidMechanism, "coefficient '" + name + "' is not a number");
      m.coefficients.emplace_back(name, value.get<double>());
    }
  }
  m.sha256 = sha256_hex(text);
  return m;
}

MissingnessMechanism MissingnessMechanism::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::FileNotFound, "cannot open mechanism file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

TreatmentBlindDraw treatment_blind_generate(const ClusterStudyData& source, const TreatmentBlindSpec& spec,
                                            EffectScale scale, SeededStream stream) {
  const size_t n = source.size();
  if (n < 2) throw Error(ErrorCode::TooFewClusters, "treatment-blind generation needs at least two clusters");
  if (!spec.strata.empty() && spec.strata.size() != n) {
    throw Error(ErrorCode::DimensionMismatch, "strata length does not match the cluster count");
  }

  // Resolve each coefficient to a column source before drawing anything.
  enum class From { Cluster, Individual, Treatment };
  struct Term {
    From from;
    Eigen::Index index;
    double beta;
  };
  std::vector<Term> terms;
  const std::vector<std::string> empty;
  const auto& indiv_names = source.individuals.empty() ? empty : source.individuals.front().covariate_names;
  for (const auto& [name, beta] : spec.mechanism.coefficients) {
    auto find = [&](const std::vector<std::string>& names) -> Eigen::Index {
      const auto it = std::find(names.begin(), names.end(), name);
      return it == names.end() ? -1 : static_cast<Eigen::Index>(it - names.begin());
    };
    if (const auto j = find(source.cluster_covariate_names); j >= 0) {
      terms.push_back({From::Cluster, j, beta});
    } else if (const auto k = find(indiv_names); k >= 0) {
      terms.push_back({From::Individual, k, beta});
    } else if (name == source.treatment_name) {
      terms.push_back({From::Treatment, 0, beta});
    } else {
      throw Error(ErrorCode::InvalidMechanism, "mechanism references unknown column '" + name + "'");
    }
  }

  TreatmentBlindDraw out;
  out.data = source;
  out.truth = TrueEffect::null_by_design(scale);

  std::vector<int> strata = spec.strata.empty() ? std::vector<int>(n, 0) : spec.strata;
  std::map<int, std::vector<size_t>> members;
  std::vector<int> order;
  for (size_t c = 0; c < n; ++c) {
    if (!members.count(strata[c])) order.push_back(strata[c]);
    members[strata[c]].push_back(c);
  }
  for (int s : order) {
    const auto& idx = members[s];
    std::vector<double> arms;
    for (size_t c : idx) arms.push_back(source.treatment[static_cast<Eigen::Index>(c)]);
    stream.shuffle(std::span<double>(arms));
    for (size_t k = 0; k < idx.size(); ++k) out.data.treatment[static_cast<Eigen::Index>(idx[k])] = arms[k];
  }

  out.data.underlying_outcome.resize(n);
  for (size_t c = 0; c < n; ++c) {
    const auto& part = source.individuals[c];
    const Eigen::VectorXd underlying =
        c < source.underlying_outcome.size() && source.underlying_outcome[c].size() == part.outcome.size()
            ? source.underlying_outcome[c]
            : part.outcome;
    const auto rows = static_cast<Eigen::Index>(part.size());
    Eigen::VectorXd p(rows);
    bool all_zero = true, all_one = true;
    for (Eigen::Index i = 0; i < rows; ++i) {
      double eta = spec.mechanism.intercept;
      for (const auto& t : terms) {
        switch (t.from) {
          case From::Cluster: eta += t.beta * source.cluster_covariates(static_cast<Eigen::Index>(c), t.index); break;
          case From::Individual: eta += t.beta * part.covariates(i, t.index); break;
          case From::Treatment: eta += t.beta * out.data.treatment[static_cast<Eigen::Index>(c)]; break;
        }
      }
      p[i] = expit(eta);
      all_zero = all_zero && p[i] <= 1e-12;
      all_one = all_one && p[i] >= 1.0 - 1e-12;
    }
    if (rows > 0 && (all_zero || all_one)) {
      throw Error(ErrorCode::InvalidMechanism, "measurement probability is " + std::string(all_zero ? "0" : "1") +
                                                   " throughout cluster '" + source.ids[c] + "'");
    }
    auto& target = out.data.individuals[c];
    for (Eigen::Index i = 0; i < rows; ++i) {
      const bool measured = !std::isnan(underlying[i]) && stream.bernoulli(p[i]);
      target.measured[i] = measured ? 1.0 : 0.0;
      target.outcome[i] = measured ? underlying[i] : kNaN;
    }
    out.data.underlying_outcome[c] = underlying;
  }
  return out;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorCode::InvalidConfig, "SHA-256 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < length; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xf]);
  }
  return out;
}

}  // namespace estsel
