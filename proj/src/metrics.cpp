#include "estsel/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "estsel/dataset.hpp"
#include "estsel/errors.hpp"
#include "estsel/format.hpp"
#include "estsel/stats.hpp"

namespace estsel {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

const std::vector<std::string> kCsvHeader{"estimator_id", "iteration", "psi_hat",         "var_hat",
                                          "ci_lo",        "ci_hi",     "p_value",         "reject",
                                          "failed",       "fallbacks", "positivity_flag", "endpoint_coverage",
                                          "error"};

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  return out + "\"";
}

double parse_number(const std::string& s, const std::string& column, size_t row) {
  if (s == "NA" || s.empty()) return kNaN;
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw Error(ErrorCode::DomainViolation, "column '" + column + "' row " + std::to_string(row + 1) +
                                                ": '" + s + "' is not a number");
  }
  return v;
}

double safe_ratio(double num, double den) {
  if (den == 0.0) return num == 0.0 ? 0.0 : kNaN;
  return num / den;
}

EstimatorMetrics summarize(const std::string& id, const std::vector<const IterationRecord*>& rows,
                           const TrueEffect& truth) {
  EstimatorMetrics m;
  m.estimator_id = id;
  m.log_scale = truth.scale == EffectScale::Ratio;
  m.rejection_label = truth.is_null() ? RejectionLabel::TypeIError : RejectionLabel::Power;
  const double target = m.log_scale ? std::log(truth.value) : truth.value;

  std::vector<double> points, estimated_var;
  double covered = 0.0, rejected = 0.0, endpoint_sum = 0.0, endpoint_n = 0.0;
  for (const auto* r : rows) {
    m.fallbacks += r->fallbacks;
    m.positivity_flags += r->positivity_flag ? 1 : 0;
    const double point = m.log_scale ? std::log(r->psi_hat) : r->psi_hat;
    if (r->failed || !std::isfinite(point)) {
      ++m.failures;
      continue;
    }
    points.push_back(point);
    estimated_var.push_back(r->var_hat);
    covered += (r->ci_lo <= truth.value && truth.value <= r->ci_hi) ? 1.0 : 0.0;
    rejected += r->reject ? 1.0 : 0.0;
    if (std::isfinite(r->endpoint_coverage)) {
      endpoint_sum += r->endpoint_coverage;
      endpoint_n += 1.0;
    }
  }
  m.iterations = points.size();
  m.failure_rate = rows.empty() ? 0.0 : static_cast<double>(m.failures) / static_cast<double>(rows.size());
  if (points.size() < 2) {
    m.available = false;
    return m;
  }
  const double r = static_cast<double>(points.size());
  m.mean_estimate = mean(points);
  m.bias = m.mean_estimate - target;
  m.variance = sample_variance(points);
  m.variance_population = population_variance(points);
  double sq = 0.0;
  for (double p : points) sq += (p - target) * (p - target);
  m.mse = sq / r;
  m.bias_variance_ratio = safe_ratio(m.bias, m.variance);
  m.bias_se_ratio = safe_ratio(m.bias, std::sqrt(m.variance));
  m.mean_estimated_variance = mean(estimated_var);
  m.variance_ratio = safe_ratio(m.variance, m.mean_estimated_variance);
  const double half = kZ975 * std::sqrt(m.variance);
  double oracle = 0.0;
  for (double p : points) oracle += std::fabs(p - target) <= half ? 1.0 : 0.0;
  m.oracle_coverage = oracle / r;
  m.ci_coverage = covered / r;
  m.rejection_rate = rejected / r;
  m.endpoint_coverage = endpoint_n > 0 ? endpoint_sum / endpoint_n : kNaN;
  return m;
}

const char* comparator_text(Comparator c) { return c == Comparator::AtLeast ? ">=" : "<="; }

bool satisfies(double value, const Constraint& c) {
  return c.comparator == Comparator::AtLeast ? value >= c.threshold : value <= c.threshold;
}

double violation(double value, const Constraint& c) {
  if (std::isnan(value)) return 0.0;
  return std::max(0.0, c.comparator == Comparator::AtLeast ? c.threshold - value : value - c.threshold);
}

// Mean of a metric over the available candidates of a level.
double level_value(const MetricsReport& report, const std::vector<std::string>& ids, const std::string& metric) {
  double s = 0.0, k = 0.0;
  for (const auto& id : ids) {
    const double v = report.find(id)->metric(metric);
    if (std::isnan(v)) continue;
    s += v;
    k += 1.0;
  }
  return k > 0 ? s / k : kNaN;
}

bool better(double a, double b, Direction d) {
  if (std::isnan(b)) return !std::isnan(a);
  if (std::isnan(a)) return false;
  return d == Direction::Minimize ? a < b : a > b;
}

double json_number(const nlohmann::json& j) { return j.is_null() ? kNaN : j.get<double>(); }

}  // namespace

IterationRecord IterationRecord::from_estimate(std::string id, size_t iteration, const EstimateResult& e) {
  IterationRecord r;
  r.estimator_id = std::move(id);
  r.iteration = iteration;
  r.psi_hat = e.psi;
  r.var_hat = e.variance;
  r.ci_lo = e.ci_lo;
  r.ci_hi = e.ci_hi;
  r.p_value = e.p_value;
  r.reject = e.p_value < kNominalLevel;
  r.fallbacks = e.diagnostics.fallbacks;
  r.positivity_flag = e.diagnostics.positivity_flag;
  return r;
}

IterationRecord IterationRecord::failure(std::string id, size_t iteration, std::string error) {
  IterationRecord r;
  r.estimator_id = std::move(id);
  r.iteration = iteration;
  r.psi_hat = r.var_hat = r.ci_lo = r.ci_hi = r.p_value = kNaN;
  r.failed = true;
  std::replace(error.begin(), error.end(), '\n', ' ');
  std::replace(error.begin(), error.end(), '\r', ' ');
  r.error = std::move(error);
  return r;
}

std::string iterations_csv(const std::vector<IterationRecord>& records) {
  std::string out;
  for (size_t k = 0; k < kCsvHeader.size(); ++k) out += (k ? "," : "") + kCsvHeader[k];
  out += "\n";
  for (const auto& r : records) {
    out += csv_field(r.estimator_id) + "," + std::to_string(r.iteration) + "," + format_number(r.psi_hat) + "," +
           format_number(r.var_hat) + "," + format_number(r.ci_lo) + "," + format_number(r.ci_hi) + "," +
           format_number(r.p_value) + "," + (r.reject ? "1" : "0") + "," + (r.failed ? "1" : "0") + "," +
           std::to_string(r.fallbacks) + "," + (r.positivity_flag ? "1" : "0") + "," +
           format_number(r.endpoint_coverage) + "," + csv_field(r.error) + "\n";
  }
  return out;
}

void write_iterations_csv(const std::vector<IterationRecord>& records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::FileNotFound, "cannot write '" + path.string() + "'");
  out << iterations_csv(records);
}

std::vector<IterationRecord> read_iterations_csv(const std::filesystem::path& path) {
  const CsvTable t = read_csv(path);
  std::vector<size_t> col(kCsvHeader.size());
  for (size_t k = 0; k < kCsvHeader.size(); ++k) {
    const auto it = std::find(t.header.begin(), t.header.end(), kCsvHeader[k]);
    if (it == t.header.end()) throw Error(ErrorCode::SchemaMismatch, "iteration CSV lacks column '" + kCsvHeader[k] + "'");
    col[k] = static_cast<size_t>(it - t.header.begin());
  }
  std::vector<IterationRecord> out;
  for (size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    auto num = [&](size_t k) { return parse_number(row[col[k]], kCsvHeader[k], i); };
    IterationRecord r;
    r.estimator_id = row[col[0]];
    r.iteration = static_cast<size_t>(num(1));
    r.psi_hat = num(2);
    r.var_hat = num(3);
    r.ci_lo = num(4);
    r.ci_hi = num(5);
    r.p_value = num(6);
    r.reject = num(7) == 1.0;
    r.failed = num(8) == 1.0;
    r.fallbacks = static_cast<int>(num(9));
    r.positivity_flag = num(10) == 1.0;
    r.endpoint_coverage = num(11);
    r.error = row[col[12]];
    out.push_back(std::move(r));
  }
  return out;
}

double EstimatorMetrics::metric(std::string_view name) const {
  if (name == "bias") return bias;
  if (name == "abs_bias") return std::fabs(bias);
  if (name == "variance") return variance;
  if (name == "variance_population") return variance_population;
  if (name == "mse") return mse;
  if (name == "bias_variance_ratio") return bias_variance_ratio;
  if (name == "bias_se_ratio") return bias_se_ratio;
  if (name == "abs_bias_se_ratio") return std::fabs(bias_se_ratio);
  if (name == "mean_estimated_variance") return mean_estimated_variance;
  if (name == "variance_ratio") return variance_ratio;
  if (name == "oracle_coverage") return oracle_coverage;
  if (name == "ci_coverage") return ci_coverage;
  if (name == "rejection_rate" || name == "power" || name == "type1_error") return rejection_rate;
  if (name == "failure_rate") return failure_rate;
  if (name == "endpoint_coverage") return endpoint_coverage;
  if (name == "endpoint_coverage_gap") return std::fabs(endpoint_coverage - (1.0 - kNominalLevel));
  throw Error(ErrorCode::InvalidConfig, "unknown metric '" + std::string(name) + "'");
}

bool EstimatorMetrics::known_metric(std::string_view name) {
  try {
    EstimatorMetrics{}.metric(name);
    return true;
  } catch (const Error&) {
    return false;
  }
}

const EstimatorMetrics* MetricsReport::find(std::string_view id) const {
  for (const auto& e : estimators) {
    if (e.estimator_id == id) return &e;
  }
  return nullptr;
}

MetricsReport compute_metrics(const std::vector<IterationRecord>& records, const TrueEffect& truth,
                              const std::vector<std::string>& order, bool strict) {
  if (truth.scale == EffectScale::Ratio && !(truth.value > 0.0)) {
    throw Error(ErrorCode::ZeroDenominator, "ratio truth must be positive");
  }
  std::vector<std::string> ids = order;
  for (const auto& r : records) {
    if (std::find(ids.begin(), ids.end(), r.estimator_id) == ids.end()) ids.push_back(r.estimator_id);
  }
  // Arrival order is irrelevant: aggregate in (estimator, iteration) order.
  std::vector<const IterationRecord*> sorted;
  for (const auto& r : records) sorted.push_back(&r);
  auto rank = [&](const std::string& id) { return std::find(ids.begin(), ids.end(), id) - ids.begin(); };
  std::stable_sort(sorted.begin(), sorted.end(), [&](const IterationRecord* a, const IterationRecord* b) {
    const auto ra = rank(a->estimator_id), rb = rank(b->estimator_id);
    return ra != rb ? ra < rb : a->iteration < b->iteration;
  });

  MetricsReport report;
  report.truth = truth;
  for (const auto& id : ids) {
    std::vector<const IterationRecord*> rows;
    for (const auto* r : sorted) {
      if (r->estimator_id == id) rows.push_back(r);
    }
    EstimatorMetrics m = summarize(id, rows, truth);
    if (!m.available && strict) {
      throw Error(ErrorCode::TooFewIterations,
                  "estimator '" + id + "' has " + std::to_string(m.iterations) + " successful iterations");
    }
    report.estimators.push_back(std::move(m));
  }
  return report;
}

nlohmann::ordered_json to_json(const MetricsReport& report) {
  nlohmann::ordered_json j;
  j["truth"] = {{"scale", std::string(to_string(report.truth.scale))},
                {"value", report.truth.value},
                {"mc_se", report.truth.mc_se},
                {"method", std::string(to_string(report.truth.method))}};
  j["estimators"] = nlohmann::ordered_json::array();
  for (const auto& m : report.estimators) {
    nlohmann::ordered_json e;
    e["estimator_id"] = m.estimator_id;
    e["scale"] = m.log_scale ? "log" : "natural";
    e["available"] = m.available;
    e["iterations"] = m.iterations;
    e["failures"] = m.failures;
    e["failure_rate"] = m.failure_rate;
    e["mean_estimate"] = m.mean_estimate;
    e["bias"] = m.bias;
    e["variance"] = m.variance;
    e["variance_population"] = m.variance_population;
    e["mse"] = m.mse;
    e["bias_variance_ratio"] = m.bias_variance_ratio;
    e["bias_se_ratio"] = m.bias_se_ratio;
    e["mean_estimated_variance"] = m.mean_estimated_variance;
    e["variance_ratio"] = m.variance_ratio;
    e["oracle_coverage"] = m.oracle_coverage;
    e["ci_coverage"] = m.ci_coverage;
    e["rejection_rate"] = m.rejection_rate;
    e["rejection_label"] = m.rejection_label == RejectionLabel::Power ? "power" : "type1_error";
    e["endpoint_coverage"] = m.endpoint_coverage;
    e["fallbacks"] = m.fallbacks;
    e["positivity_flags"] = m.positivity_flags;
    j["estimators"].push_back(std::move(e));
  }
  return j;
}

MetricsReport metrics_from_json(const nlohmann::json& j) {
  MetricsReport r;
  try {
    const auto& t = j.at("truth");
    const std::string scale = t.at("scale").get<std::string>();
    r.truth.scale = scale == "ratio" ? EffectScale::Ratio : scale == "difference" ? EffectScale::Difference : EffectScale::Mean;
    r.truth.value = json_number(t.at("value"));
    r.truth.mc_se = json_number(t.at("mc_se"));
    r.truth.method = t.at("method").get<std::string>() == "null_by_design" ? TruthMethod::NullByDesign
                                                                           : TruthMethod::MonteCarloGformula;
    for (const auto& e : j.at("estimators")) {
      EstimatorMetrics m;
      m.estimator_id = e.at("estimator_id").get<std::string>();
      m.log_scale = e.at("scale").get<std::string>() == "log";
      m.available = e.at("available").get<bool>();
      m.iterations = e.at("iterations").get<size_t>();
      m.failures = e.at("failures").get<size_t>();
      m.failure_rate = json_number(e.at("failure_rate"));
      m.mean_estimate = json_number(e.at("mean_estimate"));
      m.bias = json_number(e.at("bias"));
      m.variance = json_number(e.at("variance"));
      m.variance_population = json_number(e.at("variance_population"));
      m.mse = json_number(e.at("mse"));
      m.bias_variance_ratio = json_number(e.at("bias_variance_ratio"));
      m.bias_se_ratio = json_number(e.at("bias_se_ratio"));
      m.mean_estimated_variance = json_number(e.at("mean_estimated_variance"));
      m.variance_ratio = json_number(e.at("variance_ratio"));
      m.oracle_coverage = json_number(e.at("oracle_coverage"));
      m.ci_coverage = json_number(e.at("ci_coverage"));
      m.rejection_rate = json_number(e.at("rejection_rate"));
      m.rejection_label = e.at("rejection_label").get<std::string>() == "power" ? RejectionLabel::Power
                                                                                 : RejectionLabel::TypeIError;
      m.endpoint_coverage = json_number(e.at("endpoint_coverage"));
      m.fallbacks = e.at("fallbacks").get<int>();
      m.positivity_flags = e.at("positivity_flags").get<int>();
      r.estimators.push_back(std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::SchemaMismatch, std::string("malformed metrics report: ") + e.what());
  }
  return r;
}

// ---- selection ------------------------------------------------------------

double type1_ceiling(size_t iterations) {
  const double r = static_cast<double>(std::max<size_t>(iterations, 1));
  return kNominalLevel + 2.0 * std::sqrt(kNominalLevel * (1.0 - kNominalLevel) / r);
}

void SelectionScheme::validate() const {
  if (steps.empty()) throw Error(ErrorCode::InvalidConfig, "selection scheme '" + name + "' has no steps");
  for (const auto& s : steps) {
    for (const auto& c : s.constraints) {
      if (!EstimatorMetrics::known_metric(c.metric)) {
        throw Error(ErrorCode::InvalidConfig, "step '" + s.name + "' constrains unknown metric '" + c.metric + "'");
      }
    }
    if (!EstimatorMetrics::known_metric(s.objective)) {
      throw Error(ErrorCode::InvalidConfig, "step '" + s.name + "' optimizes unknown metric '" + s.objective + "'");
    }
  }
}

SelectionScheme SelectionScheme::observational(double coverage_floor) {
  SelectionScheme s;
  s.name = "observational";
  s.steps.push_back({"nuisance estimation", "nuisance", {{"oracle_coverage", Comparator::AtLeast, coverage_floor}},
                     "variance", Direction::Minimize});
  s.steps.push_back({"variance estimation", "variance_method", {{"ci_coverage", Comparator::AtLeast, coverage_floor}},
                     "mean_estimated_variance", Direction::Minimize});
  return s;
}

SelectionScheme SelectionScheme::trial(size_t iterations, double coverage_floor) {
  const double ceiling = type1_ceiling(iterations);
  SelectionScheme s;
  s.name = "trial";
  s.steps.push_back({"cluster endpoints",
                     "stage1",
                     {{"endpoint_coverage", Comparator::AtLeast, coverage_floor},
                      {"type1_error", Comparator::AtMost, ceiling}},
                     "endpoint_coverage_gap",
                     Direction::Minimize});
  s.steps.push_back({"effect estimation", "effect", {{"type1_error", Comparator::AtMost, ceiling}},
                     "mean_estimated_variance", Direction::Minimize});
  return s;
}

std::string Candidate::level(const std::string& axis) const {
  const auto it = attributes.find(axis);
  return it == attributes.end() ? id : it->second;
}

SelectionReport select_estimator(const MetricsReport& report, const std::vector<Candidate>& candidates,
                                 const SelectionScheme& scheme) {
  if (report.estimators.empty() || candidates.empty()) {
    throw Error(ErrorCode::EmptyCandidateSet, "no candidate metrics to select from");
  }
  scheme.validate();
  for (const auto& c : candidates) {
    if (!report.find(c.id)) throw Error(ErrorCode::InvalidConfig, "no metrics for candidate '" + c.id + "'");
  }
  SelectionReport out;
  out.scheme = scheme.name;

  // Failure disqualification happens before any step.
  std::vector<const Candidate*> pool;
  for (const auto& c : candidates) {
    const auto* m = report.find(c.id);
    if (!m->available || m->failure_rate > scheme.max_failure_rate) {
      out.notes.push_back("'" + c.id + "' disqualified: " +
                          (m->available ? "failure rate " + format_trimmed(m->failure_rate, 4)
                                        : std::string("fewer than two successful iterations")));
    } else {
      pool.push_back(&c);
    }
  }
  if (pool.empty()) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& c : candidates) {
      const auto* m = report.find(c.id);
      if (m->available) best = std::min(best, m->failure_rate);
    }
    for (const auto& c : candidates) {
      const auto* m = report.find(c.id);
      if (m->available && m->failure_rate == best) pool.push_back(&c);
    }
    if (pool.empty()) throw Error(ErrorCode::EmptyCandidateSet, "no candidate has usable metrics");
    out.notes.push_back("every candidate disqualified; relaxed to the lowest failure rate");
  }
  if (pool.size() == 1 && candidates.size() == 1) out.notes.push_back("'" + pool.front()->id + "' unopposed");

  for (const auto& step : scheme.steps) {
    StepAudit audit;
    audit.step = step.name;
    audit.axis = step.axis;
    for (const auto* c : pool) {
      const std::string level = c->level(step.axis);
      auto it = std::find_if(audit.levels.begin(), audit.levels.end(), [&](const LevelAudit& l) { return l.level == level; });
      if (it == audit.levels.end()) {
        audit.levels.push_back({level, {}, {}, false, ""});
        it = audit.levels.end() - 1;
      }
      it->candidates.push_back(c->id);
    }
    std::vector<double> violations;
    for (auto& l : audit.levels) {
      l.passed = true;
      double v = 0.0;
      for (const auto& c : step.constraints) {
        const double value = level_value(report, l.candidates, c.metric);
        l.values[c.metric] = value;
        if (std::isnan(value)) {
          l.note += c.metric + " unavailable; constraint skipped. ";
          continue;
        }
        if (!satisfies(value, c)) {
          l.passed = false;
          l.note += c.metric + " " + format_trimmed(value, 4) + " fails " + comparator_text(c.comparator) + " " +
                    format_trimmed(c.threshold, 4) + ". ";
        }
        v += violation(value, c);
      }
      l.values[step.objective] = level_value(report, l.candidates, step.objective);
      violations.push_back(v);
      if (!l.note.empty() && l.note.back() == ' ') l.note.pop_back();
    }
    std::vector<size_t> eligible;
    for (size_t k = 0; k < audit.levels.size(); ++k) {
      if (audit.levels[k].passed) eligible.push_back(k);
    }
    if (eligible.empty()) {
      audit.relaxed = true;
      const double closest = *std::min_element(violations.begin(), violations.end());
      for (size_t k = 0; k < audit.levels.size(); ++k) {
        if (violations[k] == closest) eligible.push_back(k);
      }
    }
    size_t chosen = eligible.front();
    for (size_t k : eligible) {
      if (better(audit.levels[k].values[step.objective], audit.levels[chosen].values[step.objective], step.direction)) {
        chosen = k;
      }
    }
    audit.chosen = audit.levels[chosen].level;
    std::vector<const Candidate*> next;
    for (const auto* c : pool) {
      if (c->level(step.axis) == audit.chosen) next.push_back(c);
    }
    pool = std::move(next);
    for (const auto* c : pool) audit.remaining.push_back(c->id);
    out.steps.push_back(std::move(audit));
  }
  out.winner = pool.front()->id;

  // Sensitivity analyses: other candidates meeting every constraint on their own metrics.
  std::vector<std::pair<double, std::string>> runners;
  for (const auto& c : candidates) {
    if (c.id == out.winner) continue;
    const auto* m = report.find(c.id);
    if (!m->available || m->failure_rate > scheme.max_failure_rate) continue;
    bool ok = true;
    for (const auto& step : scheme.steps) {
      for (const auto& k : step.constraints) {
        const double v = m->metric(k.metric);
        ok = ok && (std::isnan(v) || satisfies(v, k));
      }
    }
    if (ok) {
      const auto& last = scheme.steps.back();
      double key = m->metric(last.objective);
      if (last.direction == Direction::Maximize) key = -key;
      runners.emplace_back(std::isnan(key) ? std::numeric_limits<double>::infinity() : key, c.id);
    }
  }
  std::stable_sort(runners.begin(), runners.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  for (const auto& r : runners) out.sensitivity.push_back(r.second);
  return out;
}

SelectionReport select_estimator(const MetricsReport& report, const SelectionScheme& scheme) {
  std::vector<Candidate> candidates;
  for (const auto& e : report.estimators) candidates.push_back({e.estimator_id, {}});
  return select_estimator(report, candidates, scheme);
}

nlohmann::ordered_json to_json(const SelectionScheme& scheme) {
  nlohmann::ordered_json j;
  j["name"] = scheme.name;
  j["max_failure_rate"] = scheme.max_failure_rate;
  j["steps"] = nlohmann::ordered_json::array();
  for (const auto& s : scheme.steps) {
    nlohmann::ordered_json step;
    step["name"] = s.name;
    step["axis"] = s.axis;
    step["constraints"] = nlohmann::ordered_json::array();
    for (const auto& c : s.constraints) {
      step["constraints"].push_back({{"metric", c.metric}, {"comparator", comparator_text(c.comparator)}, {"threshold", c.threshold}});
    }
    step["objective"] = s.objective;
    step["direction"] = s.direction == Direction::Minimize ? "minimize" : "maximize";
    j["steps"].push_back(std::move(step));
  }
  return j;
}

SelectionScheme scheme_from_json(const nlohmann::json& j) {
  SelectionScheme s;
  try {
    s.name = j.value("name", std::string("custom"));
    s.max_failure_rate = j.value("max_failure_rate", 0.05);
    for (const auto& step : j.at("steps")) {
      SchemeStep out;
      out.name = step.value("name", std::string());
      out.axis = step.at("axis").get<std::string>();
      for (const auto& c : step.value("constraints", nlohmann::json::array())) {
        const std::string cmp = c.at("comparator").get<std::string>();
        if (cmp != ">=" && cmp != "<=") throw Error(ErrorCode::InvalidConfig, "comparator must be '>=' or '<='");
        out.constraints.push_back(
            {c.at("metric").get<std::string>(), cmp == ">=" ? Comparator::AtLeast : Comparator::AtMost, c.at("threshold").get<double>()});
      }
      out.objective = step.at("objective").get<std::string>();
      const std::string dir = step.value("direction", std::string("minimize"));
      if (dir != "minimize" && dir != "maximize") throw Error(ErrorCode::InvalidConfig, "direction must be minimize or maximize");
      out.direction = dir == "minimize" ? Direction::Minimize : Direction::Maximize;
      s.steps.push_back(std::move(out));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("malformed selection scheme: ") + e.what());
  }
  s.validate();
  return s;
}

nlohmann::ordered_json to_json(const SelectionReport& report) {
  nlohmann::ordered_json j;
  j["scheme"] = report.scheme;
  j["winner"] = report.winner;
  j["sensitivity"] = report.sensitivity;
  j["notes"] = report.notes;
  j["steps"] = nlohmann::ordered_json::array();
  for (const auto& s : report.steps) {
    nlohmann::ordered_json step;
    step["step"] = s.step;
    step["axis"] = s.axis;
    step["relaxed"] = s.relaxed;
    step["chosen"] = s.chosen;
    step["remaining"] = s.remaining;
    step["levels"] = nlohmann::ordered_json::array();
    for (const auto& l : s.levels) {
      nlohmann::ordered_json level;
      level["level"] = l.level;
      level["candidates"] = l.candidates;
      level["values"] = nlohmann::ordered_json::object();
      for (const auto& [k, v] : l.values) level["values"][k] = v;
      level["passed"] = l.passed;
      level["note"] = l.note;
      step["levels"].push_back(std::move(level));
    }
    j["steps"].push_back(std::move(step));
  }
  return j;
}

SelectionReport selection_from_json(const nlohmann::json& j) {
  SelectionReport r;
  try {
    r.scheme = j.at("scheme").get<std::string>();
    r.winner = j.at("winner").get<std::string>();
    r.sensitivity = j.at("sensitivity").get<std::vector<std::string>>();
    r.notes = j.at("notes").get<std::vector<std::string>>();
    for (const auto& s : j.at("steps")) {
      StepAudit a;
      a.step = s.at("step").get<std::string>();
      a.axis = s.at("axis").get<std::string>();
      a.relaxed = s.at("relaxed").get<bool>();
      a.chosen = s.at("chosen").get<std::string>();
      a.remaining = s.at("remaining").get<std::vector<std::string>>();
      for (const auto& l : s.at("levels")) {
        LevelAudit level;
        level.level = l.at("level").get<std::string>();
        level.candidates = l.at("candidates").get<std::vector<std::string>>();
        for (const auto& [k, v] : l.at("values").items()) level.values[k] = json_number(v);
        level.passed = l.at("passed").get<bool>();
        level.note = l.at("note").get<std::string>();
        a.levels.push_back(std::move(level));
      }
      r.steps.push_back(std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::SchemaMismatch, std::string("malformed selection report: ") + e.what());
  }
  return r;
}

}  // namespace estsel
