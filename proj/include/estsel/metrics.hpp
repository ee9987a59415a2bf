#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "estsel/plasmode.hpp"

namespace estsel {

/// One candidate on one simulated dataset. For ratio estimands psi_hat and
/// the CI are on the natural scale and var_hat on the log scale.
struct IterationRecord {
  std::string estimator_id;
  size_t iteration = 0;
  double psi_hat = 0.0;
  double var_hat = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  double p_value = 1.0;
  bool reject = false;
  bool failed = false;
  int fallbacks = 0;
  bool positivity_flag = false;
  /// Share of cluster endpoints whose Stage-1 CI covers the pre-deletion mean (NaN if unused).
  double endpoint_coverage = std::numeric_limits<double>::quiet_NaN();
  std::string error;

  static IterationRecord from_estimate(std::string id, size_t iteration, const EstimateResult& estimate);
  static IterationRecord failure(std::string id, size_t iteration, std::string error);
};

void write_iterations_csv(const std::vector<IterationRecord>& records, const std::filesystem::path& path);
std::string iterations_csv(const std::vector<IterationRecord>& records);
std::vector<IterationRecord> read_iterations_csv(const std::filesystem::path& path);

enum class RejectionLabel { Power, TypeIError };

struct EstimatorMetrics {
  std::string estimator_id;
  bool log_scale = false;
  bool available = true;  // false when fewer than two iterations succeeded
  size_t iterations = 0;  // successful
  size_t failures = 0;
  double failure_rate = 0.0;
  double mean_estimate = 0.0;
  double bias = 0.0;
  double variance = 0.0;             // sample (R-1) variance of the points
  double variance_population = 0.0;  // R denominator; used in the MSE identity
  double mse = 0.0;
  double bias_variance_ratio = 0.0;  // bias / variance, taken literally
  double bias_se_ratio = 0.0;        // bias / SD
  double mean_estimated_variance = 0.0;
  double variance_ratio = 0.0;  // empirical / mean estimated
  double oracle_coverage = 0.0;
  double ci_coverage = 0.0;
  double rejection_rate = 0.0;
  RejectionLabel rejection_label = RejectionLabel::Power;
  double endpoint_coverage = std::numeric_limits<double>::quiet_NaN();
  int fallbacks = 0;
  int positivity_flags = 0;

  /// Metric by name, as used in selection constraints and objectives.
  double metric(std::string_view name) const;
  static bool known_metric(std::string_view name);
};

struct MetricsReport {
  TrueEffect truth;
  std::vector<EstimatorMetrics> estimators;  // pre-specified order

  const EstimatorMetrics* find(std::string_view id) const;
};

/// Estimators appear in `order` when given, else by first appearance.
/// Strict mode raises TooFewIterations for any estimator with < 2 successes;
/// otherwise such estimators are reported as unavailable.
MetricsReport compute_metrics(const std::vector<IterationRecord>& records, const TrueEffect& truth,
                              const std::vector<std::string>& order = {}, bool strict = true);

nlohmann::ordered_json to_json(const MetricsReport& report);
MetricsReport metrics_from_json(const nlohmann::json& j);

// ---- selection ------------------------------------------------------------

enum class Comparator { AtLeast, AtMost };
enum class Direction { Minimize, Maximize };

struct Constraint {
  std::string metric;
  Comparator comparator = Comparator::AtLeast;
  double threshold = 0.0;
};

struct SchemeStep {
  std::string name;
  std::string axis;  // candidate attribute whose levels are compared
  std::vector<Constraint> constraints;
  std::string objective;
  Direction direction = Direction::Minimize;
};

struct SelectionScheme {
  std::string name;
  std::vector<SchemeStep> steps;
  double max_failure_rate = 0.05;

  void validate() const;
  /// (i) nuisance approach: min empirical variance s.t. oracle coverage;
  /// (ii) variance approach: min estimated variance s.t. CI coverage.
  static SelectionScheme observational(double coverage_floor = 0.93);
  /// (i) endpoint approach: nominal endpoint coverage s.t. Type-I control;
  /// (ii) effect approach: min estimated variance s.t. Type-I control.
  static SelectionScheme trial(size_t iterations, double coverage_floor = 0.93);
};

/// Type-I ceiling 0.05 + 2 binomial SEs at R iterations.
double type1_ceiling(size_t iterations);

/// A candidate's level on each axis; missing axes default to the id itself.
struct Candidate {
  std::string id;
  std::map<std::string, std::string> attributes;

  std::string level(const std::string& axis) const;
};

struct LevelAudit {
  std::string level;
  std::vector<std::string> candidates;
  std::map<std::string, double> values;  // constraint and objective metrics
  bool passed = false;
  std::string note;
};

struct StepAudit {
  std::string step;
  std::string axis;
  std::vector<LevelAudit> levels;
  bool relaxed = false;
  std::string chosen;
  std::vector<std::string> remaining;
};

struct SelectionReport {
  std::string scheme;
  std::string winner;
  std::vector<std::string> sensitivity;  // runners-up that met every constraint
  std::vector<StepAudit> steps;
  std::vector<std::string> notes;
};

SelectionReport select_estimator(const MetricsReport& report, const std::vector<Candidate>& candidates,
                                 const SelectionScheme& scheme);
/// Every estimator in the report is its own level on every axis.
SelectionReport select_estimator(const MetricsReport& report, const SelectionScheme& scheme);

nlohmann::ordered_json to_json(const SelectionScheme& scheme);
SelectionScheme scheme_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const SelectionReport& report);
SelectionReport selection_from_json(const nlohmann::json& j);

}  // namespace estsel
