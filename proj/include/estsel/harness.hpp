#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "estsel/dataset.hpp"
#include "estsel/ltmle.hpp"
#include "estsel/metrics.hpp"
#include "estsel/plasmode.hpp"
#include "estsel/twostage.hpp"

namespace estsel {

std::string_view version_string();

enum class EstimatorType { TmleAte, Ltmle, TwoStage };

std::string_view to_string(EstimatorType type);

/// Which adjustment sets Adaptive Pre-specification may choose from.
struct ApsSpec {
  enum class Kind { Unadjusted, Limited, Expanded } kind = Kind::Unadjusted;
  std::vector<std::string> shortlist;                          // Limited
  std::vector<std::pair<std::string, std::string>> pairs;      // Expanded
  std::string strata_column;                                   // pair-matched designs

  ApsConfig resolve(const std::vector<std::string>& covariate_names) const;
};

/// A fully pre-specified candidate.
struct EstimatorSpec {
  std::string id;
  EstimatorType type = EstimatorType::Ltmle;
  std::map<std::string, std::string> attributes;  // selection axes
  NuisanceConfig nuisance;
  size_t folds = 0;  // 0: default for the sample size
  // Ltmle
  std::optional<double> cumulative_bound = 40.0;
  VarianceMethod variance = VarianceMethod::InfluenceCurve;
  size_t bootstrap_replicates = 200;
  bool percentile_ci = false;
  // TwoStage
  Stage1Method stage1 = Stage1Method::TmleParametric;
  ApsSpec aps;
  double p_treated = 0.5;

  /// Attributes with defaults filled in: nuisance / variance_method for
  /// single-stage estimators, stage1 / effect for two-stage ones.
  Candidate candidate() const;
};

enum class GeneratorKind { OutcomeBlind, TreatmentBlind };

struct GeneratorConfig {
  GeneratorKind kind = GeneratorKind::OutcomeBlind;
  size_t sample_size = 0;  // 0: source size
  OutcomeBlindSpec outcome_blind;
  std::filesystem::path mechanism;  // TreatmentBlind
  std::string strata_column;        // TreatmentBlind, optional
};

struct StudyConfig {
  std::string name = "study";
  StudyType study_type = StudyType::Longitudinal;
  std::filesystem::path dataset;
  Schema schema;
  GeneratorConfig generator;
  EffectScale scale = EffectScale::Difference;
  Regimen regimen1;
  Regimen regimen0;
  std::vector<EstimatorSpec> candidates;
  size_t iterations = 1000;
  uint64_t seed = 1;
  int workers = 0;  // 0: all available threads
  size_t truth_replicates = 100000;
  SelectionScheme scheme;
  std::filesystem::path output_dir = "out";
  std::filesystem::path base_dir;  // relative paths resolve here; not serialized

  std::filesystem::path resolve(const std::filesystem::path& p) const;
  std::vector<std::string> candidate_ids() const;
  std::vector<Candidate> selection_candidates() const;
};

nlohmann::ordered_json to_json(const StudyConfig& config);
StudyConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
StudyConfig load_config(const std::filesystem::path& path);

/// Problems that stop a run before it starts (missing columns, bad ids, ...).
std::vector<std::string> validate_config(const StudyConfig& config);

/// Shared, read-only inputs of a study: the source data and fitted generator.
struct StudyInputs {
  Dataset source;
  std::optional<OutcomeBlindGenerator> generator;
  std::optional<ClusterStudyData> clusters;
  std::optional<TreatmentBlindSpec> treatment_blind;
  std::string mechanism_sha256;
};

StudyInputs prepare_inputs(const StudyConfig& config);
TrueEffect study_truth(const StudyConfig& config, const StudyInputs& inputs);

/// Every candidate on the dataset of iteration `iteration` (stream SeededStream(seed, iteration)).
std::vector<IterationRecord> run_iteration(const StudyConfig& config, const StudyInputs& inputs, size_t iteration);

struct EffectSummary {
  EffectScale scale = EffectScale::Difference;
  double psi = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
};

struct StudyResults {
  StudyConfig config;
  TrueEffect truth;
  std::vector<IterationRecord> records;  // sorted by (candidate order, iteration)
  MetricsReport metrics;
  SelectionReport selection;
  std::string mechanism_sha256;
  std::optional<EffectSummary> illustration;  // winner's median estimate and CI
  nlohmann::ordered_json generator_audit;
  double wall_clock_seconds = 0.0;
};

/// Runs R iterations on `workers` threads (1 = serial loop) and aggregates.
/// Output is identical for any worker count.
StudyResults run_study(const StudyConfig& config);
StudyResults run_study(const StudyConfig& config, const StudyInputs& inputs);

/// Writes iterations.csv, metrics.json, selection.json, report.md, manifest.json.
void persist_results(const StudyResults& results, const std::filesystem::path& dir);

enum class ReportFormat { Markdown, Json };

std::string emit_report(const StudyResults& results, ReportFormat format);

/// "risk ratio=1.10, 95%CI: 1.03-1.16" or "5% (95%CI: 2.75-7.25%)".
std::string format_effect(const EffectSummary& effect);

/// Rebuilds results from a persisted output directory (no rerun).
StudyResults load_results(const std::filesystem::path& dir);

}  // namespace estsel
