#pragma once

#include <Eigen/Dense>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace estsel {

enum class LearnerKind { InterceptOnly, GlmMainTerms, GlmRidge, GlmRidgeInteractions };
enum class Family { Binomial, Gaussian };

/// Binomial predictions are bounded into [kProbabilityFloor, 1 - kProbabilityFloor].
inline constexpr double kProbabilityFloor = 1e-4;

struct LearnerSpec {
  LearnerKind kind = LearnerKind::GlmMainTerms;
  Family family = Family::Binomial;
  double lambda = 0.0;

  std::string name() const;
  bool interactions() const { return kind == LearnerKind::GlmRidgeInteractions; }
  friend bool operator==(const LearnerSpec&, const LearnerSpec&) = default;

  static LearnerSpec intercept_only(Family f = Family::Binomial) { return {LearnerKind::InterceptOnly, f, 0.0}; }
  static LearnerSpec main_terms(Family f = Family::Binomial) { return {LearnerKind::GlmMainTerms, f, 0.0}; }
  static LearnerSpec ridge(double lambda, Family f = Family::Binomial) { return {LearnerKind::GlmRidge, f, lambda}; }
  static LearnerSpec ridge_interactions(double lambda, Family f = Family::Binomial) {
    return {LearnerKind::GlmRidgeInteractions, f, lambda};
  }
};

std::optional<LearnerKind> parse_learner_kind(std::string_view text);
std::string_view to_string(LearnerKind kind);
std::string_view to_string(Family family);

struct FittedLearner {
  LearnerSpec spec;
  Eigen::VectorXd coefficients;  // intercept, then one per design column
  std::vector<size_t> columns;   // input columns the design is built from
  size_t input_columns = 0;
  bool converged = true;
  bool fallback = false;
  int iterations = 0;

  Eigen::VectorXd linear_predictor(const Eigen::MatrixXd& x, const Eigen::VectorXd* offset = nullptr) const;
  Eigen::VectorXd predict(const Eigen::MatrixXd& x, const Eigen::VectorXd* offset = nullptr) const;
};

struct FitOptions {
  const Eigen::VectorXd* weights = nullptr;
  const Eigen::VectorXd* offset = nullptr;
  /// Restrict the design to these input columns (screening).
  std::optional<std::vector<size_t>> columns;
};

/// Main terms of the chosen columns, followed by their pairwise products
/// when `interactions` is set. No intercept column.
Eigen::MatrixXd design_matrix(const Eigen::MatrixXd& x, std::span<const size_t> columns, bool interactions);

/// Penalized (weighted, offset) GLM fit by IRLS starting from zero.
/// Quasi-separation or non-convergence yields the intercept-only fit with
/// `fallback` set; it never throws for those.
FittedLearner fit_learner(const LearnerSpec& spec, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                          const FitOptions& options = {});

inline Eigen::VectorXd predict(const FittedLearner& fitted, const Eigen::MatrixXd& x) {
  return fitted.predict(x);
}

/// Univariate likelihood-ratio p-values; constant columns get 1.
std::vector<double> screening_p_values(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, Family family);

/// Columns whose univariate LR p-value is below alpha; never empty when some
/// column is non-constant.
std::vector<size_t> screen_covariates(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, Family family,
                                      double alpha = 0.10);

/// Binomial log-likelihood sum with optional weights; probabilities are used
/// as given.
double binomial_log_likelihood(const Eigen::VectorXd& y, const Eigen::VectorXd& p,
                               const Eigen::VectorXd* weights = nullptr);

}  // namespace estsel
