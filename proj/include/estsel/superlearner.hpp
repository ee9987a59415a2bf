#pragma once

#include <Eigen/Dense>
#include <optional>
#include <span>
#include <vector>

#include "estsel/learners.hpp"
#include "estsel/rng.hpp"

namespace estsel {

enum class GroupingUnit { Row, Subject, Cluster };

/// Partition of n units into V folds.
struct FoldPlan {
  size_t n = 0;
  size_t folds = 0;
  std::vector<int> fold_of;  // per unit, in [0, folds)
  bool stratified = false;
  GroupingUnit unit = GroupingUnit::Row;

  std::vector<size_t> validation(size_t v) const;
  std::vector<size_t> training(size_t v) const;
  /// Fold assignment of the listed units, renumbered 0..k-1 (fold labels kept).
  FoldPlan restrict_to(std::span<const size_t> units) const;
  size_t populated_folds() const;
};

/// 10 folds, reduced to max(2, floor(n / 2)) below 20 independent units.
size_t default_fold_count(size_t independent_units);

/// Random balanced partition. With `strata`, units of each stratum are spread
/// evenly over the folds; with `groups`, whole groups are assigned.
FoldPlan make_folds(size_t n, size_t folds, SeededStream stream, std::span<const int> strata = {},
                    std::span<const size_t> groups = {});

enum class Loss { NegLogLikelihood, SquaredError };
enum class EnsembleMode { Discrete, Convex };

double loss_value(Loss loss, double y, double prediction);

struct CvResult {
  Eigen::VectorXd risks;        // one per learner; NaN when CV is impossible
  Eigen::MatrixXd heldout;      // n x L held-out predictions
  std::vector<int> fallbacks;   // per learner, summed over folds
  bool available = true;        // false when fewer than two folds hold units
};

/// Optional univariate screening applied within every training set.
struct ScreeningOptions {
  bool enabled = false;
  double alpha = 0.10;
  Family family = Family::Binomial;
};

CvResult cv_risks(std::span<const LearnerSpec> library, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                  const FoldPlan& folds, Loss loss, const ScreeningOptions& screening = {});

struct SuperLearnerFit {
  std::vector<LearnerSpec> library;
  std::vector<FittedLearner> fits;  // full-data refits
  Eigen::VectorXd cv_risk;
  Eigen::VectorXd weights;
  double ensemble_cv_risk = 0.0;
  EnsembleMode mode = EnsembleMode::Discrete;
  Loss loss = Loss::NegLogLikelihood;
  int fallbacks = 0;
  bool cv_available = true;

  Eigen::VectorXd predict(const Eigen::MatrixXd& x) const;
};

SuperLearnerFit fit_super_learner(std::span<const LearnerSpec> library, const Eigen::MatrixXd& x,
                                  const Eigen::VectorXd& y, const FoldPlan& folds, Loss loss, EnsembleMode mode,
                                  const ScreeningOptions& screening = {});

/// Fits one learner, screening first when enabled.
FittedLearner fit_screened(const LearnerSpec& spec, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                           const ScreeningOptions& screening, const FitOptions& options = {});

}  // namespace estsel
