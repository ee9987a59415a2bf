#include "estsel/superlearner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "estsel/errors.hpp"
#include "estsel/views.hpp"

namespace estsel {

namespace {

constexpr int kExpGradSteps = 500;
constexpr double kExpGradStep = 0.1;
constexpr double kExpGradTolerance = 1e-8;

double clamp_probability(double p) { return std::clamp(p, kProbabilityFloor, 1.0 - kProbabilityFloor); }

double loss_derivative(Loss loss, double y, double p) {
  if (loss == Loss::SquaredError) return 2.0 * (p - y);
  return -y / p + (1.0 - y) / (1.0 - p);
}

double mean_loss(Loss loss, const Eigen::VectorXd& y, const Eigen::VectorXd& p) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) total += loss_value(loss, y[i], p[i]);
  return total / static_cast<double>(y.size());
}

}  // namespace

std::vector<size_t> FoldPlan::validation(size_t v) const {
  std::vector<size_t> out;
  for (size_t i = 0; i < n; ++i) {
    if (static_cast<size_t>(fold_of[i]) == v) out.push_back(i);
  }
  return out;
}

std::vector<size_t> FoldPlan::training(size_t v) const {
  std::vector<size_t> out;
  for (size_t i = 0; i < n; ++i) {
    if (static_cast<size_t>(fold_of[i]) != v) out.push_back(i);
  }
  return out;
}

FoldPlan FoldPlan::restrict_to(std::span<const size_t> units) const {
  FoldPlan out;
  out.n = units.size();
  out.folds = folds;
  out.stratified = stratified;
  out.unit = unit;
  out.fold_of.reserve(units.size());
  for (size_t u : units) out.fold_of.push_back(fold_of.at(u));
  return out;
}

size_t FoldPlan::populated_folds() const {
  std::vector<char> seen(folds, 0);
  for (int f : fold_of) seen[static_cast<size_t>(f)] = 1;
  return static_cast<size_t>(std::count(seen.begin(), seen.end(), 1));
}

size_t default_fold_count(size_t independent_units) {
  if (independent_units >= 20) return 10;
  return std::max<size_t>(2, independent_units / 2);
}

FoldPlan make_folds(size_t n, size_t folds, SeededStream stream, std::span<const int> strata,
                    std::span<const size_t> groups) {
  if (!strata.empty() && strata.size() != n) throw Error(ErrorCode::DimensionMismatch, "strata length differs from n");
  if (!groups.empty() && groups.size() != n) throw Error(ErrorCode::DimensionMismatch, "groups length differs from n");

  size_t units = n;
  std::vector<int> unit_stratum;
  if (!groups.empty()) {
    units = groups.empty() ? 0 : *std::max_element(groups.begin(), groups.end()) + 1;
    unit_stratum.assign(units, 0);
    std::vector<char> seen(units, 0);
    for (size_t i = 0; i < n; ++i) {
      if (!seen[groups[i]]) {
        seen[groups[i]] = 1;
        if (!strata.empty()) unit_stratum[groups[i]] = strata[i];
      }
    }
  } else {
    unit_stratum.assign(strata.begin(), strata.end());
    if (unit_stratum.empty()) unit_stratum.assign(n, 0);
  }
  if (folds < 2 || folds > units) {
    throw Error(ErrorCode::TooFewUnits, "cannot split " + std::to_string(units) + " units into " +
                                            std::to_string(folds) + " folds");
  }

  std::vector<size_t> order(units);
  std::iota(order.begin(), order.end(), size_t{0});
  stream.shuffle(std::span<size_t>(order));
  if (!strata.empty()) {
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return unit_stratum[a] < unit_stratum[b]; });
  }
  std::vector<int> unit_fold(units);
  for (size_t pos = 0; pos < units; ++pos) unit_fold[order[pos]] = static_cast<int>(pos % folds);

  FoldPlan plan;
  plan.n = n;
  plan.folds = folds;
  plan.stratified = !strata.empty();
  plan.unit = groups.empty() ? GroupingUnit::Row : GroupingUnit::Cluster;
  plan.fold_of.resize(n);
  for (size_t i = 0; i < n; ++i) plan.fold_of[i] = unit_fold[groups.empty() ? i : groups[i]];
  return plan;
}

double loss_value(Loss loss, double y, double prediction) {
  if (loss == Loss::SquaredError) return (y - prediction) * (y - prediction);
  const double p = clamp_probability(prediction);
  double value = 0.0;
  if (y > 0) value -= y * std::log(p);
  if (y < 1) value -= (1.0 - y) * std::log1p(-p);
  return value;
}

FittedLearner fit_screened(const LearnerSpec& spec, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                           const ScreeningOptions& screening, const FitOptions& options) {
  if (!screening.enabled || spec.kind == LearnerKind::InterceptOnly || x.cols() == 0) {
    return fit_learner(spec, x, y, options);
  }
  FitOptions screened = options;
  screened.columns = screen_covariates(x, y, screening.family, screening.alpha);
  return fit_learner(spec, x, y, screened);
}

CvResult cv_risks(std::span<const LearnerSpec> library, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                  const FoldPlan& folds, Loss loss, const ScreeningOptions& screening) {
  if (library.empty()) throw Error(ErrorCode::InvalidConfig, "learner library is empty");
  if (x.rows() != y.size() || folds.n != static_cast<size_t>(y.size())) {
    throw Error(ErrorCode::DimensionMismatch, "cross-validation inputs disagree on the number of units");
  }
  const size_t n_learners = library.size();
  CvResult out;
  out.risks = Eigen::VectorXd::Constant(n_learners, std::numeric_limits<double>::quiet_NaN());
  out.heldout = Eigen::MatrixXd::Constant(y.size(), n_learners, std::numeric_limits<double>::quiet_NaN());
  out.fallbacks.assign(n_learners, 0);
  if (folds.populated_folds() < 2) {
    out.available = false;
    return out;
  }

  // Fixed fold-then-learner order keeps the reduction deterministic.
  for (size_t v = 0; v < folds.folds; ++v) {
    const auto valid = folds.validation(v);
    if (valid.empty()) continue;
    const auto train = folds.training(v);
    const Eigen::MatrixXd x_train = take_rows(x, train);
    const Eigen::VectorXd y_train = take_rows(y, train);
    const Eigen::MatrixXd x_valid = take_rows(x, valid);
    for (size_t l = 0; l < n_learners; ++l) {
      const FittedLearner fit = fit_screened(library[l], x_train, y_train, screening);
      out.fallbacks[l] += fit.fallback ? 1 : 0;
      const Eigen::VectorXd pred = fit.predict(x_valid);
      for (size_t k = 0; k < valid.size(); ++k) {
        out.heldout(static_cast<Eigen::Index>(valid[k]), static_cast<Eigen::Index>(l)) =
            loss == Loss::NegLogLikelihood ? clamp_probability(pred[k]) : pred[k];
      }
    }
  }
  for (size_t l = 0; l < n_learners; ++l) {
    out.risks[l] = mean_loss(loss, y, out.heldout.col(l));
  }
  return out;
}

Eigen::VectorXd SuperLearnerFit::predict(const Eigen::MatrixXd& x) const {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(x.rows());
  for (size_t l = 0; l < fits.size(); ++l) {
    if (weights[l] == 0.0) continue;
    out += weights[l] * fits[l].predict(x);
  }
  if (loss == Loss::NegLogLikelihood) out = out.unaryExpr([](double p) { return clamp_probability(p); });
  return out;
}

SuperLearnerFit fit_super_learner(std::span<const LearnerSpec> library, const Eigen::MatrixXd& x,
                                  const Eigen::VectorXd& y, const FoldPlan& folds, Loss loss, EnsembleMode mode,
                                  const ScreeningOptions& screening) {
  const CvResult cv = cv_risks(library, x, y, folds, loss, screening);
  const size_t n_learners = library.size();

  SuperLearnerFit fit;
  fit.library.assign(library.begin(), library.end());
  fit.mode = mode;
  fit.loss = loss;
  fit.cv_risk = cv.risks;
  fit.cv_available = cv.available;
  fit.weights = Eigen::VectorXd::Zero(n_learners);
  for (int f : cv.fallbacks) fit.fallbacks += f;

  size_t best = 0;
  if (cv.available) {
    for (size_t l = 1; l < n_learners; ++l) {
      if (cv.risks[l] < cv.risks[best]) best = l;
    }
  }
  fit.weights[best] = 1.0;
  fit.ensemble_cv_risk = cv.risks[best];

  if (mode == EnsembleMode::Convex && cv.available && n_learners > 1) {
    // Exponentiated-gradient descent on the simplex.
    Eigen::VectorXd w = Eigen::VectorXd::Constant(n_learners, 1.0 / static_cast<double>(n_learners));
    const double inv_n = 1.0 / static_cast<double>(y.size());
    for (int step = 0; step < kExpGradSteps; ++step) {
      const Eigen::VectorXd p = cv.heldout * w;
      Eigen::VectorXd grad = Eigen::VectorXd::Zero(n_learners);
      for (Eigen::Index i = 0; i < y.size(); ++i) {
        grad += loss_derivative(loss, y[i], p[i]) * cv.heldout.row(i).transpose();
      }
      grad *= inv_n;
      const double shift = grad.minCoeff();
      Eigen::VectorXd next = w.array() * (-kExpGradStep * (grad.array() - shift)).exp();
      next /= next.sum();
      const double change = (next - w).cwiseAbs().maxCoeff();
      w = next;
      if (change < kExpGradTolerance) break;
    }
    const double ensemble_risk = mean_loss(loss, y, cv.heldout * w);
    if (ensemble_risk < fit.ensemble_cv_risk) {
      fit.weights = w;
      fit.ensemble_cv_risk = ensemble_risk;
    }
  }

  fit.fits.reserve(n_learners);
  for (size_t l = 0; l < n_learners; ++l) {
    FittedLearner full = fit_screened(library[l], x, y, screening);
    fit.fallbacks += full.fallback ? 1 : 0;
    fit.fits.push_back(std::move(full));
  }
  return fit;
}

}  // namespace estsel
