#include "estsel/learners.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "estsel/errors.hpp"
#include "estsel/format.hpp"
#include "estsel/stats.hpp"

namespace estsel {

namespace {

constexpr int kMaxIterations = 100;
constexpr double kTolerance = 1e-8;
// |eta| beyond this means a fitted probability within 1e-15 of 0 or 1.
constexpr double kSeparationEta = 35.0;

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

struct IrlsResult {
  Eigen::VectorXd beta;
  bool converged = false;
  bool separated = false;
  bool finite = true;
  int iterations = 0;
  double log_likelihood = 0.0;
};

double binomial_loglik_eta(const Eigen::VectorXd& y, const Eigen::VectorXd& eta, const Eigen::VectorXd& w) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (w[i] == 0.0) continue;
    ll -= w[i] * (y[i] * softplus(-eta[i]) + (1.0 - y[i]) * softplus(eta[i]));
  }
  return ll;
}

double slope_penalty(const Eigen::VectorXd& beta, double lambda) {
  if (lambda == 0.0 || beta.size() <= 1) return 0.0;
  return lambda * beta.tail(beta.size() - 1).squaredNorm();
}

// Weighted (ridge) least squares: minimize sum w (z - D b)^2 + lambda |b_slopes|^2.
// Rank-deficient unpenalized designs get zero coefficients on aliased columns.
Eigen::VectorXd weighted_solve(const Eigen::MatrixXd& d, const Eigen::VectorXd& z, const Eigen::VectorXd& w,
                               double lambda) {
  const Eigen::Index p = d.cols();
  if (lambda > 0.0) {
    Eigen::MatrixXd xtx = d.transpose() * w.asDiagonal() * d;
    for (Eigen::Index j = 1; j < p; ++j) xtx(j, j) += lambda;
    Eigen::VectorXd xtz = d.transpose() * (w.array() * z.array()).matrix();
    Eigen::LDLT<Eigen::MatrixXd> ldlt(xtx);
    if (ldlt.info() == Eigen::Success && ldlt.isPositive()) return ldlt.solve(xtz);
  }
  const Eigen::VectorXd sw = w.array().sqrt();
  Eigen::MatrixXd a = sw.asDiagonal() * d;
  Eigen::VectorXd b = (sw.array() * z.array()).matrix();
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  qr.setThreshold(1e-10);
  return qr.solve(b);
}

IrlsResult irls_binomial(const Eigen::MatrixXd& d, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                         const Eigen::VectorXd& offset, double lambda) {
  const Eigen::Index p = d.cols();
  IrlsResult r;
  r.beta = Eigen::VectorXd::Zero(p);
  Eigen::VectorXd eta = offset;
  double objective = -binomial_loglik_eta(y, eta, w);

  for (int it = 1; it <= kMaxIterations; ++it) {
    r.iterations = it;
    Eigen::VectorXd z(y.size()), wv(y.size());
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      const double mu = expit(eta[i]);
      const double v = std::max(mu * (1.0 - mu), 1e-12);
      z[i] = (eta[i] - offset[i]) + (y[i] - mu) / v;
      wv[i] = w[i] * v;
    }
    Eigen::VectorXd proposal = weighted_solve(d, z, wv, lambda);
    if (!proposal.allFinite()) {
      r.finite = false;
      return r;
    }
    // Step-halving on the penalized objective.
    Eigen::VectorXd new_eta = offset + d * proposal;
    double new_objective = -binomial_loglik_eta(y, new_eta, w) + 0.5 * slope_penalty(proposal, lambda);
    for (int half = 0; half < 30 && new_objective > objective + 1e-10 * (1.0 + std::fabs(objective)); ++half) {
      proposal = 0.5 * (proposal + r.beta);
      new_eta = offset + d * proposal;
      new_objective = -binomial_loglik_eta(y, new_eta, w) + 0.5 * slope_penalty(proposal, lambda);
    }
    const double change = (proposal - r.beta).cwiseAbs().maxCoeff();
    r.beta = proposal;
    eta = new_eta;
    objective = new_objective;
    if (eta.cwiseAbs().maxCoeff() > kSeparationEta && lambda == 0.0) {
      r.separated = true;
      break;
    }
    if (change < kTolerance) {
      r.converged = true;
      break;
    }
  }
  r.log_likelihood = binomial_loglik_eta(y, eta, w);
  return r;
}

Eigen::VectorXd bound_probabilities(Eigen::VectorXd p) {
  return p.cwiseMax(kProbabilityFloor).cwiseMin(1.0 - kProbabilityFloor);
}

// Intercept-only fit; the only learner that needs no design.
double intercept_only(const LearnerSpec& spec, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                      const Eigen::VectorXd* offset, bool& converged, int& iterations) {
  const double wsum = w.sum();
  const double ybar = wsum > 0 ? w.dot(y) / wsum : 0.0;
  converged = true;
  iterations = 0;
  if (spec.family == Family::Gaussian) {
    if (offset == nullptr) return ybar;
    return wsum > 0 ? w.dot(y - *offset) / wsum : 0.0;
  }
  if (offset == nullptr) {
    return logit(std::clamp(ybar, 1e-12, 1.0 - 1e-12));
  }
  const Eigen::MatrixXd ones = Eigen::MatrixXd::Ones(y.size(), 1);
  const IrlsResult r = irls_binomial(ones, y, w, *offset, 0.0);
  converged = r.converged;
  iterations = r.iterations;
  if (!r.finite) return 0.0;
  return std::clamp(r.beta[0], -kSeparationEta, kSeparationEta);
}

}  // namespace

std::string LearnerSpec::name() const {
  std::string base(to_string(kind));
  if (kind == LearnerKind::GlmRidge || kind == LearnerKind::GlmRidgeInteractions) {
    base += "(" + format_number(lambda) + ")";
  }
  return base + (family == Family::Gaussian ? "[gaussian]" : "");
}

std::optional<LearnerKind> parse_learner_kind(std::string_view text) {
  if (text == "intercept_only") return LearnerKind::InterceptOnly;
  if (text == "glm_main_terms") return LearnerKind::GlmMainTerms;
  if (text == "glm_ridge") return LearnerKind::GlmRidge;
  if (text == "glm_ridge_interactions") return LearnerKind::GlmRidgeInteractions;
  return std::nullopt;
}

std::string_view to_string(LearnerKind kind) {
  switch (kind) {
    case LearnerKind::InterceptOnly: return "intercept_only";
    case LearnerKind::GlmMainTerms: return "glm_main_terms";
    case LearnerKind::GlmRidge: return "glm_ridge";
    case LearnerKind::GlmRidgeInteractions: return "glm_ridge_interactions";
  }
  return "unknown";
}

std::string_view to_string(Family family) { return family == Family::Binomial ? "binomial" : "gaussian"; }

Eigen::MatrixXd design_matrix(const Eigen::MatrixXd& x, std::span<const size_t> columns, bool interactions) {
  const size_t k = columns.size();
  const size_t extra = interactions ? k * (k - (k > 0 ? 1 : 0)) / 2 : 0;
  Eigen::MatrixXd d(x.rows(), static_cast<Eigen::Index>(k + extra));
  for (size_t j = 0; j < k; ++j) d.col(j) = x.col(columns[j]);
  if (interactions) {
    size_t pos = k;
    for (size_t a = 0; a < k; ++a) {
      for (size_t b = a + 1; b < k; ++b) {
        d.col(pos++) = x.col(columns[a]).cwiseProduct(x.col(columns[b]));
      }
    }
  }
  return d;
}

Eigen::VectorXd FittedLearner::linear_predictor(const Eigen::MatrixXd& x, const Eigen::VectorXd* offset) const {
  if (static_cast<size_t>(x.cols()) != input_columns) {
    throw Error(ErrorCode::DimensionMismatch, "prediction matrix has " + std::to_string(x.cols()) +
                                                  " columns, fit used " + std::to_string(input_columns));
  }
  if (offset && offset->size() != x.rows()) {
    throw Error(ErrorCode::DimensionMismatch, "offset length does not match prediction rows");
  }
  Eigen::VectorXd eta = Eigen::VectorXd::Constant(x.rows(), coefficients[0]);
  if (coefficients.size() > 1) {
    const Eigen::MatrixXd d = design_matrix(x, columns, spec.interactions());
    eta += d * coefficients.tail(coefficients.size() - 1);
  }
  if (offset) eta += *offset;
  return eta;
}

Eigen::VectorXd FittedLearner::predict(const Eigen::MatrixXd& x, const Eigen::VectorXd* offset) const {
  Eigen::VectorXd eta = linear_predictor(x, offset);
  if (spec.family == Family::Gaussian) return eta;
  for (Eigen::Index i = 0; i < eta.size(); ++i) eta[i] = expit(eta[i]);
  return bound_probabilities(std::move(eta));
}

FittedLearner fit_learner(const LearnerSpec& spec, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                          const FitOptions& options) {
  const Eigen::Index n = y.size();
  if (n < 1) throw Error(ErrorCode::DimensionMismatch, "cannot fit a learner on zero rows");
  if (x.rows() != n) {
    throw Error(ErrorCode::DimensionMismatch, "covariate rows (" + std::to_string(x.rows()) +
                                                  ") differ from response length (" + std::to_string(n) + ")");
  }
  if (options.weights && options.weights->size() != n) {
    throw Error(ErrorCode::DimensionMismatch, "weights length does not match response");
  }
  if (options.offset && options.offset->size() != n) {
    throw Error(ErrorCode::DimensionMismatch, "offset length does not match response");
  }
  if (spec.lambda < 0.0) throw Error(ErrorCode::InvalidConfig, "ridge penalty must be non-negative");
  if (!y.allFinite()) throw Error(ErrorCode::DomainViolation, "response contains missing values");
  if (spec.family == Family::Binomial && (y.minCoeff() < 0.0 || y.maxCoeff() > 1.0)) {
    throw Error(ErrorCode::DomainViolation, "binomial response outside [0,1]");
  }
  const Eigen::VectorXd w = options.weights ? *options.weights : Eigen::VectorXd::Ones(n);

  FittedLearner fit;
  fit.spec = spec;
  fit.input_columns = static_cast<size_t>(x.cols());
  if (spec.kind != LearnerKind::InterceptOnly) {
    if (options.columns) {
      fit.columns = *options.columns;
    } else {
      fit.columns.resize(x.cols());
      std::iota(fit.columns.begin(), fit.columns.end(), size_t{0});
    }
  }

  const Eigen::MatrixXd design = design_matrix(x, fit.columns, spec.interactions());
  const Eigen::Index p = design.cols();

  // Columns constant over the positively weighted rows carry no information.
  std::vector<Eigen::Index> active;
  for (Eigen::Index j = 0; j < p; ++j) {
    double first = 0;
    bool seen = false;
    bool varies = false;
    for (Eigen::Index i = 0; i < n && !varies; ++i) {
      if (w[i] <= 0) continue;
      if (!seen) {
        first = design(i, j);
        seen = true;
      } else if (design(i, j) != first) {
        varies = true;
      }
    }
    if (varies) active.push_back(j);
  }

  fit.coefficients = Eigen::VectorXd::Zero(p + 1);
  const auto fallback_to_intercept = [&](bool flag) {
    fit.coefficients.setZero();
    bool conv = true;
    int iters = 0;
    fit.coefficients[0] = intercept_only(spec, y, w, options.offset, conv, iters);
    fit.converged = conv;
    fit.iterations += iters;
    fit.fallback = flag;
  };

  if (active.empty()) {
    fallback_to_intercept(false);
    return fit;
  }

  Eigen::MatrixXd d(n, static_cast<Eigen::Index>(active.size()) + 1);
  d.col(0).setOnes();
  for (size_t k = 0; k < active.size(); ++k) d.col(k + 1) = design.col(active[k]);
  const Eigen::VectorXd offset = options.offset ? *options.offset : Eigen::VectorXd::Zero(n);

  Eigen::VectorXd beta;
  if (spec.family == Family::Gaussian) {
    beta = weighted_solve(d, y - offset, w, spec.lambda);
    fit.iterations = 1;
    if (!beta.allFinite()) {
      fallback_to_intercept(true);
      return fit;
    }
  } else {
    const IrlsResult r = irls_binomial(d, y, w, offset, spec.lambda);
    fit.iterations = r.iterations;
    if (!r.finite || !r.converged || r.separated) {
      fallback_to_intercept(true);
      return fit;
    }
    beta = r.beta;
  }
  fit.coefficients[0] = beta[0];
  for (size_t k = 0; k < active.size(); ++k) fit.coefficients[active[k] + 1] = beta[k + 1];
  fit.converged = true;
  return fit;
}

double binomial_log_likelihood(const Eigen::VectorXd& y, const Eigen::VectorXd& p, const Eigen::VectorXd* weights) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double w = weights ? (*weights)[i] : 1.0;
    if (w == 0.0) continue;
    double term = 0.0;
    if (y[i] > 0) term += y[i] * std::log(p[i]);
    if (y[i] < 1) term += (1.0 - y[i]) * std::log1p(-p[i]);
    ll += w * term;
  }
  return ll;
}

std::vector<double> screening_p_values(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, Family family) {
  const Eigen::Index n = y.size();
  if (x.rows() != n) throw Error(ErrorCode::DimensionMismatch, "screening: rows differ from response length");
  std::vector<double> p(static_cast<size_t>(x.cols()), 1.0);
  const double ybar = y.mean();
  const Eigen::VectorXd w = Eigen::VectorXd::Ones(n);
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(n);

  double null_fit = 0.0;
  if (family == Family::Binomial) {
    null_fit = binomial_log_likelihood(y, Eigen::VectorXd::Constant(n, std::clamp(ybar, 1e-300, 1.0 - 1e-16)));
  } else {
    null_fit = (y.array() - ybar).square().sum();
  }

  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const auto col = x.col(j);
    if ((col.array() == col[0]).all()) continue;
    Eigen::MatrixXd d(n, 2);
    d.col(0).setOnes();
    d.col(1) = col;
    double lr = 0.0;
    if (family == Family::Binomial) {
      if (ybar == 0.0 || ybar == 1.0) continue;
      const IrlsResult r = irls_binomial(d, y, w, zero, 0.0);
      lr = 2.0 * (r.log_likelihood - null_fit);
    } else {
      const Eigen::VectorXd beta = weighted_solve(d, y, w, 0.0);
      const double rss = (y - d * beta).squaredNorm();
      if (null_fit <= 0) continue;
      lr = rss <= 0 ? std::numeric_limits<double>::infinity() : static_cast<double>(n) * std::log(null_fit / rss);
    }
    p[static_cast<size_t>(j)] = chisq1_sf(std::max(lr, 0.0));
  }
  return p;
}

std::vector<size_t> screen_covariates(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, Family family,
                                      double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw Error(ErrorCode::InvalidConfig, "screening alpha must lie in (0,1)");
  const auto p = screening_p_values(x, y, family);
  std::vector<size_t> keep;
  for (size_t j = 0; j < p.size(); ++j) {
    if (p[j] < alpha) keep.push_back(j);
  }
  if (keep.empty()) {
    std::optional<size_t> best;
    for (size_t j = 0; j < p.size(); ++j) {
      const auto col = x.col(static_cast<Eigen::Index>(j));
      if ((col.array() == col[0]).all()) continue;
      if (!best || p[j] < p[*best]) best = j;
    }
    if (best) keep.push_back(*best);
  }
  return keep;
}

}  // namespace estsel
