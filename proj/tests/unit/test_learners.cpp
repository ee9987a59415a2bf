#include <cmath>
#include <vector>

#include "doctest.h"
#include "estsel/errors.hpp"
#include "estsel/learners.hpp"
#include "estsel/rng.hpp"
#include "estsel/stats.hpp"

using namespace estsel;

namespace {

double nll(const Eigen::VectorXd& x, const Eigen::VectorXd& y, double b0, double b1, const Eigen::VectorXd* offset = nullptr) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double eta = b0 + b1 * x[i] + (offset ? (*offset)[i] : 0.0);
    total += std::log1p(std::exp(eta)) - y[i] * eta;
  }
  return total;
}

// Coarse grid then two refinements around the best cell.
std::pair<double, double> grid_search(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  double c0 = 0.0, c1 = 0.0, half = 5.0, step = 0.05;
  for (int pass = 0; pass < 4; ++pass) {
    double best = INFINITY, b0 = c0, b1 = c1;
    for (double u = c0 - half; u <= c0 + half; u += step) {
      for (double v = c1 - half; v <= c1 + half; v += step) {
        const double f = nll(x, y, u, v);
        if (f < best) { best = f; b0 = u; b1 = v; }
      }
    }
    c0 = b0; c1 = b1; half = 2 * step; step /= 20;
  }
  return {c0, c1};
}

// Independent two-parameter Newton for the LR statistic.
double lr_statistic(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  const double p0 = y.mean();
  double ll0 = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) ll0 += y[i] * std::log(p0) + (1 - y[i]) * std::log(1 - p0);
  double b0 = 0, b1 = 0;
  for (int it = 0; it < 100; ++it) {
    double g0 = 0, g1 = 0, h00 = 0, h01 = 0, h11 = 0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      const double p = 1.0 / (1.0 + std::exp(-(b0 + b1 * x[i])));
      const double w = p * (1 - p);
      g0 += y[i] - p; g1 += (y[i] - p) * x[i];
      h00 += w; h01 += w * x[i]; h11 += w * x[i] * x[i];
    }
    const double det = h00 * h11 - h01 * h01;
    const double d0 = (h11 * g0 - h01 * g1) / det;
    const double d1 = (h00 * g1 - h01 * g0) / det;
    b0 += d0; b1 += d1;
    if (std::fabs(d0) + std::fabs(d1) < 1e-12) break;
  }
  double ll1 = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-(b0 + b1 * x[i])));
    ll1 += y[i] * std::log(p) + (1 - y[i]) * std::log(1 - p);
  }
  return 2.0 * (ll1 - ll0);
}

}  // namespace

TEST_CASE("intercept-only binomial predicts the mean") {
  Eigen::MatrixXd x(4, 1);
  x << 1, 2, 3, 4;
  Eigen::VectorXd y(4);
  y << 0, 1, 1, 1;
  const auto fit = fit_learner(LearnerSpec::intercept_only(), x, y);
  CHECK(fit.coefficients.size() == 1);
  const auto p = predict(fit, x);
  for (Eigen::Index i = 0; i < 4; ++i) CHECK(p[i] == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("huge ridge penalty shrinks the slope to zero") {
  SeededStream s(4, 0);
  Eigen::MatrixXd x(200, 1);
  Eigen::VectorXd y(200);
  for (int i = 0; i < 200; ++i) {
    x(i, 0) = s.normal();
    y[i] = s.bernoulli(expit(0.5 + x(i, 0))) ? 1.0 : 0.0;
  }
  const auto fit = fit_learner(LearnerSpec::ridge(1e12), x, y);
  CHECK(std::fabs(fit.coefficients[1]) < 1e-6);
  CHECK(fit.predict(x)[0] == doctest::Approx(y.mean()).epsilon(1e-5));
}

TEST_CASE("main-terms logistic matches a grid-search oracle") {
  Eigen::MatrixXd x(8, 1);
  x << 0, 0, 0, 0, 1, 1, 1, 1;
  Eigen::VectorXd y(8);
  y << 0, 0, 1, 1, 0, 1, 1, 1;
  const auto fit = fit_learner(LearnerSpec::main_terms(), x, y);
  const auto [b0, b1] = grid_search(x.col(0), y);
  CHECK(std::fabs(fit.coefficients[0] - b0) < 1e-3);
  CHECK(std::fabs(fit.coefficients[1] - b1) < 1e-3);
  CHECK(fit.converged);
  CHECK_FALSE(fit.fallback);
}

TEST_CASE("predictions are bounded and reproducible") {
  FittedLearner f;
  f.spec = LearnerSpec::main_terms();
  f.coefficients = Eigen::VectorXd::Zero(2);
  f.coefficients[0] = -20.0;
  f.columns = {0};
  f.input_columns = 1;
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(3, 1);
  const auto p = f.predict(x);
  CHECK(p[0] == kProbabilityFloor);
  f.coefficients[0] = 20.0;
  CHECK(f.predict(x)[0] == 1.0 - kProbabilityFloor);

  Eigen::MatrixXd wrong = Eigen::MatrixXd::Zero(3, 2);
  CHECK_THROWS_AS(f.predict(wrong), Error);

  SeededStream s(8, 0);
  Eigen::MatrixXd xx(50, 2);
  Eigen::VectorXd yy(50);
  for (int i = 0; i < 50; ++i) {
    xx(i, 0) = s.normal();
    xx(i, 1) = s.normal();
    yy[i] = s.bernoulli(0.4) ? 1.0 : 0.0;
  }
  const auto a = fit_learner(LearnerSpec::main_terms(), xx, yy);
  const auto b = fit_learner(LearnerSpec::main_terms(), xx, yy);
  CHECK(a.coefficients == b.coefficients);
  CHECK(a.predict(xx) == b.predict(xx));
}

TEST_CASE("gaussian predictions are not bounded") {
  Eigen::MatrixXd x(4, 1);
  x << 0, 1, 2, 3;
  Eigen::VectorXd y(4);
  y << -5, 0, 5, 10;
  const auto fit = fit_learner(LearnerSpec::main_terms(Family::Gaussian), x, y);
  CHECK(fit.coefficients[0] == doctest::Approx(-5.0));
  CHECK(fit.coefficients[1] == doctest::Approx(5.0));
  CHECK(fit.predict(x)[3] == doctest::Approx(10.0));
}

TEST_CASE("separation falls back to the intercept-only fit") {
  Eigen::MatrixXd x(6, 1);
  x << 0, 0, 0, 1, 1, 1;
  Eigen::VectorXd y(6);
  y << 0, 0, 0, 1, 1, 1;
  const auto fit = fit_learner(LearnerSpec::main_terms(), x, y);
  CHECK(fit.fallback);
  const auto p = fit.predict(x);
  for (Eigen::Index i = 0; i < 6; ++i) CHECK(p[i] == doctest::Approx(0.5));
}

TEST_CASE("invalid inputs") {
  Eigen::MatrixXd x(3, 1);
  x << 0, 1, 2;
  Eigen::VectorXd y2(2);
  y2 << 0, 1;
  CHECK_THROWS_AS(fit_learner(LearnerSpec::main_terms(), x, y2), Error);
  Eigen::VectorXd y3(3);
  y3 << 0, 2, 1;
  CHECK_THROWS_AS(fit_learner(LearnerSpec::main_terms(), x, y3), Error);
}

TEST_CASE("screening") {
  SUBCASE("perfectly associated column is kept, constant column dropped") {
    Eigen::MatrixXd x(10, 2);
    Eigen::VectorXd y(10);
    for (int i = 0; i < 10; ++i) {
      y[i] = i % 2;
      x(i, 0) = 3.0;
      x(i, 1) = y[i];
    }
    const auto kept = screen_covariates(x, y, Family::Binomial);
    CHECK(kept == std::vector<size_t>{1});
  }
  SUBCASE("retained set matches independent likelihood-ratio statistics") {
    SeededStream s(100, 5);
    Eigen::MatrixXd x(100, 5);
    Eigen::VectorXd y(100);
    for (int i = 0; i < 100; ++i) {
      for (int j = 0; j < 5; ++j) x(i, j) = s.normal();
      y[i] = s.bernoulli(expit(-0.2 + 0.8 * x(i, 0) - 0.5 * x(i, 2))) ? 1.0 : 0.0;
    }
    const double critical = 2.705543454095404;  // chi-square(1) 0.90 quantile
    std::vector<size_t> expected;
    for (size_t j = 0; j < 5; ++j) {
      if (lr_statistic(x.col(static_cast<Eigen::Index>(j)), y) > critical) expected.push_back(j);
    }
    CHECK(screen_covariates(x, y, Family::Binomial, 0.10) == expected);
    const auto p = screening_p_values(x, y, Family::Binomial);
    for (size_t j = 0; j < 5; ++j) {
      CHECK(p[j] == doctest::Approx(chisq1_sf(lr_statistic(x.col(static_cast<Eigen::Index>(j)), y))).epsilon(1e-6));
    }
  }
  SUBCASE("never empty when a non-constant column exists") {
    SeededStream s(6, 0);
    Eigen::MatrixXd x(40, 3);
    Eigen::VectorXd y(40);
    for (int i = 0; i < 40; ++i) {
      for (int j = 0; j < 3; ++j) x(i, j) = s.normal();
      y[i] = i % 2;
    }
    CHECK(screen_covariates(x, y, Family::Binomial, 1e-9).size() == 1);
  }
}

TEST_CASE("ridge monotonicity over nested penalties") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    SeededStream s(seed, 1);
    Eigen::MatrixXd x(80, 3);
    Eigen::VectorXd y(80);
    for (int i = 0; i < 80; ++i) {
      for (int j = 0; j < 3; ++j) x(i, j) = s.normal();
      y[i] = s.bernoulli(expit(x(i, 0) - x(i, 1))) ? 1.0 : 0.0;
    }
    double previous = INFINITY;
    for (double lambda : {0.0, 0.01, 0.1, 1.0, 10.0, 100.0}) {
      const auto fit = fit_learner(LearnerSpec::ridge(lambda), x, y);
      const double norm = fit.coefficients.tail(fit.coefficients.size() - 1).norm();
      CHECK(norm <= previous + 1e-9);
      previous = norm;
    }
  }
}

TEST_CASE("integer weights equal row replication") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    SeededStream s(seed, 2);
    const int n = 40;
    Eigen::MatrixXd x(n, 2);
    Eigen::VectorXd y(n), w(n);
    std::vector<size_t> replicated;
    for (int i = 0; i < n; ++i) {
      x(i, 0) = s.normal();
      x(i, 1) = s.normal();
      y[i] = s.bernoulli(expit(0.3 * x(i, 0))) ? 1.0 : 0.0;
      w[i] = static_cast<double>(s.below(3));
      for (int k = 0; k < static_cast<int>(w[i]); ++k) replicated.push_back(static_cast<size_t>(i));
    }
    Eigen::MatrixXd xr(replicated.size(), 2);
    Eigen::VectorXd yr(replicated.size());
    for (size_t k = 0; k < replicated.size(); ++k) {
      xr.row(static_cast<Eigen::Index>(k)) = x.row(static_cast<Eigen::Index>(replicated[k]));
      yr[static_cast<Eigen::Index>(k)] = y[static_cast<Eigen::Index>(replicated[k])];
    }
    FitOptions opts;
    opts.weights = &w;
    const auto weighted = fit_learner(LearnerSpec::ridge(0.5), x, y, opts);
    const auto rep = fit_learner(LearnerSpec::ridge(0.5), xr, yr);
    CHECK((weighted.coefficients - rep.coefficients).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("offset with no covariates matches a one-parameter grid search") {
  SeededStream s(12, 0);
  const int n = 60;
  Eigen::MatrixXd x(n, 0);
  Eigen::VectorXd y(n), o(n), zero = Eigen::VectorXd::Zero(n);
  for (int i = 0; i < n; ++i) {
    o[i] = s.normal();
    y[i] = s.uniform();  // fractional response
  }
  FitOptions opts;
  opts.offset = &o;
  const auto fit = fit_learner(LearnerSpec::intercept_only(), x, y, opts);
  double best = INFINITY, arg = 0.0;
  for (double b = -3.0; b <= 3.0; b += 1e-5) {
    const double f = nll(zero, y, b, 0.0, &o);
    if (f < best) { best = f; arg = b; }
  }
  CHECK(std::fabs(fit.coefficients[0] - arg) < 1e-4);
}
