#pragma once

#include <cmath>
#include <limits>
#include <span>

namespace estsel {

inline constexpr double kZ975 = 1.96;
inline constexpr double kNominalLevel = 0.05;

inline double expit(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// logit with exact infinities at 0 and 1.
inline double logit(double p) {
  if (p <= 0.0) return -std::numeric_limits<double>::infinity();
  if (p >= 1.0) return std::numeric_limits<double>::infinity();
  return std::log(p / (1.0 - p));
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

inline double two_sided_p(double z) { return std::erfc(std::fabs(z) / std::sqrt(2.0)); }

/// Upper tail of chi-square with one degree of freedom.
inline double chisq1_sf(double x) {
  if (x <= 0) return 1.0;
  return std::erfc(std::sqrt(x / 2.0));
}

double mean(std::span<const double> x);
/// Unbiased (n-1) sample variance.
double sample_variance(std::span<const double> x);
double population_variance(std::span<const double> x);

}  // namespace estsel
