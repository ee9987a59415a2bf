#include "estsel/stats.hpp"

#include <algorithm>

#include "estsel/errors.hpp"

namespace estsel {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::FileNotFound: return "FileNotFound";
    case ErrorCode::SchemaMismatch: return "SchemaMismatch";
    case ErrorCode::DomainViolation: return "DomainViolation";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::TooFewUnits: return "TooFewUnits";
    case ErrorCode::InvalidBounds: return "InvalidBounds";
    case ErrorCode::PositivityCollapse: return "PositivityCollapse";
    case ErrorCode::NoMeasuredOutcomes: return "NoMeasuredOutcomes";
    case ErrorCode::NonMonotoneCensoring: return "NonMonotoneCensoring";
    case ErrorCode::TooFewClusters: return "TooFewClusters";
    case ErrorCode::DegenerateArm: return "DegenerateArm";
    case ErrorCode::ZeroDenominator: return "ZeroDenominator";
    case ErrorCode::InvalidMechanism: return "InvalidMechanism";
    case ErrorCode::TooFewIterations: return "TooFewIterations";
    case ErrorCode::EmptyCandidateSet: return "EmptyCandidateSet";
    case ErrorCode::BootstrapFailure: return "BootstrapFailure";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

double mean(std::span<const double> x) {
  if (x.empty()) return 0.0;
  double s = 0.0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

namespace {

bool all_equal(std::span<const double> x) {
  return std::all_of(x.begin(), x.end(), [&](double v) { return v == x.front(); });
}

}  // namespace

double sample_variance(std::span<const double> x) {
  if (x.size() < 2 || all_equal(x)) return 0.0;
  const double m = mean(x);
  double ss = 0.0;
  for (double v : x) ss += (v - m) * (v - m);
  return ss / static_cast<double>(x.size() - 1);
}

double population_variance(std::span<const double> x) {
  if (x.empty() || all_equal(x)) return 0.0;
  const double m = mean(x);
  double ss = 0.0;
  for (double v : x) ss += (v - m) * (v - m);
  return ss / static_cast<double>(x.size());
}

}  // namespace estsel
