#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace estsel {

enum class ErrorCode {
  FileNotFound,
  SchemaMismatch,
  DomainViolation,
  DimensionMismatch,
  EmptyDataset,
  TooFewUnits,
  InvalidBounds,
  PositivityCollapse,
  NoMeasuredOutcomes,
  NonMonotoneCensoring,
  TooFewClusters,
  DegenerateArm,
  ZeroDenominator,
  InvalidMechanism,
  TooFewIterations,
  EmptyCandidateSet,
  BootstrapFailure,
  InvalidConfig,
};

std::string_view to_string(ErrorCode code);

/// Every failure raised by the library carries a machine-readable code so the
/// Monte Carlo driver can turn it into a failure record.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace estsel
