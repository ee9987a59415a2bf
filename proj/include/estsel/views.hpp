#pragma once

#include <Eigen/Dense>
#include <span>
#include <string>
#include <vector>

#include "estsel/dataset.hpp"

namespace estsel {

/// (W, A, Y) for a single time-point treatment.
struct PointData {
  Eigen::MatrixXd covariates;
  Eigen::VectorXd treatment;
  Eigen::VectorXd outcome;
  std::vector<std::string> covariate_names;

  size_t size() const { return static_cast<size_t>(outcome.size()); }
};

/// (W, M, Delta, Y): outcome is NaN where measured == 0.
struct MissingData {
  Eigen::MatrixXd covariates;
  Eigen::VectorXd measured;
  Eigen::VectorXd outcome;
  std::vector<std::string> covariate_names;

  size_t size() const { return static_cast<size_t>(measured.size()); }
};

/// Wide layout of a long-format longitudinal dataset. Within each time t the
/// node order is L(t), A(t), C(t); Y follows C(t_max). Values of nodes a
/// subject never reached are NaN.
struct LongitudinalData {
  size_t horizon = 0;
  std::vector<std::string> subject_ids;
  std::vector<std::string> baseline_names;
  Eigen::MatrixXd baseline;
  std::vector<std::string> time_varying_names;
  std::vector<Eigen::MatrixXd> time_varying;  // one n x q block per time
  Eigen::MatrixXd treatment;                  // n x (horizon + 1)
  Eigen::MatrixXd censoring;                  // n x (horizon + 1)
  Eigen::VectorXd outcome;
  bool has_censoring = false;

  std::string subject_name = "id";
  std::string time_name = "t";
  std::string treatment_name = "A";
  std::string censoring_name = "C";
  std::string outcome_name = "Y";

  size_t size() const { return static_cast<size_t>(outcome.size()); }
  /// Uncensored through t-1, so L(t) and A(t) were observed.
  bool reached(size_t subject, size_t t) const;
  /// Subjects in the given order; repeated subjects get distinct ids.
  LongitudinalData subset(std::span<const size_t> subjects) const;
};

/// One cluster's individuals plus the cluster-level variables.
struct ClusterStudyData {
  std::vector<std::string> ids;
  std::vector<std::string> cluster_covariate_names;
  Eigen::MatrixXd cluster_covariates;  // N x p
  Eigen::VectorXd treatment;           // N
  std::vector<MissingData> individuals;
  std::vector<Eigen::VectorXd> underlying_outcome;  // outcome before blanking, if known

  std::string cluster_name = "cluster";
  std::string treatment_name = "A";
  std::string measurement_name = "Delta";
  std::string outcome_name = "Y";
  std::vector<bool> covariate_time_varying;  // per individual covariate: M rather than W

  size_t size() const { return ids.size(); }
};

PointData point_data(const Dataset& dataset);
MissingData missing_data(const Dataset& dataset);
LongitudinalData to_wide(const Dataset& dataset);
Dataset to_long(const LongitudinalData& data);
ClusterStudyData cluster_study(const Dataset& dataset);
/// One row per individual; cluster-level columns repeated within clusters.
Dataset to_long(const ClusterStudyData& data);

/// Column-wise copy of the selected rows.
Eigen::MatrixXd take_rows(const Eigen::MatrixXd& x, std::span<const size_t> rows);
Eigen::VectorXd take_rows(const Eigen::VectorXd& x, std::span<const size_t> rows);

}  // namespace estsel
