#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "estsel/rng.hpp"

namespace estsel {

enum class ColumnRole {
  BaselineCovariate,  // W, or E^c when cluster_level
  Treatment,          // A, A^c
  Censoring,          // C(t)
  Measurement,        // Delta
  TimeVarying,        // L(t), M
  Outcome,            // Y
  ClusterId,
  TimeIndex,
  SubjectId,
};

enum class ColumnType { Binary, Real, Categorical, Label };

enum class StudyType { PointTreatment, Longitudinal, ClusterTwoStage };

std::string_view to_string(ColumnRole role);
std::optional<ColumnRole> parse_role(std::string_view text);
std::string_view to_string(StudyType type);
std::optional<StudyType> parse_study_type(std::string_view text);

struct Column {
  std::string name;
  ColumnRole role = ColumnRole::BaselineCovariate;
  ColumnType type = ColumnType::Real;
  bool cluster_level = false;
  std::vector<double> values;       // numeric storage; unused for Label columns
  std::vector<uint8_t> missing;     // 1 where the cell is absent ("NA")
  std::vector<std::string> labels;  // Label columns only
  // One-hot provenance: the categorical column this indicator came from.
  std::string expanded_from;
  std::string reference_level;

  size_t size() const { return type == ColumnType::Label ? labels.size() : values.size(); }
  bool is_missing(size_t row) const { return !missing.empty() && missing[row] != 0; }
  bool is_binary_role() const {
    return role == ColumnRole::Treatment || role == ColumnRole::Censoring ||
           role == ColumnRole::Measurement;
  }

  static Column numeric(std::string name, ColumnRole role, std::vector<double> values,
                        ColumnType type = ColumnType::Real);
  static Column label(std::string name, ColumnRole role, std::vector<std::string> labels);
};

/// Role mapping supplied by the study config; the CSV itself carries no roles.
struct Schema {
  std::vector<std::pair<std::string, ColumnRole>> roles;  // in declaration order
  std::vector<std::string> categorical;
  std::vector<std::string> cluster_level;

  std::optional<ColumnRole> role_of(std::string_view column) const;
};

/// Units (clusters or subjects) in order of first appearance in the rows.
struct GroupIndex {
  std::vector<std::string> labels;
  std::vector<size_t> group_of_row;
  std::vector<std::vector<size_t>> rows;

  size_t size() const { return labels.size(); }
};

/// Immutable columnar table. Safe to share read-only across threads.
class Dataset {
 public:
  explicit Dataset(std::vector<Column> columns);

  size_t rows() const { return rows_; }
  size_t num_columns() const { return columns_.size(); }
  std::span<const Column> columns() const { return columns_; }

  bool has(std::string_view name) const;
  const Column& column(std::string_view name) const;
  std::vector<const Column*> with_role(ColumnRole role) const;
  const Column* first_with_role(ColumnRole role) const;

  const std::optional<GroupIndex>& clusters() const { return clusters_; }
  const std::optional<GroupIndex>& subjects() const { return subjects_; }

  /// New dataset made of the given rows, in the given order.
  Dataset take_rows(std::span<const size_t> rows) const;

 private:
  std::vector<Column> columns_;
  size_t rows_ = 0;
  std::optional<GroupIndex> clusters_;
  std::optional<GroupIndex> subjects_;
};

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv(const std::filesystem::path& path);
CsvTable parse_csv(std::string_view text);

/// Builds a validated dataset; categorical covariates are one-hot expanded
/// with the lexicographically first level as reference.
Dataset dataset_from_table(const CsvTable& table, const Schema& schema);
Dataset load_dataset(const std::filesystem::path& path, const Schema& schema);
void write_csv(const Dataset& dataset, const std::filesystem::path& path);

struct Finding {
  std::string column;
  std::optional<size_t> row;
  std::string message;
};

/// Diagnostic only: never throws, never mutates.
std::vector<Finding> validate_schema(const Dataset& dataset, StudyType study_type);

enum class ResampleUnit { Row, Cluster, Subject };

/// Indices of the units drawn with replacement (rows, clusters or subjects).
std::vector<size_t> resample_indices(size_t available, size_t n, SeededStream& stream);

/// Draws n units with replacement. Each drawn copy of a cluster/subject gets a
/// distinct label ("<label>#<k>") so duplicates act as separate units.
Dataset resample_rows(const Dataset& dataset, size_t n, ResampleUnit unit, SeededStream stream);

}  // namespace estsel
