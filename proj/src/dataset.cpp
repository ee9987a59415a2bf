#include "estsel/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

#include "estsel/errors.hpp"
#include "estsel/format.hpp"

namespace estsel {

namespace {

constexpr std::string_view kMissingToken = "NA";

struct RoleName {
  ColumnRole role;
  std::string_view name;
};

constexpr RoleName kRoleNames[] = {
    {ColumnRole::BaselineCovariate, "baseline"}, {ColumnRole::Treatment, "treatment"},
    {ColumnRole::Censoring, "censoring"},        {ColumnRole::Measurement, "measurement"},
    {ColumnRole::TimeVarying, "time_varying"},   {ColumnRole::Outcome, "outcome"},
    {ColumnRole::ClusterId, "cluster_id"},       {ColumnRole::TimeIndex, "time_index"},
    {ColumnRole::SubjectId, "subject_id"},
};

std::optional<double> parse_number(std::string_view token) {
  double value = 0;
  const auto* begin = token.data();
  const auto* end = token.data() + token.size();
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end) return std::nullopt;
  return value;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> fields;
  std::string current;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        current.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        current.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back(trim(current));
      current.clear();
    } else {
      current.push_back(c);
    }
  }
  fields.emplace_back(trim(current));
  return fields;
}

std::optional<GroupIndex> build_groups(const Column* column) {
  if (column == nullptr) return std::nullopt;
  GroupIndex index;
  std::unordered_map<std::string, size_t> seen;
  index.group_of_row.resize(column->labels.size());
  for (size_t r = 0; r < column->labels.size(); ++r) {
    const auto& label = column->labels[r];
    auto [it, inserted] = seen.try_emplace(label, index.labels.size());
    if (inserted) {
      index.labels.push_back(label);
      index.rows.emplace_back();
    }
    index.group_of_row[r] = it->second;
    index.rows[it->second].push_back(r);
  }
  return index;
}

std::string row_tag(size_t row) { return "row " + std::to_string(row); }

bool is_zero_one(double v) { return v == 0.0 || v == 1.0; }

}  // namespace

std::string_view to_string(ColumnRole role) {
  for (const auto& rn : kRoleNames) {
    if (rn.role == role) return rn.name;
  }
  return "unknown";
}

std::optional<ColumnRole> parse_role(std::string_view text) {
  for (const auto& rn : kRoleNames) {
    if (rn.name == text) return rn.role;
  }
  if (text == "cluster_baseline") return ColumnRole::BaselineCovariate;
  return std::nullopt;
}

std::string_view to_string(StudyType type) {
  switch (type) {
    case StudyType::PointTreatment: return "point_treatment";
    case StudyType::Longitudinal: return "longitudinal";
    case StudyType::ClusterTwoStage: return "cluster_two_stage";
  }
  return "unknown";
}

std::optional<StudyType> parse_study_type(std::string_view text) {
  if (text == "point_treatment") return StudyType::PointTreatment;
  if (text == "longitudinal") return StudyType::Longitudinal;
  if (text == "cluster_two_stage") return StudyType::ClusterTwoStage;
  return std::nullopt;
}

Column Column::numeric(std::string name, ColumnRole role, std::vector<double> values,
                       ColumnType type) {
  Column c;
  c.name = std::move(name);
  c.role = role;
  c.type = type;
  c.values = std::move(values);
  c.missing.assign(c.values.size(), 0);
  for (size_t i = 0; i < c.values.size(); ++i) {
    if (std::isnan(c.values[i])) c.missing[i] = 1;
  }
  return c;
}

Column Column::label(std::string name, ColumnRole role, std::vector<std::string> labels) {
  Column c;
  c.name = std::move(name);
  c.role = role;
  c.type = ColumnType::Label;
  c.labels = std::move(labels);
  return c;
}

std::optional<ColumnRole> Schema::role_of(std::string_view column) const {
  for (const auto& [name, role] : roles) {
    if (name == column) return role;
  }
  return std::nullopt;
}

Dataset::Dataset(std::vector<Column> columns) : columns_(std::move(columns)) {
  if (columns_.empty()) throw Error(ErrorCode::EmptyDataset, "dataset has no columns");
  rows_ = columns_.front().size();
  std::set<std::string> names;
  for (auto& c : columns_) {
    if (!names.insert(c.name).second) {
      throw Error(ErrorCode::SchemaMismatch, "duplicate column '" + c.name + "'");
    }
    if (c.size() != rows_) {
      throw Error(ErrorCode::DimensionMismatch, "column '" + c.name + "' has " +
                                                    std::to_string(c.size()) + " rows, expected " +
                                                    std::to_string(rows_));
    }
    if (c.type != ColumnType::Label && c.missing.size() != rows_) c.missing.assign(rows_, 0);
  }
  if (rows_ == 0) throw Error(ErrorCode::EmptyDataset, "dataset has no rows");
  clusters_ = build_groups(first_with_role(ColumnRole::ClusterId));
  subjects_ = build_groups(first_with_role(ColumnRole::SubjectId));
}

bool Dataset::has(std::string_view name) const {
  return std::any_of(columns_.begin(), columns_.end(),
                     [&](const Column& c) { return c.name == name; });
}

const Column& Dataset::column(std::string_view name) const {
  for (const auto& c : columns_) {
    if (c.name == name) return c;
  }
  throw Error(ErrorCode::SchemaMismatch, "column '" + std::string(name) + "' not found");
}

std::vector<const Column*> Dataset::with_role(ColumnRole role) const {
  std::vector<const Column*> out;
  for (const auto& c : columns_) {
    if (c.role == role) out.push_back(&c);
  }
  return out;
}

const Column* Dataset::first_with_role(ColumnRole role) const {
  for (const auto& c : columns_) {
    if (c.role == role) return &c;
  }
  return nullptr;
}

Dataset Dataset::take_rows(std::span<const size_t> rows) const {
  std::vector<Column> out;
  out.reserve(columns_.size());
  for (const auto& c : columns_) {
    Column n = c;
    if (c.type == ColumnType::Label) {
      n.labels.clear();
      n.labels.reserve(rows.size());
      for (size_t r : rows) n.labels.push_back(c.labels.at(r));
    } else {
      n.values.clear();
      n.missing.clear();
      n.values.reserve(rows.size());
      n.missing.reserve(rows.size());
      for (size_t r : rows) {
        n.values.push_back(c.values.at(r));
        n.missing.push_back(c.missing.at(r));
      }
    }
    out.push_back(std::move(n));
  }
  return Dataset(std::move(out));
}

CsvTable parse_csv(std::string_view text) {
  CsvTable table;
  size_t pos = 0;
  bool first = true;
  while (pos <= text.size()) {
    size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    if (trim(line).empty()) {
      if (end >= text.size()) break;
      continue;
    }
    auto fields = split_csv_line(line);
    if (first) {
      if (!fields.empty() && fields[0].starts_with("\xEF\xBB\xBF")) fields[0].erase(0, 3);
      table.header = std::move(fields);
      first = false;
    } else {
      if (fields.size() != table.header.size()) {
        throw Error(ErrorCode::DimensionMismatch,
                    "CSV " + row_tag(table.rows.size()) + " has " + std::to_string(fields.size()) +
                        " fields, header has " + std::to_string(table.header.size()));
      }
      table.rows.push_back(std::move(fields));
    }
    if (end >= text.size()) break;
  }
  if (table.header.empty()) throw Error(ErrorCode::EmptyDataset, "CSV has no header row");
  return table;
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::FileNotFound, "cannot open '" + path.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_csv(buffer.str());
}

Dataset dataset_from_table(const CsvTable& table, const Schema& schema) {
  if (table.rows.empty()) throw Error(ErrorCode::EmptyDataset, "CSV has no data rows");
  std::map<std::string, size_t> position;
  for (size_t j = 0; j < table.header.size(); ++j) position[table.header[j]] = j;

  const auto declared = [](const std::vector<std::string>& list, const std::string& name) {
    return std::find(list.begin(), list.end(), name) != list.end();
  };

  std::vector<Column> columns;
  for (const auto& [name, role] : schema.roles) {
    auto it = position.find(name);
    if (it == position.end()) {
      throw Error(ErrorCode::SchemaMismatch, "column '" + name + "' named in schema is absent");
    }
    const size_t j = it->second;
    const size_t n = table.rows.size();

    if (role == ColumnRole::ClusterId || role == ColumnRole::SubjectId) {
      std::vector<std::string> labels(n);
      for (size_t r = 0; r < n; ++r) {
        labels[r] = table.rows[r][j];
        if (labels[r].empty() || labels[r] == kMissingToken) {
          throw Error(ErrorCode::DomainViolation,
                      "column '" + name + "', " + row_tag(r) + ": identifier is missing");
        }
      }
      columns.push_back(Column::label(name, role, std::move(labels)));
      continue;
    }

    std::vector<double> values(n, 0.0);
    std::vector<uint8_t> missing(n, 0);
    bool numeric = true;
    for (size_t r = 0; r < n; ++r) {
      const auto& token = table.rows[r][j];
      if (token == kMissingToken || token.empty()) {
        missing[r] = 1;
        continue;
      }
      if (auto v = parse_number(token)) {
        values[r] = *v;
      } else {
        numeric = false;
      }
    }

    const bool covariate =
        role == ColumnRole::BaselineCovariate || role == ColumnRole::TimeVarying;
    const bool categorical = covariate && (declared(schema.categorical, name) || !numeric);
    if (!numeric && !categorical) {
      for (size_t r = 0; r < n; ++r) {
        const auto& token = table.rows[r][j];
        if (token != kMissingToken && !token.empty() && !parse_number(token)) {
          throw Error(ErrorCode::DomainViolation, "column '" + name + "', " + row_tag(r) +
                                                      ": non-numeric value '" + token + "'");
        }
      }
    }
    if (role != ColumnRole::Outcome) {
      for (size_t r = 0; r < n; ++r) {
        if (missing[r]) {
          throw Error(ErrorCode::DomainViolation,
                      "column '" + name + "', " + row_tag(r) + ": missing value in non-outcome column");
        }
      }
    }

    if (categorical) {
      std::set<std::string> levels;
      for (size_t r = 0; r < n; ++r) levels.insert(table.rows[r][j]);
      const std::string reference = *levels.begin();
      for (const auto& level : levels) {
        if (level == reference) continue;
        std::vector<double> indicator(n, 0.0);
        for (size_t r = 0; r < n; ++r) indicator[r] = table.rows[r][j] == level ? 1.0 : 0.0;
        Column c = Column::numeric(name + "=" + level, role, std::move(indicator), ColumnType::Binary);
        c.cluster_level = declared(schema.cluster_level, name);
        c.expanded_from = name;
        c.reference_level = reference;
        columns.push_back(std::move(c));
      }
      continue;
    }

    const bool binary_role = role == ColumnRole::Treatment || role == ColumnRole::Censoring ||
                             role == ColumnRole::Measurement;
    bool all_binary = true;
    for (size_t r = 0; r < n; ++r) {
      if (!missing[r] && !is_zero_one(values[r])) {
        if (binary_role) {
          throw Error(ErrorCode::DomainViolation,
                      "column '" + name + "', " + row_tag(r) + ": value " +
                          format_number(values[r]) + " not in {0,1}");
        }
        all_binary = false;
      }
    }
    Column c;
    c.name = name;
    c.role = role;
    c.type = role == ColumnRole::TimeIndex ? ColumnType::Real
                                           : (all_binary ? ColumnType::Binary : ColumnType::Real);
    c.cluster_level = declared(schema.cluster_level, name);
    c.values = std::move(values);
    c.missing = std::move(missing);
    columns.push_back(std::move(c));
  }

  Dataset dataset(std::move(columns));

  // Outcome presence must agree with measurement and censoring.
  const Column* outcome = dataset.first_with_role(ColumnRole::Outcome);
  const Column* measurement = dataset.first_with_role(ColumnRole::Measurement);
  const Column* censoring = dataset.first_with_role(ColumnRole::Censoring);
  const bool longitudinal = dataset.first_with_role(ColumnRole::TimeIndex) != nullptr;
  const auto& subjects = dataset.subjects();
  if (outcome != nullptr) {
    for (size_t r = 0; r < dataset.rows(); ++r) {
      const bool unmeasured = measurement != nullptr && measurement->values[r] == 0.0;
      const bool censored = censoring != nullptr && censoring->values[r] == 1.0;
      if (!outcome->is_missing(r) && (unmeasured || censored)) {
        throw Error(ErrorCode::DomainViolation,
                    "column '" + outcome->name + "', " + row_tag(r) + ": outcome present despite " +
                        (unmeasured ? "measurement = 0" : "censoring = 1"));
      }
      if (outcome->is_missing(r) && !unmeasured && !censored) {
        bool interim = false;
        if (longitudinal && subjects) {
          const auto& members = subjects->rows[subjects->group_of_row[r]];
          interim = members.back() != r;
        }
        if (!interim) {
          throw Error(ErrorCode::DomainViolation,
                      "column '" + outcome->name + "', " + row_tag(r) +
                          ": outcome missing without measurement = 0 or censoring = 1");
        }
      }
    }
  }
  return dataset;
}

Dataset load_dataset(const std::filesystem::path& path, const Schema& schema) {
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorCode::FileNotFound, "dataset '" + path.string() + "' does not exist");
  }
  return dataset_from_table(read_csv(path), schema);
}

void write_csv(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::FileNotFound, "cannot write '" + path.string() + "'");
  const auto cols = dataset.columns();
  for (size_t j = 0; j < cols.size(); ++j) out << (j ? "," : "") << cols[j].name;
  out << '\n';
  for (size_t r = 0; r < dataset.rows(); ++r) {
    for (size_t j = 0; j < cols.size(); ++j) {
      if (j) out << ',';
      const auto& c = cols[j];
      if (c.type == ColumnType::Label) {
        out << c.labels[r];
      } else if (c.is_missing(r)) {
        out << kMissingToken;
      } else {
        out << format_number(c.values[r]);
      }
    }
    out << '\n';
  }
}

std::vector<Finding> validate_schema(const Dataset& ds, StudyType study_type) {
  std::vector<Finding> findings;
  const auto count = [&](ColumnRole role) { return ds.with_role(role).size(); };

  for (const auto& c : ds.columns()) {
    if (!c.is_binary_role()) continue;
    for (size_t r = 0; r < ds.rows(); ++r) {
      if (!c.is_missing(r) && !is_zero_one(c.values[r])) {
        findings.push_back({c.name, r, "value not in {0,1}"});
        break;
      }
    }
  }

  const Column* outcome = ds.first_with_role(ColumnRole::Outcome);
  const Column* treatment = ds.first_with_role(ColumnRole::Treatment);
  if (count(ColumnRole::Outcome) != 1) {
    findings.push_back({"", std::nullopt, "expected exactly one outcome column"});
  }
  if (count(ColumnRole::Treatment) != 1) {
    findings.push_back({"", std::nullopt, "expected exactly one treatment column"});
  }

  const bool has_time = count(ColumnRole::TimeIndex) > 0;
  const bool has_cluster = count(ColumnRole::ClusterId) > 0;

  switch (study_type) {
    case StudyType::PointTreatment: {
      if (has_time) findings.push_back({"", std::nullopt, "time index present in point-treatment data"});
      if (has_cluster) findings.push_back({"", std::nullopt, "cluster id present in point-treatment data"});
      break;
    }
    case StudyType::Longitudinal: {
      if (!ds.subjects()) findings.push_back({"", std::nullopt, "longitudinal data lacks a subject id column"});
      if (!has_time) findings.push_back({"", std::nullopt, "longitudinal data lacks a time index column"});
      if (has_cluster) findings.push_back({"", std::nullopt, "cluster id present in longitudinal data"});
      if (!ds.subjects() || !has_time) break;
      const Column& time = *ds.first_with_role(ColumnRole::TimeIndex);
      const Column* censoring = ds.first_with_role(ColumnRole::Censoring);
      double horizon = 0;
      for (double t : time.values) horizon = std::max(horizon, t);
      for (size_t s = 0; s < ds.subjects()->size(); ++s) {
        const auto& rows = ds.subjects()->rows[s];
        for (size_t k = 0; k < rows.size(); ++k) {
          const size_t r = rows[k];
          if (time.values[r] != static_cast<double>(k)) {
            findings.push_back({time.name, r, "time index not consecutive from 0 within subject"});
            break;
          }
          if (censoring && censoring->values[r] == 1.0 && k + 1 != rows.size()) {
            findings.push_back({censoring->name, r, "record after censoring (non-monotone censoring)"});
            break;
          }
        }
        const size_t last = rows.back();
        const bool censored = censoring && censoring->values[last] == 1.0;
        if (!censored && time.values[last] != horizon) {
          findings.push_back({time.name, last, "follow-up ends before horizon without censoring"});
        }
        if (outcome) {
          for (size_t k = 0; k + 1 < rows.size(); ++k) {
            if (!outcome->is_missing(rows[k])) {
              findings.push_back({outcome->name, rows[k], "outcome recorded before final time"});
              break;
            }
          }
          if (!censored && outcome->is_missing(last)) {
            findings.push_back({outcome->name, last, "uncensored subject lacks outcome"});
          }
        }
      }
      break;
    }
    case StudyType::ClusterTwoStage: {
      if (!ds.clusters()) {
        findings.push_back({"", std::nullopt, "cluster data lacks a cluster id column"});
        break;
      }
      if (has_time) findings.push_back({"", std::nullopt, "time index present in cluster data"});
      const Column* measurement = ds.first_with_role(ColumnRole::Measurement);
      if (!measurement) findings.push_back({"", std::nullopt, "cluster data lacks a measurement indicator"});
      const auto& groups = *ds.clusters();
      for (size_t g = 0; g < groups.size(); ++g) {
        const auto& rows = groups.rows[g];
        if (treatment) {
          for (size_t r : rows) {
            if (treatment->values[r] != treatment->values[rows.front()]) {
              findings.push_back({treatment->name, r, "treatment varies within cluster " + groups.labels[g]});
              break;
            }
          }
        }
        for (const auto& c : ds.columns()) {
          if (!c.cluster_level) continue;
          for (size_t r : rows) {
            if (c.values[r] != c.values[rows.front()]) {
              findings.push_back({c.name, r, "cluster-level covariate varies within cluster " + groups.labels[g]});
              break;
            }
          }
        }
        if (measurement && outcome) {
          for (size_t r : rows) {
            if (measurement->values[r] == 1.0 && outcome->is_missing(r)) {
              findings.push_back({outcome->name, r, "measured outcome is missing"});
              break;
            }
          }
        }
      }
      break;
    }
  }
  return findings;
}

std::vector<size_t> resample_indices(size_t available, size_t n, SeededStream& stream) {
  if (available == 0) throw Error(ErrorCode::EmptyDataset, "cannot resample from zero units");
  std::vector<size_t> out(n);
  for (auto& i : out) i = static_cast<size_t>(stream.below(available));
  return out;
}

Dataset resample_rows(const Dataset& dataset, size_t n, ResampleUnit unit, SeededStream stream) {
  if (n == 0) throw Error(ErrorCode::EmptyDataset, "resample size must be at least 1");
  const GroupIndex* groups = nullptr;
  ColumnRole id_role = ColumnRole::SubjectId;
  if (unit == ResampleUnit::Cluster) {
    if (!dataset.clusters()) throw Error(ErrorCode::SchemaMismatch, "cluster resampling needs a cluster id column");
    groups = &*dataset.clusters();
    id_role = ColumnRole::ClusterId;
  } else if (unit == ResampleUnit::Subject) {
    if (!dataset.subjects()) throw Error(ErrorCode::SchemaMismatch, "subject resampling needs a subject id column");
    groups = &*dataset.subjects();
  }

  const size_t available = groups ? groups->size() : dataset.rows();
  const auto draws = resample_indices(available, n, stream);

  std::vector<size_t> rows;
  std::vector<size_t> copy_of_row;
  for (size_t k = 0; k < draws.size(); ++k) {
    if (groups) {
      for (size_t r : groups->rows[draws[k]]) {
        rows.push_back(r);
        copy_of_row.push_back(k);
      }
    } else {
      rows.push_back(draws[k]);
      copy_of_row.push_back(k);
    }
  }

  std::vector<Column> columns;
  Dataset taken = dataset.take_rows(rows);
  for (const auto& c : taken.columns()) {
    Column copy = c;
    if (c.type == ColumnType::Label && c.role == id_role) {
      for (size_t i = 0; i < copy.labels.size(); ++i) {
        copy.labels[i] += "#" + std::to_string(copy_of_row[i]);
      }
    }
    columns.push_back(std::move(copy));
  }
  return Dataset(std::move(columns));
}

}  // namespace estsel
