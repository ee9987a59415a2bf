#include "estsel/views.hpp"

#include <cmath>
#include <limits>

#include "estsel/errors.hpp"

namespace estsel {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

const Column& require_role(const Dataset& ds, ColumnRole role) {
  const Column* c = ds.first_with_role(role);
  if (c == nullptr) {
    throw Error(ErrorCode::SchemaMismatch,
                "dataset has no column with role '" + std::string(to_string(role)) + "'");
  }
  return *c;
}

std::vector<const Column*> individual_covariates(const Dataset& ds) {
  std::vector<const Column*> out;
  for (const auto& c : ds.columns()) {
    if ((c.role == ColumnRole::BaselineCovariate && !c.cluster_level) ||
        c.role == ColumnRole::TimeVarying) {
      out.push_back(&c);
    }
  }
  return out;
}

}  // namespace

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& x, std::span<const size_t> rows) {
  Eigen::MatrixXd out(rows.size(), x.cols());
  for (size_t i = 0; i < rows.size(); ++i) out.row(i) = x.row(rows[i]);
  return out;
}

Eigen::VectorXd take_rows(const Eigen::VectorXd& x, std::span<const size_t> rows) {
  Eigen::VectorXd out(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) out[i] = x[rows[i]];
  return out;
}

PointData point_data(const Dataset& ds) {
  PointData out;
  const auto& a = require_role(ds, ColumnRole::Treatment);
  const auto& y = require_role(ds, ColumnRole::Outcome);
  const auto covs = individual_covariates(ds);
  const size_t n = ds.rows();
  out.covariates.resize(n, covs.size());
  for (size_t j = 0; j < covs.size(); ++j) {
    out.covariate_names.push_back(covs[j]->name);
    for (size_t r = 0; r < n; ++r) out.covariates(r, j) = covs[j]->values[r];
  }
  out.treatment = Eigen::Map<const Eigen::VectorXd>(a.values.data(), n);
  out.outcome.resize(n);
  for (size_t r = 0; r < n; ++r) {
    if (y.is_missing(r)) {
      throw Error(ErrorCode::DomainViolation,
                  "column '" + y.name + "', row " + std::to_string(r) + ": point-treatment outcome missing");
    }
    out.outcome[r] = y.values[r];
  }
  return out;
}

MissingData missing_data(const Dataset& ds) {
  MissingData out;
  const auto& delta = require_role(ds, ColumnRole::Measurement);
  const auto& y = require_role(ds, ColumnRole::Outcome);
  const auto covs = individual_covariates(ds);
  const size_t n = ds.rows();
  out.covariates.resize(n, covs.size());
  for (size_t j = 0; j < covs.size(); ++j) {
    out.covariate_names.push_back(covs[j]->name);
    for (size_t r = 0; r < n; ++r) out.covariates(r, j) = covs[j]->values[r];
  }
  out.measured = Eigen::Map<const Eigen::VectorXd>(delta.values.data(), n);
  out.outcome.resize(n);
  for (size_t r = 0; r < n; ++r) out.outcome[r] = y.is_missing(r) ? kNaN : y.values[r];
  return out;
}

bool LongitudinalData::reached(size_t subject, size_t t) const {
  if (t > horizon) return false;
  if (std::isnan(treatment(subject, t))) return false;
  for (size_t s = 0; s < t; ++s) {
    if (censoring(subject, s) != 0.0) return false;
  }
  return true;
}

LongitudinalData LongitudinalData::subset(std::span<const size_t> subjects) const {
  LongitudinalData out = *this;
  out.subject_ids.clear();
  for (size_t k = 0; k < subjects.size(); ++k) {
    out.subject_ids.push_back(subject_ids[subjects[k]] + "#" + std::to_string(k));
  }
  out.baseline = take_rows(baseline, subjects);
  for (size_t t = 0; t < time_varying.size(); ++t) out.time_varying[t] = take_rows(time_varying[t], subjects);
  out.treatment = take_rows(treatment, subjects);
  out.censoring = take_rows(censoring, subjects);
  out.outcome = take_rows(outcome, subjects);
  return out;
}

LongitudinalData to_wide(const Dataset& ds) {
  LongitudinalData out;
  const auto& a = require_role(ds, ColumnRole::Treatment);
  const auto& y = require_role(ds, ColumnRole::Outcome);
  const Column* c = ds.first_with_role(ColumnRole::Censoring);
  const Column* time = ds.first_with_role(ColumnRole::TimeIndex);
  out.treatment_name = a.name;
  out.outcome_name = y.name;
  out.has_censoring = c != nullptr;
  if (c) out.censoring_name = c->name;
  if (time) out.time_name = time->name;

  std::vector<const Column*> baseline;
  std::vector<const Column*> varying;
  for (const auto& col : ds.columns()) {
    if (col.role == ColumnRole::BaselineCovariate) baseline.push_back(&col);
    if (col.role == ColumnRole::TimeVarying) varying.push_back(&col);
  }
  for (const auto* b : baseline) out.baseline_names.push_back(b->name);
  for (const auto* v : varying) out.time_varying_names.push_back(v->name);

  // Rows of each subject; point-treatment data has one row per subject.
  std::vector<std::vector<size_t>> subject_rows;
  if (ds.subjects()) {
    subject_rows = ds.subjects()->rows;
    out.subject_ids = ds.subjects()->labels;
    out.subject_name = ds.first_with_role(ColumnRole::SubjectId)->name;
  } else {
    for (size_t r = 0; r < ds.rows(); ++r) {
      subject_rows.push_back({r});
      out.subject_ids.push_back(std::to_string(r));
    }
  }
  if (time == nullptr) {
    for (const auto& rows : subject_rows) {
      if (rows.size() != 1) {
        throw Error(ErrorCode::SchemaMismatch, "repeated subject rows require a time index column");
      }
    }
  }

  size_t horizon = 0;
  if (time) {
    for (double t : time->values) horizon = std::max(horizon, static_cast<size_t>(t));
  }
  out.horizon = horizon;
  const size_t n = subject_rows.size();
  out.baseline.resize(n, baseline.size());
  out.time_varying.assign(horizon + 1, Eigen::MatrixXd::Constant(n, varying.size(), kNaN));
  out.treatment = Eigen::MatrixXd::Constant(n, horizon + 1, kNaN);
  out.censoring = Eigen::MatrixXd::Constant(n, horizon + 1, kNaN);
  out.outcome = Eigen::VectorXd::Constant(n, kNaN);

  for (size_t i = 0; i < n; ++i) {
    const auto& rows = subject_rows[i];
    for (size_t j = 0; j < baseline.size(); ++j) out.baseline(i, j) = baseline[j]->values[rows.front()];
    for (size_t k = 0; k < rows.size(); ++k) {
      const size_t r = rows[k];
      const size_t t = time ? static_cast<size_t>(time->values[r]) : 0;
      if (t != k) {
        throw Error(ErrorCode::DomainViolation, "subject '" + out.subject_ids[i] +
                                                    "': time index not consecutive from 0 at row " +
                                                    std::to_string(r));
      }
      for (size_t j = 0; j < varying.size(); ++j) out.time_varying[t](i, j) = varying[j]->values[r];
      out.treatment(i, t) = a.values[r];
      const double censored = c ? c->values[r] : 0.0;
      out.censoring(i, t) = censored;
      if (censored == 1.0 && k + 1 != rows.size()) {
        throw Error(ErrorCode::NonMonotoneCensoring,
                    "subject '" + out.subject_ids[i] + "' has records after censoring at time " +
                        std::to_string(t));
      }
    }
    const size_t last = rows.back();
    const size_t t_last = rows.size() - 1;
    const bool censored = out.censoring(i, t_last) == 1.0;
    if (!censored) {
      if (t_last != horizon) {
        throw Error(ErrorCode::NonMonotoneCensoring,
                    "subject '" + out.subject_ids[i] + "' leaves follow-up before the horizon without censoring");
      }
      if (y.is_missing(last)) {
        throw Error(ErrorCode::DomainViolation,
                    "subject '" + out.subject_ids[i] + "' is uncensored but lacks an outcome");
      }
      out.outcome[i] = y.values[last];
    }
  }
  return out;
}

Dataset to_long(const LongitudinalData& data) {
  std::vector<std::string> ids;
  std::vector<double> times;
  std::vector<std::vector<double>> base(data.baseline_names.size());
  std::vector<std::vector<double>> varying(data.time_varying_names.size());
  std::vector<double> a, c, y;
  for (size_t i = 0; i < data.size(); ++i) {
    for (size_t t = 0; t <= data.horizon; ++t) {
      if (!data.reached(i, t)) break;
      ids.push_back(data.subject_ids[i]);
      times.push_back(static_cast<double>(t));
      for (size_t j = 0; j < base.size(); ++j) base[j].push_back(data.baseline(i, j));
      for (size_t j = 0; j < varying.size(); ++j) varying[j].push_back(data.time_varying[t](i, j));
      a.push_back(data.treatment(i, t));
      c.push_back(data.censoring(i, t));
      const bool terminal = t == data.horizon || data.censoring(i, t) == 1.0;
      y.push_back(terminal ? data.outcome[i] : kNaN);
    }
  }
  std::vector<Column> cols;
  cols.push_back(Column::label(data.subject_name, ColumnRole::SubjectId, std::move(ids)));
  cols.push_back(Column::numeric(data.time_name, ColumnRole::TimeIndex, std::move(times)));
  for (size_t j = 0; j < base.size(); ++j) {
    cols.push_back(Column::numeric(data.baseline_names[j], ColumnRole::BaselineCovariate, std::move(base[j])));
  }
  for (size_t j = 0; j < varying.size(); ++j) {
    cols.push_back(Column::numeric(data.time_varying_names[j], ColumnRole::TimeVarying, std::move(varying[j])));
  }
  cols.push_back(Column::numeric(data.treatment_name, ColumnRole::Treatment, std::move(a), ColumnType::Binary));
  if (data.has_censoring) {
    cols.push_back(Column::numeric(data.censoring_name, ColumnRole::Censoring, std::move(c), ColumnType::Binary));
  }
  cols.push_back(Column::numeric(data.outcome_name, ColumnRole::Outcome, std::move(y)));
  return Dataset(std::move(cols));
}

ClusterStudyData cluster_study(const Dataset& ds) {
  if (!ds.clusters()) throw Error(ErrorCode::SchemaMismatch, "dataset has no cluster id column");
  const auto& groups = *ds.clusters();
  const auto& a = require_role(ds, ColumnRole::Treatment);
  std::vector<const Column*> cluster_covs;
  for (const auto& c : ds.columns()) {
    if (c.role == ColumnRole::BaselineCovariate && c.cluster_level) cluster_covs.push_back(&c);
  }
  const MissingData all = missing_data(ds);

  ClusterStudyData out;
  out.ids = groups.labels;
  out.cluster_name = ds.first_with_role(ColumnRole::ClusterId)->name;
  out.treatment_name = a.name;
  out.measurement_name = require_role(ds, ColumnRole::Measurement).name;
  out.outcome_name = require_role(ds, ColumnRole::Outcome).name;
  for (const auto* c : individual_covariates(ds)) out.covariate_time_varying.push_back(c->role == ColumnRole::TimeVarying);
  for (const auto* c : cluster_covs) out.cluster_covariate_names.push_back(c->name);
  const size_t n_clusters = groups.size();
  out.cluster_covariates.resize(n_clusters, cluster_covs.size());
  out.treatment.resize(n_clusters);
  for (size_t g = 0; g < n_clusters; ++g) {
    const auto& rows = groups.rows[g];
    for (size_t j = 0; j < cluster_covs.size(); ++j) {
      out.cluster_covariates(g, j) = cluster_covs[j]->values[rows.front()];
    }
    out.treatment[g] = a.values[rows.front()];
    MissingData part;
    part.covariate_names = all.covariate_names;
    part.covariates = take_rows(all.covariates, rows);
    part.measured = take_rows(all.measured, rows);
    part.outcome = take_rows(all.outcome, rows);
    out.underlying_outcome.push_back(part.outcome);
    out.individuals.push_back(std::move(part));
  }
  return out;
}

Dataset to_long(const ClusterStudyData& data) {
  const size_t p = data.cluster_covariate_names.size();
  const size_t q = data.individuals.empty() ? 0 : data.individuals.front().covariate_names.size();
  std::vector<std::string> ids;
  std::vector<std::vector<double>> cluster_cols(p), indiv_cols(q);
  std::vector<double> a, delta, y;
  for (size_t c = 0; c < data.size(); ++c) {
    const auto& part = data.individuals[c];
    const auto r = static_cast<Eigen::Index>(c);
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(part.size()); ++i) {
      ids.push_back(data.ids[c]);
      for (size_t j = 0; j < p; ++j) cluster_cols[j].push_back(data.cluster_covariates(r, static_cast<Eigen::Index>(j)));
      for (size_t j = 0; j < q; ++j) indiv_cols[j].push_back(part.covariates(i, static_cast<Eigen::Index>(j)));
      a.push_back(data.treatment[r]);
      delta.push_back(part.measured[i]);
      y.push_back(part.measured[i] == 1.0 ? part.outcome[i] : kNaN);
    }
  }
  std::vector<Column> cols;
  cols.push_back(Column::label(data.cluster_name, ColumnRole::ClusterId, std::move(ids)));
  for (size_t j = 0; j < p; ++j) {
    Column col = Column::numeric(data.cluster_covariate_names[j], ColumnRole::BaselineCovariate, std::move(cluster_cols[j]));
    col.cluster_level = true;
    cols.push_back(std::move(col));
  }
  for (size_t j = 0; j < q; ++j) {
    const bool varying = j < data.covariate_time_varying.size() && data.covariate_time_varying[j];
    cols.push_back(Column::numeric(data.individuals.front().covariate_names[j],
                                   varying ? ColumnRole::TimeVarying : ColumnRole::BaselineCovariate,
                                   std::move(indiv_cols[j])));
  }
  Column treatment = Column::numeric(data.treatment_name, ColumnRole::Treatment, std::move(a), ColumnType::Binary);
  treatment.cluster_level = true;
  cols.push_back(std::move(treatment));
  cols.push_back(Column::numeric(data.measurement_name, ColumnRole::Measurement, std::move(delta), ColumnType::Binary));
  cols.push_back(Column::numeric(data.outcome_name, ColumnRole::Outcome, std::move(y)));
  return Dataset(std::move(cols));
}

}  // namespace estsel
