#pragma once

#include "estsel/dataset.hpp"
#include "estsel/views.hpp"

namespace estsel {

// Synthetic studies used by the examples, benchmarks and tests. They carry no
// real information; they only have the right shape.

struct DemoPanelOptions {
  size_t subjects = 500;
  size_t horizon = 3;         // periods - 1
  size_t time_varying = 3;    // L columns per period
  bool censoring = true;
  double treatment_effect = 0.6;  // log-odds per treated period, on Y
};

/// Baseline W1 (binary), W2 (normal); binary L1..Lq; treatment, censoring, binary Y.
LongitudinalData demo_panel(const DemoPanelOptions& options, SeededStream stream);

struct DemoTrialOptions {
  size_t clusters = 28;
  size_t per_cluster = 60;
  double measured = 1.0;  // share of individuals with an observed outcome
};

/// Pair-matched arms (pair = cluster / 2), cluster covariates E1, E2, individual W and M.
ClusterStudyData demo_trial(const DemoTrialOptions& options, SeededStream stream);

/// Schema that reproduces the roles of a dataset when its CSV is read back.
Schema schema_of(const Dataset& dataset);

}  // namespace estsel
