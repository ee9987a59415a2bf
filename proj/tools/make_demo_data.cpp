// Writes the synthetic example studies under <root>/data and <root>/configs.

#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "estsel/demo.hpp"
#include "estsel/harness.hpp"

using namespace estsel;
namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

ojson dataset_json(const std::string& path, const Schema& s) {
  ojson roles = ojson::array();
  for (const auto& [name, role] : s.roles) roles.push_back({{"column", name}, {"role", std::string(to_string(role))}});
  return {{"path", path}, {"roles", roles}, {"cluster_level", s.cluster_level}};
}

ojson glm() { return {{"method", "parametric"}, {"learner", {{"kind", "glm_main_terms"}}}}; }

ojson super_learner() {
  return {{"method", "super_learner"},
          {"library",
           {{{"kind", "intercept_only"}},
            {{"kind", "glm_main_terms"}},
            {{"kind", "glm_ridge"}, {"lambda", 1.0}},
            {{"kind", "glm_ridge_interactions"}, {"lambda", 1.0}}}},
          {"ensemble", "discrete"}};
}

void write(const fs::path& p, const ojson& j) {
  std::ofstream(p) << j.dump(2) << "\n";
  std::cout << "wrote " << p.string() << "\n";
}

ojson single_stage_candidates(const std::string& type, bool bootstrap) {
  ojson out = ojson::array();
  const std::vector<std::pair<std::string, ojson>> nuisances = {
      {"glm", {{"outcome", glm()}, {"propensity", glm()}}},
      {"sl", {{"outcome", super_learner()}, {"propensity", super_learner()}}},
      {"sl_screen", {{"outcome", super_learner()}, {"propensity", super_learner()}, {"screening", true}}}};
  for (const auto& [name, nuisance] : nuisances) {
    out.push_back({{"id", name + "_ic"},
                   {"type", type},
                   {"attributes", {{"nuisance", name}, {"variance_method", "ic"}}},
                   {"nuisance", nuisance}});
    if (bootstrap) {
      out.push_back({{"id", name + "_boot"},
                     {"type", type},
                     {"attributes", {{"nuisance", name}, {"variance_method", "bootstrap"}}},
                     {"nuisance", nuisance},
                     {"variance", "bootstrap"},
                     {"bootstrap_replicates", 200}});
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Write the synthetic example studies"};
  std::string root = ".";
  uint64_t seed = 2024;
  app.add_option("--root", root, "directory that receives data/ and configs/");
  app.add_option("--seed", seed, "seed of the synthetic data");
  CLI11_PARSE(app, argc, argv);

  const fs::path data = fs::path(root) / "data";
  const fs::path configs = fs::path(root) / "configs";
  fs::create_directories(data);
  fs::create_directories(configs);

  // Longitudinal: 4 periods, 3 time-varying covariates, censoring.
  {
    DemoPanelOptions o;
    const Dataset ds = to_long(demo_panel(o, SeededStream(seed, 1)));
    write_csv(ds, data / "longitudinal.csv");
    write(configs / "longitudinal.json",
          {{"name", "Longitudinal example: always vs never treated"},
           {"study_type", "longitudinal"},
           {"dataset", dataset_json("../data/longitudinal.csv", schema_of(ds))},
           {"generator", {{"kind", "outcome_blind"}}},
           {"estimand", {{"scale", "difference"}, {"regimen1", {1, 1, 1, 1}}, {"regimen0", {0, 0, 0, 0}}}},
           {"candidates", single_stage_candidates("ltmle", true)},
           {"iterations", 200},
           {"seed", 1},
           {"workers", 0},
           {"truth_replicates", 100000},
           {"selection", "observational"},
           {"output_dir", "../out/longitudinal"}});
  }

  // One time point, no censoring.
  {
    DemoPanelOptions o;
    o.subjects = 400;
    o.horizon = 0;
    o.time_varying = 1;
    o.censoring = false;
    const Dataset ds = to_long(demo_panel(o, SeededStream(seed, 2)));
    write_csv(ds, data / "point.csv");
    write(configs / "point.json",
          {{"name", "Point-treatment example"},
           {"study_type", "longitudinal"},
           {"dataset", dataset_json("../data/point.csv", schema_of(ds))},
           {"generator", {{"kind", "outcome_blind"}}},
           {"estimand", {{"scale", "difference"}, {"regimen1", {1}}, {"regimen0", {0}}}},
           {"candidates", single_stage_candidates("tmle_ate", false)},
           {"iterations", 500},
           {"seed", 1},
           {"workers", 0},
           {"truth_replicates", 100000},
           {"selection", "observational"},
           {"output_dir", "../out/point"}});
  }

  // Pair-matched cluster trial with 28 clusters.
  {
    DemoTrialOptions o;
    const Dataset ds = to_long(demo_trial(o, SeededStream(seed, 3)));
    write_csv(ds, data / "trial.csv");
    write(configs / "mechanism.json",
          {{"intercept", 1.0}, {"coefficients", {{"W", -0.6}, {"M", 0.4}, {"E1", -0.3}}}});
    ojson candidates = ojson::array();
    const std::vector<std::pair<std::string, ojson>> stage1 = {
        {"empirical", {{"stage1", "empirical_mean"}}},
        {"tmle", {{"stage1", "tmle_parametric"}}},
        {"tmle_sl", {{"stage1", "tmle_super_learner"}}}};
    const std::vector<std::pair<std::string, ojson>> effect = {
        {"unadj_ic", {{"variance", "ic"}}},
        {"aps_cvic", {{"aps", {{"type", "limited"}, {"shortlist", {"E1", "E2"}}}}, {"variance", "cv_ic"}}}};
    for (const auto& [s1, s1j] : stage1) {
      for (const auto& [s2, s2j] : effect) {
        ojson c = {{"id", s1 + "+" + s2}, {"type", "two_stage"}, {"attributes", {{"stage1", s1}, {"effect", s2}}}};
        c.update(s1j);
        c.update(s2j);
        candidates.push_back(c);
      }
    }
    write(configs / "trial.json",
          {{"name", "Cluster trial example: two-stage TMLE"},
           {"study_type", "cluster_two_stage"},
           {"dataset", dataset_json("../data/trial.csv", schema_of(ds))},
           {"generator", {{"kind", "treatment_blind"}, {"mechanism", "mechanism.json"}}},
           {"estimand", {{"scale", "ratio"}}},
           {"candidates", candidates},
           {"iterations", 1000},
           {"seed", 1},
           {"workers", 0},
           {"selection", "trial"},
           {"output_dir", "../out/trial"}});
  }
  return 0;
}
