#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "estsel/demo.hpp"
#include "estsel/errors.hpp"
#include "estsel/harness.hpp"

using namespace estsel;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("estsel_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

json roles_json(const Schema& s) {
  json roles = json::array();
  for (const auto& [name, role] : s.roles) roles.push_back({{"column", name}, {"role", std::string(to_string(role))}});
  return roles;
}

// One-period study with censoring; written next to its config.
json point_config(const fs::path& dir, bool censoring) {
  DemoPanelOptions o;
  o.subjects = 150;
  o.horizon = 0;
  o.time_varying = 1;
  o.censoring = censoring;
  const Dataset ds = to_long(demo_panel(o, SeededStream(5, 0)));
  write_csv(ds, dir / "point.csv");
  const Schema s = schema_of(ds);
  return json{
      {"name", "point"},
      {"study_type", "longitudinal"},
      {"dataset", {{"path", "point.csv"}, {"roles", roles_json(s)}, {"cluster_level", s.cluster_level}}},
      {"generator", {{"kind", "outcome_blind"}, {"sample_size", 120}}},
      {"estimand", {{"scale", "difference"}, {"regimen1", {1}}, {"regimen0", {0}}}},
      {"candidates",
       {{{"id", "glm"}, {"type", "ltmle"}},
        {{"id", "null_model"},
         {"type", "ltmle"},
         {"nuisance", {{"outcome", {{"method", "parametric"}, {"learner", {{"kind", "intercept_only"}}}}}}}}}},
      {"iterations", 100},
      {"seed", 17},
      {"workers", 1},
      {"truth_replicates", 100000},
      {"selection", "observational"}};
}

json trial_config(const fs::path& dir) {
  DemoTrialOptions o;
  o.clusters = 28;
  o.per_cluster = 25;
  const Dataset ds = to_long(demo_trial(o, SeededStream(6, 0)));
  write_csv(ds, dir / "trial.csv");
  std::ofstream(dir / "mechanism.json") << R"({"intercept": 0.8, "coefficients": {"W": -0.5, "M": 0.3}})";
  const Schema s = schema_of(ds);
  return json{
      {"name", "trial"},
      {"study_type", "cluster_two_stage"},
      {"dataset", {{"path", "trial.csv"}, {"roles", roles_json(s)}, {"cluster_level", s.cluster_level}}},
      {"generator", {{"kind", "treatment_blind"}, {"mechanism", "mechanism.json"}, {"strata", "pair"}}},
      {"estimand", {{"scale", "ratio"}}},
      {"candidates",
       {{{"id", "unadj"}, {"type", "two_stage"}, {"stage1", "tmle_parametric"}},
        {{"id", "aps"},
         {"type", "two_stage"},
         {"stage1", "tmle_parametric"},
         {"aps", {{"type", "limited"}, {"shortlist", {"E1", "E2"}}}},
         {"variance", "cv_ic"}}}},
      {"iterations", 100},
      {"seed", 3},
      {"workers", 1},
      {"selection", "trial"}};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("study config survives a JSON round trip") {
  const fs::path dir = scratch("roundtrip");
  for (const json& j : {point_config(dir, true), trial_config(dir)}) {
    const StudyConfig a = config_from_json(j, dir);
    const auto once = to_json(a);
    const StudyConfig b = config_from_json(json::parse(once.dump()), dir);
    CHECK(to_json(b).dump() == once.dump());
    CHECK(validate_config(a).empty());
  }
}

TEST_CASE("config validation names the problem") {
  const fs::path dir = scratch("validate");
  json j = point_config(dir, false);

  SUBCASE("missing column") {
    j["dataset"]["roles"].push_back({{"column", "W9"}, {"role", "baseline"}});
    const auto problems = validate_config(config_from_json(j, dir));
    REQUIRE(!problems.empty());
    CHECK(problems.front().find("W9") != std::string::npos);
  }
  SUBCASE("duplicate ids") {
    j["candidates"][1]["id"] = "glm";
    const auto problems = validate_config(config_from_json(j, dir));
    REQUIRE(problems.size() == 1);
    CHECK(problems[0].find("duplicate candidate id 'glm'") != std::string::npos);
  }
  SUBCASE("too few iterations") {
    j["iterations"] = 50;
    CHECK(validate_config(config_from_json(j, dir)).size() == 1);
    CHECK_THROWS_AS(run_study(config_from_json(j, dir)), Error);
  }
  SUBCASE("tmle_ate is difference-only") {
    j["estimand"]["scale"] = "ratio";
    j["candidates"][0]["type"] = "tmle_ate";
    CHECK(validate_config(config_from_json(j, dir)).size() == 1);
  }
  SUBCASE("too few truth replicates") {
    j["truth_replicates"] = 1000;
    CHECK(validate_config(config_from_json(j, dir)).size() == 1);
  }
  SUBCASE("unknown enum values are config errors") {
    j["candidates"][0]["variance"] = "jackknife";
    CHECK_THROWS_AS(config_from_json(j, dir), Error);
  }
}

TEST_CASE("worker count does not change any output") {
  const fs::path dir = scratch("workers");
  StudyConfig c = config_from_json(point_config(dir, true), dir);
  const StudyInputs in = prepare_inputs(c);
  c.workers = 1;
  const StudyResults serial = run_study(c, in);
  c.workers = 4;
  const StudyResults parallel = run_study(c, in);
  CHECK(iterations_csv(serial.records) == iterations_csv(parallel.records));
  CHECK(to_json(serial.metrics).dump() == to_json(parallel.metrics).dump());
  CHECK(to_json(serial.selection).dump() == to_json(parallel.selection).dump());
  CHECK(serial.records.size() == 200);
  CHECK(serial.records.front().estimator_id == "glm");
  CHECK(serial.records[100].estimator_id == "null_model");
}

TEST_CASE("a candidate that always fails is reported, not fatal") {
  const fs::path dir = scratch("failing");
  json j = point_config(dir, true);
  // tmle_ate cannot use censored outcomes.
  j["candidates"].push_back({{"id", "broken"}, {"type", "tmle_ate"}});
  const StudyResults r = run_study(config_from_json(j, dir));
  const auto* m = r.metrics.find("broken");
  REQUIRE(m != nullptr);
  CHECK(m->failures == 100);
  CHECK_FALSE(m->available);
  CHECK(r.selection.winner != "broken");
  CHECK(r.metrics.find("glm")->failures == 0);
}

TEST_CASE("persisted results reload and re-aggregate identically") {
  const fs::path dir = scratch("persist");
  const StudyResults r = run_study(config_from_json(point_config(dir, false), dir));
  persist_results(r, dir / "out");
  for (const char* f : {"iterations.csv", "metrics.json", "selection.json", "report.md", "manifest.json"}) {
    CHECK(fs::exists(dir / "out" / f));
  }
  const StudyResults back = load_results(dir / "out");
  CHECK(back.records.size() == r.records.size());
  const auto again = compute_metrics(back.records, back.truth, back.config.candidate_ids(), false);
  CHECK(to_json(again).dump(2) + "\n" == slurp(dir / "out" / "metrics.json"));
  CHECK(emit_report(back, ReportFormat::Markdown) == slurp(dir / "out" / "report.md"));
  const json manifest = json::parse(slurp(dir / "out" / "manifest.json"));
  CHECK(manifest["seed"] == 17);
  CHECK(manifest["truth"]["method"] == "monte_carlo_gformula");
  CHECK(manifest["generator_audit"].size() == 2);
}

TEST_CASE("trial study under treatment-blind plasmode") {
  const fs::path dir = scratch("trial");
  const StudyConfig c = config_from_json(trial_config(dir), dir);
  REQUIRE(validate_config(c).empty());
  const StudyResults r = run_study(c);
  CHECK(r.truth.value == 1.0);
  CHECK(r.truth.method == TruthMethod::NullByDesign);
  CHECK(r.mechanism_sha256 == sha256_hex(slurp(dir / "mechanism.json")));
  for (const auto& m : r.metrics.estimators) {
    CHECK(m.available);
    CHECK(m.endpoint_coverage > 0.5);
    CHECK(m.rejection_label == RejectionLabel::TypeIError);
  }
  CHECK(!r.selection.winner.empty());
  const std::string md = emit_report(r, ReportFormat::Markdown);
  CHECK(md.find(r.mechanism_sha256) != std::string::npos);
  CHECK(md.find("Type-I error") != std::string::npos);
  const json js = json::parse(emit_report(r, ReportFormat::Json));
  CHECK(js["primary_analysis"] == r.selection.winner);
}

TEST_CASE("effect statements") {
  CHECK(format_effect({EffectScale::Ratio, 1.1, 1.03, 1.16}) == "risk ratio=1.10, 95%CI: 1.03-1.16");
  CHECK(format_effect({EffectScale::Difference, 0.05, 0.0275, 0.0725}) == "5% (95%CI: 2.75-7.25%)");
  CHECK(format_effect({EffectScale::Difference, -0.01, -0.03, 0.01}) == "-1% (95%CI: -3 to 1%)");
}

TEST_CASE("report states when no sensitivity analysis qualifies") {
  const fs::path dir = scratch("nosens");
  json j = point_config(dir, false);
  j["candidates"].erase(1);
  const StudyResults r = run_study(config_from_json(j, dir));
  CHECK(r.selection.winner == "glm");
  CHECK(r.selection.sensitivity.empty());
  CHECK(emit_report(r, ReportFormat::Markdown).find("none met constraints") != std::string::npos);
}
