// estsel: pre-specify an estimator by simulation.
//
//   estsel validate --config study.json
//   estsel truth    --config study.json
//   estsel run      --config study.json [--seed N] [--workers N] [--out DIR]
//   estsel metrics  --out DIR
//   estsel select   --out DIR [--scheme scheme.json]
//   estsel report   --out DIR [--format md|json]
//
// Exit codes: 0 success, 1 usage error, 2 failure while running.

#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "estsel/errors.hpp"
#include "estsel/format.hpp"
#include "estsel/harness.hpp"

using namespace estsel;
namespace fs = std::filesystem;

namespace {

struct Overrides {
  std::string config;
  std::string out;
  std::optional<uint64_t> seed;
  std::optional<int> workers;
};

StudyConfig configured(const Overrides& o) {
  StudyConfig c = load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.workers) c.workers = *o.workers;
  if (!o.out.empty()) c.output_dir = fs::absolute(o.out);
  return c;
}

std::string short_number(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", x);
  return buf;
}

fs::path output_dir(const StudyConfig& c) {
  return c.resolve(c.output_dir);
}

int cmd_validate(const Overrides& o) {
  const auto problems = validate_config(configured(o));
  for (const auto& p : problems) std::cerr << "invalid: " << p << "\n";
  if (!problems.empty()) return 2;
  std::cout << "config OK\n";
  return 0;
}

int cmd_truth(const Overrides& o) {
  const StudyConfig c = configured(o);
  const auto problems = validate_config(c);
  if (!problems.empty()) throw Error(ErrorCode::InvalidConfig, problems.front());
  const TrueEffect t = study_truth(c, prepare_inputs(c));
  std::cout << nlohmann::ordered_json{{"scale", std::string(to_string(t.scale))},
                                      {"value", t.value},
                                      {"mc_se", t.mc_se},
                                      {"method", std::string(to_string(t.method))}}
                   .dump(2)
            << "\n";
  return 0;
}

int cmd_run(const Overrides& o) {
  const StudyConfig c = configured(o);
  const StudyResults r = run_study(c);
  const fs::path dir = output_dir(c);
  persist_results(r, dir);
  std::cout << "truth " << format_number(r.truth.value) << " (" << to_string(r.truth.scale) << ")\n";
  for (const auto& m : r.metrics.estimators) {
    std::cout << "  " << m.estimator_id << ": failures " << m.failures << "/" << c.iterations;
    if (m.available) std::cout << ", bias " << short_number(m.bias) << ", variance " << short_number(m.variance);
    std::cout << "\n";
  }
  std::cout << "selected: " << (r.selection.winner.empty() ? "(none)" : r.selection.winner) << "\n";
  std::cout << "results in " << dir.string() << " (" << short_number(r.wall_clock_seconds) << " s)\n";
  return 0;
}

int cmd_metrics(const Overrides& o) {
  const StudyResults r = load_results(o.out);
  const auto m = compute_metrics(r.records, r.truth, r.config.candidate_ids(), false);
  std::cout << to_json(m).dump(2) << "\n";
  return 0;
}

int cmd_select(const Overrides& o, const std::string& scheme_path) {
  const StudyResults r = load_results(o.out);
  SelectionScheme scheme = r.config.scheme;
  if (!scheme_path.empty()) {
    std::ifstream in(scheme_path);
    if (!in) throw Error(ErrorCode::FileNotFound, "cannot open scheme '" + scheme_path + "'");
    scheme = scheme_from_json(nlohmann::json::parse(in));
  }
  std::cout << to_json(select_estimator(r.metrics, r.config.selection_candidates(), scheme)).dump(2) << "\n";
  return 0;
}

int cmd_report(const Overrides& o, const std::string& format) {
  const StudyResults r = load_results(o.out);
  std::cout << emit_report(r, format == "json" ? ReportFormat::Json : ReportFormat::Markdown);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simulation-based estimator pre-specification"};
  app.set_version_flag("--version", std::string(version_string()));
  app.require_subcommand(1);

  Overrides o;
  std::string scheme_path, format = "md";
  auto with_config = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "study config (JSON)")->required()->check(CLI::ExistingFile);
  };
  auto with_results = [&](CLI::App* sub) {
    sub->add_option("--out", o.out, "results directory written by 'run'")->required()->check(CLI::ExistingDirectory);
  };

  auto* validate = app.add_subcommand("validate", "check a config and its dataset");
  with_config(validate);
  auto* truth = app.add_subcommand("truth", "compute the true effect of the simulation");
  with_config(truth);
  truth->add_option("--seed", o.seed, "master seed");
  truth->add_option("--workers", o.workers, "threads (1 = serial)")->check(CLI::NonNegativeNumber);
  auto* run = app.add_subcommand("run", "run the simulation study and persist results");
  with_config(run);
  run->add_option("--seed", o.seed, "master seed");
  run->add_option("--workers", o.workers, "threads (0 = all, 1 = serial)")->check(CLI::NonNegativeNumber);
  run->add_option("--out", o.out, "results directory (default: config output_dir)");
  auto* metrics = app.add_subcommand("metrics", "recompute metrics from iterations.csv");
  with_results(metrics);
  auto* select = app.add_subcommand("select", "re-run selection, optionally under another scheme");
  with_results(select);
  select->add_option("--scheme", scheme_path, "selection scheme (JSON)")->check(CLI::ExistingFile);
  auto* report = app.add_subcommand("report", "print the analysis plan");
  with_results(report);
  report->add_option("--format", format, "md or json")->check(CLI::IsMember({"md", "json"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*validate) return cmd_validate(o);
    if (*truth) return cmd_truth(o);
    if (*run) return cmd_run(o);
    if (*metrics) return cmd_metrics(o);
    if (*select) return cmd_select(o, scheme_path);
    if (*report) return cmd_report(o, format);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
