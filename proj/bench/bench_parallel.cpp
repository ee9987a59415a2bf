// Serial reference (workers = 1) against the OpenMP path (workers = 0).

#include <benchmark/benchmark.h>

#include <filesystem>

#include "estsel/demo.hpp"
#include "estsel/harness.hpp"

using namespace estsel;

namespace {

const OutcomeBlindGenerator& generator() {
  static const OutcomeBlindGenerator g = [] {
    DemoPanelOptions o;
    o.subjects = 400;
    return fit_generative_models(demo_panel(o, SeededStream(1, 0)), OutcomeBlindSpec{}, SeededStream(1, 1));
  }();
  return g;
}

void BM_Truth(benchmark::State& state) {
  const int workers = static_cast<int>(state.range(0));
  const auto& g = generator();
  for (auto _ : state) {
    benchmark::DoNotOptimize(compute_truth(g, Regimen::constant(1, 3), Regimen::constant(0, 3), EffectScale::Difference,
                                           20000, SeededStream(2, 0), workers));
  }
  state.SetItemsProcessed(state.iterations() * 20000);
}
BENCHMARK(BM_Truth)->Arg(1)->Arg(0)->ArgName("workers")->Unit(benchmark::kMillisecond);

struct Study {
  StudyConfig config;
  StudyInputs inputs;
};

const Study& study() {
  static const Study s = [] {
    DemoPanelOptions o;
    o.subjects = 200;
    o.horizon = 1;
    o.time_varying = 2;
    const Dataset ds = to_long(demo_panel(o, SeededStream(3, 0)));
    const auto path = std::filesystem::temp_directory_path() / "estsel_bench_panel.csv";
    write_csv(ds, path);
    StudyConfig c;
    c.dataset = path;
    c.schema = schema_of(ds);
    c.regimen1 = Regimen::constant(1, 1);
    c.regimen0 = Regimen::constant(0, 1);
    c.iterations = 100;
    c.scheme = SelectionScheme::observational();
    EstimatorSpec glm;
    glm.id = "glm";
    EstimatorSpec null_model = glm;
    null_model.id = "intercept";
    null_model.nuisance.outcome = NuisanceModel::parametric(LearnerSpec::intercept_only());
    c.candidates = {glm, null_model};
    return Study{c, prepare_inputs(c)};
  }();
  return s;
}

void BM_Study(benchmark::State& state) {
  StudyConfig c = study().config;
  c.workers = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(run_study(c, study().inputs));
}
BENCHMARK(BM_Study)->Arg(1)->Arg(0)->ArgName("workers")->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
