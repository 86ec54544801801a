#include <benchmark/benchmark.h>

#include "cpe/estimator.hpp"
#include "cpe/simulation.hpp"

namespace {

using namespace cpe;

void BM_ClusterEif(benchmark::State& state) {
  DgpConfig dgp;
  dgp.m = 4;
  dgp.seed = 3;
  dgp.size_dist = SizeDist::point(static_cast<int>(state.range(0)));
  const Dataset data = generate_dgp(dgp);
  const NuisanceModel oracle = dgp_oracle_nuisance();
  const PolicySpec spec = PolicySpec::cips(1.0);
  const bool exact = state.range(1) == 0;
  for (auto _ : state) {
    const auto lattice = exact ? LatticeSpec::make_exact() : LatticeSpec::subsample(100, 7);
    benchmark::DoNotOptimize(uncentered_eif_mu(data.clusters[0], oracle, spec, lattice));
  }
}
BENCHMARK(BM_ClusterEif)->Args({10, 0})->Args({12, 0})->Args({16, 1})->Args({20, 1});

void BM_EstimateLogit(benchmark::State& state) {
  DgpConfig dgp;
  dgp.m = static_cast<int>(state.range(0));
  dgp.seed = 5;
  const Dataset data = generate_dgp(dgp);
  const std::vector<EstimandSpec> estimands = {
      {EstimandKind::Mu, PolicySpec::cips(1.0), std::nullopt},
      {EstimandKind::De, PolicySpec::tpb(0.3), std::nullopt}};
  EstimatorConfig cfg;
  cfg.seed = 11;
  cfg.learner = LearnerSpec::logit_only();
  cfg.threads = 1;
  for (auto _ : state) {
    benchmark::DoNotOptimize(estimate(data, estimands, cfg));
  }
}
BENCHMARK(BM_EstimateLogit)->Arg(100)->Arg(250)->Unit(benchmark::kMillisecond);

void BM_TruthPerCluster(benchmark::State& state) {
  DgpConfig dgp;
  dgp.size_dist = SizeDist::uniform(5, 20);
  const std::vector<EstimandSpec> estimands = {
      {EstimandKind::Mu, PolicySpec::cips(1.0), std::nullopt}};
  std::uint64_t seed = 1;
  for (auto _ : state) {
    benchmark::DoNotOptimize(true_values(estimands, dgp, 200, seed++, 1));
  }
  state.SetItemsProcessed(state.iterations() * 200);
}
BENCHMARK(BM_TruthPerCluster)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
