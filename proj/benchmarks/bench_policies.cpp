#include <benchmark/benchmark.h>

#include "cpe/policy.hpp"
#include "cpe/rng.hpp"
#include "cpe/simulation.hpp"

namespace {

using namespace cpe;

ClusterObservation bench_cluster(int n) {
  Rng rng(1, Stream::Test, static_cast<std::uint64_t>(n));
  std::vector<double> y(static_cast<std::size_t>(n)), a(static_cast<std::size_t>(n)),
      x(static_cast<std::size_t>(n) * 2);
  for (int j = 0; j < n; ++j) {
    y[static_cast<std::size_t>(j)] = rng.bernoulli(0.6);
    a[static_cast<std::size_t>(j)] = rng.bernoulli(0.5);
    x[static_cast<std::size_t>(j) * 2] = rng.normal();
    x[static_cast<std::size_t>(j) * 2 + 1] = rng.bernoulli(0.5);
  }
  return make_cluster(std::move(y), std::move(a), std::move(x), 2);
}

std::vector<double> bench_pi(int n) {
  Rng rng(2, Stream::Test, static_cast<std::uint64_t>(n));
  std::vector<double> pi(static_cast<std::size_t>(n));
  for (auto& p : pi) p = 0.2 + 0.6 * rng.uniform();
  return pi;
}

void BM_PolicyLatticeSweep(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto cluster = bench_cluster(n);
  const auto pi = bench_pi(n);
  const PolicySpec spec =
      state.range(1) == 0 ? PolicySpec::cips(2.0) : PolicySpec::tpb(0.3);
  PolicyEvaluator eval(spec, cluster, pi);
  for (auto _ : state) {
    double acc = 0.0;
    for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << n); ++mask) {
      const auto pv = eval.prepare({mask, n});
      acc += eval.prob(pv) + eval.phi_q(pv);
      for (int j = 0; j < n; ++j) acc += eval.marginal_prob(pv, j);
    }
    benchmark::DoNotOptimize(acc);
  }
  state.SetItemsProcessed(state.iterations() * (std::int64_t{1} << n));
}
BENCHMARK(BM_PolicyLatticeSweep)
    ->Args({8, 0})
    ->Args({12, 0})
    ->Args({8, 1})
    ->Args({12, 1});

void BM_TpbAdmissibleMass(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto cluster = bench_cluster(n);
  const auto pi = bench_pi(n);
  const PolicySpec spec = PolicySpec::tpb(0.45);
  for (auto _ : state) {
    PolicyEvaluator eval(spec, cluster, pi);
    benchmark::DoNotOptimize(eval.tpb_admissible_mass());
  }
}
BENCHMARK(BM_TpbAdmissibleMass)->Arg(10)->Arg(20);

}  // namespace
