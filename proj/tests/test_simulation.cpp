#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cpe/simulation.hpp"
#include "doctest.h"

using namespace cpe;

TEST_SUITE("simulation") {

TEST_CASE("size distribution parsing") {
  const SizeDist u = SizeDist::parse("uniform:5-20");
  CHECK(u.lo == 5);
  CHECK(u.hi == 20);
  CHECK(u.canonical() == "uniform:5-20");
  const SizeDist p = SizeDist::parse("point:3");
  CHECK(p.lo == 3);
  CHECK(p.hi == 3);
  CHECK_THROWS_AS(SizeDist::parse("weird:1"), Error);
}

TEST_CASE("DGP moments match the generating model") {
  DgpConfig cfg;
  cfg.m = 9000;  // ~112k units
  cfg.seed = 2024;
  const Dataset data = generate_dgp(cfg);

  double x2_sum = 0.0;
  std::size_t units = 0;
  double a_region_sum = 0.0;
  std::size_t a_region_count = 0;
  for (const auto& c : data.clusters) {
    CHECK(c.n >= 5);
    CHECK(c.n <= 20);
    for (int j = 0; j < c.n; ++j) {
      const double x1 = c.x[static_cast<std::size_t>(j) * 3];
      const double x2 = c.x[static_cast<std::size_t>(j) * 3 + 1];
      const double cc = c.x[static_cast<std::size_t>(j) * 3 + 2];
      x2_sum += x2;
      ++units;
      if (std::abs(x1) < 0.05 && cc <= 0.0) {
        a_region_sum += c.a[static_cast<std::size_t>(j)];
        ++a_region_count;
      }
    }
  }
  CHECK(units > 100000);
  CHECK(x2_sum / static_cast<double>(units) == doctest::Approx(0.5).epsilon(0.01));
  // near x1 = 0 with c <= 0 the treatment rate is expit(0.1) ~ 0.525
  REQUIRE(a_region_count > 1500);
  const double expect = 1.0 / (1.0 + std::exp(-0.1));
  CHECK(a_region_sum / static_cast<double>(a_region_count) ==
        doctest::Approx(expect).epsilon(0.025));
}

TEST_CASE("DGP is deterministic in its seed") {
  DgpConfig cfg;
  cfg.m = 25;
  cfg.seed = 7;
  const Dataset a = generate_dgp(cfg);
  const Dataset b = generate_dgp(cfg);
  REQUIRE(a.m() == b.m());
  for (int i = 0; i < a.m(); ++i) {
    CHECK(a.clusters[static_cast<std::size_t>(i)].y == b.clusters[static_cast<std::size_t>(i)].y);
    CHECK(a.clusters[static_cast<std::size_t>(i)].a == b.clusters[static_cast<std::size_t>(i)].a);
    CHECK(a.clusters[static_cast<std::size_t>(i)].x == b.clusters[static_cast<std::size_t>(i)].x);
  }
}

TEST_CASE("outcome model lowers Y for treated and interference-exposed units") {
  DgpConfig cfg;
  cfg.m = 4000;
  cfg.seed = 8;
  const Dataset data = generate_dgp(cfg);
  double y_treated = 0.0, y_untreated = 0.0;
  std::size_t n_treated = 0, n_untreated = 0;
  for (const auto& c : data.clusters) {
    for (int j = 0; j < c.n; ++j) {
      if (c.a[static_cast<std::size_t>(j)] == 1.0) {
        y_treated += c.y[static_cast<std::size_t>(j)];
        ++n_treated;
      } else {
        y_untreated += c.y[static_cast<std::size_t>(j)];
        ++n_untreated;
      }
    }
  }
  CHECK(y_treated / n_treated < y_untreated / n_untreated - 0.2);
}

TEST_CASE("truth values reproduce the reported magnitudes at reduced MC scale") {
  DgpConfig dgp;  // defaults: sizes uniform 5..20
  const std::vector<EstimandSpec> estimands = {
      {EstimandKind::Mu, PolicySpec::cips(0.5), std::nullopt},
      {EstimandKind::Mu, PolicySpec::tpb(0.3), std::nullopt},
      {EstimandKind::De, PolicySpec::cips(1.0), std::nullopt},
  };
  const auto truths = true_values(estimands, dgp, 20000, 424242, 2);
  const std::vector<double> expect = {0.436, 0.361, -0.287};
  for (std::size_t e = 0; e < estimands.size(); ++e) {
    CHECK(truths[e].mc_se < 0.0035);
    CHECK(std::abs(truths[e].truth - expect[e]) < 0.003 + 3 * truths[e].mc_se);
  }
}

TEST_CASE("truth is deterministic and cached") {
  const auto path = std::filesystem::temp_directory_path() / "cpe_truth_cache_test.json";
  std::filesystem::remove(path);
  DgpConfig dgp;
  dgp.size_dist = SizeDist::uniform(4, 8);
  const std::vector<EstimandSpec> estimands = {
      {EstimandKind::Mu, PolicySpec::cips(1.0), std::nullopt}};

  TruthCache cache(path.string());
  const auto first = cache.get_or_compute(estimands, dgp, 2000, 5, 2);
  CHECK(std::filesystem::exists(path));

  TruthCache reopened(path.string());
  const auto second = reopened.get_or_compute(estimands, dgp, 2000, 5, 2);
  CHECK(first[0].truth == second[0].truth);
  CHECK(first[0].mc_se == second[0].mc_se);

  const auto direct = true_values(estimands, dgp, 2000, 5, 2);
  CHECK(first[0].truth == direct[0].truth);
  std::filesystem::remove(path);
}

TEST_CASE("benchmark smoke run at D=2 emits every metric field") {
  BenchmarkConfig cfg;
  cfg.replications = 2;
  cfg.dgp.m = 40;
  cfg.dgp.seed = 3;
  cfg.dgp.size_dist = SizeDist::uniform(4, 8);
  cfg.estimands = {{EstimandKind::Mu, PolicySpec::cips(1.0), std::nullopt}};
  cfg.estimators = {BenchEstimator::NssLogit, BenchEstimator::Ipw};
  cfg.comparator = BenchEstimator::NssLogit;
  cfg.est.learner = LearnerSpec::logit_only();
  cfg.est.seed = 5;
  cfg.truth_mc = 2000;
  cfg.threads = 2;
  const BenchmarkResult result = run_benchmark(cfg);
  REQUIRE(result.rows.size() == 2);
  CHECK(result.failed_replications == 0);
  for (const auto& row : result.rows) {
    CHECK(std::isfinite(row.truth));
    CHECK(std::isfinite(row.bias));
    CHECK(std::isfinite(row.rmse));
    CHECK(std::isfinite(row.ase));
    CHECK(std::isfinite(row.ese));
    CHECK(row.cov >= 0.0);
    CHECK(row.cov <= 1.0);
    CHECK(std::isfinite(row.rmse_ratio));
  }
  const std::string csv = benchmark_to_csv(result);
  CHECK(csv.rfind("estimand,estimator,truth,bias,rmse,ase,ese,cov,rmse_ratio\n", 0) == 0);
}

TEST_CASE("benchmark metric identity rmse^2 = bias^2 + ese^2 (D-1)/D") {
  BenchmarkConfig cfg;
  cfg.replications = 12;
  cfg.dgp.m = 50;
  cfg.dgp.seed = 17;
  cfg.dgp.size_dist = SizeDist::uniform(4, 8);
  cfg.estimands = {{EstimandKind::Mu, PolicySpec::cips(0.5), std::nullopt}};
  cfg.estimators = {BenchEstimator::NssOracle};
  cfg.comparator = BenchEstimator::NssOracle;
  cfg.est.seed = 9;
  cfg.truth_mc = 2000;
  cfg.threads = 2;
  const BenchmarkResult result = run_benchmark(cfg);
  const auto& row = result.rows[0];
  const double d = static_cast<double>(cfg.replications);
  CHECK(row.rmse * row.rmse ==
        doctest::Approx(row.bias * row.bias + row.ese * row.ese * (d - 1.0) / d).epsilon(1e-12));
}

TEST_CASE("oracle nuisances give an estimator centered on the truth") {
  BenchmarkConfig cfg;
  cfg.replications = 24;
  cfg.dgp.m = 120;
  cfg.dgp.seed = 23;
  cfg.dgp.size_dist = SizeDist::uniform(5, 10);
  cfg.estimands = {{EstimandKind::Mu, PolicySpec::cips(1.0), std::nullopt}};
  cfg.estimators = {BenchEstimator::NssOracle};
  cfg.comparator = BenchEstimator::NssOracle;
  cfg.est.seed = 29;
  cfg.truth_mc = 40000;
  cfg.threads = 2;
  const BenchmarkResult result = run_benchmark(cfg);
  const auto& row = result.rows[0];
  const double mc_se = row.ese / std::sqrt(static_cast<double>(cfg.replications));
  CHECK(std::abs(row.bias) < 3 * std::sqrt(mc_se * mc_se + 4e-4 * 4e-4));
}

TEST_CASE("unknown estimator name is rejected") {
  CHECK_THROWS_AS(parse_bench_estimator("mystery"), Error);
  CHECK(parse_bench_estimator("pss") == BenchEstimator::NssLogit);
}

}  // TEST_SUITE
