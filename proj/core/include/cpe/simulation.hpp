#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cpe/data.hpp"
#include "cpe/estimator.hpp"
#include "cpe/nuisance.hpp"
#include "cpe/rng.hpp"

namespace cpe {

// Distribution of cluster sizes N_i.
struct SizeDist {
  int lo = 5;
  int hi = 20;  // uniform on {lo, ..., hi}; point mass when lo == hi

  static SizeDist uniform(int lo, int hi) { return {lo, hi}; }
  static SizeDist point(int n) { return {n, n}; }
  static SizeDist parse(const std::string& text);  // "uniform:5-20" | "point:5"

  int sample(Rng& rng) const;
  int max_size() const { return hi; }
  std::string canonical() const;
};

struct DgpConfig {
  int m = 500;
  SizeDist size_dist;
  std::uint64_t seed = 1;
};

// Simulated data-generating process: covariate columns [x1, x2, c] with the
// cluster-level c replicated into every row; treatment and outcome from
// logistic models with |x1| and |x1|*x2 nonlinearities. Learners see the raw
// columns only; the analytic forms live in the oracle functions below.
Dataset generate_dgp(const DgpConfig& cfg);

double dgp_true_propensity(std::span<const double> x_row);
double dgp_true_outcome(double a, double abar_minus, std::span<const double> x_row);
NuisanceModel dgp_oracle_nuisance();

struct TruthValue {
  double truth = 0.0;
  double mc_se = 0.0;
};

// Monte Carlo ground truth: draws (X, N) from the DGP, evaluates
// sum_a w(a,X,N)^T G(a,X,N) per cluster with the analytic nuisances
// (enumeration up to n = 14, policy sampling beyond), and averages.
TruthValue true_value(const EstimandSpec& estimand, const DgpConfig& dgp, long mc_clusters,
                      std::uint64_t seed, int threads = 0);

// Batch version sharing the Monte Carlo draws across estimands.
std::vector<TruthValue> true_values(const std::vector<EstimandSpec>& estimands,
                                    const DgpConfig& dgp, long mc_clusters, std::uint64_t seed,
                                    int threads = 0);

// File-backed cache keyed by (estimand, policies, size distribution,
// mc_clusters, seed); values are reused across benchmark runs.
class TruthCache {
 public:
  explicit TruthCache(std::string path);

  std::vector<TruthValue> get_or_compute(const std::vector<EstimandSpec>& estimands,
                                         const DgpConfig& dgp, long mc_clusters,
                                         std::uint64_t seed, int threads = 0);

  static std::string key_for(const EstimandSpec& estimand, const SizeDist& sizes,
                             long mc_clusters, std::uint64_t seed);

 private:
  void load();
  void save() const;

  std::string path_;
  std::map<std::string, TruthValue> entries_;
};

enum class BenchEstimator { NssEnsemble, NssLogit, Ipw, NssOracle };

BenchEstimator parse_bench_estimator(const std::string& name);
std::string to_string(BenchEstimator kind);

struct BenchmarkRow {
  std::string estimand;  // label including the policy
  std::string estimator;
  double truth = 0.0;
  double bias = 0.0;
  double rmse = 0.0;
  double ase = 0.0;
  double ese = 0.0;
  double cov = 0.0;
  double rmse_ratio = 0.0;  // vs the comparator estimator; NaN when absent
};

struct BenchmarkResult {
  std::vector<BenchmarkRow> rows;
  int replications = 0;
  int failed_replications = 0;
  std::vector<std::string> warnings;
};

struct BenchmarkConfig {
  int replications = 100;  // D
  DgpConfig dgp;
  std::vector<EstimandSpec> estimands;
  std::vector<BenchEstimator> estimators{BenchEstimator::NssEnsemble, BenchEstimator::NssLogit};
  BenchEstimator comparator = BenchEstimator::NssLogit;
  EstimatorConfig est;
  long truth_mc = 200000;
  std::uint64_t truth_seed = 97;
  std::string truth_cache_path;  // empty: no cache
  int threads = 0;
};

// D-replication study: per dataset each estimator runs once; Bias, RMSE,
// ASE, ESE, and Wald coverage per (estimand, estimator). A replication that
// throws is excluded and counted.
BenchmarkResult run_benchmark(const BenchmarkConfig& cfg);

// CSV with columns estimand, estimator, truth, bias, rmse, ase, ese, cov,
// rmse_ratio.
void write_benchmark_csv(const BenchmarkResult& result, const std::string& path);
std::string benchmark_to_csv(const BenchmarkResult& result);

}  // namespace cpe
