#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cpe/data.hpp"
#include "cpe/learners.hpp"
#include "cpe/nuisance.hpp"
#include "cpe/policy.hpp"

namespace cpe {

struct EstimatorConfig {
  int folds = 2;                          // K
  std::optional<int> subsample_r = 100;   // nullopt: always enumerate exactly
  int exact_limit = 4096;                 // enumerate when 2^n <= max(r, exact_limit)
  int splits = 1;                         // S
  std::uint64_t seed = 1;
  double alpha_level = 0.05;
  LearnerSpec learner;
  double clip_eps = 0.01;
  int threads = 0;  // 0: hardware concurrency

  bool exact_for(int n) const;
  std::string r_string() const;
};

enum class EstimandKind { Mu, Mu1, Mu0, De, Se1, Se0, Oe, Te };

EstimandKind parse_estimand_kind(const std::string& name);
std::string to_string(EstimandKind kind);
// Se/Oe/Te contrast two policies, the rest use one.
bool needs_second_policy(EstimandKind kind);

struct EstimandSpec {
  EstimandKind kind = EstimandKind::Mu;
  PolicySpec q;
  std::optional<PolicySpec> q_prime;

  std::string label() const;  // e.g. "de" / policy strings carried separately
};

struct EstimandResult {
  std::string estimand;
  std::string policy;  // canonical policy string; contrasts join Q and Q' with '|'
  double param = 0.0;
  double point = 0.0;
  double se = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  std::vector<std::string> flags;
  // uncentered EIF values for the split attaining the median point (S>1)
  std::vector<double> per_cluster_eif;
};

struct EstimateReport {
  std::uint64_t seed = 0;
  int folds = 0;
  std::string r_str;
  int splits = 0;
  int m = 0;
  std::vector<int> fold_sizes;
  std::vector<std::string> notes;
  std::vector<EstimandResult> results;
};

// Lattice handling for the sum over A(N) inside the uncentered EIFs.
struct LatticeSpec {
  bool exact = true;
  int r = 100;
  std::uint64_t seed = 0;

  static LatticeSpec make_exact() { return {true, 0, 0}; }
  static LatticeSpec subsample(int r, std::uint64_t seed) { return {false, r, seed}; }
};

// Uncentered EIF of mu(Q) for one cluster: sum_a {Q(a) + phi_Q(A;a)} Gbar(a)
// plus the (never subsampled) weighted-residual correction.
double uncentered_eif_mu(const ClusterObservation& cluster, const NuisanceModel& nuisance,
                         const PolicySpec& policy, const LatticeSpec& lattice);

// Uncentered EIF of mu_t(Q): first term over vectors with a_j = t using the
// marginal Q and marginal phi_Q through both completions.
double uncentered_eif_mu_t(const ClusterObservation& cluster, const NuisanceModel& nuisance,
                           const PolicySpec& policy, int t, const LatticeSpec& lattice);

// sigma2-style dispersion: mean squared deviation of the uncentered EIFs
// around the point estimate.
double variance(std::span<const double> eifs, double point);

double normal_quantile(double p);

// K-fold nonparametric sample-splitting estimator with optional subsampling
// approximation and median-of-S split aggregation. When `fixed_nuisance` is
// given (oracle studies), fitting is skipped and every fold evaluates with it.
EstimateReport estimate(const Dataset& data, const std::vector<EstimandSpec>& estimands,
                        const EstimatorConfig& cfg,
                        const NuisanceModel* fixed_nuisance = nullptr);

// IPW baseline: m^-1 sum_i w(A_i)^T Y_i / H(A_i) with the propensity fitted
// once on the full sample (no cross-fitting).
EstimateReport estimate_ipw(const Dataset& data, const std::vector<EstimandSpec>& estimands,
                            const EstimatorConfig& cfg);
EstimateReport estimate_ipw(const Dataset& data, const std::vector<EstimandSpec>& estimands,
                            const EstimatorConfig& cfg, const NuisanceModel& nuisance);

}  // namespace cpe
