#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cpe/data.hpp"

namespace cpe {

enum class PolicyKind { TypeB, Cips, Cms, Tpb };

enum class CipsDeltaMode { Constant, Varying, Custom };

// Which identification weight is being built: w for mu(Q), or w_t for mu_t(Q).
enum class WeightKind { Mu, MuTreated, MuUntreated };

inline int weight_t(WeightKind k) { return k == WeightKind::MuUntreated ? 0 : 1; }

// Tagged description of a counterfactual policy Q and its parameter.
struct PolicySpec {
  PolicyKind kind = PolicyKind::TypeB;

  // TypeB
  double alpha = 0.5;

  // CIPS: odds multiplier delta(X, N). Presets: constant delta0 and
  // varying delta0 * (1 + 1/N). A custom callable may be supplied in code.
  double delta0 = 1.0;
  CipsDeltaMode delta_mode = CipsDeltaMode::Constant;
  std::function<double(std::span<const double> x, int n)> delta_fn;

  // CMS
  double lambda = 1.0;
  std::string x_star_name;
  int x_star_column = -1;  // resolved against a dataset before use

  // TPB
  double rho = 0.0;

  static PolicySpec type_b(double alpha);
  static PolicySpec cips(double delta0, CipsDeltaMode mode = CipsDeltaMode::Constant);
  static PolicySpec cms(double lambda, std::string x_star_name);
  static PolicySpec cms_column(double lambda, int x_star_column);
  static PolicySpec tpb(double rho);

  double delta_value(std::span<const double> x, int n) const;

  // Grammar string, e.g. "cips:delta0=0.5,mode=constant".
  std::string canonical() const;
  // Grid coordinate (alpha, delta0, lambda, or rho).
  double param() const;

  void validate() const;  // parameter-range checks, throws DomainError
  // binds x_star_name to a dataset column and checks the column is binary
  void resolve(const Dataset& data);
};

// Parses the CLI policy grammar:
//   typeb:alpha=0.5
//   cips:delta0=2.0,mode=constant|varying
//   cms:lambda=0.5,xstar=<column>
//   tpb:rho=0.3
PolicySpec parse_policy(const std::string& text);

// pi_delta = delta*pi / (delta*pi + 1 - pi)
double shifted_propensity_cips(double pi, double delta_val);

// pi_lambda = (1 - lambda + lambda*pi) * xstar + pi * (1 - xstar)
double shifted_propensity_cms(double pi, double lambda, int x_star);

// Floor applied to the TPB admissible-set mass P(Abar >= rho | X, N) before
// any division; affected clusters are flagged.
inline constexpr double kTpbDenominatorFloor = 1e-6;

// Evaluates one policy on one cluster, bound to the observed treatments and
// the unit-level propensities pi-hat (already clipped). All per-unit masses
// are kept in log space and exponentiated per vector.
//
// The five hooks every policy implements: Q(a), marginal Q(a_(-j)),
// phi_Q(A; a), and the generic w / phi weight builders below.
class PolicyEvaluator {
 public:
  // Binds to cluster.a_bits as the observed treatment unless an override is
  // given (tests sum identities over every possible observed vector).
  PolicyEvaluator(const PolicySpec& spec, const ClusterObservation& cluster,
                  std::span<const double> pi,
                  std::optional<TreatmentVector> observed = std::nullopt);

  int n() const { return n_; }
  const PolicySpec& spec() const { return *spec_; }
  bool denominator_floored() const { return floored_; }

  // TPB internals used by the estimator's subsampling decomposition
  double tpb_admissible_mass() const { return p_admissible_; }
  int tpb_threshold() const { return s_min_; }
  bool observed_admissible() const { return obs_admissible_; }
  double unit_pi(int j) const { return pi_[static_cast<std::size_t>(j)]; }

  // Q(a | X, N); TPB returns 0 when abar < rho.
  double prob(TreatmentVector a) const;
  // log Q(a), -inf for structural zeros
  double log_prob(TreatmentVector a) const;

  // Q(a_(-j) | X, N) = Q(1, a_(-j)) + Q(0, a_(-j)); bit j of `a` is ignored.
  double marginal_prob(TreatmentVector a, int j) const;

  // phi_Q(A_obs, X, N; a), the uncentered-EIF ingredient for policies that
  // depend on the observed data distribution. Zero for Type B.
  double phi_q(TreatmentVector a) const;

  // phi_Q(A_obs; a_(-j)) = phi_Q(A_obs; (1, a_(-j))) + phi_Q(A_obs; (0, a_(-j)))
  double phi_q_marginal(TreatmentVector a, int j) const;

  // Per-vector work shared by the O(1) marginal accessors inside hot loops.
  struct Prepared {
    TreatmentVector a;
    int count = 0;
    double log_q = 0.0;    // log of the product part (policy mass for product
                           // policies; log H(a) for TPB)
    double product = 0.0;  // exp(log_q): the product mass itself
    double q = 0.0;        // Q(a)
    double phi_sum = 0.0;  // product policies: sum_l c_l(a_l)
  };
  Prepared prepare(TreatmentVector a) const;

  double prob(const Prepared& pv) const { return pv.q; }
  double phi_q(const Prepared& pv) const;
  double marginal_prob(const Prepared& pv, int j) const;
  double phi_q_marginal(const Prepared& pv, int j) const;

  // Per-unit probability of a_j = 1 under the product part of the policy
  // (the shifted propensity for CIPS/CMS, alpha for TypeB, pi-hat for TPB).
  double unit_mass1(int j) const { return std::exp(log_mass(j, 1)); }

 private:
  bool product_form() const { return spec_->kind != PolicyKind::Tpb; }

  const PolicySpec* spec_;
  const ClusterObservation* cluster_;
  int n_ = 0;
  TreatmentVector a_obs_;
  bool obs_admissible_ = true;  // TPB: 1(Abar_obs >= rho)
  int s_min_ = 0;               // TPB: smallest admissible treated count
  double log_p_admissible_ = 0.0;
  double p_admissible_ = 1.0;  // TPB: floored P(Abar >= rho | X, N)
  bool floored_ = false;

  // per-unit tables indexed [j][b]
  std::vector<double> log_mass_;  // log of the unit-b mass (pi_shifted or pi for TPB)
  std::vector<double> mass_;      // the mass itself, for division-based marginals
  std::vector<double> phi_term_;  // c_j(b) for CIPS/CMS, 0 for TypeB/TPB
  std::vector<double> pi_;

  double log_mass(int j, int b) const { return log_mass_[static_cast<std::size_t>(2 * j + b)]; }
  double mass(int j, int b) const { return mass_[static_cast<std::size_t>(2 * j + b)]; }
  double phi_term(int j, int b) const { return phi_term_[static_cast<std::size_t>(2 * j + b)]; }
  double product_excluding(TreatmentVector a, int j) const;
};

// Identification weight w(a, X, N): Mu -> Q(a)/N * 1; MuTreated/MuUntreated ->
// component j = 1(a_j = t) * Q(a_(-j)) / N.
std::vector<double> weight(const PolicyEvaluator& eval, WeightKind kind, TreatmentVector a);

// EIF of the weight: Mu -> phi_Q(A; a)/N * 1; t-versions use the marginal
// phi_Q through both completions.
std::vector<double> phi_weight(const PolicyEvaluator& eval, WeightKind kind, TreatmentVector a);

// Convenience wrappers that build the evaluator from a propensity vector.
double policy_prob(const PolicySpec& spec, TreatmentVector a, const ClusterObservation& cluster,
                   std::span<const double> pi);
double policy_prob_marginal(const PolicySpec& spec, TreatmentVector a, int j,
                            const ClusterObservation& cluster, std::span<const double> pi);
double phi_q(const PolicySpec& spec, TreatmentVector a_obs, TreatmentVector a,
             const ClusterObservation& cluster, std::span<const double> pi);

}  // namespace cpe
