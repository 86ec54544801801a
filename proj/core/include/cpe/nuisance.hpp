#pragma once

#include <functional>
#include <memory>
#include <span>
#include <variant>
#include <vector>

#include "cpe/data.hpp"
#include "cpe/learners.hpp"

namespace cpe {

// pi*(x_j): unit-level propensity, clipped to [clip_eps, 1 - clip_eps].
class PropensityModel {
 public:
  using OracleFn = std::function<double(std::span<const double> x_row)>;

  PropensityModel() = default;
  explicit PropensityModel(StackedModel fitted, double clip_eps = 0.01);
  explicit PropensityModel(OracleFn oracle, double clip_eps = 0.01);

  double operator()(std::span<const double> x_row) const;
  double clip_eps() const { return clip_eps_; }
  const StackedModel* fitted() const { return std::get_if<StackedModel>(&impl_); }

 private:
  std::variant<std::monostate, StackedModel, OracleFn> impl_;
  double clip_eps_ = 0.01;
};

// g*(a_j, abar_(-j), x_j): unit-level outcome regression on the features
// [a, abar_minus, singleton, x...]. Predictions are clamped to [0,1].
class OutcomeModel {
 public:
  using OracleFn =
      std::function<double(double a, double abar_minus, std::span<const double> x_row)>;

  OutcomeModel() = default;
  explicit OutcomeModel(StackedModel fitted);
  explicit OutcomeModel(OracleFn oracle);

  double operator()(double a, double abar_minus, double singleton,
                    std::span<const double> x_row) const;
  const StackedModel* fitted() const { return std::get_if<StackedModel>(&impl_); }
  bool is_oracle() const { return std::holds_alternative<OracleFn>(impl_); }

 private:
  std::variant<std::monostate, StackedModel, OracleFn> impl_;
};

// Fitted pi* and g* for one estimation fold, plus the derived cluster-level
// H and G evaluators under the conditional-independence construction.
struct NuisanceModel {
  PropensityModel propensity;
  OutcomeModel outcome;
  double clip_eps = 0.01;
  int fold_id = -1;
  std::vector<std::string> notes;
};

PropensityModel fit_propensity(const Dataset& train, const LearnerSpec& spec, std::uint64_t seed,
                               double clip_eps = 0.01);
OutcomeModel fit_outcome(const Dataset& train, const LearnerSpec& spec, std::uint64_t seed);

NuisanceModel fit_nuisance(const Dataset& train, const LearnerSpec& spec, std::uint64_t seed,
                           double clip_eps = 0.01, int fold_id = -1);

NuisanceModel make_oracle_nuisance(PropensityModel::OracleFn pi, OutcomeModel::OracleFn g,
                                   double clip_eps = 1e-6);

// H(a, x, n) = prod_j pi_j^{a_j} (1-pi_j)^{1-a_j}, computed in log space.
double cluster_h(const NuisanceModel& model, TreatmentVector a, const ClusterObservation& cluster);

// G(a, x, n): component j = g*(a_j, abar_(-j), x_j).
std::vector<double> cluster_g(const NuisanceModel& model, TreatmentVector a,
                              const ClusterObservation& cluster);

// Per-cluster tables for the estimator hot path. The outcome prediction
// depends on a only through (a_j, sum of the other units' treatments), so the
// full lattice needs just 2n values per unit.
struct ClusterNuisanceTables {
  int n = 0;
  std::vector<double> pi;     // clipped propensities, length n
  std::vector<double> g;      // n * 2 * n values: [j][a_j][s_other]
  std::vector<double> log_pi;
  std::vector<double> log_1mpi;

  double g_at(int j, int a_j, int s_other) const {
    return g[(static_cast<std::size_t>(j) * 2 + static_cast<std::size_t>(a_j)) *
                 static_cast<std::size_t>(n) +
             static_cast<std::size_t>(s_other)];
  }
  double log_h(TreatmentVector a) const;
  double gbar(TreatmentVector a) const;  // mean_j g_at(j, a_j, s - a_j)
};

ClusterNuisanceTables build_tables(const NuisanceModel& model, const ClusterObservation& cluster);

}  // namespace cpe
