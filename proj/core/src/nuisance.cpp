#include "cpe/nuisance.hpp"

#include <algorithm>
#include <cmath>

namespace cpe {

namespace {

double clip(double v, double eps) { return std::min(1.0 - eps, std::max(eps, v)); }

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

std::vector<double> outcome_features(double a, double abar, double singleton,
                                     std::span<const double> x_row) {
  std::vector<double> feat;
  feat.reserve(x_row.size() + 3);
  feat.push_back(a);
  feat.push_back(abar);
  feat.push_back(singleton);
  feat.insert(feat.end(), x_row.begin(), x_row.end());
  return feat;
}

}  // namespace

PropensityModel::PropensityModel(StackedModel fitted, double clip_eps)
    : impl_(std::move(fitted)), clip_eps_(clip_eps) {}

PropensityModel::PropensityModel(OracleFn oracle, double clip_eps)
    : impl_(std::move(oracle)), clip_eps_(clip_eps) {}

double PropensityModel::operator()(std::span<const double> x_row) const {
  double p;
  if (const auto* fitted = std::get_if<StackedModel>(&impl_)) {
    p = fitted->predict(x_row);
  } else if (const auto* oracle = std::get_if<OracleFn>(&impl_)) {
    p = (*oracle)(x_row);
  } else {
    throw Error(ErrorKind::SingularFit, "propensity model not fitted");
  }
  return clip(p, clip_eps_);
}

OutcomeModel::OutcomeModel(StackedModel fitted) : impl_(std::move(fitted)) {}
OutcomeModel::OutcomeModel(OracleFn oracle) : impl_(std::move(oracle)) {}

double OutcomeModel::operator()(double a, double abar, double singleton,
                                std::span<const double> x_row) const {
  if (const auto* fitted = std::get_if<StackedModel>(&impl_)) {
    return clamp01(fitted->predict(outcome_features(a, abar, singleton, x_row)));
  }
  if (const auto* oracle = std::get_if<OracleFn>(&impl_)) {
    return clamp01((*oracle)(a, abar, x_row));
  }
  throw Error(ErrorKind::SingularFit, "outcome model not fitted");
}

PropensityModel fit_propensity(const Dataset& train, const LearnerSpec& spec, std::uint64_t seed,
                               double clip_eps) {
  TrainMatrix pooled;
  pooled.cols = static_cast<std::size_t>(train.p);
  for (int i = 0; i < train.m(); ++i) {
    const auto& c = train.clusters[static_cast<std::size_t>(i)];
    for (int j = 0; j < c.n; ++j) {
      pooled.push_row(c.x_row(j), c.a[static_cast<std::size_t>(j)], i);
    }
  }
  return PropensityModel(fit_stack(pooled, spec, seed), clip_eps);
}

OutcomeModel fit_outcome(const Dataset& train, const LearnerSpec& spec, std::uint64_t seed) {
  TrainMatrix pooled;
  pooled.cols = static_cast<std::size_t>(train.p) + 3;
  for (int i = 0; i < train.m(); ++i) {
    const auto& c = train.clusters[static_cast<std::size_t>(i)];
    for (int j = 0; j < c.n; ++j) {
      const int aj = c.a_bits.bit(j);
      const auto feat = outcome_features(c.a[static_cast<std::size_t>(j)],
                                         c.abar_minus(aj), c.n == 1 ? 1.0 : 0.0, c.x_row(j));
      pooled.push_row(feat, c.y[static_cast<std::size_t>(j)], i);
    }
  }
  return OutcomeModel(fit_stack(pooled, spec, seed));
}

NuisanceModel fit_nuisance(const Dataset& train, const LearnerSpec& spec, std::uint64_t seed,
                           double clip_eps, int fold_id) {
  NuisanceModel model;
  model.clip_eps = clip_eps;
  model.fold_id = fold_id;
  model.propensity = fit_propensity(train, spec, seed ^ 0x9e3779b97f4a7c15ULL, clip_eps);
  model.outcome = fit_outcome(train, spec, seed ^ 0xbb67ae8584caa73bULL);
  if (const auto* f = model.propensity.fitted()) {
    for (const auto& note : f->notes) model.notes.push_back("propensity: " + note);
  }
  if (const auto* f = model.outcome.fitted()) {
    for (const auto& note : f->notes) model.notes.push_back("outcome: " + note);
  }
  return model;
}

NuisanceModel make_oracle_nuisance(PropensityModel::OracleFn pi, OutcomeModel::OracleFn g,
                                   double clip_eps) {
  NuisanceModel model;
  model.clip_eps = clip_eps;
  model.propensity = PropensityModel(std::move(pi), clip_eps);
  model.outcome = OutcomeModel(std::move(g));
  return model;
}

double cluster_h(const NuisanceModel& model, TreatmentVector a, const ClusterObservation& cluster) {
  double log_h = 0.0;
  for (int j = 0; j < cluster.n; ++j) {
    const double pij = model.propensity(cluster.x_row(j));
    log_h += a.bit(j) ? std::log(pij) : std::log1p(-pij);
  }
  return std::exp(log_h);
}

std::vector<double> cluster_g(const NuisanceModel& model, TreatmentVector a,
                              const ClusterObservation& cluster) {
  std::vector<double> g(static_cast<std::size_t>(cluster.n));
  const double singleton = cluster.n == 1 ? 1.0 : 0.0;
  const int s = a.count();
  for (int j = 0; j < cluster.n; ++j) {
    const int aj = a.bit(j);
    const double abar = cluster.n <= 1 ? 0.0 : (s - aj) / static_cast<double>(cluster.n - 1);
    g[static_cast<std::size_t>(j)] = model.outcome(aj, abar, singleton, cluster.x_row(j));
  }
  return g;
}

double ClusterNuisanceTables::log_h(TreatmentVector a) const {
  double lh = 0.0;
  for (int j = 0; j < n; ++j) {
    lh += a.bit(j) ? log_pi[static_cast<std::size_t>(j)] : log_1mpi[static_cast<std::size_t>(j)];
  }
  return lh;
}

double ClusterNuisanceTables::gbar(TreatmentVector a) const {
  const int s = a.count();
  double total = 0.0;
  for (int j = 0; j < n; ++j) {
    const int aj = a.bit(j);
    total += g_at(j, aj, s - aj);
  }
  return total / n;
}

ClusterNuisanceTables build_tables(const NuisanceModel& model, const ClusterObservation& cluster) {
  ClusterNuisanceTables t;
  t.n = cluster.n;
  t.pi.resize(static_cast<std::size_t>(cluster.n));
  t.log_pi.resize(static_cast<std::size_t>(cluster.n));
  t.log_1mpi.resize(static_cast<std::size_t>(cluster.n));
  t.g.resize(static_cast<std::size_t>(cluster.n) * 2 * static_cast<std::size_t>(cluster.n));

  const double singleton = cluster.n == 1 ? 1.0 : 0.0;
  const StackedModel* fitted = model.outcome.fitted();
  bool use_knn_base = false;
  if (fitted != nullptr && !fitted->constant && fitted->knn.has_value()) {
    auto it = std::find(fitted->library.begin(), fitted->library.end(), "knn");
    if (it != fitted->library.end()) {
      use_knn_base = fitted->weights[static_cast<std::size_t>(it - fitted->library.begin())] > 0.0;
    }
  }

  for (int j = 0; j < cluster.n; ++j) {
    const double pij = model.propensity(cluster.x_row(j));
    t.pi[static_cast<std::size_t>(j)] = pij;
    t.log_pi[static_cast<std::size_t>(j)] = std::log(pij);
    t.log_1mpi[static_cast<std::size_t>(j)] = std::log1p(-pij);

    // knn distances over the fixed dims (singleton + covariates) are shared
    // by all 2n (a_j, s_other) variants of this unit
    std::vector<double> knn_base;
    std::vector<double> feat = {0.0, 0.0, singleton};
    feat.insert(feat.end(), cluster.x_row(j).begin(), cluster.x_row(j).end());
    if (use_knn_base) {
      knn_base = fitted->knn->partial_sq_dist(feat, 2);
    }

    for (int aj = 0; aj <= 1; ++aj) {
      for (int s_other = 0; s_other < cluster.n; ++s_other) {
        const double abar =
            cluster.n <= 1 ? 0.0 : s_other / static_cast<double>(cluster.n - 1);
        double value;
        if (fitted != nullptr && !fitted->constant) {
          feat[0] = aj;
          feat[1] = abar;
          double p = 0.0;
          for (std::size_t l = 0; l < fitted->library.size(); ++l) {
            const double wl = fitted->weights[l];
            if (wl == 0.0) continue;
            double pl;
            if (fitted->library[l] == "logit") {
              pl = fitted->logit->predict(feat);
            } else if (fitted->library[l] == "gbt") {
              pl = fitted->gbt->predict(feat);
            } else {
              pl = fitted->knn->predict_completed(knn_base,
                                                  std::span<const double>(feat.data(), 2));
            }
            p += wl * pl;
          }
          value = std::min(1.0, std::max(0.0, p));
        } else {
          value = model.outcome(aj, abar, singleton, cluster.x_row(j));
        }
        t.g[(static_cast<std::size_t>(j) * 2 + static_cast<std::size_t>(aj)) *
                static_cast<std::size_t>(cluster.n) +
            static_cast<std::size_t>(s_other)] = value;
      }
    }
  }
  return t;
}

}  // namespace cpe
