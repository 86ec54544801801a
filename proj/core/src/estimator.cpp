#include "cpe/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "cpe/parallel.hpp"
#include "cpe/rng.hpp"

namespace cpe {

namespace {

constexpr double kLogClip = -30.0;  // log-space floor for the Q/H ratio

double clipped_log(double v) { return v <= 0.0 ? -std::numeric_limits<double>::infinity()
                                               : std::max(std::log(v), kLogClip); }

std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  z ^= z >> 30;
  z *= 0xbf58476d1ce4e5b9ULL;
  z ^= z >> 27;
  z *= 0x94d049bb133111ebULL;
  z ^= z >> 31;
  return z;
}

// mu, mu1, mu0 for one (cluster, policy) pair
struct AtomValues {
  double mu = 0.0;
  double mu1 = 0.0;
  double mu0 = 0.0;
  bool floored = false;
};

AtomValues cluster_atoms(const ClusterObservation& cluster, const ClusterNuisanceTables& tables,
                         const PolicySpec& policy, const LatticeSpec& lattice) {
  const int n = cluster.n;
  PolicyEvaluator eval(policy, cluster, tables.pi);

  double first_mu = 0.0, first_mu1 = 0.0, first_mu0 = 0.0;
  auto accumulate = [&](TreatmentVector a) {
    const auto pv = eval.prepare(a);
    const double qa = eval.prob(pv);
    const double phia = eval.phi_q(pv);
    const int s = pv.count;
    double gsum = 0.0;
    double t_parts[2] = {0.0, 0.0};
    for (int j = 0; j < n; ++j) {
      const int b = a.bit(j);
      const double gj = tables.g_at(j, b, s - b);
      gsum += gj;
      const double mq = eval.marginal_prob(pv, j);
      const double mphi = eval.phi_q_marginal(pv, j);
      t_parts[b] += (mq + mphi) * gj;
    }
    first_mu += (qa + phia) * (gsum / n);
    first_mu1 += t_parts[1] / n;
    first_mu0 += t_parts[0] / n;
  };

  if (lattice.exact) {
    const std::uint64_t total = std::uint64_t{1} << n;
    for (std::uint64_t mask = 0; mask < total; ++mask) accumulate({mask, n});
  } else if (policy.kind != PolicyKind::Tpb) {
    // sum_a h(a) ~ (2^n / r) * sum_q h(a_q) under the uniform proposal
    const SubsampleDraw draw = subsample_treatments(n, lattice.r, lattice.seed);
    for (const auto& a : draw.draws) accumulate(a);
    first_mu *= draw.weight;
    first_mu1 *= draw.weight;
    first_mu0 *= draw.weight;
  } else {
    // TPB: phi_Q carries a point mass at the observed A whose uniform-draw
    // estimate is hopelessly heavy-tailed. Split the lattice sum into the
    // atom (summed exactly) and a smooth remainder, and sample the remainder
    // from H-hat itself (any positive proposal is admissible here); the
    // importance ratio then cancels H and the integrand stays bounded.
    const double p_adm = eval.tpb_admissible_mass();
    const int s_min = eval.tpb_threshold();
    const double obs_adm = eval.observed_admissible() ? 1.0 : 0.0;
    const double scale = (1.0 - obs_adm / p_adm) / p_adm;

    Rng rng(lattice.seed, Stream::Subsample, 1);
    double t_mu = 0.0;
    double t_mut[2] = {0.0, 0.0};
    for (int q = 0; q < lattice.r; ++q) {
      TreatmentVector a{0, n};
      int s = 0;
      for (int j = 0; j < n; ++j) {
        if (rng.bernoulli(eval.unit_pi(j))) {
          a.bits |= std::uint64_t{1} << j;
          ++s;
        }
      }
      if (s >= s_min) t_mu += tables.gbar(a);
      for (int j = 0; j < n; ++j) {
        const int s_other = s - a.bit(j);
        const double pij = eval.unit_pi(j);
        const double w_j = (s_other + 1 >= s_min ? pij : 0.0) +
                           (s_other >= s_min ? 1.0 - pij : 0.0);
        for (int t = 0; t <= 1; ++t) {
          t_mut[t] += w_j * tables.g_at(j, t, s_other) / n;
        }
      }
    }
    first_mu = scale * t_mu / lattice.r;
    first_mu1 = scale * t_mut[1] / lattice.r;
    first_mu0 = scale * t_mut[0] / lattice.r;

    const TreatmentVector a_obs_atom = cluster.a_bits;
    if (obs_adm > 0.0) {
      const int s_obs = a_obs_atom.count();
      first_mu += tables.gbar(a_obs_atom) / p_adm;
      double g1 = 0.0, g0 = 0.0;
      for (int j = 0; j < n; ++j) {
        const int s_other = s_obs - a_obs_atom.bit(j);
        g1 += tables.g_at(j, 1, s_other);
        g0 += tables.g_at(j, 0, s_other);
      }
      first_mu1 += g1 / (n * p_adm);
      first_mu0 += g0 / (n * p_adm);
    }
  }

  // correction terms, always exact
  const TreatmentVector a_obs = cluster.a_bits;
  const auto pv_obs = eval.prepare(a_obs);
  const int s_obs = pv_obs.count;
  const double log_h_obs = std::max(tables.log_h(a_obs), kLogClip);
  const double q_obs = eval.prob(pv_obs);

  AtomValues out;
  if (q_obs > 0.0) {
    const double ratio = std::exp(clipped_log(q_obs) - log_h_obs);
    out.mu = first_mu + ratio * (cluster.ybar() - tables.gbar(a_obs));
  } else {
    out.mu = first_mu;
  }
  double corr1 = 0.0, corr0 = 0.0;
  for (int j = 0; j < n; ++j) {
    const int t = a_obs.bit(j);
    const double mq = eval.marginal_prob(pv_obs, j);
    if (mq <= 0.0) continue;
    const double ratio = std::exp(clipped_log(mq) - log_h_obs);
    const double resid = cluster.y[static_cast<std::size_t>(j)] - tables.g_at(j, t, s_obs - t);
    (t ? corr1 : corr0) += ratio * resid;
  }
  out.mu1 = first_mu1 + corr1 / n;
  out.mu0 = first_mu0 + corr0 / n;
  out.floored = eval.denominator_floored();
  return out;
}

}  // namespace

bool EstimatorConfig::exact_for(int n) const {
  if (!subsample_r.has_value()) return true;
  const double lattice = std::ldexp(1.0, n);
  return lattice <= std::max<double>(*subsample_r, exact_limit);
}

std::string EstimatorConfig::r_string() const {
  return subsample_r.has_value() ? std::to_string(*subsample_r) : "exact";
}

EstimandKind parse_estimand_kind(const std::string& name) {
  if (name == "mu") return EstimandKind::Mu;
  if (name == "mu1") return EstimandKind::Mu1;
  if (name == "mu0") return EstimandKind::Mu0;
  if (name == "de") return EstimandKind::De;
  if (name == "se1") return EstimandKind::Se1;
  if (name == "se0") return EstimandKind::Se0;
  if (name == "oe") return EstimandKind::Oe;
  if (name == "te") return EstimandKind::Te;
  throw Error(ErrorKind::UnknownEstimand, "unknown estimand '" + name + "'");
}

std::string to_string(EstimandKind kind) {
  switch (kind) {
    case EstimandKind::Mu: return "mu";
    case EstimandKind::Mu1: return "mu1";
    case EstimandKind::Mu0: return "mu0";
    case EstimandKind::De: return "de";
    case EstimandKind::Se1: return "se1";
    case EstimandKind::Se0: return "se0";
    case EstimandKind::Oe: return "oe";
    case EstimandKind::Te: return "te";
  }
  return {};
}

bool needs_second_policy(EstimandKind kind) {
  return kind == EstimandKind::Se1 || kind == EstimandKind::Se0 || kind == EstimandKind::Oe ||
         kind == EstimandKind::Te;
}

std::string EstimandSpec::label() const { return to_string(kind); }

double variance(std::span<const double> eifs, double point) {
  if (eifs.empty()) return 0.0;
  double acc = 0.0;
  for (double v : eifs) acc += (v - point) * (v - point);
  return acc / static_cast<double>(eifs.size());
}

double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw Error(ErrorKind::DomainError, "quantile probability must lie in (0,1)");
  }
  // Acklam's rational approximation with one Halley refinement
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  const double u = e * std::sqrt(2.0 * M_PI) * std::exp(x * x / 2.0);
  return x - u / (1.0 + x * u / 2.0);
}

double uncentered_eif_mu(const ClusterObservation& cluster, const NuisanceModel& nuisance,
                         const PolicySpec& policy, const LatticeSpec& lattice) {
  const auto tables = build_tables(nuisance, cluster);
  return cluster_atoms(cluster, tables, policy, lattice).mu;
}

double uncentered_eif_mu_t(const ClusterObservation& cluster, const NuisanceModel& nuisance,
                           const PolicySpec& policy, int t, const LatticeSpec& lattice) {
  const auto tables = build_tables(nuisance, cluster);
  const AtomValues v = cluster_atoms(cluster, tables, policy, lattice);
  return t == 1 ? v.mu1 : v.mu0;
}

namespace {

struct SplitOutput {
  std::vector<double> eif;     // n_atoms * m, atom-major
  std::vector<double> points;  // n_atoms
  std::vector<double> sigma2;  // n_atoms
  std::vector<int> fold_of;    // per-cluster fold assignment
  std::vector<int> fold_sizes;
  std::vector<std::string> notes;
  std::vector<int> floored_clusters;  // indices with a TPB denominator floor

  // sigma2(w) = K^-1 sum_k P_m^k[(phi - point)^2] for an arbitrary column
  double fold_weighted_sigma2(const double* col_a, const double* col_b, double point) const {
    const int folds = static_cast<int>(fold_sizes.size());
    double sigma2 = 0.0;
    for (int k = 0; k < folds; ++k) {
      double ss = 0.0;
      for (std::size_t i = 0; i < fold_of.size(); ++i) {
        if (fold_of[i] != k) continue;
        const double v = (col_b ? col_a[i] - col_b[i] : col_a[i]) - point;
        ss += v * v;
      }
      sigma2 += ss / fold_sizes[static_cast<std::size_t>(k)];
    }
    return sigma2 / folds;
  }
};

struct AtomPick {
  double point = 0.0;
  double sigma2 = 0.0;
  int split = 0;  // split whose EIF vector is attached
  double spread = 0.0;
};

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t k = v.size() / 2;
  if (v.size() % 2 == 1) return v[k];
  return 0.5 * (v[k - 1] + v[k]);
}

}  // namespace

EstimateReport estimate(const Dataset& data, const std::vector<EstimandSpec>& estimands,
                        const EstimatorConfig& cfg, const NuisanceModel* fixed_nuisance) {
  const int m = data.m();
  if (cfg.folds < 2) throw Error(ErrorKind::BadConfig, "K must be at least 2");
  if (cfg.splits < 1) throw Error(ErrorKind::BadConfig, "S must be at least 1");
  if (!(cfg.alpha_level > 0.0 && cfg.alpha_level < 1.0)) {
    throw Error(ErrorKind::BadConfig, "alpha_level must lie in (0,1)");
  }
  if (m < 2 * cfg.folds) {
    throw Error(ErrorKind::TooFewClusters, "need at least 2K clusters, have " + std::to_string(m));
  }

  // resolve the distinct policies referenced by the estimands
  std::vector<PolicySpec> policies;
  std::map<std::string, int> policy_index;
  auto intern = [&](const PolicySpec& spec) {
    PolicySpec copy = spec;
    copy.validate();
    copy.resolve(data);
    const std::string key = copy.canonical();
    auto it = policy_index.find(key);
    if (it != policy_index.end()) return it->second;
    const int idx = static_cast<int>(policies.size());
    policies.push_back(copy);
    policy_index.emplace(key, idx);
    return idx;
  };
  struct ResolvedEstimand {
    EstimandKind kind;
    int q = -1;
    int q_prime = -1;
  };
  std::vector<ResolvedEstimand> resolved;
  for (const auto& spec : estimands) {
    ResolvedEstimand re;
    re.kind = spec.kind;
    re.q = intern(spec.q);
    if (needs_second_policy(spec.kind)) {
      if (!spec.q_prime.has_value()) {
        throw Error(ErrorKind::BadConfig,
                    "estimand '" + to_string(spec.kind) + "' needs a second policy");
      }
      re.q_prime = intern(*spec.q_prime);
    }
    resolved.push_back(re);
  }

  const int n_policies = static_cast<int>(policies.size());
  const int n_atoms = 3 * n_policies;
  auto atom_col = [&](int policy, int which) { return policy * 3 + which; };

  const int S = cfg.splits;
  std::vector<SplitOutput> splits(static_cast<std::size_t>(S));

  for (int s = 0; s < S; ++s) {
    SplitOutput& out = splits[static_cast<std::size_t>(s)];
    out.eif.assign(static_cast<std::size_t>(n_atoms) * static_cast<std::size_t>(m), 0.0);

    // shuffle then deal round-robin so fold sizes differ by at most one
    std::vector<int> order(static_cast<std::size_t>(m));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(cfg.seed, Stream::Shuffle, static_cast<std::uint64_t>(s));
    shuffle_rng.shuffle(order);
    out.fold_of.assign(static_cast<std::size_t>(m), 0);
    std::vector<int>& fold_of = out.fold_of;
    for (int pos = 0; pos < m; ++pos) {
      fold_of[static_cast<std::size_t>(order[static_cast<std::size_t>(pos)])] = pos % cfg.folds;
    }
    out.fold_sizes.assign(static_cast<std::size_t>(cfg.folds), 0);
    for (int i = 0; i < m; ++i) out.fold_sizes[static_cast<std::size_t>(fold_of[static_cast<std::size_t>(i)])]++;

    // one nuisance fit per fold, trained on the complement
    std::vector<NuisanceModel> nuisances(static_cast<std::size_t>(cfg.folds));
    if (fixed_nuisance == nullptr) {
      parallel_for(static_cast<std::size_t>(cfg.folds), cfg.threads, [&](std::size_t k) {
        Dataset train;
        train.p = data.p;
        train.column_names = data.column_names;
        for (int i = 0; i < m; ++i) {
          if (fold_of[static_cast<std::size_t>(i)] != static_cast<int>(k)) {
            train.clusters.push_back(data.clusters[static_cast<std::size_t>(i)]);
          }
        }
        nuisances[k] = fit_nuisance(
            train, cfg.learner,
            mix64(cfg.seed, static_cast<std::uint64_t>(s) * 1000 + k), cfg.clip_eps,
            static_cast<int>(k));
      });
      for (const auto& nm : nuisances) {
        for (const auto& note : nm.notes) out.notes.push_back(note);
      }
    }

    std::vector<char> floored(static_cast<std::size_t>(m), 0);
    parallel_for(static_cast<std::size_t>(m), cfg.threads, [&](std::size_t i) {
      const ClusterObservation& cluster = data.clusters[i];
      const NuisanceModel& nuisance =
          fixed_nuisance != nullptr ? *fixed_nuisance
                                    : nuisances[static_cast<std::size_t>(fold_of[i])];
      const auto tables = build_tables(nuisance, cluster);
      LatticeSpec lattice = LatticeSpec::make_exact();
      if (!cfg.exact_for(cluster.n)) {
        lattice = LatticeSpec::subsample(
            *cfg.subsample_r,
            mix64(cfg.seed, (static_cast<std::uint64_t>(s) << 32) ^ (i + 1)));
      }
      for (int q = 0; q < n_policies; ++q) {
        const AtomValues v = cluster_atoms(cluster, tables, policies[static_cast<std::size_t>(q)],
                                           lattice);
        out.eif[static_cast<std::size_t>(atom_col(q, 0)) * m + i] = v.mu;
        out.eif[static_cast<std::size_t>(atom_col(q, 1)) * m + i] = v.mu1;
        out.eif[static_cast<std::size_t>(atom_col(q, 2)) * m + i] = v.mu0;
        if (v.floored) floored[i] = 1;
      }
    });
    for (int i = 0; i < m; ++i) {
      if (floored[static_cast<std::size_t>(i)]) out.floored_clusters.push_back(i);
    }

    // fold-averaged points and dispersions
    out.points.assign(static_cast<std::size_t>(n_atoms), 0.0);
    out.sigma2.assign(static_cast<std::size_t>(n_atoms), 0.0);
    for (int atom = 0; atom < n_atoms; ++atom) {
      const double* col = out.eif.data() + static_cast<std::size_t>(atom) * m;
      double point = 0.0;
      for (int k = 0; k < cfg.folds; ++k) {
        double fold_sum = 0.0;
        for (int i = 0; i < m; ++i) {
          if (fold_of[static_cast<std::size_t>(i)] == k) fold_sum += col[i];
        }
        point += fold_sum / out.fold_sizes[static_cast<std::size_t>(k)];
      }
      point /= cfg.folds;
      double sigma2 = 0.0;
      for (int k = 0; k < cfg.folds; ++k) {
        double fold_ss = 0.0;
        for (int i = 0; i < m; ++i) {
          if (fold_of[static_cast<std::size_t>(i)] == k) {
            fold_ss += (col[i] - point) * (col[i] - point);
          }
        }
        sigma2 += fold_ss / out.fold_sizes[static_cast<std::size_t>(k)];
      }
      sigma2 /= cfg.folds;
      out.points[static_cast<std::size_t>(atom)] = point;
      out.sigma2[static_cast<std::size_t>(atom)] = sigma2;
    }
  }

  // median-of-S aggregation per atom; the split attaining the median point
  // supplies the attached per-cluster EIF vector
  std::vector<AtomPick> picks(static_cast<std::size_t>(n_atoms));
  for (int atom = 0; atom < n_atoms; ++atom) {
    std::vector<double> pts(static_cast<std::size_t>(S));
    for (int s = 0; s < S; ++s) pts[static_cast<std::size_t>(s)] = splits[static_cast<std::size_t>(s)].points[static_cast<std::size_t>(atom)];
    AtomPick& pick = picks[static_cast<std::size_t>(atom)];
    if (S == 1) {
      pick.point = pts[0];
      pick.sigma2 = splits[0].sigma2[static_cast<std::size_t>(atom)];
      pick.split = 0;
      pick.spread = 0.0;
    } else {
      const double med = median_of(pts);
      pick.point = med;
      std::vector<double> inflated(static_cast<std::size_t>(S));
      for (int s = 0; s < S; ++s) {
        const double d = pts[static_cast<std::size_t>(s)] - med;
        inflated[static_cast<std::size_t>(s)] =
            splits[static_cast<std::size_t>(s)].sigma2[static_cast<std::size_t>(atom)] + d * d;
      }
      pick.sigma2 = median_of(inflated);
      int best = 0;
      for (int s = 1; s < S; ++s) {
        if (std::abs(pts[static_cast<std::size_t>(s)] - med) <
            std::abs(pts[static_cast<std::size_t>(best)] - med)) {
          best = s;
        }
      }
      pick.split = best;
      pick.spread = *std::max_element(pts.begin(), pts.end()) -
                    *std::min_element(pts.begin(), pts.end());
    }
  }

  EstimateReport report;
  report.seed = cfg.seed;
  report.folds = cfg.folds;
  report.r_str = cfg.r_string();
  report.splits = S;
  report.m = m;
  report.fold_sizes = splits[0].fold_sizes;
  {
    std::map<std::string, int> note_counts;
    for (const auto& sp : splits) {
      for (const auto& note : sp.notes) note_counts[note]++;
    }
    for (const auto& [note, count] : note_counts) {
      report.notes.push_back(note + " (x" + std::to_string(count) + ")");
    }
  }

  const double z = normal_quantile(1.0 - cfg.alpha_level / 2.0);
  auto attach_eif = [&](int atom, int split) {
    const double* col =
        splits[static_cast<std::size_t>(split)].eif.data() + static_cast<std::size_t>(atom) * m;
    return std::vector<double>(col, col + m);
  };
  auto policy_string = [&](const ResolvedEstimand& re) {
    std::string label = policies[static_cast<std::size_t>(re.q)].canonical();
    if (re.q_prime >= 0) label += "|" + policies[static_cast<std::size_t>(re.q_prime)].canonical();
    return label;
  };

  for (std::size_t e = 0; e < resolved.size(); ++e) {
    const ResolvedEstimand& re = resolved[e];
    EstimandResult res;
    res.estimand = estimands[e].label();
    res.policy = policy_string(re);
    res.param = policies[static_cast<std::size_t>(re.q)].param();

    // atom pair forming the estimand: single atom or a difference
    int atom_a = -1, atom_b = -1;
    switch (re.kind) {
      case EstimandKind::Mu: atom_a = atom_col(re.q, 0); break;
      case EstimandKind::Mu1: atom_a = atom_col(re.q, 1); break;
      case EstimandKind::Mu0: atom_a = atom_col(re.q, 2); break;
      case EstimandKind::De: atom_a = atom_col(re.q, 1); atom_b = atom_col(re.q, 2); break;
      case EstimandKind::Se1: atom_a = atom_col(re.q, 1); atom_b = atom_col(re.q_prime, 1); break;
      case EstimandKind::Se0: atom_a = atom_col(re.q, 2); atom_b = atom_col(re.q_prime, 2); break;
      case EstimandKind::Oe: atom_a = atom_col(re.q, 0); atom_b = atom_col(re.q_prime, 0); break;
      case EstimandKind::Te: atom_a = atom_col(re.q, 1); atom_b = atom_col(re.q_prime, 2); break;
    }

    double spread = 0.0;
    if (atom_b < 0) {
      const AtomPick& pick = picks[static_cast<std::size_t>(atom_a)];
      res.point = pick.point;
      res.se = std::sqrt(pick.sigma2 / m);
      res.per_cluster_eif = attach_eif(atom_a, pick.split);
      spread = pick.spread;
    } else {
      // contrasts equal the differences of the component reports exactly
      const AtomPick& pa = picks[static_cast<std::size_t>(atom_a)];
      const AtomPick& pb = picks[static_cast<std::size_t>(atom_b)];
      res.point = pa.point - pb.point;
      const auto eif_a = attach_eif(atom_a, pa.split);
      const auto eif_b = attach_eif(atom_b, pb.split);
      res.per_cluster_eif.resize(static_cast<std::size_t>(m));
      for (int i = 0; i < m; ++i) {
        res.per_cluster_eif[static_cast<std::size_t>(i)] =
            eif_a[static_cast<std::size_t>(i)] - eif_b[static_cast<std::size_t>(i)];
      }
      // per-split contrast dispersion with the median-of-S inflation
      std::vector<double> inflated(static_cast<std::size_t>(S));
      std::vector<double> pts(static_cast<std::size_t>(S));
      for (int s = 0; s < S; ++s) {
        const SplitOutput& sp = splits[static_cast<std::size_t>(s)];
        const double* ca = sp.eif.data() + static_cast<std::size_t>(atom_a) * m;
        const double* cb = sp.eif.data() + static_cast<std::size_t>(atom_b) * m;
        const double pt = sp.points[static_cast<std::size_t>(atom_a)] -
                          sp.points[static_cast<std::size_t>(atom_b)];
        pts[static_cast<std::size_t>(s)] = pt;
        const double sigma2 = sp.fold_weighted_sigma2(ca, cb, pt);
        const double dd = pt - res.point;
        inflated[static_cast<std::size_t>(s)] = sigma2 + dd * dd;
      }
      res.se = std::sqrt((S == 1 ? inflated[0] : median_of(inflated)) / m);
      if (S > 1) {
        spread = *std::max_element(pts.begin(), pts.end()) -
                 *std::min_element(pts.begin(), pts.end());
      }
    }
    res.ci_lo = res.point - z * res.se;
    res.ci_hi = res.point + z * res.se;

    int floored_total = 0;
    for (const auto& sp : splits) floored_total += static_cast<int>(sp.floored_clusters.size());
    if (floored_total > 0) {
      res.flags.push_back("tpb_denominator_floored=" + std::to_string(floored_total));
    }
    if (S > 1) {
      char buf[48];
      std::snprintf(buf, sizeof(buf), "s_spread=%.6g", spread);
      res.flags.push_back(buf);
    }
    report.results.push_back(std::move(res));
  }
  return report;
}

EstimateReport estimate_ipw(const Dataset& data, const std::vector<EstimandSpec>& estimands,
                            const EstimatorConfig& cfg) {
  NuisanceModel nuisance;
  nuisance.clip_eps = cfg.clip_eps;
  nuisance.propensity =
      fit_propensity(data, cfg.learner, mix64(cfg.seed, 0x1997ULL), cfg.clip_eps);
  return estimate_ipw(data, estimands, cfg, nuisance);
}

EstimateReport estimate_ipw(const Dataset& data, const std::vector<EstimandSpec>& estimands,
                            const EstimatorConfig& cfg, const NuisanceModel& nuisance) {
  const int m = data.m();
  if (m < 1) throw Error(ErrorKind::EmptyDataset, "empty dataset");

  std::vector<PolicySpec> policies;
  std::map<std::string, int> policy_index;
  auto intern = [&](const PolicySpec& spec) {
    PolicySpec copy = spec;
    copy.validate();
    copy.resolve(data);
    const std::string key = copy.canonical();
    auto it = policy_index.find(key);
    if (it != policy_index.end()) return it->second;
    policies.push_back(copy);
    policy_index.emplace(key, static_cast<int>(policies.size()) - 1);
    return static_cast<int>(policies.size()) - 1;
  };
  struct Resolved {
    EstimandKind kind;
    int q, q_prime;
  };
  std::vector<Resolved> resolved;
  for (const auto& spec : estimands) {
    Resolved re{spec.kind, intern(spec.q), -1};
    if (needs_second_policy(spec.kind)) {
      if (!spec.q_prime.has_value()) {
        throw Error(ErrorKind::BadConfig,
                    "estimand '" + to_string(spec.kind) + "' needs a second policy");
      }
      re.q_prime = intern(*spec.q_prime);
    }
    resolved.push_back(re);
  }

  const int n_policies = static_cast<int>(policies.size());
  const int n_atoms = 3 * n_policies;
  std::vector<double> summands(static_cast<std::size_t>(n_atoms) * static_cast<std::size_t>(m), 0.0);
  std::vector<char> floored(static_cast<std::size_t>(m), 0);

  parallel_for(static_cast<std::size_t>(m), cfg.threads, [&](std::size_t i) {
    const ClusterObservation& cluster = data.clusters[i];
    const int n = cluster.n;
    std::vector<double> pi(static_cast<std::size_t>(n));
    double log_h = 0.0;
    for (int j = 0; j < n; ++j) {
      pi[static_cast<std::size_t>(j)] = nuisance.propensity(cluster.x_row(j));
      log_h += cluster.a_bits.bit(j) ? std::log(pi[static_cast<std::size_t>(j)])
                                     : std::log1p(-pi[static_cast<std::size_t>(j)]);
    }
    log_h = std::max(log_h, kLogClip);
    for (int q = 0; q < n_policies; ++q) {
      PolicyEvaluator eval(policies[static_cast<std::size_t>(q)], cluster, pi);
      if (eval.denominator_floored()) floored[i] = 1;
      const auto pv = eval.prepare(cluster.a_bits);
      const double q_obs = eval.prob(pv);
      double v_mu = 0.0, v_mu1 = 0.0, v_mu0 = 0.0;
      if (q_obs > 0.0) {
        v_mu = std::exp(clipped_log(q_obs) - log_h) * cluster.ybar();
      }
      for (int j = 0; j < n; ++j) {
        const double mq = eval.marginal_prob(pv, j);
        if (mq <= 0.0) continue;
        const double term = std::exp(clipped_log(mq) - log_h) *
                            cluster.y[static_cast<std::size_t>(j)] / n;
        (cluster.a_bits.bit(j) ? v_mu1 : v_mu0) += term;
      }
      summands[static_cast<std::size_t>(q * 3 + 0) * m + i] = v_mu;
      summands[static_cast<std::size_t>(q * 3 + 1) * m + i] = v_mu1;
      summands[static_cast<std::size_t>(q * 3 + 2) * m + i] = v_mu0;
    }
  });

  EstimateReport report;
  report.seed = cfg.seed;
  report.folds = 1;
  report.r_str = "exact";
  report.splits = 1;
  report.m = m;
  report.fold_sizes = {m};

  std::vector<double> points(static_cast<std::size_t>(n_atoms));
  for (int atom = 0; atom < n_atoms; ++atom) {
    const double* col = summands.data() + static_cast<std::size_t>(atom) * m;
    points[static_cast<std::size_t>(atom)] =
        std::accumulate(col, col + m, 0.0) / static_cast<double>(m);
  }

  const double z = normal_quantile(1.0 - cfg.alpha_level / 2.0);
  for (std::size_t e = 0; e < resolved.size(); ++e) {
    const Resolved& re = resolved[e];
    EstimandResult res;
    res.estimand = estimands[e].label();
    res.policy = policies[static_cast<std::size_t>(re.q)].canonical() +
                 (re.q_prime >= 0
                      ? "|" + policies[static_cast<std::size_t>(re.q_prime)].canonical()
                      : "");
    res.param = policies[static_cast<std::size_t>(re.q)].param();
    int atom_a = -1, atom_b = -1;
    switch (re.kind) {
      case EstimandKind::Mu: atom_a = re.q * 3 + 0; break;
      case EstimandKind::Mu1: atom_a = re.q * 3 + 1; break;
      case EstimandKind::Mu0: atom_a = re.q * 3 + 2; break;
      case EstimandKind::De: atom_a = re.q * 3 + 1; atom_b = re.q * 3 + 2; break;
      case EstimandKind::Se1: atom_a = re.q * 3 + 1; atom_b = re.q_prime * 3 + 1; break;
      case EstimandKind::Se0: atom_a = re.q * 3 + 2; atom_b = re.q_prime * 3 + 2; break;
      case EstimandKind::Oe: atom_a = re.q * 3 + 0; atom_b = re.q_prime * 3 + 0; break;
      case EstimandKind::Te: atom_a = re.q * 3 + 1; atom_b = re.q_prime * 3 + 2; break;
    }
    res.per_cluster_eif.resize(static_cast<std::size_t>(m));
    const double* ca = summands.data() + static_cast<std::size_t>(atom_a) * m;
    for (int i = 0; i < m; ++i) {
      res.per_cluster_eif[static_cast<std::size_t>(i)] = ca[i];
    }
    res.point = points[static_cast<std::size_t>(atom_a)];
    if (atom_b >= 0) {
      const double* cb = summands.data() + static_cast<std::size_t>(atom_b) * m;
      for (int i = 0; i < m; ++i) res.per_cluster_eif[static_cast<std::size_t>(i)] -= cb[i];
      res.point -= points[static_cast<std::size_t>(atom_b)];
    }
    res.se = std::sqrt(variance(res.per_cluster_eif, res.point) / m);
    res.ci_lo = res.point - z * res.se;
    res.ci_hi = res.point + z * res.se;
    int fl = 0;
    for (int i = 0; i < m; ++i) fl += floored[static_cast<std::size_t>(i)];
    if (fl > 0) res.flags.push_back("tpb_denominator_floored=" + std::to_string(fl));
    report.results.push_back(std::move(res));
  }
  return report;
}

}  // namespace cpe
