#include "cpe/simulation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "cpe/parallel.hpp"
#include "json.hpp"

namespace cpe {

namespace {

double expit(double z) { return 1.0 / (1.0 + std::exp(-z)); }

std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  z ^= z >> 30;
  z *= 0xbf58476d1ce4e5b9ULL;
  z ^= z >> 27;
  z *= 0x94d049bb133111ebULL;
  z ^= z >> 31;
  return z;
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

SizeDist SizeDist::parse(const std::string& text) {
  auto colon = text.find(':');
  const std::string head = text.substr(0, colon);
  const std::string rest = colon == std::string::npos ? "" : text.substr(colon + 1);
  try {
    if (head == "point") return SizeDist::point(std::stoi(rest));
    if (head == "uniform") {
      auto dash = rest.find('-');
      if (dash == std::string::npos) throw std::invalid_argument("range");
      return SizeDist::uniform(std::stoi(rest.substr(0, dash)), std::stoi(rest.substr(dash + 1)));
    }
  } catch (const std::exception&) {
    throw Error(ErrorKind::BadConfig, "bad size distribution '" + text + "'");
  }
  throw Error(ErrorKind::BadConfig, "unknown size distribution '" + text + "'");
}

int SizeDist::sample(Rng& rng) const {
  if (lo == hi) return lo;
  return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

std::string SizeDist::canonical() const {
  if (lo == hi) return "point:" + std::to_string(lo);
  return "uniform:" + std::to_string(lo) + "-" + std::to_string(hi);
}

double dgp_true_propensity(std::span<const double> x_row) {
  const double x1 = x_row[0], x2 = x_row[1], c = x_row[2];
  return expit(0.1 + 0.2 * std::abs(x1) + 0.2 * std::abs(x1) * x2 + 0.1 * (c > 0.0 ? 1.0 : 0.0));
}

double dgp_true_outcome(double a, double abar_minus, std::span<const double> x_row) {
  const double x1 = x_row[0], x2 = x_row[1], c = x_row[2];
  return expit(3.0 - 2.0 * a - abar_minus - 1.5 * std::abs(x1) + 2.0 * x2 -
               3.0 * std::abs(x1) * x2 - 2.0 * (c > 0.0 ? 1.0 : 0.0));
}

NuisanceModel dgp_oracle_nuisance() {
  return make_oracle_nuisance(
      [](std::span<const double> x) { return dgp_true_propensity(x); },
      [](double a, double abar, std::span<const double> x) {
        return dgp_true_outcome(a, abar, x);
      },
      1e-6);
}

Dataset generate_dgp(const DgpConfig& cfg) {
  Dataset data;
  data.p = 3;
  data.column_names = {"x1", "x2", "c"};
  data.clusters.reserve(static_cast<std::size_t>(cfg.m));
  for (int i = 0; i < cfg.m; ++i) {
    Rng rng(cfg.seed, Stream::Dgp, static_cast<std::uint64_t>(i));
    const int n = cfg.size_dist.sample(rng);
    const double c = rng.normal();
    std::vector<double> x(static_cast<std::size_t>(n) * 3);
    std::vector<double> a(static_cast<std::size_t>(n));
    std::vector<double> y(static_cast<std::size_t>(n));
    for (int j = 0; j < n; ++j) {
      x[static_cast<std::size_t>(j) * 3 + 0] = rng.normal();
      x[static_cast<std::size_t>(j) * 3 + 1] = rng.bernoulli(0.5) ? 1.0 : 0.0;
      x[static_cast<std::size_t>(j) * 3 + 2] = c;
    }
    // all treatments first, then outcomes from the realized A
    int s = 0;
    for (int j = 0; j < n; ++j) {
      const auto row = std::span<const double>(x.data() + static_cast<std::size_t>(j) * 3, 3);
      a[static_cast<std::size_t>(j)] = rng.bernoulli(dgp_true_propensity(row)) ? 1.0 : 0.0;
      s += static_cast<int>(a[static_cast<std::size_t>(j)]);
    }
    for (int j = 0; j < n; ++j) {
      const auto row = std::span<const double>(x.data() + static_cast<std::size_t>(j) * 3, 3);
      const double aj = a[static_cast<std::size_t>(j)];
      const double abar = n <= 1 ? 0.0 : (s - aj) / static_cast<double>(n - 1);
      y[static_cast<std::size_t>(j)] = rng.bernoulli(dgp_true_outcome(aj, abar, row)) ? 1.0 : 0.0;
    }
    data.clusters.push_back(make_cluster(std::move(y), std::move(a), std::move(x), 3));
  }
  return data;
}

namespace {

constexpr int kTruthExactMax = 14;
constexpr int kTruthDraws = 4096;

// plug-in value sum_a w(a)^T G(a) for the three atoms of one policy
struct PlugInAtoms {
  double mu = 0.0, mu1 = 0.0, mu0 = 0.0;
};

PlugInAtoms plug_in_atoms(const ClusterObservation& cluster, const ClusterNuisanceTables& tables,
                          const PolicySpec& policy, Rng& rng) {
  const int n = cluster.n;
  PolicyEvaluator eval(policy, cluster, tables.pi);
  PlugInAtoms out;

  if (n <= kTruthExactMax) {
    const std::uint64_t total = std::uint64_t{1} << n;
    for (std::uint64_t mask = 0; mask < total; ++mask) {
      const TreatmentVector a{mask, n};
      const auto pv = eval.prepare(a);
      const double q = eval.prob(pv);
      const int s = pv.count;
      double gsum = 0.0;
      for (int j = 0; j < n; ++j) {
        const int b = a.bit(j);
        const double gj = tables.g_at(j, b, s - b);
        gsum += gj;
        const double mq = eval.marginal_prob(pv, j);
        (b ? out.mu1 : out.mu0) += mq * gj / n;
      }
      out.mu += q * gsum / n;
    }
    return out;
  }

  // Monte Carlo over a ~ Q: product policies draw unit Bernoullis from the
  // shifted propensities; TPB draws from H and rejects below the threshold.
  const bool tpb = policy.kind == PolicyKind::Tpb;
  std::vector<double> mass1(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) mass1[static_cast<std::size_t>(j)] = eval.unit_mass1(j);
  const int s_min = tpb ? std::max(0, static_cast<int>(std::ceil(policy.rho * n - 1e-9))) : 0;

  for (int q = 0; q < kTruthDraws; ++q) {
    TreatmentVector a{0, n};
    int s = 0;
    int tries = 0;
    for (;;) {
      a.bits = 0;
      s = 0;
      for (int j = 0; j < n; ++j) {
        if (rng.bernoulli(mass1[static_cast<std::size_t>(j)])) {
          a.bits |= std::uint64_t{1} << j;
          ++s;
        }
      }
      if (!tpb || s >= s_min || ++tries > 10000) break;
    }
    double gsum = 0.0;
    double m1 = 0.0, m0 = 0.0;
    for (int j = 0; j < n; ++j) {
      const int b = a.bit(j);
      const int s_other = s - b;
      gsum += tables.g_at(j, b, s_other);
      m1 += tables.g_at(j, 1, s_other);
      m0 += tables.g_at(j, 0, s_other);
    }
    out.mu += gsum / n;
    out.mu1 += m1 / n;
    out.mu0 += m0 / n;
  }
  out.mu /= kTruthDraws;
  out.mu1 /= kTruthDraws;
  out.mu0 /= kTruthDraws;
  return out;
}

double estimand_value(EstimandKind kind, const PlugInAtoms& a, const PlugInAtoms& b) {
  switch (kind) {
    case EstimandKind::Mu: return a.mu;
    case EstimandKind::Mu1: return a.mu1;
    case EstimandKind::Mu0: return a.mu0;
    case EstimandKind::De: return a.mu1 - a.mu0;
    case EstimandKind::Se1: return a.mu1 - b.mu1;
    case EstimandKind::Se0: return a.mu0 - b.mu0;
    case EstimandKind::Oe: return a.mu - b.mu;
    case EstimandKind::Te: return a.mu1 - b.mu0;
  }
  return 0.0;
}

}  // namespace

std::vector<TruthValue> true_values(const std::vector<EstimandSpec>& estimands,
                                    const DgpConfig& dgp, long mc_clusters, std::uint64_t seed,
                                    int threads) {
  // distinct policies across the estimands
  std::vector<PolicySpec> policies;
  std::vector<std::pair<int, int>> atom_refs;  // per estimand: (q index, q' index or -1)
  std::map<std::string, int> index;
  auto intern = [&](const PolicySpec& p) {
    const std::string key = p.canonical();
    auto it = index.find(key);
    if (it != index.end()) return it->second;
    policies.push_back(p);
    index.emplace(key, static_cast<int>(policies.size()) - 1);
    return static_cast<int>(policies.size()) - 1;
  };
  for (const auto& spec : estimands) {
    const int q = intern(spec.q);
    const int qp = spec.q_prime.has_value() ? intern(*spec.q_prime) : -1;
    if (needs_second_policy(spec.kind) && qp < 0) {
      throw Error(ErrorKind::BadConfig, "estimand needs a second policy");
    }
    atom_refs.emplace_back(q, qp);
  }
  for (auto& p : policies) p.validate();

  const std::size_t n_policies = policies.size();
  const std::size_t n_estimands = estimands.size();
  const std::size_t chunk = static_cast<std::size_t>(mc_clusters);
  // per-cluster estimand values, estimand-major
  std::vector<double> values(n_estimands * chunk, 0.0);
  const NuisanceModel oracle = dgp_oracle_nuisance();

  parallel_for(chunk, threads, [&](std::size_t i) {
    Rng rng(seed, Stream::Truth, static_cast<std::uint64_t>(i));
    // draw (X, N) only; treatments/outcomes are irrelevant for the truth
    const int n = dgp.size_dist.sample(rng);
    const double c = rng.normal();
    std::vector<double> x(static_cast<std::size_t>(n) * 3);
    for (int j = 0; j < n; ++j) {
      x[static_cast<std::size_t>(j) * 3 + 0] = rng.normal();
      x[static_cast<std::size_t>(j) * 3 + 1] = rng.bernoulli(0.5) ? 1.0 : 0.0;
      x[static_cast<std::size_t>(j) * 3 + 2] = c;
    }
    ClusterObservation cluster =
        make_cluster(std::vector<double>(static_cast<std::size_t>(n), 0.0),
                     std::vector<double>(static_cast<std::size_t>(n), 0.0), std::move(x), 3);
    const auto tables = build_tables(oracle, cluster);
    std::vector<PlugInAtoms> atoms(n_policies);
    for (std::size_t q = 0; q < n_policies; ++q) {
      // per-policy draw stream keyed by the policy itself, so cached values do
      // not depend on which other estimands were requested alongside
      Rng policy_rng(seed, stream_id(Stream::Truth, static_cast<std::uint64_t>(i)) ^ 1,
                     fnv1a(policies[q].canonical()));
      atoms[q] = plug_in_atoms(cluster, tables, policies[q], policy_rng);
    }
    for (std::size_t e = 0; e < n_estimands; ++e) {
      const auto [qa, qb] = atom_refs[e];
      values[e * chunk + i] = estimand_value(estimands[e].kind, atoms[static_cast<std::size_t>(qa)],
                                             qb >= 0 ? atoms[static_cast<std::size_t>(qb)]
                                                     : PlugInAtoms{});
    }
  });

  std::vector<TruthValue> out(n_estimands);
  for (std::size_t e = 0; e < n_estimands; ++e) {
    const double* col = values.data() + e * chunk;
    const double mean = std::accumulate(col, col + chunk, 0.0) / static_cast<double>(chunk);
    double ss = 0.0;
    for (std::size_t i = 0; i < chunk; ++i) ss += (col[i] - mean) * (col[i] - mean);
    out[e].truth = mean;
    out[e].mc_se = std::sqrt(ss / (static_cast<double>(chunk) - 1.0) / static_cast<double>(chunk));
  }
  return out;
}

TruthValue true_value(const EstimandSpec& estimand, const DgpConfig& dgp, long mc_clusters,
                      std::uint64_t seed, int threads) {
  return true_values({estimand}, dgp, mc_clusters, seed, threads)[0];
}

// ---------------------------------------------------------------------------
// truth cache

TruthCache::TruthCache(std::string path) : path_(std::move(path)) { load(); }

std::string TruthCache::key_for(const EstimandSpec& estimand, const SizeDist& sizes,
                                long mc_clusters, std::uint64_t seed) {
  std::string key = to_string(estimand.kind) + "|" + estimand.q.canonical();
  if (estimand.q_prime.has_value()) key += "|" + estimand.q_prime->canonical();
  key += "|sizes=" + sizes.canonical();
  key += "|mc=" + std::to_string(mc_clusters);
  key += "|seed=" + std::to_string(seed);
  return key;
}

void TruthCache::load() {
  entries_.clear();
  std::ifstream in(path_);
  if (!in) return;
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const std::exception&) {
    return;  // unreadable cache is treated as empty
  }
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    entries_[it.key()] = {it.value().value("truth", 0.0), it.value().value("mc_se", 0.0)};
  }
}

void TruthCache::save() const {
  nlohmann::ordered_json doc;
  for (const auto& [key, value] : entries_) {
    doc[key] = {{"truth", value.truth}, {"mc_se", value.mc_se}};
  }
  std::ofstream out(path_, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write truth cache '" + path_ + "'");
  out << doc.dump(1) << "\n";
}

std::vector<TruthValue> TruthCache::get_or_compute(const std::vector<EstimandSpec>& estimands,
                                                   const DgpConfig& dgp, long mc_clusters,
                                                   std::uint64_t seed, int threads) {
  std::vector<TruthValue> out(estimands.size());
  std::vector<std::size_t> missing;
  for (std::size_t e = 0; e < estimands.size(); ++e) {
    const std::string key = key_for(estimands[e], dgp.size_dist, mc_clusters, seed);
    auto it = entries_.find(key);
    if (it != entries_.end()) {
      out[e] = it->second;
    } else {
      missing.push_back(e);
    }
  }
  if (!missing.empty()) {
    std::vector<EstimandSpec> todo;
    todo.reserve(missing.size());
    for (std::size_t e : missing) todo.push_back(estimands[e]);
    const auto computed = true_values(todo, dgp, mc_clusters, seed, threads);
    for (std::size_t k = 0; k < missing.size(); ++k) {
      out[missing[k]] = computed[k];
      entries_[key_for(estimands[missing[k]], dgp.size_dist, mc_clusters, seed)] = computed[k];
    }
    save();
  }
  return out;
}

// ---------------------------------------------------------------------------
// benchmark

BenchEstimator parse_bench_estimator(const std::string& name) {
  if (name == "nss_ensemble") return BenchEstimator::NssEnsemble;
  if (name == "nss_logit" || name == "pss") return BenchEstimator::NssLogit;
  if (name == "ipw") return BenchEstimator::Ipw;
  if (name == "nss_oracle") return BenchEstimator::NssOracle;
  throw Error(ErrorKind::UnknownEstimator, "unknown estimator '" + name + "'");
}

std::string to_string(BenchEstimator kind) {
  switch (kind) {
    case BenchEstimator::NssEnsemble: return "nss_ensemble";
    case BenchEstimator::NssLogit: return "nss_logit";
    case BenchEstimator::Ipw: return "ipw";
    case BenchEstimator::NssOracle: return "nss_oracle";
  }
  return {};
}

namespace {

std::string estimand_row_label(const EstimandSpec& spec) {
  std::string label = to_string(spec.kind) + "[" + spec.q.canonical();
  if (spec.q_prime.has_value()) label += "|" + spec.q_prime->canonical();
  label += "]";
  return label;
}

}  // namespace

BenchmarkResult run_benchmark(const BenchmarkConfig& cfg) {
  if (cfg.replications < 2) {
    throw Error(ErrorKind::BadConfig, "benchmark needs at least 2 replications");
  }
  if (cfg.estimands.empty()) throw Error(ErrorKind::BadConfig, "no estimands requested");
  if (cfg.estimators.empty()) throw Error(ErrorKind::BadConfig, "no estimators requested");

  std::vector<TruthValue> truths;
  if (!cfg.truth_cache_path.empty()) {
    TruthCache cache(cfg.truth_cache_path);
    truths = cache.get_or_compute(cfg.estimands, cfg.dgp, cfg.truth_mc, cfg.truth_seed,
                                  cfg.threads);
  } else {
    truths = true_values(cfg.estimands, cfg.dgp, cfg.truth_mc, cfg.truth_seed, cfg.threads);
  }

  const int D = cfg.replications;
  const std::size_t n_est = cfg.estimands.size();
  const std::size_t n_kinds = cfg.estimators.size();
  // (estimator, estimand, replication) -> point & se
  std::vector<double> points(n_kinds * n_est * static_cast<std::size_t>(D), 0.0);
  std::vector<double> ses(n_kinds * n_est * static_cast<std::size_t>(D), 0.0);
  std::vector<char> failed(static_cast<std::size_t>(D), 0);
  std::vector<std::string> failure_notes(static_cast<std::size_t>(D));

  const NuisanceModel oracle = dgp_oracle_nuisance();

  parallel_for(static_cast<std::size_t>(D), cfg.threads, [&](std::size_t d) {
    // replication-derived seeds from the counter-based generator
    Rng derive(cfg.dgp.seed, Stream::Replication, static_cast<std::uint64_t>(d));
    DgpConfig dgp = cfg.dgp;
    dgp.seed = derive.next_u64();

    try {
      const Dataset data = generate_dgp(dgp);
      for (std::size_t k = 0; k < n_kinds; ++k) {
        EstimatorConfig est = cfg.est;
        est.threads = 1;  // replications already run in parallel
        est.seed = mix64(cfg.est.seed, static_cast<std::uint64_t>(d) * 131 + k);
        EstimateReport report;
        switch (cfg.estimators[k]) {
          case BenchEstimator::NssEnsemble:
            report = estimate(data, cfg.estimands, est);
            break;
          case BenchEstimator::NssLogit:
            est.learner = LearnerSpec::logit_only();
            report = estimate(data, cfg.estimands, est);
            break;
          case BenchEstimator::Ipw:
            est.learner = LearnerSpec::logit_only();
            report = estimate_ipw(data, cfg.estimands, est);
            break;
          case BenchEstimator::NssOracle:
            report = estimate(data, cfg.estimands, est, &oracle);
            break;
        }
        for (std::size_t e = 0; e < n_est; ++e) {
          points[(k * n_est + e) * static_cast<std::size_t>(D) + d] = report.results[e].point;
          ses[(k * n_est + e) * static_cast<std::size_t>(D) + d] = report.results[e].se;
        }
      }
    } catch (const std::exception& ex) {
      failed[d] = 1;
      failure_notes[d] = ex.what();
    }
  });

  BenchmarkResult result;
  result.replications = D;
  for (int d = 0; d < D; ++d) {
    if (failed[static_cast<std::size_t>(d)]) {
      ++result.failed_replications;
      result.warnings.push_back("replication " + std::to_string(d) + " failed: " +
                                failure_notes[static_cast<std::size_t>(d)]);
    }
  }

  const double z = normal_quantile(1.0 - cfg.est.alpha_level / 2.0);
  // comparator RMSEs per estimand
  std::vector<double> comparator_rmse(n_est, std::numeric_limits<double>::quiet_NaN());
  auto metrics_for = [&](std::size_t k, std::size_t e) {
    double bias = 0.0, mse = 0.0, ase = 0.0, cov = 0.0;
    std::vector<double> pts;
    pts.reserve(static_cast<std::size_t>(D));
    const double truth = truths[e].truth;
    for (int d = 0; d < D; ++d) {
      if (failed[static_cast<std::size_t>(d)]) continue;
      const double pt = points[(k * n_est + e) * static_cast<std::size_t>(D) + static_cast<std::size_t>(d)];
      const double se = ses[(k * n_est + e) * static_cast<std::size_t>(D) + static_cast<std::size_t>(d)];
      pts.push_back(pt);
      bias += pt - truth;
      mse += (pt - truth) * (pt - truth);
      ase += se;
      cov += (truth >= pt - z * se && truth <= pt + z * se) ? 1.0 : 0.0;
    }
    const double used = static_cast<double>(pts.size());
    BenchmarkRow row;
    row.truth = truth;
    row.bias = bias / used;
    row.rmse = std::sqrt(mse / used);
    row.ase = ase / used;
    row.cov = cov / used;
    const double mean = std::accumulate(pts.begin(), pts.end(), 0.0) / used;
    double ss = 0.0;
    for (double pt : pts) ss += (pt - mean) * (pt - mean);
    row.ese = used > 1 ? std::sqrt(ss / (used - 1.0)) : 0.0;
    return row;
  };

  for (std::size_t k = 0; k < n_kinds; ++k) {
    if (cfg.estimators[k] != cfg.comparator) continue;
    for (std::size_t e = 0; e < n_est; ++e) comparator_rmse[e] = metrics_for(k, e).rmse;
  }
  for (std::size_t k = 0; k < n_kinds; ++k) {
    for (std::size_t e = 0; e < n_est; ++e) {
      BenchmarkRow row = metrics_for(k, e);
      row.estimand = estimand_row_label(cfg.estimands[e]);
      row.estimator = to_string(cfg.estimators[k]);
      row.rmse_ratio = row.rmse / comparator_rmse[e];
      result.rows.push_back(std::move(row));
    }
  }
  return result;
}

std::string benchmark_to_csv(const BenchmarkResult& result) {
  std::string out = "estimand,estimator,truth,bias,rmse,ase,ese,cov,rmse_ratio\n";
  char buf[256];
  for (const auto& row : result.rows) {
    std::snprintf(buf, sizeof(buf), "%s,%s,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                  row.estimand.c_str(), row.estimator.c_str(), row.truth, row.bias, row.rmse,
                  row.ase, row.ese, row.cov, row.rmse_ratio);
    out += buf;
  }
  return out;
}

void write_benchmark_csv(const BenchmarkResult& result, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write '" + path + "'");
  out << benchmark_to_csv(result);
}

}  // namespace cpe
