#include "cli.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>

#include "cpe/report.hpp"
#include "json.hpp"

namespace cpe::cli {

namespace {

using json = nlohmann::json;

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoFailure, "cannot open config '" + path + "'");
  try {
    json doc;
    in >> doc;
    return doc;
  } catch (const std::exception& ex) {
    throw Error(ErrorKind::BadConfig, "config '" + path + "' is not valid JSON: " + ex.what());
  }
}

PolicySpec policy_from_grid_entry(const json& entry, double value) {
  const std::string type = entry.at("type").get<std::string>();
  if (type == "typeb") return PolicySpec::type_b(value);
  if (type == "cips") {
    const std::string mode = entry.value("mode", "constant");
    if (mode != "constant" && mode != "varying") {
      throw Error(ErrorKind::BadConfig, "CIPS grid mode must be constant or varying");
    }
    return PolicySpec::cips(value, mode == "constant" ? CipsDeltaMode::Constant
                                                      : CipsDeltaMode::Varying);
  }
  if (type == "cms") return PolicySpec::cms(value, entry.at("xstar").get<std::string>());
  if (type == "tpb") return PolicySpec::tpb(value);
  throw Error(ErrorKind::UnknownPolicy, "unknown policy type '" + type + "' in grid");
}

std::vector<PolicySpec> parse_policies(const json& doc) {
  std::vector<PolicySpec> out;
  if (!doc.contains("policies")) return out;
  for (const auto& entry : doc.at("policies")) {
    if (entry.is_string()) {
      out.push_back(parse_policy(entry.get<std::string>()));
      continue;
    }
    if (entry.contains("spec")) {
      out.push_back(parse_policy(entry.at("spec").get<std::string>()));
      continue;
    }
    if (entry.contains("grid")) {
      const auto& grid = entry.at("grid");
      const double from = grid.at("from").get<double>();
      const double to = grid.at("to").get<double>();
      const int points = grid.at("points").get<int>();
      if (points < 1) throw Error(ErrorKind::BadConfig, "grid needs at least 1 point");
      for (int g = 0; g < points; ++g) {
        const double value =
            points == 1 ? from : from + (to - from) * g / static_cast<double>(points - 1);
        out.push_back(policy_from_grid_entry(entry, value));
      }
      continue;
    }
    throw Error(ErrorKind::BadConfig, "policy entry needs 'spec' or 'grid'");
  }
  return out;
}

// Per-policy estimand names expand over every policy; contrast names pair the
// first and second policy (exactly two must be configured).
std::vector<EstimandSpec> build_estimands(const std::vector<PolicySpec>& policies,
                                          const std::vector<std::string>& names,
                                          const json* contrasts) {
  std::vector<EstimandSpec> out;
  if (policies.empty()) throw Error(ErrorKind::BadConfig, "no policies configured");
  for (const auto& name : names) {
    const EstimandKind kind = parse_estimand_kind(name);
    if (!needs_second_policy(kind)) {
      for (const auto& p : policies) out.push_back({kind, p, std::nullopt});
    } else {
      if (policies.size() != 2) {
        throw Error(ErrorKind::BadConfig, "estimand '" + name +
                                              "' contrasts two policies; configure exactly two "
                                              "policies or use a contrasts entry");
      }
      out.push_back({kind, policies[0], policies[1]});
    }
  }
  if (contrasts != nullptr) {
    for (const auto& entry : *contrasts) {
      const EstimandKind kind = parse_estimand_kind(entry.at("kind").get<std::string>());
      const std::size_t q = entry.at("q").get<std::size_t>();
      if (q >= policies.size()) throw Error(ErrorKind::BadConfig, "contrast q index out of range");
      EstimandSpec spec{kind, policies[q], std::nullopt};
      if (needs_second_policy(kind)) {
        const std::size_t qp = entry.at("q_prime").get<std::size_t>();
        if (qp >= policies.size()) {
          throw Error(ErrorKind::BadConfig, "contrast q_prime index out of range");
        }
        spec.q_prime = policies[qp];
      }
      out.push_back(std::move(spec));
    }
  }
  if (out.empty()) throw Error(ErrorKind::BadConfig, "no estimands configured");
  return out;
}

RunConfig parse_config(const json& doc, const Overrides& overrides) {
  RunConfig cfg;
  if (doc.contains("data")) {
    const auto& d = doc.at("data");
    cfg.schema.cluster_id = d.value("cluster_id", cfg.schema.cluster_id);
    cfg.schema.y = d.value("y", cfg.schema.y);
    cfg.schema.a = d.value("a", cfg.schema.a);
    if (d.contains("covariates")) {
      cfg.schema.covariates = d.at("covariates").get<std::vector<std::string>>();
    }
    if (d.contains("exclude")) {
      cfg.schema.exclude = d.at("exclude").get<std::vector<std::string>>();
    }
    cfg.validate.n_max = d.value("n_max", cfg.validate.n_max);
  }

  if (doc.contains("estimator")) {
    const auto& e = doc.at("estimator");
    cfg.estimator.folds = e.value("K", cfg.estimator.folds);
    if (e.contains("r")) {
      if (e.at("r").is_string()) {
        if (e.at("r").get<std::string>() != "exact") {
          throw Error(ErrorKind::BadConfig, "estimator.r must be an integer or \"exact\"");
        }
        cfg.estimator.subsample_r.reset();
      } else {
        cfg.estimator.subsample_r = e.at("r").get<int>();
        if (*cfg.estimator.subsample_r < 1) {
          throw Error(ErrorKind::BadConfig, "estimator.r must be positive");
        }
      }
    }
    cfg.estimator.splits = e.value("S", cfg.estimator.splits);
    cfg.estimator.seed = e.value("seed", cfg.estimator.seed);
    cfg.estimator.alpha_level = e.value("alpha_level", cfg.estimator.alpha_level);
    cfg.estimator.exact_limit = e.value("exact_limit", cfg.estimator.exact_limit);
    cfg.estimator.clip_eps = e.value("clip_eps", cfg.estimator.clip_eps);
  }
  if (doc.contains("learner")) {
    const auto& l = doc.at("learner");
    if (l.contains("learners")) {
      cfg.estimator.learner.library = l.at("learners").get<std::vector<std::string>>();
    }
    cfg.estimator.learner.cv_folds = l.value("cv_folds", cfg.estimator.learner.cv_folds);
    cfg.estimator.learner.ensemble = l.value("ensemble", cfg.estimator.learner.ensemble);
  }
  cfg.threads = doc.value("threads", cfg.threads);

  cfg.replications = doc.value("D", cfg.replications);
  if (doc.contains("dgp")) {
    const auto& g = doc.at("dgp");
    cfg.dgp.m = g.value("m", cfg.dgp.m);
    if (g.contains("sizes")) cfg.dgp.size_dist = SizeDist::parse(g.at("sizes").get<std::string>());
    cfg.dgp.seed = g.value("seed", cfg.dgp.seed);
  }
  if (doc.contains("estimators")) {
    cfg.estimators.clear();
    for (const auto& name : doc.at("estimators")) {
      cfg.estimators.push_back(parse_bench_estimator(name.get<std::string>()));
    }
  }
  if (doc.contains("comparator")) {
    cfg.comparator = parse_bench_estimator(doc.at("comparator").get<std::string>());
  }
  if (doc.contains("truth")) {
    const auto& t = doc.at("truth");
    cfg.truth_mc = t.value("mc_clusters", cfg.truth_mc);
    cfg.truth_seed = t.value("seed", cfg.truth_seed);
    cfg.truth_cache_path = t.value("cache", cfg.truth_cache_path);
  }

  std::vector<PolicySpec> policies = parse_policies(doc);
  if (!overrides.policies.empty()) {
    policies.clear();
    for (const auto& text : overrides.policies) policies.push_back(parse_policy(text));
  }
  cfg.policies = policies;

  std::vector<std::string> estimand_names;
  if (doc.contains("estimands")) {
    estimand_names = doc.at("estimands").get<std::vector<std::string>>();
  }
  if (!overrides.estimands.empty()) estimand_names = overrides.estimands;
  if (estimand_names.empty() && !doc.contains("contrasts")) estimand_names = {"mu"};
  const json* contrasts =
      doc.contains("contrasts") && overrides.estimands.empty() ? &doc.at("contrasts") : nullptr;
  cfg.estimands = build_estimands(policies, estimand_names, contrasts);

  if (overrides.seed.has_value()) {
    cfg.estimator.seed = *overrides.seed;
    cfg.dgp.seed = *overrides.seed;
  }
  if (overrides.threads.has_value()) cfg.threads = *overrides.threads;
  cfg.estimator.threads = cfg.threads;
  return cfg;
}

}  // namespace

RunConfig load_config(const std::string& path, const Overrides& overrides) {
  try {
    return parse_config(read_json_file(path), overrides);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::BadConfig, "config '" + path + "': " + e.what());
  }
}

RunConfig config_from_overrides(const Overrides& overrides) {
  return parse_config(json::object(), overrides);
}

namespace {

template <class Fn>
int guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
}

}  // namespace

int cmd_estimate(const std::string& config_path, const std::string& data_path,
                 const std::string& out_path, const Overrides& overrides) {
  return guarded([&] {
    RunConfig cfg = config_path.empty() ? config_from_overrides(overrides)
                                        : load_config(config_path, overrides);
    const Dataset data = validate_dataset(load_csv(data_path, cfg.schema), cfg.validate);
    const EstimateReport report = estimate(data, cfg.estimands, cfg.estimator);
    write_report(report, out_path);
    return 0;
  });
}

int cmd_simulate(const std::string& config_path, const std::string& out_path,
                 const Overrides& overrides) {
  return guarded([&] {
    RunConfig cfg = load_config(config_path, overrides);
    BenchmarkConfig bench;
    bench.replications = cfg.replications;
    bench.dgp = cfg.dgp;
    bench.estimands = cfg.estimands;
    bench.estimators = cfg.estimators;
    bench.comparator = cfg.comparator;
    bench.est = cfg.estimator;
    bench.truth_mc = cfg.truth_mc;
    bench.truth_seed = cfg.truth_seed;
    bench.truth_cache_path = cfg.truth_cache_path;
    bench.threads = cfg.threads;
    const BenchmarkResult result = run_benchmark(bench);
    for (const auto& warning : result.warnings) {
      std::fprintf(stderr, "warning: %s\n", warning.c_str());
    }
    write_benchmark_csv(result, out_path);
    return 0;
  });
}

int cmd_truth(const std::string& config_path, const std::string& out_path,
              const Overrides& overrides) {
  return guarded([&] {
    RunConfig cfg = load_config(config_path, overrides);
    std::vector<TruthValue> truths;
    if (!cfg.truth_cache_path.empty()) {
      TruthCache cache(cfg.truth_cache_path);
      truths =
          cache.get_or_compute(cfg.estimands, cfg.dgp, cfg.truth_mc, cfg.truth_seed, cfg.threads);
    } else {
      truths = true_values(cfg.estimands, cfg.dgp, cfg.truth_mc, cfg.truth_seed, cfg.threads);
    }
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw Error(ErrorKind::IoFailure, "cannot write '" + out_path + "'");
    out << "estimand,policy,param,truth,mc_se\n";
    char buf[256];
    for (std::size_t e = 0; e < cfg.estimands.size(); ++e) {
      const auto& spec = cfg.estimands[e];
      std::string policy = spec.q.canonical();
      if (spec.q_prime.has_value()) policy += "|" + spec.q_prime->canonical();
      std::snprintf(buf, sizeof(buf), "%s,%s,%.10g,%.10g,%.10g\n", spec.label().c_str(),
                    policy.c_str(), spec.q.param(), truths[e].truth, truths[e].mc_se);
      out << buf;
    }
    return 0;
  });
}

int cmd_validate(const std::string& data_path, const std::string& config_path,
                 const Overrides& overrides) {
  return guarded([&] {
    RunConfig cfg;
    if (!config_path.empty()) {
      cfg = load_config(config_path, overrides);
    } else {
      cfg.schema = CsvSchema{};
    }
    const Dataset data = validate_dataset(load_csv(data_path, cfg.schema), cfg.validate);
    const DatasetSummary summary = summarize(data);
    std::printf("clusters: %d\nunits: %zu\ncovariates: %d\n", summary.m, summary.units, summary.p);
    std::printf("cluster sizes:\n");
    for (const auto& [size, count] : summary.size_histogram) {
      std::printf("  n=%d: %d\n", size, count);
    }
    return 0;
  });
}

}  // namespace cpe::cli
