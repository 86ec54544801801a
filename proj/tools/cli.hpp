#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cpe/csv.hpp"
#include "cpe/estimator.hpp"
#include "cpe/simulation.hpp"

namespace cpe::cli {

// Parsed run configuration. The config file is JSON; command-line flags
// (--seed, --threads, --policy, --estimand) override its fields.
struct RunConfig {
  CsvSchema schema;
  ValidateOptions validate;
  std::vector<PolicySpec> policies;
  std::vector<EstimandSpec> estimands;  // fully resolved against `policies`
  EstimatorConfig estimator;
  // simulate
  int replications = 2;
  DgpConfig dgp;
  std::vector<BenchEstimator> estimators{BenchEstimator::NssEnsemble, BenchEstimator::NssLogit};
  BenchEstimator comparator = BenchEstimator::NssLogit;
  // truth
  long truth_mc = 200000;
  std::uint64_t truth_seed = 97;
  std::string truth_cache_path;
  int threads = 0;
};

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::vector<std::string> policies;   // grammar strings, replace config policies
  std::vector<std::string> estimands;  // estimand names, replace config estimands
};

RunConfig load_config(const std::string& path, const Overrides& overrides);
RunConfig config_from_overrides(const Overrides& overrides);  // no config file

int cmd_estimate(const std::string& config_path, const std::string& data_path,
                 const std::string& out_path, const Overrides& overrides);
int cmd_simulate(const std::string& config_path, const std::string& out_path,
                 const Overrides& overrides);
int cmd_truth(const std::string& config_path, const std::string& out_path,
              const Overrides& overrides);
int cmd_validate(const std::string& data_path, const std::string& config_path,
                 const Overrides& overrides);

}  // namespace cpe::cli
