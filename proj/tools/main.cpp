#include <string>

#include "CLI11.hpp"
#include "cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual policy effects under clustered interference"};
  app.require_subcommand(1);

  std::string config_path, data_path, out_path;
  cpe::cli::Overrides overrides;
  std::uint64_t seed_flag = 0;
  int threads_flag = -1;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file");
    cmd->add_option("--out", out_path, "output path")->required();
    cmd->add_option("--seed", seed_flag, "override the run seed");
    cmd->add_option("--threads", threads_flag, "worker thread cap (0 = all cores)");
    cmd->add_option("--policy", overrides.policies,
                    "policy grammar, e.g. cips:delta0=1,mode=constant (repeatable)");
    cmd->add_option("--estimand", overrides.estimands,
                    "estimand name: mu mu1 mu0 de se1 se0 oe te (repeatable)");
  };

  CLI::App* estimate = app.add_subcommand("estimate", "estimate policy effects from a CSV");
  add_common(estimate);
  estimate->add_option("--data", data_path, "input CSV")->required();

  CLI::App* simulate = app.add_subcommand("simulate", "run the replication benchmark");
  add_common(simulate);
  simulate->get_option("--config")->required();

  CLI::App* truth = app.add_subcommand("truth", "compute ground-truth estimand values");
  add_common(truth);
  truth->get_option("--config")->required();

  CLI::App* validate = app.add_subcommand("validate", "check a CSV against the data model");
  validate->add_option("--data", data_path, "input CSV")->required();
  validate->add_option("--config", config_path, "JSON config file");

  CLI11_PARSE(app, argc, argv);

  if (estimate->count("--seed") || simulate->count("--seed") || truth->count("--seed")) {
    overrides.seed = seed_flag;
  }
  if (estimate->count("--threads") || simulate->count("--threads") || truth->count("--threads")) {
    overrides.threads = threads_flag;
  }

  if (estimate->parsed()) {
    return cpe::cli::cmd_estimate(config_path, data_path, out_path, overrides);
  }
  if (simulate->parsed()) {
    return cpe::cli::cmd_simulate(config_path, out_path, overrides);
  }
  if (truth->parsed()) {
    return cpe::cli::cmd_truth(config_path, out_path, overrides);
  }
  return cpe::cli::cmd_validate(data_path, config_path, overrides);
}
