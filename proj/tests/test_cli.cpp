#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "cpe/csv.hpp"
#include "cpe/simulation.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace cpe;
namespace fs = std::filesystem;

namespace {

fs::path work_dir() {
  const fs::path dir = fs::temp_directory_path() / "cpe_cli_tests";
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

fs::path make_data_csv(int m, std::uint64_t seed, const std::string& name) {
  DgpConfig cfg;
  cfg.m = m;
  cfg.seed = seed;
  cfg.size_dist = SizeDist::uniform(4, 8);
  const Dataset data = generate_dgp(cfg);
  const fs::path path = work_dir() / name;
  write_csv(data, path.string());
  return path;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CPE_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("estimate over a 16-point delta grid emits 16 records per estimand kind") {
  const fs::path data = make_data_csv(50, 1001, "grid_data.csv");
  const fs::path config = work_dir() / "grid_config.json";
  spit(config, R"({
    "policies": [ {"type": "cips", "mode": "constant",
                   "grid": {"from": 0.5, "to": 2.0, "points": 16}} ],
    "estimands": ["mu", "de"],
    "estimator": {"K": 2, "r": 100, "S": 1, "seed": 7},
    "learner": {"ensemble": false}
  })");
  const fs::path out = work_dir() / "grid_report.json";
  const int code = cli::cmd_estimate(config.string(), data.string(), out.string(), {});
  REQUIRE(code == 0);

  const auto doc = nlohmann::json::parse(slurp(out));
  REQUIRE(doc.contains("meta"));
  REQUIRE(doc.contains("results"));
  int mu_count = 0, de_count = 0;
  for (const auto& r : doc["results"]) {
    if (r["estimand"] == "mu") ++mu_count;
    if (r["estimand"] == "de") ++de_count;
  }
  CHECK(mu_count == 16);
  CHECK(de_count == 16);
  // grid coordinates are carried through
  CHECK(doc["results"][0]["param"].get<double>() == doctest::Approx(0.5));
}

TEST_CASE("report JSON validates against the shipped schema keys") {
  const fs::path data = make_data_csv(40, 1002, "schema_data.csv");
  const fs::path config = work_dir() / "schema_config.json";
  spit(config, R"({
    "policies": ["cips:delta0=1,mode=constant", "tpb:rho=0.3"],
    "estimands": ["mu", "mu1", "oe"],
    "estimator": {"K": 2, "seed": 3},
    "learner": {"ensemble": false}
  })");
  const fs::path out = work_dir() / "schema_report.json";
  REQUIRE(cli::cmd_estimate(config.string(), data.string(), out.string(), {}) == 0);

  const auto doc = nlohmann::json::parse(slurp(out));
  REQUIRE(doc.is_object());
  CHECK(doc.size() == 2);
  const auto& meta = doc.at("meta");
  CHECK(meta.size() == 5);
  for (const char* key : {"seed", "K", "r", "S", "m"}) CHECK(meta.contains(key));
  CHECK(meta["m"] == 40);
  for (const auto& r : doc.at("results")) {
    CHECK(r.size() == 8);
    for (const char* key :
         {"estimand", "policy", "param", "point", "se", "ci_lo", "ci_hi", "flags"}) {
      CHECK(r.contains(key));
    }
    CHECK(r["flags"].is_array());
    CHECK(r["se"].get<double>() >= 0.0);
    CHECK(r["ci_lo"].get<double>() <= r["point"].get<double>());
    CHECK(r["point"].get<double>() <= r["ci_hi"].get<double>());
  }
}

TEST_CASE("rerun with the same seed is byte-identical") {
  const fs::path data = make_data_csv(45, 1003, "det_data.csv");
  const fs::path config = work_dir() / "det_config.json";
  spit(config, R"({
    "policies": ["cips:delta0=0.8,mode=constant"],
    "estimands": ["mu", "mu1", "mu0", "de"],
    "estimator": {"K": 2, "r": 20, "S": 2, "seed": 99, "exact_limit": 16},
    "learner": {"learners": ["logit", "gbt"], "cv_folds": 3, "ensemble": true}
  })");
  const fs::path out1 = work_dir() / "det_report1.json";
  const fs::path out2 = work_dir() / "det_report2.json";
  REQUIRE(cli::cmd_estimate(config.string(), data.string(), out1.string(), {}) == 0);
  REQUIRE(cli::cmd_estimate(config.string(), data.string(), out2.string(), {}) == 0);
  CHECK(slurp(out1) == slurp(out2));
  CHECK(!slurp(out1).empty());
}

TEST_CASE("config referencing a missing column exits 1 naming the column") {
  const fs::path data = make_data_csv(30, 1004, "missing_col.csv");
  const fs::path config = work_dir() / "missing_col.json";
  spit(config, R"({
    "policies": ["cms:lambda=0.5,xstar=xstar"],
    "estimands": ["mu"],
    "learner": {"ensemble": false}
  })");
  const fs::path out = work_dir() / "missing_col.json.out";
  CHECK(cli::cmd_estimate(config.string(), data.string(), out.string(), {}) == 1);
}

TEST_CASE("estimand needing two policies with one configured exits 1") {
  const fs::path config = work_dir() / "bad_contrast.json";
  spit(config, R"({ "policies": ["tpb:rho=0.3"], "estimands": ["oe"] })");
  const fs::path data = make_data_csv(20, 1005, "bad_contrast.csv");
  CHECK(cli::cmd_estimate(config.string(), data.string(),
                          (work_dir() / "x.json").string(), {}) == 1);
}

TEST_CASE("malformed config exits 1") {
  const fs::path not_json = work_dir() / "not_json.json";
  spit(not_json, "{ this is not json");
  const fs::path data = make_data_csv(10, 1007, "cfg_err.csv");
  const fs::path out = work_dir() / "cfg_err_out.json";
  CHECK(cli::cmd_estimate(not_json.string(), data.string(), out.string(), {}) == 1);

  const fs::path bad_types = work_dir() / "bad_types.json";
  spit(bad_types, R"({"policies": ["tpb:rho=0"], "estimands": [42]})");
  CHECK(cli::cmd_estimate(bad_types.string(), data.string(), out.string(), {}) == 1);

  const fs::path bad_r = work_dir() / "bad_r.json";
  spit(bad_r, R"({"policies": ["tpb:rho=0"], "estimands": ["mu"],
                  "estimator": {"r": "sometimes"}})");
  CHECK(cli::cmd_estimate(bad_r.string(), data.string(), out.string(), {}) == 1);
}

TEST_CASE("broken data exits 2") {
  const fs::path bad = work_dir() / "bad.csv";
  spit(bad, "cluster_id,y,a,x1\n1,1,2,0.5\n");
  const fs::path config = work_dir() / "ok_config.json";
  spit(config, R"({ "policies": ["tpb:rho=0"], "estimands": ["mu"],
                    "learner": {"ensemble": false} })");
  CHECK(cli::cmd_estimate(config.string(), bad.string(), (work_dir() / "y.json").string(), {}) ==
        2);
  CHECK(cli::cmd_estimate(config.string(), (work_dir() / "no_such_file.csv").string(),
                          (work_dir() / "z.json").string(), {}) == 2);
}

TEST_CASE("simulate smoke run writes the benchmark CSV and unknown estimators exit 1") {
  const fs::path config = work_dir() / "sim_config.json";
  spit(config, R"({
    "D": 2,
    "dgp": {"m": 30, "sizes": "uniform:4-7", "seed": 11},
    "policies": ["cips:delta0=1,mode=constant"],
    "estimands": ["mu"],
    "estimators": ["nss_logit", "ipw"],
    "comparator": "nss_logit",
    "estimator": {"K": 2, "seed": 5},
    "learner": {"ensemble": false},
    "truth": {"mc_clusters": 1000, "seed": 55}
  })");
  const fs::path out = work_dir() / "sim_out.csv";
  REQUIRE(cli::cmd_simulate(config.string(), out.string(), {}) == 0);
  const std::string csv = slurp(out);
  CHECK(csv.rfind("estimand,estimator,truth,bias,rmse,ase,ese,cov,rmse_ratio\n", 0) == 0);
  CHECK(csv.find("nss_logit") != std::string::npos);
  CHECK(csv.find("ipw") != std::string::npos);

  const fs::path bad = work_dir() / "sim_bad.json";
  spit(bad, R"({ "D": 2, "policies": ["tpb:rho=0"], "estimands": ["mu"],
                 "estimators": ["bogus"] })");
  CHECK(cli::cmd_simulate(bad.string(), (work_dir() / "sim_bad.csv").string(), {}) == 1);
}

TEST_CASE("truth command writes values and the cache makes reruns fast and identical") {
  const fs::path cache = work_dir() / "truth_cache.json";
  fs::remove(cache);
  const fs::path config = work_dir() / "truth_config.json";
  spit(config, std::string(R"({
    "dgp": {"sizes": "uniform:4-8"},
    "policies": ["cips:delta0=1,mode=constant", "tpb:rho=0.3"],
    "estimands": ["mu"],
    "truth": {"mc_clusters": 4000, "seed": 77, "cache": ")") +
                    cache.string() + R"("}
  })");
  const fs::path out1 = work_dir() / "truth1.csv";
  const fs::path out2 = work_dir() / "truth2.csv";

  const auto t0 = std::chrono::steady_clock::now();
  REQUIRE(cli::cmd_truth(config.string(), out1.string(), {}) == 0);
  const auto t1 = std::chrono::steady_clock::now();
  REQUIRE(cli::cmd_truth(config.string(), out2.string(), {}) == 0);
  const auto t2 = std::chrono::steady_clock::now();

  CHECK(slurp(out1) == slurp(out2));
  CHECK(slurp(out1).rfind("estimand,policy,param,truth,mc_se\n", 0) == 0);
  const double first_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  const double second_ms = std::chrono::duration<double, std::milli>(t2 - t1).count();
  CHECK(second_ms * 20 < first_ms);  // cached rerun skips the Monte Carlo
}

TEST_CASE("the installed binary handles subcommands end to end") {
  const fs::path data = make_data_csv(30, 1006, "bin_data.csv");
  const fs::path config = work_dir() / "bin_config.json";
  spit(config, R"({
    "policies": ["tpb:rho=0.25"],
    "estimands": ["mu", "de"],
    "estimator": {"K": 2, "seed": 13},
    "learner": {"ensemble": false}
  })");
  const fs::path out1 = work_dir() / "bin_out1.json";
  const fs::path out2 = work_dir() / "bin_out2.json";
  CHECK(run_cli("estimate --config " + config.string() + " --data " + data.string() + " --out " +
                out1.string()) == 0);
  CHECK(run_cli("estimate --config " + config.string() + " --data " + data.string() + " --out " +
                out2.string()) == 0);
  CHECK(slurp(out1) == slurp(out2));

  CHECK(run_cli("validate --data " + data.string()) == 0);
  CHECK(run_cli("validate --data " + (work_dir() / "absent.csv").string()) == 2);

  // flag-driven estimate without a config file
  const fs::path out3 = work_dir() / "bin_out3.json";
  CHECK(run_cli("estimate --data " + data.string() + " --out " + out3.string() +
                " --policy cips:delta0=1,mode=constant --estimand mu --seed 21") == 0);
  const auto doc = nlohmann::json::parse(slurp(out3));
  CHECK(doc["meta"]["seed"] == 21);
}

}  // TEST_SUITE
