#include "cpe/report.hpp"

#include <fstream>

#include "json.hpp"

namespace cpe {

std::string report_to_json(const EstimateReport& report) {
  using json = nlohmann::ordered_json;
  json meta;
  meta["seed"] = report.seed;
  meta["K"] = report.folds;
  if (report.r_str == "exact") {
    meta["r"] = "exact";
  } else {
    meta["r"] = std::stoi(report.r_str);
  }
  meta["S"] = report.splits;
  meta["m"] = report.m;

  json results = json::array();
  for (const auto& res : report.results) {
    json r;
    r["estimand"] = res.estimand;
    r["policy"] = res.policy;
    r["param"] = res.param;
    r["point"] = res.point;
    r["se"] = res.se;
    r["ci_lo"] = res.ci_lo;
    r["ci_hi"] = res.ci_hi;
    r["flags"] = res.flags;
    results.push_back(std::move(r));
  }

  json doc;
  doc["meta"] = std::move(meta);
  doc["results"] = std::move(results);
  return doc.dump(2) + "\n";
}

void write_report(const EstimateReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write '" + path + "'");
  out << report_to_json(report);
}

}  // namespace cpe
