#pragma once

#include <string>
#include <vector>

#include "cpe/data.hpp"

namespace cpe {

// Column naming for CSV ingestion. Covariates default to every numeric column
// that is not the id, outcome, or treatment and is not listed in `exclude`.
struct CsvSchema {
  std::string cluster_id = "cluster_id";
  std::string y = "y";
  std::string a = "a";
  std::vector<std::string> covariates;  // empty -> infer
  std::vector<std::string> exclude;
};

// Groups rows by cluster id (row order within a cluster preserved, clusters
// ordered by first appearance). Cluster sizes may differ. Does not validate
// treatment values; run validate_dataset afterwards.
Dataset load_csv(const std::string& path, const CsvSchema& schema = {});

// Inverse of load_csv; numeric cells are written with enough digits to
// round-trip doubles bit-exactly.
void write_csv(const Dataset& data, const std::string& path, const CsvSchema& schema = {});

}  // namespace cpe
