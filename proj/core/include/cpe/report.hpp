#pragma once

#include <string>

#include "cpe/estimator.hpp"

namespace cpe {

// Serializes an EstimateReport to the report JSON schema:
//   { meta: {seed, K, r, S, m}, results: [ {estimand, policy, param, point,
//     se, ci_lo, ci_hi, flags} ] }
// Key order and number formatting are deterministic, so identical reports
// produce identical bytes.
void write_report(const EstimateReport& report, const std::string& path);

std::string report_to_json(const EstimateReport& report);

}  // namespace cpe
