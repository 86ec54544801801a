#pragma once

#include <bit>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cpe/errors.hpp"

namespace cpe {

// Joint treatment vector a in A(n), packed into a machine word.
// Bit j (least significant = unit 0) is unit j's treatment.
struct TreatmentVector {
  std::uint64_t bits = 0;
  int n = 0;

  int bit(int j) const { return static_cast<int>((bits >> j) & 1u); }
  int count() const { return std::popcount(bits); }
  double mean() const { return n == 0 ? 0.0 : static_cast<double>(count()) / n; }

  TreatmentVector with_bit(int j, int value) const {
    std::uint64_t mask = std::uint64_t{1} << j;
    return {value ? (bits | mask) : (bits & ~mask), n};
  }

  bool operator==(const TreatmentVector&) const = default;
};

// One cluster's record (Y_i, A_i, X_i, N_i): the i.i.d. sampling unit.
// Covariates are stored row-major, one length-p row per unit; cluster-level
// covariates are replicated into every row.
struct ClusterObservation {
  int n = 0;
  int p = 0;
  std::vector<double> y;  // length n
  std::vector<double> a;  // length n, {0,1} once validated
  std::vector<double> x;  // n * p, row-major
  TreatmentVector a_bits; // packed copy of a, filled by validation

  std::span<const double> x_row(int j) const {
    return std::span<const double>(x.data() + static_cast<std::size_t>(j) * p,
                                   static_cast<std::size_t>(p));
  }
  double ybar() const;
  int treated_count() const { return a_bits.count(); }
  // leave-one-out treated fraction; 0 for singleton clusters (paired with the
  // singleton indicator in the outcome featurization)
  double abar_minus(int a_j) const {
    return n <= 1 ? 0.0 : (treated_count() - a_j) / static_cast<double>(n - 1);
  }
};

// Builds a cluster that satisfies the type invariants or throws.
ClusterObservation make_cluster(std::vector<double> y, std::vector<double> a,
                                std::vector<double> x, int p);

struct Dataset {
  std::vector<ClusterObservation> clusters;
  int p = 0;
  std::vector<std::string> column_names;

  int m() const { return static_cast<int>(clusters.size()); }
  int max_cluster_size() const;
  std::size_t total_units() const;
};

struct ValidateOptions {
  int n_max = 20;
};

struct DatasetSummary {
  int m = 0;
  int p = 0;
  std::size_t units = 0;
  std::map<int, int> size_histogram;
};

// Checks all type invariants, packs treatment bits, and returns the dataset.
// Throws Error with kind RaggedCluster / NonBinaryTreatment / EmptyDataset /
// ClusterTooLarge.
Dataset validate_dataset(Dataset raw, const ValidateOptions& opts = {});

DatasetSummary summarize(const Dataset& data);

// All 2^n treatment vectors, ordered by the packed integer value
// (lexicographic with bit 0 least significant).
std::vector<TreatmentVector> enumerate_treatments(int n);

struct SubsampleDraw {
  std::vector<TreatmentVector> draws;  // r i.i.d. uniform draws from A(n)
  double weight = 0.0;                 // 2^n / r
};

// Uniform proposal f(a) = 2^-n, so sum_a h(a) ~ (2^n / r) * sum_q h(a_q).
SubsampleDraw subsample_treatments(int n, int r, std::uint64_t rng_seed);

}  // namespace cpe
