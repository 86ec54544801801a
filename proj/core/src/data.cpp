#include "cpe/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cpe/rng.hpp"

namespace cpe {

namespace {

bool is_binary(double v) { return v == 0.0 || v == 1.0; }

TreatmentVector pack_bits(const std::vector<double>& a) {
  TreatmentVector tv{0, static_cast<int>(a.size())};
  for (std::size_t j = 0; j < a.size(); ++j) {
    if (a[j] == 1.0) tv.bits |= std::uint64_t{1} << j;
  }
  return tv;
}

}  // namespace

double ClusterObservation::ybar() const {
  return n == 0 ? 0.0 : std::accumulate(y.begin(), y.end(), 0.0) / n;
}

ClusterObservation make_cluster(std::vector<double> y, std::vector<double> a,
                                std::vector<double> x, int p) {
  ClusterObservation c;
  c.n = static_cast<int>(y.size());
  c.p = p;
  if (a.size() != y.size() || x.size() != y.size() * static_cast<std::size_t>(p)) {
    throw Error(ErrorKind::RaggedCluster, "cluster fields have mismatched lengths");
  }
  for (double v : a) {
    if (!is_binary(v)) {
      throw Error(ErrorKind::NonBinaryTreatment, "treatment value not in {0,1}");
    }
  }
  c.y = std::move(y);
  c.a = std::move(a);
  c.x = std::move(x);
  c.a_bits = pack_bits(c.a);
  return c;
}

Dataset validate_dataset(Dataset raw, const ValidateOptions& opts) {
  if (raw.clusters.empty()) {
    throw Error(ErrorKind::EmptyDataset, "dataset contains no clusters");
  }
  for (std::size_t i = 0; i < raw.clusters.size(); ++i) {
    ClusterObservation& c = raw.clusters[i];
    const std::string where = "cluster index " + std::to_string(i);
    if (c.n < 1) throw Error(ErrorKind::EmptyDataset, where + " is empty");
    if (c.n > opts.n_max) {
      throw Error(ErrorKind::ClusterTooLarge,
                  where + " has size " + std::to_string(c.n) + " > n_max " +
                      std::to_string(opts.n_max));
    }
    if (static_cast<int>(c.y.size()) != c.n || static_cast<int>(c.a.size()) != c.n ||
        c.x.size() != static_cast<std::size_t>(c.n) * raw.p) {
      throw Error(ErrorKind::RaggedCluster, where + " has mismatched field lengths");
    }
    if (c.p != raw.p) {
      throw Error(ErrorKind::RaggedCluster, where + " covariate dimension differs from dataset");
    }
    for (double v : c.a) {
      if (!is_binary(v)) {
        throw Error(ErrorKind::NonBinaryTreatment, where + " treatment value not in {0,1}");
      }
    }
    c.a_bits = pack_bits(c.a);
  }
  return raw;
}

DatasetSummary summarize(const Dataset& data) {
  DatasetSummary s;
  s.m = data.m();
  s.p = data.p;
  for (const auto& c : data.clusters) {
    s.units += static_cast<std::size_t>(c.n);
    s.size_histogram[c.n] += 1;
  }
  return s;
}

int Dataset::max_cluster_size() const {
  int mx = 0;
  for (const auto& c : clusters) mx = std::max(mx, c.n);
  return mx;
}

std::size_t Dataset::total_units() const {
  std::size_t u = 0;
  for (const auto& c : clusters) u += static_cast<std::size_t>(c.n);
  return u;
}

std::vector<TreatmentVector> enumerate_treatments(int n) {
  std::vector<TreatmentVector> out;
  out.reserve(std::size_t{1} << n);
  const std::uint64_t total = std::uint64_t{1} << n;
  for (std::uint64_t mask = 0; mask < total; ++mask) {
    out.push_back({mask, n});
  }
  return out;
}

SubsampleDraw subsample_treatments(int n, int r, std::uint64_t rng_seed) {
  Rng rng(rng_seed, Stream::Subsample);
  SubsampleDraw out;
  out.draws.reserve(static_cast<std::size_t>(r));
  const std::uint64_t card = std::uint64_t{1} << n;
  for (int q = 0; q < r; ++q) {
    out.draws.push_back({rng.below(card), n});
  }
  out.weight = std::ldexp(1.0, n) / r;  // 2^n / r exactly
  return out;
}

}  // namespace cpe
