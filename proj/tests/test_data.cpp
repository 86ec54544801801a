#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "cpe/csv.hpp"
#include "cpe/data.hpp"
#include "cpe/rng.hpp"
#include "doctest.h"

using namespace cpe;

namespace {

ClusterObservation cluster2() {
  return make_cluster({1.0, 0.0}, {1.0, 0.0}, {0.1, 0.2, 0.3, 0.4}, 2);
}

ClusterObservation cluster3() {
  return make_cluster({0.0, 1.0, 1.0}, {0.0, 1.0, 1.0}, {1, 2, 3, 4, 5, 6}, 2);
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("validate accepts well-formed input") {
  Dataset d;
  d.p = 2;
  d.clusters = {cluster2(), cluster3()};
  const Dataset ok = validate_dataset(std::move(d));
  CHECK(ok.m() == 2);
  const DatasetSummary s = summarize(ok);
  CHECK(s.size_histogram.at(2) == 1);
  CHECK(s.size_histogram.at(3) == 1);
  CHECK(s.units == 5);
}

TEST_CASE("validate rejects non-binary treatments") {
  Dataset d;
  d.p = 0;
  ClusterObservation c;
  c.n = 3;
  c.p = 0;
  c.y = {1, 0, 1};
  c.a = {1, 2, 0};
  d.clusters = {c};
  CHECK_THROWS_WITH_AS(validate_dataset(std::move(d)), doctest::Contains("not in {0,1}"), Error);
  try {
    Dataset d2;
    d2.p = 0;
    d2.clusters = {c};
    validate_dataset(std::move(d2));
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::NonBinaryTreatment);
  }
}

TEST_CASE("validate rejects oversized clusters under the default bound") {
  Dataset d;
  d.p = 0;
  ClusterObservation c;
  c.n = 21;
  c.p = 0;
  c.y.assign(21, 0.0);
  c.a.assign(21, 0.0);
  d.clusters = {c};
  try {
    validate_dataset(std::move(d));
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ClusterTooLarge);
  }
}

TEST_CASE("validate rejects empty datasets and ragged clusters") {
  Dataset empty;
  try {
    validate_dataset(std::move(empty));
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::EmptyDataset);
  }

  Dataset ragged;
  ragged.p = 1;
  ClusterObservation c;
  c.n = 2;
  c.p = 1;
  c.y = {1, 0};
  c.a = {1.0};
  c.x = {0.5, 0.6};
  ragged.clusters = {c};
  try {
    validate_dataset(std::move(ragged));
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::RaggedCluster);
  }
}

TEST_CASE("enumerate_treatments base cases") {
  const auto one = enumerate_treatments(1);
  REQUIRE(one.size() == 2);
  CHECK(one[0].bits == 0);
  CHECK(one[1].bits == 1);

  const auto two = enumerate_treatments(2);
  REQUIRE(two.size() == 4);
  std::set<std::uint64_t> distinct;
  for (const auto& v : two) distinct.insert(v.bits);
  CHECK(distinct.size() == 4);
}

TEST_CASE("enumerate_treatments covers the lattice with no duplicates up to n=12") {
  for (int n : {4, 8, 12}) {
    const auto all = enumerate_treatments(n);
    CHECK(all.size() == (std::size_t{1} << n));
    std::set<std::uint64_t> seen;
    for (const auto& v : all) {
      CHECK(v.n == n);
      seen.insert(v.bits);
    }
    CHECK(seen.size() == all.size());
    CHECK(*seen.rbegin() == (std::uint64_t{1} << n) - 1);
  }
}

TEST_CASE("subsample weight formula and determinism") {
  const auto draw = subsample_treatments(3, 5, 77);
  CHECK(draw.draws.size() == 5);
  CHECK(draw.weight == doctest::Approx(8.0 / 5.0));
  for (const auto& v : draw.draws) CHECK(v.n == 3);

  CHECK(subsample_treatments(1, 4, 9).weight == doctest::Approx(0.5));

  const auto again = subsample_treatments(3, 5, 77);
  for (std::size_t q = 0; q < 5; ++q) CHECK(draw.draws[q].bits == again.draws[q].bits);

  // weight * r recovers 2^n exactly
  for (int n : {1, 7, 20}) {
    for (int r : {1, 3, 100}) {
      CHECK(subsample_treatments(n, r, 1).weight * r == std::ldexp(1.0, n));
    }
  }
}

TEST_CASE("subsampled bits are uniform per position") {
  const int reps = 25000;  // 25000 draws x 4 positions -> se ~ 0.0016
  int counts[4] = {0, 0, 0, 0};
  for (int rep = 0; rep < reps; ++rep) {
    const auto draw = subsample_treatments(4, 4, 1000 + static_cast<std::uint64_t>(rep));
    for (const auto& v : draw.draws) {
      for (int j = 0; j < 4; ++j) counts[j] += v.bit(j);
    }
  }
  for (int j = 0; j < 4; ++j) {
    CHECK(static_cast<double>(counts[j]) / (reps * 4) == doctest::Approx(0.5).epsilon(0.02));
  }
}

}  // TEST_SUITE

TEST_SUITE("csv") {

TEST_CASE("rows group by cluster id in first-appearance order") {
  const auto path = temp_file("cpe_groups.csv");
  {
    std::ofstream out(path);
    out << "cluster_id,y,a,x1\n";
    out << "1,1,1,0.5\n1,0,0,0.25\n2,1,1,-1\n2,0,0,2\n2,1,1,3\n";
  }
  const Dataset d = load_csv(path.string());
  REQUIRE(d.m() == 2);
  CHECK(d.clusters[0].n == 2);
  CHECK(d.clusters[1].n == 3);
  CHECK(d.p == 1);
  CHECK(d.column_names == std::vector<std::string>{"x1"});
  CHECK(d.clusters[1].y[2] == 1.0);
}

TEST_CASE("missing required column") {
  const auto path = temp_file("cpe_missing.csv");
  {
    std::ofstream out(path);
    out << "cluster_id,y,x1\n1,1,0.5\n";
  }
  try {
    load_csv(path.string());
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::MissingColumn);
  }
}

TEST_CASE("unparsable cell names the column and row") {
  const auto path = temp_file("cpe_bad_cell.csv");
  {
    std::ofstream out(path);
    out << "cluster_id,y,a,x1\n1,1,zebra,0.5\n";
  }
  try {
    load_csv(path.string());
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::UnparsableCell);
    CHECK(std::string(e.what()).find("'a'") != std::string::npos);
  }
}

TEST_CASE("round trip preserves every numeric value bit-exactly") {
  Rng rng(5, Stream::Test);
  Dataset d;
  d.p = 8;
  for (int i = 0; i < 30; ++i) {
    const int n = 1 + static_cast<int>(rng.below(6));
    std::vector<double> y(static_cast<std::size_t>(n)), a(static_cast<std::size_t>(n)),
        x(static_cast<std::size_t>(n) * 8);
    for (int j = 0; j < n; ++j) {
      y[static_cast<std::size_t>(j)] = rng.bernoulli(0.5) ? 1.0 : 0.0;
      a[static_cast<std::size_t>(j)] = rng.bernoulli(0.5) ? 1.0 : 0.0;
      for (int k = 0; k < 8; ++k) {
        x[static_cast<std::size_t>(j) * 8 + static_cast<std::size_t>(k)] =
            rng.normal() * std::pow(10.0, static_cast<double>(rng.below(7)) - 3.0);
      }
    }
    d.clusters.push_back(make_cluster(std::move(y), std::move(a), std::move(x), 8));
  }
  for (int k = 0; k < 8; ++k) d.column_names.push_back("cov" + std::to_string(k));

  const auto path = temp_file("cpe_roundtrip.csv");
  write_csv(d, path.string());
  const Dataset back = load_csv(path.string());
  REQUIRE(back.m() == d.m());
  CHECK(back.p == 8);
  CHECK(back.column_names == d.column_names);
  for (int i = 0; i < d.m(); ++i) {
    const auto& ca = d.clusters[static_cast<std::size_t>(i)];
    const auto& cb = back.clusters[static_cast<std::size_t>(i)];
    REQUIRE(ca.n == cb.n);
    for (int j = 0; j < ca.n; ++j) {
      CHECK(ca.y[static_cast<std::size_t>(j)] == cb.y[static_cast<std::size_t>(j)]);
      CHECK(ca.a[static_cast<std::size_t>(j)] == cb.a[static_cast<std::size_t>(j)]);
      for (int k = 0; k < 8; ++k) {
        CHECK(ca.x[static_cast<std::size_t>(j) * 8 + static_cast<std::size_t>(k)] ==
              cb.x[static_cast<std::size_t>(j) * 8 + static_cast<std::size_t>(k)]);
      }
    }
  }
}

TEST_CASE("schema covariate selection and exclusion") {
  const auto path = temp_file("cpe_schema.csv");
  {
    std::ofstream out(path);
    out << "hh,outcome,treat,x1,x2,junk\n";
    out << "a,1,0,0.5,1,9\na,0,1,0.25,0,9\nb,1,1,-1,1,9\nb,1,1,-1,1,9\n";
  }
  CsvSchema schema;
  schema.cluster_id = "hh";
  schema.y = "outcome";
  schema.a = "treat";
  schema.exclude = {"junk"};
  const Dataset d = load_csv(path.string(), schema);
  CHECK(d.p == 2);
  CHECK(d.column_names == std::vector<std::string>{"x1", "x2"});

  CsvSchema named = schema;
  named.covariates = {"x2"};
  const Dataset d2 = load_csv(path.string(), named);
  CHECK(d2.p == 1);
  CHECK(d2.clusters[0].x[0] == 1.0);
}

}  // TEST_SUITE
