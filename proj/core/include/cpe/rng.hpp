#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace cpe {

// Philox4x64-10 counter-based generator. Streams are cheap: any (seed, stream,
// substream) triple addresses an independent sequence, so parallel work units
// derive their own generator instead of sharing state. Matches numpy's Philox
// bit for bit, which the tests use as a reference.
class Philox4x64 {
 public:
  using Block = std::array<std::uint64_t, 4>;

  Philox4x64(std::uint64_t key0, std::uint64_t key1, Block counter)
      : key_{key0, key1}, counter_(counter) {}

  static Block round10(Block ctr, std::array<std::uint64_t, 2> key);

  std::uint64_t next_u64();

 private:
  void advance();

  std::array<std::uint64_t, 2> key_;
  Block counter_;
  Block block_{};
  int idx_ = 4;  // forces generation on first call
};

// Stream ids: coarse purpose tag in the top byte, free index bits below.
enum class Stream : std::uint64_t {
  Generic = 0,
  Dgp = 1,
  Shuffle = 2,
  Subsample = 3,
  GbtTree = 4,
  StackFolds = 5,
  Truth = 6,
  Replication = 7,
  FitPropensity = 8,
  FitOutcome = 9,
  Test = 200,
};

constexpr std::uint64_t stream_id(Stream tag, std::uint64_t index = 0) {
  return (static_cast<std::uint64_t>(tag) << 48) ^ index;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0, std::uint64_t substream = 0)
      : philox_(seed, stream, {0, 0, substream, 0x5eed5eed5eed5eedULL}) {}

  Rng(std::uint64_t seed, Stream tag, std::uint64_t index = 0, std::uint64_t substream = 0)
      : Rng(seed, stream_id(tag, index), substream) {}

  std::uint64_t next_u64() { return philox_.next_u64(); }

  // uniform on [0, 1), 53-bit resolution
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // unbiased integer in [0, n)
  std::uint64_t below(std::uint64_t n);

  bool bernoulli(double p) { return uniform() < p; }

  double normal();  // Box-Muller with cached spare

  template <class T>
  void shuffle(std::span<T> v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    shuffle(std::span<T>(v));
  }

 private:
  Philox4x64 philox_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace cpe
