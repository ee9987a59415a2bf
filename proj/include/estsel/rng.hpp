#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace estsel {

/// Philox4x32-10 block function (Salmon et al., Random123).
std::array<uint32_t, 4> philox4x32(std::array<uint32_t, 4> counter, std::array<uint32_t, 2> key);

/// Counter-based random stream. A draw is a pure function of
/// (seed, index, counter), so streams never depend on scheduling order.
class SeededStream {
 public:
  SeededStream() = default;
  SeededStream(uint64_t seed, uint64_t index) : seed_(seed), index_(index) {}

  uint64_t seed() const { return seed_; }
  uint64_t index() const { return index_; }
  uint64_t counter() const { return counter_; }

  uint64_t next_u64();
  /// Uniform on the open interval (0, 1).
  double uniform();
  double normal();
  bool bernoulli(double p) { return uniform() < p; }
  /// Unbiased integer in [0, n).
  uint64_t below(uint64_t n);

  /// Independent child stream; same k from the same parent is reproducible.
  SeededStream substream(uint64_t k) const;

  template <typename T>
  void shuffle(std::span<T> values) {
    for (size_t i = values.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(below(i));
      std::swap(values[i - 1], values[j]);
    }
  }

  friend bool operator==(const SeededStream&, const SeededStream&) = default;

 private:
  uint64_t seed_ = 0;
  uint64_t index_ = 0;
  uint64_t counter_ = 0;
};

}  // namespace estsel
