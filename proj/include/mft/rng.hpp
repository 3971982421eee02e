#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <span>
#include <string_view>
#include <utility>

namespace mft {

/// Mixes a list of 64-bit words into one key (splitmix64 finalizer chain).
std::uint64_t mix_key(std::initializer_list<std::uint64_t> words);
std::uint64_t hash_string(std::string_view text);

/// Counter-based generator: the n-th draw is a pure function of (key, n), so
/// streams are reproducible across processes and platforms. Every
/// distribution below is implemented here rather than taken from <random>,
/// whose distributions are implementation-defined.
class KeyedRng {
 public:
  using result_type = std::uint64_t;

  explicit KeyedRng(std::uint64_t key) : key_(key) {}
  KeyedRng(std::initializer_list<std::uint64_t> words) : key_(mix_key(words)) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return next_u64(); }
  std::uint64_t next_u64();

  /// Uniform double in [0, 1).
  double uniform01();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }
  /// Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform01() < p; }
  /// Standard normal via Box-Muller.
  double normal();

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  /// Independent child stream.
  KeyedRng fork(std::uint64_t tag) const { return KeyedRng({key_, tag, 0x6d657461ULL}); }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace mft
