#include "mft/rng.hpp"

#include <cmath>
#include <numbers>

namespace mft {

namespace {

constexpr std::uint64_t splitmix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

std::uint64_t mix_key(std::initializer_list<std::uint64_t> words) {
  std::uint64_t h = 0x243f6a8885a308d3ULL;
  for (auto w : words) h = splitmix(h ^ splitmix(w));
  return h;
}

std::uint64_t hash_string(std::string_view text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t KeyedRng::next_u64() {
  const std::uint64_t n = counter_++;
  return splitmix(key_ ^ splitmix(n + 0x632be59bd9b4e019ULL));
}

double KeyedRng::uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t KeyedRng::below(std::uint64_t n) {
  if (n <= 1) return 0;
  // Rejection sampling on the top of the range keeps the draw unbiased.
  const std::uint64_t limit = max() - max() % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double KeyedRng::normal() {
  double u1 = uniform01();
  if (u1 < 1e-300) u1 = 1e-300;
  const double u2 = uniform01();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace mft
