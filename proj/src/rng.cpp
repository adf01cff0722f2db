#include "neuroadapt/rng.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

#include "neuroadapt/errors.hpp"
#include "neuroadapt/hash.hpp"

namespace neuroadapt {

namespace {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
}

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t Rng::derive_seed(std::uint64_t base_seed, std::string_view purpose,
                               std::uint64_t index) {
  return mix64(mix64(base_seed ^ fnv1a(purpose)) + mix64(index + 1));
}

Rng Rng::derive(std::uint64_t base_seed, std::string_view purpose, std::uint64_t index) {
  return Rng(derive_seed(base_seed, purpose, index));
}

std::uint64_t Rng::next_u64() {
  ++counter_;
  return mix64(key_ + counter_ * kGolden);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  // 1 - u keeps the log argument in (0, 1].
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw ContractError("Rng::below requires n > 0");
  // Reject the top sliver so every residue is equally likely.
  std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n + 1) % n;
  for (;;) {
    std::uint64_t v = next_u64();
    if (v <= limit) return v % n;
  }
}

}  // namespace neuroadapt
