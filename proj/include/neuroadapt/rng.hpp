#pragma once

#include <cstdint>
#include <string_view>
#include <utility>

namespace neuroadapt {

// Counter-based 64-bit generator. Output i of a stream with key k is
// mix64(k + (i + 1) * 0x9E3779B97F4A7C15), i.e. SplitMix64 with the key as the
// starting state. The integer stream is bit-exact on every platform; the
// floating-point transforms below use only IEEE arithmetic plus log/cos/sqrt.
//
// Independent streams come from `derive(base_seed, purpose, index)`:
//   key = mix64(mix64(base_seed ^ fnv1a(purpose)) + mix64(index + 1))
class Rng {
 public:
  static constexpr const char* kAlgorithm = "splitmix64-counter/fnv1a-derive";

  explicit Rng(std::uint64_t key) : key_(key) {}

  static Rng derive(std::uint64_t base_seed, std::string_view purpose, std::uint64_t index = 0);
  static std::uint64_t derive_seed(std::uint64_t base_seed, std::string_view purpose,
                                   std::uint64_t index = 0);

  std::uint64_t next_u64();
  // Uniform on [0, 1) with 53 bits of resolution.
  double uniform();
  // Standard normal via Box-Muller; consumes two draws per value.
  double normal();
  // Uniform integer in [0, n), unbiased (rejection).
  std::uint64_t below(std::uint64_t n);

  // Fisher-Yates; std::shuffle's output is implementation-defined.
  template <typename It>
  void shuffle(It first, It last) {
    auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      auto j = below(i);
      using std::swap;
      swap(first[i - 1], first[j]);
    }
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t z);

}  // namespace neuroadapt
