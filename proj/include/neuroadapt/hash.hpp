#pragma once

#include <bit>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace neuroadapt {

// FNV-1a, 64-bit. Used for parameter fingerprints and seed tags, never for
// anything adversarial.
class Fnv1a {
 public:
  static constexpr std::uint64_t kOffset = 0xcbf29ce484222325ULL;
  static constexpr std::uint64_t kPrime = 0x100000001b3ULL;

  Fnv1a& byte(std::uint8_t b) {
    state_ = (state_ ^ b) * kPrime;
    return *this;
  }
  Fnv1a& bytes(std::span<const std::uint8_t> data) {
    for (auto b : data) byte(b);
    return *this;
  }
  Fnv1a& text(std::string_view s) {
    for (char c : s) byte(static_cast<std::uint8_t>(c));
    return *this;
  }
  // Little-endian, independent of host byte order.
  Fnv1a& u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) byte(static_cast<std::uint8_t>(v >> (8 * i)));
    return *this;
  }
  Fnv1a& u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) byte(static_cast<std::uint8_t>(v >> (8 * i)));
    return *this;
  }
  Fnv1a& f32(float v) { return u32(std::bit_cast<std::uint32_t>(v)); }
  Fnv1a& floats(std::span<const float> v) {
    for (float x : v) f32(x);
    return *this;
  }

  std::uint64_t value() const { return state_; }

 private:
  std::uint64_t state_ = kOffset;
};

inline std::uint64_t fnv1a(std::string_view s) { return Fnv1a{}.text(s).value(); }

// Fixed-width lowercase hex, the form hashes take in JSON outputs.
std::string hex64(std::uint64_t v);

}  // namespace neuroadapt
