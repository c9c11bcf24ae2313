#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace stlq {
namespace philox {

inline constexpr std::uint32_t kMult0 = 0xD2511F53u;
inline constexpr std::uint32_t kMult1 = 0xCD9E8D57u;
inline constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
inline constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

/// Philox4x32-10 block: a 128-bit pseudorandom word that is a pure function
/// of (key, counter). No state, so draws are independent of thread layout.
inline std::array<std::uint32_t, 4> block(std::uint64_t key, std::array<std::uint32_t, 4> ctr) {
  std::uint32_t k0 = static_cast<std::uint32_t>(key);
  std::uint32_t k1 = static_cast<std::uint32_t>(key >> 32);
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kMult0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kMult1) * ctr[2];
    ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ k0, static_cast<std::uint32_t>(p1),
           static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ k1, static_cast<std::uint32_t>(p0)};
    k0 += kWeyl0;
    k1 += kWeyl1;
  }
  return ctr;
}

}  // namespace philox

/// Standard normal draw addressed by (seed, path, step, channel) via
/// Box-Muller on two 53-bit uniforms.
inline double counter_normal(std::uint64_t seed, std::uint64_t path, std::uint32_t step,
                             std::uint32_t channel) {
  const auto w = philox::block(
      seed, {static_cast<std::uint32_t>(path), static_cast<std::uint32_t>(path >> 32), step,
             channel});
  const std::uint64_t a = (static_cast<std::uint64_t>(w[0]) << 32) | w[1];
  const std::uint64_t b = (static_cast<std::uint64_t>(w[2]) << 32) | w[3];
  const double u1 = (static_cast<double>(a >> 11) + 0.5) * 0x1.0p-53;  // (0, 1)
  const double u2 = (static_cast<double>(b >> 11) + 0.5) * 0x1.0p-53;
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

}  // namespace stlq
