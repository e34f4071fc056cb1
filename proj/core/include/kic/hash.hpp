#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace kic {

inline constexpr std::uint64_t kFnvOffsetBasis = 0xCBF29CE484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x00000100000001B3ULL;

// 64-bit FNV-1a over raw bytes.
constexpr std::uint64_t fnv1a64(std::string_view bytes,
                                std::uint64_t basis = kFnvOffsetBasis) noexcept {
  std::uint64_t h = basis;
  for (const char c : bytes) {
    h ^= static_cast<std::uint8_t>(c);
    h *= kFnvPrime;
  }
  return h;
}

std::string hex64(std::uint64_t value);

// Digest of a whole file's bytes, as 16 hex digits.
std::string file_digest(const std::string& path);

}  // namespace kic
