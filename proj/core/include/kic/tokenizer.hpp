#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace kic {

using TokenId = std::int32_t;

// Reserved ids; raw bytes follow at kByteOffset.
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kKnowDelim = 3;
inline constexpr TokenId kPieceDelim = 4;
inline constexpr int kNumReserved = 5;
inline constexpr TokenId kByteOffset = kNumReserved;
inline constexpr int kByteVocabSize = 256 + kNumReserved;

// Byte-level tokenizer: no OOV, lossless for any byte string.
class ByteTokenizer {
 public:
  static std::vector<TokenId> encode(std::string_view text);
  // Reserved ids are dropped; byte ids map back to their byte.
  static std::string decode(std::span<const TokenId> ids);
  static constexpr int vocab_size() noexcept { return kByteVocabSize; }
};

}  // namespace kic
