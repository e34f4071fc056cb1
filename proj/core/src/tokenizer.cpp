#include "kic/tokenizer.hpp"

namespace kic {

std::vector<TokenId> ByteTokenizer::encode(std::string_view text) {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (const char c : text) ids.push_back(kByteOffset + static_cast<TokenId>(static_cast<unsigned char>(c)));
  return ids;
}

std::string ByteTokenizer::decode(std::span<const TokenId> ids) {
  std::string out;
  out.reserve(ids.size());
  for (const TokenId id : ids)
    if (id >= kByteOffset && id < kByteVocabSize) out.push_back(static_cast<char>(id - kByteOffset));
  return out;
}

}  // namespace kic
