#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace kic {

enum class EmbedderKind { hashed_ngram, external_service };

struct EmbedderSpec {
  EmbedderKind kind = EmbedderKind::hashed_ngram;
  int d = 256;
  std::uint64_t seed = 42;
  int ngram_min = 3;
  int ngram_max = 5;
  std::string service_url;  // external_service only
  int timeout_ms = 2000;
  int retries = 2;

  void validate() const;
};

struct EmbeddingVector {
  std::vector<double> values;
  bool normalized = false;

  std::size_t dims() const noexcept { return values.size(); }
  double norm() const noexcept;
};

double dot(const EmbeddingVector& a, const EmbeddingVector& b);

// One hashed feature: the n-gram lands in `bucket` with sign +1 or -1.
struct NgramFeature {
  std::uint32_t bucket = 0;
  int sign = 1;
};

// h = mix64(fnv1a64(ngram) ^ seed); bucket = h mod d; sign = top bit set ? -1 : +1.
// Fixed arithmetic so vectors are reproducible in any language.
NgramFeature hash_ngram(std::string_view ngram, std::uint64_t seed, int d);

// Character n-grams (byte-level) of lengths ngram_min..ngram_max of the
// normalized text. Text shorter than ngram_min contributes itself as one
// gram. Throws InvalidArgument when the normalized text is empty.
std::vector<std::string> extract_ngrams(std::string_view text, const EmbedderSpec& spec);

// Signed bucket counts before normalization.
EmbeddingVector embed_raw(std::string_view text, const EmbedderSpec& spec);

// L2-normalized hashed n-gram embedding.
EmbeddingVector embed_text(std::string_view text, const EmbedderSpec& spec);

// Element i equals embed_text(texts[i]); an invalid element fails the whole
// batch with its index in the message.
std::vector<EmbeddingVector> embed_batch(std::span<const std::string> texts,
                                         const EmbedderSpec& spec);

// Client for an HTTP sentence-embedding service.
//   POST service_url  {"texts": [...]}  ->  {"vectors": [[...], ...]}
// Vectors are re-normalized locally; non-2xx and transport failures are
// retried `spec.retries` times.
std::vector<EmbeddingVector> external_embed(std::span<const std::string> texts,
                                            const EmbedderSpec& spec);

// Dispatches on spec.kind.
class Embedder {
 public:
  explicit Embedder(EmbedderSpec spec);

  const EmbedderSpec& spec() const noexcept { return spec_; }
  int dims() const noexcept { return spec_.d; }

  EmbeddingVector embed(std::string_view text) const;
  std::vector<EmbeddingVector> embed(std::span<const std::string> texts) const;

 private:
  EmbedderSpec spec_;
};

}  // namespace kic
