#include "kic/embedding.hpp"

#include <cmath>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "kic/error.hpp"
#include "kic/hash.hpp"
#include "kic/rng.hpp"
#include "kic/text.hpp"

namespace kic {
namespace {

void normalize_in_place(EmbeddingVector& v) {
  const double n = v.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw NumericalError("cannot normalize a zero or non-finite vector");
  for (double& x : v.values) x /= n;
  v.normalized = true;
}

struct ParsedUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

ParsedUrl parse_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw InvalidArgument("service_url needs a scheme: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

}  // namespace

void EmbedderSpec::validate() const {
  if (d <= 0) throw InvalidArgument("embedder dimension must be positive");
  if (kind == EmbedderKind::hashed_ngram) {
    if (ngram_min < 1 || ngram_min > ngram_max)
      throw InvalidArgument("embedder needs 1 <= ngram_min <= ngram_max");
  } else if (service_url.empty()) {
    throw InvalidArgument("external embedder needs service_url");
  }
  if (retries < 0 || timeout_ms <= 0) throw InvalidArgument("bad embedder retry/timeout settings");
}

double EmbeddingVector::norm() const noexcept {
  double s = 0.0;
  for (const double x : values) s += x * x;
  return std::sqrt(s);
}

double dot(const EmbeddingVector& a, const EmbeddingVector& b) {
  if (a.dims() != b.dims()) throw DimensionMismatch("dot of vectors with different dimensions");
  double s = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) s += a.values[i] * b.values[i];
  return s;
}

NgramFeature hash_ngram(std::string_view ngram, std::uint64_t seed, int d) {
  const std::uint64_t h = mix64(fnv1a64(ngram) ^ seed);
  return NgramFeature{static_cast<std::uint32_t>(h % static_cast<std::uint64_t>(d)),
                      (h >> 63) ? -1 : 1};
}

std::vector<std::string> extract_ngrams(std::string_view text, const EmbedderSpec& spec) {
  const std::string norm = normalize_text(text);
  if (norm.empty()) throw InvalidArgument("cannot embed empty or whitespace-only text");
  std::vector<std::string> grams;
  const auto len = static_cast<int>(norm.size());
  if (len < spec.ngram_min) {
    grams.push_back(norm);
    return grams;
  }
  for (int n = spec.ngram_min; n <= spec.ngram_max && n <= len; ++n)
    for (int i = 0; i + n <= len; ++i) grams.push_back(norm.substr(static_cast<std::size_t>(i), static_cast<std::size_t>(n)));
  return grams;
}

EmbeddingVector embed_raw(std::string_view text, const EmbedderSpec& spec) {
  EmbeddingVector v;
  v.values.assign(static_cast<std::size_t>(spec.d), 0.0);
  for (const auto& g : extract_ngrams(text, spec)) {
    const auto f = hash_ngram(g, spec.seed, spec.d);
    v.values[f.bucket] += f.sign;
  }
  return v;
}

EmbeddingVector embed_text(std::string_view text, const EmbedderSpec& spec) {
  EmbeddingVector v = embed_raw(text, spec);
  // Sign collisions can cancel every bucket; fall back to unsigned counts so
  // the vector is still a usable direction.
  if (v.norm() == 0.0) {
    for (const auto& g : extract_ngrams(text, spec)) v.values[hash_ngram(g, spec.seed, spec.d).bucket] += 1.0;
  }
  normalize_in_place(v);
  return v;
}

std::vector<EmbeddingVector> embed_batch(std::span<const std::string> texts,
                                         const EmbedderSpec& spec) {
  std::vector<EmbeddingVector> out;
  out.reserve(texts.size());
  for (std::size_t i = 0; i < texts.size(); ++i) {
    try {
      out.push_back(embed_text(texts[i], spec));
    } catch (const Error& e) {
      throw InvalidArgument("batch element " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

std::vector<EmbeddingVector> external_embed(std::span<const std::string> texts,
                                            const EmbedderSpec& spec) {
  if (texts.empty()) return {};
  const ParsedUrl url = parse_url(spec.service_url);
  const nlohmann::json body = {{"texts", std::vector<std::string>(texts.begin(), texts.end())}};
  const std::string payload = body.dump();

  std::string last_error;
  for (int attempt = 0; attempt <= spec.retries; ++attempt) {
    httplib::Client client(url.origin);
    const auto timeout = std::chrono::milliseconds(spec.timeout_ms);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
    auto res = client.Post(url.path, payload, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status < 200 || res->status >= 300) {
      last_error = "HTTP status " + std::to_string(res->status);
      continue;
    }
    nlohmann::json reply;
    try {
      reply = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("embedding service returned invalid JSON: ") + e.what());
    }
    const auto it = reply.find("vectors");
    if (it == reply.end() || !it->is_array())
      throw FormatError("embedding service reply lacks a \"vectors\" array");
    if (it->size() != texts.size())
      throw FormatError("embedding service returned " + std::to_string(it->size()) +
                        " vectors for " + std::to_string(texts.size()) + " texts");
    std::vector<EmbeddingVector> out;
    out.reserve(texts.size());
    for (std::size_t i = 0; i < it->size(); ++i) {
      const auto& row = (*it)[i];
      if (!row.is_array() || static_cast<int>(row.size()) != spec.d)
        throw DimensionMismatch("embedding service vector " + std::to_string(i) + " has dimension " +
                                std::to_string(row.is_array() ? row.size() : 0) + ", expected " +
                                std::to_string(spec.d));
      EmbeddingVector v;
      v.values = row.get<std::vector<double>>();
      normalize_in_place(v);
      out.push_back(std::move(v));
    }
    return out;
  }
  throw Error("embedding service failed after " + std::to_string(spec.retries + 1) +
              " attempts: " + last_error);
}

Embedder::Embedder(EmbedderSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

EmbeddingVector Embedder::embed(std::string_view text) const {
  if (spec_.kind == EmbedderKind::hashed_ngram) return embed_text(text, spec_);
  const std::string one(text);
  return external_embed(std::span<const std::string>(&one, 1), spec_).front();
}

std::vector<EmbeddingVector> Embedder::embed(std::span<const std::string> texts) const {
  if (spec_.kind == EmbedderKind::hashed_ngram) return embed_batch(texts, spec_);
  return external_embed(texts, spec_);
}

}  // namespace kic
