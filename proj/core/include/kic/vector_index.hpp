#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "kic/embedding.hpp"

namespace kic {

struct SearchHit {
  std::uint64_t kv_id = 0;
  double score = 0.0;

  bool operator==(const SearchHit&) const = default;
};

// Score descending, then id ascending.
constexpr bool hit_before(const SearchHit& a, const SearchHit& b) noexcept {
  if (a.score != b.score) return a.score > b.score;
  return a.kv_id < b.kv_id;
}

// Dense n x d matrix of unit-norm f32 keys with aligned ids. Scores are
// accumulated in double.
class ExactIndex {
 public:
  ExactIndex() = default;
  ExactIndex(int dims, std::vector<std::uint64_t> ids, std::vector<float> keys);

  int dims() const noexcept { return dims_; }
  std::size_t size() const noexcept { return ids_.size(); }
  const std::vector<std::uint64_t>& ids() const noexcept { return ids_; }
  const std::vector<float>& keys() const noexcept { return keys_; }
  std::span<const float> row(std::size_t i) const {
    return {keys_.data() + i * static_cast<std::size_t>(dims_), static_cast<std::size_t>(dims_)};
  }
  // Row index for an id, or -1.
  std::ptrdiff_t row_of(std::uint64_t id) const;

  double score_row(std::size_t row, std::span<const double> query) const;

  std::vector<SearchHit> search(const EmbeddingVector& query, std::size_t top_m) const;

  // MIPS restricted to the given candidate ids (unknown ids are ignored).
  std::vector<SearchHit> search_subset(const EmbeddingVector& query, std::size_t top_m,
                                       std::span<const std::uint64_t> candidates) const;

  bool operator==(const ExactIndex& o) const { return dims_ == o.dims_ && ids_ == o.ids_ && keys_ == o.keys_; }

 private:
  void check_query(const EmbeddingVector& query) const;

  int dims_ = 0;
  std::vector<std::uint64_t> ids_;
  std::vector<float> keys_;
  std::unordered_map<std::uint64_t, std::size_t> row_by_id_;
};

// Inverted file: spherical k-means coarse quantizer over an ExactIndex.
class IvfIndex {
 public:
  IvfIndex() = default;
  IvfIndex(ExactIndex base, std::vector<float> centroids, std::vector<std::vector<std::uint32_t>> postings,
           int nprobe);

  const ExactIndex& base() const noexcept { return base_; }
  int dims() const noexcept { return base_.dims(); }
  std::size_t size() const noexcept { return base_.size(); }
  int n_clusters() const noexcept { return static_cast<int>(postings_.size()); }
  int nprobe() const noexcept { return nprobe_; }
  void set_nprobe(int nprobe);
  const std::vector<float>& centroids() const noexcept { return centroids_; }
  // Posting lists hold row numbers into base().
  const std::vector<std::vector<std::uint32_t>>& postings() const noexcept { return postings_; }

  // Probes `nprobe` lists (0 = the index default).
  std::vector<SearchHit> search(const EmbeddingVector& query, std::size_t top_m, int nprobe = 0) const;

 private:
  ExactIndex base_;
  std::vector<float> centroids_;
  std::vector<std::vector<std::uint32_t>> postings_;
  int nprobe_ = 1;
};

struct KeyedText {
  std::uint64_t id = 0;
  std::string text;
};

struct ExactBuild {
  ExactIndex index;
  std::size_t skipped = 0;  // keys the embedder rejected
};

// One row per item, in input order. Throws InvalidArgument on empty input.
ExactBuild build_exact(std::span<const KeyedText> items, const Embedder& embedder);

struct KeyValuePair;
ExactBuild build_exact(std::span<const KeyValuePair> kvs, const Embedder& embedder);

// k-means++ seeding, at most max_iters Lloyd iterations with max-inner-product
// assignment; empty clusters are re-seeded from the point farthest from its
// centroid. Default nprobe = max(1, c / 10).
IvfIndex build_ivf(const ExactIndex& exact, int n_clusters, int max_iters, std::uint64_t seed);

// Either index kind behind one search call.
class MipsIndex {
 public:
  MipsIndex() = default;
  MipsIndex(ExactIndex idx) : impl_(std::move(idx)) {}
  MipsIndex(IvfIndex idx) : impl_(std::move(idx)) {}

  bool is_ivf() const noexcept { return std::holds_alternative<IvfIndex>(impl_); }
  const ExactIndex& exact() const;
  const IvfIndex& ivf() const { return std::get<IvfIndex>(impl_); }
  IvfIndex& ivf() { return std::get<IvfIndex>(impl_); }
  int dims() const { return exact().dims(); }
  std::size_t size() const { return exact().size(); }

  std::vector<SearchHit> search(const EmbeddingVector& query, std::size_t top_m) const;
  std::vector<SearchHit> search_subset(const EmbeddingVector& query, std::size_t top_m,
                                       std::span<const std::uint64_t> candidates) const {
    return exact().search_subset(query, top_m, candidates);
  }

 private:
  std::variant<ExactIndex, IvfIndex> impl_;
};

// Little-endian file:
//   "KICX" u32 version=1 u32 kind(0 exact, 1 ivf) u32 d u64 n
//   u64 ids[n]  f32 vectors[n*d]
//   ivf only: u32 c  f32 centroids[c*d]  c x (u64 len, u64 ids[len])
inline constexpr std::uint32_t kIndexVersion = 1;

void save_index(const std::filesystem::path& path, const MipsIndex& index);
std::string serialize_index(const MipsIndex& index);

// expected_dims = 0 skips the dimension check. nprobe = 0 keeps the
// default probe count for IVF files.
MipsIndex load_index(const std::filesystem::path& path, int expected_dims = 0, int nprobe = 0);
MipsIndex deserialize_index(const std::string& bytes, int expected_dims = 0, int nprobe = 0);

}  // namespace kic
