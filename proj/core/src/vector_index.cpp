#include "kic/vector_index.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "kic/error.hpp"
#include "kic/knowledge_store.hpp"
#include "kic/rng.hpp"

namespace kic {
namespace {

std::vector<SearchHit> top_hits(std::vector<SearchHit> hits, std::size_t top_m) {
  const std::size_t m = std::min(top_m, hits.size());
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(m), hits.end(), hit_before);
  hits.resize(m);
  return hits;
}

double dot_f(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

void normalize_row(std::span<float> row) {
  double s = 0.0;
  for (const float x : row) s += static_cast<double>(x) * x;
  const double n = std::sqrt(s);
  if (n == 0.0) return;
  for (float& x : row) x = static_cast<float>(x / n);
}

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

class Writer {
 public:
  template <typename T>
  void put(T v) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    out_.append(reinterpret_cast<const char*>(b), sizeof(T));
  }
  void raw(const char* p, std::size_t n) { out_.append(p, n); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    unsigned char b[sizeof(T)];
    std::memcpy(b, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("index file is truncated");
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::string_view take(std::size_t n) {
    need(n);
    std::string_view v(bytes_.data() + pos_, n);
    pos_ += n;
    return v;
  }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

ExactIndex::ExactIndex(int dims, std::vector<std::uint64_t> ids, std::vector<float> keys)
    : dims_(dims), ids_(std::move(ids)), keys_(std::move(keys)) {
  if (dims_ <= 0) throw InvalidArgument("index dimension must be positive");
  if (keys_.size() != ids_.size() * static_cast<std::size_t>(dims_))
    throw DimensionMismatch("index keys do not match ids x dims");
  row_by_id_.reserve(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i)
    if (!row_by_id_.emplace(ids_[i], i).second)
      throw InvalidArgument("duplicate id " + std::to_string(ids_[i]) + " in index");
}

std::ptrdiff_t ExactIndex::row_of(std::uint64_t id) const {
  const auto it = row_by_id_.find(id);
  return it == row_by_id_.end() ? -1 : static_cast<std::ptrdiff_t>(it->second);
}

void ExactIndex::check_query(const EmbeddingVector& query) const {
  if (static_cast<int>(query.dims()) != dims_)
    throw DimensionMismatch("query has dimension " + std::to_string(query.dims()) + ", index has " +
                            std::to_string(dims_));
}

double ExactIndex::score_row(std::size_t r, std::span<const double> q) const {
  const float* k = keys_.data() + r * static_cast<std::size_t>(dims_);
  double s = 0.0;
  for (int j = 0; j < dims_; ++j) s += static_cast<double>(k[j]) * q[static_cast<std::size_t>(j)];
  return s;
}

std::vector<SearchHit> ExactIndex::search(const EmbeddingVector& query, std::size_t top_m) const {
  check_query(query);
  std::vector<SearchHit> hits;
  hits.reserve(ids_.size());
  for (std::size_t r = 0; r < ids_.size(); ++r) hits.push_back({ids_[r], score_row(r, query.values)});
  return top_hits(std::move(hits), top_m);
}

std::vector<SearchHit> ExactIndex::search_subset(const EmbeddingVector& query, std::size_t top_m,
                                                 std::span<const std::uint64_t> candidates) const {
  check_query(query);
  std::vector<SearchHit> hits;
  hits.reserve(candidates.size());
  for (const auto id : candidates) {
    const auto r = row_of(id);
    if (r >= 0) hits.push_back({id, score_row(static_cast<std::size_t>(r), query.values)});
  }
  std::sort(hits.begin(), hits.end(), [](const SearchHit& a, const SearchHit& b) { return a.kv_id < b.kv_id; });
  hits.erase(std::unique(hits.begin(), hits.end(),
                         [](const SearchHit& a, const SearchHit& b) { return a.kv_id == b.kv_id; }),
             hits.end());
  return top_hits(std::move(hits), top_m);
}

IvfIndex::IvfIndex(ExactIndex base, std::vector<float> centroids,
                   std::vector<std::vector<std::uint32_t>> postings, int nprobe)
    : base_(std::move(base)), centroids_(std::move(centroids)), postings_(std::move(postings)) {
  if (postings_.empty()) throw InvalidArgument("IVF index needs at least one cluster");
  if (centroids_.size() != postings_.size() * static_cast<std::size_t>(base_.dims()))
    throw DimensionMismatch("IVF centroids do not match clusters x dims");
  std::vector<char> seen(base_.size(), 0);
  for (const auto& list : postings_)
    for (const auto r : list) {
      if (r >= base_.size() || seen[r]) throw FormatError("IVF posting lists must partition the rows");
      seen[r] = 1;
    }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end())
    throw FormatError("IVF posting lists miss some rows");
  set_nprobe(nprobe);
}

void IvfIndex::set_nprobe(int nprobe) {
  if (nprobe < 1 || nprobe > n_clusters())
    throw InvalidArgument("nprobe must be in [1, " + std::to_string(n_clusters()) + "]");
  nprobe_ = nprobe;
}

std::vector<SearchHit> IvfIndex::search(const EmbeddingVector& query, std::size_t top_m, int nprobe) const {
  if (static_cast<int>(query.dims()) != dims())
    throw DimensionMismatch("query has dimension " + std::to_string(query.dims()) + ", index has " +
                            std::to_string(dims()));
  const int probes = nprobe == 0 ? nprobe_ : std::clamp(nprobe, 1, n_clusters());
  const auto d = static_cast<std::size_t>(dims());
  std::vector<std::pair<double, int>> cscore;
  cscore.reserve(postings_.size());
  for (std::size_t c = 0; c < postings_.size(); ++c) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(centroids_[c * d + j]) * query.values[j];
    cscore.emplace_back(s, static_cast<int>(c));
  }
  std::partial_sort(cscore.begin(), cscore.begin() + probes, cscore.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::vector<SearchHit> hits;
  for (int p = 0; p < probes; ++p)
    for (const auto r : postings_[static_cast<std::size_t>(cscore[static_cast<std::size_t>(p)].second)])
      hits.push_back({base_.ids()[r], base_.score_row(r, query.values)});
  return top_hits(std::move(hits), top_m);
}

ExactBuild build_exact(std::span<const KeyedText> items, const Embedder& embedder) {
  if (items.empty()) throw InvalidArgument("empty partition");
  const auto d = static_cast<std::size_t>(embedder.dims());
  std::vector<std::uint64_t> ids;
  std::vector<float> keys;
  ids.reserve(items.size());
  keys.reserve(items.size() * d);
  ExactBuild out;
  for (const auto& item : items) {
    EmbeddingVector v;
    try {
      v = embedder.embed(item.text);
    } catch (const InvalidArgument&) {
      ++out.skipped;
      continue;
    }
    ids.push_back(item.id);
    for (const double x : v.values) keys.push_back(static_cast<float>(x));
  }
  if (ids.empty()) throw InvalidArgument("empty partition (no embeddable keys)");
  out.index = ExactIndex(embedder.dims(), std::move(ids), std::move(keys));
  return out;
}

ExactBuild build_exact(std::span<const KeyValuePair> kvs, const Embedder& embedder) {
  std::vector<KeyedText> items;
  items.reserve(kvs.size());
  for (const auto& kv : kvs) items.push_back({kv.kv_id, kv.key_text});
  return build_exact(items, embedder);
}

IvfIndex build_ivf(const ExactIndex& exact, int n_clusters, int max_iters, std::uint64_t seed) {
  const std::size_t n = exact.size();
  if (n_clusters < 1) throw InvalidArgument("n_clusters must be >= 1");
  if (static_cast<std::size_t>(n_clusters) > n)
    throw InvalidArgument("n_clusters (" + std::to_string(n_clusters) + ") exceeds the number of vectors (" +
                          std::to_string(n) + ")");
  const auto c = static_cast<std::size_t>(n_clusters);
  const auto d = static_cast<std::size_t>(exact.dims());
  Rng rng(seed);

  std::vector<float> cent(c * d);
  auto centroid = [&](std::size_t k) { return std::span<float>(cent.data() + k * d, d); };
  auto set_centroid = [&](std::size_t k, std::size_t row) {
    const auto r = exact.row(row);
    std::copy(r.begin(), r.end(), centroid(k).begin());
  };

  // k-means++ on squared Euclidean distance.
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  set_centroid(0, rng.below(n));
  for (std::size_t k = 1; k < c; ++k) {
    double total = 0.0;
    const auto prev = centroid(k - 1);
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = exact.row(i);
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = static_cast<double>(r[j]) - prev[j];
        s += diff * diff;
      }
      dist[i] = std::min(dist[i], s);
      total += dist[i];
    }
    std::size_t pick = n - 1;
    if (total > 0.0) {
      double target = rng.uniform() * total;
      for (std::size_t i = 0; i < n; ++i) {
        target -= dist[i];
        if (target < 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.below(n);
    }
    set_centroid(k, pick);
  }

  std::vector<std::uint32_t> assign(n, 0);
  std::vector<double> best(n, 0.0);
  auto assign_all = [&]() {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = exact.row(i);
      double top = -std::numeric_limits<double>::infinity();
      std::uint32_t arg = 0;
      for (std::size_t k = 0; k < c; ++k) {
        const double s = dot_f(r, centroid(k));
        if (s > top) {
          top = s;
          arg = static_cast<std::uint32_t>(k);
        }
      }
      changed = changed || assign[i] != arg;
      assign[i] = arg;
      best[i] = top;
    }
    return changed;
  };

  assign_all();
  for (int it = 0; it < max_iters; ++it) {
    std::vector<double> sums(c * d, 0.0);
    std::vector<std::size_t> counts(c, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = exact.row(i);
      ++counts[assign[i]];
      for (std::size_t j = 0; j < d; ++j) sums[assign[i] * d + j] += r[j];
    }
    std::vector<char> taken(n, 0);
    for (std::size_t k = 0; k < c; ++k) {
      if (counts[k] == 0) {
        // Farthest point = lowest inner product with its own centroid.
        std::size_t far = 0;
        double worst = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i)
          if (!taken[i] && best[i] < worst) {
            worst = best[i];
            far = i;
          }
        taken[far] = 1;
        set_centroid(k, far);
        continue;
      }
      auto ck = centroid(k);
      for (std::size_t j = 0; j < d; ++j) ck[j] = static_cast<float>(sums[k * d + j] / static_cast<double>(counts[k]));
      normalize_row(ck);
    }
    if (!assign_all() && it > 0) break;
  }

  std::vector<std::vector<std::uint32_t>> postings(c);
  for (std::size_t i = 0; i < n; ++i) postings[assign[i]].push_back(static_cast<std::uint32_t>(i));
  return IvfIndex(exact, std::move(cent), std::move(postings), std::max(1, n_clusters / 10));
}

const ExactIndex& MipsIndex::exact() const {
  if (const auto* e = std::get_if<ExactIndex>(&impl_)) return *e;
  return std::get<IvfIndex>(impl_).base();
}

std::vector<SearchHit> MipsIndex::search(const EmbeddingVector& query, std::size_t top_m) const {
  if (const auto* e = std::get_if<ExactIndex>(&impl_)) return e->search(query, top_m);
  return std::get<IvfIndex>(impl_).search(query, top_m);
}

std::string serialize_index(const MipsIndex& index) {
  const ExactIndex& e = index.exact();
  Writer w;
  w.raw("KICX", 4);
  w.put<std::uint32_t>(kIndexVersion);
  w.put<std::uint32_t>(index.is_ivf() ? 1u : 0u);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(e.dims()));
  w.put<std::uint64_t>(e.size());
  for (const auto id : e.ids()) w.put<std::uint64_t>(id);
  for (const float x : e.keys()) w.put<float>(x);
  if (index.is_ivf()) {
    const IvfIndex& ivf = index.ivf();
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ivf.n_clusters()));
    for (const float x : ivf.centroids()) w.put<float>(x);
    for (const auto& list : ivf.postings()) {
      w.put<std::uint64_t>(list.size());
      for (const auto r : list) w.put<std::uint64_t>(e.ids()[r]);
    }
  }
  return w.take();
}

void save_index(const std::filesystem::path& path, const MipsIndex& index) {
  const std::string bytes = serialize_index(index);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write to " + path.string());
}

MipsIndex deserialize_index(const std::string& bytes, int expected_dims, int nprobe) {
  Reader r(bytes);
  if (r.take(4) != "KICX") throw FormatError("not an index file (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kIndexVersion) throw FormatError("unsupported index version " + std::to_string(version));
  const auto kind = r.get<std::uint32_t>();
  if (kind > 1) throw FormatError("unknown index kind " + std::to_string(kind));
  const auto d = r.get<std::uint32_t>();
  const auto n = r.get<std::uint64_t>();
  if (d == 0) throw FormatError("index dimension is zero");
  if (expected_dims != 0 && static_cast<int>(d) != expected_dims)
    throw DimensionMismatch("index file has dimension " + std::to_string(d) + ", expected " +
                            std::to_string(expected_dims));
  if (n > r.remaining() / 8) throw FormatError("index file is truncated");
  std::vector<std::uint64_t> ids(n);
  for (auto& id : ids) id = r.get<std::uint64_t>();
  if (n * d > r.remaining() / 4) throw FormatError("index file is truncated");
  std::vector<float> keys(n * d);
  for (auto& x : keys) x = r.get<float>();
  ExactIndex exact(static_cast<int>(d), std::move(ids), std::move(keys));
  if (kind == 0) {
    if (r.remaining() != 0) throw FormatError("trailing bytes in index file");
    return MipsIndex(std::move(exact));
  }
  const auto c = r.get<std::uint32_t>();
  if (c == 0 || static_cast<std::uint64_t>(c) * d > r.remaining() / 4) throw FormatError("index file is truncated");
  std::vector<float> cent(static_cast<std::size_t>(c) * d);
  for (auto& x : cent) x = r.get<float>();
  std::vector<std::vector<std::uint32_t>> postings(c);
  for (auto& list : postings) {
    const auto len = r.get<std::uint64_t>();
    if (len > r.remaining() / 8) throw FormatError("index file is truncated");
    list.reserve(len);
    for (std::uint64_t i = 0; i < len; ++i) {
      const auto row = exact.row_of(r.get<std::uint64_t>());
      if (row < 0) throw FormatError("posting list references an unknown id");
      list.push_back(static_cast<std::uint32_t>(row));
    }
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes in index file");
  const int probes = nprobe == 0 ? std::max(1, static_cast<int>(c) / 10) : nprobe;
  return MipsIndex(IvfIndex(std::move(exact), std::move(cent), std::move(postings), probes));
}

MipsIndex load_index(const std::filesystem::path& path, int expected_dims, int nprobe) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFound("cannot open index " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_index(bytes, expected_dims, nprobe);
}

}  // namespace kic
