#include <gtest/gtest.h>

#include <set>

#include "kic/error.hpp"
#include "kic/index_bench.hpp"
#include "kic/knowledge_store.hpp"
#include "kic/rng.hpp"
#include "kic/vector_index.hpp"
#include "oracles/brute_force.hpp"
#include "test_support.hpp"

namespace kic {
namespace {

EmbeddingVector vec(std::vector<double> v) {
  EmbeddingVector e;
  e.values = std::move(v);
  e.normalized = true;
  return e;
}

ExactIndex two_axes() { return ExactIndex(2, {1, 2}, {1.0f, 0.0f, 0.0f, 1.0f}); }

TEST(ExactIndex, TopOneByInnerProduct) {
  const auto hits = two_axes().search(vec({0.9, 0.1}), 1);
  ASSERT_EQ(hits.size(), 1u);
  EXPECT_EQ(hits[0].kv_id, 1u);
  EXPECT_DOUBLE_EQ(hits[0].score, 0.9);
}

TEST(ExactIndex, TopMBeyondSizeReturnsEverything) {
  const auto hits = two_axes().search(vec({0.1, 0.9}), 10);
  ASSERT_EQ(hits.size(), 2u);
  EXPECT_EQ(hits[0].kv_id, 2u);
  EXPECT_EQ(hits[1].kv_id, 1u);
}

TEST(ExactIndex, TiesGoToTheLowerId) {
  const ExactIndex idx(2, {9, 4, 7}, {1, 0, 1, 0, 0, 1});
  const auto hits = idx.search(vec({1.0, 0.0}), 3);
  EXPECT_EQ(hits[0].kv_id, 4u);
  EXPECT_EQ(hits[1].kv_id, 9u);
  EXPECT_EQ(hits[2].kv_id, 7u);
}

TEST(ExactIndex, DimensionMismatchIsAnError) {
  EXPECT_THROW(two_axes().search(vec({1.0, 0.0, 0.0}), 1), DimensionMismatch);
  EXPECT_THROW(ExactIndex(2, {1}, {1.0f, 0.0f, 0.0f}), DimensionMismatch);
  EXPECT_THROW(ExactIndex(1, {1, 1}, {1.0f, 1.0f}), InvalidArgument);
}

TEST(ExactIndex, EqualsBruteForceIncludingTies) {
  const auto f = oracle::make_tie_fixture(1000, 24, 50, 31);
  const ExactIndex idx(f.d, f.ids, f.keys);
  for (const auto& q : f.queries) {
    for (const std::size_t m : {1u, 10u, 1000u}) {
      ASSERT_EQ(idx.search(q, m), oracle::brute_force_mips(f.ids, f.keys, f.d, q.values, m));
    }
  }
}

TEST(ExactIndex, ScoresEqualTheStoredDotProduct) {
  const auto f = oracle::make_tie_fixture(200, 16, 5, 4);
  const ExactIndex idx(f.d, f.ids, f.keys);
  for (const auto& q : f.queries) {
    for (const auto& h : idx.search(q, 20)) {
      const auto row = idx.row(static_cast<std::size_t>(idx.row_of(h.kv_id)));
      double s = 0.0;
      for (int j = 0; j < f.d; ++j) s += row[j] * q.values[j];
      EXPECT_NEAR(h.score, s, 1e-5);
    }
  }
}

TEST(ExactIndex, SubsetSearchIgnoresUnknownIds) {
  const ExactIndex idx(2, {1, 2, 3}, {1, 0, 0, 1, 0.6f, 0.8f});
  const std::vector<std::uint64_t> cand = {3, 99, 2, 3};
  const auto hits = idx.search_subset(vec({0.0, 1.0}), 5, cand);
  ASSERT_EQ(hits.size(), 2u);
  EXPECT_EQ(hits[0].kv_id, 2u);
  EXPECT_EQ(hits[1].kv_id, 3u);
}

TEST(BuildExact, OneRowPerKvInOrder) {
  KnowledgeStore store;
  store.ingest_file(test::fixtures_dir() / "dictionary.jsonl", KnowledgeCategory::dictionary);
  const auto part = store.get_partition(KnowledgeCategory::dictionary);
  const Embedder emb(EmbedderSpec{});
  const auto built = build_exact(part.kvs, emb);
  ASSERT_EQ(built.index.size(), 4u);
  EXPECT_EQ(built.skipped, 0u);
  for (std::size_t i = 0; i < part.kvs.size(); ++i) EXPECT_EQ(built.index.ids()[i], part.kvs[i].kv_id);
  for (std::size_t i = 0; i < built.index.size(); ++i) {
    double n = 0.0;
    for (const float x : built.index.row(i)) n += static_cast<double>(x) * x;
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-5);
  }
}

TEST(BuildExact, EmptyInputIsAnError) {
  const Embedder emb(EmbedderSpec{});
  EXPECT_THROW(build_exact(std::span<const KeyedText>{}, emb), InvalidArgument);
}

TEST(BuildExact, UnembeddableKeysAreSkipped) {
  const Embedder emb(EmbedderSpec{});
  const std::vector<KeyedText> items = {{1, "apple"}, {2, "   "}, {3, "pear"}};
  const auto built = build_exact(items, emb);
  EXPECT_EQ(built.index.size(), 2u);
  EXPECT_EQ(built.skipped, 1u);
}

TEST(BuildExact, RebuildIsByteIdentical) {
  KnowledgeStore store;
  store.ingest_file(test::fixtures_dir() / "commonsense.jsonl", KnowledgeCategory::commonsense);
  const auto part = store.get_partition(KnowledgeCategory::commonsense);
  const Embedder emb(EmbedderSpec{});
  EXPECT_EQ(serialize_index(build_exact(part.kvs, emb).index), serialize_index(build_exact(part.kvs, emb).index));
}

TEST(BuildIvf, IdenticalVectorsOneCluster) {
  const ExactIndex idx(2, {1, 2}, {1, 0, 1, 0});
  const auto ivf = build_ivf(idx, 1, 10, 1);
  ASSERT_EQ(ivf.n_clusters(), 1);
  EXPECT_EQ(ivf.postings()[0].size(), 2u);
}

TEST(BuildIvf, TooManyClustersIsAnError) {
  EXPECT_THROW(build_ivf(two_axes(), 3, 10, 1), InvalidArgument);
  EXPECT_THROW(build_ivf(two_axes(), 0, 10, 1), InvalidArgument);
}

TEST(BuildIvf, TwoSeparatedBlobsGetOneListEach) {
  // Labels are known: the first 50 rows sit around +e0, the rest around -e0.
  Rng rng(17);
  const int d = 8;
  std::vector<std::uint64_t> ids;
  std::vector<float> keys;
  for (int i = 0; i < 100; ++i) {
    std::vector<double> v(d);
    for (double& x : v) x = 0.05 * rng.normal();
    v[0] += i < 50 ? 1.0 : -1.0;
    double n = 0.0;
    for (const double x : v) n += x * x;
    for (const double x : v) keys.push_back(static_cast<float>(x / std::sqrt(n)));
    ids.push_back(static_cast<std::uint64_t>(i));
  }
  const auto ivf = build_ivf(ExactIndex(d, ids, keys), 2, 20, 5);
  ASSERT_EQ(ivf.n_clusters(), 2);
  for (const auto& list : ivf.postings()) {
    ASSERT_EQ(list.size(), 50u);
    std::set<bool> labels;
    for (const auto row : list) labels.insert(row < 50);
    EXPECT_EQ(labels.size(), 1u);
  }
}

TEST(BuildIvf, SameSeedSameCentroids) {
  IndexBenchSpec spec;
  spec.n = 600;
  spec.d = 16;
  spec.blobs = 12;
  spec.queries = 4;
  const auto data = make_index_bench(spec);
  const auto a = build_ivf(data.index, 12, 10, 3);
  const auto b = build_ivf(data.index, 12, 10, 3);
  EXPECT_EQ(a.centroids(), b.centroids());
  EXPECT_EQ(a.postings(), b.postings());
  EXPECT_EQ(a.nprobe(), 1);
}

TEST(BuildIvf, EveryRowInExactlyOneList) {
  IndexBenchSpec spec;
  spec.n = 500;
  spec.d = 16;
  spec.blobs = 20;
  spec.queries = 1;
  const auto data = make_index_bench(spec);
  const auto ivf = build_ivf(data.index, 25, 10, 9);
  std::vector<int> seen(500, 0);
  for (const auto& list : ivf.postings())
    for (const auto r : list) ++seen[r];
  for (const int s : seen) ASSERT_EQ(s, 1);
}

TEST(IvfIndex, ProbingEveryListIsExact) {
  const auto f = oracle::make_tie_fixture(300, 12, 10, 8);
  const ExactIndex exact(f.d, f.ids, f.keys);
  const auto ivf = build_ivf(exact, 10, 10, 2);
  for (const auto& q : f.queries) EXPECT_EQ(ivf.search(q, 15, 10), exact.search(q, 15));
  EXPECT_THROW(IvfIndex(ivf).set_nprobe(11), InvalidArgument);
}

TEST(IvfIndex, RecallIsMonotoneInNprobe) {
  IndexBenchSpec spec;
  spec.n = 2000;
  spec.d = 32;
  spec.blobs = 40;
  spec.queries = 40;
  const auto data = make_index_bench(spec);
  const auto ivf = build_ivf(data.index, 40, 15, 7);
  const std::vector<int> probes = {1, 2, 5, 10, 20, 40};
  const auto sweep = recall_sweep(data, ivf, 10, probes);
  for (std::size_t i = 1; i < sweep.size(); ++i) EXPECT_GE(sweep[i].recall, sweep[i - 1].recall);
  EXPECT_DOUBLE_EQ(sweep.back().recall, 1.0);
}

TEST(IndexFile, ExactRoundTrip) {
  const auto f = oracle::make_tie_fixture(50, 8, 1, 3);
  const ExactIndex idx(f.d, f.ids, f.keys);
  test::TempDir dir;
  save_index(dir / "x.kicx", idx);
  const auto loaded = load_index(dir / "x.kicx", 8);
  EXPECT_FALSE(loaded.is_ivf());
  EXPECT_EQ(loaded.exact(), idx);
}

TEST(IndexFile, IvfRoundTrip) {
  const auto f = oracle::make_tie_fixture(80, 8, 3, 5);
  const auto ivf = build_ivf(ExactIndex(f.d, f.ids, f.keys), 6, 10, 1);
  const std::string bytes = serialize_index(ivf);
  const auto loaded = deserialize_index(bytes, 8, 3);
  ASSERT_TRUE(loaded.is_ivf());
  EXPECT_EQ(loaded.ivf().centroids(), ivf.centroids());
  EXPECT_EQ(loaded.ivf().postings(), ivf.postings());
  EXPECT_EQ(loaded.ivf().nprobe(), 3);
  EXPECT_EQ(serialize_index(loaded), bytes);
  for (const auto& q : f.queries) EXPECT_EQ(loaded.search(q, 5), ivf.search(q, 5, 3));
}

TEST(IndexFile, HeaderLayout) {
  const std::string b = serialize_index(two_axes());
  ASSERT_GE(b.size(), 24u);
  EXPECT_EQ(b.substr(0, 4), "KICX");
  EXPECT_EQ(static_cast<unsigned char>(b[4]), 1);   // version, little-endian
  EXPECT_EQ(static_cast<unsigned char>(b[8]), 0);   // exact
  EXPECT_EQ(static_cast<unsigned char>(b[12]), 2);  // d
  EXPECT_EQ(static_cast<unsigned char>(b[16]), 2);  // n
  EXPECT_EQ(b.size(), 24u + 2 * 8 + 2 * 2 * 4);
}

TEST(IndexFile, CorruptionIsDetected) {
  std::string b = serialize_index(two_axes());
  std::string bad_magic = b;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_index(bad_magic), FormatError);
  std::string bad_version = b;
  bad_version[4] = 7;
  EXPECT_THROW(deserialize_index(bad_version), FormatError);
  EXPECT_THROW(deserialize_index(b.substr(0, b.size() - 3)), FormatError);
  EXPECT_THROW(deserialize_index(b + "x"), FormatError);
  EXPECT_THROW(deserialize_index(b, 3), DimensionMismatch);
  test::TempDir dir;
  EXPECT_THROW(load_index(dir / "missing.kicx"), NotFound);
}

}  // namespace
}  // namespace kic
