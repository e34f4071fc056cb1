#include "kic/index_bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "kic/error.hpp"
#include "kic/rng.hpp"

namespace kic {
namespace {

std::vector<double> unit_gaussian(Rng& rng, int d) {
  std::vector<double> v(static_cast<std::size_t>(d));
  double n = 0.0;
  do {
    n = 0.0;
    for (double& x : v) {
      x = rng.normal();
      n += x * x;
    }
  } while (n == 0.0);
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return v;
}

std::vector<double> around(Rng& rng, const std::vector<double>& centre, double spread) {
  std::vector<double> v = centre;
  double n = 0.0;
  for (double& x : v) {
    x += spread * rng.normal();
    n += x * x;
  }
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return v;
}

}  // namespace

void IndexBenchSpec::validate() const {
  if (n <= 0 || d <= 0 || blobs <= 0 || queries < 0 || spread < 0.0)
    throw InvalidArgument("index benchmark needs positive n, d, blobs and a non-negative spread");
}

IndexBenchData make_index_bench(const IndexBenchSpec& spec) {
  spec.validate();
  Rng rng(mix64(spec.seed, 0x1b));
  std::vector<std::vector<double>> centres;
  for (int b = 0; b < spec.blobs; ++b) centres.push_back(unit_gaussian(rng, spec.d));

  std::vector<std::uint64_t> ids;
  std::vector<float> keys;
  ids.reserve(static_cast<std::size_t>(spec.n));
  keys.reserve(static_cast<std::size_t>(spec.n) * static_cast<std::size_t>(spec.d));
  for (int i = 0; i < spec.n; ++i) {
    const auto& c = centres[rng.below(centres.size())];
    for (const double x : around(rng, c, spec.spread)) keys.push_back(static_cast<float>(x));
    ids.push_back(static_cast<std::uint64_t>(i));
  }

  IndexBenchData data{ExactIndex(spec.d, std::move(ids), std::move(keys)), {}};
  for (int q = 0; q < spec.queries; ++q) {
    EmbeddingVector v;
    v.values = around(rng, centres[rng.below(centres.size())], spec.spread);
    v.normalized = true;
    data.queries.push_back(std::move(v));
  }
  return data;
}

double recall_at_k(const ExactIndex& exact, const IvfIndex& ivf, std::span<const EmbeddingVector> queries,
                   std::size_t k, int nprobe) {
  if (queries.empty() || k == 0) throw InvalidArgument("recall needs queries and k > 0");
  double sum = 0.0;
  for (const auto& q : queries) {
    const auto truth = exact.search(q, k);
    const auto got = ivf.search(q, k, nprobe);
    std::size_t hit = 0;
    for (const auto& t : truth)
      hit += std::any_of(got.begin(), got.end(), [&t](const SearchHit& g) { return g.kv_id == t.kv_id; });
    sum += static_cast<double>(hit) / static_cast<double>(truth.size());
  }
  return sum / static_cast<double>(queries.size());
}

std::vector<RecallPoint> recall_sweep(const IndexBenchData& data, const IvfIndex& ivf, std::size_t k,
                                      std::span<const int> nprobes) {
  std::vector<RecallPoint> out;
  for (const int p : nprobes) {
    RecallPoint pt;
    pt.nprobe = p;
    pt.recall = recall_at_k(data.index, ivf, data.queries, k, p);
    const auto t0 = std::chrono::steady_clock::now();
    for (const auto& q : data.queries) (void)ivf.search(q, k, p);
    const double us = std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
    pt.mean_query_us = us / static_cast<double>(data.queries.size());
    out.push_back(pt);
  }
  return out;
}

}  // namespace kic
