#include <benchmark/benchmark.h>

#include "kic/index_bench.hpp"

namespace {

const kic::IndexBenchData& data() {
  static const kic::IndexBenchData d = kic::make_index_bench(kic::IndexBenchSpec{});
  return d;
}

const kic::IvfIndex& ivf() {
  static const kic::IvfIndex idx = kic::build_ivf(data().index, 100, 20, 7);
  return idx;
}

void BM_ExactSearch(benchmark::State& state) {
  const auto& d = data();
  std::size_t q = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(d.index.search(d.queries[q], 10));
    q = (q + 1) % d.queries.size();
  }
}
BENCHMARK(BM_ExactSearch);

void BM_IvfSearch(benchmark::State& state) {
  const auto& d = data();
  const auto& idx = ivf();
  const int nprobe = static_cast<int>(state.range(0));
  std::size_t q = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(idx.search(d.queries[q], 10, nprobe));
    q = (q + 1) % d.queries.size();
  }
}
BENCHMARK(BM_IvfSearch)->Arg(1)->Arg(5)->Arg(10)->Arg(20);

void BM_IvfBuild(benchmark::State& state) {
  const auto& d = data();
  for (auto _ : state) benchmark::DoNotOptimize(kic::build_ivf(d.index, static_cast<int>(state.range(0)), 10, 7));
}
BENCHMARK(BM_IvfBuild)->Arg(32)->Arg(100)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
