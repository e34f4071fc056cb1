#include <benchmark/benchmark.h>

#include "kic/backbone.hpp"

namespace {

kic::T2TConfig config(int d_model) {
  kic::T2TConfig c;
  c.d_model = d_model;
  c.d_ff = 2 * d_model;
  c.max_positions = 96;
  return c;
}

std::vector<kic::TokenId> ids(int n, int offset) {
  std::vector<kic::TokenId> out;
  for (int i = 0; i < n; ++i) out.push_back(static_cast<kic::TokenId>(kic::kByteOffset + 'a' + (i + offset) % 26));
  return out;
}

template <typename T>
void BM_ForwardLoss(benchmark::State& state) {
  const auto p = kic::T2TParams<T>::random(config(static_cast<int>(state.range(0))));
  const auto x = ids(64, 0);
  auto y = ids(12, 3);
  y.push_back(kic::kEos);
  for (auto _ : state) benchmark::DoNotOptimize(kic::forward_loss(p, std::span<const kic::TokenId>(x), std::span<const kic::TokenId>(y), T(1)));
}
BENCHMARK_TEMPLATE(BM_ForwardLoss, float)->Arg(16)->Arg(32)->Arg(64);
BENCHMARK_TEMPLATE(BM_ForwardLoss, double)->Arg(32);

template <typename T>
void BM_ForwardBackward(benchmark::State& state) {
  const auto cfg = config(static_cast<int>(state.range(0)));
  const auto p = kic::T2TParams<T>::random(cfg);
  auto grads = kic::T2TParams<T>::zeros(cfg);
  const auto x = ids(64, 0);
  auto y = ids(12, 3);
  y.push_back(kic::kEos);
  for (auto _ : state) {
    auto fwd = kic::forward_loss(p, std::span<const kic::TokenId>(x), std::span<const kic::TokenId>(y), T(1));
    benchmark::DoNotOptimize(kic::backward(p, fwd.cache, grads));
  }
}
BENCHMARK_TEMPLATE(BM_ForwardBackward, float)->Arg(16)->Arg(32)->Arg(64);

}  // namespace

BENCHMARK_MAIN();
