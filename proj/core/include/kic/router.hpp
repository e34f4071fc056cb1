#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kic/backbone.hpp"
#include "kic/knowledge_store.hpp"
#include "kic/retriever.hpp"

namespace kic {

// Expert 0 is the generalist; experts 1..K map to category ordinals.
inline constexpr int kNumExperts = kNumCategories + 1;

constexpr MemoryId memory_for_expert(int expert) noexcept { return static_cast<MemoryId>(expert); }

template <typename T>
struct SelectorHead {
  Matrix<T> w;  // (K+1) x d_model
  Matrix<T> b;  // 1 x (K+1)

  static SelectorHead zeros(int d_model);
  // Weights N(0, sd^2), bias zero.
  static SelectorHead random(int d_model, std::uint64_t seed, double sd);
};

// Backbone plus selector head: everything the optimizer updates.
template <typename T>
struct KicParams {
  T2TParams<T> backbone;
  SelectorHead<T> selector;

  static KicParams zeros(const T2TConfig& config);
  static KicParams random(const T2TConfig& config, double selector_sd = 0.02);

  template <typename F>
  void for_each(F&& f) {
    backbone.for_each(f);
    f(std::string_view("selector.w"), selector.w);
    f(std::string_view("selector.b"), selector.b);
  }
  template <typename F>
  void for_each(F&& f) const {
    backbone.for_each(f);
    f(std::string_view("selector.w"), selector.w);
    f(std::string_view("selector.b"), selector.b);
  }

  void set_zero() {
    for_each([](std::string_view, Matrix<T>& m) { m.setZero(); });
  }
  std::size_t parameter_count() const;
};

struct RouterDecision {
  std::vector<double> probs;  // K+1 entries, sums to 1
  int chosen = 0;
  double chosen_prob = 0.0;
};

template <typename T>
struct SelectorForward {
  RouterDecision decision;
  std::vector<T> probs;  // same as decision.probs, in working precision
  Matrix<T> pooled;      // 1 x d_model
  int n_unmasked = 0;
  bool exclude_generalist = false;
};

// Masked mean pooling of the encoder states, linear head, softmax, top-1
// with lowest-index ties. With exclude_generalist the softmax runs over
// experts 1..K only and probs[0] is exactly 0. Throws InvalidArgument when
// every position is masked.
template <typename T>
SelectorForward<T> select(const Matrix<T>& hidden, std::span<const std::uint8_t> pad_mask,
                          const SelectorHead<T>& head, bool exclude_generalist = false);

struct ExpertPlan {
  int expert = 0;
  MemoryId memory = MemoryId::none;
  std::vector<TokenId> input;
  std::vector<std::string> pieces;
  bool input_truncated = false;
};

// Expert 0 keeps the raw input; expert k retrieves from category k. Only
// this one plan is ever executed by the backbone. Throws NotFound naming
// the category when its memory is unavailable.
ExpertPlan route_expert(int chosen, const AugmentQuery& query, const Augmenter& augmenter);
ExpertPlan route_expert(const RouterDecision& decision, const AugmentQuery& query, const Augmenter& augmenter);

struct BalanceStats {
  std::vector<double> f;  // dispatch fractions, constants
  std::vector<double> P;  // mean selector probabilities
  int batch_size = 0;
};

struct BalanceResult {
  double loss = 0.0;
  BalanceStats stats;
};

// (K+1) * sum_{i=0..K} f_i * P_i over one batch. The expert count is taken
// from the decisions, so small heads work too. Throws for an empty batch.
BalanceResult balancing_loss(std::span<const RouterDecision> decisions);

// d loss / d probs_i(x), identical for every x in the batch: (K+1) f_i / B.
std::vector<double> balancing_grad(const BalanceStats& stats);

// ce + alpha * balance; alpha must be >= 0.
double total_loss(double ce, double balance, double alpha);

// Reverse pass of select(): given dLoss/dprobs, accumulates into the head
// gradients and returns dLoss/dHidden (L x d_model; PAD rows are zero).
template <typename T>
Matrix<T> selector_backward(const SelectorForward<T>& forward, std::span<const std::uint8_t> pad_mask,
                            const SelectorHead<T>& head, std::span<const T> d_probs, SelectorHead<T>& grads);

}  // namespace kic
