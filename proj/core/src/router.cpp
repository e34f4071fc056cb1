#include "kic/router.hpp"

#include <cmath>
#include <limits>

#include "kic/error.hpp"
#include "kic/rng.hpp"

namespace kic {

template <typename T>
SelectorHead<T> SelectorHead<T>::zeros(int d_model) {
  if (d_model <= 0) throw InvalidArgument("selector head needs d_model > 0");
  return {Matrix<T>::Zero(kNumExperts, d_model), Matrix<T>::Zero(1, kNumExperts)};
}

template <typename T>
SelectorHead<T> SelectorHead<T>::random(int d_model, std::uint64_t seed, double sd) {
  SelectorHead h = zeros(d_model);
  Rng rng(mix64(seed, 0x5e1ec7));
  for (Eigen::Index i = 0; i < h.w.size(); ++i) h.w.data()[i] = static_cast<T>(rng.normal() * sd);
  return h;
}

template <typename T>
KicParams<T> KicParams<T>::zeros(const T2TConfig& config) {
  return {T2TParams<T>::zeros(config), SelectorHead<T>::zeros(config.d_model)};
}

template <typename T>
KicParams<T> KicParams<T>::random(const T2TConfig& config, double selector_sd) {
  return {T2TParams<T>::random(config), SelectorHead<T>::random(config.d_model, config.seed, selector_sd)};
}

template <typename T>
std::size_t KicParams<T>::parameter_count() const {
  return backbone.parameter_count() + static_cast<std::size_t>(selector.w.size() + selector.b.size());
}

template <typename T>
SelectorForward<T> select(const Matrix<T>& hidden, std::span<const std::uint8_t> pad_mask,
                          const SelectorHead<T>& head, bool exclude_generalist) {
  if (static_cast<Eigen::Index>(pad_mask.size()) != hidden.rows())
    throw DimensionMismatch("pad mask length differs from the encoder length");
  if (head.w.cols() != hidden.cols()) throw DimensionMismatch("selector head width differs from d_model");
  const Eigen::Index experts = head.w.rows();
  if (exclude_generalist && experts < 2) throw InvalidArgument("no expert left after excluding the generalist");

  SelectorForward<T> out;
  out.exclude_generalist = exclude_generalist;
  out.pooled = Matrix<T>::Zero(1, hidden.cols());
  for (Eigen::Index r = 0; r < hidden.rows(); ++r) {
    if (pad_mask[static_cast<std::size_t>(r)]) continue;
    out.pooled += hidden.row(r);
    ++out.n_unmasked;
  }
  if (out.n_unmasked == 0) throw InvalidArgument("cannot route an input whose positions are all PAD");
  out.pooled /= static_cast<T>(out.n_unmasked);

  const Matrix<T> logits = out.pooled * head.w.transpose() + head.b;
  const Eigen::Index first = exclude_generalist ? 1 : 0;
  T mx = -std::numeric_limits<T>::infinity();
  for (Eigen::Index i = first; i < experts; ++i) mx = std::max(mx, logits(0, i));
  out.probs.assign(static_cast<std::size_t>(experts), T(0));
  T sum = T(0);
  for (Eigen::Index i = first; i < experts; ++i) {
    out.probs[static_cast<std::size_t>(i)] = std::exp(logits(0, i) - mx);
    sum += out.probs[static_cast<std::size_t>(i)];
  }
  for (auto& p : out.probs) p /= sum;

  auto& d = out.decision;
  d.probs.assign(out.probs.begin(), out.probs.end());
  d.chosen = static_cast<int>(first);
  for (Eigen::Index i = first + 1; i < experts; ++i)
    if (out.probs[static_cast<std::size_t>(i)] > out.probs[static_cast<std::size_t>(d.chosen)])
      d.chosen = static_cast<int>(i);
  d.chosen_prob = d.probs[static_cast<std::size_t>(d.chosen)];
  if (!std::isfinite(d.chosen_prob)) throw NumericalError("selector produced non-finite probabilities");
  return out;
}

template <typename T>
Matrix<T> selector_backward(const SelectorForward<T>& fwd, std::span<const std::uint8_t> pad_mask,
                            const SelectorHead<T>& head, std::span<const T> d_probs, SelectorHead<T>& grads) {
  const auto experts = fwd.probs.size();
  if (d_probs.size() != experts) throw DimensionMismatch("d_probs length differs from the expert count");
  T inner = T(0);
  for (std::size_t i = 0; i < experts; ++i) inner += fwd.probs[i] * d_probs[i];
  Matrix<T> d_logits(1, static_cast<Eigen::Index>(experts));
  for (std::size_t i = 0; i < experts; ++i)
    d_logits(0, static_cast<Eigen::Index>(i)) = fwd.probs[i] * (d_probs[i] - inner);

  grads.w.noalias() += d_logits.transpose() * fwd.pooled;
  grads.b += d_logits;
  const Matrix<T> d_pooled = (d_logits * head.w) / static_cast<T>(fwd.n_unmasked);
  Matrix<T> d_hidden = Matrix<T>::Zero(static_cast<Eigen::Index>(pad_mask.size()), head.w.cols());
  for (std::size_t r = 0; r < pad_mask.size(); ++r)
    if (!pad_mask[r]) d_hidden.row(static_cast<Eigen::Index>(r)) = d_pooled;
  return d_hidden;
}

ExpertPlan route_expert(int chosen, const AugmentQuery& query, const Augmenter& augmenter) {
  if (chosen < 0 || chosen >= kNumExperts) throw InvalidArgument("expert index out of range: " + std::to_string(chosen));
  ExpertPlan plan;
  plan.expert = chosen;
  plan.memory = memory_for_expert(chosen);
  if (!augmenter.has_memory(plan.memory))
    throw NotFound("no index built for category '" + memory_name(plan.memory) + "'");
  AugmentedInput aug = augmenter.augment(query, plan.memory);
  plan.input = std::move(aug.ids);
  plan.pieces = std::move(aug.pieces);
  plan.input_truncated = aug.input_truncated;
  return plan;
}

ExpertPlan route_expert(const RouterDecision& decision, const AugmentQuery& query, const Augmenter& augmenter) {
  return route_expert(decision.chosen, query, augmenter);
}

BalanceResult balancing_loss(std::span<const RouterDecision> decisions) {
  if (decisions.empty()) throw InvalidArgument("balancing loss needs at least one decision");
  const std::size_t experts = decisions.front().probs.size();
  BalanceResult out;
  auto& s = out.stats;
  s.batch_size = static_cast<int>(decisions.size());
  s.f.assign(experts, 0.0);
  s.P.assign(experts, 0.0);
  for (const auto& d : decisions) {
    if (d.probs.size() != experts) throw DimensionMismatch("decisions disagree on the expert count");
    s.f.at(static_cast<std::size_t>(d.chosen)) += 1.0;
    for (std::size_t i = 0; i < experts; ++i) s.P[i] += d.probs[i];
  }
  const double inv_b = 1.0 / static_cast<double>(decisions.size());
  for (std::size_t i = 0; i < experts; ++i) {
    s.f[i] *= inv_b;
    s.P[i] *= inv_b;
    out.loss += s.f[i] * s.P[i];
  }
  out.loss *= static_cast<double>(experts);
  return out;
}

std::vector<double> balancing_grad(const BalanceStats& stats) {
  std::vector<double> g(stats.f.size());
  const double scale = static_cast<double>(stats.f.size()) / static_cast<double>(stats.batch_size);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = scale * stats.f[i];
  return g;
}

double total_loss(double ce, double balance, double alpha) {
  if (!(alpha >= 0.0)) throw InvalidArgument("alpha must be >= 0");
  return ce + alpha * balance;
}

#define KIC_INSTANTIATE_ROUTER(T)                                                                       \
  template struct SelectorHead<T>;                                                                      \
  template struct KicParams<T>;                                                                         \
  template SelectorForward<T> select<T>(const Matrix<T>&, std::span<const std::uint8_t>,                \
                                        const SelectorHead<T>&, bool);                                  \
  template Matrix<T> selector_backward<T>(const SelectorForward<T>&, std::span<const std::uint8_t>,     \
                                          const SelectorHead<T>&, std::span<const T>, SelectorHead<T>&);

KIC_INSTANTIATE_ROUTER(float)
KIC_INSTANTIATE_ROUTER(double)

#undef KIC_INSTANTIATE_ROUTER

}  // namespace kic
