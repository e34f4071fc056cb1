#include "kic/gradient_check.hpp"

#include <chrono>
#include <cmath>

#include "kic/rng.hpp"

namespace kic {
namespace {

constexpr int kCheckVocab = 11;

std::vector<TokenId> random_ids(Rng& rng, int min_len, int max_len) {
  const int len = min_len + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_len - min_len + 1)));
  std::vector<TokenId> ids;
  for (int i = 0; i < len; ++i)
    ids.push_back(kByteOffset + static_cast<TokenId>(rng.below(kCheckVocab - kByteOffset)));
  return ids;
}

std::vector<const Matrix<double>*> tensor_list(const KicParams<double>& p) {
  std::vector<const Matrix<double>*> out;
  p.for_each([&out](std::string_view, const Matrix<double>& m) { out.push_back(&m); });
  return out;
}

}  // namespace

T2TConfig tiny_check_config(std::uint64_t seed) {
  T2TConfig c;
  c.vocab_size = kCheckVocab;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.d_ff = 16;
  c.max_positions = 24;
  c.seed = seed;
  return c;
}

double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  return denom < 1e-12 ? 0.0 : std::sqrt(diff) / denom;
}

GradCheckReport run_gradient_check(const GradCheckOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  const T2TConfig config = tiny_check_config(options.seed);
  Rng rng(mix64(options.seed, 0x67c));

  KicParams<double> params = KicParams<double>::random(config);
  // Non-trivial norms and biases so every block has a generic gradient.
  params.for_each([&](std::string_view name, Matrix<double>& m) {
    const bool small = name.ends_with(".gain") || name.ends_with(".bias") || name.ends_with(".b1") ||
                       name.ends_with(".b2") || name == "output_bias" || name == "selector.b";
    if (small)
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += 0.1 * rng.normal();
  });
  if (options.selector_init_sd > 0.0)
    for (Eigen::Index i = 0; i < params.selector.w.size(); ++i)
      params.selector.w.data()[i] = options.selector_init_sd * rng.normal();

  StaticAugmenter augmenter(config.max_positions);
  for (int m = 1; m <= static_cast<int>(MemoryId::plain_text); ++m) {
    std::vector<std::vector<TokenId>> pieces;
    const int n = 1 + static_cast<int>(rng.below(2));
    for (int i = 0; i < n; ++i) pieces.push_back(random_ids(rng, 2, 4));
    augmenter.set(static_cast<MemoryId>(m), std::move(pieces));
  }

  std::vector<BatchExample> batch;
  for (int n = 0; n < options.batch_size; ++n) {
    BatchExample ex;
    ex.task = "check";
    ex.x = random_ids(rng, 3, 6);
    if (n == 0) ex.x.push_back(kPad);  // exercises the PAD masks
    ex.y = random_ids(rng, 2, 4);
    ex.y.push_back(kEos);
    batch.push_back(std::move(ex));
  }

  RoutingPolicy policy;
  policy.mode = options.mode;
  ObjectiveOptions obj;
  obj.alpha = options.alpha;
  obj.max_positions = config.max_positions;
  obj.detach_scale = options.detach_scale;

  const BatchGradients<double> analytic =
      batch_gradients(params, std::span<const BatchExample>(batch), options.mode, policy, augmenter, obj);

  GradCheckReport report;
  report.experts = analytic.experts;
  PinnedRouting pinned;
  pinned.experts = analytic.experts;
  pinned.f.assign(kNumExperts, 0.0);
  const bool routed = options.mode == SelectorMode::instance || options.mode == SelectorMode::no_generalist;
  if (routed) {
    for (const int e : analytic.experts) pinned.f[static_cast<std::size_t>(e)] += 1.0 / static_cast<double>(batch.size());
    if (options.detach_scale) {
      for (std::size_t n = 0; n < batch.size(); ++n) {
        const auto enc = encode(params.backbone, std::span<const TokenId>(batch[n].x));
        const auto sel = select(enc.hidden, enc.pad_mask, params.selector, options.mode == SelectorMode::no_generalist);
        pinned.scales.push_back(sel.probs[static_cast<std::size_t>(pinned.experts[n])]);
      }
    }
  }
  auto objective = [&] {
    return batch_objective(params, std::span<const BatchExample>(batch), options.mode, policy, augmenter, obj, &pinned);
  };

  const auto grads = tensor_list(analytic.grads);
  std::size_t block = 0;
  report.passed = true;
  params.for_each([&](std::string_view name, Matrix<double>& m) {
    const Matrix<double>& g = *grads[block++];
    BlockCheck bc;
    bc.name = std::string(name);
    bc.entries = static_cast<std::size_t>(m.size());
    std::vector<double> a(bc.entries), fd(bc.entries);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double v = m.data()[i];
      m.data()[i] = v + options.h;
      const double up = objective();
      m.data()[i] = v - options.h;
      const double down = objective();
      m.data()[i] = v;
      fd[static_cast<std::size_t>(i)] = (up - down) / (2.0 * options.h);
      a[static_cast<std::size_t>(i)] = g.data()[i];
    }
    double na = 0.0, nf = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      na += a[i] * a[i];
      nf += fd[i] * fd[i];
    }
    bc.analytic_norm = std::sqrt(na);
    bc.fd_norm = std::sqrt(nf);
    bc.rel_error = relative_error(a, fd);
    bc.passed = bc.rel_error <= options.tolerance;
    report.passed = report.passed && bc.passed;
    report.blocks.push_back(std::move(bc));
  });

  // Scale derivative of a single backbone pass.
  {
    const auto& ex = batch.front();
    const double s = 0.7;
    auto loss = forward_loss(params.backbone, std::span<const TokenId>(ex.x), std::span<const TokenId>(ex.y), s);
    T2TParams<double> scratch = T2TParams<double>::zeros(config);
    const double ds = backward(params.backbone, loss.cache, scratch);
    const double up =
        forward_loss(params.backbone, std::span<const TokenId>(ex.x), std::span<const TokenId>(ex.y), s + options.h).ce;
    const double down =
        forward_loss(params.backbone, std::span<const TokenId>(ex.x), std::span<const TokenId>(ex.y), s - options.h).ce;
    report.scale_rel_error = relative_error({ds}, {(up - down) / (2.0 * options.h)});
    report.passed = report.passed && report.scale_rel_error <= options.tolerance;
  }

  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace kic
