#include <gtest/gtest.h>

#include <cmath>

#include "kic/error.hpp"
#include "kic/rng.hpp"
#include "kic/router.hpp"
#include "kic/training.hpp"
#include "test_support.hpp"

namespace kic {
namespace {

RouterDecision decision(std::vector<double> probs, int chosen) {
  RouterDecision d;
  d.probs = std::move(probs);
  d.chosen = chosen;
  d.chosen_prob = d.probs[static_cast<std::size_t>(chosen)];
  return d;
}

Matrix<double> random_hidden(int rows, int cols, std::uint64_t seed) {
  Rng rng(seed);
  Matrix<double> h(rows, cols);
  for (Eigen::Index i = 0; i < h.size(); ++i) h.data()[i] = rng.normal();
  return h;
}

TEST(Select, ZeroHeadIsUniformAndPicksTheGeneralist) {
  const auto head = SelectorHead<double>::zeros(4);
  const std::vector<std::uint8_t> mask(3, 0);
  const auto out = select(random_hidden(3, 4, 1), mask, head);
  ASSERT_EQ(out.decision.probs.size(), 7u);
  for (const double p : out.decision.probs) EXPECT_NEAR(p, 1.0 / 7.0, 1e-15);
  EXPECT_EQ(out.decision.chosen, 0);
}

TEST(Select, BiasPicksAnExpert) {
  auto head = SelectorHead<double>::zeros(4);
  head.b(0, 1) = 10.0;
  const std::vector<std::uint8_t> mask(2, 0);
  const auto out = select(random_hidden(2, 4, 2), mask, head);
  EXPECT_EQ(out.decision.chosen, 1);
  EXPECT_GT(out.decision.chosen_prob, 0.999);
  EXPECT_DOUBLE_EQ(out.decision.chosen_prob, out.decision.probs[1]);
}

TEST(Select, MatchesTheScriptedSoftmaxOracle) {
  const auto doc = test::read_json(test::oracle_dir() / "router_oracle.json").at("softmax");
  const auto hidden_rows = doc.at("hidden").get<std::vector<std::vector<double>>>();
  const auto w_rows = doc.at("W").get<std::vector<std::vector<double>>>();
  const auto b = doc.at("b").get<std::vector<double>>();
  Matrix<double> hidden(3, 3);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) hidden(r, c) = hidden_rows[r][c];
  SelectorHead<double> head{Matrix<double>(2, 3), Matrix<double>(1, 2)};
  for (int r = 0; r < 2; ++r) {
    for (int c = 0; c < 3; ++c) head.w(r, c) = w_rows[r][c];
    head.b(0, r) = b[r];
  }
  const auto mask = doc.at("pad").get<std::vector<std::uint8_t>>();
  const auto out = select(hidden, mask, head);
  const auto pooled = doc.at("pooled").get<std::vector<double>>();
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(out.pooled(0, c), pooled[c], 1e-15);
  const auto probs = doc.at("probs").get<std::vector<double>>();
  for (int i = 0; i < 2; ++i) EXPECT_NEAR(out.decision.probs[i], probs[i], 1e-12);
  EXPECT_EQ(out.decision.chosen, doc.at("chosen").get<int>());
  EXPECT_EQ(out.n_unmasked, 2);
}

TEST(Select, AllMaskedIsAnError) {
  const auto head = SelectorHead<double>::zeros(4);
  const std::vector<std::uint8_t> mask(3, 1);
  EXPECT_THROW(select(random_hidden(3, 4, 1), mask, head), InvalidArgument);
}

TEST(Select, ExcludingTheGeneralist) {
  auto head = SelectorHead<double>::zeros(4);
  head.b(0, 0) = 5.0;
  head.b(0, 4) = 1.0;
  const std::vector<std::uint8_t> mask(2, 0);
  const auto out = select(random_hidden(2, 4, 3), mask, head, true);
  EXPECT_EQ(out.decision.probs[0], 0.0);
  EXPECT_EQ(out.decision.chosen, 4);
  double sum = 0.0;
  for (const double p : out.decision.probs) sum += p;
  EXPECT_NEAR(sum, 1.0, 1e-12);
}

TEST(Select, RandomHeadsGiveSimplexVectors) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto head = SelectorHead<double>::random(6, s, 1.0);
    std::vector<std::uint8_t> mask = {0, 1, 0, 0};
    const auto out = select(random_hidden(4, 6, s + 1), mask, head);
    double sum = 0.0;
    int argmax = 0;
    for (std::size_t i = 0; i < out.decision.probs.size(); ++i) {
      EXPECT_GE(out.decision.probs[i], 0.0);
      sum += out.decision.probs[i];
      if (out.decision.probs[i] > out.decision.probs[static_cast<std::size_t>(argmax)]) argmax = static_cast<int>(i);
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
    EXPECT_EQ(out.decision.chosen, argmax);
  }
}

TEST(SelectorBackward, MatchesFiniteDifferences) {
  const auto hidden = random_hidden(4, 5, 8);
  const std::vector<std::uint8_t> mask = {0, 0, 1, 0};
  auto head = SelectorHead<double>::random(5, 4, 0.7);
  const std::vector<double> c = {0.3, -1.2, 0.5, 2.0, -0.4, 0.1, 0.9};
  auto objective = [&](const Matrix<double>& h, const SelectorHead<double>& hd) {
    const auto out = select(h, mask, hd);
    double s = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) s += c[i] * out.decision.probs[i];
    return s;
  };
  const auto fwd = select(hidden, mask, head);
  auto grads = SelectorHead<double>::zeros(5);
  const auto d_hidden = selector_backward(fwd, mask, head, std::span<const double>(c), grads);
  const double h = 1e-6;
  auto check = [&](Matrix<double>& m, const Matrix<double>& analytic, auto&& eval) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double keep = m.data()[i];
      m.data()[i] = keep + h;
      const double up = eval();
      m.data()[i] = keep - h;
      const double down = eval();
      m.data()[i] = keep;
      EXPECT_NEAR(analytic.data()[i], (up - down) / (2 * h), 1e-8);
    }
  };
  check(head.w, grads.w, [&] { return objective(hidden, head); });
  check(head.b, grads.b, [&] { return objective(hidden, head); });
  Matrix<double> hcopy = hidden;
  check(hcopy, d_hidden, [&] { return objective(hcopy, head); });
  EXPECT_EQ(d_hidden.row(2).cwiseAbs().maxCoeff(), 0.0);
}

class RouteTest : public ::testing::Test {
 protected:
  RouteTest() : aug_(64) {
    aug_.set(MemoryId::entity, {{40, 41}});
    input_ = {10, 11, 12};
  }
  StaticAugmenter aug_;
  std::vector<TokenId> input_;
};

TEST_F(RouteTest, GeneralistKeepsTheRawInput) {
  const auto plan = route_expert(0, AugmentQuery{"q", input_}, aug_);
  EXPECT_EQ(plan.memory, MemoryId::none);
  EXPECT_TRUE(plan.pieces.empty());
  EXPECT_EQ(plan.input, input_);
}

TEST_F(RouteTest, ExpertReadsItsOwnMemory) {
  const auto plan = route_expert(decision({0.1, 0.1, 0.1, 0.4, 0.1, 0.1, 0.1}, 3), AugmentQuery{"q", input_}, aug_);
  EXPECT_EQ(plan.expert, 3);
  EXPECT_EQ(plan.memory, MemoryId::entity);
  EXPECT_EQ(plan.input, (std::vector<TokenId>{10, 11, 12, kKnowDelim, 40, 41}));
}

TEST_F(RouteTest, MissingMemoryNamesTheCategory) {
  try {
    route_expert(5, AugmentQuery{"q", input_}, aug_);
    FAIL() << "expected NotFound";
  } catch (const NotFound& e) {
    EXPECT_NE(std::string(e.what()).find("script"), std::string::npos) << e.what();
  }
  EXPECT_THROW(route_expert(7, AugmentQuery{"q", input_}, aug_), InvalidArgument);
}

TEST(Balance, UniformDecisionsGiveOne) {
  std::vector<RouterDecision> batch(4, decision(std::vector<double>(7, 1.0 / 7.0), 0));
  EXPECT_NEAR(balancing_loss(batch).loss, 1.0, 1e-9);
  std::vector<RouterDecision> spread;
  for (int i = 0; i < 7; ++i) spread.push_back(decision(std::vector<double>(7, 1.0 / 7.0), i));
  const auto r = balancing_loss(spread);
  EXPECT_NEAR(r.loss, 1.0, 1e-9);
  for (const double f : r.stats.f) EXPECT_NEAR(f, 1.0 / 7.0, 1e-15);
}

TEST(Balance, TotalCollapseGivesExpertCount) {
  std::vector<double> onehot(7, 0.0);
  onehot[2] = 1.0;
  std::vector<RouterDecision> batch(5, decision(onehot, 2));
  EXPECT_NEAR(balancing_loss(batch).loss, 7.0, 1e-9);
  std::vector<RouterDecision> two(3, decision({1.0, 0.0}, 0));
  EXPECT_NEAR(balancing_loss(two).loss, 2.0, 1e-12);
}

TEST(Balance, WorkedFixtureMatchesTheOracle) {
  const auto doc = test::read_json(test::oracle_dir() / "router_oracle.json").at("balance");
  std::vector<RouterDecision> batch;
  const auto chosen = doc.at("chosen").get<std::vector<int>>();
  const auto probs = doc.at("probs").get<std::vector<std::vector<double>>>();
  for (std::size_t i = 0; i < chosen.size(); ++i) batch.push_back(decision(probs[i], chosen[i]));
  const auto r = balancing_loss(batch);
  EXPECT_NEAR(r.loss, doc.at("loss").get<double>(), 1e-12);
  EXPECT_NEAR(r.loss, 67.0 / 75.0, 1e-12);
  const auto f = doc.at("f").get<std::vector<double>>();
  const auto P = doc.at("P").get<std::vector<double>>();
  for (int i = 0; i < 2; ++i) {
    EXPECT_NEAR(r.stats.f[i], f[i], 1e-15);
    EXPECT_NEAR(r.stats.P[i], P[i], 1e-15);
  }
  EXPECT_EQ(r.stats.batch_size, 3);
}

TEST(Balance, GradientIsScaledDispatch) {
  std::vector<RouterDecision> batch = {decision({0.51, 0.49}, 0), decision({0.51, 0.49}, 0), decision({0, 1}, 1)};
  const auto r = balancing_loss(batch);
  const auto g = balancing_grad(r.stats);
  EXPECT_NEAR(g[0], 2.0 * (2.0 / 3.0) / 3.0, 1e-15);
  EXPECT_NEAR(g[1], 2.0 * (1.0 / 3.0) / 3.0, 1e-15);
}

TEST(Balance, EmptyOrRaggedBatchesAreErrors) {
  EXPECT_THROW(balancing_loss({}), InvalidArgument);
  std::vector<RouterDecision> ragged = {decision({0.5, 0.5}, 0), decision({0.2, 0.3, 0.5}, 2)};
  EXPECT_THROW(balancing_loss(ragged), DimensionMismatch);
}

TEST(TotalLoss, Assembly) {
  EXPECT_EQ(total_loss(2.5, 9.0, 0.0), 2.5);
  EXPECT_NEAR(total_loss(2.0, 1.0, 0.05), 2.05, 1e-15);
  EXPECT_THROW(total_loss(1.0, 1.0, -0.1), InvalidArgument);
  EXPECT_EQ(TrainConfig::base_preset().alpha, 0.05);
  EXPECT_EQ(TrainConfig::large_preset().alpha, 0.01);
}

// Selector gradient through the two paths: the logit scale and the P term.
class GradientPaths : public ::testing::Test {
 protected:
  GradientPaths() : aug_(32) {
    config_.vocab_size = 11;
    config_.d_model = 8;
    config_.n_heads = 2;
    config_.d_ff = 16;
    config_.max_positions = 32;
    config_.seed = 5;
    params_ = KicParams<double>::random(config_, 0.8);
    for (int m = 1; m <= 6; ++m) aug_.set(static_cast<MemoryId>(m), {{5 + m, 6}});
    for (int i = 0; i < 4; ++i)
      batch_.push_back(BatchExample{"t", "x", {6 + i, 7, 8 - i}, {9, 7 + i % 3, kEos}});
  }

  double selector_norm(double alpha, bool detach) {
    ObjectiveOptions o;
    o.alpha = alpha;
    o.detach_scale = detach;
    o.max_positions = 32;
    const auto g = batch_gradients(params_, batch_, SelectorMode::instance, RoutingPolicy{}, aug_, o);
    return g.grads.selector.w.norm() + g.grads.selector.b.norm();
  }

  T2TConfig config_;
  KicParams<double> params_;
  StaticAugmenter aug_;
  std::vector<BatchExample> batch_;
};

TEST_F(GradientPaths, DetachedScaleWithoutBalanceGivesZero) { EXPECT_EQ(selector_norm(0.0, true), 0.0); }

TEST_F(GradientPaths, ScalePathAloneIsAlive) { EXPECT_GT(selector_norm(0.0, false), 1e-8); }

TEST_F(GradientPaths, BalancePathAloneIsAlive) { EXPECT_GT(selector_norm(0.05, true), 1e-8); }

}  // namespace
}  // namespace kic
