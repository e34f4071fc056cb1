#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "kic/error.hpp"
#include "kic/training.hpp"
#include "test_support.hpp"

namespace kic {
namespace {

TaskSpec make_task(const std::string& name, int n_examples, int n_templates = 1) {
  TaskSpec t;
  t.name = name;
  for (int k = 0; k < n_templates; ++k)
    t.templates.push_back({"t" + std::to_string(k), "q" + std::to_string(k) + ": {w}?", "{target}"});
  for (int i = 0; i < n_examples; ++i) {
    TaskExample e;
    e.fields["w"] = name + std::to_string(i);
    e.target = "a" + std::to_string(i % 3);
    e.answer_choices = std::vector<std::string>{"a0", "a1", "a2"};
    t.examples.push_back(std::move(e));
  }
  return t;
}

T2TConfig tiny_model(std::uint64_t seed = 1) {
  T2TConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_positions = 40;
  c.seed = seed;
  return c;
}

TrainConfig tiny_train(SelectorMode mode, std::int64_t steps = 6) {
  TrainConfig c;
  c.lr = 1e-2;
  c.batch_size = 3;
  c.steps = steps;
  c.max_input_len = 40;
  c.max_output_len = 6;
  c.max_pieces = 2;
  c.top_m = 4;
  c.selector_mode = mode;
  c.warmup_steps = 2;
  c.selector_init_sd = 0.5;
  return c;
}

StaticAugmenter full_augmenter(TokenId fill = 50) {
  StaticAugmenter aug(40);
  for (int m = 1; m <= 8; ++m) aug.set(static_cast<MemoryId>(m), {{fill + m, fill + m + 1}});
  return aug;
}

std::vector<StepMetrics> run_steps(Trainer<double>& t, std::int64_t n) {
  std::vector<StepMetrics> out;
  TrainerHooks hooks;
  hooks.on_step = [&](const StepMetrics& m) { out.push_back(m); };
  t.run(n, hooks);
  return out;
}

TEST(Pattern, Rendering) {
  const std::map<std::string, std::string> f = {{"a", "x"}, {"b", "y"}};
  EXPECT_EQ(render_pattern("{a} and {b}", f), "x and y");
  EXPECT_EQ(render_pattern("{{literal}} {a}", f), "{literal} x");
  EXPECT_THROW(render_pattern("{c}", f), FormatError);
  EXPECT_THROW(render_pattern("{a", f), FormatError);
  EXPECT_THROW(render_pattern("a}", f), FormatError);
}

TEST(Pattern, ChoicesGoThroughTheTargetPattern) {
  TaskSpec t = make_task("k", 1);
  t.templates[0].target_pattern = "It is {target}.";
  const auto r = render_example(t, 0, 0);
  EXPECT_EQ(r.input, "q0: k0?");
  EXPECT_EQ(r.target, "It is a0.");
  EXPECT_EQ(r.choices, (std::vector<std::string>{"It is a0.", "It is a1.", "It is a2."}));
}

TEST(Pattern, ErrorsNameTaskTemplateAndExample) {
  TaskSpec t = make_task("broken", 2);
  t.templates[0].input_pattern = "{missing}";
  try {
    render_example(t, 0, 1);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("broken"), std::string::npos) << msg;
    EXPECT_NE(msg.find("t0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("1"), std::string::npos) << msg;
  }
  const std::vector<TaskSpec> tasks = {t};
  EXPECT_THROW(build_mixture(tasks, 1), FormatError);
}

TEST(TaskFile, RoundTripAndFixture) {
  const auto fixture = load_task(test::fixtures_dir() / "tasks" / "fixture_qa.jsonl");
  EXPECT_EQ(fixture.templates.size(), 2u);
  EXPECT_EQ(fixture.examples.size(), 2u);
  test::TempDir dir;
  TaskSpec t = make_task("rt", 3, 2);
  t.category_hint = "dictionary";
  t.examples[1].answer_choices.reset();
  save_task(t, dir / "rt.jsonl");
  const auto back = load_task(dir / "rt.jsonl");
  EXPECT_EQ(back.name, "rt");
  EXPECT_EQ(back.category_hint, "dictionary");
  ASSERT_EQ(back.examples.size(), 3u);
  EXPECT_EQ(back.examples[0].fields, t.examples[0].fields);
  EXPECT_FALSE(back.examples[1].answer_choices.has_value());
  EXPECT_EQ(back.templates[1].input_pattern, t.templates[1].input_pattern);
  std::istringstream bad(R"({"name":"x","templates":[]})");
  EXPECT_THROW(parse_task(bad), FormatError);
}

TEST(Mixture, CoversEveryPairOncePerEpoch) {
  const std::vector<TaskSpec> tasks = {make_task("a", 3), make_task("b", 3)};
  const auto m = build_mixture(tasks, 4);
  EXPECT_EQ(m.size(), 6u);
  std::set<std::tuple<int, int, int>> seen;
  for (const auto& it : m) seen.insert({it.task, it.template_index, it.example});
  EXPECT_EQ(seen.size(), 6u);
  EXPECT_EQ(build_mixture(tasks, 4), m);
}

TEST(Mixture, SeedsChangeTheOrder) {
  const std::vector<TaskSpec> tasks = {make_task("a", 25, 2), make_task("b", 25, 2)};
  const auto a = build_mixture(tasks, 1);
  ASSERT_EQ(a.size(), 100u);
  EXPECT_NE(a, build_mixture(tasks, 2));
  EXPECT_THROW(build_mixture(std::span<const TaskSpec>{}, 1), InvalidArgument);
}

TEST(Mixture, StreamPositionsArePure) {
  const std::vector<TaskSpec> tasks = {make_task("a", 4), make_task("b", 3)};
  MixtureStream s1(tasks, 9), s2(tasks, 9);
  std::vector<MixtureItem> forward;
  for (std::uint64_t i = 0; i < 30; ++i) forward.push_back(s1.at(i));
  for (std::uint64_t i = 30; i-- > 0;) EXPECT_EQ(s2.at(i), forward[i]);
  std::set<std::tuple<int, int, int>> epoch1;
  for (std::uint64_t i = 7; i < 14; ++i) epoch1.insert({forward[i].task, forward[i].template_index, forward[i].example});
  EXPECT_EQ(epoch1.size(), 7u);
}

TEST(TaskExpert, ModalRule) {
  std::map<std::string, std::vector<std::int64_t>> counts;
  counts["A"] = {1, 7, 2, 0, 0, 0, 0};
  counts["B"] = {0, 0, 5, 0, 0, 5, 0};
  EXPECT_EQ(assign_task_expert("A", counts), 1);
  EXPECT_EQ(assign_task_expert("B", counts), 2);
  EXPECT_EQ(assign_task_expert("C", counts), 0);
}

TEST(Ids, ClippingRules) {
  EXPECT_EQ(input_ids("abc", 2), (std::vector<TokenId>{'a' + kByteOffset, 'b' + kByteOffset}));
  EXPECT_EQ(target_ids("abc", 3), (std::vector<TokenId>{'a' + kByteOffset, 'b' + kByteOffset, kEos}));
  EXPECT_EQ(target_ids("", 3), (std::vector<TokenId>{kEos}));
}

TEST(Entropy, NormalizesAndHandlesZeros) {
  EXPECT_NEAR(distribution_entropy(std::vector<double>{1, 1, 1, 1}), std::log(4.0), 1e-12);
  EXPECT_EQ(distribution_entropy(std::vector<double>{0, 3, 0}), 0.0);
  EXPECT_NEAR(distribution_entropy(std::vector<double>{2, 2, 0}), std::log(2.0), 1e-12);
}

TEST(Metrics, JsonIsRoundTripPrecise) {
  StepMetrics m;
  m.step = 3;
  m.ce = 1.0 / 3.0;
  m.balance = 0.1;
  m.total = m.ce + 0.005;
  m.dispatch = {1, 2};
  m.mean_probs = {0.25, 0.75};
  m.batch_size = 3;
  const auto j = nlohmann::json::parse(metrics_to_json(m));
  EXPECT_EQ(j.at("ce").get<double>(), m.ce);
  EXPECT_EQ(j.at("step").get<int>(), 3);
  EXPECT_EQ(metrics_to_json(m).find('\n'), std::string::npos);
}

TEST(Adam, OnlyParametersWithGradientMove) {
  const auto cfg = tiny_model();
  auto params = KicParams<double>::random(cfg);
  const auto before = params;
  auto grads = KicParams<double>::zeros(cfg);
  grads.selector.b(0, 2) = 0.5;
  grads.backbone.output_bias(0, 9) = -1.0;
  auto m = KicParams<double>::zeros(cfg);
  auto v = KicParams<double>::zeros(cfg);
  adam_update(params, grads, m, v, 0.1, 1);
  // First bias-corrected step: lr * g / (|g| + eps).
  EXPECT_NEAR(params.selector.b(0, 2), before.selector.b(0, 2) - 0.1 * 0.5 / (0.5 + 1e-8), 1e-12);
  EXPECT_NEAR(params.backbone.output_bias(0, 9), before.backbone.output_bias(0, 9) + 0.1 / (1.0 + 1e-8), 1e-12);
  std::size_t moved = 0;
  std::vector<const Matrix<double>*> a, b;
  params.for_each([&](std::string_view, const Matrix<double>& x) { a.push_back(&x); });
  before.for_each([&](std::string_view, const Matrix<double>& x) { b.push_back(&x); });
  for (std::size_t i = 0; i < a.size(); ++i)
    for (Eigen::Index k = 0; k < a[i]->size(); ++k) moved += a[i]->data()[k] != b[i]->data()[k];
  EXPECT_EQ(moved, 2u);
}

TEST(Trainer, NoneModeIsPlainSeq2Seq) {
  const std::vector<TaskSpec> tasks = {make_task("a", 6)};
  const auto aug1 = full_augmenter(50);
  const auto aug2 = full_augmenter(90);
  Trainer<double> t1(tiny_model(), tiny_train(SelectorMode::none), tasks, aug1);
  Trainer<double> t2(tiny_model(), tiny_train(SelectorMode::none), tasks, aug2);
  const auto m1 = run_steps(t1, 4);
  const auto m2 = run_steps(t2, 4);
  EXPECT_EQ(m1, m2);  // knowledge contents never reach this mode
  for (const auto& m : m1) {
    EXPECT_EQ(m.balance, 0.0);
    EXPECT_EQ(m.dispatch[0], 3);
    EXPECT_TRUE(m.mean_probs.empty());
    EXPECT_EQ(m.total, m.ce);
  }
}

TEST(Trainer, MixedModeUsesTheUnionWithoutSelector) {
  const std::vector<TaskSpec> tasks = {make_task("a", 6)};
  const auto aug = full_augmenter();
  Trainer<double> t(tiny_model(), tiny_train(SelectorMode::mixed), tasks, aug);
  const auto before = t.params().selector.w;
  for (const auto& m : run_steps(t, 3)) {
    EXPECT_EQ(m.balance, 0.0);
    EXPECT_TRUE(m.mean_probs.empty());
  }
  EXPECT_EQ(t.params().selector.w, before);
  const std::vector<TaskSpec> one = {make_task("a", 1)};
  StaticAugmenter plain(40);
  Trainer<double> missing(tiny_model(), tiny_train(SelectorMode::mixed), one, plain);
  EXPECT_THROW(missing.step(), NotFound);
}

TEST(Trainer, InstanceModeReportsBalanceAndProbs) {
  const std::vector<TaskSpec> tasks = {make_task("a", 6), make_task("b", 6)};
  const auto aug = full_augmenter();
  Trainer<double> t(tiny_model(), tiny_train(SelectorMode::instance), tasks, aug);
  for (const auto& m : run_steps(t, 3)) {
    EXPECT_GT(m.balance, 0.0);
    ASSERT_EQ(m.mean_probs.size(), 7u);
    std::int64_t n = 0;
    for (const auto d : m.dispatch) n += d;
    EXPECT_EQ(n, 3);
    EXPECT_NEAR(m.total, m.ce + 0.05 * m.balance, 1e-12);
  }
}

TEST(Trainer, TaskModeFixesExpertsAfterWarmup) {
  const std::vector<TaskSpec> tasks = {make_task("a", 6), make_task("b", 6)};
  const auto aug = full_augmenter();
  Trainer<double> t(tiny_model(), tiny_train(SelectorMode::task), tasks, aug);
  run_steps(t, 1);
  EXPECT_FALSE(t.state().experts_assigned);
  run_steps(t, 1);
  ASSERT_TRUE(t.state().experts_assigned);
  EXPECT_EQ(t.policy().task_experts.size(), 2u);
  for (const auto& m : run_steps(t, 2)) EXPECT_EQ(m.balance, 0.0);

  auto pinned = tiny_train(SelectorMode::task);
  pinned.task_experts = {{"a", 4}, {"b", 0}};
  Trainer<double> p(tiny_model(), pinned, tasks, aug);
  EXPECT_TRUE(p.state().experts_assigned);
  EXPECT_EQ(p.policy().task_experts.at("a"), 4);
}

TEST(Trainer, SameSeedBitwiseIdentical) {
  const std::vector<TaskSpec> tasks = {make_task("a", 5), make_task("b", 4)};
  const auto aug = full_augmenter();
  Trainer<double> a(tiny_model(), tiny_train(SelectorMode::instance), tasks, aug);
  Trainer<double> b(tiny_model(), tiny_train(SelectorMode::instance), tasks, aug);
  const auto ma = run_steps(a, 5);
  const auto mb = run_steps(b, 5);
  ASSERT_EQ(ma.size(), 5u);
  for (std::size_t i = 0; i < ma.size(); ++i) EXPECT_EQ(metrics_to_json(ma[i]), metrics_to_json(mb[i]));
  EXPECT_EQ(params_digest(a.params()), params_digest(b.params()));
}

TEST(Trainer, ResumeReproducesTheStraightRun) {
  for (const auto mode : {SelectorMode::instance, SelectorMode::task}) {
    const std::vector<TaskSpec> tasks = {make_task("a", 5), make_task("b", 4)};
    const auto aug = full_augmenter();
    Trainer<double> straight(tiny_model(), tiny_train(mode, 8), tasks, aug);
    const auto full = run_steps(straight, 0);
    ASSERT_EQ(full.size(), 8u);

    test::TempDir dir;
    Trainer<double> first(tiny_model(), tiny_train(mode, 8), tasks, aug);
    auto head = run_steps(first, 3);
    first.save_checkpoint(dir / "c.kicw");
    Trainer<double> second(tiny_model(), tiny_train(mode, 8), tasks, aug);
    second.load_checkpoint(dir / "c.kicw");
    EXPECT_EQ(second.step_count(), 3);
    auto tail = run_steps(second, 0);
    head.insert(head.end(), tail.begin(), tail.end());
    EXPECT_EQ(head, full) << selector_mode_name(mode);
    EXPECT_EQ(params_digest(second.params()), params_digest(straight.params()));
  }
}

TEST(Checkpoint, RoundTripKeepsOptimizerMoments) {
  const std::vector<TaskSpec> tasks = {make_task("a", 4)};
  const auto aug = full_augmenter();
  Trainer<double> t(tiny_model(), tiny_train(SelectorMode::instance), tasks, aug);
  run_steps(t, 2);
  test::TempDir dir;
  save_checkpoint(dir / "s.kicw", t.model_config(), t.state(), R"({"k":1})");
  std::string extra;
  const auto back = load_checkpoint<double>(dir / "s.kicw", &t.model_config(), &extra);
  EXPECT_EQ(params_digest(back.params), params_digest(t.params()));
  EXPECT_EQ(params_digest(back.adam_m), params_digest(t.state().adam_m));
  EXPECT_EQ(params_digest(back.adam_v), params_digest(t.state().adam_v));
  EXPECT_EQ(back.step, 2);
  EXPECT_EQ(back.warmup_counts, t.state().warmup_counts);
  EXPECT_EQ(extra, R"({"k":1})");
  const auto info = read_checkpoint_info(dir / "s.kicw");
  EXPECT_EQ(info.scalar_bytes, 8);
  EXPECT_EQ(info.step, 2);
  EXPECT_EQ(test::read_file(dir / "s.kicw").substr(0, 4), "KICW");
}

TEST(Checkpoint, ChangedVocabularyIsADigestError) {
  const std::vector<TaskSpec> tasks = {make_task("a", 4)};
  const auto aug = full_augmenter();
  Trainer<double> t(tiny_model(), tiny_train(SelectorMode::none), tasks, aug);
  test::TempDir dir;
  t.save_checkpoint(dir / "c.kicw");
  auto other = tiny_model();
  other.vocab_size += 1;
  EXPECT_THROW(load_checkpoint<double>(dir / "c.kicw", &other), FormatError);
  EXPECT_THROW(load_checkpoint<float>(dir / "c.kicw"), FormatError);
  std::string bytes = test::read_file(dir / "c.kicw");
  bytes[1] = 'X';
  test::write_file(dir / "bad.kicw", bytes);
  EXPECT_THROW(load_checkpoint<double>(dir / "bad.kicw"), FormatError);
}

TEST(Checkpoint, InitCheckpointLoadsOnlyTheBackbone) {
  const std::vector<TaskSpec> tasks = {make_task("a", 4)};
  const auto aug = full_augmenter();
  Trainer<double> t(tiny_model(), tiny_train(SelectorMode::none), tasks, aug);
  run_steps(t, 2);
  test::TempDir dir;
  t.save_checkpoint(dir / "warm.kicw");
  auto cfg = tiny_train(SelectorMode::instance);
  cfg.init_checkpoint = (dir / "warm.kicw").string();
  Trainer<double> warm(tiny_model(7), cfg, tasks, aug);
  EXPECT_EQ(params_digest(KicParams<double>{warm.params().backbone, t.params().selector}), params_digest(t.params()));
  EXPECT_EQ(warm.step_count(), 0);
  auto wide = tiny_model();
  wide.d_ff = 32;
  EXPECT_THROW(Trainer<double>(wide, cfg, tasks, aug), FormatError);
}

TEST(Trainer, NonFiniteLossWritesTheFailingState) {
  const std::vector<TaskSpec> tasks = {make_task("a", 4)};
  const auto aug = full_augmenter();
  Trainer<double> t(tiny_model(), tiny_train(SelectorMode::none), tasks, aug);
  test::TempDir dir;
  t.set_failure_dir(dir.path());
  t.mutable_params().backbone.output_bias(0, 7) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(t.step(), NumericalError);
  EXPECT_TRUE(std::filesystem::exists(dir / "nonfinite-step-1.kicw"));
  const auto info = read_checkpoint_info(dir / "nonfinite-step-1.kicw");
  EXPECT_EQ(nlohmann::json::parse(info.extra_json).at("failed_step").get<int>(), 1);
}

TEST(Trainer, FloatPrecisionRuns) {
  const std::vector<TaskSpec> tasks = {make_task("a", 4)};
  const auto aug = full_augmenter();
  Trainer<float> t(tiny_model(), tiny_train(SelectorMode::instance), tasks, aug);
  t.run(2);
  EXPECT_EQ(t.step_count(), 2);
}

TEST(TrainConfig, Validation) {
  auto c = tiny_train(SelectorMode::instance);
  EXPECT_NO_THROW(c.validate());
  c.lr = 0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = tiny_train(SelectorMode::instance);
  c.alpha = -1;
  EXPECT_THROW(c.validate(), InvalidArgument);
  EXPECT_EQ(parse_selector_mode("no-generalist"), SelectorMode::no_generalist);
  EXPECT_THROW(parse_selector_mode("bogus"), InvalidArgument);
  for (const auto m : all_selector_modes()) EXPECT_EQ(parse_selector_mode(selector_mode_name(m)), m);
}

}  // namespace
}  // namespace kic
