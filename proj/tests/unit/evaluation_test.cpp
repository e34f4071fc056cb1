#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "kic/error.hpp"
#include "kic/evaluation.hpp"
#include "test_support.hpp"

namespace kic {
namespace {

T2TConfig tiny_model(std::uint64_t seed = 3) {
  T2TConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_positions = 48;
  c.seed = seed;
  return c;
}

TaskSpec qa_task(const std::string& name, int n, int n_templates = 2) {
  TaskSpec t;
  t.name = name;
  for (int k = 0; k < n_templates; ++k) t.templates.push_back({"p" + std::to_string(k), "Q" + std::to_string(k) + " {w}", "{target}"});
  for (int i = 0; i < n; ++i) {
    TaskExample e;
    e.fields["w"] = "w" + std::to_string(i);
    e.target = i % 2 ? "yes" : "no";
    e.answer_choices = std::vector<std::string>{"no", "yes"};
    t.examples.push_back(std::move(e));
  }
  return t;
}

StaticAugmenter augmenter() {
  StaticAugmenter aug(48);
  for (int m = 1; m <= 8; ++m) aug.set(static_cast<MemoryId>(m), {{20 + m, 30 + m}});
  return aug;
}

const EvalOptions kOpts{true, false, 48, 8};

TEST(ScoreChoices, UniformModelTiesToTheFirstChoice) {
  const auto params = KicParams<double>::zeros(tiny_model());
  const auto aug = augmenter();
  const std::vector<std::string> same = {"abc", "xyz", "pqr"};
  const auto s = score_choices(params, RoutingPolicy{SelectorMode::none, {}}, "t", "q", same, aug, kOpts);
  EXPECT_EQ(s.index, 0);
  for (const double v : s.scores) EXPECT_NEAR(v, -4.0 * std::log(261.0), 1e-9);
  EXPECT_EQ(s.expert, 0);
  EXPECT_FALSE(s.decision.has_value());
}

TEST(ScoreChoices, LengthNormalization) {
  const auto params = KicParams<double>::zeros(tiny_model());
  const auto aug = augmenter();
  const std::vector<std::string> choices = {"long answer", "ok"};
  const RoutingPolicy none{SelectorMode::none, {}};
  EXPECT_EQ(score_choices(params, none, "t", "q", choices, aug, kOpts).index, 1);
  EvalOptions norm = kOpts;
  norm.length_norm = true;
  const auto s = score_choices(params, none, "t", "q", choices, aug, norm);
  EXPECT_NEAR(s.scores[0], s.scores[1], 1e-12);
}

TEST(ScoreChoices, OutputBiasShiftChangesNothing) {
  auto params = KicParams<double>::random(tiny_model(), 0.3);
  const auto aug = augmenter();
  const std::vector<std::string> choices = {"red", "green", "blue"};
  const RoutingPolicy inst{SelectorMode::instance, {}};
  const auto a = score_choices(params, inst, "t", "which colour", choices, aug, kOpts);
  params.backbone.output_bias.array() += 2.5;
  const auto b = score_choices(params, inst, "t", "which colour", choices, aug, kOpts);
  EXPECT_EQ(a.index, b.index);
  for (std::size_t i = 0; i < choices.size(); ++i) EXPECT_NEAR(a.scores[i], b.scores[i], 1e-9);
}

TEST(ScoreChoices, RejectsDegenerateChoiceLists) {
  const auto params = KicParams<double>::zeros(tiny_model());
  const auto aug = augmenter();
  const RoutingPolicy none{SelectorMode::none, {}};
  EXPECT_THROW(score_choices(params, none, "t", "q", std::vector<std::string>{"only"}, aug, kOpts), InvalidArgument);
  EXPECT_THROW(score_choices(params, none, "t", "q", std::vector<std::string>{"a", ""}, aug, kOpts), InvalidArgument);
}

TEST(ScoreChoices, WithoutScalingOnlyTheChosenExpertMatters) {
  auto p1 = KicParams<double>::random(tiny_model(), 0.0);
  auto p2 = p1;
  p1.selector.b(0, 3) = 4.0;
  p2.selector.b(0, 3) = 9.0;
  p2.selector.b(0, 1) = 1.0;
  const auto aug = augmenter();
  EvalOptions opts = kOpts;
  opts.scale_at_eval = false;
  const RoutingPolicy inst{SelectorMode::instance, {}};
  const std::vector<std::string> choices = {"one", "two"};
  const auto a = score_choices(p1, inst, "t", "query", choices, aug, opts);
  const auto b = score_choices(p2, inst, "t", "query", choices, aug, opts);
  ASSERT_EQ(a.expert, 3);
  ASSERT_EQ(b.expert, 3);
  EXPECT_EQ(a.scores, b.scores);
  opts.scale_at_eval = true;
  const auto c = score_choices(p1, inst, "t", "query", choices, aug, opts);
  const auto d = score_choices(p2, inst, "t", "query", choices, aug, opts);
  EXPECT_NE(c.scores, d.scores);
}

TEST(Summary, MeanMedianStd) {
  EvalResult r;
  r.per_template = {{"a", 0.5, 4}, {"b", 0.9, 4}, {"c", 0.7, 4}};
  summarize(r);
  EXPECT_NEAR(r.mean, 0.7, 1e-12);
  EXPECT_NEAR(r.median, 0.7, 1e-12);
  EXPECT_NEAR(r.std, std::sqrt(0.08 / 3.0), 1e-12);
  r.per_template = {{"a", 0.6, 1}};
  summarize(r);
  EXPECT_EQ(r.std, 0.0);
  EXPECT_EQ(r.median, 0.6);
  r.per_template = {{"a", 0.2, 1}, {"b", 0.4, 1}};
  summarize(r);
  EXPECT_NEAR(r.median, 0.3, 1e-12);
}

TEST(EvaluateTask, CountsSkippedAndExcluded) {
  auto task = qa_task("mix", 4, 2);
  task.examples[1].answer_choices.reset();
  const auto params = KicParams<double>::random(tiny_model(), 0.3);
  const auto aug = augmenter();
  const RoutingPolicy inst{SelectorMode::instance, {}};
  std::vector<RoutingLogRecord> log;
  const auto r = evaluate_task(params, inst, task, aug, kOpts, &log);
  EXPECT_EQ(r.skipped, 1);
  ASSERT_EQ(r.per_template.size(), 2u);
  EXPECT_EQ(r.per_template[0].n, 3);
  EXPECT_EQ(log.size(), 6u);
  EXPECT_EQ(log[0].example_id, "mix/p0/0");
  for (const auto& rec : log) EXPECT_EQ(rec.probs.size(), 7u);

  auto none_scored = qa_task("empty", 2, 1);
  for (auto& e : none_scored.examples) e.answer_choices.reset();
  const auto r2 = evaluate_task(params, inst, none_scored, aug, kOpts);
  EXPECT_TRUE(r2.per_template.empty());
  EXPECT_EQ(r2.excluded_templates, (std::vector<std::string>{"p0"}));
  EXPECT_EQ(r2.skipped, 2);

  auto bad = qa_task("bad", 1, 1);
  bad.examples[0].target = "maybe";
  EXPECT_THROW(evaluate_task(params, inst, bad, aug, kOpts), FormatError);
}

TEST(EvaluateTask, DeterministicAndReadOnly) {
  const auto task = qa_task("det", 6);
  const auto params = KicParams<double>::random(tiny_model(), 0.3);
  const auto digest = params_digest(params);
  const auto aug = augmenter();
  const RoutingPolicy inst{SelectorMode::instance, {}};
  std::vector<RoutingLogRecord> l1, l2;
  const auto a = evaluate_task(params, inst, task, aug, kOpts, &l1);
  const auto b = evaluate_task(params, inst, task, aug, kOpts, &l2);
  EXPECT_EQ(result_rows("instance", 1, a), result_rows("instance", 1, b));
  EXPECT_EQ(l1, l2);
  EXPECT_EQ(params_digest(params), digest);
}

TEST(RoutingReport, FractionsAndErrors) {
  std::vector<RoutingLogRecord> log;
  for (int i = 0; i < 4; ++i) log.push_back({"e" + std::to_string(i), "gen", 0, {}});
  const auto all_gen = routing_report("gen", log);
  EXPECT_EQ(all_gen.fractions, (std::vector<double>{1, 0, 0, 0, 0, 0, 0}));
  EXPECT_EQ(all_gen.modal(), 0);
  log.push_back({"x", "m", 2, {}});
  log.push_back({"y", "m", 5, {}});
  log.push_back({"z", "m", 5, {}});
  log.push_back({"u", "m", -1, {}});
  const auto m = routing_report("m", log);
  EXPECT_EQ(m.total, 3);
  double sum = 0;
  for (const double f : m.fractions) sum += f;
  EXPECT_NEAR(sum, 1.0, 1e-12);
  EXPECT_EQ(m.modal(), 5);
  EXPECT_THROW(routing_report("nobody", log), NotFound);
}

TEST(Results, FilesRoundTrip) {
  test::TempDir dir;
  const std::vector<ResultRow> rows = {{"instance", 1, "a", "p0", 0.75, 8}, {"none", 2, "a", "p1", 1.0 / 3.0, 9}};
  write_results(dir / "r.jsonl", rows);
  EXPECT_EQ(read_results(dir / "r.jsonl"), rows);
  const std::vector<RoutingLogRecord> log = {{"a/p0/0", "a", 3, {0.1, 0.9}}};
  write_routing_log(dir / "routing.jsonl", log);
  EXPECT_EQ(read_routing_log(dir / "routing.jsonl"), log);
  EXPECT_THROW(read_results(dir / "missing.jsonl"), NotFound);
  test::write_file(dir / "bad.jsonl", "{\"mode\":\n");
  EXPECT_THROW(read_results(dir / "bad.jsonl"), FormatError);
}

TEST(Results, AggregateAveragesSeedsFirst) {
  const std::vector<ResultRow> rows = {
      {"instance", 1, "a", "p0", 0.4, 10}, {"instance", 2, "a", "p0", 0.6, 10},
      {"instance", 1, "a", "p1", 0.8, 10}, {"instance", 2, "a", "p1", 1.0, 10},
      {"none", 1, "a", "p0", 0.3, 10},
  };
  const auto lines = aggregate_results(rows);
  ASSERT_EQ(lines.size(), 2u);
  EXPECT_EQ(lines[0].mode, "instance");
  EXPECT_NEAR(lines[0].mean, 0.7, 1e-12);
  EXPECT_NEAR(lines[0].std, 0.2, 1e-12);
  EXPECT_EQ(lines[0].templates, 2);
  EXPECT_EQ(lines[0].runs, 2);
  EXPECT_EQ(lines[1].runs, 1);
  const auto table = render_report_table(lines);
  EXPECT_NE(table.find("instance"), std::string::npos);
  const auto csv = render_report_csv(lines);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  RoutingReport rep = routing_report("a", std::vector<RoutingLogRecord>{{"x", "a", 1, {}}});
  EXPECT_NE(render_routing_table(std::vector<RoutingReport>{rep}).find("\na  0.000  1.000"), std::string::npos);
  EXPECT_NE(render_routing_csv(std::vector<RoutingReport>{rep}).find("1.0"), std::string::npos);
}

TEST(Sweep, OneRowPerModeAndTemplateAndRepeatable) {
  SweepSpec spec;
  spec.model = tiny_model();
  spec.train.lr = 1e-2;
  spec.train.batch_size = 2;
  spec.train.steps = 3;
  spec.train.max_input_len = 48;
  spec.train.max_output_len = 8;
  spec.train.max_pieces = 1;
  spec.train.top_m = 2;
  spec.train.warmup_steps = 1;
  spec.modes = {SelectorMode::instance, SelectorMode::none};
  spec.seeds = {5};
  spec.train_tasks = {qa_task("qa", 4, 1)};
  spec.eval_tasks = {qa_task("qa", 4, 1)};
  spec.eval = kOpts;
  const auto aug = augmenter();
  int seen = 0;
  const auto a = ablation_sweep<double>(spec, aug, [&](const SweepRun& r) {
    ++seen;
    EXPECT_EQ(r.metrics.size(), 3u);
  });
  EXPECT_EQ(seen, 2);
  ASSERT_EQ(a.rows.size(), 2u);
  EXPECT_EQ(a.rows[0].mode, "instance");
  EXPECT_EQ(a.rows[1].mode, "none");
  EXPECT_EQ(ablation_sweep<double>(spec, aug).rows, a.rows);
  spec.modes.clear();
  EXPECT_THROW(ablation_sweep<double>(spec, aug), InvalidArgument);
}

}  // namespace
}  // namespace kic
