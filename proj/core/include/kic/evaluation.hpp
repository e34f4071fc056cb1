#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kic/router.hpp"
#include "kic/training.hpp"

namespace kic {

struct EvalOptions {
  bool scale_at_eval = true;  // apply the chosen probability as logit scale
  bool length_norm = false;   // divide each choice score by its token count
  int max_input_len = 512;
  int max_output_len = 64;
};

struct ChoiceScores {
  int index = 0;                // argmax, ties to the lowest index
  std::vector<double> scores;   // one per choice
  int expert = 0;               // -1 for union/plain-text
  MemoryId memory = MemoryId::none;
  std::optional<RouterDecision> decision;
};

// Routes x once, then scores every choice (EOS appended) with the backbone
// under the same augmented input. Throws for fewer than two or empty choices.
template <typename T>
ChoiceScores score_choices(const KicParams<T>& params, const RoutingPolicy& policy, const std::string& task,
                           std::string_view x_text, std::span<const std::string> choices,
                           const Augmenter& augmenter, const EvalOptions& options);

struct RoutingLogRecord {
  std::string example_id;
  std::string task;
  int chosen = 0;
  std::vector<double> probs;

  bool operator==(const RoutingLogRecord&) const = default;
};

std::string routing_record_to_json(const RoutingLogRecord& r);
void write_routing_log(const std::filesystem::path& path, std::span<const RoutingLogRecord> records);
std::vector<RoutingLogRecord> read_routing_log(const std::filesystem::path& path);

struct TemplateAccuracy {
  std::string template_id;
  double accuracy = 0.0;
  std::int64_t n = 0;
};

struct EvalResult {
  std::string task;
  std::vector<TemplateAccuracy> per_template;  // templates with n > 0 only
  std::vector<std::string> excluded_templates; // templates with no scored example
  double mean = 0.0;
  double median = 0.0;
  double std = 0.0;  // population standard deviation
  std::int64_t skipped = 0;  // examples without answer choices (counted once)
};

// mean/median/std of per-template accuracies (median averages the middle two).
void summarize(EvalResult& result);

// Accuracy per template over the task's examples. Routing decisions are
// appended to log when given.
template <typename T>
EvalResult evaluate_task(const KicParams<T>& params, const RoutingPolicy& policy, const TaskSpec& task,
                         const Augmenter& augmenter, const EvalOptions& options,
                         std::vector<RoutingLogRecord>* log = nullptr);

struct RoutingReport {
  std::string task;
  std::vector<std::int64_t> counts;  // per expert 0..K
  std::vector<double> fractions;
  std::int64_t total = 0;

  int modal() const noexcept;
};

// Aggregates the task's records with chosen >= 0. Throws NotFound without any.
RoutingReport routing_report(const std::string& task, std::span<const RoutingLogRecord> log);

struct ResultRow {
  std::string mode;
  std::uint64_t seed = 0;
  std::string task;
  std::string template_id;
  double accuracy = 0.0;
  std::int64_t n = 0;

  bool operator==(const ResultRow&) const = default;
};

std::vector<ResultRow> result_rows(const std::string& mode, std::uint64_t seed, const EvalResult& result);
void write_results(const std::filesystem::path& path, std::span<const ResultRow> rows);
std::vector<ResultRow> read_results(const std::filesystem::path& path);

struct ReportLine {
  std::string mode;
  std::string task;
  double median = 0.0;
  double mean = 0.0;
  double std = 0.0;
  std::int64_t templates = 0;
  std::int64_t runs = 0;
};

// One line per (mode, task). Per-template accuracies are first averaged
// over seeds, then summarized across templates.
std::vector<ReportLine> aggregate_results(std::span<const ResultRow> rows);
std::string render_report_table(std::span<const ReportLine> lines);
std::string render_report_csv(std::span<const ReportLine> lines);
std::string render_routing_table(std::span<const RoutingReport> reports);
std::string render_routing_csv(std::span<const RoutingReport> reports);

struct SweepSpec {
  T2TConfig model;
  TrainConfig train;
  std::vector<SelectorMode> modes;
  std::vector<std::uint64_t> seeds;
  std::vector<TaskSpec> train_tasks;
  std::vector<TaskSpec> eval_tasks;
  EvalOptions eval;
};

struct SweepRun {
  SelectorMode mode = SelectorMode::instance;
  std::uint64_t seed = 0;
  std::vector<EvalResult> results;
  std::vector<RoutingLogRecord> routing;
  std::vector<StepMetrics> metrics;
  RoutingPolicy policy;
};

struct SweepOutput {
  std::vector<ResultRow> rows;
  std::vector<SweepRun> runs;
};

// Trains one model per (mode, seed) from scratch and evaluates it on every
// eval task. The seed replaces both model and train seeds.
template <typename T>
SweepOutput ablation_sweep(const SweepSpec& spec, const Augmenter& augmenter,
                           const std::function<void(const SweepRun&)>& on_run = {});

}  // namespace kic
