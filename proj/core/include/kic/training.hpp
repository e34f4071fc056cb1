#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kic/backbone.hpp"
#include "kic/retriever.hpp"
#include "kic/router.hpp"

namespace kic {

// instance: learned per-example routing (the full model).
// task: instance routing during warmup, then one fixed expert per task.
// none: generalist only, no retrieval.
// mixed: retrieval from the union of all categories, no selector.
// no_generalist: instance routing restricted to experts 1..K.
// plain_text: retrieval from the plain-text passage memory, no selector.
enum class SelectorMode { instance, task, none, mixed, no_generalist, plain_text };

std::string_view selector_mode_name(SelectorMode mode) noexcept;
SelectorMode parse_selector_mode(std::string_view name);
std::vector<SelectorMode> all_selector_modes();

// Modes where the selector is consulted (and trained) per example.
constexpr bool uses_selector(SelectorMode m) noexcept {
  return m == SelectorMode::instance || m == SelectorMode::no_generalist || m == SelectorMode::task;
}

struct PromptTemplate {
  std::string id;
  std::string input_pattern;
  std::string target_pattern;
};

struct TaskExample {
  std::map<std::string, std::string> fields;
  std::string target;
  std::optional<std::vector<std::string>> answer_choices;
};

struct TaskSpec {
  std::string name;
  std::vector<PromptTemplate> templates;
  std::vector<TaskExample> examples;
  std::string category_hint;
};

// Replaces {name} with fields.at(name); "{{" and "}}" are literal braces.
// Throws FormatError for unknown names or unbalanced braces.
std::string render_pattern(std::string_view pattern, const std::map<std::string, std::string>& fields);

struct RenderedExample {
  std::string input;
  std::string target;
  std::vector<std::string> choices;  // each choice rendered through the target pattern
};

// The example's fields plus "target" are visible to both patterns; a choice
// c is rendered by the target pattern with target = c. Errors name the
// task, template and example.
RenderedExample render_example(const TaskSpec& task, std::size_t template_index, std::size_t example_index);

// Task file: first line {"name", "templates": [{id, input_pattern,
// target_pattern}], "category_hint"?}, then one example per line
// {"fields": {...}, "target": str, "answer_choices"?: [str]}.
TaskSpec parse_task(std::istream& in, const std::string& source = "<stream>");
TaskSpec load_task(const std::filesystem::path& path);
void save_task(const TaskSpec& task, const std::filesystem::path& path);
std::vector<TaskSpec> load_task_dir(const std::filesystem::path& dir);

struct MixtureItem {
  std::uint32_t task = 0;
  std::uint32_t template_index = 0;
  std::uint32_t example = 0;

  bool operator==(const MixtureItem&) const = default;
};

// All (task, template, example) triples in a seeded random order. Every
// pair is rendered once up front so bad templates fail here.
std::vector<MixtureItem> build_mixture(std::span<const TaskSpec> tasks, std::uint64_t seed);

// Epoch e is build_mixture reshuffled with seed mix64(seed, e), so position
// i of the stream depends only on (tasks, seed, i).
class MixtureStream {
 public:
  MixtureStream(std::span<const TaskSpec> tasks, std::uint64_t seed);

  std::size_t epoch_size() const noexcept { return base_.size(); }
  MixtureItem at(std::uint64_t position);

 private:
  std::vector<MixtureItem> base_;
  std::uint64_t seed_;
  std::uint64_t cached_epoch_ = ~std::uint64_t{0};
  std::vector<MixtureItem> order_;
};

struct TrainConfig {
  double lr = 5e-5;
  double alpha = 0.05;
  int batch_size = 16;
  int epochs = 5;
  std::int64_t steps = 0;  // > 0 overrides epochs
  int max_input_len = 512;
  int max_output_len = 64;
  int max_pieces = 10;
  int top_m = 30;
  std::uint64_t seed = 1;
  SelectorMode selector_mode = SelectorMode::instance;
  int warmup_steps = 200;
  double selector_init_sd = 0.02;
  // Backbone weights to start from (the selector head stays freshly drawn).
  std::string init_checkpoint;
  // Task mode: experts fixed up front. They override the warmup vote, and
  // when every training task is listed there is no warmup at all.
  std::map<std::string, int> task_experts;

  void validate() const;
  // Base and large presets differ only in alpha.
  static TrainConfig base_preset();
  static TrainConfig large_preset();
};

struct RoutingPolicy {
  SelectorMode mode = SelectorMode::instance;
  std::map<std::string, int> task_experts;  // task mode only
};

// Fixed expert for a task from warmup routing counts: the modal expert,
// ties to the lowest index, 0 when the task was never seen.
int assign_task_expert(const std::string& task, const std::map<std::string, std::vector<std::int64_t>>& warmup_counts);

template <typename T>
struct RoutedInput {
  int expert = 0;  // -1 for union and plain-text retrieval
  MemoryId memory = MemoryId::none;
  T scale = T(1);
  std::optional<SelectorForward<T>> selector;
  EncoderCache<T> router_cache;  // filled when the selector ran with caching
  std::vector<TokenId> input;
  std::vector<std::string> pieces;
};

// Routes one example under the effective mode (the task-mode warmup passes
// instance). scale_selected decides whether the chosen probability becomes
// the logit scale.
template <typename T>
RoutedInput<T> route_example(const KicParams<T>& params, SelectorMode mode, const RoutingPolicy& policy,
                             const std::string& task, const AugmentQuery& query, const Augmenter& augmenter,
                             bool scale_selected, bool keep_cache);

// Raw input ids clipped to limit; target bytes clipped to limit - 1, then EOS.
std::vector<TokenId> input_ids(std::string_view text, int limit);
std::vector<TokenId> target_ids(std::string_view text, int limit);

struct StepMetrics {
  std::int64_t step = 0;
  double ce = 0.0;       // mean summed cross-entropy per example
  double balance = 0.0;  // 0 when not computed
  double total = 0.0;
  std::vector<std::int64_t> dispatch;  // per expert; empty slots for union/plain-text routing
  std::vector<double> mean_probs;      // batch mean selector probabilities (empty without selector)
  int batch_size = 0;

  bool operator==(const StepMetrics&) const = default;
};

struct BatchExample {
  std::string task;
  std::string text;           // rendered input, used as the retrieval query
  std::vector<TokenId> x;     // raw input ids (what the selector reads)
  std::vector<TokenId> y;     // target ids ending in EOS
};

template <typename T>
struct BatchGradients {
  StepMetrics metrics;
  KicParams<T> grads;
  std::vector<int> experts;  // per example; -1 for union/plain-text
};

struct ObjectiveOptions {
  double alpha = 0.0;
  int max_positions = 0;       // inputs longer than this are tail-truncated
  bool detach_scale = false;   // treat chosen_prob as a constant in the backbone loss
};

// Gradient of (1/B) sum_x CE_x + alpha * Bal for one batch, with the
// balancing term only in per-example routed modes. Examples are processed
// and accumulated strictly in order.
template <typename T>
BatchGradients<T> batch_gradients(const KicParams<T>& params, std::span<const BatchExample> batch, SelectorMode mode,
                                  const RoutingPolicy& policy, const Augmenter& augmenter,
                                  const ObjectiveOptions& options);

// Forward-only value of the same objective. Routing choices and dispatch
// fractions can be pinned (they are piecewise constant), and scales pinned
// to emulate detach_scale.
struct PinnedRouting {
  std::vector<int> experts;
  std::vector<double> f;
  std::vector<double> scales;  // empty = live chosen probabilities
};

template <typename T>
double batch_objective(const KicParams<T>& params, std::span<const BatchExample> batch, SelectorMode mode,
                       const RoutingPolicy& policy, const Augmenter& augmenter, const ObjectiveOptions& options,
                       const PinnedRouting* pinned = nullptr);

// One JSON object per line; doubles print with round-trip precision.
std::string metrics_to_json(const StepMetrics& m);

// Shannon entropy (nats) of a count or probability vector after normalizing.
double distribution_entropy(std::span<const double> weights);

template <typename T>
struct TrainState {
  KicParams<T> params;
  KicParams<T> adam_m;
  KicParams<T> adam_v;
  std::int64_t step = 0;
  std::map<std::string, std::vector<std::int64_t>> warmup_counts;
  std::map<std::string, int> task_experts;
  bool experts_assigned = false;
};

// Adam (b1 0.9, b2 0.999, eps 1e-8), constant lr, bias-corrected; t is the
// 1-based update count.
template <typename T>
void adam_update(KicParams<T>& params, const KicParams<T>& grads, KicParams<T>& m, KicParams<T>& v, double lr,
                 std::int64_t t);

struct TrainerHooks {
  // Called after every step with its metrics.
  std::function<void(const StepMetrics&)> on_step;
};

// Owns parameters and optimizer state. Everything is processed in example
// order in one thread, so a run is a pure function of its inputs.
template <typename T>
class Trainer {
 public:
  Trainer(const T2TConfig& model_config, const TrainConfig& config, std::vector<TaskSpec> tasks,
          const Augmenter& augmenter);

  StepMetrics train_step(std::span<const MixtureItem> batch);
  // Next batch from the mixture stream.
  StepMetrics step();
  // Runs until total_steps() (or max_steps more when > 0).
  void run(std::int64_t max_steps = 0, const TrainerHooks& hooks = {});

  std::int64_t total_steps() const;
  std::int64_t step_count() const noexcept { return state_.step; }

  const KicParams<T>& params() const noexcept { return state_.params; }
  KicParams<T>& mutable_params() noexcept { return state_.params; }
  const TrainState<T>& state() const noexcept { return state_; }
  const T2TConfig& model_config() const noexcept { return model_config_; }
  const TrainConfig& config() const noexcept { return config_; }
  const std::vector<TaskSpec>& tasks() const noexcept { return tasks_; }
  RoutingPolicy policy() const;

  // On a non-finite loss the pre-step state is written here before rethrowing.
  void set_failure_dir(std::filesystem::path dir) { failure_dir_ = std::move(dir); }

  void save_checkpoint(const std::filesystem::path& path) const;
  // Throws FormatError when the checkpoint's model config digest differs.
  void load_checkpoint(const std::filesystem::path& path);

 private:
  bool in_warmup() const noexcept;
  void finish_warmup();

  T2TConfig model_config_;
  TrainConfig config_;
  std::vector<TaskSpec> tasks_;
  const Augmenter& augmenter_;
  MixtureStream stream_;
  TrainState<T> state_;
  std::filesystem::path failure_dir_;
};

// Checkpoint file "KICW": model config block, step, trainer JSON, then
// parameters, Adam first and second moments, each tensor with name and shape.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const T2TConfig& config, const TrainState<T>& state,
                     const std::string& extra_json = "{}");

struct CheckpointInfo {
  T2TConfig config;
  int scalar_bytes = 0;
  std::int64_t step = 0;
  std::string extra_json;
};

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

// Throws FormatError on magic/version/precision problems or when expected
// (if given) has a different digest.
template <typename T>
TrainState<T> load_checkpoint(const std::filesystem::path& path, const T2TConfig* expected = nullptr,
                              std::string* extra_json = nullptr);

// FNV-1a over every parameter byte in visitation order.
template <typename T>
std::uint64_t params_digest(const KicParams<T>& params);

}  // namespace kic
