#include "kic/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "kic/error.hpp"
#include "kic/rng.hpp"

namespace kic {

using json = nlohmann::json;

// ---- modes ------------------------------------------------------------------

std::string_view selector_mode_name(SelectorMode mode) noexcept {
  switch (mode) {
    case SelectorMode::instance: return "instance";
    case SelectorMode::task: return "task";
    case SelectorMode::none: return "none";
    case SelectorMode::mixed: return "mixed";
    case SelectorMode::no_generalist: return "no-generalist";
    case SelectorMode::plain_text: return "plain-text";
  }
  return "?";
}

std::vector<SelectorMode> all_selector_modes() {
  return {SelectorMode::instance, SelectorMode::task,          SelectorMode::none,
          SelectorMode::mixed,    SelectorMode::no_generalist, SelectorMode::plain_text};
}

SelectorMode parse_selector_mode(std::string_view name) {
  for (const auto m : all_selector_modes())
    if (selector_mode_name(m) == name) return m;
  throw InvalidArgument("unknown selector mode '" + std::string(name) +
                        "' (valid: instance, task, none, mixed, no-generalist, plain-text)");
}

// ---- templates --------------------------------------------------------------

std::string render_pattern(std::string_view pattern, const std::map<std::string, std::string>& fields) {
  std::string out;
  out.reserve(pattern.size() + 32);
  for (std::size_t i = 0; i < pattern.size(); ++i) {
    const char c = pattern[i];
    if (c == '{') {
      if (i + 1 < pattern.size() && pattern[i + 1] == '{') {
        out.push_back('{');
        ++i;
        continue;
      }
      const auto close = pattern.find('}', i + 1);
      if (close == std::string_view::npos) throw FormatError("unclosed '{' in pattern \"" + std::string(pattern) + "\"");
      const std::string name(pattern.substr(i + 1, close - i - 1));
      const auto it = fields.find(name);
      if (it == fields.end()) throw FormatError("unknown placeholder {" + name + "}");
      out += it->second;
      i = close;
    } else if (c == '}') {
      if (i + 1 < pattern.size() && pattern[i + 1] == '}') {
        out.push_back('}');
        ++i;
        continue;
      }
      throw FormatError("stray '}' in pattern \"" + std::string(pattern) + "\"");
    } else {
      out.push_back(c);
    }
  }
  return out;
}

RenderedExample render_example(const TaskSpec& task, std::size_t template_index, std::size_t example_index) {
  const auto where = [&] {
    std::string t = template_index < task.templates.size() ? task.templates[template_index].id : "?";
    return "task '" + task.name + "', template '" + t + "', example " + std::to_string(example_index);
  };
  if (template_index >= task.templates.size() || example_index >= task.examples.size())
    throw InvalidArgument(where() + ": index out of range");
  const PromptTemplate& tpl = task.templates[template_index];
  const TaskExample& ex = task.examples[example_index];
  try {
    auto fields = ex.fields;
    fields["target"] = ex.target;
    RenderedExample r;
    r.input = render_pattern(tpl.input_pattern, fields);
    r.target = render_pattern(tpl.target_pattern, fields);
    if (r.input.empty()) throw FormatError("input renders empty");
    if (r.target.empty()) throw FormatError("target renders empty");
    if (ex.answer_choices) {
      for (const auto& choice : *ex.answer_choices) {
        fields["target"] = choice;
        r.choices.push_back(render_pattern(tpl.target_pattern, fields));
      }
    }
    return r;
  } catch (const FormatError& e) {
    throw FormatError(where() + ": " + e.what());
  }
}

// ---- task files ---------------------------------------------------------------

TaskSpec parse_task(std::istream& in, const std::string& source) {
  TaskSpec task;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      if (!have_header) {
        task.name = j.at("name").get<std::string>();
        for (const auto& t : j.at("templates"))
          task.templates.push_back({t.at("id").get<std::string>(), t.at("input_pattern").get<std::string>(),
                                    t.at("target_pattern").get<std::string>()});
        if (j.contains("category_hint")) task.category_hint = j["category_hint"].get<std::string>();
        have_header = true;
        continue;
      }
      TaskExample ex;
      for (const auto& [k, v] : j.at("fields").items()) ex.fields[k] = v.get<std::string>();
      ex.target = j.at("target").get<std::string>();
      if (j.contains("answer_choices")) ex.answer_choices = j["answer_choices"].get<std::vector<std::string>>();
      task.examples.push_back(std::move(ex));
    } catch (const json::exception& e) {
      throw FormatError(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!have_header) throw FormatError(source + ": missing task header line");
  if (task.name.empty()) throw FormatError(source + ": task name is empty");
  if (task.templates.empty()) throw FormatError(source + ": task '" + task.name + "' has no templates");
  return task;
}

TaskSpec load_task(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFound("cannot open task file " + path.string());
  return parse_task(in, path.string());
}

void save_task(const TaskSpec& task, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write task file " + path.string());
  json header;
  header["name"] = task.name;
  header["templates"] = json::array();
  for (const auto& t : task.templates)
    header["templates"].push_back({{"id", t.id}, {"input_pattern", t.input_pattern}, {"target_pattern", t.target_pattern}});
  if (!task.category_hint.empty()) header["category_hint"] = task.category_hint;
  out << header.dump() << '\n';
  for (const auto& ex : task.examples) {
    json j;
    j["fields"] = ex.fields;
    j["target"] = ex.target;
    if (ex.answer_choices) j["answer_choices"] = *ex.answer_choices;
    out << j.dump() << '\n';
  }
}

std::vector<TaskSpec> load_task_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw NotFound("task directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".jsonl") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<TaskSpec> tasks;
  for (const auto& f : files) tasks.push_back(load_task(f));
  return tasks;
}

// ---- mixture ------------------------------------------------------------------

std::vector<MixtureItem> build_mixture(std::span<const TaskSpec> tasks, std::uint64_t seed) {
  if (tasks.empty()) throw InvalidArgument("mixture needs at least one task");
  std::vector<MixtureItem> items;
  for (std::size_t t = 0; t < tasks.size(); ++t)
    for (std::size_t p = 0; p < tasks[t].templates.size(); ++p)
      for (std::size_t e = 0; e < tasks[t].examples.size(); ++e) {
        (void)render_example(tasks[t], p, e);
        items.push_back({static_cast<std::uint32_t>(t), static_cast<std::uint32_t>(p), static_cast<std::uint32_t>(e)});
      }
  if (items.empty()) throw InvalidArgument("mixture is empty: no task has examples");
  Rng rng(seed);
  rng.shuffle(items.begin(), items.end());
  return items;
}

MixtureStream::MixtureStream(std::span<const TaskSpec> tasks, std::uint64_t seed)
    : base_(build_mixture(tasks, seed)), seed_(seed) {}

MixtureItem MixtureStream::at(std::uint64_t position) {
  const std::uint64_t epoch = position / base_.size();
  if (epoch != cached_epoch_) {
    order_ = base_;
    if (epoch > 0) {
      Rng rng(mix64(seed_, epoch));
      rng.shuffle(order_.begin(), order_.end());
    }
    cached_epoch_ = epoch;
  }
  return order_[position % base_.size()];
}

// ---- config -------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw InvalidArgument("train.lr must be > 0");
  if (!(alpha >= 0.0)) throw InvalidArgument("train.alpha must be >= 0");
  if (batch_size < 1) throw InvalidArgument("train.batch_size must be >= 1");
  if (epochs < 1 && steps <= 0) throw InvalidArgument("train.epochs must be >= 1 (or set train.steps)");
  if (steps < 0) throw InvalidArgument("train.steps must be >= 0");
  if (max_input_len < 1 || max_output_len < 2) throw InvalidArgument("train.max_input_len/max_output_len too small");
  if (max_pieces < 0 || top_m < max_pieces) throw InvalidArgument("train needs top_m >= max_pieces >= 0");
  if (warmup_steps < 0) throw InvalidArgument("train.warmup_steps must be >= 0");
  if (!(selector_init_sd >= 0.0)) throw InvalidArgument("train.selector_init_sd must be >= 0");
  for (const auto& [task, expert] : task_experts)
    if (expert < 0 || expert >= kNumExperts)
      throw InvalidArgument("train.task_experts['" + task + "'] must be in 0.." + std::to_string(kNumExperts - 1));
}

TrainConfig TrainConfig::base_preset() { return TrainConfig{}; }

TrainConfig TrainConfig::large_preset() {
  TrainConfig c;
  c.alpha = 0.01;
  return c;
}

// ---- routing ------------------------------------------------------------------

int assign_task_expert(const std::string& task, const std::map<std::string, std::vector<std::int64_t>>& counts) {
  const auto it = counts.find(task);
  if (it == counts.end()) return 0;
  int best = 0;
  for (std::size_t i = 1; i < it->second.size(); ++i)
    if (it->second[i] > it->second[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return it->second.empty() || it->second[static_cast<std::size_t>(best)] == 0 ? 0 : best;
}

std::vector<TokenId> input_ids(std::string_view text, int limit) {
  std::vector<TokenId> ids = ByteTokenizer::encode(text);
  if (static_cast<int>(ids.size()) > limit) ids.resize(static_cast<std::size_t>(limit));
  return ids;
}

std::vector<TokenId> target_ids(std::string_view text, int limit) {
  std::vector<TokenId> ids = ByteTokenizer::encode(text);
  if (static_cast<int>(ids.size()) > limit - 1) ids.resize(static_cast<std::size_t>(std::max(0, limit - 1)));
  ids.push_back(kEos);
  return ids;
}

template <typename T>
RoutedInput<T> route_example(const KicParams<T>& params, SelectorMode mode, const RoutingPolicy& policy,
                             const std::string& task, const AugmentQuery& query, const Augmenter& augmenter,
                             bool scale_selected, bool keep_cache) {
  RoutedInput<T> out;
  auto take_plan = [&out](ExpertPlan plan) {
    out.expert = plan.expert;
    out.memory = plan.memory;
    out.input = std::move(plan.input);
    out.pieces = std::move(plan.pieces);
  };
  auto take_memory = [&](MemoryId memory) {
    if (!augmenter.has_memory(memory)) throw NotFound("no index built for memory '" + memory_name(memory) + "'");
    AugmentedInput aug = augmenter.augment(query, memory);
    out.expert = -1;
    out.memory = memory;
    out.input = std::move(aug.ids);
    out.pieces = std::move(aug.pieces);
  };
  switch (mode) {
    case SelectorMode::none:
      take_plan(route_expert(0, query, augmenter));
      break;
    case SelectorMode::mixed:
      take_memory(MemoryId::all_categories);
      break;
    case SelectorMode::plain_text:
      take_memory(MemoryId::plain_text);
      break;
    case SelectorMode::task: {
      const auto it = policy.task_experts.find(task);
      take_plan(route_expert(it == policy.task_experts.end() ? 0 : it->second, query, augmenter));
      break;
    }
    case SelectorMode::instance:
    case SelectorMode::no_generalist: {
      const EncoderOutput<T> enc = encode(params.backbone, query.input_ids, keep_cache ? &out.router_cache : nullptr);
      out.selector = select(enc.hidden, enc.pad_mask, params.selector, mode == SelectorMode::no_generalist);
      take_plan(route_expert(out.selector->decision, query, augmenter));
      if (scale_selected) out.scale = out.selector->probs[static_cast<std::size_t>(out.expert)];
      break;
    }
  }
  return out;
}

// ---- metrics ------------------------------------------------------------------

std::string metrics_to_json(const StepMetrics& m) {
  json j;
  j["step"] = m.step;
  j["ce"] = m.ce;
  j["balance"] = m.balance;
  j["total"] = m.total;
  j["dispatch"] = m.dispatch;
  j["mean_probs"] = m.mean_probs;
  j["batch_size"] = m.batch_size;
  return j.dump();
}

double distribution_entropy(std::span<const double> weights) {
  double sum = 0.0;
  for (const double w : weights) {
    if (w < 0.0) throw InvalidArgument("entropy of a negative weight");
    sum += w;
  }
  if (sum <= 0.0) return 0.0;
  double h = 0.0;
  for (const double w : weights)
    if (w > 0.0) h -= (w / sum) * std::log(w / sum);
  return h;
}

// ---- optimizer -----------------------------------------------------------------

namespace {

template <typename T>
std::vector<Matrix<T>*> tensors(KicParams<T>& p) {
  std::vector<Matrix<T>*> out;
  p.for_each([&out](std::string_view, Matrix<T>& m) { out.push_back(&m); });
  return out;
}

template <typename T>
std::vector<const Matrix<T>*> tensors(const KicParams<T>& p) {
  std::vector<const Matrix<T>*> out;
  p.for_each([&out](std::string_view, const Matrix<T>& m) { out.push_back(&m); });
  return out;
}

template <typename T>
bool all_finite(const KicParams<T>& p) {
  bool ok = true;
  p.for_each([&ok](std::string_view, const Matrix<T>& m) { ok = ok && m.allFinite(); });
  return ok;
}

}  // namespace

template <typename T>
void adam_update(KicParams<T>& params, const KicParams<T>& grads, KicParams<T>& m, KicParams<T>& v, double lr,
                 std::int64_t t) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  if (t < 1) throw InvalidArgument("Adam step count must be >= 1");
  const auto p = tensors(params);
  const auto g = tensors(grads);
  const auto mm = tensors(m);
  const auto vv = tensors(v);
  const T c1 = static_cast<T>(1.0 - std::pow(b1, static_cast<double>(t)));
  const T c2 = static_cast<T>(1.0 - std::pow(b2, static_cast<double>(t)));
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto& pm = *mm[i];
    auto& pv = *vv[i];
    pm = T(b1) * pm + T(1.0 - b1) * *g[i];
    pv = T(b2) * pv + T(1.0 - b2) * g[i]->cwiseAbs2();
    p[i]->array() -= T(lr) * (pm.array() / c1) / ((pv.array() / c2).sqrt() + T(eps));
  }
}

// ---- trainer ---------------------------------------------------------------------

template <typename T>
Trainer<T>::Trainer(const T2TConfig& model_config, const TrainConfig& config, std::vector<TaskSpec> tasks,
                    const Augmenter& augmenter)
    : model_config_(model_config),
      config_(config),
      tasks_(std::move(tasks)),
      augmenter_(augmenter),
      stream_(tasks_, config.seed) {
  model_config_.validate();
  config_.validate();
  state_.params = KicParams<T>::random(model_config_, config_.selector_init_sd);
  state_.adam_m = KicParams<T>::zeros(model_config_);
  state_.adam_v = KicParams<T>::zeros(model_config_);
  if (!config_.init_checkpoint.empty()) {
    const CheckpointInfo info = read_checkpoint_info(config_.init_checkpoint);
    T2TConfig arch = info.config;
    arch.seed = model_config_.seed;
    if (!(arch == model_config_))
      throw FormatError(config_.init_checkpoint + ": backbone architecture differs from the model config");
    state_.params.backbone = kic::load_checkpoint<T>(config_.init_checkpoint).params.backbone;
  }
  const bool all_pinned = std::all_of(tasks_.begin(), tasks_.end(), [this](const TaskSpec& t) {
    return config_.task_experts.count(t.name) > 0;
  });
  if (config_.selector_mode == SelectorMode::task && (config_.warmup_steps == 0 || all_pinned)) finish_warmup();
}

template <typename T>
bool Trainer<T>::in_warmup() const noexcept {
  return config_.selector_mode == SelectorMode::task && !state_.experts_assigned;
}

template <typename T>
void Trainer<T>::finish_warmup() {
  state_.task_experts.clear();
  for (const auto& task : tasks_) {
    const auto pin = config_.task_experts.find(task.name);
    state_.task_experts[task.name] =
        pin != config_.task_experts.end() ? pin->second : assign_task_expert(task.name, state_.warmup_counts);
  }
  state_.experts_assigned = true;
}

template <typename T>
RoutingPolicy Trainer<T>::policy() const {
  RoutingPolicy p;
  p.mode = config_.selector_mode;
  p.task_experts = state_.task_experts;
  return p;
}

template <typename T>
std::int64_t Trainer<T>::total_steps() const {
  if (config_.steps > 0) return config_.steps;
  const auto n = static_cast<std::int64_t>(stream_.epoch_size());
  const auto per_epoch = (n + config_.batch_size - 1) / config_.batch_size;
  return per_epoch * config_.epochs;
}

template <typename T>
BatchGradients<T> batch_gradients(const KicParams<T>& params, std::span<const BatchExample> batch, SelectorMode mode,
                                  const RoutingPolicy& policy, const Augmenter& augmenter,
                                  const ObjectiveOptions& options) {
  if (batch.empty()) throw InvalidArgument("empty batch");
  const bool routed = mode == SelectorMode::instance || mode == SelectorMode::no_generalist;
  const T inv_b = T(1) / static_cast<T>(batch.size());

  BatchGradients<T> out;
  out.grads = KicParams<T>::zeros(params.backbone.config);
  StepMetrics& metrics = out.metrics;
  metrics.batch_size = static_cast<int>(batch.size());
  metrics.dispatch.assign(kNumExperts, 0);

  struct Pending {
    SelectorForward<T> selector;
    EncoderCache<T> cache;
    std::vector<T> d_probs;
  };
  std::vector<Pending> pending;
  std::vector<RouterDecision> decisions;
  double ce_sum = 0.0;

  for (const BatchExample& ex : batch) {
    RoutedInput<T> r = route_example(params, mode, policy, ex.task, AugmentQuery{ex.text, ex.x}, augmenter,
                                     /*scale_selected=*/routed, /*keep_cache=*/true);
    out.experts.push_back(r.expert);
    if (r.expert >= 0) ++metrics.dispatch[static_cast<std::size_t>(r.expert)];
    if (options.max_positions > 0 && static_cast<int>(r.input.size()) > options.max_positions)
      r.input.resize(static_cast<std::size_t>(options.max_positions));

    LossResult<T> loss =
        forward_loss(params.backbone, std::span<const TokenId>(r.input), std::span<const TokenId>(ex.y), r.scale);
    ce_sum += static_cast<double>(loss.ce);
    const T d_scale = backward(params.backbone, loss.cache, out.grads.backbone, inv_b);
    if (routed) {
      Pending p{std::move(*r.selector), std::move(r.router_cache), {}};
      p.d_probs.assign(p.selector.probs.size(), T(0));
      if (!options.detach_scale) p.d_probs[static_cast<std::size_t>(r.expert)] += d_scale * inv_b;
      decisions.push_back(p.selector.decision);
      pending.push_back(std::move(p));
    }
  }

  metrics.ce = ce_sum / static_cast<double>(batch.size());
  if (routed) {
    const BalanceResult bal = balancing_loss(decisions);
    metrics.balance = bal.loss;
    metrics.mean_probs = bal.stats.P;
    const std::vector<double> g = balancing_grad(bal.stats);
    for (auto& p : pending) {
      for (std::size_t i = 0; i < g.size(); ++i) p.d_probs[i] += static_cast<T>(options.alpha * g[i]);
      const Matrix<T> d_hidden = selector_backward(p.selector, p.cache.pad_mask, params.selector,
                                                   std::span<const T>(p.d_probs), out.grads.selector);
      encode_backward(params.backbone, p.cache, d_hidden, out.grads.backbone);
    }
  }
  metrics.total = total_loss(metrics.ce, metrics.balance, routed ? options.alpha : 0.0);
  if (!std::isfinite(metrics.total) || !all_finite(out.grads)) {
    std::ostringstream msg;
    msg << "non-finite loss or gradient (ce " << metrics.ce << ", balance " << metrics.balance << ")";
    throw NumericalError(msg.str());
  }
  return out;
}

template <typename T>
double batch_objective(const KicParams<T>& params, std::span<const BatchExample> batch, SelectorMode mode,
                       const RoutingPolicy& policy, const Augmenter& augmenter, const ObjectiveOptions& options,
                       const PinnedRouting* pinned) {
  if (batch.empty()) throw InvalidArgument("empty batch");
  const bool routed = mode == SelectorMode::instance || mode == SelectorMode::no_generalist;
  double ce = 0.0;
  std::vector<double> p_sum(kNumExperts, 0.0);
  std::vector<double> f(kNumExperts, 0.0);
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const BatchExample& ex = batch[n];
    const AugmentQuery query{ex.text, ex.x};
    std::vector<TokenId> input;
    T scale = T(1);
    if (routed) {
      const EncoderOutput<T> enc = encode(params.backbone, std::span<const TokenId>(ex.x));
      const SelectorForward<T> sel =
          select(enc.hidden, enc.pad_mask, params.selector, mode == SelectorMode::no_generalist);
      const int expert = pinned ? pinned->experts.at(n) : sel.decision.chosen;
      input = route_expert(expert, query, augmenter).input;
      scale = pinned && !pinned->scales.empty() ? static_cast<T>(pinned->scales.at(n))
                                                : sel.probs[static_cast<std::size_t>(expert)];
      for (std::size_t i = 0; i < sel.probs.size(); ++i) p_sum[i] += static_cast<double>(sel.probs[i]);
      f[static_cast<std::size_t>(expert)] += 1.0;
    } else {
      input = route_example(params, mode, policy, ex.task, query, augmenter, false, false).input;
    }
    if (options.max_positions > 0 && static_cast<int>(input.size()) > options.max_positions)
      input.resize(static_cast<std::size_t>(options.max_positions));
    ce += static_cast<double>(
        forward_loss(params.backbone, std::span<const TokenId>(input), std::span<const TokenId>(ex.y), scale).ce);
  }
  const double b = static_cast<double>(batch.size());
  double total = ce / b;
  if (routed) {
    double bal = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
      const double fi = pinned && !pinned->f.empty() ? pinned->f.at(i) : f[i] / b;
      bal += fi * p_sum[i] / b;
    }
    total += options.alpha * static_cast<double>(kNumExperts) * bal;
  }
  return total;
}

template <typename T>
StepMetrics Trainer<T>::train_step(std::span<const MixtureItem> batch) {
  if (batch.empty()) throw InvalidArgument("empty batch");
  const bool warmup = in_warmup();
  const SelectorMode mode = warmup ? SelectorMode::instance : config_.selector_mode;
  const int in_limit = std::min(config_.max_input_len, model_config_.max_positions);
  const int out_limit = std::min(config_.max_output_len, model_config_.max_positions);

  std::vector<BatchExample> examples;
  examples.reserve(batch.size());
  for (const MixtureItem& item : batch) {
    const TaskSpec& task = tasks_.at(item.task);
    RenderedExample r = render_example(task, item.template_index, item.example);
    std::vector<TokenId> x = input_ids(r.input, in_limit);
    std::vector<TokenId> y = target_ids(r.target, out_limit);
    examples.push_back({task.name, std::move(r.input), std::move(x), std::move(y)});
  }

  ObjectiveOptions opt;
  opt.alpha = config_.alpha;
  opt.max_positions = model_config_.max_positions;
  BatchGradients<T> g;
  try {
    g = batch_gradients(state_.params, std::span<const BatchExample>(examples), mode, policy(), augmenter_, opt);
  } catch (const NumericalError&) {
    if (!failure_dir_.empty()) {
      json extra;
      extra["failed_step"] = state_.step + 1;
      extra["batch"] = json::array();
      for (const auto& it : batch) extra["batch"].push_back({it.task, it.template_index, it.example});
      kic::save_checkpoint(failure_dir_ / ("nonfinite-step-" + std::to_string(state_.step + 1) + ".kicw"),
                           model_config_, state_, extra.dump());
    }
    throw;
  }

  if (warmup) {
    for (std::size_t n = 0; n < examples.size(); ++n) {
      auto& counts = state_.warmup_counts[examples[n].task];
      counts.resize(kNumExperts, 0);
      ++counts[static_cast<std::size_t>(g.experts[n])];
    }
  }
  adam_update(state_.params, g.grads, state_.adam_m, state_.adam_v, config_.lr, state_.step + 1);
  ++state_.step;
  g.metrics.step = state_.step;
  if (warmup && state_.step >= config_.warmup_steps) finish_warmup();
  return g.metrics;
}

template <typename T>
StepMetrics Trainer<T>::step() {
  const auto b = static_cast<std::uint64_t>(config_.batch_size);
  std::vector<MixtureItem> batch;
  batch.reserve(b);
  const std::uint64_t start = static_cast<std::uint64_t>(state_.step) * b;
  for (std::uint64_t i = 0; i < b; ++i) batch.push_back(stream_.at(start + i));
  return train_step(batch);
}

template <typename T>
void Trainer<T>::run(std::int64_t max_steps, const TrainerHooks& hooks) {
  std::int64_t done = 0;
  while (state_.step < total_steps() && (max_steps <= 0 || done < max_steps)) {
    const StepMetrics m = step();
    ++done;
    if (hooks.on_step) hooks.on_step(m);
  }
}

template <typename T>
void Trainer<T>::save_checkpoint(const std::filesystem::path& path) const {
  json extra;
  extra["selector_mode"] = std::string(selector_mode_name(config_.selector_mode));
  extra["train_seed"] = config_.seed;
  kic::save_checkpoint(path, model_config_, state_, extra.dump());
}

template <typename T>
void Trainer<T>::load_checkpoint(const std::filesystem::path& path) {
  state_ = kic::load_checkpoint<T>(path, &model_config_);
}

#define KIC_INSTANTIATE_TRAINING(T)                                                                       \
  template void adam_update<T>(KicParams<T>&, const KicParams<T>&, KicParams<T>&, KicParams<T>&, double,  \
                               std::int64_t);                                                             \
  template RoutedInput<T> route_example<T>(const KicParams<T>&, SelectorMode, const RoutingPolicy&,       \
                                           const std::string&, const AugmentQuery&, const Augmenter&,     \
                                           bool, bool);                                                   \
  template BatchGradients<T> batch_gradients<T>(const KicParams<T>&, std::span<const BatchExample>,        \
                                                SelectorMode, const RoutingPolicy&, const Augmenter&,        \
                                                const ObjectiveOptions&);                                    \
  template double batch_objective<T>(const KicParams<T>&, std::span<const BatchExample>, SelectorMode,      \
                                     const RoutingPolicy&, const Augmenter&, const ObjectiveOptions&,       \
                                     const PinnedRouting*);                                                 \
  template class Trainer<T>;

KIC_INSTANTIATE_TRAINING(float)
KIC_INSTANTIATE_TRAINING(double)

#undef KIC_INSTANTIATE_TRAINING

}  // namespace kic
