#include "kic/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

#include "kic/error.hpp"

namespace kic {

using json = nlohmann::json;

namespace {

std::string fmt_double(double v, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

template <typename F>
void read_jsonl(const std::filesystem::path& path, F&& on_record) {
  std::ifstream in(path);
  if (!in) throw NotFound("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      on_record(json::parse(line));
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
}

}  // namespace

// ---- scoring -------------------------------------------------------------------

template <typename T>
ChoiceScores score_choices(const KicParams<T>& params, const RoutingPolicy& policy, const std::string& task,
                           std::string_view x_text, std::span<const std::string> choices,
                           const Augmenter& augmenter, const EvalOptions& options) {
  if (choices.size() < 2) throw InvalidArgument("score_choices needs at least two choices");
  for (std::size_t i = 0; i < choices.size(); ++i)
    if (choices[i].empty()) throw InvalidArgument("choice " + std::to_string(i) + " is empty");

  const int max_pos = params.backbone.config.max_positions;
  const std::vector<TokenId> x = input_ids(x_text, std::min(options.max_input_len, max_pos));
  const bool routed = policy.mode == SelectorMode::instance || policy.mode == SelectorMode::no_generalist;
  RoutedInput<T> r = route_example(params, policy.mode, policy, task, AugmentQuery{x_text, x}, augmenter,
                                   routed && options.scale_at_eval, false);
  if (static_cast<int>(r.input.size()) > max_pos) r.input.resize(static_cast<std::size_t>(max_pos));

  ChoiceScores out;
  out.expert = r.expert;
  out.memory = r.memory;
  if (r.selector) out.decision = r.selector->decision;

  const EncoderOutput<T> enc = encode(params.backbone, std::span<const TokenId>(r.input));
  const int out_limit = std::min(options.max_output_len, max_pos);
  for (const auto& choice : choices) {
    const std::vector<TokenId> y = target_ids(choice, out_limit);
    std::vector<TokenId> prefix{kBos};
    prefix.insert(prefix.end(), y.begin(), y.end() - 1);
    const Matrix<T> logits = decode_logits(params.backbone, enc, std::span<const TokenId>(prefix));
    double total = 0.0;
    for (std::size_t t = 0; t < y.size(); ++t) {
      const auto row = (logits.row(static_cast<Eigen::Index>(t)).array() * r.scale).template cast<double>().eval();
      const double mx = row.maxCoeff();
      total += row(y[t]) - mx - std::log((row - mx).exp().sum());
    }
    if (options.length_norm) total /= static_cast<double>(y.size());
    out.scores.push_back(total);
  }
  for (std::size_t i = 1; i < out.scores.size(); ++i)
    if (out.scores[i] > out.scores[static_cast<std::size_t>(out.index)]) out.index = static_cast<int>(i);
  return out;
}

// ---- routing logs ----------------------------------------------------------------

std::string routing_record_to_json(const RoutingLogRecord& r) {
  json j;
  j["example_id"] = r.example_id;
  j["task"] = r.task;
  j["chosen"] = r.chosen;
  j["probs"] = r.probs;
  return j.dump();
}

void write_routing_log(const std::filesystem::path& path, std::span<const RoutingLogRecord> records) {
  std::vector<std::string> lines;
  for (const auto& r : records) lines.push_back(routing_record_to_json(r));
  write_lines(path, lines);
}

std::vector<RoutingLogRecord> read_routing_log(const std::filesystem::path& path) {
  std::vector<RoutingLogRecord> out;
  read_jsonl(path, [&out](const json& j) {
    out.push_back({j.at("example_id").get<std::string>(), j.at("task").get<std::string>(), j.at("chosen").get<int>(),
                   j.at("probs").get<std::vector<double>>()});
  });
  return out;
}

// ---- task evaluation ---------------------------------------------------------------

void summarize(EvalResult& r) {
  std::vector<double> acc;
  for (const auto& t : r.per_template) acc.push_back(t.accuracy);
  if (acc.empty()) {
    r.mean = r.median = r.std = 0.0;
    return;
  }
  double sum = 0.0;
  for (const double a : acc) sum += a;
  r.mean = sum / static_cast<double>(acc.size());
  double var = 0.0;
  for (const double a : acc) var += (a - r.mean) * (a - r.mean);
  r.std = std::sqrt(var / static_cast<double>(acc.size()));
  std::sort(acc.begin(), acc.end());
  const std::size_t n = acc.size();
  r.median = n % 2 ? acc[n / 2] : 0.5 * (acc[n / 2 - 1] + acc[n / 2]);
}

template <typename T>
EvalResult evaluate_task(const KicParams<T>& params, const RoutingPolicy& policy, const TaskSpec& task,
                         const Augmenter& augmenter, const EvalOptions& options, std::vector<RoutingLogRecord>* log) {
  EvalResult result;
  result.task = task.name;
  for (std::size_t e = 0; e < task.examples.size(); ++e)
    if (!task.examples[e].answer_choices) ++result.skipped;

  for (std::size_t p = 0; p < task.templates.size(); ++p) {
    std::int64_t correct = 0, n = 0;
    for (std::size_t e = 0; e < task.examples.size(); ++e) {
      const TaskExample& ex = task.examples[e];
      if (!ex.answer_choices) continue;
      const auto& raw = *ex.answer_choices;
      const auto gold_it = std::find(raw.begin(), raw.end(), ex.target);
      if (gold_it == raw.end())
        throw FormatError("task '" + task.name + "', example " + std::to_string(e) + ": target is not among the choices");
      const RenderedExample r = render_example(task, p, e);
      const ChoiceScores s = score_choices(params, policy, task.name, r.input, std::span<const std::string>(r.choices),
                                           augmenter, options);
      ++n;
      if (s.index == static_cast<int>(gold_it - raw.begin())) ++correct;
      if (log) {
        RoutingLogRecord rec;
        rec.example_id = task.name + "/" + task.templates[p].id + "/" + std::to_string(e);
        rec.task = task.name;
        rec.chosen = s.expert;
        if (s.decision) rec.probs = s.decision->probs;
        log->push_back(std::move(rec));
      }
    }
    if (n == 0) {
      result.excluded_templates.push_back(task.templates[p].id);
    } else {
      result.per_template.push_back(
          {task.templates[p].id, static_cast<double>(correct) / static_cast<double>(n), n});
    }
  }
  summarize(result);
  return result;
}

// ---- routing reports -------------------------------------------------------------

int RoutingReport::modal() const noexcept {
  int best = 0;
  for (std::size_t i = 1; i < counts.size(); ++i)
    if (counts[i] > counts[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

RoutingReport routing_report(const std::string& task, std::span<const RoutingLogRecord> log) {
  RoutingReport rep;
  rep.task = task;
  rep.counts.assign(kNumExperts, 0);
  for (const auto& r : log) {
    if (r.task != task || r.chosen < 0) continue;
    if (r.chosen >= kNumExperts) throw FormatError("routing record with expert " + std::to_string(r.chosen));
    ++rep.counts[static_cast<std::size_t>(r.chosen)];
    ++rep.total;
  }
  if (rep.total == 0) throw NotFound("no routing decisions logged for task '" + task + "'");
  for (const auto c : rep.counts) rep.fractions.push_back(static_cast<double>(c) / static_cast<double>(rep.total));
  return rep;
}

// ---- results files -----------------------------------------------------------------

std::vector<ResultRow> result_rows(const std::string& mode, std::uint64_t seed, const EvalResult& result) {
  std::vector<ResultRow> rows;
  for (const auto& t : result.per_template) rows.push_back({mode, seed, result.task, t.template_id, t.accuracy, t.n});
  return rows;
}

void write_results(const std::filesystem::path& path, std::span<const ResultRow> rows) {
  std::vector<std::string> lines;
  for (const auto& r : rows) {
    json j;
    j["mode"] = r.mode;
    j["seed"] = r.seed;
    j["task"] = r.task;
    j["template_id"] = r.template_id;
    j["accuracy"] = r.accuracy;
    j["n"] = r.n;
    lines.push_back(j.dump());
  }
  write_lines(path, lines);
}

std::vector<ResultRow> read_results(const std::filesystem::path& path) {
  std::vector<ResultRow> rows;
  read_jsonl(path, [&rows](const json& j) {
    ResultRow r;
    r.mode = j.value("mode", std::string("?"));
    r.seed = j.value("seed", std::uint64_t{0});
    r.task = j.at("task").get<std::string>();
    r.template_id = j.at("template_id").get<std::string>();
    r.accuracy = j.at("accuracy").get<double>();
    r.n = j.at("n").get<std::int64_t>();
    rows.push_back(std::move(r));
  });
  return rows;
}

std::vector<ReportLine> aggregate_results(std::span<const ResultRow> rows) {
  struct Group {
    std::map<std::string, std::pair<double, int>> by_template;
    std::set<std::uint64_t> seeds;
  };
  std::vector<std::pair<std::string, std::string>> order;
  std::map<std::pair<std::string, std::string>, Group> groups;
  for (const auto& r : rows) {
    const auto key = std::make_pair(r.mode, r.task);
    if (!groups.contains(key)) order.push_back(key);
    auto& g = groups[key];
    auto& acc = g.by_template[r.template_id];
    acc.first += r.accuracy;
    acc.second += 1;
    g.seeds.insert(r.seed);
  }
  std::vector<ReportLine> lines;
  for (const auto& key : order) {
    const Group& g = groups.at(key);
    EvalResult er;
    for (const auto& [tid, acc] : g.by_template) er.per_template.push_back({tid, acc.first / acc.second, 0});
    summarize(er);
    lines.push_back({key.first, key.second, er.median, er.mean, er.std,
                     static_cast<std::int64_t>(g.by_template.size()), static_cast<std::int64_t>(g.seeds.size())});
  }
  return lines;
}

std::string render_report_table(std::span<const ReportLine> lines) {
  std::size_t wm = 4, wt = 4;
  for (const auto& l : lines) {
    wm = std::max(wm, l.mode.size());
    wt = std::max(wt, l.task.size());
  }
  auto pad = [](std::string s, std::size_t w) {
    s.resize(std::max(w, s.size()), ' ');
    return s;
  };
  std::ostringstream out;
  out << pad("mode", wm) << "  " << pad("task", wt) << "  median    mean     std  templates  runs\n";
  for (const auto& l : lines) {
    out << pad(l.mode, wm) << "  " << pad(l.task, wt) << "  " << fmt_double(100.0 * l.median, 2) << "  "
        << fmt_double(100.0 * l.mean, 2) << "  " << fmt_double(100.0 * l.std, 2) << "  " << l.templates << "  "
        << l.runs << '\n';
  }
  return out.str();
}

std::string render_report_csv(std::span<const ReportLine> lines) {
  std::ostringstream out;
  out << "mode,task,median,mean,std,templates,runs\n";
  for (const auto& l : lines)
    out << l.mode << ',' << l.task << ',' << fmt_double(l.median, 6) << ',' << fmt_double(l.mean, 6) << ','
        << fmt_double(l.std, 6) << ',' << l.templates << ',' << l.runs << '\n';
  return out.str();
}

std::string render_routing_table(std::span<const RoutingReport> reports) {
  std::ostringstream out;
  out << "task";
  for (int i = 0; i < kNumExperts; ++i) out << "  " << (i == 0 ? std::string("generalist") : memory_name(memory_for_expert(i)));
  out << "  n\n";
  for (const auto& r : reports) {
    out << r.task;
    for (const double f : r.fractions) out << "  " << fmt_double(f, 3);
    out << "  " << r.total << '\n';
  }
  return out.str();
}

std::string render_routing_csv(std::span<const RoutingReport> reports) {
  std::ostringstream out;
  out << "task,expert,name,count,fraction\n";
  for (const auto& r : reports)
    for (std::size_t i = 0; i < r.counts.size(); ++i)
      out << r.task << ',' << i << ',' << (i == 0 ? std::string("generalist") : memory_name(memory_for_expert(static_cast<int>(i))))
          << ',' << r.counts[i] << ',' << fmt_double(r.fractions[i], 6) << '\n';
  return out.str();
}

// ---- sweep ------------------------------------------------------------------------------

template <typename T>
SweepOutput ablation_sweep(const SweepSpec& spec, const Augmenter& augmenter,
                           const std::function<void(const SweepRun&)>& on_run) {
  if (spec.modes.empty() || spec.seeds.empty()) throw InvalidArgument("sweep needs at least one mode and one seed");
  SweepOutput out;
  for (const SelectorMode mode : spec.modes) {
    for (const std::uint64_t seed : spec.seeds) {
      T2TConfig model = spec.model;
      model.seed = seed;
      TrainConfig train = spec.train;
      train.selector_mode = mode;
      train.seed = seed;
      Trainer<T> trainer(model, train, spec.train_tasks, augmenter);
      SweepRun run;
      run.mode = mode;
      run.seed = seed;
      TrainerHooks hooks;
      hooks.on_step = [&run](const StepMetrics& m) { run.metrics.push_back(m); };
      trainer.run(0, hooks);
      run.policy = trainer.policy();
      for (const TaskSpec& task : spec.eval_tasks) {
        run.results.push_back(evaluate_task(trainer.params(), run.policy, task, augmenter, spec.eval, &run.routing));
        const auto rows = result_rows(std::string(selector_mode_name(mode)), seed, run.results.back());
        out.rows.insert(out.rows.end(), rows.begin(), rows.end());
      }
      if (on_run) on_run(run);
      out.runs.push_back(std::move(run));
    }
  }
  return out;
}

#define KIC_INSTANTIATE_EVAL(T)                                                                             \
  template ChoiceScores score_choices<T>(const KicParams<T>&, const RoutingPolicy&, const std::string&,     \
                                         std::string_view, std::span<const std::string>, const Augmenter&,  \
                                         const EvalOptions&);                                                \
  template EvalResult evaluate_task<T>(const KicParams<T>&, const RoutingPolicy&, const TaskSpec&,         \
                                       const Augmenter&, const EvalOptions&, std::vector<RoutingLogRecord>*); \
  template SweepOutput ablation_sweep<T>(const SweepSpec&, const Augmenter&,                               \
                                         const std::function<void(const SweepRun&)>&);

KIC_INSTANTIATE_EVAL(float)
KIC_INSTANTIATE_EVAL(double)

#undef KIC_INSTANTIATE_EVAL

}  // namespace kic
