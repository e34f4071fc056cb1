#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "cli_config.hpp"
#include "kic/error.hpp"
#include "kic/evaluation.hpp"
#include "kic/gradient_check.hpp"
#include "kic/hash.hpp"
#include "kic/index_bench.hpp"
#include "kic/knowledge_store.hpp"
#include "kic/retriever.hpp"
#include "kic/synthetic.hpp"
#include "kic/training.hpp"

namespace kic::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

constexpr const char* kIndexManifest = "indexes.json";

struct Common {
  std::string config;
  std::string data_dir;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;

  ConfigSources sources() const {
    ConfigSources s;
    if (!config.empty()) s.config_file = config;
    if (!data_dir.empty()) s.data_dir = data_dir;
    s.sets = sets;
    s.seed = seed;
    return s;
  }
};

void add_common(CLI::App& sub, Common& c) {
  sub.add_option("-c,--config", c.config, "JSON config file");
  sub.add_option("--data-dir", c.data_dir, "Base for relative paths (default: $KIC_DATA_DIR, then the config's paths.data_dir)");
  sub.add_option("--set", c.sets, "Override one config key, section.key=value (repeatable)")->allow_extra_args(false);
  sub.add_option("--seed", c.seed, "Run seed (default: $KIC_SEED, then train.seed)");
}

KnowledgeCategory category_arg(const std::string& name) {
  try {
    return parse_category(name);
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
}

MemoryId memory_arg(const std::string& name) {
  try {
    const MemoryId m = parse_memory(name);
    if (m == MemoryId::none) throw InvalidArgument("memory 'none' has no index");
    return m;
  } catch (const InvalidArgument& e) {
    throw UsageError(std::string(e.what()) + " (or union, plaintext)");
  }
}

SelectorMode mode_arg(const std::string& name) {
  try {
    return parse_selector_mode(name);
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
}

template <typename V>
std::vector<V> list_arg(const std::string& csv, const char* what) {
  std::vector<V> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::istringstream is(item);
    V v{};
    if (!(is >> v) || !is.eof()) throw UsageError(std::string("bad ") + what + " list entry '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw UsageError(std::string("empty ") + what + " list");
  return out;
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFound("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- knowledge -----------------------------------------------------------------

KnowledgeStore open_store(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) return KnowledgeStore{};
  return KnowledgeStore::load(dir);
}

struct Knowledge {
  KnowledgeStore store;
  std::unique_ptr<KnowledgeBase> kb;
  std::size_t loaded = 0;
};

json read_index_manifest(const fs::path& dir) {
  const auto p = dir / kIndexManifest;
  if (!fs::exists(p)) return json{{"version", 1}, {"memories", json::object()}};
  try {
    return json::parse(read_text(p));
  } catch (const json::exception& e) {
    throw FormatError("corrupt " + p.string() + ": " + e.what());
  }
}

// A retrieval view over the configured store. Indexes on disk win;
// without any, every memory is indexed in memory.
std::unique_ptr<Knowledge> open_knowledge(const CliConfig& c, bool build_missing) {
  auto k = std::make_unique<Knowledge>();
  k->store = open_store(c.paths.store);
  k->store.seal();
  k->kb = std::make_unique<KnowledgeBase>(k->store, c.embedder);
  if (!c.paths.plain_text.empty() && fs::exists(c.paths.plain_text))
    k->kb->set_plain_text(chunk_passages(read_text(c.paths.plain_text)));

  const json manifest = read_index_manifest(c.paths.index);
  for (const auto& [name, entry] : manifest.at("memories").items()) {
    const MemoryId memory = parse_memory(name);
    MipsIndex idx = load_index(c.paths.index / entry.at("file").get<std::string>(), c.embedder.d, 0);
    if (idx.is_ivf()) {
      const int nprobe = c.index.nprobe > 0 ? c.index.nprobe : entry.value("nprobe", 0);
      if (nprobe > 0) idx.ivf().set_nprobe(std::min(nprobe, idx.ivf().n_clusters()));
    }
    k->kb->set_index(memory, std::move(idx));
    ++k->loaded;
  }
  if (k->loaded == 0 && build_missing && k->store.triple_count() > 0) k->kb->build_all(c.index);
  return k;
}

// ---- ingest --------------------------------------------------------------------

int cmd_ingest(const CliConfig& c, const std::vector<std::string>& files, const std::string& category_name,
               std::ostream& out, std::ostream& err) {
  const KnowledgeCategory category = category_arg(category_name);
  KnowledgeStore store = open_store(c.paths.store);
  bool failed = false;
  for (const auto& f : files) {
    IngestReport r;
    try {
      r = store.ingest_file(f, category);
    } catch (const Error& e) {
      err << f << ": " << e.what() << '\n';
      failed = true;
      continue;
    }
    out << f << ": " << r.added << " triples added, " << r.duplicates << " duplicates, " << r.kvs_added
        << " key-value pairs (" << category_name << ")\n";
    for (const auto& e : r.errors) err << f << ':' << e.line << ": " << e.message << '\n';
    if (!r.ok()) {
      out << f << ": " << r.errors.size() << " records rejected\n";
      failed = true;
    }
  }
  store.save(c.paths.store);
  out << "store " << c.paths.store.string() << ": " << store.triple_count() << " triples\n";
  return failed ? 1 : 0;
}

// ---- index ---------------------------------------------------------------------

int cmd_index(const CliConfig& c, const std::string& category, bool all, const std::vector<int>& ivf, int iters,
              std::ostream& out, std::ostream& err) {
  if (all == !category.empty()) throw UsageError("give exactly one of --category or --all");
  IndexOptions opts = c.index;
  if (!ivf.empty()) {
    if (ivf[0] < 1) throw UsageError("--ivf cluster count must be at least 1");
    opts.ivf_clusters = ivf[0];
    opts.nprobe = ivf.size() > 1 ? ivf[1] : 0;
    if (ivf.size() > 1 && (ivf[1] < 1 || ivf[1] > ivf[0])) throw UsageError("--ivf nprobe must be in [1, clusters]");
  }
  if (iters > 0) opts.ivf_max_iters = iters;

  std::vector<MemoryId> memories;
  if (all) {
    for (const auto cat : kAllCategories) memories.push_back(memory_for(cat));
    memories.push_back(MemoryId::all_categories);
    if (!c.paths.plain_text.empty()) memories.push_back(MemoryId::plain_text);
  } else {
    memories.push_back(memory_arg(category));
  }

  if (!fs::exists(c.paths.store / "manifest.json")) throw NotFound("no knowledge store at " + c.paths.store.string());
  KnowledgeStore store = KnowledgeStore::load(c.paths.store);
  store.seal();
  KnowledgeBase kb(store, c.embedder);
  if (!c.paths.plain_text.empty()) kb.set_plain_text(chunk_passages(read_text(c.paths.plain_text)));

  fs::create_directories(c.paths.index);
  json manifest = read_index_manifest(c.paths.index);
  manifest["embedder"] = config_to_json(c).at("embedder");
  int written = 0;
  for (const MemoryId m : memories) {
    const std::string name = memory_name(m);
    const auto cat = category_of(m);
    const bool empty = cat ? store.kv_count(*cat) == 0
                           : (m == MemoryId::all_categories ? store.triple_count() == 0 : false);
    if (empty) {
      err << "warning: memory '" << name << "' is empty, skipped\n";
      continue;
    }
    const std::size_t skipped = kb.build_index(m, opts);
    const MipsIndex& idx = kb.index(m);
    const fs::path file = kb.index_path(c.paths.index, m);
    save_index(file, idx);
    const std::string digest = file_digest(file.string());
    json entry = {{"file", file.filename().string()}, {"rows", idx.size()}, {"digest", digest},
                  {"kind", idx.is_ivf() ? "ivf" : "exact"}};
    if (idx.is_ivf()) {
      entry["clusters"] = idx.ivf().n_clusters();
      entry["nprobe"] = idx.ivf().nprobe();
    }
    manifest["memories"][name] = entry;
    out << name << ": " << idx.size() << " rows, " << (idx.is_ivf() ? "ivf" : "exact");
    if (idx.is_ivf()) out << " c=" << idx.ivf().n_clusters() << " nprobe=" << idx.ivf().nprobe();
    if (skipped) out << ", " << skipped << " keys skipped";
    out << ", " << file.string() << " " << digest << '\n';
    ++written;
  }
  write_text(c.paths.index / kIndexManifest, manifest.dump(2) + "\n");
  out << written << " index files\n";
  return 0;
}

// ---- retrieve ------------------------------------------------------------------

int cmd_retrieve(const CliConfig& c, const std::string& query, const std::string& category, int top,
                 std::ostream& out) {
  const MemoryId memory = memory_arg(category);
  if (top < 0) throw UsageError("--top must be >= 0");
  if (top == 0) return 0;
  auto k = open_knowledge(c, false);
  if (!k->kb->has_index(memory))
    throw NotFound("no index for '" + memory_name(memory) + "' in " + c.paths.index.string() + " (run kic index)");
  const int top_m = top * static_cast<int>(kKvSlotsPerTriple);
  const RetrievedKnowledge r = k->kb->retrieve_any(memory, query, top_m, top);
  out << std::fixed << std::setprecision(6);
  for (const auto& p : r.pieces) out << p.score << '\t' << p.value_text << '\n';
  return 0;
}

// ---- train ---------------------------------------------------------------------

struct TrainFlags {
  std::string out_dir;
  std::string resume;
  std::int64_t checkpoint_every = 0;
};

template <typename T>
int train_impl(const CliConfig& c, const TrainFlags& flags, std::ostream& out, std::ostream& err) {
  std::vector<TaskSpec> tasks = load_task_dir(c.paths.tasks);
  if (tasks.empty()) throw NotFound("no task files (*.jsonl) in " + c.paths.tasks.string());
  auto k = open_knowledge(c, c.train.selector_mode != SelectorMode::none);
  AugmentOptions ao;
  ao.top_m = c.train.top_m;
  ao.max_pieces = c.train.max_pieces;
  ao.max_input_len = c.train.max_input_len;
  RetrievalAugmenter augmenter(*k->kb, ao);

  const fs::path dir = flags.out_dir.empty() ? c.paths.runs : fs::path(flags.out_dir);
  fs::create_directories(dir);
  write_text(dir / "config.json", config_to_json(c).dump(2) + "\n");

  Trainer<T> trainer(c.model, c.train, std::move(tasks), augmenter);
  trainer.set_failure_dir(dir / "failure");
  if (!flags.resume.empty()) {
    trainer.load_checkpoint(flags.resume);
    out << "resumed " << flags.resume << " at step " << trainer.step_count() << '\n';
  }

  std::ofstream metrics(dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
  if (!metrics) throw Error("cannot write " + (dir / "metrics.jsonl").string());
  StepMetrics last;
  TrainerHooks hooks;
  hooks.on_step = [&](const StepMetrics& m) {
    metrics << metrics_to_json(m) << '\n';
    last = m;
    if (flags.checkpoint_every > 0 && m.step % flags.checkpoint_every == 0)
      trainer.save_checkpoint(dir / ("checkpoint-" + std::to_string(m.step) + ".kicw"));
  };
  const auto t0 = std::chrono::steady_clock::now();
  trainer.run(0, hooks);
  metrics.close();
  trainer.save_checkpoint(dir / "checkpoint.kicw");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  out << "trained " << selector_mode_name(c.train.selector_mode) << " to step " << trainer.step_count() << " ("
      << precision_name(c.precision) << ", " << std::fixed << std::setprecision(1) << secs << " s)\n";
  out << std::setprecision(4) << "last ce " << last.ce << " balance " << last.balance << " total " << last.total
      << '\n';
  for (const auto& [task, expert] : trainer.policy().task_experts) out << "task " << task << " -> expert " << expert << '\n';
  out << "params " << hex64(params_digest(trainer.params())) << '\n';
  out << "checkpoint " << (dir / "checkpoint.kicw").string() << '\n';
  (void)err;
  return 0;
}

// ---- eval ----------------------------------------------------------------------

template <typename T>
int eval_impl(const CliConfig& c, const fs::path& ckpt, const CheckpointInfo& info, const fs::path& dir,
              std::ostream& out) {
  std::vector<TaskSpec> tasks = load_task_dir(c.paths.eval_tasks);
  if (tasks.empty()) throw NotFound("no task files (*.jsonl) in " + c.paths.eval_tasks.string());
  const TrainState<T> state = load_checkpoint<T>(ckpt);
  const json extra = json::parse(info.extra_json);
  RoutingPolicy policy;
  policy.mode = parse_selector_mode(extra.value("selector_mode", std::string("instance")));
  policy.task_experts = state.task_experts;
  const std::uint64_t seed = extra.value("train_seed", std::uint64_t{0});

  auto k = open_knowledge(c, policy.mode != SelectorMode::none);
  AugmentOptions ao;
  ao.top_m = c.train.top_m;
  ao.max_pieces = c.train.max_pieces;
  ao.max_input_len = c.eval.max_input_len;
  RetrievalAugmenter augmenter(*k->kb, ao);

  std::vector<ResultRow> rows;
  std::vector<RoutingLogRecord> log;
  std::vector<ReportLine> lines;
  for (const auto& task : tasks) {
    EvalResult r = evaluate_task(state.params, policy, task, augmenter, c.eval, &log);
    const auto rr = result_rows(std::string(selector_mode_name(policy.mode)), seed, r);
    rows.insert(rows.end(), rr.begin(), rr.end());
    out << task.name << ": median " << std::fixed << std::setprecision(4) << r.median << " mean " << r.mean
        << " std " << r.std << " over " << r.per_template.size() << " templates";
    if (r.skipped) out << ", " << r.skipped << " examples without choices skipped";
    if (!r.excluded_templates.empty()) out << ", " << r.excluded_templates.size() << " templates excluded";
    out << '\n';
  }
  fs::create_directories(dir);
  write_results(dir / "results.jsonl", rows);
  write_routing_log(dir / "routing.jsonl", log);
  out << "wrote " << (dir / "results.jsonl").string() << " and " << (dir / "routing.jsonl").string() << '\n';
  return 0;
}

int cmd_eval(const CliConfig& c, const std::string& checkpoint, const std::string& out_dir, std::ostream& out) {
  const fs::path ckpt = checkpoint.empty() ? c.paths.runs / "checkpoint.kicw" : fs::path(checkpoint);
  if (!fs::exists(ckpt)) throw NotFound("no checkpoint at " + ckpt.string() + " (train first or pass --checkpoint)");
  const CheckpointInfo info = read_checkpoint_info(ckpt);
  const fs::path dir = out_dir.empty() ? ckpt.parent_path() : fs::path(out_dir);
  return info.scalar_bytes == 8 ? eval_impl<double>(c, ckpt, info, dir, out) : eval_impl<float>(c, ckpt, info, dir, out);
}

// ---- report --------------------------------------------------------------------

int cmd_report(const std::vector<std::string>& results, const std::vector<std::string>& routing,
               const std::string& csv, const std::string& routing_csv, std::ostream& out) {
  if (results.empty() && routing.empty()) throw UsageError("give --results and/or --routing files");
  if (!results.empty()) {
    std::vector<ResultRow> rows;
    for (const auto& f : results) {
      const auto r = read_results(f);
      rows.insert(rows.end(), r.begin(), r.end());
    }
    const auto lines = aggregate_results(rows);
    out << render_report_table(lines);
    if (!csv.empty()) write_text(csv, render_report_csv(lines));
  }
  if (!routing.empty()) {
    std::vector<RoutingLogRecord> log;
    for (const auto& f : routing) {
      const auto r = read_routing_log(f);
      log.insert(log.end(), r.begin(), r.end());
    }
    std::vector<std::string> names;
    for (const auto& rec : log)
      if (std::find(names.begin(), names.end(), rec.task) == names.end()) names.push_back(rec.task);
    std::vector<RoutingReport> reports;
    for (const auto& n : names) reports.push_back(routing_report(n, log));
    if (!results.empty()) out << '\n';
    out << render_routing_table(reports);
    if (!routing_csv.empty()) write_text(routing_csv, render_routing_csv(reports));
  }
  return 0;
}

// ---- sweep ---------------------------------------------------------------------

template <typename T>
int sweep_impl(const CliConfig& c, const std::vector<SelectorMode>& modes, const std::vector<std::uint64_t>& seeds,
               const fs::path& dir, std::ostream& out) {
  SweepSpec spec;
  spec.model = c.model;
  spec.train = c.train;
  spec.modes = modes;
  spec.seeds = seeds;
  spec.train_tasks = load_task_dir(c.paths.tasks);
  spec.eval_tasks = load_task_dir(c.paths.eval_tasks);
  if (spec.train_tasks.empty()) throw NotFound("no task files in " + c.paths.tasks.string());
  if (spec.eval_tasks.empty()) throw NotFound("no task files in " + c.paths.eval_tasks.string());
  spec.eval = c.eval;

  auto k = open_knowledge(c, true);
  AugmentOptions ao;
  ao.top_m = c.train.top_m;
  ao.max_pieces = c.train.max_pieces;
  ao.max_input_len = c.train.max_input_len;
  RetrievalAugmenter augmenter(*k->kb, ao);

  fs::create_directories(dir);
  write_text(dir / "config.json", config_to_json(c).dump(2) + "\n");
  const SweepOutput res = ablation_sweep<T>(spec, augmenter, [&](const SweepRun& run) {
    const std::string tag = std::string(selector_mode_name(run.mode)) + "-" + std::to_string(run.seed);
    write_routing_log(dir / ("routing-" + tag + ".jsonl"), run.routing);
    std::vector<std::string> m;
    for (const auto& s : run.metrics) m.push_back(metrics_to_json(s));
    write_lines(dir / ("metrics-" + tag + ".jsonl"), m);
    out << "finished " << tag << '\n';
  });
  write_results(dir / "results.jsonl", res.rows);
  out << render_report_table(aggregate_results(res.rows));
  return 0;
}

// ---- grad-check ----------------------------------------------------------------

int cmd_grad_check(const GradCheckOptions& opts, std::ostream& out) {
  const GradCheckReport r = run_gradient_check(opts);
  out << std::left << std::setw(34) << "block" << std::right << std::setw(9) << "entries" << std::setw(14)
      << "rel_error" << "  ok\n";
  for (const auto& b : r.blocks)
    out << std::left << std::setw(34) << b.name << std::right << std::setw(9) << b.entries << std::setw(14)
        << std::scientific << std::setprecision(3) << b.rel_error << "  " << (b.passed ? "yes" : "NO") << '\n';
  out << std::left << std::setw(34) << "scale" << std::right << std::setw(9) << 1 << std::setw(14) << r.scale_rel_error
      << "  " << (r.scale_rel_error <= opts.tolerance ? "yes" : "NO") << '\n';
  out << std::defaultfloat << "routing";
  for (const int e : r.experts) out << ' ' << e;
  out << '\n' << (r.passed ? "passed" : "FAILED") << " in " << std::fixed << std::setprecision(2) << r.seconds << " s\n";
  return r.passed ? 0 : 1;
}

// ---- bench-index ---------------------------------------------------------------

int cmd_bench_index(const IndexBenchSpec& spec, int clusters, int iters, std::size_t k, const std::string& nprobes,
                    const std::string& csv_path, std::ostream& out, std::ostream& err) {
  const auto probes = list_arg<int>(nprobes, "nprobe");
  const auto t0 = std::chrono::steady_clock::now();
  const IndexBenchData data = make_index_bench(spec);
  const IvfIndex ivf = build_ivf(data.index, clusters, iters, spec.seed);
  const double build_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const auto t1 = std::chrono::steady_clock::now();
  for (const auto& q : data.queries) (void)data.index.search(q, k);
  const double exact_us = std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t1).count() /
                          static_cast<double>(std::max<std::size_t>(1, data.queries.size()));

  std::ostringstream csv;
  csv << "nprobe,recall_at_" << k << ",ivf_query_us,exact_query_us\n";
  for (const auto& p : recall_sweep(data, ivf, k, probes))
    csv << p.nprobe << ',' << std::fixed << std::setprecision(4) << p.recall << ',' << std::setprecision(2)
        << p.mean_query_us << ',' << exact_us << '\n';
  out << csv.str();
  if (!csv_path.empty()) write_text(csv_path, csv.str());
  err << "n=" << spec.n << " d=" << spec.d << " c=" << clusters << " build " << std::fixed << std::setprecision(2)
      << build_s << " s\n";
  return 0;
}

// ---- synth ---------------------------------------------------------------------

int cmd_synth(const CliConfig& c, SyntheticSpec spec, const std::optional<std::uint64_t>& seed, std::ostream& out) {
  if (seed) spec.seed = *seed;
  const SyntheticSuite suite = make_knowledge_suite(spec);
  const fs::path root = c.paths.data_dir;
  suite.store.save(c.paths.store);
  auto save_all = [&](const std::vector<TaskSpec>& tasks, const fs::path& dir) {
    fs::create_directories(dir);
    for (const auto& t : tasks) save_task(t, dir / (t.name + ".jsonl"));
  };
  save_all(suite.train_tasks, c.paths.tasks);
  save_all(suite.heldout_tasks, c.paths.eval_tasks);
  save_all(suite.reader_tasks, root / "tasks/reader");
  write_text(c.paths.plain_text.empty() ? root / "plain.txt" : c.paths.plain_text, suite.plain_text);
  write_text(root / "reader_experts.json", json(suite.reader_experts).dump(2) + "\n");
  out << "synthetic suite (seed " << spec.seed << "): " << suite.store.triple_count() << " triples, "
      << suite.train_tasks.size() << " train / " << suite.heldout_tasks.size() << " held-out / "
      << suite.reader_tasks.size() << " reader tasks in " << root.string() << '\n';
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"kic: typed knowledge memory, routed retrieval and a desk-scale text-to-text model", "kic"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "kic 0.1.0");

  Common common;
  std::function<int(const CliConfig&)> action;
  auto config = [&] { return resolve_config(common.sources()); };

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Add triple files (JSON lines) to the knowledge store");
  add_common(*ingest, common);
  std::vector<std::string> ingest_files;
  std::string ingest_category;
  ingest->add_option("files", ingest_files, "Triple files, one {subject, relation, object} object per line")->required();
  ingest->add_option("--category", ingest_category, "Knowledge category of every file")->required();
  ingest->callback([&] { action = [&](const CliConfig& c) { return cmd_ingest(c, ingest_files, ingest_category, out, err); }; });

  // index
  auto* index = app.add_subcommand("index", "Build MIPS indexes for store memories");
  add_common(*index, common);
  std::string index_category;
  bool index_all = false;
  std::vector<int> index_ivf;
  int index_iters = 0;
  index->add_option("--category", index_category, "One memory: a category, union or plaintext");
  index->add_flag("--all", index_all, "Every non-empty category plus the union (and plain text when configured)");
  index->add_option("--ivf", index_ivf, "IVF instead of exact: cluster count and optional default nprobe")->expected(1, 2);
  index->add_option("--iters", index_iters, "k-means iterations (default index.ivf_max_iters)");
  index->callback([&] {
    action = [&](const CliConfig& c) { return cmd_index(c, index_category, index_all, index_ivf, index_iters, out, err); };
  });

  // retrieve
  auto* retrieve = app.add_subcommand("retrieve", "Print the best knowledge pieces for a query");
  add_common(*retrieve, common);
  std::string r_query, r_category;
  int r_top = 5;
  retrieve->add_option("--query", r_query, "Query text")->required();
  retrieve->add_option("--category", r_category, "Memory: a category, union or plaintext")->required();
  retrieve->add_option("--top", r_top, "Number of pieces")->capture_default_str();
  retrieve->callback([&] { action = [&](const CliConfig& c) { return cmd_retrieve(c, r_query, r_category, r_top, out); }; });

  // train
  auto* train = app.add_subcommand("train", "Train on the task directory; writes metrics.jsonl and checkpoints");
  add_common(*train, common);
  TrainFlags tflags;
  std::optional<std::int64_t> t_steps;
  std::string t_mode, t_precision, t_init;
  std::optional<double> t_alpha, t_lr;
  train->add_option("--steps", t_steps, "Total optimizer steps (overrides epochs)");
  train->add_option("--mode", t_mode, "Selector mode: instance, task, none, mixed, no-generalist, plain-text");
  train->add_option("--precision", t_precision, "float or double");
  train->add_option("--alpha", t_alpha, "Balancing loss weight");
  train->add_option("--lr", t_lr, "Adam learning rate");
  train->add_option("--init", t_init, "Start the backbone from this checkpoint");
  train->add_option("--resume", tflags.resume, "Continue from this checkpoint (same config)");
  train->add_option("--out", tflags.out_dir, "Run directory (default paths.runs)");
  train->add_option("--checkpoint-every", tflags.checkpoint_every, "Also save checkpoint-<step>.kicw every N steps");
  train->callback([&] {
    action = [&](const CliConfig& base) {
      CliConfig c = base;
      if (t_steps) c.train.steps = *t_steps;
      if (!t_mode.empty()) c.train.selector_mode = mode_arg(t_mode);
      if (!t_precision.empty()) c.precision = parse_precision(t_precision);
      if (t_alpha) c.train.alpha = *t_alpha;
      if (t_lr) c.train.lr = *t_lr;
      if (!t_init.empty()) c.train.init_checkpoint = t_init;
      try {
        c.train.validate();
      } catch (const InvalidArgument& e) {
        throw UsageError(e.what());
      }
      return c.precision == Precision::f64 ? train_impl<double>(c, tflags, out, err) : train_impl<float>(c, tflags, out, err);
    };
  });

  // eval
  auto* eval = app.add_subcommand("eval", "Zero-shot evaluation of a checkpoint on the held-out task directory");
  add_common(*eval, common);
  std::string e_ckpt, e_out;
  bool e_no_scale = false, e_length_norm = false;
  eval->add_option("--checkpoint", e_ckpt, "Checkpoint (default <paths.runs>/checkpoint.kicw)");
  eval->add_option("--out", e_out, "Where results.jsonl and routing.jsonl go (default: next to the checkpoint)");
  eval->add_flag("--no-scale", e_no_scale, "Do not scale logits by the chosen probability");
  eval->add_flag("--length-norm", e_length_norm, "Divide choice log-probabilities by token count");
  eval->callback([&] {
    action = [&](const CliConfig& base) {
      CliConfig c = base;
      if (e_no_scale) c.eval.scale_at_eval = false;
      if (e_length_norm) c.eval.length_norm = true;
      return cmd_eval(c, e_ckpt, e_out, out);
    };
  });

  // report
  auto* report = app.add_subcommand("report", "Tables from results and routing files");
  add_common(*report, common);
  std::vector<std::string> rep_results, rep_routing;
  std::string rep_csv, rep_routing_csv;
  report->add_option("--results", rep_results, "results.jsonl files (repeatable)")->allow_extra_args(false);
  report->add_option("--routing", rep_routing, "routing log files (repeatable)")->allow_extra_args(false);
  report->add_option("--csv", rep_csv, "Also write the results table as CSV");
  report->add_option("--routing-csv", rep_routing_csv, "Also write the routing table as CSV");
  report->callback([&] {
    action = [&](const CliConfig&) { return cmd_report(rep_results, rep_routing, rep_csv, rep_routing_csv, out); };
  });

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Train and evaluate every (mode, seed) pair");
  add_common(*sweep, common);
  std::string s_modes = "instance,task,none,mixed", s_seeds = "1,2,3", s_out, s_precision;
  std::optional<std::int64_t> s_steps;
  sweep->add_option("--modes", s_modes, "Comma-separated selector modes")->capture_default_str();
  sweep->add_option("--seeds", s_seeds, "Comma-separated seeds")->capture_default_str();
  sweep->add_option("--steps", s_steps, "Steps per run");
  sweep->add_option("--precision", s_precision, "float or double");
  sweep->add_option("--out", s_out, "Output directory (default <paths.runs>/sweep)");
  sweep->callback([&] {
    action = [&](const CliConfig& base) {
      CliConfig c = base;
      if (s_steps) c.train.steps = *s_steps;
      if (!s_precision.empty()) c.precision = parse_precision(s_precision);
      std::vector<SelectorMode> modes;
      for (const auto& m : list_arg<std::string>(s_modes, "mode")) modes.push_back(mode_arg(m));
      const auto seeds = list_arg<std::uint64_t>(s_seeds, "seed");
      const fs::path dir = s_out.empty() ? c.paths.runs / "sweep" : fs::path(s_out);
      return c.precision == Precision::f64 ? sweep_impl<double>(c, modes, seeds, dir, out)
                                           : sweep_impl<float>(c, modes, seeds, dir, out);
    };
  });

  // grad-check
  auto* grad = app.add_subcommand("grad-check", "Finite-difference check of every gradient block (64-bit)");
  add_common(*grad, common);
  GradCheckOptions g;
  std::string g_mode;
  grad->add_option("--alpha", g.alpha, "Balancing loss weight")->capture_default_str();
  grad->add_option("--mode", g_mode, "Selector mode of the checked objective (default instance)");
  grad->add_option("--fd-step", g.h, "Central difference step")->capture_default_str();
  grad->add_option("--tolerance", g.tolerance, "Maximum relative error per block")->capture_default_str();
  grad->add_option("--batch", g.batch_size, "Batch size")->capture_default_str();
  grad->add_flag("--detach-scale", g.detach_scale, "Treat the chosen probability as a constant");
  grad->callback([&] {
    action = [&](const CliConfig&) {
      if (!g_mode.empty()) g.mode = mode_arg(g_mode);
      if (const auto s = seed_override(common.seed)) g.seed = *s;
      return cmd_grad_check(g, out);
    };
  });

  // bench-index
  auto* bench = app.add_subcommand("bench-index", "IVF recall and latency over nprobe (CSV)");
  add_common(*bench, common);
  IndexBenchSpec bs;
  int b_clusters = 100, b_iters = 20;
  std::size_t b_k = 10;
  std::string b_nprobe = "1,2,5,10,20", b_csv;
  bench->add_option("--n", bs.n, "Vectors")->capture_default_str();
  bench->add_option("--d", bs.d, "Dimensions")->capture_default_str();
  bench->add_option("--blobs", bs.blobs, "Gaussian blobs in the data")->capture_default_str();
  bench->add_option("--spread", bs.spread, "Per-dimension noise around blob centres")->capture_default_str();
  bench->add_option("--queries", bs.queries, "Queries")->capture_default_str();
  bench->add_option("--clusters", b_clusters, "IVF clusters")->capture_default_str();
  bench->add_option("--iters", b_iters, "k-means iterations")->capture_default_str();
  bench->add_option("--k", b_k, "Recall depth")->capture_default_str();
  bench->add_option("--nprobe", b_nprobe, "Comma-separated probe counts")->capture_default_str();
  bench->add_option("--csv", b_csv, "Also write the CSV here");
  bench->callback([&] {
    action = [&](const CliConfig&) {
      if (const auto s = seed_override(common.seed)) bs.seed = *s;
      return cmd_bench_index(bs, b_clusters, b_iters, b_k, b_nprobe, b_csv, out, err);
    };
  });

  // synth
  auto* synth = app.add_subcommand("synth", "Write the synthetic knowledge suite (store, tasks, plain text)");
  add_common(*synth, common);
  SyntheticSpec ss;
  synth->add_option("--train-concepts", ss.train_concepts, "Concepts behind the training tasks")->capture_default_str();
  synth->add_option("--heldout-concepts", ss.heldout_concepts, "Concepts behind the held-out tasks")->capture_default_str();
  synth->add_option("--reader-concepts", ss.reader_concepts, "Concepts behind the reader tasks")->capture_default_str();
  synth->add_option("--answer-pool", ss.answer_pool, "Answer vocabulary size")->capture_default_str();
  synth->add_option("--templates", ss.templates_per_task, "Prompt templates per task")->capture_default_str();
  synth->callback([&] { action = [&](const CliConfig& c) { return cmd_synth(c, ss, seed_override(common.seed), out); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  } catch (const UsageError& e) {
    err << "kic: " << e.what() << '\n';
    return 2;
  }

  try {
    return action(config());
  } catch (const UsageError& e) {
    err << "kic: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    err << "kic: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "kic: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace kic::cli
