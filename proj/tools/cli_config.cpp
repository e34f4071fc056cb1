#include "cli_config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

#include "kic/error.hpp"
#include "kic/text.hpp"

namespace kic::cli {
namespace {

using json = nlohmann::json;

// Reads one config section, rejecting keys nobody asked for.
class SectionReader {
 public:
  SectionReader(const json& doc, std::string name) : name_(std::move(name)) {
    if (doc.contains(name_)) {
      section_ = doc.at(name_);
      if (!section_.is_object()) throw UsageError("config section '" + name_ + "' must be an object");
    } else {
      section_ = json::object();
    }
  }
  ~SectionReader() = default;

  bool has(const char* key) const { return section_.contains(key); }

  template <typename V>
  void operator()(const char* key, V& out) {
    seen_.insert(key);
    if (!section_.contains(key)) return;
    try {
      out = section_.at(key).get<V>();
    } catch (const json::exception&) {
      throw UsageError("config key " + name_ + "." + key + " has the wrong type: " + section_.at(key).dump());
    }
  }

  template <typename E, typename Parse>
  void enumeration(const char* key, E& out, Parse parse) {
    std::string s;
    (*this)(key, s);
    if (!section_.contains(key)) return;
    try {
      out = parse(s);
    } catch (const Error& e) {
      throw UsageError("config key " + name_ + "." + key + ": " + e.what());
    }
  }

  void path(const char* key, std::filesystem::path& out) {
    std::string s;
    (*this)(key, s);
    if (section_.contains(key)) out = s;
  }

  void finish() const {
    for (const auto& [k, v] : section_.items())
      if (!seen_.contains(k)) throw UsageError("unknown config key " + name_ + "." + k);
  }

 private:
  std::string name_;
  json section_;
  std::set<std::string> seen_;
};

class SectionWriter {
 public:
  template <typename V>
  void operator()(const char* key, const V& v) {
    out[key] = v;
  }
  template <typename E, typename Parse>
  void enumeration(const char*, E&, Parse) {}
  void path(const char* key, const std::filesystem::path& p) { out[key] = p.string(); }
  json out = json::object();
};

template <typename B>
void bind_model(B& b, T2TConfig& c) {
  b("vocab_size", c.vocab_size);
  b("d_model", c.d_model);
  b("n_heads", c.n_heads);
  b("n_enc_layers", c.n_enc_layers);
  b("n_dec_layers", c.n_dec_layers);
  b("d_ff", c.d_ff);
  b("max_positions", c.max_positions);
  b("seed", c.seed);
  b("tie_embeddings", c.tie_embeddings);
}

template <typename B>
void bind_train(B& b, TrainConfig& c) {
  b("lr", c.lr);
  b("alpha", c.alpha);
  b("batch_size", c.batch_size);
  b("epochs", c.epochs);
  b("steps", c.steps);
  b("max_input_len", c.max_input_len);
  b("max_output_len", c.max_output_len);
  b("max_pieces", c.max_pieces);
  b("top_m", c.top_m);
  b("seed", c.seed);
  b.enumeration("selector_mode", c.selector_mode, parse_selector_mode);
  b("warmup_steps", c.warmup_steps);
  b("selector_init_sd", c.selector_init_sd);
  b("init_checkpoint", c.init_checkpoint);
  b("task_experts", c.task_experts);
}

EmbedderKind parse_embedder_kind(std::string_view s) {
  if (s == "hashed_ngram") return EmbedderKind::hashed_ngram;
  if (s == "external_service") return EmbedderKind::external_service;
  throw InvalidArgument("embedder kind must be hashed_ngram or external_service, got '" + std::string(s) + "'");
}

template <typename B>
void bind_embedder(B& b, EmbedderSpec& e) {
  b.enumeration("kind", e.kind, parse_embedder_kind);
  b("d", e.d);
  b("seed", e.seed);
  b("ngram_min", e.ngram_min);
  b("ngram_max", e.ngram_max);
  b("service_url", e.service_url);
  b("timeout_ms", e.timeout_ms);
  b("retries", e.retries);
}

template <typename B>
void bind_index(B& b, IndexOptions& o) {
  b("ivf_clusters", o.ivf_clusters);
  b("ivf_max_iters", o.ivf_max_iters);
  b("nprobe", o.nprobe);
  b("seed", o.seed);
}

template <typename B>
void bind_eval(B& b, EvalOptions& o) {
  b("length_norm", o.length_norm);
  b("max_input_len", o.max_input_len);
  b("max_output_len", o.max_output_len);
}

template <typename B>
void bind_paths(B& b, CliPaths& p) {
  b.path("data_dir", p.data_dir);
  b.path("store", p.store);
  b.path("index", p.index);
  b.path("tasks", p.tasks);
  b.path("eval_tasks", p.eval_tasks);
  b.path("runs", p.runs);
  b.path("plain_text", p.plain_text);
}

void apply_set(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("--set expects section.key=value, got '" + assignment + "'");
  const std::string key = trim(assignment.substr(0, eq));
  const std::string raw = assignment.substr(eq + 1);
  const auto dot = key.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == key.size())
    throw UsageError("--set key must look like section.key, got '" + key + "'");
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;  // bare words are strings
  }
  json& section = doc[key.substr(0, dot)];
  if (!section.is_null() && !section.is_object()) throw UsageError("config section '" + key.substr(0, dot) + "' is not an object");
  section[key.substr(dot + 1)] = value;
}

std::filesystem::path under(const std::filesystem::path& base, const std::filesystem::path& p) {
  if (p.empty() || p.is_absolute()) return p;
  return base / p;
}

const char* env(const char* name) {
  const char* v = std::getenv(name);
  return (v && *v) ? v : nullptr;
}

}  // namespace

std::string_view precision_name(Precision p) noexcept { return p == Precision::f64 ? "double" : "float"; }

Precision parse_precision(std::string_view name) {
  if (name == "float" || name == "f32" || name == "32") return Precision::f32;
  if (name == "double" || name == "f64" || name == "64") return Precision::f64;
  throw UsageError("precision must be float or double, got '" + std::string(name) + "'");
}

CliConfig config_from_json(const json& doc) {
  if (!doc.is_object()) throw UsageError("config must be a JSON object");
  static const std::set<std::string> kSections = {"paths", "embedder", "model", "train",
                                                  "router", "eval", "index", "precision"};
  for (const auto& [k, v] : doc.items())
    if (!kSections.contains(k)) throw UsageError("unknown config section '" + k + "'");

  CliConfig c;
  {
    SectionReader r(doc, "paths");
    bind_paths(r, c.paths);
    r.finish();
  }
  {
    SectionReader r(doc, "embedder");
    bind_embedder(r, c.embedder);
    r.finish();
  }
  {
    SectionReader r(doc, "model");
    bind_model(r, c.model);
    r.finish();
  }
  {
    SectionReader r(doc, "train");
    bind_train(r, c.train);
    r.finish();
  }
  {
    SectionReader r(doc, "router");
    r("scale_at_eval", c.eval.scale_at_eval);
    r.finish();
  }
  {
    SectionReader r(doc, "eval");
    // Evaluation lengths follow training unless given.
    c.eval.max_input_len = c.train.max_input_len;
    c.eval.max_output_len = c.train.max_output_len;
    bind_eval(r, c.eval);
    r.finish();
  }
  {
    SectionReader r(doc, "index");
    bind_index(r, c.index);
    r.finish();
  }
  if (doc.contains("precision")) {
    if (!doc.at("precision").is_string()) throw UsageError("config key precision must be a string");
    c.precision = parse_precision(doc.at("precision").get<std::string>());
  }
  try {
    c.embedder.validate();
    c.model.validate();
    c.train.validate();
  } catch (const InvalidArgument& e) {
    throw UsageError(std::string("invalid config: ") + e.what());
  }
  return c;
}

json config_to_json(const CliConfig& config) {
  CliConfig c = config;
  json doc;
  {
    SectionWriter w;
    bind_paths(w, c.paths);
    doc["paths"] = w.out;
  }
  {
    SectionWriter w;
    bind_embedder(w, c.embedder);
    w.out["kind"] = c.embedder.kind == EmbedderKind::hashed_ngram ? "hashed_ngram" : "external_service";
    doc["embedder"] = w.out;
  }
  {
    SectionWriter w;
    bind_model(w, c.model);
    doc["model"] = w.out;
  }
  {
    SectionWriter w;
    bind_train(w, c.train);
    w.out["selector_mode"] = std::string(selector_mode_name(c.train.selector_mode));
    doc["train"] = w.out;
  }
  doc["router"] = {{"scale_at_eval", c.eval.scale_at_eval}};
  {
    SectionWriter w;
    bind_eval(w, c.eval);
    doc["eval"] = w.out;
  }
  {
    SectionWriter w;
    bind_index(w, c.index);
    doc["index"] = w.out;
  }
  doc["precision"] = std::string(precision_name(c.precision));
  return doc;
}

std::optional<std::uint64_t> seed_override(const std::optional<std::uint64_t>& flag) {
  if (flag) return flag;
  if (const char* s = env("KIC_SEED")) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(s, &used);
      if (used == std::string(s).size()) return v;
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("KIC_SEED must be an unsigned integer, got '") + s + "'");
  }
  return std::nullopt;
}

CliConfig resolve_config(const ConfigSources& sources) {
  json doc = json::object();
  std::filesystem::path config_dir = std::filesystem::current_path();
  if (sources.config_file) {
    std::ifstream in(*sources.config_file);
    if (!in) throw NotFound("cannot open config " + sources.config_file->string());
    try {
      doc = json::parse(in);
    } catch (const json::exception& e) {
      throw UsageError("config " + sources.config_file->string() + " is not valid JSON: " + e.what());
    }
    config_dir = std::filesystem::absolute(*sources.config_file).parent_path();
  }
  for (const auto& s : sources.sets) apply_set(doc, s);

  CliConfig c = config_from_json(doc);

  std::filesystem::path data_dir = std::filesystem::current_path();
  if (sources.data_dir) {
    data_dir = *sources.data_dir;
  } else if (const char* d = env("KIC_DATA_DIR")) {
    data_dir = d;
  } else if (!c.paths.data_dir.empty()) {
    data_dir = under(config_dir, c.paths.data_dir);
  }
  c.paths.data_dir = data_dir;
  c.paths.store = under(data_dir, c.paths.store);
  c.paths.index = under(data_dir, c.paths.index);
  c.paths.tasks = under(data_dir, c.paths.tasks);
  c.paths.eval_tasks = under(data_dir, c.paths.eval_tasks);
  c.paths.runs = under(data_dir, c.paths.runs);
  c.paths.plain_text = under(data_dir, c.paths.plain_text);
  if (!c.train.init_checkpoint.empty())
    c.train.init_checkpoint = under(data_dir, c.train.init_checkpoint).string();

  if (const auto seed = seed_override(sources.seed)) {
    c.train.seed = *seed;
    c.model.seed = *seed;
    c.index.seed = *seed;
  }
  return c;
}

}  // namespace kic::cli
