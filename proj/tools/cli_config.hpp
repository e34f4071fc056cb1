#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "kic/backbone.hpp"
#include "kic/embedding.hpp"
#include "kic/evaluation.hpp"
#include "kic/retriever.hpp"
#include "kic/training.hpp"

namespace kic::cli {

// Bad flags, bad values, unknown config keys. Maps to exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Precision { f32, f64 };

struct CliPaths {
  std::filesystem::path data_dir;
  std::filesystem::path store = "store";
  std::filesystem::path index = "index";
  std::filesystem::path tasks = "tasks/train";
  std::filesystem::path eval_tasks = "tasks/heldout";
  std::filesystem::path runs = "runs";
  std::filesystem::path plain_text;  // optional sentence file
};

struct CliConfig {
  CliPaths paths;
  EmbedderSpec embedder;
  T2TConfig model;
  TrainConfig train;
  EvalOptions eval;
  IndexOptions index;
  Precision precision = Precision::f32;
};

struct ConfigSources {
  std::optional<std::filesystem::path> config_file;
  std::optional<std::filesystem::path> data_dir;  // --data-dir
  std::vector<std::string> sets;                  // "section.key=value"
  std::optional<std::uint64_t> seed;              // --seed
};

// Layering, lowest first: built-in defaults, config file, --set overrides.
// Dedicated flags are applied by the commands afterwards. The data
// directory is --data-dir, else KIC_DATA_DIR, else the config's
// paths.data_dir (relative to the config file), else the working
// directory; every other relative path resolves against it. The seed is
// --seed, else KIC_SEED, else train.seed.
CliConfig resolve_config(const ConfigSources& sources);

// Seed from --seed / KIC_SEED, if either is set.
std::optional<std::uint64_t> seed_override(const std::optional<std::uint64_t>& flag);

nlohmann::json config_to_json(const CliConfig& config);
CliConfig config_from_json(const nlohmann::json& doc);

std::string_view precision_name(Precision p) noexcept;
Precision parse_precision(std::string_view name);

}  // namespace kic::cli
