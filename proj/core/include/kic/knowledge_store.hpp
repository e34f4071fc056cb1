#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace kic {

// The six typed knowledge memories. Ordinal 0 is the generalist expert and
// deliberately has no enumerator here: no triple can carry it.
enum class KnowledgeCategory : std::uint8_t {
  dictionary = 1,
  commonsense = 2,
  entity = 3,
  event = 4,
  script = 5,
  causality = 6,
};

inline constexpr int kNumCategories = 6;

inline constexpr std::array<KnowledgeCategory, kNumCategories> kAllCategories = {
    KnowledgeCategory::dictionary, KnowledgeCategory::commonsense, KnowledgeCategory::entity,
    KnowledgeCategory::event,      KnowledgeCategory::script,      KnowledgeCategory::causality,
};

constexpr int ordinal(KnowledgeCategory c) noexcept { return static_cast<int>(c); }

std::string_view category_name(KnowledgeCategory c) noexcept;

// Throws InvalidArgument listing the six valid names.
KnowledgeCategory parse_category(std::string_view name);

std::optional<KnowledgeCategory> category_from_ordinal(int ordinal) noexcept;

// "dictionary, commonsense, entity, event, script, causality"
std::string valid_category_names();

struct KnowledgeTriple {
  std::uint64_t id = 0;
  KnowledgeCategory category = KnowledgeCategory::dictionary;
  std::string subject;
  std::string relation;
  std::string object;

  bool operator==(const KnowledgeTriple&) const = default;
};

struct KeyValuePair {
  std::uint64_t kv_id = 0;
  std::uint64_t triple_id = 0;
  KnowledgeCategory category = KnowledgeCategory::dictionary;
  std::string key_text;
  std::string value_text;

  bool operator==(const KeyValuePair&) const = default;
};

// Number of key-value pairs each category's strategy produces per triple.
int kv_count_for(KnowledgeCategory c) noexcept;

// kv ids are derived from the triple id, so they are stable across rebuilds:
// kv_id = triple_id * kKvSlotsPerTriple + slot.
inline constexpr std::uint64_t kKvSlotsPerTriple = 4;

// Category-specific key/value construction. Concatenation joins with a
// single space. Texts are kept verbatim (no case folding).
//   dictionary:          s -> o
//   commonsense, event:  s, s o, s r o -> s r o
//   entity:              s -> o, o -> o
//   script:              s -> r, o -> r
//   causality:           s o -> s o, o s -> o s
std::vector<KeyValuePair> build_key_values(const KnowledgeTriple& triple);

struct SourceDigest {
  std::string source;
  std::string digest;

  bool operator==(const SourceDigest&) const = default;
};

struct MemoryPartition {
  KnowledgeCategory category = KnowledgeCategory::dictionary;
  std::vector<KeyValuePair> kvs;
  std::vector<SourceDigest> provenance;
};

struct IngestError {
  std::size_t line = 0;
  std::string message;
};

struct IngestReport {
  std::string source;
  std::size_t added = 0;
  std::size_t duplicates = 0;
  std::size_t kvs_added = 0;
  std::vector<IngestError> errors;

  bool ok() const noexcept { return errors.empty(); }
};

// Triple memory for all six categories. Ingest is single-writer; once
// sealed the store is immutable and safe for concurrent readers.
class KnowledgeStore {
 public:
  KnowledgeStore() = default;

  // One JSON object per line: {"subject": ..., "relation": ..., "object": ...}.
  // Bad lines are reported with their 1-based line number and skipped; good
  // lines are kept. Content already present (same category and texts) keeps
  // its original id and counts as a duplicate.
  IngestReport ingest(std::istream& records, KnowledgeCategory category,
                      std::string source_name = "<stream>");
  IngestReport ingest_file(const std::filesystem::path& path, KnowledgeCategory category);

  // Adds one validated triple; returns its id (existing id for duplicates).
  std::uint64_t add_triple(KnowledgeCategory category, std::string subject, std::string relation,
                           std::string object);

  void seal() noexcept { sealed_ = true; }
  bool sealed() const noexcept { return sealed_; }

  MemoryPartition get_partition(KnowledgeCategory category) const;
  MemoryPartition get_partition(std::string_view category_name) const;

  const std::vector<KnowledgeTriple>& triples(KnowledgeCategory category) const;
  const KnowledgeTriple* find_triple(std::uint64_t id) const;

  std::size_t triple_count() const noexcept;
  std::size_t kv_count(KnowledgeCategory category) const;

  // Directory layout: manifest.json plus <category>.triples.jsonl and
  // <category>.kv.jsonl for each category.
  void save(const std::filesystem::path& dir) const;
  static KnowledgeStore load(const std::filesystem::path& dir);

 private:
  struct Partition {
    std::vector<KnowledgeTriple> triples;
    std::vector<KeyValuePair> kvs;
    std::vector<SourceDigest> provenance;
  };

  Partition& slot(KnowledgeCategory c) { return partitions_[ordinal(c) - 1]; }
  const Partition& slot(KnowledgeCategory c) const { return partitions_[ordinal(c) - 1]; }

  std::array<Partition, kNumCategories> partitions_;
  std::unordered_map<std::string, std::uint64_t> content_ids_;
  std::unordered_map<std::uint64_t, std::pair<int, std::size_t>> id_index_;
  std::uint64_t next_id_ = 1;
  bool sealed_ = false;
};

}  // namespace kic
