#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kic/embedding.hpp"
#include "kic/keywords.hpp"
#include "kic/knowledge_store.hpp"
#include "kic/tokenizer.hpp"
#include "kic/vector_index.hpp"

namespace kic {

// Which memory a forward pass reads: nothing (the generalist), one of the
// six categories (same ordinals), the union of all six, or the plain-text
// passage memory.
enum class MemoryId : int {
  none = 0,
  dictionary = 1,
  commonsense = 2,
  entity = 3,
  event = 4,
  script = 5,
  causality = 6,
  all_categories = 7,
  plain_text = 8,
};

constexpr MemoryId memory_for(KnowledgeCategory c) noexcept { return static_cast<MemoryId>(ordinal(c)); }
std::optional<KnowledgeCategory> category_of(MemoryId m) noexcept;
// "dictionary".."causality", "union", "plaintext", "none".
std::string memory_name(MemoryId m);
MemoryId parse_memory(std::string_view name);

struct RetrievalRequest {
  std::string query_text;
  KnowledgeCategory category = KnowledgeCategory::commonsense;
  int top_m = 30;
  int max_pieces = 10;

  void validate() const;
};

struct RetrievedPiece {
  std::string value_text;
  double score = 0.0;
  std::uint64_t kv_id = 0;

  bool operator==(const RetrievedPiece&) const = default;
};

struct RetrievedKnowledge {
  MemoryId memory = MemoryId::none;
  std::vector<RetrievedPiece> pieces;
  bool prefiltered = false;  // true when a non-empty pre-filter restricted the search
};

// Normalized surface alias -> entity subject. Matching is done on word
// tokens so "york" never matches inside "yorkshire".
class EntityAliasTable {
 public:
  EntityAliasTable() = default;
  static EntityAliasTable from_subjects(std::span<const std::string> subjects);
  static EntityAliasTable from_store(const KnowledgeStore& store);

  void add(std::string_view alias, std::string subject);
  std::size_t size() const noexcept { return by_alias_.size(); }

  // Greedy left-to-right longest match; returns matched subjects in query order.
  std::vector<std::string> match(std::string_view query) const;

 private:
  std::map<std::vector<std::string>, std::string> by_alias_;
  std::size_t max_len_ = 0;
};

// KVs whose lowercased key_text contains any keyword word as a whole token.
std::vector<std::uint64_t> prefilter_dictionary(const MemoryPartition& partition,
                                                std::span<const Keyword> keywords);

// KVs whose source triple subject was matched by the alias table.
std::vector<std::uint64_t> prefilter_entity(std::string_view query, const EntityAliasTable& aliases,
                                            const MemoryPartition& partition, const KnowledgeStore& store);

// 64-word passages (key = value = passage) for the plain-text memory.
std::vector<KeyedText> chunk_passages(std::string_view text, int words_per_passage = 64);
inline constexpr std::uint64_t kPlainTextIdBase = std::uint64_t{1} << 62;

struct IndexOptions {
  int ivf_clusters = 0;  // 0 = exact index
  int ivf_max_iters = 20;
  int nprobe = 0;  // 0 = default for the cluster count
  std::uint64_t seed = 1;
};

// Immutable retrieval view over a sealed store: per-memory MIPS indexes plus
// the text tables needed to turn hits back into knowledge pieces.
class KnowledgeBase {
 public:
  KnowledgeBase(const KnowledgeStore& store, EmbedderSpec embedder, StopwordSet stopwords = default_stopwords());

  const Embedder& embedder() const noexcept { return embedder_; }
  const KnowledgeStore& store() const noexcept { return *store_; }
  const EntityAliasTable& aliases() const noexcept { return aliases_; }
  const StopwordSet& stopwords() const noexcept { return stopwords_; }

  // Plain-text memory passages; must be set before build/load of its index.
  void set_plain_text(std::vector<KeyedText> passages);

  // Builds the index for one memory; returns the number of skipped keys.
  // Throws InvalidArgument for an empty memory.
  std::size_t build_index(MemoryId memory, const IndexOptions& options = {});
  // Every non-empty category plus the union (and plain text when set).
  void build_all(const IndexOptions& options = {});

  void set_index(MemoryId memory, MipsIndex index);
  bool has_index(MemoryId memory) const;
  const MipsIndex& index(MemoryId memory) const;

  std::filesystem::path index_path(const std::filesystem::path& dir, MemoryId memory) const;
  // Loads every <memory>.kicx found in dir; returns how many were loaded.
  std::size_t load_indexes(const std::filesystem::path& dir, int nprobe = 0);

  // Category retrieval with that category's pre-filter and empty-filter
  // fallback to the whole partition.
  RetrievedKnowledge retrieve(const RetrievalRequest& request) const;

  // Union / plain-text / category retrieval without pre-filters.
  RetrievedKnowledge retrieve_unfiltered(MemoryId memory, std::string_view query, int top_m,
                                         int max_pieces) const;

  // Dispatches: categories go through retrieve(), others unfiltered.
  RetrievedKnowledge retrieve_any(MemoryId memory, std::string_view query, int top_m, int max_pieces) const;

 private:
  struct Table {
    std::vector<KeyedText> keys;
    std::unordered_map<std::uint64_t, std::string> values;
  };

  const Table& table(MemoryId memory) const;
  RetrievedKnowledge collect(MemoryId memory, const std::vector<SearchHit>& hits, int max_pieces) const;

  const KnowledgeStore* store_;
  Embedder embedder_;
  StopwordSet stopwords_;
  EntityAliasTable aliases_;
  std::array<MemoryPartition, kNumCategories> partitions_;
  std::map<MemoryId, Table> tables_;
  std::map<MemoryId, MipsIndex> indexes_;
};

struct AugmentedSequence {
  std::vector<TokenId> ids;
  bool input_truncated = false;
};

// input, KNOW-DELIM, piece_1, PIECE-DELIM, piece_2, ... tail-truncated to
// max_input_len. No delimiter is added when there are no pieces.
AugmentedSequence augment_input(std::span<const TokenId> input_tokens,
                                std::span<const std::vector<TokenId>> pieces, int max_input_len);

struct AugmentQuery {
  std::string_view text;
  std::span<const TokenId> input_ids;
};

struct AugmentedInput {
  std::vector<TokenId> ids;
  std::vector<std::string> pieces;
  bool input_truncated = false;
};

// What an expert's backbone pass reads as input. Decouples the routed
// training/evaluation code from how knowledge is stored.
class Augmenter {
 public:
  virtual ~Augmenter() = default;
  virtual bool has_memory(MemoryId memory) const = 0;
  virtual AugmentedInput augment(const AugmentQuery& query, MemoryId memory) const = 0;
};

struct AugmentOptions {
  int top_m = 30;
  int max_pieces = 10;
  int max_input_len = 512;
};

// Retrieval-backed augmenter with a per-(memory, query) cache. Thread-safe.
class RetrievalAugmenter final : public Augmenter {
 public:
  RetrievalAugmenter(const KnowledgeBase& kb, AugmentOptions options);

  bool has_memory(MemoryId memory) const override;
  AugmentedInput augment(const AugmentQuery& query, MemoryId memory) const override;

  const AugmentOptions& options() const noexcept { return options_; }

 private:
  const KnowledgeBase& kb_;
  AugmentOptions options_;
  mutable std::mutex mu_;
  mutable std::map<std::pair<int, std::string>, std::vector<std::string>> cache_;
};

// Fixed token pieces per memory; used by gradient checks and unit tests.
class StaticAugmenter final : public Augmenter {
 public:
  explicit StaticAugmenter(int max_input_len) : max_input_len_(max_input_len) {}

  void set(MemoryId memory, std::vector<std::vector<TokenId>> pieces) { pieces_[memory] = std::move(pieces); }

  bool has_memory(MemoryId memory) const override {
    return memory == MemoryId::none || pieces_.contains(memory);
  }
  AugmentedInput augment(const AugmentQuery& query, MemoryId memory) const override;

 private:
  int max_input_len_;
  std::map<MemoryId, std::vector<std::vector<TokenId>>> pieces_;
};

}  // namespace kic
