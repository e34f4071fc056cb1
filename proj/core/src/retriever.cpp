#include "kic/retriever.hpp"

#include <algorithm>
#include <set>
#include <unordered_set>

#include "kic/error.hpp"
#include "kic/text.hpp"

namespace kic {

std::optional<KnowledgeCategory> category_of(MemoryId m) noexcept {
  return category_from_ordinal(static_cast<int>(m));
}

std::string memory_name(MemoryId m) {
  if (const auto c = category_of(m)) return std::string(category_name(*c));
  switch (m) {
    case MemoryId::all_categories:
      return "union";
    case MemoryId::plain_text:
      return "plaintext";
    default:
      return "none";
  }
}

MemoryId parse_memory(std::string_view name) {
  const std::string n = to_lower_ascii(trim(name));
  if (n == "union") return MemoryId::all_categories;
  if (n == "plaintext") return MemoryId::plain_text;
  if (n == "none") return MemoryId::none;
  return memory_for(parse_category(n));
}

void RetrievalRequest::validate() const {
  if (max_pieces < 0) throw InvalidArgument("max_pieces must be >= 0");
  if (top_m < max_pieces) throw InvalidArgument("top_m must be >= max_pieces");
}

EntityAliasTable EntityAliasTable::from_subjects(std::span<const std::string> subjects) {
  EntityAliasTable t;
  for (const auto& s : subjects) t.add(s, s);
  return t;
}

EntityAliasTable EntityAliasTable::from_store(const KnowledgeStore& store) {
  EntityAliasTable t;
  for (const auto& tr : store.triples(KnowledgeCategory::entity)) t.add(tr.subject, tr.subject);
  return t;
}

void EntityAliasTable::add(std::string_view alias, std::string subject) {
  auto tokens = word_tokens(alias);
  if (tokens.empty()) return;
  max_len_ = std::max(max_len_, tokens.size());
  by_alias_.emplace(std::move(tokens), std::move(subject));
}

std::vector<std::string> EntityAliasTable::match(std::string_view query) const {
  const auto tokens = word_tokens(query);
  std::vector<std::string> found;
  std::size_t i = 0;
  while (i < tokens.size()) {
    std::size_t matched = 0;
    const std::size_t longest = std::min(max_len_, tokens.size() - i);
    for (std::size_t len = longest; len >= 1; --len) {
      const std::vector<std::string> span(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                          tokens.begin() + static_cast<std::ptrdiff_t>(i + len));
      if (const auto it = by_alias_.find(span); it != by_alias_.end()) {
        found.push_back(it->second);
        matched = len;
        break;
      }
    }
    i += matched ? matched : 1;
  }
  return found;
}

std::vector<std::uint64_t> prefilter_dictionary(const MemoryPartition& partition,
                                                std::span<const Keyword> keywords) {
  std::unordered_set<std::string> words;
  for (const auto& k : keywords)
    for (auto& w : word_tokens(k.phrase)) words.insert(std::move(w));
  std::vector<std::uint64_t> out;
  if (words.empty()) return out;
  for (const auto& kv : partition.kvs) {
    for (const auto& tok : word_tokens(kv.key_text)) {
      if (words.contains(tok)) {
        out.push_back(kv.kv_id);
        break;
      }
    }
  }
  return out;
}

std::vector<std::uint64_t> prefilter_entity(std::string_view query, const EntityAliasTable& aliases,
                                            const MemoryPartition& partition, const KnowledgeStore& store) {
  const auto matched = aliases.match(query);
  std::vector<std::uint64_t> out;
  if (matched.empty()) return out;
  const std::set<std::string> subjects(matched.begin(), matched.end());
  for (const auto& kv : partition.kvs) {
    const auto* t = store.find_triple(kv.triple_id);
    if (t && subjects.contains(t->subject)) out.push_back(kv.kv_id);
  }
  return out;
}

std::vector<KeyedText> chunk_passages(std::string_view text, int words_per_passage) {
  if (words_per_passage < 1) throw InvalidArgument("words_per_passage must be >= 1");
  const auto words = split_whitespace(text);
  std::vector<KeyedText> out;
  for (std::size_t i = 0; i < words.size(); i += static_cast<std::size_t>(words_per_passage)) {
    const auto end = std::min(words.size(), i + static_cast<std::size_t>(words_per_passage));
    std::vector<std::string> chunk(words.begin() + static_cast<std::ptrdiff_t>(i),
                                   words.begin() + static_cast<std::ptrdiff_t>(end));
    out.push_back({kPlainTextIdBase + out.size(), join(chunk, " ")});
  }
  return out;
}

KnowledgeBase::KnowledgeBase(const KnowledgeStore& store, EmbedderSpec embedder, StopwordSet stopwords)
    : store_(&store),
      embedder_(std::move(embedder)),
      stopwords_(std::move(stopwords)),
      aliases_(EntityAliasTable::from_store(store)) {
  Table all;
  for (const auto c : kAllCategories) {
    partitions_[static_cast<std::size_t>(ordinal(c) - 1)] = store.get_partition(c);
    Table t;
    for (const auto& kv : partitions_[static_cast<std::size_t>(ordinal(c) - 1)].kvs) {
      t.keys.push_back({kv.kv_id, kv.key_text});
      t.values.emplace(kv.kv_id, kv.value_text);
      all.keys.push_back({kv.kv_id, kv.key_text});
      all.values.emplace(kv.kv_id, kv.value_text);
    }
    tables_.emplace(memory_for(c), std::move(t));
  }
  std::sort(all.keys.begin(), all.keys.end(), [](const KeyedText& a, const KeyedText& b) { return a.id < b.id; });
  tables_.emplace(MemoryId::all_categories, std::move(all));
}

void KnowledgeBase::set_plain_text(std::vector<KeyedText> passages) {
  Table t;
  for (auto& p : passages) {
    t.values.emplace(p.id, p.text);
    t.keys.push_back(std::move(p));
  }
  tables_[MemoryId::plain_text] = std::move(t);
  indexes_.erase(MemoryId::plain_text);
}

const KnowledgeBase::Table& KnowledgeBase::table(MemoryId memory) const {
  const auto it = tables_.find(memory);
  if (it == tables_.end()) throw NotFound("no " + memory_name(memory) + " memory");
  return it->second;
}

std::size_t KnowledgeBase::build_index(MemoryId memory, const IndexOptions& options) {
  const Table& t = table(memory);
  if (t.keys.empty()) throw InvalidArgument("empty partition: " + memory_name(memory));
  ExactBuild built = build_exact(std::span<const KeyedText>(t.keys), embedder_);
  if (options.ivf_clusters > 0) {
    IvfIndex ivf = build_ivf(built.index, options.ivf_clusters, options.ivf_max_iters, options.seed);
    if (options.nprobe > 0) ivf.set_nprobe(std::min(options.nprobe, ivf.n_clusters()));
    indexes_[memory] = MipsIndex(std::move(ivf));
  } else {
    indexes_[memory] = MipsIndex(std::move(built.index));
  }
  return built.skipped;
}

void KnowledgeBase::build_all(const IndexOptions& options) {
  for (const auto& [memory, t] : tables_) {
    if (t.keys.empty()) continue;
    IndexOptions o = options;
    if (o.ivf_clusters > static_cast<int>(t.keys.size())) o.ivf_clusters = 0;
    build_index(memory, o);
  }
}

void KnowledgeBase::set_index(MemoryId memory, MipsIndex index) {
  if (index.dims() != embedder_.dims())
    throw DimensionMismatch(memory_name(memory) + " index has dimension " + std::to_string(index.dims()) +
                            ", embedder has " + std::to_string(embedder_.dims()));
  indexes_[memory] = std::move(index);
}

bool KnowledgeBase::has_index(MemoryId memory) const { return indexes_.contains(memory); }

const MipsIndex& KnowledgeBase::index(MemoryId memory) const {
  const auto it = indexes_.find(memory);
  if (it == indexes_.end()) throw NotFound("no index built for " + memory_name(memory));
  return it->second;
}

std::filesystem::path KnowledgeBase::index_path(const std::filesystem::path& dir, MemoryId memory) const {
  return dir / (memory_name(memory) + ".kicx");
}

std::size_t KnowledgeBase::load_indexes(const std::filesystem::path& dir, int nprobe) {
  std::size_t loaded = 0;
  for (const auto& [memory, t] : tables_) {
    const auto path = index_path(dir, memory);
    if (!std::filesystem::exists(path)) continue;
    MipsIndex idx = load_index(path, embedder_.dims(), 0);
    if (idx.is_ivf() && nprobe > 0) idx.ivf().set_nprobe(std::min(nprobe, idx.ivf().n_clusters()));
    set_index(memory, std::move(idx));
    ++loaded;
  }
  return loaded;
}

RetrievedKnowledge KnowledgeBase::collect(MemoryId memory, const std::vector<SearchHit>& hits,
                                          int max_pieces) const {
  RetrievedKnowledge out;
  out.memory = memory;
  const Table& t = table(memory);
  std::unordered_set<std::string> seen;
  for (const auto& h : hits) {
    if (static_cast<int>(out.pieces.size()) >= max_pieces) break;
    const auto it = t.values.find(h.kv_id);
    if (it == t.values.end()) throw NotFound("index references unknown kv " + std::to_string(h.kv_id));
    // Hits arrive best-first, so the first copy of a value has its highest score.
    if (!seen.insert(it->second).second) continue;
    out.pieces.push_back({it->second, h.score, h.kv_id});
  }
  return out;
}

RetrievedKnowledge KnowledgeBase::retrieve(const RetrievalRequest& request) const {
  request.validate();
  const MemoryId memory = memory_for(request.category);
  const MipsIndex& idx = index(memory);
  RetrievedKnowledge empty;
  empty.memory = memory;
  if (request.max_pieces == 0) return empty;

  std::vector<std::uint64_t> candidates;
  const auto& partition = partitions_[static_cast<std::size_t>(ordinal(request.category) - 1)];
  if (request.category == KnowledgeCategory::dictionary) {
    if (!is_blank(request.query_text)) {
      const auto keywords = extract_keywords(request.query_text, stopwords_);
      candidates = prefilter_dictionary(partition, keywords);
    }
  } else if (request.category == KnowledgeCategory::entity) {
    candidates = prefilter_entity(request.query_text, aliases_, partition, *store_);
  }

  const EmbeddingVector q = embedder_.embed(request.query_text);
  const auto top = static_cast<std::size_t>(request.top_m);
  RetrievedKnowledge out;
  if (candidates.empty()) {
    out = collect(memory, idx.search(q, top), request.max_pieces);
  } else {
    out = collect(memory, idx.search_subset(q, top, candidates), request.max_pieces);
    out.prefiltered = true;
  }
  return out;
}

RetrievedKnowledge KnowledgeBase::retrieve_unfiltered(MemoryId memory, std::string_view query, int top_m,
                                                      int max_pieces) const {
  if (max_pieces < 0 || top_m < max_pieces) throw InvalidArgument("need top_m >= max_pieces >= 0");
  const MipsIndex& idx = index(memory);
  if (max_pieces == 0) {
    RetrievedKnowledge empty;
    empty.memory = memory;
    return empty;
  }
  return collect(memory, idx.search(embedder_.embed(query), static_cast<std::size_t>(top_m)), max_pieces);
}

RetrievedKnowledge KnowledgeBase::retrieve_any(MemoryId memory, std::string_view query, int top_m,
                                               int max_pieces) const {
  if (const auto c = category_of(memory))
    return retrieve(RetrievalRequest{std::string(query), *c, top_m, max_pieces});
  return retrieve_unfiltered(memory, query, top_m, max_pieces);
}

AugmentedSequence augment_input(std::span<const TokenId> input_tokens,
                                std::span<const std::vector<TokenId>> pieces, int max_input_len) {
  if (max_input_len < 1) throw InvalidArgument("max_input_len must be >= 1");
  const auto limit = static_cast<std::size_t>(max_input_len);
  AugmentedSequence out;
  out.ids.assign(input_tokens.begin(), input_tokens.end());
  if (out.ids.size() > limit) {
    out.ids.resize(limit);
    out.input_truncated = true;
    return out;
  }
  if (pieces.empty()) return out;
  out.ids.push_back(kKnowDelim);
  for (std::size_t i = 0; i < pieces.size() && out.ids.size() < limit; ++i) {
    if (i) out.ids.push_back(kPieceDelim);
    out.ids.insert(out.ids.end(), pieces[i].begin(), pieces[i].end());
  }
  if (out.ids.size() > limit) out.ids.resize(limit);
  return out;
}

RetrievalAugmenter::RetrievalAugmenter(const KnowledgeBase& kb, AugmentOptions options)
    : kb_(kb), options_(options) {
  if (options_.max_pieces < 0 || options_.top_m < options_.max_pieces)
    throw InvalidArgument("augmenter needs top_m >= max_pieces >= 0");
}

bool RetrievalAugmenter::has_memory(MemoryId memory) const {
  return memory == MemoryId::none || kb_.has_index(memory);
}

AugmentedInput RetrievalAugmenter::augment(const AugmentQuery& query, MemoryId memory) const {
  AugmentedInput out;
  if (memory == MemoryId::none) {
    auto seq = augment_input(query.input_ids, {}, options_.max_input_len);
    out.ids = std::move(seq.ids);
    out.input_truncated = seq.input_truncated;
    return out;
  }
  const auto key = std::make_pair(static_cast<int>(memory), std::string(query.text));
  bool cached = false;
  {
    std::lock_guard lock(mu_);
    if (const auto it = cache_.find(key); it != cache_.end()) {
      out.pieces = it->second;
      cached = true;
    }
  }
  if (!cached) {
    const auto got = kb_.retrieve_any(memory, query.text, options_.top_m, options_.max_pieces);
    for (const auto& p : got.pieces) out.pieces.push_back(p.value_text);
    std::lock_guard lock(mu_);
    cache_.emplace(key, out.pieces);
  }
  std::vector<std::vector<TokenId>> tokens;
  tokens.reserve(out.pieces.size());
  for (const auto& p : out.pieces) tokens.push_back(ByteTokenizer::encode(p));
  auto seq = augment_input(query.input_ids, tokens, options_.max_input_len);
  out.ids = std::move(seq.ids);
  out.input_truncated = seq.input_truncated;
  return out;
}

AugmentedInput StaticAugmenter::augment(const AugmentQuery& query, MemoryId memory) const {
  AugmentedInput out;
  std::span<const std::vector<TokenId>> pieces;
  if (memory != MemoryId::none) {
    const auto it = pieces_.find(memory);
    if (it == pieces_.end()) throw NotFound("no pieces for " + memory_name(memory));
    pieces = it->second;
  }
  auto seq = augment_input(query.input_ids, pieces, max_input_len_);
  out.ids = std::move(seq.ids);
  out.input_truncated = seq.input_truncated;
  return out;
}

}  // namespace kic
