#include "kic/knowledge_store.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <sstream>

#include "json.hpp"
#include "kic/error.hpp"
#include "kic/hash.hpp"
#include "kic/text.hpp"

namespace kic {
namespace {

using nlohmann::json;

constexpr std::array<std::string_view, kNumCategories> kNames = {
    "dictionary", "commonsense", "entity", "event", "script", "causality"};

std::string content_key(KnowledgeCategory c, std::string_view s, std::string_view r,
                        std::string_view o) {
  std::string key;
  key.reserve(s.size() + r.size() + o.size() + 4);
  key.push_back(static_cast<char>(ordinal(c)));
  key.push_back('\x1f');
  key.append(s);
  key.push_back('\x1f');
  key.append(r);
  key.push_back('\x1f');
  key.append(o);
  return key;
}

std::string cat(std::string_view a, std::string_view b) {
  std::string out(a);
  out.push_back(' ');
  out.append(b);
  return out;
}

std::string cat(std::string_view a, std::string_view b, std::string_view c) {
  return cat(cat(a, b), c);
}

std::string read_string_field(const json& record, const char* field) {
  const auto it = record.find(field);
  if (it == record.end()) throw FormatError(std::string("missing field \"") + field + "\"");
  if (!it->is_string()) throw FormatError(std::string("field \"") + field + "\" is not a string");
  return it->get<std::string>();
}

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFound("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  return lines;
}

}  // namespace

std::string_view category_name(KnowledgeCategory c) noexcept {
  return kNames[static_cast<std::size_t>(ordinal(c) - 1)];
}

KnowledgeCategory parse_category(std::string_view name) {
  const std::string lowered = to_lower_ascii(trim(name));
  for (const auto c : kAllCategories)
    if (category_name(c) == lowered) return c;
  throw InvalidArgument("unknown knowledge category \"" + std::string(name) +
                        "\"; valid categories: " + valid_category_names());
}

std::optional<KnowledgeCategory> category_from_ordinal(int ord) noexcept {
  if (ord < 1 || ord > kNumCategories) return std::nullopt;
  return static_cast<KnowledgeCategory>(ord);
}

std::string valid_category_names() {
  std::string out;
  for (std::size_t i = 0; i < kNames.size(); ++i) {
    if (i) out += ", ";
    out += kNames[i];
  }
  return out;
}

int kv_count_for(KnowledgeCategory c) noexcept {
  switch (c) {
    case KnowledgeCategory::dictionary:
      return 1;
    case KnowledgeCategory::commonsense:
    case KnowledgeCategory::event:
      return 3;
    case KnowledgeCategory::entity:
    case KnowledgeCategory::script:
    case KnowledgeCategory::causality:
      return 2;
  }
  return 0;
}

std::vector<KeyValuePair> build_key_values(const KnowledgeTriple& t) {
  if (is_blank(t.subject) || is_blank(t.object))
    throw InvalidArgument("triple " + std::to_string(t.id) + " has an empty subject or object");

  std::vector<std::pair<std::string, std::string>> kv;
  const auto& s = t.subject;
  const auto& r = t.relation;
  const auto& o = t.object;
  switch (t.category) {
    case KnowledgeCategory::dictionary:
      kv = {{s, o}};
      break;
    case KnowledgeCategory::commonsense:
    case KnowledgeCategory::event: {
      const std::string fact = cat(s, r, o);
      kv = {{s, fact}, {cat(s, o), fact}, {fact, fact}};
      break;
    }
    case KnowledgeCategory::entity:
      kv = {{s, o}, {o, o}};
      break;
    case KnowledgeCategory::script:
      kv = {{s, r}, {o, r}};
      break;
    case KnowledgeCategory::causality:
      kv = {{cat(s, o), cat(s, o)}, {cat(o, s), cat(o, s)}};
      break;
  }

  std::vector<KeyValuePair> out;
  out.reserve(kv.size());
  for (std::size_t slot = 0; slot < kv.size(); ++slot) {
    out.push_back(KeyValuePair{t.id * kKvSlotsPerTriple + slot, t.id, t.category,
                               std::move(kv[slot].first), std::move(kv[slot].second)});
  }
  return out;
}

std::uint64_t KnowledgeStore::add_triple(KnowledgeCategory category, std::string subject,
                                         std::string relation, std::string object) {
  if (sealed_) throw InvalidArgument("knowledge store is sealed");
  if (is_blank(subject)) throw InvalidArgument("empty subject");
  if (is_blank(object)) throw InvalidArgument("empty object");
  if (category == KnowledgeCategory::script && is_blank(relation))
    throw InvalidArgument("script triples need a non-empty relation (it is the value)");

  std::string key = content_key(category, subject, relation, object);
  if (const auto it = content_ids_.find(key); it != content_ids_.end()) return it->second;

  KnowledgeTriple t{next_id_++, category, std::move(subject), std::move(relation),
                    std::move(object)};
  auto kvs = build_key_values(t);
  auto& p = slot(category);
  id_index_.emplace(t.id, std::make_pair(ordinal(category), p.triples.size()));
  content_ids_.emplace(std::move(key), t.id);
  p.triples.push_back(std::move(t));
  for (auto& kv : kvs) p.kvs.push_back(std::move(kv));
  return p.triples.back().id;
}

IngestReport KnowledgeStore::ingest(std::istream& records, KnowledgeCategory category,
                                    std::string source_name) {
  IngestReport report;
  report.source = std::move(source_name);
  std::string line;
  std::size_t line_no = 0;
  std::string all_bytes;
  while (std::getline(records, line)) {
    ++line_no;
    all_bytes += line;
    all_bytes.push_back('\n');
    if (is_blank(line)) continue;
    try {
      const json record = json::parse(line);
      if (!record.is_object()) throw FormatError("record is not an object");
      std::string s = read_string_field(record, "subject");
      std::string r = read_string_field(record, "relation");
      std::string o = read_string_field(record, "object");
      const std::size_t before = next_id_;
      const std::uint64_t id = add_triple(category, std::move(s), std::move(r), std::move(o));
      if (id >= before) {
        ++report.added;
        report.kvs_added += static_cast<std::size_t>(kv_count_for(category));
      } else {
        ++report.duplicates;
      }
    } catch (const json::exception& e) {
      report.errors.push_back({line_no, std::string("malformed record: ") + e.what()});
    } catch (const Error& e) {
      report.errors.push_back({line_no, e.what()});
    }
  }
  auto& prov = slot(category).provenance;
  SourceDigest digest{report.source, hex64(fnv1a64(all_bytes))};
  bool seen = false;
  for (const auto& d : prov) seen = seen || d == digest;
  if (!seen) prov.push_back(std::move(digest));
  return report;
}

IngestReport KnowledgeStore::ingest_file(const std::filesystem::path& path,
                                         KnowledgeCategory category) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFound("cannot open " + path.string());
  return ingest(in, category, path.filename().string());
}

MemoryPartition KnowledgeStore::get_partition(KnowledgeCategory category) const {
  const auto& p = slot(category);
  return MemoryPartition{category, p.kvs, p.provenance};
}

MemoryPartition KnowledgeStore::get_partition(std::string_view name) const {
  return get_partition(parse_category(name));
}

const std::vector<KnowledgeTriple>& KnowledgeStore::triples(KnowledgeCategory category) const {
  return slot(category).triples;
}

const KnowledgeTriple* KnowledgeStore::find_triple(std::uint64_t id) const {
  const auto it = id_index_.find(id);
  if (it == id_index_.end()) return nullptr;
  return &partitions_[static_cast<std::size_t>(it->second.first - 1)].triples[it->second.second];
}

std::size_t KnowledgeStore::triple_count() const noexcept {
  std::size_t n = 0;
  for (const auto& p : partitions_) n += p.triples.size();
  return n;
}

std::size_t KnowledgeStore::kv_count(KnowledgeCategory category) const {
  return slot(category).kvs.size();
}

void KnowledgeStore::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["format"] = "kic-store";
  manifest["version"] = 1;
  manifest["next_id"] = next_id_;
  json cats = json::object();
  for (const auto c : kAllCategories) {
    const auto& p = slot(c);
    const std::string name(category_name(c));
    std::vector<std::string> tlines;
    for (const auto& t : p.triples) {
      tlines.push_back(
          json{{"id", t.id}, {"subject", t.subject}, {"relation", t.relation}, {"object", t.object}}
              .dump());
    }
    std::vector<std::string> kvlines;
    for (const auto& kv : p.kvs) {
      kvlines.push_back(json{{"kv_id", kv.kv_id},
                             {"triple_id", kv.triple_id},
                             {"key", kv.key_text},
                             {"value", kv.value_text}}
                            .dump());
    }
    const auto tfile = dir / (name + ".triples.jsonl");
    const auto kvfile = dir / (name + ".kv.jsonl");
    write_lines(tfile, tlines);
    write_lines(kvfile, kvlines);
    json prov = json::array();
    for (const auto& d : p.provenance) prov.push_back({{"source", d.source}, {"digest", d.digest}});
    cats[name] = {{"triples", p.triples.size()},
                  {"kvs", p.kvs.size()},
                  {"triples_digest", file_digest(tfile.string())},
                  {"kv_digest", file_digest(kvfile.string())},
                  {"provenance", prov}};
  }
  manifest["categories"] = cats;
  std::ofstream out(dir / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

KnowledgeStore KnowledgeStore::load(const std::filesystem::path& dir) {
  const auto mpath = dir / "manifest.json";
  std::ifstream in(mpath, std::ios::binary);
  if (!in) throw NotFound("no knowledge store at " + dir.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("corrupt manifest " + mpath.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "kic-store" || manifest.value("version", 0) != 1)
    throw FormatError("unsupported store manifest in " + dir.string());

  KnowledgeStore store;
  const auto& cats = manifest.at("categories");
  // Triples must be re-added in global id order so next_id_ lines up.
  std::vector<KnowledgeTriple> all;
  for (const auto c : kAllCategories) {
    const std::string name(category_name(c));
    if (!cats.contains(name)) continue;
    const auto& entry = cats.at(name);
    const auto tfile = dir / (name + ".triples.jsonl");
    const auto kvfile = dir / (name + ".kv.jsonl");
    if (file_digest(tfile.string()) != entry.at("triples_digest").get<std::string>())
      throw FormatError("digest mismatch for " + tfile.string());
    if (file_digest(kvfile.string()) != entry.at("kv_digest").get<std::string>())
      throw FormatError("digest mismatch for " + kvfile.string());
    for (const auto& line : read_lines(tfile)) {
      const json j = json::parse(line);
      all.push_back(KnowledgeTriple{j.at("id").get<std::uint64_t>(), c,
                                    j.at("subject").get<std::string>(),
                                    j.at("relation").get<std::string>(),
                                    j.at("object").get<std::string>()});
    }
    for (const auto& d : entry.value("provenance", json::array()))
      store.slot(c).provenance.push_back(
          {d.at("source").get<std::string>(), d.at("digest").get<std::string>()});
  }
  std::sort(all.begin(), all.end(),
            [](const KnowledgeTriple& a, const KnowledgeTriple& b) { return a.id < b.id; });
  for (auto& t : all) {
    store.next_id_ = t.id;
    const auto id = store.add_triple(t.category, t.subject, t.relation, t.object);
    if (id != t.id) throw FormatError("duplicate triple content for id " + std::to_string(t.id));
  }
  store.next_id_ = std::max<std::uint64_t>(store.next_id_, manifest.at("next_id").get<std::uint64_t>());

  // The persisted KV files must agree with the strategy table applied to
  // the persisted triples; anything else means the store was edited.
  for (const auto c : kAllCategories) {
    const std::string name(category_name(c));
    if (!cats.contains(name)) continue;
    const auto lines = read_lines(dir / (name + ".kv.jsonl"));
    const auto& kvs = store.slot(c).kvs;
    if (lines.size() != kvs.size()) throw FormatError("kv count mismatch for " + name);
    for (std::size_t i = 0; i < lines.size(); ++i) {
      const json j = json::parse(lines[i]);
      if (j.at("kv_id").get<std::uint64_t>() != kvs[i].kv_id ||
          j.at("key").get<std::string>() != kvs[i].key_text ||
          j.at("value").get<std::string>() != kvs[i].value_text)
        throw FormatError("kv record " + std::to_string(i) + " of " + name +
                          " does not match its triple");
    }
  }
  return store;
}

}  // namespace kic
