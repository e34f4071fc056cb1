#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "kic/error.hpp"
#include "kic/retriever.hpp"
#include "kic/text.hpp"
#include "test_support.hpp"

namespace kic {
namespace {

KnowledgeStore fixture_store() {
  KnowledgeStore store;
  for (const auto c : kAllCategories)
    store.ingest_file(test::fixtures_dir() / (std::string(category_name(c)) + ".jsonl"), c);
  store.seal();
  return store;
}

class RetrieverTest : public ::testing::Test {
 protected:
  RetrieverTest() : store_(fixture_store()), kb_(store_, EmbedderSpec{}) { kb_.build_all(); }

  KnowledgeStore store_;
  KnowledgeBase kb_;
};

// Values ranked by the best inner product of any of their keys, computed
// from fresh embeddings rather than the stored index.
std::vector<std::string> brute_force_values(const KnowledgeStore& store, KnowledgeCategory c, const std::string& query) {
  const EmbedderSpec spec;
  const auto q = embed_text(query, spec);
  std::vector<std::pair<double, std::string>> scored;
  for (const auto& kv : store.get_partition(c).kvs) scored.emplace_back(dot(embed_text(kv.key_text, spec), q), kv.value_text);
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<std::string> values;
  for (const auto& [s, v] : scored)
    if (std::find(values.begin(), values.end(), v) == values.end()) values.push_back(v);
  return values;
}

TEST_F(RetrieverTest, BirdQueryMatchesBruteForce) {
  for (const std::string query : {"can a bird fly", "bird"}) {
    const auto got = kb_.retrieve({query, KnowledgeCategory::commonsense, 30, 10});
    ASSERT_FALSE(got.pieces.empty());
    EXPECT_EQ(got.pieces[0].value_text, "bird CapableOf fly") << query;
    const auto expected = brute_force_values(store_, KnowledgeCategory::commonsense, query);
    ASSERT_EQ(got.pieces.size(), expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_EQ(got.pieces[i].value_text, expected[i]);
  }
}

TEST_F(RetrieverTest, PiecesAreDistinctAndBestFirst) {
  const auto got = kb_.retrieve({"bird fly", KnowledgeCategory::commonsense, 30, 10});
  std::set<std::string> seen;
  for (std::size_t i = 0; i < got.pieces.size(); ++i) {
    EXPECT_TRUE(seen.insert(got.pieces[i].value_text).second);
    if (i) EXPECT_GE(got.pieces[i - 1].score, got.pieces[i].score);
  }
  EXPECT_EQ(got.memory, MemoryId::commonsense);
}

TEST_F(RetrieverTest, ZeroPiecesIsLegal) {
  EXPECT_TRUE(kb_.retrieve({"bird", KnowledgeCategory::commonsense, 30, 0}).pieces.empty());
}

TEST_F(RetrieverTest, RequestValidation) {
  EXPECT_THROW(kb_.retrieve({"bird", KnowledgeCategory::commonsense, 3, 5}), InvalidArgument);
  EXPECT_THROW(kb_.retrieve({"bird", KnowledgeCategory::commonsense, 3, -1}), InvalidArgument);
}

TEST_F(RetrieverTest, MissingIndexIsAnError) {
  KnowledgeBase bare(store_, EmbedderSpec{});
  EXPECT_THROW(bare.retrieve({"bird", KnowledgeCategory::commonsense, 30, 10}), NotFound);
}

TEST_F(RetrieverTest, EntityPrefilterKeepsTheMatchedSubject) {
  const auto got = kb_.retrieve({"the capital of the United States", KnowledgeCategory::entity, 30, 10});
  EXPECT_TRUE(got.prefiltered);
  ASSERT_FALSE(got.pieces.empty());
  std::set<std::string> values;
  for (const auto& p : got.pieces) values.insert(p.value_text);
  EXPECT_TRUE(values.contains("Washington D.C."));
  for (const auto& p : got.pieces) {
    const auto* t = store_.find_triple(p.kv_id / kKvSlotsPerTriple);
    ASSERT_NE(t, nullptr);
    EXPECT_EQ(t->subject, "United States");
  }
}

TEST_F(RetrieverTest, EmptyPrefilterFallsBackToTheWholePartition) {
  const std::string query = "zebra stripes";
  const auto filtered = kb_.retrieve({query, KnowledgeCategory::entity, 30, 10});
  const auto plain = kb_.retrieve_unfiltered(MemoryId::entity, query, 30, 10);
  EXPECT_FALSE(filtered.prefiltered);
  EXPECT_EQ(filtered.pieces, plain.pieces);
}

TEST_F(RetrieverTest, DictionaryPrefilterUsesKeywords) {
  const auto got = kb_.retrieve({"what is a banana", KnowledgeCategory::dictionary, 30, 10});
  EXPECT_TRUE(got.prefiltered);
  ASSERT_EQ(got.pieces.size(), 1u);
  EXPECT_EQ(got.pieces[0].value_text, "An elongated curved fruit with a yellow skin and soft sweet flesh.");
}

TEST_F(RetrieverTest, RetrievalIsDeterministic) {
  const RetrievalRequest req{"babies cry at night", KnowledgeCategory::causality, 30, 10};
  EXPECT_EQ(kb_.retrieve(req).pieces, kb_.retrieve(req).pieces);
}

TEST_F(RetrieverTest, UnionIndexCoversEveryCategory) {
  ASSERT_TRUE(kb_.has_index(MemoryId::all_categories));
  std::size_t total = 0;
  for (const auto c : kAllCategories) total += store_.kv_count(c);
  EXPECT_EQ(kb_.index(MemoryId::all_categories).size(), total);
  const auto got = kb_.retrieve_any(MemoryId::all_categories, "can a bird fly", 30, 3);
  ASSERT_FALSE(got.pieces.empty());
  EXPECT_EQ(got.pieces[0].value_text, "bird CapableOf fly");
}

TEST(Retriever, MaxPiecesCapsTwelveHitsAtTen) {
  KnowledgeStore store;
  for (int i = 0; i < 12; ++i)
    store.add_triple(KnowledgeCategory::entity, "thing" + std::to_string(i), "is", "value" + std::to_string(i));
  KnowledgeBase kb(store, EmbedderSpec{});
  kb.build_index(MemoryId::entity);
  const auto got = kb.retrieve({"thing", KnowledgeCategory::entity, 30, 10});
  EXPECT_EQ(got.pieces.size(), 10u);
}

TEST(Retriever, EmptyMemoryCannotBeIndexed) {
  KnowledgeStore store;
  KnowledgeBase kb(store, EmbedderSpec{});
  EXPECT_THROW(kb.build_index(MemoryId::script), InvalidArgument);
  kb.build_all();
  EXPECT_FALSE(kb.has_index(MemoryId::script));
}

TEST(Retriever, LoadedIndexesAnswerLikeBuiltOnes) {
  const auto store = fixture_store();
  KnowledgeBase built(store, EmbedderSpec{});
  built.build_all();
  test::TempDir dir;
  for (const auto m : {MemoryId::commonsense, MemoryId::entity}) save_index(built.index_path(dir.path(), m), built.index(m));
  KnowledgeBase loaded(store, EmbedderSpec{});
  EXPECT_EQ(loaded.load_indexes(dir.path()), 2u);
  const RetrievalRequest req{"can a bird fly", KnowledgeCategory::commonsense, 30, 10};
  EXPECT_EQ(loaded.retrieve(req).pieces, built.retrieve(req).pieces);
  EmbedderSpec other;
  other.d = 64;
  KnowledgeBase wrong(store, other);
  EXPECT_THROW(wrong.load_indexes(dir.path()), DimensionMismatch);
}

TEST(Prefilter, DictionaryWholeTokenMatch) {
  MemoryPartition p;
  p.category = KnowledgeCategory::dictionary;
  p.kvs = {{4, 1, KnowledgeCategory::dictionary, "apple", "a"},
           {8, 2, KnowledgeCategory::dictionary, "banana", "b"},
           {12, 3, KnowledgeCategory::dictionary, "fruit", "f"},
           {16, 4, KnowledgeCategory::dictionary, "Pineapple", "p"}};
  EXPECT_EQ(prefilter_dictionary(p, std::vector<Keyword>{{"apple", 1}}), (std::vector<std::uint64_t>{4}));
  EXPECT_EQ(prefilter_dictionary(p, std::vector<Keyword>{{"round fruit", 4}}), (std::vector<std::uint64_t>{12}));
  EXPECT_TRUE(prefilter_dictionary(p, std::vector<Keyword>{{"cherry", 1}}).empty());
}

TEST(Prefilter, EntityLongestMatch) {
  const std::vector<std::string> subjects = {"New York", "York", "United States"};
  const auto aliases = EntityAliasTable::from_subjects(subjects);
  EXPECT_EQ(aliases.match("new york"), std::vector<std::string>{"New York"});
  EXPECT_EQ(aliases.match("I left York for the United States!"), (std::vector<std::string>{"York", "United States"}));
  EXPECT_TRUE(aliases.match("yorkshire pudding").empty());
}

TEST(Prefilter, EntityKeepsOnlyMatchedSubjects) {
  const auto store = fixture_store();
  const auto part = store.get_partition(KnowledgeCategory::entity);
  const auto aliases = EntityAliasTable::from_store(store);
  const auto ids = prefilter_entity("flights to new york", aliases, part, store);
  ASSERT_EQ(ids.size(), 2u);
  for (const auto id : ids) EXPECT_EQ(store.find_triple(id / kKvSlotsPerTriple)->subject, "New York");
  EXPECT_TRUE(prefilter_entity("nothing here", aliases, part, store).empty());
}

TEST(Augment, LongPiecesFillToTheLimit) {
  const std::vector<TokenId> input(500, 7);
  const std::vector<std::vector<TokenId>> pieces = {std::vector<TokenId>(40, 8), std::vector<TokenId>(40, 9)};
  const auto out = augment_input(input, pieces, 512);
  ASSERT_EQ(out.ids.size(), 512u);
  EXPECT_TRUE(std::equal(input.begin(), input.end(), out.ids.begin()));
  EXPECT_EQ(out.ids[500], kKnowDelim);
  EXPECT_FALSE(out.input_truncated);
}

TEST(Augment, NoPiecesNoDelimiter) {
  const std::vector<TokenId> input = {5, 6, 7};
  EXPECT_EQ(augment_input(input, {}, 10).ids, input);
}

TEST(Augment, PiecesFollowInOrderWithDelimiters) {
  const std::vector<TokenId> input = {10};
  const std::vector<std::vector<TokenId>> pieces = {{20, 21}, {30}};
  EXPECT_EQ(augment_input(input, pieces, 50).ids, (std::vector<TokenId>{10, kKnowDelim, 20, 21, kPieceDelim, 30}));
}

TEST(Augment, OverlongInputIsTruncatedAndFlagged) {
  const std::vector<TokenId> input(20, 6);
  const std::vector<std::vector<TokenId>> pieces = {{9}};
  const auto out = augment_input(input, pieces, 8);
  EXPECT_EQ(out.ids, std::vector<TokenId>(8, 6));
  EXPECT_TRUE(out.input_truncated);
  EXPECT_THROW(augment_input(input, pieces, 0), InvalidArgument);
}

TEST(Augment, NeverExceedsTheLimit) {
  for (int limit = 1; limit < 40; ++limit) {
    const std::vector<TokenId> input(static_cast<std::size_t>(limit % 13), 6);
    const std::vector<std::vector<TokenId>> pieces = {std::vector<TokenId>(7, 8), std::vector<TokenId>(11, 9)};
    ASSERT_LE(augment_input(input, pieces, limit).ids.size(), static_cast<std::size_t>(limit));
  }
}

TEST_F(RetrieverTest, AugmenterPutsBestPieceFirst) {
  const RetrievalAugmenter aug(kb_, AugmentOptions{30, 2, 256});
  const std::string text = "can a bird fly";
  const auto ids = ByteTokenizer::encode(text);
  const auto out = aug.augment(AugmentQuery{text, ids}, MemoryId::commonsense);
  ASSERT_FALSE(out.pieces.empty());
  EXPECT_EQ(out.pieces[0], "bird CapableOf fly");
  auto expected = ids;
  expected.push_back(kKnowDelim);
  const auto first = ByteTokenizer::encode(out.pieces[0]);
  expected.insert(expected.end(), first.begin(), first.end());
  ASSERT_GE(out.ids.size(), expected.size());
  EXPECT_TRUE(std::equal(expected.begin(), expected.end(), out.ids.begin()));
  EXPECT_EQ(aug.augment(AugmentQuery{text, ids}, MemoryId::none).ids, ids);
  EXPECT_FALSE(aug.has_memory(MemoryId::plain_text));
}

TEST(PlainText, PassagesOf64Words) {
  std::string text;
  for (int i = 0; i < 150; ++i) text += "w" + std::to_string(i) + " ";
  const auto passages = chunk_passages(text);
  ASSERT_EQ(passages.size(), 3u);
  EXPECT_EQ(split_whitespace(passages[0].text).size(), 64u);
  EXPECT_EQ(split_whitespace(passages[2].text).size(), 22u);
  EXPECT_EQ(passages[1].id, kPlainTextIdBase + 1);

  KnowledgeStore store;
  KnowledgeBase kb(store, EmbedderSpec{});
  kb.set_plain_text(passages);
  kb.build_all();
  ASSERT_TRUE(kb.has_index(MemoryId::plain_text));
  const auto got = kb.retrieve_any(MemoryId::plain_text, "w70 w71 w72", 5, 1);
  ASSERT_EQ(got.pieces.size(), 1u);
  EXPECT_EQ(got.pieces[0].value_text, passages[1].text);
}

TEST(MemoryNames, RoundTrip) {
  for (int m = 0; m <= 8; ++m) EXPECT_EQ(static_cast<int>(parse_memory(memory_name(static_cast<MemoryId>(m)))), m);
  EXPECT_EQ(memory_name(MemoryId::all_categories), "union");
  EXPECT_EQ(memory_name(MemoryId::plain_text), "plaintext");
}

}  // namespace
}  // namespace kic
