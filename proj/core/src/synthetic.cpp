#include "kic/synthetic.hpp"

#include <algorithm>
#include <array>
#include <set>

#include "kic/error.hpp"
#include "kic/rng.hpp"

namespace kic {
namespace {

constexpr std::string_view kConsonants = "bdfgklmnprstvz";
constexpr std::string_view kVowels = "aeiou";

std::string make_word(Rng& rng, int syllables, bool closed) {
  std::string w;
  for (int i = 0; i < syllables; ++i) {
    w.push_back(kConsonants[rng.below(kConsonants.size())]);
    w.push_back(kVowels[rng.below(kVowels.size())]);
  }
  if (closed) w.push_back(kConsonants[rng.below(kConsonants.size())]);
  return w;
}

std::vector<std::string> unique_words(Rng& rng, std::size_t n, int syllables, bool closed, std::set<std::string>& taken) {
  std::vector<std::string> out;
  while (out.size() < n) {
    std::string w = make_word(rng, syllables, closed);
    if (taken.insert(w).second) out.push_back(std::move(w));
  }
  return out;
}

struct Fact {
  std::string subject, relation, object;
};

Fact fact_for(KnowledgeCategory c, const std::string& term, const std::string& answer) {
  switch (c) {
    case KnowledgeCategory::dictionary: return {term, "definition", answer};
    case KnowledgeCategory::commonsense: return {term, "UsedFor", answer};
    case KnowledgeCategory::entity: return {term, "instance of", answer};
    case KnowledgeCategory::event: return {term, "xEffect", answer};
    case KnowledgeCategory::script: return {term, answer, "scene of " + term};
    case KnowledgeCategory::causality: return {term, "causes", answer};
  }
  return {};
}

std::string sentence_for(KnowledgeCategory c, const std::string& term, const std::string& answer) {
  switch (c) {
    case KnowledgeCategory::dictionary: return "The word " + term + " means " + answer + ".";
    case KnowledgeCategory::commonsense: return "People use " + term + " for " + answer + ".";
    case KnowledgeCategory::entity: return "A " + term + " is a kind of " + answer + ".";
    case KnowledgeCategory::event: return "After " + term + " people feel " + answer + ".";
    case KnowledgeCategory::script: return "In the scene " + term + " does " + answer + ".";
    case KnowledgeCategory::causality: return "Too much " + term + " leads to " + answer + ".";
  }
  return {};
}

std::vector<PromptTemplate> templates_for(KnowledgeCategory c) {
  switch (c) {
    case KnowledgeCategory::dictionary:
      return {{"meaning", "What is the meaning of {concept}?", "{target}"},
              {"define", "Define the word {concept}.", "{target}"},
              {"gloss", "{concept} means what?", "{target}"}};
    case KnowledgeCategory::commonsense:
      return {{"used_for", "What is {concept} used for?", "{target}"},
              {"use_of", "Name a use of {concept}.", "{target}"},
              {"purpose", "Why would someone want {concept}?", "{target}"}};
    case KnowledgeCategory::entity:
      return {{"kind", "Which kind of thing is {concept}?", "{target}"},
              {"instance", "{concept} is an instance of what?", "{target}"},
              {"class", "What class does {concept} belong to?", "{target}"}};
    case KnowledgeCategory::event:
      return {{"after", "What happens to people after {concept}?", "{target}"},
              {"feel", "How does {concept} make someone feel?", "{target}"},
              {"effect_x", "What is the effect on someone of {concept}?", "{target}"}};
    case KnowledgeCategory::script:
      return {{"scene", "In the story, what does {concept} do?", "{target}"},
              {"action", "What action does {concept} perform?", "{target}"},
              {"role", "What is the role of {concept} in the scene?", "{target}"}};
    case KnowledgeCategory::causality:
      return {{"lead_to", "What does {concept} lead to?", "{target}"},
              {"effect", "What is the effect of too much {concept}?", "{target}"},
              {"result", "{concept} will result in what?", "{target}"}};
  }
  return {};
}

}  // namespace

std::string task_name_for(KnowledgeCategory category) { return std::string(category_name(category)) + "_qa"; }
std::string reader_task_name_for(KnowledgeCategory category) { return std::string(category_name(category)) + "_read"; }

void SyntheticSpec::validate() const {
  if (train_concepts < 1 || heldout_concepts < 0 || reader_concepts < 0)
    throw InvalidArgument("synthetic suite needs concepts");
  if (planted.empty()) throw InvalidArgument("synthetic suite needs at least one planted category");
  if (n_choices < 2) throw InvalidArgument("synthetic suite needs n_choices >= 2");
  if (answer_pool < kNumCategories + 1 || answer_pool < n_choices)
    throw InvalidArgument("answer_pool must exceed the category count and n_choices");
  if (templates_per_task < 1 || templates_per_task > 3) throw InvalidArgument("templates_per_task must be 1..3");
}

SyntheticSuite make_knowledge_suite(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(mix64(spec.seed, 0x5717));
  std::set<std::string> taken;
  SyntheticSuite suite;
  suite.answer_pool = unique_words(rng, static_cast<std::size_t>(spec.answer_pool), 2, true, taken);
  const std::size_t n_train = static_cast<std::size_t>(spec.train_concepts);
  const std::size_t n_eval = n_train + static_cast<std::size_t>(spec.heldout_concepts);
  std::vector<std::string> concepts =
      unique_words(rng, n_eval + static_cast<std::size_t>(spec.reader_concepts), 3, false, taken);
  suite.train_concepts.assign(concepts.begin(), concepts.begin() + static_cast<std::ptrdiff_t>(n_train));
  suite.heldout_concepts.assign(concepts.begin() + static_cast<std::ptrdiff_t>(n_train),
                                concepts.begin() + static_cast<std::ptrdiff_t>(n_eval));
  suite.reader_concepts.assign(concepts.begin() + static_cast<std::ptrdiff_t>(n_eval), concepts.end());

  // answers[concept][category ordinal - 1], all distinct per concept.
  std::vector<std::array<std::string, kNumCategories>> answers(concepts.size());
  std::vector<std::string> prose;
  for (std::size_t i = 0; i < concepts.size(); ++i) {
    std::vector<std::string> pool = suite.answer_pool;
    rng.shuffle(pool.begin(), pool.end());
    for (int k = 0; k < kNumCategories; ++k) answers[i][static_cast<std::size_t>(k)] = pool[static_cast<std::size_t>(k)];
    for (const KnowledgeCategory c : kAllCategories) {
      const std::string& a = answers[i][static_cast<std::size_t>(ordinal(c) - 1)];
      const Fact f = fact_for(c, concepts[i], a);
      suite.store.add_triple(c, f.subject, f.relation, f.object);
      prose.push_back(sentence_for(c, concepts[i], a));
    }
  }
  rng.shuffle(prose.begin(), prose.end());
  for (const auto& s : prose) {
    if (!suite.plain_text.empty()) suite.plain_text.push_back(' ');
    suite.plain_text += s;
  }
  suite.store.seal();

  for (const KnowledgeCategory c : spec.planted) {
    TaskSpec base;
    base.name = task_name_for(c);
    base.category_hint = std::string(category_name(c));
    auto tpls = templates_for(c);
    tpls.resize(static_cast<std::size_t>(spec.templates_per_task));
    base.templates = tpls;
    suite.planted[base.name] = c;
    TaskSpec train = base, held = base, reader = base;
    reader.name = reader_task_name_for(c);
    suite.reader_experts[reader.name] = ordinal(c);
    for (std::size_t i = 0; i < concepts.size(); ++i) {
      const auto& ans = answers[i];
      TaskExample ex;
      ex.fields["concept"] = concepts[i];
      ex.target = ans[static_cast<std::size_t>(ordinal(c) - 1)];
      // Distractors: the concept's answers for the other planted categories,
      // then random pool words.
      std::vector<std::string> choices{ex.target};
      auto push = [&choices, &spec](const std::string& w) {
        if (static_cast<int>(choices.size()) < spec.n_choices &&
            std::find(choices.begin(), choices.end(), w) == choices.end())
          choices.push_back(w);
      };
      for (const KnowledgeCategory o : spec.planted)
        if (o != c) push(ans[static_cast<std::size_t>(ordinal(o) - 1)]);
      while (static_cast<int>(choices.size()) < spec.n_choices)
        push(suite.answer_pool[rng.below(suite.answer_pool.size())]);
      rng.shuffle(choices.begin(), choices.end());
      ex.answer_choices = std::move(choices);
      (i < n_train ? train : i < n_eval ? held : reader).examples.push_back(std::move(ex));
    }
    suite.train_tasks.push_back(std::move(train));
    suite.heldout_tasks.push_back(std::move(held));
    if (!reader.examples.empty()) suite.reader_tasks.push_back(std::move(reader));
  }
  return suite;
}

}  // namespace kic
