#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "kic/knowledge_store.hpp"
#include "kic/training.hpp"

namespace kic {

// Knowledge-dependent toy suite. Every concept is a made-up word with one
// fact per category, each naming a different answer word from a shared
// pool. A task asks about one planted category; its answer is only
// recoverable by retrieving that category's fact, and the other
// categories' facts about the same concept supply the distractor choices.
//
// A separate block of reader concepts backs one "<category>_read" task per
// planted category. Training on those with each task pinned to its own
// category gives a backbone that already knows how to use every memory
// format, while the router still starts from nothing.
struct SyntheticSpec {
  std::uint64_t seed = 7;
  int train_concepts = 300;
  int heldout_concepts = 48;
  int reader_concepts = 120;
  int answer_pool = 64;
  int n_choices = 4;
  std::vector<KnowledgeCategory> planted = {kAllCategories.begin(), kAllCategories.end()};
  int templates_per_task = 2;

  void validate() const;
};

struct SyntheticSuite {
  KnowledgeStore store;  // sealed
  std::vector<TaskSpec> train_tasks;
  std::vector<TaskSpec> heldout_tasks;  // same task names, unseen concepts
  std::map<std::string, KnowledgeCategory> planted;  // task name -> category
  std::vector<TaskSpec> reader_tasks;
  std::map<std::string, int> reader_experts;  // reader task -> expert index
  std::vector<std::string> train_concepts;
  std::vector<std::string> heldout_concepts;
  std::vector<std::string> reader_concepts;
  std::vector<std::string> answer_pool;
  std::string plain_text;  // the same facts as prose, for the plain-text memory
};

SyntheticSuite make_knowledge_suite(const SyntheticSpec& spec);

// Name of the task that probes a category, e.g. "dictionary_qa".
std::string task_name_for(KnowledgeCategory category);
std::string reader_task_name_for(KnowledgeCategory category);

}  // namespace kic
