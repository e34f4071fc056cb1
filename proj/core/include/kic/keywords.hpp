#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace kic {

using StopwordSet = std::unordered_set<std::string>;

// English stopword list (the common NLTK list), lowercase.
const StopwordSet& default_stopwords();

// Plain text, one word per line; blank lines and lines starting with '#'
// are ignored.
StopwordSet load_stopwords(const std::filesystem::path& path);

struct Keyword {
  std::string phrase;
  double score = 0.0;

  bool operator==(const Keyword&) const = default;
};

// RAKE. Candidate phrases are maximal runs of non-stopword words, split at
// stopwords and punctuation. word score = degree / freq, where degree counts
// the word itself plus its co-occurrences inside candidate phrases; phrase
// score = sum of member word scores. Distinct phrases, ranked by score
// descending, ties by first occurrence.
// Throws InvalidArgument for empty or whitespace-only text.
std::vector<Keyword> extract_keywords(std::string_view text, const StopwordSet& stopwords);

}  // namespace kic
