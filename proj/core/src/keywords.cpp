#include "kic/keywords.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <unordered_map>

#include "kic/error.hpp"
#include "kic/text.hpp"

namespace kic {
namespace {

bool is_word_char(char c) {
  return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '\'' ||
         static_cast<unsigned char>(c) >= 0x80;
}

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

}  // namespace

const StopwordSet& default_stopwords() {
  static const StopwordSet words = {
      "i", "me", "my", "myself", "we", "our", "ours", "ourselves", "you", "you're", "you've",
      "you'll", "you'd", "your", "yours", "yourself", "yourselves", "he", "him", "his", "himself",
      "she", "she's", "her", "hers", "herself", "it", "it's", "its", "itself", "they", "them",
      "their", "theirs", "themselves", "what", "which", "who", "whom", "this", "that", "that'll",
      "these", "those", "am", "is", "are", "was", "were", "be", "been", "being", "have", "has",
      "had", "having", "do", "does", "did", "doing", "a", "an", "the", "and", "but", "if", "or",
      "because", "as", "until", "while", "of", "at", "by", "for", "with", "about", "against",
      "between", "into", "through", "during", "before", "after", "above", "below", "to", "from",
      "up", "down", "in", "out", "on", "off", "over", "under", "again", "further", "then", "once",
      "here", "there", "when", "where", "why", "how", "all", "any", "both", "each", "few", "more",
      "most", "other", "some", "such", "no", "nor", "not", "only", "own", "same", "so", "than",
      "too", "very", "s", "t", "can", "will", "just", "don", "don't", "should", "should've", "now",
      "d", "ll", "m", "o", "re", "ve", "y", "ain", "aren", "aren't", "couldn", "couldn't", "didn",
      "didn't", "doesn", "doesn't", "hadn", "hadn't", "hasn", "hasn't", "haven", "haven't", "isn",
      "isn't", "ma", "mightn", "mightn't", "mustn", "mustn't", "needn", "needn't", "shan", "shan't",
      "shouldn", "shouldn't", "wasn", "wasn't", "weren", "weren't", "won", "won't", "wouldn",
      "wouldn't"};
  return words;
}

StopwordSet load_stopwords(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFound("cannot open stopword list " + path.string());
  StopwordSet out;
  std::string line;
  while (std::getline(in, line)) {
    const std::string w = to_lower_ascii(trim(line));
    if (w.empty() || w.front() == '#') continue;
    out.insert(w);
  }
  return out;
}

std::vector<Keyword> extract_keywords(std::string_view text, const StopwordSet& stopwords) {
  if (is_blank(text)) throw InvalidArgument("keyword extraction needs non-empty text");
  const std::string lowered = to_lower_ascii(text);

  // Candidate phrases: word runs broken by stopwords or punctuation.
  std::vector<std::vector<std::string>> phrases;
  std::vector<std::string> current;
  auto close_phrase = [&]() {
    if (!current.empty()) phrases.push_back(std::move(current));
    current.clear();
  };
  std::string word;
  auto close_word = [&]() {
    if (word.empty()) return;
    // Apostrophes at the word edges are quotes, not contractions.
    while (!word.empty() && word.front() == '\'') word.erase(word.begin());
    while (!word.empty() && word.back() == '\'') word.pop_back();
    if (word.empty()) return;
    if (stopwords.contains(word)) {
      close_phrase();
    } else {
      current.push_back(word);
    }
    word.clear();
  };
  for (const char c : lowered) {
    if (is_word_char(c)) {
      word.push_back(c);
    } else {
      close_word();
      if (!is_space(c)) close_phrase();
    }
  }
  close_word();
  close_phrase();

  std::unordered_map<std::string, double> freq;
  std::unordered_map<std::string, double> degree;
  for (const auto& p : phrases) {
    for (const auto& w : p) {
      freq[w] += 1.0;
      degree[w] += static_cast<double>(p.size());
    }
  }

  std::vector<Keyword> ranked;
  std::map<std::string, std::size_t> seen;
  for (const auto& p : phrases) {
    std::string phrase = join(p, " ");
    if (seen.contains(phrase)) continue;
    double score = 0.0;
    for (const auto& w : p) score += degree[w] / freq[w];
    seen.emplace(phrase, ranked.size());
    ranked.push_back({std::move(phrase), score});
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Keyword& a, const Keyword& b) { return a.score > b.score; });
  return ranked;
}

}  // namespace kic
