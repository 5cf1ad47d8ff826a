#pragma once

#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "emea/corpus.hpp"
#include "emea/ensemble.hpp"

namespace emea {

// Whitespace tokenizer with character fallback. Words seen often enough in
// the building corpus get their own id; any other word is spelled with
// character pieces ("c" for the first character, "##c" for the rest). Long
// unknown words keep their first and last kFallbackEdge characters so that
// inflection suffixes survive.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kMask = 2;
  static constexpr std::size_t kFallbackEdge = 3;

  Vocabulary();

  static Vocabulary build(const std::vector<const Corpus*>& corpora, std::size_t max_words,
                          std::size_t min_count);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  int id(const std::string& token) const;  // kUnk if absent
  bool contains_word(const std::string& word) const;
  // Ids that may replace a masked token (everything except specials).
  int first_regular_id() const { return 3; }

  EncodedSentence encode(const std::vector<std::string>& words) const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  int add(const std::string& token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// Tokenised corpus with aligned class ids per word (empty when unlabeled).
struct EncodedCorpus {
  std::vector<EncodedSentence> sentences;
  std::vector<std::vector<int>> labels;
};

EncodedCorpus encode_corpus(const Vocabulary& vocab, const Corpus& corpus,
                            std::optional<TaskKind> task = std::nullopt);

}  // namespace emea
