#include "emea/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include "emea/error.hpp"

namespace emea {

Vocabulary::Vocabulary() {
  add("[PAD]");
  add("[UNK]");
  add("[MASK]");
  for (char c = 'a'; c <= 'z'; ++c) {
    add(std::string(1, c));
    add("##" + std::string(1, c));
  }
}

int Vocabulary::add(const std::string& token) {
  auto it = index_.find(token);
  if (it != index_.end()) return it->second;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

bool Vocabulary::contains_word(const std::string& word) const {
  // Single characters collide with character pieces, which is harmless:
  // the piece and the word get the same id.
  return index_.count(word) > 0 && word.rfind("##", 0) != 0 && word.front() != '[';
}

Vocabulary Vocabulary::build(const std::vector<const Corpus*>& corpora, std::size_t max_words,
                             std::size_t min_count) {
  std::map<std::string, std::size_t> counts;
  for (const auto* c : corpora)
    for (const auto& s : *c)
      for (const auto& t : s.tokens) ++counts[t];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  // Frequency descending, then lexicographic for a deterministic order.
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  std::size_t added = 0;
  for (const auto& [word, count] : ranked) {
    if (added >= max_words || count < min_count) break;
    if (word.rfind("##", 0) == 0 || word.front() == '[') continue;
    if (v.index_.count(word)) continue;
    v.add(word);
    ++added;
  }
  return v;
}

EncodedSentence Vocabulary::encode(const std::vector<std::string>& words) const {
  EncodedSentence out;
  for (const auto& w : words) {
    out.word_starts.push_back(static_cast<int>(out.ids.size()));
    auto it = index_.find(w);
    if (it != index_.end() && w.rfind("##", 0) != 0) {
      out.ids.push_back(it->second);
      continue;
    }
    std::string kept = w;
    if (w.size() > 2 * kFallbackEdge) kept = w.substr(0, kFallbackEdge) + w.substr(w.size() - kFallbackEdge);
    for (std::size_t i = 0; i < kept.size(); ++i) {
      const std::string piece = (i == 0 ? "" : "##") + std::string(1, kept[i]);
      out.ids.push_back(id(piece));
    }
  }
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  for (const auto& t : tokens_) os << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DependencyError("vocabulary not found: " + path.string());
  Vocabulary v;
  std::vector<std::string> lines;
  for (std::string line; std::getline(is, line);) lines.push_back(line);
  if (lines.size() < v.tokens_.size()) throw LoadError(path.string() + ": truncated vocabulary");
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (lines[i] != v.tokens_[i]) {
      throw LoadError(path.string() + ":" + std::to_string(i + 1) + ": unexpected reserved token '" +
                      lines[i] + "'");
    }
  }
  for (std::size_t i = v.tokens_.size(); i < lines.size(); ++i) v.add(lines[i]);
  return v;
}

EncodedCorpus encode_corpus(const Vocabulary& vocab, const Corpus& corpus,
                            std::optional<TaskKind> task) {
  EncodedCorpus out;
  out.sentences.reserve(corpus.size());
  for (const auto& s : corpus) {
    out.sentences.push_back(vocab.encode(s.tokens));
    if (task) {
      if (s.tags.size() != s.tokens.size()) throw DataError("encode_corpus: sentence without tags");
      std::vector<int> ids;
      ids.reserve(s.tags.size());
      for (const auto& t : s.tags) ids.push_back(tag_index(*task, t));
      out.labels.push_back(std::move(ids));
    }
  }
  return out;
}

}  // namespace emea
