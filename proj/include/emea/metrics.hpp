#pragma once

#include <string>
#include <tuple>
#include <vector>

#include "emea/corpus.hpp"

namespace emea {

struct Span {
  std::string type;
  std::size_t begin = 0;  // first token
  std::size_t end = 0;    // last token, inclusive
  auto operator<=>(const Span&) const = default;
};

// BIO decoding. An I-X that does not continue an X span opens a new span
// (the usual lenient reading of predicted tag sequences).
std::vector<Span> bio_spans(const std::vector<std::string>& tags);

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

using TagSequences = std::vector<std::vector<std::string>>;

// Exact-match span scores. Precision is 0 with no predicted spans, recall is
// 0 with no gold spans; when both sides are empty the score is 1.
PrecisionRecall span_scores(const TagSequences& gold, const TagSequences& pred);
double span_f1(const TagSequences& gold, const TagSequences& pred);
double span_f1(const Corpus& gold, const Corpus& pred);

// Fraction of words with the gold tag.
double token_accuracy(const TagSequences& gold, const TagSequences& pred);
// Macro F1 over the tags occurring in gold or prediction.
double token_f1(const TagSequences& gold, const TagSequences& pred);

}  // namespace emea
