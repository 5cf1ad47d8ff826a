#include "emea/metrics.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "emea/error.hpp"

namespace emea {

namespace {

void check_aligned(const TagSequences& gold, const TagSequences& pred) {
  if (gold.size() != pred.size()) {
    throw ContractError("metric: " + std::to_string(gold.size()) + " gold vs " +
                        std::to_string(pred.size()) + " predicted sentences");
  }
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i].size() != pred[i].size()) {
      throw ContractError("metric: sentence " + std::to_string(i) + " has " +
                          std::to_string(gold[i].size()) + " gold vs " +
                          std::to_string(pred[i].size()) + " predicted tags");
    }
  }
}

double harmonic(double p, double r) { return (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

TagSequences tags_of(const Corpus& c) {
  TagSequences out;
  out.reserve(c.size());
  for (const auto& s : c) out.push_back(s.tags);
  return out;
}

}  // namespace

std::vector<Span> bio_spans(const std::vector<std::string>& tags) {
  std::vector<Span> spans;
  bool open = false;
  Span current;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const std::string& t = tags[i];
    const bool begin = t.rfind("B-", 0) == 0;
    const bool inside = t.rfind("I-", 0) == 0;
    const std::string type = (begin || inside) ? t.substr(2) : "";
    if (inside && open && current.type == type) {
      current.end = i;
      continue;
    }
    if (open) spans.push_back(current);
    open = begin || inside;
    if (open) current = Span{type, i, i};
  }
  if (open) spans.push_back(current);
  return spans;
}

PrecisionRecall span_scores(const TagSequences& gold, const TagSequences& pred) {
  check_aligned(gold, pred);
  std::size_t n_gold = 0, n_pred = 0, n_hit = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const auto g = bio_spans(gold[i]);
    const auto p = bio_spans(pred[i]);
    const std::set<Span> gs(g.begin(), g.end());
    n_gold += g.size();
    n_pred += p.size();
    for (const auto& s : p) n_hit += gs.count(s);
  }
  PrecisionRecall out;
  if (n_gold == 0 && n_pred == 0) return {1.0, 1.0, 1.0};
  out.precision = n_pred ? static_cast<double>(n_hit) / static_cast<double>(n_pred) : 0.0;
  out.recall = n_gold ? static_cast<double>(n_hit) / static_cast<double>(n_gold) : 0.0;
  out.f1 = harmonic(out.precision, out.recall);
  return out;
}

double span_f1(const TagSequences& gold, const TagSequences& pred) {
  return span_scores(gold, pred).f1;
}

double span_f1(const Corpus& gold, const Corpus& pred) {
  if (gold.size() != pred.size()) {
    throw ContractError("span_f1: corpora differ in length (" + std::to_string(gold.size()) +
                        " vs " + std::to_string(pred.size()) + ")");
  }
  return span_f1(tags_of(gold), tags_of(pred));
}

double token_accuracy(const TagSequences& gold, const TagSequences& pred) {
  check_aligned(gold, pred);
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < gold.size(); ++i)
    for (std::size_t j = 0; j < gold[i].size(); ++j) {
      ++total;
      hit += gold[i][j] == pred[i][j];
    }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 1.0;
}

double token_f1(const TagSequences& gold, const TagSequences& pred) {
  check_aligned(gold, pred);
  struct Counts { std::size_t tp = 0, fp = 0, fn = 0; };
  std::map<std::string, Counts> per_tag;
  for (std::size_t i = 0; i < gold.size(); ++i)
    for (std::size_t j = 0; j < gold[i].size(); ++j) {
      const auto& g = gold[i][j];
      const auto& p = pred[i][j];
      if (g == p) {
        ++per_tag[g].tp;
      } else {
        ++per_tag[g].fn;
        ++per_tag[p].fp;
      }
    }
  if (per_tag.empty()) return 1.0;
  double total = 0.0;
  for (const auto& [tag, c] : per_tag) {
    const double p = (c.tp + c.fp) ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp) : 0.0;
    const double r = (c.tp + c.fn) ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn) : 0.0;
    total += harmonic(p, r);
  }
  return total / static_cast<double>(per_tag.size());
}

}  // namespace emea
