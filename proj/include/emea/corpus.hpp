#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace emea {

enum class TaskKind { ner, pos };

const char* to_string(TaskKind task);
TaskKind task_kind_from_string(const std::string& s);
// Label inventory; index in this list is the class id used by the model.
const std::vector<std::string>& tag_set(TaskKind task);
int tag_index(TaskKind task, const std::string& tag);

// Word categories of the template grammar. The POS tag set is exactly these.
enum class Category { det, adj, noun, verb, adp, propn, conj, punct };
inline constexpr std::size_t kCategoryCount = 8;
const char* category_name(Category c);

struct TaggedSentence {
  std::vector<std::string> tokens;
  std::vector<std::string> tags;  // empty for unlabeled text

  bool operator==(const TaggedSentence&) const = default;
};

using Corpus = std::vector<TaggedSentence>;

// Generative description of one language variety. A variety shares the
// family lexicon (drawn from lexicon_seed) and sentence skeletons with its
// parent and differs by character substitutions in stems, inflection
// suffixes, replaced stems and adjective order.
struct VarietySpec {
  std::string name;
  std::optional<std::string> parent;
  double divergence = 0.0;
  std::size_t vocab_size = 400;  // content stems in the family lexicon
  // category name -> inflection suffixes (one per grammatical slot)
  std::map<std::string, std::vector<std::string>> suffix_table;
  std::map<char, char> char_shift;
  double lexical_replacement_rate = 0.0;
  bool adjective_after_noun = false;
  std::uint64_t lexicon_seed = 0;

  void validate() const;
  bool operator==(const VarietySpec&) const = default;
};

// Root variety: default suffix table, no perturbation.
VarietySpec make_root_spec(std::string name, std::uint64_t lexicon_seed,
                           std::size_t vocab_size = 400);

// Variety 0 is `root`; variety i > 0 derives from the root with divergence
// schedule[i]. Each feature has one draw u shared by every variety. Character
// shifts apply when u < d, so they are nested and token overlap with the root
// falls with d. Stem replacements and suffix changes apply when u falls in
// [r/2, 3r/2) for their rate r: close divergences share part of these
// changes, distant ones none.
std::vector<VarietySpec> generate_continuum(const VarietySpec& root, std::size_t n_varieties,
                                            const std::vector<double>& divergence_schedule,
                                            std::uint64_t seed);

// Sentences from the template grammar. Sentence skeletons depend only on
// `seed`, surface forms only on `spec`. labels selects the tag layer; nullopt
// yields unlabeled text.
Corpus generate_corpus(const VarietySpec& spec, std::size_t n_sentences,
                       std::optional<TaskKind> labels, std::uint64_t seed);

bool is_well_formed_bio(const std::vector<std::string>& tags);

// --- files ---------------------------------------------------------------

struct ColumnReadResult {
  Corpus corpus;
  std::vector<std::string> warnings;  // e.g. malformed BIO sequences
};

// `token<TAB>tag` per line, blank line between sentences, UTF-8.
void write_column_file(const std::filesystem::path& path, const Corpus& corpus);
ColumnReadResult read_column_file(const std::filesystem::path& path);

// One whitespace-separated sentence per line.
void write_text_file(const std::filesystem::path& path, const Corpus& corpus);
Corpus read_text_file(const std::filesystem::path& path);

// Structured document (JSON) holding a list of variety specs.
std::string varieties_to_json(const std::vector<VarietySpec>& specs);
std::vector<VarietySpec> varieties_from_json(const std::string& text);

// Fraction of tokens in `corpus` whose surface form appears in `reference`.
double token_overlap(const Corpus& corpus, const Corpus& reference);

}  // namespace emea
