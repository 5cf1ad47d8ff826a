#include "emea/corpus.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "emea/error.hpp"

namespace emea {

namespace {

constexpr std::string_view kVowels = "aeiou";

// A feature with uniform draw u is active at rate r iff u lies in a window of
// width r centred at r. Exactly a fraction r of features is active, and two
// rates share only part of their features (r1 < r2 overlap iff r2 < 3*r1).
bool in_window(double u, double rate) {
  if (rate <= 0.0) return false;
  double lo = 0.5 * rate, hi = 1.5 * rate;
  if (hi > 1.0) {
    lo = 1.0 - rate;
    hi = 1.0;
  }
  return u >= lo && u < hi;
}
constexpr std::string_view kConsonants = "bdfgklmnprstvz";

const std::vector<std::string> kNerTags = {"O",     "B-PER", "I-PER", "B-LOC",
                                           "I-LOC", "B-ORG", "I-ORG"};
const std::vector<std::string> kPosTags = {"DET", "ADJ",  "NOUN", "VERB",
                                           "ADP", "PROPN", "CONJ", "PUNCT"};

// Lexicon sections. Content sections share vocab_size; function-word
// sections have fixed sizes.
enum class Section { det, adp, conj, adj, noun, verb, first_name, surname, place, org, org_marker,
                     place_marker };
constexpr std::size_t kSectionCount = 12;

Category section_category(Section s) {
  switch (s) {
    case Section::det: return Category::det;
    case Section::adp: return Category::adp;
    case Section::conj: return Category::conj;
    case Section::adj: return Category::adj;
    case Section::noun: return Category::noun;
    case Section::verb: return Category::verb;
    default: return Category::propn;
  }
}

struct Lexicon {
  // [section][stem] -> root stem and its replacement candidate.
  std::array<std::vector<std::string>, kSectionCount> stems;
  std::array<std::vector<std::string>, kSectionCount> replacements;
  std::array<std::vector<double>, kSectionCount> replace_draw;
};

std::string make_stem(std::mt19937_64& rng, int min_syll, int max_syll) {
  std::uniform_int_distribution<int> syll(min_syll, max_syll);
  std::uniform_int_distribution<std::size_t> vowel(0, kVowels.size() - 1);
  std::uniform_int_distribution<std::size_t> cons(0, kConsonants.size() - 1);
  std::bernoulli_distribution coda(0.3);
  std::string out;
  const int n = syll(rng);
  for (int i = 0; i < n; ++i) {
    out += kConsonants[cons(rng)];
    out += kVowels[vowel(rng)];
    if (coda(rng)) out += kConsonants[cons(rng)];
  }
  return out;
}

std::array<std::size_t, kSectionCount> section_sizes(std::size_t vocab_size) {
  auto share = [&](double f) { return std::max<std::size_t>(4, static_cast<std::size_t>(f * vocab_size)); };
  return {6, 8, 3, share(0.15), share(0.32), share(0.20), share(0.08), share(0.08), share(0.09),
          share(0.08), 4, 3};
}

Lexicon build_lexicon(std::uint64_t seed, std::size_t vocab_size) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto sizes = section_sizes(vocab_size);
  Lexicon lex;
  std::unordered_set<std::string> used;
  for (std::size_t s = 0; s < kSectionCount; ++s) {
    const bool function_word = s <= static_cast<std::size_t>(Section::conj);
    const int lo = function_word ? 1 : 2;
    const int hi = function_word ? 1 : 3;
    for (std::size_t k = 0; k < sizes[s]; ++k) {
      std::string stem;
      do stem = make_stem(rng, lo, hi);
      while (!used.insert(stem).second);
      std::string repl;
      do repl = make_stem(rng, lo, hi);
      while (!used.insert(repl).second);
      lex.stems[s].push_back(stem);
      lex.replacements[s].push_back(repl);
      lex.replace_draw[s].push_back(unit(rng));
    }
  }
  return lex;
}

// Skeleton word: what to say, independent of variety.
struct Slot {
  Section section;
  std::size_t stem;
  std::size_t suffix;  // inflection slot for inflecting categories
  std::string ner;
  bool punct = false;
  std::string punct_form;
  int np_group = -1;  // words of one noun phrase share a group id
};

std::size_t zipf(std::mt19937_64& rng, std::size_t n) {
  // Inverse CDF of p(k) ∝ 1/(k+1) via cumulative weights.
  double total = 0.0;
  for (std::size_t k = 0; k < n; ++k) total += 1.0 / static_cast<double>(k + 1);
  std::uniform_real_distribution<double> unit(0.0, total);
  double u = unit(rng);
  for (std::size_t k = 0; k < n; ++k) {
    u -= 1.0 / static_cast<double>(k + 1);
    if (u <= 0.0) return k;
  }
  return n - 1;
}

class SkeletonBuilder {
 public:
  SkeletonBuilder(std::mt19937_64& rng, const std::array<std::size_t, kSectionCount>& sizes)
      : rng_(rng), sizes_(sizes) {}

  std::vector<Slot> sentence() {
    out_.clear();
    next_group_ = 0;
    clause();
    if (chance(0.25)) {
      if (chance(0.5)) punct(",");
      word(Section::conj, "O");
      clause();
    }
    punct(".");
    return out_;
  }

 private:
  bool chance(double p) { return std::bernoulli_distribution(p)(rng_); }
  std::size_t pick(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }

  void word(Section s, std::string ner, std::size_t suffix_slots = 1, int group = -1) {
    Slot slot{.section = s,
              .stem = zipf(rng_, sizes_[static_cast<std::size_t>(s)]),
              .suffix = pick(suffix_slots),
              .ner = std::move(ner),
              .punct = false,
              .punct_form = {},
              .np_group = group};
    out_.push_back(std::move(slot));
  }

  void punct(const std::string& form) {
    Slot slot{.section = Section::det, .stem = 0, .suffix = 0, .ner = "O", .punct = true,
              .punct_form = form};
    out_.push_back(std::move(slot));
  }

  void noun_phrase() {
    const int g = next_group_++;
    if (chance(0.8)) word(Section::det, "O", 1, g);
    const double r = std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
    const int n_adj = r < 0.5 ? 0 : (r < 0.85 ? 1 : 2);
    for (int i = 0; i < n_adj; ++i) word(Section::adj, "O", 2, g);
    word(Section::noun, "O", 3, g);
  }

  void person() {
    word(Section::first_name, "B-PER");
    if (chance(0.8)) word(Section::surname, "I-PER");
  }

  void place() {
    word(Section::place, "B-LOC");
    if (chance(0.3)) word(Section::place_marker, "I-LOC");
  }

  void organisation() {
    word(Section::org, "B-ORG");
    word(Section::org_marker, "I-ORG");
  }

  void argument(double p_np, double p_per, double p_org) {
    const double r = std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
    if (r < p_np) noun_phrase();
    else if (r < p_np + p_per) person();
    else if (r < p_np + p_per + p_org) organisation();
    else place();
  }

  void clause() {
    argument(0.55, 0.25, 0.15);
    word(Section::verb, "O", 3);
    if (chance(0.8)) argument(0.6, 0.15, 0.15);
    if (chance(0.5)) {
      word(Section::adp, "O");
      if (chance(0.5)) place();
      else noun_phrase();
    }
  }

  std::mt19937_64& rng_;
  const std::array<std::size_t, kSectionCount>& sizes_;
  std::vector<Slot> out_;
  int next_group_ = 0;
};

std::string category_key(Category c) { return category_name(c); }

std::string realise_stem(const VarietySpec& spec, const Lexicon& lex, Section s, std::size_t k) {
  const auto si = static_cast<std::size_t>(s);
  const bool replaced = in_window(lex.replace_draw[si][k], spec.lexical_replacement_rate);
  std::string stem = replaced ? lex.replacements[si][k] : lex.stems[si][k];
  for (auto& ch : stem) {
    auto it = spec.char_shift.find(ch);
    if (it != spec.char_shift.end()) ch = it->second;
  }
  return stem;
}

std::string tag_for(const Slot& slot, TaskKind task) {
  if (task == TaskKind::ner) return slot.ner;
  if (slot.punct) return "PUNCT";
  return category_name(section_category(slot.section));
}

std::string random_suffix(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> len(1, 3);
  std::uniform_int_distribution<std::size_t> v(0, kVowels.size() - 1);
  std::uniform_int_distribution<std::size_t> c(0, kConsonants.size() - 1);
  std::string s;
  const int n = len(rng);
  for (int i = 0; i < n; ++i) s += (i % 2 == 0) ? kVowels[v(rng)] : kConsonants[c(rng)];
  return s;
}

}  // namespace

const char* to_string(TaskKind task) { return task == TaskKind::ner ? "ner" : "pos"; }

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "ner") return TaskKind::ner;
  if (s == "pos") return TaskKind::pos;
  throw ConfigError("unknown task '" + s + "' (expected ner or pos)");
}

const std::vector<std::string>& tag_set(TaskKind task) {
  return task == TaskKind::ner ? kNerTags : kPosTags;
}

int tag_index(TaskKind task, const std::string& tag) {
  const auto& tags = tag_set(task);
  auto it = std::find(tags.begin(), tags.end(), tag);
  if (it == tags.end()) {
    throw DataError("tag '" + tag + "' is not in the " + to_string(task) + " tag set");
  }
  return static_cast<int>(it - tags.begin());
}

const char* category_name(Category c) {
  switch (c) {
    case Category::det: return "DET";
    case Category::adj: return "ADJ";
    case Category::noun: return "NOUN";
    case Category::verb: return "VERB";
    case Category::adp: return "ADP";
    case Category::propn: return "PROPN";
    case Category::conj: return "CONJ";
    case Category::punct: return "PUNCT";
  }
  return "?";
}

void VarietySpec::validate() const {
  auto in_unit = [&](double v, const char* field) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ConfigError("variety '" + name + "': " + field + " = " + std::to_string(v) +
                        " outside [0,1]");
    }
  };
  in_unit(divergence, "divergence");
  in_unit(lexical_replacement_rate, "lexical_replacement_rate");
  if (name.empty()) throw ConfigError("variety with empty name");
  if (vocab_size < 10) throw ConfigError("variety '" + name + "': vocab_size must be >= 10");
  for (const char* key : {"NOUN", "VERB", "ADJ"}) {
    auto it = suffix_table.find(key);
    if (it == suffix_table.end() || it->second.empty()) {
      throw ConfigError("variety '" + name + "': suffix table lacks " + key);
    }
  }
}

VarietySpec make_root_spec(std::string name, std::uint64_t lexicon_seed, std::size_t vocab_size) {
  VarietySpec spec;
  spec.name = std::move(name);
  spec.vocab_size = vocab_size;
  spec.lexicon_seed = lexicon_seed;
  spec.suffix_table = {{"NOUN", {"a", "or", "en"}}, {"VERB", {"ir", "at", "ode"}},
                       {"ADJ", {"ig", "isk"}}};
  return spec;
}

std::vector<VarietySpec> generate_continuum(const VarietySpec& root, std::size_t n_varieties,
                                            const std::vector<double>& divergence_schedule,
                                            std::uint64_t seed) {
  root.validate();
  if (n_varieties < 2) throw ConfigError("continuum needs at least 2 varieties");
  if (divergence_schedule.size() != n_varieties) {
    throw ConfigError("continuum: schedule has " + std::to_string(divergence_schedule.size()) +
                      " entries for " + std::to_string(n_varieties) + " varieties");
  }
  for (double d : divergence_schedule) {
    if (!(d >= 0.0 && d <= 1.0)) {
      throw ConfigError("continuum: divergence " + std::to_string(d) + " outside [0,1]");
    }
  }

  // One threshold draw per feature, shared by every variety.
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  struct Shift { char from, to; double u; };
  std::vector<Shift> shifts;
  for (auto group : {kVowels, kConsonants}) {
    for (char c : group) {
      char to;
      do to = group[std::uniform_int_distribution<std::size_t>(0, group.size() - 1)(rng)];
      while (to == c);
      shifts.push_back({c, to, unit(rng)});
    }
  }
  struct SuffixChange { std::string category; std::size_t slot; std::string form; double u; };
  std::vector<SuffixChange> suffix_changes;
  for (const auto& [cat, forms] : root.suffix_table) {
    for (std::size_t i = 0; i < forms.size(); ++i) {
      std::string form = random_suffix(rng);
      suffix_changes.push_back({cat, i, form, unit(rng)});
    }
  }
  const double order_draw = unit(rng);

  std::vector<VarietySpec> out;
  out.push_back(root);
  out[0].divergence = divergence_schedule[0];
  for (std::size_t v = 1; v < n_varieties; ++v) {
    const double d = divergence_schedule[v];
    VarietySpec spec = root;
    spec.name = root.name + "_" + std::to_string(v);
    spec.parent = root.name;
    spec.divergence = d;
    spec.lexical_replacement_rate = std::min(1.0, root.lexical_replacement_rate + 0.5 * d);
    spec.char_shift.clear();
    for (const auto& s : shifts)
      if (s.u < d) spec.char_shift[s.from] = s.to;
    for (const auto& c : suffix_changes)
      if (in_window(c.u, d)) spec.suffix_table[c.category][c.slot] = c.form;
    spec.adjective_after_noun = root.adjective_after_noun != (order_draw < d);
    out.push_back(std::move(spec));
  }
  return out;
}

Corpus generate_corpus(const VarietySpec& spec, std::size_t n_sentences,
                       std::optional<TaskKind> labels, std::uint64_t seed) {
  spec.validate();
  const Lexicon lex = build_lexicon(spec.lexicon_seed, spec.vocab_size);
  const auto sizes = section_sizes(spec.vocab_size);
  std::mt19937_64 rng(seed);
  SkeletonBuilder builder(rng, sizes);
  Corpus corpus;
  corpus.reserve(n_sentences);
  for (std::size_t n = 0; n < n_sentences; ++n) {
    std::vector<Slot> slots = builder.sentence();
    if (spec.adjective_after_noun) {
      // DET ADJ* NOUN -> DET NOUN ADJ*
      for (std::size_t i = 0; i < slots.size(); ++i) {
        if (slots[i].section != Section::adj || slots[i].punct) continue;
        std::size_t j = i;
        while (j < slots.size() && !slots[j].punct && slots[j].section == Section::adj) ++j;
        if (j < slots.size() && slots[j].section == Section::noun && !slots[j].punct) {
          std::rotate(slots.begin() + static_cast<long>(i), slots.begin() + static_cast<long>(j),
                      slots.begin() + static_cast<long>(j + 1));
        }
        i = j;
      }
    }
    TaggedSentence sentence;
    for (const auto& slot : slots) {
      if (slot.punct) {
        sentence.tokens.push_back(slot.punct_form);
      } else {
        std::string form = realise_stem(spec, lex, slot.section, slot.stem);
        const Category cat = section_category(slot.section);
        auto it = spec.suffix_table.find(category_key(cat));
        if (it != spec.suffix_table.end() && !it->second.empty()) {
          form += it->second[slot.suffix % it->second.size()];
        }
        sentence.tokens.push_back(std::move(form));
      }
      if (labels) sentence.tags.push_back(tag_for(slot, *labels));
    }
    corpus.push_back(std::move(sentence));
  }
  return corpus;
}

bool is_well_formed_bio(const std::vector<std::string>& tags) {
  std::string prev = "O";
  for (const auto& t : tags) {
    if (t.rfind("I-", 0) == 0) {
      const std::string type = t.substr(2);
      if (prev != "B-" + type && prev != "I-" + type) return false;
    } else if (t != "O" && t.rfind("B-", 0) != 0) {
      return false;
    }
    prev = t;
  }
  return true;
}

void write_column_file(const std::filesystem::path& path, const Corpus& corpus) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  for (const auto& s : corpus) {
    if (s.tokens.size() != s.tags.size()) {
      throw DataError("column file: sentence with " + std::to_string(s.tokens.size()) +
                      " tokens and " + std::to_string(s.tags.size()) + " tags");
    }
    for (std::size_t i = 0; i < s.tokens.size(); ++i) os << s.tokens[i] << '\t' << s.tags[i] << '\n';
    os << '\n';
  }
}

ColumnReadResult read_column_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  ColumnReadResult result;
  TaggedSentence current;
  std::size_t sentence_start = 1;
  auto flush = [&](std::size_t line_no) {
    if (current.tokens.empty()) return;
    const bool looks_bio = std::any_of(current.tags.begin(), current.tags.end(), [](const std::string& t) {
      return t.rfind("B-", 0) == 0 || t.rfind("I-", 0) == 0;
    });
    if (looks_bio && !is_well_formed_bio(current.tags)) {
      result.warnings.push_back(path.string() + ":" + std::to_string(sentence_start) +
                                ": malformed BIO sequence");
    }
    result.corpus.push_back(std::move(current));
    current = TaggedSentence{};
    sentence_start = line_no + 1;
  };
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      flush(line_no);
      continue;
    }
    if (current.tokens.empty()) sentence_start = line_no;
    const auto fields = std::count(line.begin(), line.end(), '\t') + 1;
    const auto tab = line.find('\t');
    if (fields != 2 || tab == 0 || tab + 1 == line.size()) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected 2 fields, got " +
                       std::to_string(fields));
    }
    current.tokens.push_back(line.substr(0, tab));
    current.tags.push_back(line.substr(tab + 1));
  }
  flush(line_no);
  return result;
}

void write_text_file(const std::filesystem::path& path, const Corpus& corpus) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  for (const auto& s : corpus) {
    for (std::size_t i = 0; i < s.tokens.size(); ++i) os << (i ? " " : "") << s.tokens[i];
    os << '\n';
  }
}

Corpus read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  Corpus out;
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ss(line);
    TaggedSentence s;
    for (std::string tok; ss >> tok;) s.tokens.push_back(tok);
    if (!s.tokens.empty()) out.push_back(std::move(s));
  }
  return out;
}

std::string varieties_to_json(const std::vector<VarietySpec>& specs) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& s : specs) {
    nlohmann::ordered_json j;
    j["name"] = s.name;
    j["parent"] = s.parent ? nlohmann::ordered_json(*s.parent) : nlohmann::ordered_json(nullptr);
    j["divergence"] = s.divergence;
    j["vocab_size"] = s.vocab_size;
    j["suffix_table"] = s.suffix_table;
    nlohmann::ordered_json shift = nlohmann::ordered_json::object();
    for (const auto& [from, to] : s.char_shift) shift[std::string(1, from)] = std::string(1, to);
    j["char_shift"] = shift;
    j["lexical_replacement_rate"] = s.lexical_replacement_rate;
    j["adjective_after_noun"] = s.adjective_after_noun;
    j["lexicon_seed"] = s.lexicon_seed;
    arr.push_back(std::move(j));
  }
  return arr.dump(2) + "\n";
}

std::vector<VarietySpec> varieties_from_json(const std::string& text) {
  std::vector<VarietySpec> out;
  try {
    const auto arr = nlohmann::json::parse(text);
    for (const auto& j : arr) {
      static const std::set<std::string> known = {
          "name", "parent", "divergence", "vocab_size", "suffix_table", "char_shift",
          "lexical_replacement_rate", "adjective_after_noun", "lexicon_seed"};
      for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) throw ConfigError("variety spec: unknown key '" + key + "'");
      }
      VarietySpec s;
      s.name = j.at("name").get<std::string>();
      if (!j.at("parent").is_null()) s.parent = j.at("parent").get<std::string>();
      s.divergence = j.at("divergence").get<double>();
      s.vocab_size = j.at("vocab_size").get<std::size_t>();
      s.suffix_table = j.at("suffix_table").get<std::map<std::string, std::vector<std::string>>>();
      for (const auto& [from, to] : j.at("char_shift").items()) {
        const auto t = to.get<std::string>();
        if (from.size() != 1 || t.size() != 1) throw ConfigError("variety spec: char_shift entries must be single characters");
        s.char_shift[from[0]] = t[0];
      }
      s.lexical_replacement_rate = j.at("lexical_replacement_rate").get<double>();
      s.adjective_after_noun = j.at("adjective_after_noun").get<bool>();
      s.lexicon_seed = j.at("lexicon_seed").get<std::uint64_t>();
      s.validate();
      out.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("variety spec: ") + e.what());
  }
  return out;
}

double token_overlap(const Corpus& corpus, const Corpus& reference) {
  std::unordered_set<std::string> ref;
  for (const auto& s : reference) ref.insert(s.tokens.begin(), s.tokens.end());
  std::size_t total = 0, hit = 0;
  for (const auto& s : corpus) {
    for (const auto& t : s.tokens) {
      ++total;
      hit += ref.count(t);
    }
  }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

}  // namespace emea
