#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "emea/ensemble.hpp"
#include "emea/model.hpp"

namespace fixtures {

inline emea::ModelConfig tiny_config(std::size_t d_model = 8, std::size_t n_tags = 5) {
  emea::ModelConfig c;
  c.vocab_size = 30;
  c.d_model = d_model;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 2 * d_model;
  c.d_adapter = d_model / 4 > 0 ? d_model / 4 : 1;
  c.max_len = 32;
  c.n_tags = n_tags;
  return c;
}

// Adapters straight from init are the identity; push every parameter off its
// initial value so that different adapters actually disagree.
inline void perturb(emea::AdapterParams& a, std::uint64_t seed, float scale = 0.4f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> d(-scale, scale);
  a.for_each_parameter([&](const std::string&, emea::Tensor& t) {
    for (auto& v : t.storage()) v += d(rng);
  });
}

inline emea::AdapterParams language_adapter(const emea::ModelConfig& c, const std::string& name,
                                            std::uint64_t seed) {
  auto a = emea::init_adapter(c, emea::AdapterKind::language, name, seed);
  perturb(a, seed + 1000);
  a.frozen = true;
  return a;
}

inline emea::AdapterParams task_adapter(const emea::ModelConfig& c, std::uint64_t seed) {
  auto a = emea::init_adapter(c, emea::AdapterKind::task, "task", seed);
  perturb(a, seed + 2000);
  a.frozen = true;
  return a;
}

inline emea::Model frozen_model(const emea::ModelConfig& c, std::uint64_t seed) {
  auto m = emea::init_model(c, seed);
  m.backbone.frozen = true;
  return m;
}

inline emea::EncodedSentence random_sentence(std::mt19937_64& rng, std::size_t vocab,
                                             std::size_t min_len = 3, std::size_t max_len = 8) {
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  std::uniform_int_distribution<int> tok(3, static_cast<int>(vocab) - 1);
  emea::EncodedSentence s;
  const std::size_t n = len(rng);
  for (std::size_t i = 0; i < n; ++i) s.ids.push_back(tok(rng));
  // Every token but occasionally a continuation piece starts a word.
  for (std::size_t i = 0; i < n; ++i)
    if (i == 0 || rng() % 4 != 0) s.word_starts.push_back(static_cast<int>(i));
  return s;
}

inline emea::Batch random_batch(std::mt19937_64& rng, std::size_t vocab, std::size_t n) {
  emea::Batch b;
  for (std::size_t i = 0; i < n; ++i) b.push_back(random_sentence(rng, vocab));
  return b;
}

// Snapshot of every tensor of a parameter group, for bitwise audits.
template <class P>
std::vector<emea::Tensor> snapshot(const P& params) {
  std::vector<emea::Tensor> out;
  params.for_each_parameter([&](const std::string&, const emea::Tensor& t) { out.push_back(t); });
  return out;
}

template <class P>
bool unchanged(const P& params, const std::vector<emea::Tensor>& before) {
  std::size_t i = 0;
  bool same = true;
  params.for_each_parameter([&](const std::string&, const emea::Tensor& t) {
    same = same && i < before.size() && t.bit_equal(before[i]);
    ++i;
  });
  return same && i == before.size();
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("emea-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace fixtures
