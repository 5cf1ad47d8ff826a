#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "emea/corpus.hpp"
#include "emea/ensemble.hpp"
#include "emea/model.hpp"
#include "emea/tokenizer.hpp"

namespace emea {

enum class OptimizerKind { sgd, adam };

struct TrainConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 16;
  float lr = 1e-3f;
  std::uint64_t seed = 0;
  float mask_rate = 0.15f;
  OptimizerKind optimizer = OptimizerKind::adam;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;

  void validate() const;
  // Task-adapter defaults: 100 epochs (span tagging) or 50 epochs (category
  // tagging), learning rate 1e-4.
  static TrainConfig task_default(TaskKind task);
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;
  std::optional<double> metric;
  double seconds = 0.0;
};

using TrainLogger = std::function<void(const EpochRecord&)>;

std::string to_json_line(const EpochRecord& r);

// Plain gradient descent or bias-corrected adaptive moments. Moment state is
// keyed by parameter address, so the parameter tensors must not move between
// steps.
class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg) : cfg_(cfg) {}
  void step(const std::vector<Tensor*>& params, const ParamBinder& grads);
  std::size_t steps_taken() const { return t_; }

 private:
  struct Moments {
    std::vector<float> m, v;
  };
  TrainConfig cfg_;
  std::size_t t_ = 0;
  std::unordered_map<const Tensor*, Moments> state_;
};

// --- masked language modelling -------------------------------------------

struct MaskedSentence {
  std::vector<int> ids;        // input with replacements applied
  std::vector<int> positions;  // masked positions
  std::vector<int> targets;    // original ids at those positions
};

// Each position is selected with probability `rate`; a selected token is
// replaced by [MASK] 80% of the time, a random regular token 10%, and kept
// 10%.
MaskedSentence mask_tokens(const std::vector<int>& ids, float rate, std::size_t vocab_size,
                           std::mt19937_64& rng);

// Mean masked-token cross-entropy over the corpus with a fixed masking seed.
double mlm_loss(const Model& model, const std::vector<EncodedSentence>& corpus,
                const AdapterParams* adapter, float mask_rate, std::uint64_t seed);

// --- training phases -------------------------------------------------------

// Trains every backbone parameter with MLM, then marks the backbone frozen.
void pretrain_backbone(Model& model, const std::vector<EncodedSentence>& corpus,
                       const TrainConfig& cfg, const TrainLogger& log = {});

AdapterParams train_language_adapter(const std::vector<EncodedSentence>& corpus,
                                     const Model& model, const std::string& name,
                                     const TrainConfig& cfg, const TrainLogger& log = {},
                                     const AdapterParams* warm_start = nullptr);

AdapterParams train_task_adapter(const EncodedCorpus& labeled, TaskKind task, const Model& model,
                                 const AdapterParams& src_adapter, const TrainConfig& cfg,
                                 const TrainLogger& log = {},
                                 const EncodedCorpus* dev = nullptr);

FusionParams train_fusion(const EncodedCorpus& labeled, TaskKind task, const Model& model,
                          const std::vector<const AdapterParams*>& adapters,
                          const AdapterParams& task_adapter, const TrainConfig& cfg,
                          const TrainLogger& log = {}, const EncodedCorpus* dev = nullptr);

// First n indices of a seeded permutation of [0, corpus_size).
std::vector<std::size_t> budget_slice(std::size_t corpus_size, std::size_t n, std::uint64_t seed);

struct BudgetedAdapter {
  AdapterParams adapter;
  std::vector<std::string> warnings;
};

BudgetedAdapter train_adapter_budgeted(const std::vector<EncodedSentence>& corpus, std::size_t n,
                                       const Model& model, const std::string& name,
                                       const TrainConfig& cfg,
                                       const AdapterParams* warm_start = nullptr,
                                       const TrainLogger& log = {});

// Mean per-sentence tagging cross-entropy with a given language combiner.
double tagging_loss(const Model& model, const EncodedCorpus& labeled, const LayerCombiner& lang,
                    const AdapterParams& task);

}  // namespace emea
