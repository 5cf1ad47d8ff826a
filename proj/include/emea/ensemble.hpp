#pragma once

#include <cstdint>
#include <vector>

#include "emea/model.hpp"

namespace emea {

enum class CombineMode { single, average, weighted };

const char* to_string(CombineMode mode);

// Combines the outputs of R language adapters after every encoder layer.
//
//   single    L_k(h) for the active adapter k
//   average   (1/R) sum_i L_i(h)
//   weighted  sum_i alpha_i L_i(h),  alpha = softmax(logits)
//
// Weighted mode stores unconstrained logits so alpha stays on the simplex.
// The logits are either one [R] vector shared by all layers or one row per
// layer ([n_layers×R]).
class LanguageCombiner : public LayerCombiner {
 public:
  LanguageCombiner(std::vector<const AdapterParams*> adapters, CombineMode mode,
                   std::size_t n_layers = 1, bool share_across_layers = true);

  Node apply(const Node& h, std::size_t layer, ParamBinder& bind) const override;

  CombineMode mode() const { return mode_; }
  std::size_t size() const { return adapters_.size(); }
  const std::vector<const AdapterParams*>& adapters() const { return adapters_; }
  bool shares_weights() const { return shared_; }

  // Logits (weighted mode). Mutable so the EMEA loop can update them.
  Tensor& logits() { return logits_; }
  const Tensor& logits() const { return logits_; }
  void reset_logits() { logits_.fill(0.0f); }

  // Effective mixing weights for a layer.
  std::vector<float> alpha(std::size_t layer = 0) const;

  void set_active(std::size_t index);
  std::size_t active() const { return active_; }

 private:
  std::vector<const AdapterParams*> adapters_;
  CombineMode mode_;
  bool shared_;
  std::size_t active_ = 0;
  Tensor logits_;
  Tensor uniform_;
};

// Standalone form of LanguageCombiner::apply.
Node combine(const Node& h, const LanguageCombiner& c, std::size_t layer_index,
             ParamBinder& bind);

enum class EntropyReduction { sum, mean };

struct EmeaConfig {
  float gamma = 10.0f;
  std::size_t steps = 1;
  EntropyReduction reduction = EntropyReduction::sum;
  bool share_alpha_across_layers = true;
  bool reset_per_batch = true;

  void validate() const;
};

// A test sentence after tokenisation: subword ids plus the index of the
// first subword of every word (the row the word is classified from).
struct EncodedSentence {
  std::vector<int> ids;
  std::vector<int> word_starts;
};

using Batch = std::vector<EncodedSentence>;
using Predictions = std::vector<std::vector<int>>;

struct EmeaResult {
  std::vector<float> alpha;          // final softmax(logits), layer 0 row
  Predictions predictions;           // argmax tag per word
  std::vector<double> entropy_trace; // H before each update, then final H
};

// Summed (or word-averaged) prediction entropy of the batch.
double batch_entropy(const Model& model, const Batch& batch, const LayerCombiner& lang,
                     const AdapterParams& task, EntropyReduction reduction);

// Entropy and its gradient with respect to the combiner logits.
double entropy_gradient(const Model& model, const Batch& batch, const LanguageCombiner& lang,
                        const AdapterParams& task, EntropyReduction reduction,
                        Tensor& gradient);

Predictions predict(const Model& model, const Batch& batch, const LayerCombiner& lang,
                    const AdapterParams& task);

// Test-time entropy minimisation over the ensemble weights: T plain gradient
// steps on the logits, then predict with the adapted weights. Only the
// combiner's logits change.
EmeaResult emea_adapt(const Batch& batch, const Model& model, LanguageCombiner& combiner,
                      const AdapterParams& task, const EmeaConfig& cfg);

// Continual-learning baseline: entropy-driven updates of a single language
// adapter's own parameters.
class ContinualAdapter {
 public:
  ContinualAdapter(const AdapterParams& adapter, float lr, std::size_t steps,
                   bool reset_per_batch = true);

  Predictions adapt_and_predict(const Batch& batch, const Model& model, const AdapterParams& task);
  const AdapterParams& current() const { return working_; }

 private:
  const AdapterParams* original_;
  AdapterParams working_;
  float lr_;
  std::size_t steps_;
  bool reset_;
};

Predictions cl_adapt(const Batch& batch, const Model& model, const AdapterParams& adapter,
                     const AdapterParams& task, float lr = 2e-5f, std::size_t steps = 1);

// Fusion baseline: per layer, attention over adapter outputs with the layer
// output as the query.
struct FusionLayer {
  Tensor query;  // [d×d]
  Tensor key;    // [d×d]
  Tensor value;  // [d×d]
};

struct FusionParams {
  std::size_t n_adapters = 0;
  std::vector<FusionLayer> layers;

  template <class F>
  void for_each_parameter(F&& f) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "layer" + std::to_string(i) + ".";
      f(p + "query", layers[i].query);
      f(p + "key", layers[i].key);
      f(p + "value", layers[i].value);
    }
  }
  template <class F>
  void for_each_parameter(F&& f) {
    const_cast<const FusionParams*>(this)->for_each_parameter(
        [&](const std::string& n, const Tensor& t) { f(n, const_cast<Tensor&>(t)); });
  }
};

// Query/key ~ small uniform noise, value = identity.
FusionParams init_fusion(const ModelConfig& config, std::size_t n_adapters, std::uint64_t seed);

// out = h + sum_i w_i * (d_i·W_v), w = softmax_i((h·W_q)·(d_i·W_k) / sqrt(d)),
// where d_i is adapter i's residual-free output. With identity W_v and equal
// scores this is exactly the uniform ensemble.
Node fusion_combine(const Node& h, const std::vector<const AdapterParams*>& adapters,
                    const FusionParams& params, std::size_t layer_index, ParamBinder& bind);

class FusionCombiner : public LayerCombiner {
 public:
  FusionCombiner(std::vector<const AdapterParams*> adapters, const FusionParams& params);
  Node apply(const Node& h, std::size_t layer, ParamBinder& bind) const override;

 private:
  std::vector<const AdapterParams*> adapters_;
  const FusionParams* params_;
};

std::unordered_set<const Tensor*> parameter_set(const FusionParams& f);

}  // namespace emea
