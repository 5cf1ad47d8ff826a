#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "emea/autodiff.hpp"
#include "emea/tensor.hpp"

namespace emea {

struct ModelConfig {
  std::size_t vocab_size = 128;
  std::size_t d_model = 32;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_ff = 64;
  std::size_t d_adapter = 8;
  std::size_t max_len = 96;
  std::size_t n_tags = 7;

  // Throws ConfigError when an invariant is violated.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// weight is [in×out]; y = x·W + b.
struct Linear {
  Tensor weight;
  Tensor bias;
};

struct Norm {
  Tensor gain;
  Tensor shift;
};

struct EncoderLayer {
  Linear query, key, value, output;
  Norm attn_norm;
  Linear ff_in, ff_out;
  Norm ff_norm;
};

// The frozen multilingual encoder. The MLM head reuses token_embedding.
struct Backbone {
  Tensor token_embedding;  // [V×d]
  Norm embed_norm;
  std::vector<EncoderLayer> layers;
  Tensor mlm_bias;  // [V]
  bool frozen = false;

  template <class F>
  void for_each_parameter(F&& f);
  template <class F>
  void for_each_parameter(F&& f) const;
};

enum class AdapterKind { language, task };

const char* to_string(AdapterKind kind);
AdapterKind adapter_kind_from_string(const std::string& s);

struct AdapterLayer {
  Norm norm;
  Linear down;  // [d_model×d_adapter]
  Linear up;    // [d_adapter×d_model]
};

// One bottleneck adapter with a parameter set per encoder layer. Task
// adapters additionally own the tagging head applied to the final layer.
struct AdapterParams {
  AdapterKind kind = AdapterKind::language;
  std::string name;
  std::vector<AdapterLayer> layers;
  std::optional<Linear> head;  // task adapters only, [d_model×n_tags]
  bool frozen = false;

  template <class F>
  void for_each_parameter(F&& f);
  template <class F>
  void for_each_parameter(F&& f) const;
};

struct Model {
  ModelConfig config;
  Backbone backbone;
};

// --- parameter binding -------------------------------------------------------

// Maps parameter tensors to graph leaves for one forward/backward episode.
// Tensors in the trainable set become requires_grad leaves; all others are
// bound as constants so their gradients are never computed.
class ParamBinder {
 public:
  ParamBinder() = default;
  explicit ParamBinder(std::unordered_set<const Tensor*> trainable)
      : trainable_(std::move(trainable)) {}

  Node operator()(const Tensor& t);
  bool is_trainable(const Tensor& t) const { return trainable_.count(&t) > 0; }
  // Gradient accumulated on the leaf for `t`; zeros if unbound or no grad.
  Tensor gradient(const Tensor& t) const;
  // Drops all leaves (and therefore the graphs hanging off them).
  void reset() { bound_.clear(); }

 private:
  std::unordered_set<const Tensor*> trainable_;
  std::unordered_map<const Tensor*, Node> bound_;
};

// Something applied to the hidden state after each layer's feed-forward
// block: a single language adapter, an ensemble, or a fusion layer.
class LayerCombiner {
 public:
  virtual ~LayerCombiner() = default;
  virtual Node apply(const Node& h, std::size_t layer, ParamBinder& bind) const = 0;
};

// --- construction ----------------------------------------------------------

Model init_model(const ModelConfig& config, std::uint64_t seed);
// Down-projection ~ U(-0.05, 0.05), up-projection zero: a fresh adapter is the identity.
AdapterParams init_adapter(const ModelConfig& config, AdapterKind kind, std::string name,
                           std::uint64_t seed);

// --- forward ---------------------------------------------------------------

enum class Head { mlm, task };

// Residual-free bottleneck transform up(relu(down(LN(h)))).
Node adapter_delta(const Node& h, const AdapterLayer& layer, ParamBinder& bind);
// h + adapter_delta(h).
Node adapter_node(const Node& h, const AdapterParams& a, std::size_t layer_index,
                  ParamBinder& bind);
Tensor adapter_apply(const Tensor& h, const AdapterParams& a, std::size_t layer_index);

struct ForwardSpec {
  const LayerCombiner* language = nullptr;  // none during backbone pretraining
  const AdapterParams* task = nullptr;
};

// Final hidden states [T×d] for token ids.
Node encode(const Model& model, std::span<const int> ids, const ForwardSpec& spec,
            ParamBinder& bind);

// Logits. For Head::task, rows are taken at `word_starts` ([W×n_tags]); for
// Head::mlm, rows are taken at `rows` if given, otherwise every token ([T×V]).
Node forward_logits(const Model& model, std::span<const int> ids,
                    std::span<const int> rows, const ForwardSpec& spec, Head head,
                    ParamBinder& bind);

// Probability rows (softmax of forward_logits).
Node forward(const Model& model, std::span<const int> ids, std::span<const int> rows,
             const ForwardSpec& spec, Head head, ParamBinder& bind);

Tensor sinusoidal_positions(std::size_t length, std::size_t d_model);

// --- helpers ----------------------------------------------------------------

// Collects pointers to every parameter tensor of a group.
std::unordered_set<const Tensor*> parameter_set(const Backbone& b);
std::unordered_set<const Tensor*> parameter_set(const AdapterParams& a);

template <class F>
void Backbone::for_each_parameter(F&& f) {
  const_cast<const Backbone*>(this)->for_each_parameter(
      [&](const std::string& name, const Tensor& t) { f(name, const_cast<Tensor&>(t)); });
}

template <class F>
void Backbone::for_each_parameter(F&& f) const {
  f("embed.token", token_embedding);
  f("embed.norm.gain", embed_norm.gain);
  f("embed.norm.shift", embed_norm.shift);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string p = "layer" + std::to_string(i) + ".";
    f(p + "attn.query.weight", l.query.weight);
    f(p + "attn.query.bias", l.query.bias);
    f(p + "attn.key.weight", l.key.weight);
    f(p + "attn.key.bias", l.key.bias);
    f(p + "attn.value.weight", l.value.weight);
    f(p + "attn.value.bias", l.value.bias);
    f(p + "attn.output.weight", l.output.weight);
    f(p + "attn.output.bias", l.output.bias);
    f(p + "attn.norm.gain", l.attn_norm.gain);
    f(p + "attn.norm.shift", l.attn_norm.shift);
    f(p + "ffn.in.weight", l.ff_in.weight);
    f(p + "ffn.in.bias", l.ff_in.bias);
    f(p + "ffn.out.weight", l.ff_out.weight);
    f(p + "ffn.out.bias", l.ff_out.bias);
    f(p + "ffn.norm.gain", l.ff_norm.gain);
    f(p + "ffn.norm.shift", l.ff_norm.shift);
  }
  f("mlm.bias", mlm_bias);
}

template <class F>
void AdapterParams::for_each_parameter(F&& f) {
  const_cast<const AdapterParams*>(this)->for_each_parameter(
      [&](const std::string& n, const Tensor& t) { f(n, const_cast<Tensor&>(t)); });
}

template <class F>
void AdapterParams::for_each_parameter(F&& f) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string p = "layer" + std::to_string(i) + ".";
    f(p + "norm.gain", l.norm.gain);
    f(p + "norm.shift", l.norm.shift);
    f(p + "down.weight", l.down.weight);
    f(p + "down.bias", l.down.bias);
    f(p + "up.weight", l.up.weight);
    f(p + "up.bias", l.up.bias);
  }
  if (head) {
    f("head.weight", head->weight);
    f("head.bias", head->bias);
  }
}

}  // namespace emea
