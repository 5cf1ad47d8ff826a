#include "emea/ensemble.hpp"

#include <algorithm>
#include <cmath>

#include "emea/error.hpp"

namespace emea {

const char* to_string(CombineMode mode) {
  switch (mode) {
    case CombineMode::single: return "single";
    case CombineMode::average: return "average";
    case CombineMode::weighted: return "weighted";
  }
  return "?";
}

LanguageCombiner::LanguageCombiner(std::vector<const AdapterParams*> adapters, CombineMode mode,
                                   std::size_t n_layers, bool share_across_layers)
    : adapters_(std::move(adapters)), mode_(mode), shared_(share_across_layers) {
  if (adapters_.empty()) throw ConfigError("language combiner: empty adapter list");
  for (const auto* a : adapters_) {
    if (!a) throw ConfigError("language combiner: null adapter");
    if (a->kind != AdapterKind::language) {
      throw ConfigError("language combiner: '" + a->name + "' is not a language adapter");
    }
  }
  const std::size_t r = adapters_.size();
  if (shared_ || n_layers <= 1) {
    shared_ = true;
    logits_ = Tensor(Shape{r}, 0.0f);
  } else {
    logits_ = Tensor(Shape{n_layers, r}, 0.0f);
  }
  uniform_ = Tensor(Shape{r}, 1.0f / static_cast<float>(r));
}

void LanguageCombiner::set_active(std::size_t index) {
  if (index >= adapters_.size()) {
    throw ConfigError("language combiner: active index " + std::to_string(index) +
                      " out of " + std::to_string(adapters_.size()));
  }
  active_ = index;
}

std::vector<float> LanguageCombiner::alpha(std::size_t layer) const {
  const std::size_t r = adapters_.size();
  std::vector<float> out(r, 0.0f);
  switch (mode_) {
    case CombineMode::single: out[active_] = 1.0f; break;
    case CombineMode::average: std::fill(out.begin(), out.end(), 1.0f / r); break;
    case CombineMode::weighted: {
      const std::size_t row = shared_ ? 0 : layer;
      Tensor slice(Shape{r});
      for (std::size_t i = 0; i < r; ++i) slice[i] = logits_[row * r + i];
      Tensor p = softmax(Node::borrow(slice)).value();
      for (std::size_t i = 0; i < r; ++i) out[i] = p[i];
      break;
    }
  }
  return out;
}

Node LanguageCombiner::apply(const Node& h, std::size_t layer, ParamBinder& bind) const {
  if (mode_ == CombineMode::single) return adapter_node(h, *adapters_[active_], layer, bind);
  std::vector<Node> outs;
  outs.reserve(adapters_.size());
  for (const auto* a : adapters_) outs.push_back(adapter_node(h, *a, layer, bind));
  if (mode_ == CombineMode::average) return weighted_sum(Node::borrow(uniform_), outs);
  Node logits = bind(logits_);
  if (!shared_) {
    const int row = static_cast<int>(layer);
    logits = gather_rows(logits, std::span<const int>(&row, 1));
  }
  return weighted_sum(softmax(logits), outs);
}

Node combine(const Node& h, const LanguageCombiner& c, std::size_t layer_index,
             ParamBinder& bind) {
  return c.apply(h, layer_index, bind);
}

void EmeaConfig::validate() const {
  if (!(gamma > 0.0f)) throw ConfigError("emea: gamma must be > 0");
}

namespace {

Node sentence_entropy(const Model& model, const EncodedSentence& s, const LayerCombiner& lang,
                      const AdapterParams& task, ParamBinder& bind) {
  ForwardSpec spec{&lang, &task};
  return entropy(forward(model, s.ids, s.word_starts, spec, Head::task, bind));
}

std::size_t word_count(const Batch& batch) {
  std::size_t n = 0;
  for (const auto& s : batch) n += s.word_starts.size();
  return n;
}

std::vector<int> argmax_rows(const Tensor& probs) {
  const std::size_t m = probs.rows(), n = probs.cols();
  std::vector<int> out(m);
  for (std::size_t r = 0; r < m; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < n; ++c)
      if (probs[r * n + c] > probs[r * n + best]) best = c;
    out[r] = static_cast<int>(best);
  }
  return out;
}

}  // namespace

double batch_entropy(const Model& model, const Batch& batch, const LayerCombiner& lang,
                     const AdapterParams& task, EntropyReduction reduction) {
  double total = 0.0;
  for (const auto& s : batch) {
    ParamBinder bind;
    total += sentence_entropy(model, s, lang, task, bind).value().item();
  }
  if (reduction == EntropyReduction::mean) {
    const std::size_t words = word_count(batch);
    if (words) total /= static_cast<double>(words);
  }
  return total;
}

double entropy_gradient(const Model& model, const Batch& batch, const LanguageCombiner& lang,
                        const AdapterParams& task, EntropyReduction reduction,
                        Tensor& gradient) {
  ParamBinder bind({&lang.logits()});
  const std::size_t words = word_count(batch);
  const float weight = (reduction == EntropyReduction::mean && words)
                           ? 1.0f / static_cast<float>(words)
                           : 1.0f;
  double total = 0.0;
  for (const auto& s : batch) {
    Node h = sentence_entropy(model, s, lang, task, bind);
    total += h.value().item();
    // Each sentence's graph is released after its backward; the logits leaf
    // is shared, so gradients accumulate across the batch.
    backward(weight == 1.0f ? h : scale(h, weight));
  }
  gradient = bind.gradient(lang.logits());
  return total * weight;
}

Predictions predict(const Model& model, const Batch& batch, const LayerCombiner& lang,
                    const AdapterParams& task) {
  Predictions out;
  out.reserve(batch.size());
  ForwardSpec spec{&lang, &task};
  for (const auto& s : batch) {
    ParamBinder bind;
    out.push_back(argmax_rows(forward_logits(model, s.ids, s.word_starts, spec, Head::task, bind).value()));
  }
  return out;
}

EmeaResult emea_adapt(const Batch& batch, const Model& model, LanguageCombiner& combiner,
                      const AdapterParams& task, const EmeaConfig& cfg) {
  cfg.validate();
  if (cfg.steps > 0 && combiner.mode() != CombineMode::weighted) {
    throw UsageError(std::string("emea: cannot adapt weights of a combiner in ") +
                     to_string(combiner.mode()) + " mode");
  }
  if (cfg.reset_per_batch) combiner.reset_logits();
  EmeaResult result;
  Tensor grad;
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    result.entropy_trace.push_back(
        entropy_gradient(model, batch, combiner, task, cfg.reduction, grad));
    auto& logits = combiner.logits();
    for (std::size_t i = 0; i < logits.numel(); ++i) logits[i] -= cfg.gamma * grad[i];
  }
  result.entropy_trace.push_back(batch_entropy(model, batch, combiner, task, cfg.reduction));
  result.predictions = predict(model, batch, combiner, task);
  result.alpha = combiner.alpha(0);
  return result;
}

ContinualAdapter::ContinualAdapter(const AdapterParams& adapter, float lr, std::size_t steps,
                                   bool reset_per_batch)
    : original_(&adapter), working_(adapter), lr_(lr), steps_(steps), reset_(reset_per_batch) {
  if (adapter.kind != AdapterKind::language) {
    throw UsageError("cl: '" + adapter.name + "' is not a language adapter");
  }
  working_.frozen = false;
}

Predictions ContinualAdapter::adapt_and_predict(const Batch& batch, const Model& model,
                                                const AdapterParams& task) {
  if (!model.backbone.frozen) {
    throw ContractError("cl: backbone must be frozen during test-time updates");
  }
  if (reset_) {
    working_ = *original_;
    working_.frozen = false;
  }
  LanguageCombiner single({&working_}, CombineMode::single);
  for (std::size_t step = 0; step < steps_ && lr_ != 0.0f; ++step) {
    ParamBinder bind(parameter_set(working_));
    for (const auto& s : batch) backward(sentence_entropy(model, s, single, task, bind));
    working_.for_each_parameter([&](const std::string&, Tensor& t) {
      const Tensor g = bind.gradient(t);
      for (std::size_t i = 0; i < t.numel(); ++i) t[i] -= lr_ * g[i];
    });
  }
  return predict(model, batch, single, task);
}

Predictions cl_adapt(const Batch& batch, const Model& model, const AdapterParams& adapter,
                     const AdapterParams& task, float lr, std::size_t steps) {
  ContinualAdapter cl(adapter, lr, steps, true);
  return cl.adapt_and_predict(batch, model, task);
}

FusionParams init_fusion(const ModelConfig& config, std::size_t n_adapters, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(-0.01f, 0.01f);
  const std::size_t d = config.d_model;
  FusionParams f;
  f.n_adapters = n_adapters;
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    FusionLayer layer{Tensor(Shape{d, d}), Tensor(Shape{d, d}), Tensor(Shape{d, d}, 0.0f)};
    for (auto& v : layer.query.storage()) v = dist(rng);
    for (auto& v : layer.key.storage()) v = dist(rng);
    for (std::size_t i = 0; i < d; ++i) layer.value[i * d + i] = 1.0f;
    f.layers.push_back(std::move(layer));
  }
  return f;
}

Node fusion_combine(const Node& h, const std::vector<const AdapterParams*>& adapters,
                    const FusionParams& params, std::size_t layer_index, ParamBinder& bind) {
  if (adapters.size() != params.n_adapters) {
    throw ConfigError("fusion: trained for " + std::to_string(params.n_adapters) +
                      " adapters, given " + std::to_string(adapters.size()));
  }
  if (layer_index >= params.layers.size()) {
    throw ConfigError("fusion: no parameters for layer " + std::to_string(layer_index));
  }
  const auto& fl = params.layers[layer_index];
  const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(h.shape().back()));
  Node query = matmul(h, bind(fl.query));
  std::vector<Node> scores, values;
  for (const auto* a : adapters) {
    if (layer_index >= a->layers.size()) {
      throw ConfigError("fusion: adapter '" + a->name + "' lacks layer " +
                        std::to_string(layer_index));
    }
    Node delta = adapter_delta(h, a->layers[layer_index], bind);
    Node key = matmul(delta, bind(fl.key));
    scores.push_back(scale(row_dot(query, key), inv_sqrt_d));
    values.push_back(matmul(delta, bind(fl.value)));
  }
  Node weights = softmax(concat_cols(scores));  // [W×R]
  Node out = h;
  for (std::size_t i = 0; i < values.size(); ++i) {
    out = add(out, scale_rows(values[i], slice_cols(weights, i, 1)));
  }
  return out;
}

FusionCombiner::FusionCombiner(std::vector<const AdapterParams*> adapters,
                               const FusionParams& params)
    : adapters_(std::move(adapters)), params_(&params) {
  if (adapters_.size() != params.n_adapters) {
    throw ConfigError("fusion: trained for " + std::to_string(params.n_adapters) +
                      " adapters, given " + std::to_string(adapters_.size()));
  }
}

Node FusionCombiner::apply(const Node& h, std::size_t layer, ParamBinder& bind) const {
  return fusion_combine(h, adapters_, *params_, layer, bind);
}

std::unordered_set<const Tensor*> parameter_set(const FusionParams& f) {
  std::unordered_set<const Tensor*> out;
  f.for_each_parameter([&](const std::string&, const Tensor& t) { out.insert(&t); });
  return out;
}

}  // namespace emea
