#include "emea/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "emea/error.hpp"

namespace emea {

void TrainConfig::validate() const {
  if (!(lr > 0.0f)) throw ConfigError("train config: lr must be > 0");
  if (!(mask_rate > 0.0f && mask_rate < 1.0f)) throw ConfigError("train config: mask_rate must be in (0,1)");
  if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
  if (optimizer == OptimizerKind::adam &&
      !(beta1 >= 0.0f && beta1 < 1.0f && beta2 >= 0.0f && beta2 < 1.0f && epsilon > 0.0f)) {
    throw ConfigError("train config: invalid moment coefficients");
  }
}

TrainConfig TrainConfig::task_default(TaskKind task) {
  TrainConfig cfg;
  cfg.epochs = task == TaskKind::ner ? 100 : 50;
  cfg.lr = 1e-4f;
  return cfg;
}

std::string to_json_line(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["split"] = r.split;
  j["loss"] = r.loss;
  j["metric"] = r.metric ? nlohmann::ordered_json(*r.metric) : nlohmann::ordered_json(nullptr);
  j["seconds"] = r.seconds;
  return j.dump();
}

void Optimizer::step(const std::vector<Tensor*>& params, const ParamBinder& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t_));
  for (Tensor* p : params) {
    const Tensor g = grads.gradient(*p);
    if (cfg_.optimizer == OptimizerKind::sgd) {
      for (std::size_t i = 0; i < p->numel(); ++i) (*p)[i] -= cfg_.lr * g[i];
      continue;
    }
    auto& st = state_[p];
    if (st.m.empty()) {
      st.m.assign(p->numel(), 0.0f);
      st.v.assign(p->numel(), 0.0f);
    }
    for (std::size_t i = 0; i < p->numel(); ++i) {
      st.m[i] = cfg_.beta1 * st.m[i] + (1.0f - cfg_.beta1) * g[i];
      st.v[i] = cfg_.beta2 * st.v[i] + (1.0f - cfg_.beta2) * g[i] * g[i];
      const double mhat = st.m[i] / bc1;
      const double vhat = st.v[i] / bc2;
      (*p)[i] -= static_cast<float>(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.epsilon));
    }
  }
}

MaskedSentence mask_tokens(const std::vector<int>& ids, float rate, std::size_t vocab_size,
                           std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> random_token(3, static_cast<int>(vocab_size) - 1);
  MaskedSentence out;
  out.ids = ids;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (unit(rng) >= rate) continue;
    out.positions.push_back(static_cast<int>(i));
    out.targets.push_back(ids[i]);
    const double r = unit(rng);
    if (r < 0.8) out.ids[i] = Vocabulary::kMask;
    else if (r < 0.9) out.ids[i] = random_token(rng);
  }
  return out;
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::vector<Tensor*> collect(Backbone& b) {
  std::vector<Tensor*> out;
  b.for_each_parameter([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

template <class P>
std::vector<Tensor*> collect(P& params) {
  std::vector<Tensor*> out;
  params.for_each_parameter([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

std::unordered_set<const Tensor*> as_set(const std::vector<Tensor*>& v) {
  return {v.begin(), v.end()};
}

// Generic minibatch loop. `loss_of(i, bind)` builds the loss graph for
// example i; the batch loss is the mean over examples. Returns the mean
// training loss of the epoch.
template <class LossFn>
double run_epoch(std::size_t n_examples, const TrainConfig& cfg, std::mt19937_64& order_rng,
                 const std::vector<Tensor*>& trainable, Optimizer& opt, LossFn&& loss_of) {
  std::vector<std::size_t> order(n_examples);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), order_rng);
  const auto trainable_set = as_set(trainable);
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t start = 0; start < n_examples; start += cfg.batch_size) {
    const std::size_t end = std::min(n_examples, start + cfg.batch_size);
    ParamBinder bind(trainable_set);
    std::size_t used = 0;
    std::vector<Node> losses;
    for (std::size_t k = start; k < end; ++k) {
      Node loss = loss_of(order[k], bind);
      if (!loss.valid()) continue;
      losses.push_back(loss);
      ++used;
    }
    if (!used) continue;
    const float w = 1.0f / static_cast<float>(used);
    for (auto& loss : losses) {
      total += loss.value().item();
      ++counted;
      backward(scale(loss, w));
    }
    losses.clear();
    opt.step(trainable, bind);
  }
  return counted ? total / static_cast<double>(counted) : 0.0;
}

void require_frozen_backbone(const Model& model, const char* phase) {
  if (!model.backbone.frozen) {
    throw ContractError(std::string(phase) + ": backbone must be frozen");
  }
}

double tagging_accuracy(const Model& model, const EncodedCorpus& labeled, const LayerCombiner& lang,
                        const AdapterParams& task) {
  const Predictions pred = predict(model, labeled.sentences, lang, task);
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    for (std::size_t w = 0; w < pred[i].size(); ++w) {
      ++total;
      hit += pred[i][w] == labeled.labels[i][w];
    }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

void check_labels(const EncodedCorpus& labeled, TaskKind task, const ModelConfig& config) {
  if (tag_set(task).size() != config.n_tags) {
    throw ConfigError(std::string("task ") + to_string(task) + " has " +
                      std::to_string(tag_set(task).size()) + " tags, model n_tags is " +
                      std::to_string(config.n_tags));
  }
  if (labeled.labels.size() != labeled.sentences.size()) {
    throw DataError("labeled corpus without labels");
  }
  for (const auto& row : labeled.labels)
    for (int t : row)
      if (t < 0 || static_cast<std::size_t>(t) >= config.n_tags) {
        throw ConfigError("label id " + std::to_string(t) + " outside n_tags " +
                          std::to_string(config.n_tags));
      }
}

AdapterParams mlm_adapter_loop(const std::vector<EncodedSentence>& corpus, const Model& model,
                               AdapterParams adapter, const TrainConfig& cfg,
                               const TrainLogger& log) {
  auto trainable = collect(adapter);
  Optimizer opt(cfg);
  std::mt19937_64 order_rng(cfg.seed);
  std::mt19937_64 mask_rng(cfg.seed ^ 0x5bd1e995ULL);
  LanguageCombiner single({&adapter}, CombineMode::single);
  ForwardSpec spec{&single, nullptr};
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = Clock::now();
    const double loss = run_epoch(corpus.size(), cfg, order_rng, trainable, opt,
                                  [&](std::size_t i, ParamBinder& bind) -> Node {
      MaskedSentence m = mask_tokens(corpus[i].ids, cfg.mask_rate, model.config.vocab_size, mask_rng);
      if (m.positions.empty()) return Node();
      return cross_entropy(forward_logits(model, m.ids, m.positions, spec, Head::mlm, bind),
                           m.targets, true);
    });
    if (log) log({epoch, "train", loss, std::nullopt, seconds_since(start)});
  }
  return adapter;
}

}  // namespace

double mlm_loss(const Model& model, const std::vector<EncodedSentence>& corpus,
                const AdapterParams* adapter, float mask_rate, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::optional<LanguageCombiner> single;
  if (adapter) single.emplace(std::vector<const AdapterParams*>{adapter}, CombineMode::single);
  ForwardSpec spec{single ? &*single : nullptr, nullptr};
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& s : corpus) {
    MaskedSentence m = mask_tokens(s.ids, mask_rate, model.config.vocab_size, rng);
    if (m.positions.empty()) continue;
    ParamBinder bind;
    Node logits = forward_logits(model, m.ids, m.positions, spec, Head::mlm, bind);
    total += cross_entropy(logits, m.targets, false).value().item();
    count += m.positions.size();
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

void pretrain_backbone(Model& model, const std::vector<EncodedSentence>& corpus,
                       const TrainConfig& cfg, const TrainLogger& log) {
  cfg.validate();
  if (corpus.empty()) throw DataError("pretrain: empty corpus");
  model.backbone.frozen = false;
  auto trainable = collect(model.backbone);
  Optimizer opt(cfg);
  std::mt19937_64 order_rng(cfg.seed);
  std::mt19937_64 mask_rng(cfg.seed ^ 0x5bd1e995ULL);
  ForwardSpec spec{};
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = Clock::now();
    const double loss = run_epoch(corpus.size(), cfg, order_rng, trainable, opt,
                                  [&](std::size_t i, ParamBinder& bind) -> Node {
      MaskedSentence m = mask_tokens(corpus[i].ids, cfg.mask_rate, model.config.vocab_size, mask_rng);
      if (m.positions.empty()) return Node();
      return cross_entropy(forward_logits(model, m.ids, m.positions, spec, Head::mlm, bind),
                           m.targets, true);
    });
    if (log) log({epoch, "train", loss, std::nullopt, seconds_since(start)});
  }
  model.backbone.frozen = true;
}

AdapterParams train_language_adapter(const std::vector<EncodedSentence>& corpus,
                                     const Model& model, const std::string& name,
                                     const TrainConfig& cfg, const TrainLogger& log,
                                     const AdapterParams* warm_start) {
  cfg.validate();
  require_frozen_backbone(model, "train_language_adapter");
  if (corpus.empty()) throw DataError("train_language_adapter: empty corpus for '" + name + "'");
  AdapterParams adapter = warm_start ? *warm_start
                                     : init_adapter(model.config, AdapterKind::language, name, cfg.seed);
  adapter.name = name;
  adapter.frozen = false;
  adapter = mlm_adapter_loop(corpus, model, std::move(adapter), cfg, log);
  adapter.frozen = true;
  return adapter;
}

AdapterParams train_task_adapter(const EncodedCorpus& labeled, TaskKind task, const Model& model,
                                 const AdapterParams& src_adapter, const TrainConfig& cfg,
                                 const TrainLogger& log, const EncodedCorpus* dev) {
  cfg.validate();
  require_frozen_backbone(model, "train_task_adapter");
  check_labels(labeled, task, model.config);
  if (labeled.sentences.empty()) throw DataError("train_task_adapter: empty corpus");
  AdapterParams adapter = init_adapter(model.config, AdapterKind::task,
                                       std::string("task-") + to_string(task), cfg.seed);
  auto trainable = collect(adapter);
  Optimizer opt(cfg);
  std::mt19937_64 order_rng(cfg.seed);
  LanguageCombiner single({&src_adapter}, CombineMode::single);
  ForwardSpec spec{&single, &adapter};
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = Clock::now();
    const double loss = run_epoch(labeled.sentences.size(), cfg, order_rng, trainable, opt,
                                  [&](std::size_t i, ParamBinder& bind) -> Node {
      const auto& s = labeled.sentences[i];
      return cross_entropy(forward_logits(model, s.ids, s.word_starts, spec, Head::task, bind),
                           labeled.labels[i], true);
    });
    if (log) {
      std::optional<double> metric;
      if (dev) metric = tagging_accuracy(model, *dev, single, adapter);
      log({epoch, "train", loss, metric, seconds_since(start)});
    }
  }
  adapter.frozen = true;
  return adapter;
}

double tagging_loss(const Model& model, const EncodedCorpus& labeled, const LayerCombiner& lang,
                    const AdapterParams& task) {
  ForwardSpec spec{&lang, &task};
  double total = 0.0;
  for (std::size_t i = 0; i < labeled.sentences.size(); ++i) {
    ParamBinder bind;
    const auto& s = labeled.sentences[i];
    total += cross_entropy(forward_logits(model, s.ids, s.word_starts, spec, Head::task, bind),
                           labeled.labels[i], true)
                 .value()
                 .item();
  }
  return labeled.sentences.empty() ? 0.0 : total / static_cast<double>(labeled.sentences.size());
}

FusionParams train_fusion(const EncodedCorpus& labeled, TaskKind task, const Model& model,
                          const std::vector<const AdapterParams*>& adapters,
                          const AdapterParams& task_adapter, const TrainConfig& cfg,
                          const TrainLogger& log, const EncodedCorpus* dev) {
  cfg.validate();
  require_frozen_backbone(model, "train_fusion");
  if (adapters.size() < 2) throw ConfigError("train_fusion: needs at least 2 adapters");
  check_labels(labeled, task, model.config);
  FusionParams fusion = init_fusion(model.config, adapters.size(), cfg.seed);
  auto trainable = collect(fusion);
  Optimizer opt(cfg);
  std::mt19937_64 order_rng(cfg.seed);
  FusionCombiner combiner(adapters, fusion);
  ForwardSpec spec{&combiner, &task_adapter};
  if (log && dev) log({0, "dev", tagging_loss(model, *dev, combiner, task_adapter), std::nullopt, 0.0});
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = Clock::now();
    const double loss = run_epoch(labeled.sentences.size(), cfg, order_rng, trainable, opt,
                                  [&](std::size_t i, ParamBinder& bind) -> Node {
      const auto& s = labeled.sentences[i];
      return cross_entropy(forward_logits(model, s.ids, s.word_starts, spec, Head::task, bind),
                           labeled.labels[i], true);
    });
    if (log) {
      log({epoch, "train", loss, std::nullopt, seconds_since(start)});
      if (dev) log({epoch, "dev", tagging_loss(model, *dev, combiner, task_adapter), std::nullopt, 0.0});
    }
  }
  return fusion;
}

std::vector<std::size_t> budget_slice(std::size_t corpus_size, std::size_t n, std::uint64_t seed) {
  if (n > corpus_size) {
    throw ConfigError("budget " + std::to_string(n) + " exceeds corpus size " +
                      std::to_string(corpus_size));
  }
  std::vector<std::size_t> order(corpus_size);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(n);
  return order;
}

BudgetedAdapter train_adapter_budgeted(const std::vector<EncodedSentence>& corpus, std::size_t n,
                                       const Model& model, const std::string& name,
                                       const TrainConfig& cfg, const AdapterParams* warm_start,
                                       const TrainLogger& log) {
  BudgetedAdapter out;
  const auto slice = budget_slice(corpus.size(), n, cfg.seed);
  if (n == 0) {
    if (warm_start) {
      out.adapter = *warm_start;
      out.adapter.name = name;
    } else {
      out.adapter = init_adapter(model.config, AdapterKind::language, name, cfg.seed);
      out.warnings.push_back("budget 0 without warm start: returning identity adapter '" + name + "'");
    }
    out.adapter.frozen = true;
    return out;
  }
  std::vector<EncodedSentence> subset;
  subset.reserve(n);
  for (std::size_t i : slice) subset.push_back(corpus[i]);
  out.adapter = train_language_adapter(subset, model, name, cfg, log, warm_start);
  return out;
}

}  // namespace emea
