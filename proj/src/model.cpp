#include "emea/model.hpp"

#include <cmath>
#include <map>

#include "emea/error.hpp"

namespace emea {

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v < 1) throw ConfigError(std::string("model config: ") + name + " must be >= 1");
  };
  positive(vocab_size, "vocab_size");
  positive(d_model, "d_model");
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(d_ff, "d_ff");
  positive(d_adapter, "d_adapter");
  positive(max_len, "max_len");
  positive(n_tags, "n_tags");
  if (d_model % n_heads != 0) {
    throw ConfigError("model config: d_model " + std::to_string(d_model) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (d_adapter >= d_model) {
    throw ConfigError("model config: d_adapter " + std::to_string(d_adapter) +
                      " must be < d_model " + std::to_string(d_model));
  }
}

const char* to_string(AdapterKind kind) {
  return kind == AdapterKind::language ? "language" : "task";
}

AdapterKind adapter_kind_from_string(const std::string& s) {
  if (s == "language") return AdapterKind::language;
  if (s == "task") return AdapterKind::task;
  throw ConfigError("unknown adapter kind '" + s + "'");
}

Node ParamBinder::operator()(const Tensor& t) {
  auto it = bound_.find(&t);
  if (it != bound_.end()) return it->second;
  Node n = Node::borrow(t, trainable_.count(&t) > 0);
  bound_.emplace(&t, n);
  return n;
}

Tensor ParamBinder::gradient(const Tensor& t) const {
  auto it = bound_.find(&t);
  if (it == bound_.end()) return Tensor(t.shape(), 0.0f);
  return it->second.grad();
}

namespace {

Tensor uniform(Shape shape, float limit, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> dist(-limit, limit);
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = dist(rng);
  return t;
}

Linear make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  const float limit = std::sqrt(6.0f / static_cast<float>(in + out));
  return Linear{uniform({in, out}, limit, rng), Tensor(Shape{out}, 0.0f)};
}

Norm make_norm(std::size_t d) { return Norm{Tensor(Shape{d}, 1.0f), Tensor(Shape{d}, 0.0f)}; }

Node linear(const Node& x, const Linear& l, ParamBinder& bind) {
  return add_bias(matmul(x, bind(l.weight)), bind(l.bias));
}

Node norm(const Node& x, const Norm& n, ParamBinder& bind) {
  return layer_norm(x, bind(n.gain), bind(n.shift));
}

const Tensor& cached_positions(std::size_t length, std::size_t d_model) {
  thread_local std::map<std::pair<std::size_t, std::size_t>, Tensor> cache;
  auto key = std::make_pair(length, d_model);
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, sinusoidal_positions(length, d_model)).first;
  return it->second;
}

Node attention(const Node& x, const EncoderLayer& l, std::size_t n_heads, ParamBinder& bind) {
  const std::size_t d = x.shape()[1];
  const std::size_t dh = d / n_heads;
  Node q = linear(x, l.query, bind);
  Node k = linear(x, l.key, bind);
  Node v = linear(x, l.value, bind);
  const float scale_factor = 1.0f / std::sqrt(static_cast<float>(dh));
  std::vector<Node> heads;
  heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    Node qh = n_heads == 1 ? q : slice_cols(q, h * dh, dh);
    Node kh = n_heads == 1 ? k : slice_cols(k, h * dh, dh);
    Node vh = n_heads == 1 ? v : slice_cols(v, h * dh, dh);
    Node scores = scale(matmul(qh, transpose(kh)), scale_factor);
    heads.push_back(matmul(softmax(scores), vh));
  }
  Node merged = n_heads == 1 ? heads[0] : concat_cols(heads);
  return linear(merged, l.output, bind);
}

}  // namespace

Model init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  Model m;
  m.config = config;
  auto& b = m.backbone;
  b.token_embedding = uniform({config.vocab_size, config.d_model}, 0.1f, rng);
  b.embed_norm = make_norm(config.d_model);
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    EncoderLayer l;
    l.query = make_linear(config.d_model, config.d_model, rng);
    l.key = make_linear(config.d_model, config.d_model, rng);
    l.value = make_linear(config.d_model, config.d_model, rng);
    l.output = make_linear(config.d_model, config.d_model, rng);
    l.attn_norm = make_norm(config.d_model);
    l.ff_in = make_linear(config.d_model, config.d_ff, rng);
    l.ff_out = make_linear(config.d_ff, config.d_model, rng);
    l.ff_norm = make_norm(config.d_model);
    b.layers.push_back(std::move(l));
  }
  b.mlm_bias = Tensor(Shape{config.vocab_size}, 0.0f);
  return m;
}

AdapterParams init_adapter(const ModelConfig& config, AdapterKind kind, std::string name,
                           std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  AdapterParams a;
  a.kind = kind;
  a.name = std::move(name);
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    AdapterLayer l;
    l.norm = make_norm(config.d_model);
    l.down = Linear{uniform({config.d_model, config.d_adapter}, 0.05f, rng),
                    Tensor(Shape{config.d_adapter}, 0.0f)};
    l.up = Linear{Tensor(Shape{config.d_adapter, config.d_model}, 0.0f),
                  Tensor(Shape{config.d_model}, 0.0f)};
    a.layers.push_back(std::move(l));
  }
  if (kind == AdapterKind::task) a.head = make_linear(config.d_model, config.n_tags, rng);
  return a;
}

Tensor sinusoidal_positions(std::size_t length, std::size_t d_model) {
  Tensor t(Shape{length, d_model});
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < d_model; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / d_model);
      const double angle = static_cast<double>(pos) * freq;
      t[pos * d_model + i] = static_cast<float>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return t;
}

Node adapter_delta(const Node& h, const AdapterLayer& layer, ParamBinder& bind) {
  const std::size_t width = h.shape().back();
  if (layer.down.weight.dim(0) != width) {
    throw ConfigError("adapter expects width " + std::to_string(layer.down.weight.dim(0)) +
                      ", hidden state has " + std::to_string(width));
  }
  Node z = norm(h, layer.norm, bind);
  z = relu(linear(z, layer.down, bind));
  return linear(z, layer.up, bind);
}

Node adapter_node(const Node& h, const AdapterParams& a, std::size_t layer_index,
                  ParamBinder& bind) {
  if (layer_index >= a.layers.size()) {
    throw ConfigError("adapter '" + a.name + "' has " + std::to_string(a.layers.size()) +
                      " layers, requested layer " + std::to_string(layer_index));
  }
  return add(h, adapter_delta(h, a.layers[layer_index], bind));
}

Tensor adapter_apply(const Tensor& h, const AdapterParams& a, std::size_t layer_index) {
  ParamBinder bind;
  return adapter_node(Node::borrow(h), a, layer_index, bind).value();
}

Node encode(const Model& model, std::span<const int> ids, const ForwardSpec& spec,
            ParamBinder& bind) {
  const auto& cfg = model.config;
  const auto& b = model.backbone;
  if (ids.empty()) throw UsageError("encode: empty token sequence");
  if (ids.size() > cfg.max_len) {
    throw UsageError("encode: " + std::to_string(ids.size()) + " tokens exceed max_len " +
                     std::to_string(cfg.max_len));
  }
  Node x = embedding(bind(b.token_embedding), ids);
  x = add(x, Node::borrow(cached_positions(ids.size(), cfg.d_model)));
  x = norm(x, b.embed_norm, bind);
  for (std::size_t i = 0; i < b.layers.size(); ++i) {
    const auto& l = b.layers[i];
    x = norm(add(x, attention(x, l, cfg.n_heads, bind)), l.attn_norm, bind);
    Node ff = linear(gelu(linear(x, l.ff_in, bind)), l.ff_out, bind);
    x = norm(add(x, ff), l.ff_norm, bind);
    if (spec.language) x = spec.language->apply(x, i, bind);
    if (spec.task) x = adapter_node(x, *spec.task, i, bind);
  }
  return x;
}

Node forward_logits(const Model& model, std::span<const int> ids, std::span<const int> rows,
                    const ForwardSpec& spec, Head head, ParamBinder& bind) {
  if (head == Head::task && (!spec.task || !spec.task->head)) {
    throw UsageError("forward: task head requested without a task adapter");
  }
  Node h = encode(model, ids, spec, bind);
  if (!rows.empty()) h = gather_rows(h, rows);
  if (head == Head::task) return linear(h, *spec.task->head, bind);
  Node logits = matmul(h, transpose(bind(model.backbone.token_embedding)));
  return add_bias(logits, bind(model.backbone.mlm_bias));
}

Node forward(const Model& model, std::span<const int> ids, std::span<const int> rows,
             const ForwardSpec& spec, Head head, ParamBinder& bind) {
  return softmax(forward_logits(model, ids, rows, spec, head, bind));
}

std::unordered_set<const Tensor*> parameter_set(const Backbone& b) {
  std::unordered_set<const Tensor*> out;
  b.for_each_parameter([&](const std::string&, const Tensor& t) { out.insert(&t); });
  return out;
}

std::unordered_set<const Tensor*> parameter_set(const AdapterParams& a) {
  std::unordered_set<const Tensor*> out;
  a.for_each_parameter([&](const std::string&, const Tensor& t) { out.insert(&t); });
  return out;
}

}  // namespace emea
