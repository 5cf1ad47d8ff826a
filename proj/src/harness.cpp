#include "emea/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "emea/error.hpp"
#include "emea/metrics.hpp"

namespace emea {

namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

// --- strict JSON reading ---------------------------------------------------

class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
    for (const auto& [k, v] : j_.items()) unused_.insert(k);
  }
  ~Reader() = default;

  template <class T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    unused_.erase(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where_ + "." + key + ": wrong type");
    }
  }
  void get(const char* key, fs::path& out) {
    std::string s = out.string();
    get(key, s);
    out = s;
  }
  void get(const char* key, float& out) {
    double d = out;
    get(key, d);
    out = static_cast<float>(d);
  }
  void get(const char* key, std::optional<std::size_t>& out) {
    if (!j_.contains(key)) return;
    unused_.erase(key);
    if (j_.at(key).is_null()) {
      out.reset();
      return;
    }
    std::size_t v = 0;
    unused_.insert(key);
    get(key, v);
    out = v;
  }
  const json* section(const char* key) {
    if (!j_.contains(key)) return nullptr;
    unused_.erase(key);
    return &j_.at(key);
  }
  void finish() const {
    if (!unused_.empty()) throw ConfigError(where_ + ": unknown key '" + *unused_.begin() + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> unused_;
};

json train_to_json(const TrainConfig& t) {
  return json{{"epochs", t.epochs},
              {"batch_size", t.batch_size},
              {"lr", t.lr},
              {"seed", t.seed},
              {"mask_rate", t.mask_rate},
              {"optimizer", t.optimizer == OptimizerKind::adam ? "adam" : "sgd"},
              {"beta1", t.beta1},
              {"beta2", t.beta2},
              {"epsilon", t.epsilon}};
}

void train_from_json(const json& j, TrainConfig& t, const std::string& where) {
  Reader r(j, where);
  r.get("epochs", t.epochs);
  r.get("batch_size", t.batch_size);
  r.get("lr", t.lr);
  r.get("seed", t.seed);
  r.get("mask_rate", t.mask_rate);
  std::string opt = t.optimizer == OptimizerKind::adam ? "adam" : "sgd";
  r.get("optimizer", opt);
  if (opt == "adam") t.optimizer = OptimizerKind::adam;
  else if (opt == "sgd") t.optimizer = OptimizerKind::sgd;
  else throw ConfigError(where + ".optimizer: expected adam or sgd, got '" + opt + "'");
  r.get("beta1", t.beta1);
  r.get("beta2", t.beta2);
  r.get("epsilon", t.epsilon);
  r.finish();
}

std::string fnv_hex(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Hash of the config sections a stage depends on, so stale artifacts from a
// different configuration are detected instead of silently reused.
std::string stage_hash(const ExperimentConfig& cfg, const std::string& stage) {
  const json full = json::parse(cfg.to_json());
  json part;
  part["task"] = full["task"];
  part["continuum"] = full["continuum"];
  if (stage != "data") {
    part["model"] = full["model"];
    part["pretrain"] = full["pretrain"];
  }
  if (stage == "lang" || stage == "task" || stage == "fusion" || stage == "budget")
    part["language_adapter"] = full["language_adapter"];
  if (stage == "task" || stage == "fusion" || stage == "budget") part["task_adapter"] = full["task_adapter"];
  if (stage == "fusion") part["fusion"] = full["fusion"];
  if (stage == "budget") part["budget"] = full["budget"];
  return fnv_hex(part.dump());
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw DataError("cannot create directory " + p.string() + ": " + ec.message());
}

// True when the artifact exists and was produced by the same stage config.
bool up_to_date(const fs::path& path, const std::string& hash, bool force) {
  if (force || !fs::exists(path)) return false;
  const auto ck = load_checkpoint(path);
  const auto it = ck.metadata.find("stage_hash");
  if (it == ck.metadata.end() || it->second != hash) {
    throw ConfigError(path.string() + " was produced by a different configuration; pass --force to rebuild");
  }
  return true;
}

Checkpoint load_required(const fs::path& path, const std::string& what) {
  if (!fs::exists(path)) throw DependencyError("missing " + what + " checkpoint " + path.string());
  return load_checkpoint(path);
}

std::vector<EncodedSentence> load_unlabeled(const ExperimentConfig& cfg, const Vocabulary& vocab,
                                            const std::string& file) {
  const fs::path p = cfg.corpora() / file;
  if (!fs::exists(p)) throw DependencyError("missing corpus " + p.string() + " (run gen-data)");
  return encode_corpus(vocab, read_text_file(p)).sentences;
}

Vocabulary load_vocab(const ExperimentConfig& cfg) {
  const fs::path p = cfg.corpora() / "vocab.txt";
  if (!fs::exists(p)) throw DependencyError("missing vocabulary " + p.string() + " (run gen-data)");
  return Vocabulary::load(p);
}

Model load_model(const ExperimentConfig& cfg) {
  auto ck = load_required(backbone_path(cfg), "backbone");
  if (!ck.backbone) throw LoadError(backbone_path(cfg).string() + ": no backbone");
  Model m;
  m.config = ck.config;
  m.backbone = std::move(*ck.backbone);
  m.backbone.frozen = true;
  return m;
}

AdapterParams load_adapter(const fs::path& path, const std::string& what) {
  auto ck = load_required(path, what);
  if (ck.adapters.size() != 1) throw LoadError(path.string() + ": expected one adapter");
  auto a = std::move(ck.adapters.front());
  a.frozen = true;
  return a;
}

void save_single(const fs::path& path, const ExperimentConfig& cfg, const ModelConfig& mc,
                 const std::string& stage, const std::string& command,
                 std::optional<std::uint64_t> seed, std::optional<Backbone> backbone,
                 std::vector<AdapterParams> adapters, std::optional<FusionParams> fusion) {
  Checkpoint ck;
  ck.config = mc;
  ck.backbone = std::move(backbone);
  ck.adapters = std::move(adapters);
  ck.fusion = std::move(fusion);
  ck.metadata["stage_hash"] = stage_hash(cfg, stage);
  ck.metadata["provenance"] = provenance_line(cfg, command, seed);
  ensure_dir(path.parent_path());
  save_checkpoint(path, ck);
}

Predictions run_batches(const std::vector<EncodedSentence>& sentences, std::size_t batch_size,
                        const std::function<Predictions(const Batch&)>& f) {
  Predictions out;
  out.reserve(sentences.size());
  for (std::size_t i = 0; i < sentences.size(); i += batch_size) {
    const auto end = std::min(sentences.size(), i + batch_size);
    Batch b(sentences.begin() + static_cast<std::ptrdiff_t>(i), sentences.begin() + static_cast<std::ptrdiff_t>(end));
    auto p = f(b);
    for (auto& s : p) out.push_back(std::move(s));
  }
  return out;
}

std::size_t emea_preset_steps(const std::string& method) { return method == "emea-s1" ? 1 : 10; }

const std::vector<std::string>& fixed_methods() {
  static const std::vector<std::string> m{"en", "related", "cl", "fusion", "ensemble", "emea-s1", "emea-s10"};
  return m;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

// --- configuration -----------------------------------------------------------

void ContinuumConfig::validate() const {
  if (divergence.size() < 2 + n_related) {
    throw ConfigError("continuum: " + std::to_string(divergence.size()) + " varieties leave no test variety after " +
                      std::to_string(n_related) + " related ones");
  }
  if (divergence.front() != 0.0) throw ConfigError("continuum: the source variety must have divergence 0");
  for (double d : divergence)
    if (!(d >= 0.0 && d <= 1.0)) throw ConfigError("continuum: divergence " + std::to_string(d) + " outside [0,1]");
  if (unlabeled_sentences == 0 || labeled_sentences == 0 || test_sentences == 0 || dev_sentences == 0)
    throw ConfigError("continuum: corpus sizes must be positive");
  if (pretrain_varieties.empty()) throw ConfigError("continuum: pretrain_varieties is empty");
  for (auto v : pretrain_varieties)
    if (v >= divergence.size()) throw ConfigError("continuum: pretrain variety " + std::to_string(v) + " out of range");
}

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  c.model.d_model = 32;
  c.model.n_layers = 2;
  c.model.n_heads = 2;
  c.model.d_ff = 64;
  c.model.d_adapter = 8;
  c.model.max_len = 160;
  c.pretrain.epochs = 20;
  c.pretrain.lr = 1e-3f;
  c.pretrain.seed = 1;
  c.language_adapter.epochs = 3;
  c.language_adapter.lr = 1e-3f;
  c.language_adapter.seed = 5;
  c.task_adapter = TrainConfig::task_default(c.task);
  c.task_adapter.epochs = 40;
  c.task_adapter.lr = 3e-3f;
  c.fusion.epochs = 5;
  c.fusion.lr = 5e-5f;
  return c;
}

std::string ExperimentConfig::to_json() const {
  json j;
  j["group"] = group;
  j["paths"] = json{{"workdir", workdir.string()},
                    {"corpora", corpora_dir},
                    {"checkpoints", checkpoints_dir},
                    {"results", results_file}};
  j["task"] = emea::to_string(task);
  const auto& k = continuum;
  j["continuum"] = json{{"lexicon_seed", k.lexicon_seed},
                        {"stems", k.stems},
                        {"seed", k.seed},
                        {"divergence", k.divergence},
                        {"n_related", k.n_related},
                        {"unlabeled_sentences", k.unlabeled_sentences},
                        {"labeled_sentences", k.labeled_sentences},
                        {"dev_sentences", k.dev_sentences},
                        {"test_sentences", k.test_sentences},
                        {"vocab_max_words", k.vocab_max_words},
                        {"vocab_min_count", k.vocab_min_count},
                        {"pretrain_varieties", k.pretrain_varieties}};
  j["model"] = json{{"d_model", model.d_model}, {"n_layers", model.n_layers}, {"n_heads", model.n_heads},
                    {"d_ff", model.d_ff},       {"d_adapter", model.d_adapter}, {"max_len", model.max_len}};
  j["pretrain"] = train_to_json(pretrain);
  j["language_adapter"] = train_to_json(language_adapter);
  j["task_adapter"] = train_to_json(task_adapter);
  j["fusion"] = train_to_json(fusion);
  j["emea"] = json{{"gamma", emea.gamma},
                   {"steps", emea_steps ? json(*emea_steps) : json(nullptr)},
                   {"reduction", emea.reduction == EntropyReduction::sum ? "sum" : "mean"},
                   {"share_alpha_across_layers", emea.share_alpha_across_layers},
                   {"reset_per_batch", emea.reset_per_batch}};
  j["cl"] = json{{"lr", cl_lr}, {"steps", cl_steps}};
  j["eval"] = json{{"batch_size", batch_size},
                   {"seeds", seeds},
                   {"methods", methods},
                   {"sweep_batch_sizes", sweep_batch_sizes},
                   {"bench_batches", bench_batches},
                   {"bench_warmup", bench_warmup}};
  j["budget"] = json{{"sizes", budgets}, {"variety", budget_variety}, {"epochs", budget_epochs}};
  return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  ExperimentConfig c = defaults();
  Reader r(j, "config");
  r.get("group", c.group);
  if (const json* p = r.section("paths")) {
    Reader s(*p, "paths");
    s.get("workdir", c.workdir);
    s.get("corpora", c.corpora_dir);
    s.get("checkpoints", c.checkpoints_dir);
    s.get("results", c.results_file);
    s.finish();
  }
  std::string task = emea::to_string(c.task);
  r.get("task", task);
  c.task = task_kind_from_string(task);
  if (j.contains("task") && !j.contains("task_adapter")) {
    const auto d = TrainConfig::task_default(c.task);
    c.task_adapter.epochs = d.epochs;
  }
  if (const json* p = r.section("continuum")) {
    Reader s(*p, "continuum");
    auto& k = c.continuum;
    s.get("lexicon_seed", k.lexicon_seed);
    s.get("stems", k.stems);
    s.get("seed", k.seed);
    s.get("divergence", k.divergence);
    s.get("n_related", k.n_related);
    s.get("unlabeled_sentences", k.unlabeled_sentences);
    s.get("labeled_sentences", k.labeled_sentences);
    s.get("dev_sentences", k.dev_sentences);
    s.get("test_sentences", k.test_sentences);
    s.get("vocab_max_words", k.vocab_max_words);
    s.get("vocab_min_count", k.vocab_min_count);
    s.get("pretrain_varieties", k.pretrain_varieties);
    s.finish();
  }
  if (const json* p = r.section("model")) {
    Reader s(*p, "model");
    s.get("d_model", c.model.d_model);
    s.get("n_layers", c.model.n_layers);
    s.get("n_heads", c.model.n_heads);
    s.get("d_ff", c.model.d_ff);
    s.get("d_adapter", c.model.d_adapter);
    s.get("max_len", c.model.max_len);
    s.finish();
  }
  if (const json* p = r.section("pretrain")) train_from_json(*p, c.pretrain, "pretrain");
  if (const json* p = r.section("language_adapter")) train_from_json(*p, c.language_adapter, "language_adapter");
  if (const json* p = r.section("task_adapter")) train_from_json(*p, c.task_adapter, "task_adapter");
  if (const json* p = r.section("fusion")) train_from_json(*p, c.fusion, "fusion");
  if (const json* p = r.section("emea")) {
    Reader s(*p, "emea");
    s.get("gamma", c.emea.gamma);
    s.get("steps", c.emea_steps);
    std::string red = c.emea.reduction == EntropyReduction::sum ? "sum" : "mean";
    s.get("reduction", red);
    if (red == "sum") c.emea.reduction = EntropyReduction::sum;
    else if (red == "mean") c.emea.reduction = EntropyReduction::mean;
    else throw ConfigError("emea.reduction: expected sum or mean, got '" + red + "'");
    s.get("share_alpha_across_layers", c.emea.share_alpha_across_layers);
    s.get("reset_per_batch", c.emea.reset_per_batch);
    s.finish();
  }
  if (const json* p = r.section("cl")) {
    Reader s(*p, "cl");
    s.get("lr", c.cl_lr);
    s.get("steps", c.cl_steps);
    s.finish();
  }
  if (const json* p = r.section("eval")) {
    Reader s(*p, "eval");
    s.get("batch_size", c.batch_size);
    s.get("seeds", c.seeds);
    s.get("methods", c.methods);
    s.get("sweep_batch_sizes", c.sweep_batch_sizes);
    s.get("bench_batches", c.bench_batches);
    s.get("bench_warmup", c.bench_warmup);
    s.finish();
  }
  if (const json* p = r.section("budget")) {
    Reader s(*p, "budget");
    s.get("sizes", c.budgets);
    s.get("variety", c.budget_variety);
    s.get("epochs", c.budget_epochs);
    s.finish();
  }
  r.finish();
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DependencyError("config file not found: " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return from_json(ss.str());
}

std::string ExperimentConfig::hash() const { return fnv_hex(to_json()); }

void ExperimentConfig::validate() const {
  continuum.validate();
  ModelConfig m = model;
  m.vocab_size = std::max<std::size_t>(m.vocab_size, 1);
  m.validate();
  pretrain.validate();
  language_adapter.validate();
  task_adapter.validate();
  fusion.validate();
  emea.validate();
  if (!(cl_lr >= 0.0f)) throw ConfigError("cl.lr must be >= 0");
  if (batch_size == 0) throw ConfigError("eval.batch_size must be >= 1");
  if (seeds.empty()) throw ConfigError("eval.seeds is empty");
  for (const auto& m2 : methods)
    if (!is_known_method(m2)) throw ConfigError("unknown method '" + m2 + "'");
  for (auto s : sweep_batch_sizes)
    if (s == 0) throw ConfigError("eval.sweep_batch_sizes: batch size 0");
  if (!budgets.empty()) {
    if (budget_variety <= continuum.n_related || budget_variety >= continuum.n_varieties())
      throw ConfigError("budget.variety must name a test variety");
    for (auto b : budgets)
      if (b == 0) throw ConfigError("budget.sizes: budget 0");
  }
  for (const auto& m2 : methods) {
    if (auto b = budget_of(m2); b && std::find(budgets.begin(), budgets.end(), *b) == budgets.end())
      throw ConfigError("method " + m2 + " has no matching budget in budget.sizes");
  }
}

bool is_known_method(const std::string& method) {
  const auto& m = fixed_methods();
  return std::find(m.begin(), m.end(), method) != m.end() || budget_of(method).has_value();
}

std::optional<std::size_t> budget_of(const std::string& method) {
  const std::string prefix = "new-adapter-";
  if (!method.starts_with(prefix) || method.size() == prefix.size()) return std::nullopt;
  const std::string n = method.substr(prefix.size());
  if (!std::all_of(n.begin(), n.end(), [](char c) { return c >= '0' && c <= '9'; })) return std::nullopt;
  return static_cast<std::size_t>(std::stoull(n));
}

std::string provenance_line(const ExperimentConfig& cfg, const std::string& command,
                            std::optional<std::uint64_t> seed) {
  json p;
  p["command"] = command;
  p["version"] = kVersion;
  p["config_hash"] = cfg.hash();
  p["seed"] = seed ? json(*seed) : json(nullptr);
  p["created"] = utc_now();
  p["config"] = json::parse(cfg.to_json());
  return json{{"provenance", p}}.dump();
}

// --- records -----------------------------------------------------------------

std::string RunRecord::key() const {
  return variety + "|" + method + "|" + (seed ? std::to_string(*seed) : "mean") + "|" + std::to_string(batch_size);
}

std::string to_json_line(const RunRecord& r) {
  json j;
  j["group"] = r.group;
  j["variety"] = r.variety;
  j["method"] = r.method;
  j["seed"] = r.seed ? json(*r.seed) : json(nullptr);
  j["metric_name"] = r.metric_name;
  j["value"] = r.value;
  j["batch_size"] = r.batch_size;
  j["alpha_mean"] = r.alpha_mean;
  j["alpha_std"] = r.alpha_std;
  j["detail"] = r.detail;
  return j.dump();
}

RunRecord run_record_from_json(const std::string& line) {
  RunRecord r;
  try {
    const json j = json::parse(line);
    r.group = j.at("group").get<std::string>();
    r.variety = j.at("variety").get<std::string>();
    r.method = j.at("method").get<std::string>();
    if (!j.at("seed").is_null()) r.seed = j.at("seed").get<std::uint64_t>();
    r.metric_name = j.at("metric_name").get<std::string>();
    r.value = j.at("value").get<double>();
    r.batch_size = j.at("batch_size").get<std::size_t>();
    r.alpha_mean = j.at("alpha_mean").get<std::vector<double>>();
    r.alpha_std = j.at("alpha_std").get<std::vector<double>>();
    r.detail = j.value("detail", "");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("results record: ") + e.what());
  }
  return r;
}

AlphaStats alpha_stats(const std::vector<RunRecord>& records) {
  AlphaStats out;
  std::vector<const std::vector<float>*> rows;
  for (const auto& r : records)
    for (const auto& a : r.batch_alpha) rows.push_back(&a);
  if (rows.empty()) {
    out.warnings.push_back("alpha_stats: no EMEA records with per-batch weights");
    return out;
  }
  const std::size_t k = rows.front()->size();
  out.mean.assign(k, 0.0);
  out.std.assign(k, 0.0);
  for (const auto* a : rows) {
    if (a->size() != k) throw ContractError("alpha_stats: records mix different adapter counts");
    for (std::size_t i = 0; i < k; ++i) out.mean[i] += (*a)[i];
  }
  for (auto& m : out.mean) m /= static_cast<double>(rows.size());
  for (const auto* a : rows)
    for (std::size_t i = 0; i < k; ++i) out.std[i] += ((*a)[i] - out.mean[i]) * ((*a)[i] - out.mean[i]);
  for (auto& s : out.std) s = std::sqrt(s / static_cast<double>(rows.size()));
  return out;
}

std::vector<RunRecord> average_over_seeds(const std::vector<RunRecord>& per_seed) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const RunRecord*>> groups;
  for (const auto& r : per_seed) {
    RunRecord k = r;
    k.seed.reset();
    const std::string key = r.group + "|" + k.key() + "|" + r.metric_name;
    if (!groups.count(key)) order.push_back(key);
    groups[key].push_back(&r);
  }
  std::vector<RunRecord> out;
  for (const auto& key : order) {
    const auto& g = groups[key];
    RunRecord a = *g.front();
    a.seed.reset();
    a.detail.clear();
    a.batch_alpha.clear();
    std::vector<double> values, speeds;
    std::vector<RunRecord> with_alpha;
    for (const auto* r : g) {
      values.push_back(r->value);
      speeds.push_back(r->examples_per_second);
      for (const auto& b : r->batch_alpha) a.batch_alpha.push_back(b);
    }
    a.value = mean(values);
    a.examples_per_second = mean(speeds);
    if (!a.batch_alpha.empty()) {
      const auto st = alpha_stats({a});
      a.alpha_mean = st.mean;
      a.alpha_std = st.std;
    } else if (!g.front()->alpha_mean.empty()) {
      for (std::size_t i = 0; i < a.alpha_mean.size(); ++i) {
        std::vector<double> m;
        for (const auto* r : g) m.push_back(r->alpha_mean.at(i));
        a.alpha_mean[i] = mean(m);
      }
    }
    out.push_back(std::move(a));
  }
  return out;
}

// --- pipeline stages ---------------------------------------------------------

std::string variety_name(const ExperimentConfig& cfg, std::size_t index) {
  if (index == 0) return "src";
  if (index <= cfg.continuum.n_related) return "rel" + std::to_string(index);
  return "test" + std::to_string(index - cfg.continuum.n_related);
}

fs::path backbone_path(const ExperimentConfig& cfg) { return cfg.checkpoints() / "backbone.ckpt"; }
fs::path language_adapter_path(const ExperimentConfig& cfg, std::size_t variety) {
  return cfg.checkpoints() / ("lang_" + variety_name(cfg, variety) + ".ckpt");
}
fs::path task_adapter_path(const ExperimentConfig& cfg, std::uint64_t seed) {
  return cfg.checkpoints() / ("task_s" + std::to_string(seed) + ".ckpt");
}
fs::path fusion_path(const ExperimentConfig& cfg, std::uint64_t seed) {
  return cfg.checkpoints() / ("fusion_s" + std::to_string(seed) + ".ckpt");
}
fs::path budget_adapter_path(const ExperimentConfig& cfg, std::size_t budget, std::uint64_t seed) {
  return cfg.checkpoints() / ("new_" + std::to_string(budget) + "_s" + std::to_string(seed) + ".ckpt");
}

void generate_data(const ExperimentConfig& cfg, const StageOptions& opt) {
  cfg.validate();
  const fs::path dir = cfg.corpora();
  const fs::path stamp = dir / "stamp.json";
  const std::string hash = stage_hash(cfg, "data");
  if (!opt.force && fs::exists(stamp)) {
    std::ifstream is(stamp);
    const json j = json::parse(is, nullptr, false);
    if (!j.is_discarded() && j.value("stage_hash", "") == hash) return;
    throw ConfigError(dir.string() + " holds data from a different configuration; pass --force to regenerate");
  }
  ensure_dir(dir);
  const auto& k = cfg.continuum;
  const auto root = make_root_spec("src", k.lexicon_seed, k.stems);
  auto specs = generate_continuum(root, k.n_varieties(), k.divergence, k.seed);
  for (std::size_t v = 0; v < specs.size(); ++v) specs[v].name = variety_name(cfg, v);
  for (std::size_t v = 1; v < specs.size(); ++v) specs[v].parent = "src";
  {
    std::ofstream os(dir / "varieties.json");
    os << varieties_to_json(specs) << "\n";
  }

  std::set<std::size_t> unlabeled_set(k.pretrain_varieties.begin(), k.pretrain_varieties.end());
  for (std::size_t v = 0; v < k.n_adapters(); ++v) unlabeled_set.insert(v);
  std::vector<Corpus> unlabeled;
  for (std::size_t v : unlabeled_set) {
    unlabeled.push_back(generate_corpus(specs[v], k.unlabeled_sentences, std::nullopt, 100 + v));
    write_text_file(dir / ("unlabeled_" + specs[v].name + ".txt"), unlabeled.back());
  }
  write_column_file(dir / "train_src.tsv", generate_corpus(specs[0], k.labeled_sentences, cfg.task, 999));
  for (std::size_t v = 0; v < specs.size(); ++v) {
    write_column_file(dir / ("dev_" + specs[v].name + ".tsv"),
                      generate_corpus(specs[v], k.dev_sentences, cfg.task, 2000 + v));
    write_column_file(dir / ("test_" + specs[v].name + ".tsv"),
                      generate_corpus(specs[v], k.test_sentences, cfg.task, 5000 + v));
  }
  if (!cfg.budgets.empty()) {
    const std::size_t pool = *std::max_element(cfg.budgets.begin(), cfg.budgets.end());
    write_text_file(dir / ("budget_" + specs[cfg.budget_variety].name + ".txt"),
                    generate_corpus(specs[cfg.budget_variety], pool, std::nullopt, 7000));
  }
  std::vector<const Corpus*> vocab_src;
  for (const auto& c : unlabeled) vocab_src.push_back(&c);
  Vocabulary::build(vocab_src, k.vocab_max_words, k.vocab_min_count).save(dir / "vocab.txt");

  json s;
  s["stage_hash"] = hash;
  s["provenance"] = json::parse(provenance_line(cfg, "gen-data"))["provenance"];
  std::ofstream os(stamp);
  os << s.dump(2) << "\n";
}

void pretrain_stage(const ExperimentConfig& cfg, const StageOptions& opt) {
  if (up_to_date(backbone_path(cfg), stage_hash(cfg, "pretrain"), opt.force)) return;
  const auto vocab = load_vocab(cfg);
  std::vector<EncodedSentence> corpus;
  for (std::size_t v : cfg.continuum.pretrain_varieties) {
    auto part = load_unlabeled(cfg, vocab, "unlabeled_" + variety_name(cfg, v) + ".txt");
    corpus.insert(corpus.end(), part.begin(), part.end());
  }
  ModelConfig mc = cfg.model;
  mc.vocab_size = vocab.size();
  mc.n_tags = tag_set(cfg.task).size();
  Model model = init_model(mc, cfg.pretrain.seed);
  pretrain_backbone(model, corpus, cfg.pretrain, opt.log);
  save_single(backbone_path(cfg), cfg, mc, "pretrain", "pretrain", cfg.pretrain.seed, std::move(model.backbone), {},
              std::nullopt);
}

void language_adapter_stage(const ExperimentConfig& cfg, const StageOptions& opt) {
  const std::string hash = stage_hash(cfg, "lang");
  std::optional<Model> model;
  std::optional<Vocabulary> vocab;
  for (std::size_t v = 0; v < cfg.continuum.n_adapters(); ++v) {
    const auto path = language_adapter_path(cfg, v);
    if (up_to_date(path, hash, opt.force)) continue;
    if (!model) {
      model = load_model(cfg);
      vocab = load_vocab(cfg);
    }
    const std::string name = variety_name(cfg, v);
    TrainConfig tc = cfg.language_adapter;
    tc.seed = cfg.language_adapter.seed + v;
    auto a = train_language_adapter(load_unlabeled(cfg, *vocab, "unlabeled_" + name + ".txt"), *model, name, tc,
                                    opt.log);
    save_single(path, cfg, model->config, "lang", "train-lm-adapter", tc.seed, std::nullopt, {std::move(a)},
                std::nullopt);
  }
}

void task_adapter_stage(const ExperimentConfig& cfg, std::uint64_t seed, const StageOptions& opt) {
  const auto path = task_adapter_path(cfg, seed);
  if (up_to_date(path, stage_hash(cfg, "task"), opt.force)) return;
  const Model model = load_model(cfg);
  const auto vocab = load_vocab(cfg);
  const auto src = load_adapter(language_adapter_path(cfg, 0), "source language adapter");
  const auto train = read_column_file(cfg.corpora() / "train_src.tsv").corpus;
  const auto dev = read_column_file(cfg.corpora() / "dev_src.tsv").corpus;
  const auto etrain = encode_corpus(vocab, train, cfg.task);
  const auto edev = encode_corpus(vocab, dev, cfg.task);
  TrainConfig tc = cfg.task_adapter;
  tc.seed = seed;
  auto t = train_task_adapter(etrain, cfg.task, model, src, tc, opt.log, &edev);
  save_single(path, cfg, model.config, "task", "train-task-adapter", seed, std::nullopt, {std::move(t)},
              std::nullopt);
}

void fusion_stage(const ExperimentConfig& cfg, std::uint64_t seed, const StageOptions& opt) {
  const auto path = fusion_path(cfg, seed);
  if (up_to_date(path, stage_hash(cfg, "fusion"), opt.force)) return;
  const Model model = load_model(cfg);
  const auto vocab = load_vocab(cfg);
  std::vector<AdapterParams> adapters;
  for (std::size_t v = 0; v < cfg.continuum.n_adapters(); ++v)
    adapters.push_back(load_adapter(language_adapter_path(cfg, v), "language adapter " + variety_name(cfg, v)));
  std::vector<const AdapterParams*> ptrs;
  for (const auto& a : adapters) ptrs.push_back(&a);
  const auto task = load_adapter(task_adapter_path(cfg, seed), "task adapter (seed " + std::to_string(seed) + ")");
  const auto etrain = encode_corpus(vocab, read_column_file(cfg.corpora() / "train_src.tsv").corpus, cfg.task);
  const auto edev = encode_corpus(vocab, read_column_file(cfg.corpora() / "dev_src.tsv").corpus, cfg.task);
  TrainConfig fc = cfg.fusion;
  fc.seed = seed;
  auto f = train_fusion(etrain, cfg.task, model, ptrs, task, fc, opt.log, &edev);
  save_single(path, cfg, model.config, "fusion", "train-fusion", seed, std::nullopt, {}, std::move(f));
}

void budget_adapter_stage(const ExperimentConfig& cfg, std::size_t budget, std::uint64_t seed,
                          const StageOptions& opt) {
  const auto path = budget_adapter_path(cfg, budget, seed);
  if (up_to_date(path, stage_hash(cfg, "budget"), opt.force)) return;
  Workspace ws(cfg);
  const std::size_t warm = ws.best_related(cfg.budget_variety, seed);
  const std::string name = variety_name(cfg, cfg.budget_variety);
  const auto pool = load_unlabeled(cfg, ws.vocab(), "budget_" + name + ".txt");
  TrainConfig tc = cfg.language_adapter;
  tc.epochs = cfg.budget_epochs;
  tc.seed = seed;
  auto b = train_adapter_budgeted(pool, budget, ws.model(), name + "_new" + std::to_string(budget), tc,
                                  &ws.language_adapters()[warm], opt.log);
  save_single(path, cfg, ws.model().config, "budget", "train-lm-adapter", seed, std::nullopt, {std::move(b.adapter)},
              std::nullopt);
}

void prepare_all(const ExperimentConfig& cfg, const StageOptions& opt) {
  generate_data(cfg, opt);
  pretrain_stage(cfg, opt);
  language_adapter_stage(cfg, opt);
  bool fusion = false;
  std::set<std::size_t> budgets(cfg.budgets.begin(), cfg.budgets.end());
  for (const auto& m : cfg.methods) fusion = fusion || m == "fusion";
  for (auto seed : cfg.seeds) {
    task_adapter_stage(cfg, seed, opt);
    if (fusion) fusion_stage(cfg, seed, opt);
    for (auto b : budgets) budget_adapter_stage(cfg, b, seed, opt);
  }
}

// --- evaluation --------------------------------------------------------------

Workspace::Workspace(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
  vocab_ = load_vocab(cfg_);
  model_ = load_model(cfg_);
  for (std::size_t v = 0; v < cfg_.continuum.n_adapters(); ++v)
    adapters_.push_back(load_adapter(language_adapter_path(cfg_, v), "language adapter " + variety_name(cfg_, v)));
}

std::vector<const AdapterParams*> Workspace::adapter_ptrs() const {
  std::vector<const AdapterParams*> out;
  for (const auto& a : adapters_) out.push_back(&a);
  return out;
}

namespace {

LabeledSet load_labeled(const ExperimentConfig& cfg, const Vocabulary& vocab, const std::string& file) {
  const fs::path p = cfg.corpora() / file;
  if (!fs::exists(p)) throw DependencyError("missing corpus " + p.string() + " (run gen-data)");
  LabeledSet s;
  s.gold = read_column_file(p).corpus;
  s.encoded = encode_corpus(vocab, s.gold, cfg.task);
  return s;
}

}  // namespace

const LabeledSet& Workspace::test(std::size_t variety) {
  auto it = test_.find(variety);
  if (it == test_.end())
    it = test_.emplace(variety, load_labeled(cfg_, vocab_, "test_" + variety_name(cfg_, variety) + ".tsv")).first;
  return it->second;
}

const LabeledSet& Workspace::dev(std::size_t variety) {
  auto it = dev_.find(variety);
  if (it == dev_.end())
    it = dev_.emplace(variety, load_labeled(cfg_, vocab_, "dev_" + variety_name(cfg_, variety) + ".tsv")).first;
  return it->second;
}

const AdapterParams& Workspace::task_adapter(std::uint64_t seed) {
  auto it = tasks_.find(seed);
  if (it == tasks_.end())
    it = tasks_.emplace(seed, load_adapter(task_adapter_path(cfg_, seed), "task adapter (seed " + std::to_string(seed) + ")")).first;
  return it->second;
}

const FusionParams& Workspace::fusion(std::uint64_t seed) {
  auto it = fusions_.find(seed);
  if (it == fusions_.end()) {
    auto ck = load_required(fusion_path(cfg_, seed), "fusion (seed " + std::to_string(seed) + ")");
    if (!ck.fusion) throw LoadError(fusion_path(cfg_, seed).string() + ": no fusion parameters");
    it = fusions_.emplace(seed, std::move(*ck.fusion)).first;
  }
  return it->second;
}

const AdapterParams& Workspace::budget_adapter(std::size_t budget, std::uint64_t seed) {
  const auto key = std::make_pair(budget, seed);
  auto it = budgets_.find(key);
  if (it == budgets_.end())
    it = budgets_.emplace(key, load_adapter(budget_adapter_path(cfg_, budget, seed), "new-adapter-" + std::to_string(budget))).first;
  return it->second;
}

double Workspace::score(const LabeledSet& set, const Predictions& pred) const {
  if (pred.size() != set.gold.size()) throw ContractError("score: prediction count differs from gold");
  const auto& tags = tag_set(cfg_.task);
  TagSequences gold, got;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    gold.push_back(set.gold[i].tags);
    std::vector<std::string> p;
    for (int k : pred[i]) p.push_back(tags.at(static_cast<std::size_t>(k)));
    got.push_back(std::move(p));
  }
  return cfg_.task == TaskKind::ner ? span_f1(gold, got) : token_accuracy(gold, got);
}

std::size_t Workspace::best_related(std::size_t variety, std::uint64_t seed) {
  const auto key = std::make_pair(variety, seed);
  if (auto it = related_.find(key); it != related_.end()) return it->second;
  const auto& d = dev(variety);
  const auto& task = task_adapter(seed);
  std::size_t best = 1;
  double best_score = -1.0;
  for (std::size_t i = 1; i < adapters_.size(); ++i) {
    LanguageCombiner single({&adapters_[i]}, CombineMode::single);
    const double s = score(d, run_batches(d.encoded.sentences, cfg_.batch_size, [&](const Batch& b) {
                             return predict(model_, b, single, task);
                           }));
    if (s > best_score) {
      best_score = s;
      best = i;
    }
  }
  related_[key] = best;
  return best;
}

RunRecord evaluate_cell(Workspace& ws, std::size_t variety, const std::string& method, std::uint64_t seed,
                        std::size_t batch_size, std::optional<std::size_t> emea_steps) {
  const auto& cfg = ws.config();
  if (!is_known_method(method)) throw UsageError("unknown method '" + method + "'");
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  RunRecord rec;
  rec.group = cfg.group;
  rec.variety = variety_name(cfg, variety);
  rec.method = method;
  rec.seed = seed;
  rec.metric_name = cfg.task == TaskKind::ner ? "span_f1" : "accuracy";
  rec.batch_size = batch_size;

  const auto& test = ws.test(variety);
  const auto& task = ws.task_adapter(seed);
  const auto& model = ws.model();
  const auto adapters = ws.adapter_ptrs();
  std::function<Predictions(const Batch&)> run;

  std::optional<LanguageCombiner> lang;
  std::optional<ContinualAdapter> cl;
  std::optional<FusionCombiner> fusion;
  if (method == "en") {
    lang.emplace(std::vector<const AdapterParams*>{adapters[0]}, CombineMode::single);
  } else if (method == "related") {
    const std::size_t best = ws.best_related(variety, seed);
    rec.detail = adapters[best]->name;
    lang.emplace(std::vector<const AdapterParams*>{adapters[best]}, CombineMode::single);
  } else if (auto b = budget_of(method)) {
    lang.emplace(std::vector<const AdapterParams*>{&ws.budget_adapter(*b, seed)}, CombineMode::single);
  } else if (method == "ensemble") {
    lang.emplace(adapters, CombineMode::average);
  } else if (method == "cl") {
    // Continual: the adapter copy carries over from batch to batch.
    cl.emplace(*adapters[0], cfg.cl_lr, cfg.cl_steps, false);
    run = [&](const Batch& b) { return cl->adapt_and_predict(b, model, task); };
  } else if (method == "fusion") {
    fusion.emplace(adapters, ws.fusion(seed));
    run = [&](const Batch& b) { return predict(model, b, *fusion, task); };
  } else {
    EmeaConfig ec = cfg.emea;
    ec.steps = emea_steps ? *emea_steps : (cfg.emea_steps ? *cfg.emea_steps : emea_preset_steps(method));
    lang.emplace(adapters, CombineMode::weighted, model.config.n_layers, ec.share_alpha_across_layers);
    run = [&, ec](const Batch& b) {
      auto r = emea_adapt(b, model, *lang, task, ec);
      rec.batch_alpha.push_back(r.alpha);
      return r.predictions;
    };
  }
  if (!run) run = [&](const Batch& b) { return predict(model, b, *lang, task); };

  const auto t0 = std::chrono::steady_clock::now();
  const Predictions pred = run_batches(test.encoded.sentences, batch_size, run);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  rec.examples_per_second = static_cast<double>(test.encoded.sentences.size()) / std::max(secs, 1e-9);
  rec.value = ws.score(test, pred);
  if (!rec.batch_alpha.empty()) {
    const auto st = alpha_stats({rec});
    rec.alpha_mean = st.mean;
    rec.alpha_std = st.std;
  }
  return rec;
}

ResultsFile read_results(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DependencyError("results file not found: " + path.string());
  ResultsFile out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    if (line.starts_with("{\"provenance\"")) {
      if (out.header.empty()) out.header = line;
      continue;
    }
    try {
      out.records.push_back(run_record_from_json(line));
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

GridResult run_grid(const ExperimentConfig& cfg, const GridOptions& opt) {
  cfg.validate();
  const auto methods = opt.methods.empty() ? cfg.methods : opt.methods;
  for (const auto& m : methods)
    if (!is_known_method(m)) throw UsageError("unknown method '" + m + "'");
  std::vector<std::size_t> varieties = opt.varieties;
  if (varieties.empty())
    for (std::size_t v = cfg.continuum.n_adapters(); v < cfg.continuum.n_varieties(); ++v) varieties.push_back(v);
  for (auto v : varieties)
    if (v >= cfg.continuum.n_varieties()) throw ConfigError("variety index " + std::to_string(v) + " out of range");

  const fs::path path = cfg.results();
  const fs::path timing = fs::path(path.string() + ".timing");
  if (opt.force) {
    fs::remove(path);
    fs::remove(timing);
  }
  std::map<std::string, RunRecord> done;
  if (fs::exists(path)) {
    const auto existing = read_results(path);
    const json h = json::parse(existing.header.empty() ? "{}" : existing.header, nullptr, false);
    const std::string hash = h.is_object() && h.contains("provenance") ? h["provenance"].value("config_hash", "") : "";
    if (hash != cfg.hash())
      throw ConfigError(path.string() + " was written with config " + (hash.empty() ? "<none>" : hash) +
                        ", current config is " + cfg.hash() + "; pass --force or choose another results file");
    for (auto& r : existing.records) done.emplace(r.key(), std::move(r));
  } else {
    ensure_dir(path.parent_path());
    std::ofstream os(path);
    os << provenance_line(cfg, "eval") << "\n";
  }

  std::optional<Workspace> ws;
  GridResult out;
  std::ofstream results(path, std::ios::app);
  std::ofstream timings(timing, std::ios::app);
  for (auto seed : cfg.seeds) {
    for (const auto& m : methods) {
      for (auto v : varieties) {
        RunRecord probe;
        probe.variety = variety_name(cfg, v);
        probe.method = m;
        probe.seed = seed;
        probe.batch_size = cfg.batch_size;
        if (auto it = done.find(probe.key()); it != done.end()) {
          out.per_seed.push_back(it->second);
          continue;
        }
        if (!ws) ws.emplace(cfg);
        RunRecord r = evaluate_cell(*ws, v, m, seed, cfg.batch_size);
        results << to_json_line(r) << "\n" << std::flush;
        timings << json{{"key", r.key()}, {"examples_per_second", r.examples_per_second}}.dump() << "\n";
        ++out.computed;
        out.per_seed.push_back(std::move(r));
      }
    }
  }
  out.averages = average_over_seeds(out.per_seed);
  return out;
}

double bench_throughput(Workspace& ws, const std::string& method, std::size_t batch_size, std::size_t n_batches,
                        std::size_t warmup, std::uint64_t seed) {
  if (n_batches == 0) throw ConfigError("bench: n_batches must be >= 1");
  if (batch_size == 0) throw ConfigError("bench: batch size must be >= 1");
  const auto& cfg = ws.config();
  const std::string m = method == "single" ? "en" : method;
  if (!is_known_method(m)) throw UsageError("unknown method '" + method + "'");
  const auto& test = ws.test(cfg.continuum.n_adapters());
  const auto& all = test.encoded.sentences;
  std::vector<Batch> batches;
  for (std::size_t i = 0; i < warmup + n_batches; ++i) {
    Batch b;
    for (std::size_t k = 0; k < batch_size; ++k) b.push_back(all[(i * batch_size + k) % all.size()]);
    batches.push_back(std::move(b));
  }
  const auto& task = ws.task_adapter(seed == 0 ? cfg.seeds.front() : seed);
  const auto& model = ws.model();
  const auto adapters = ws.adapter_ptrs();
  std::function<void(const Batch&)> run;
  std::optional<LanguageCombiner> lang;
  std::optional<ContinualAdapter> cl;
  std::optional<FusionCombiner> fusion;
  if (m == "en" || m == "related") {
    lang.emplace(std::vector<const AdapterParams*>{adapters[0]}, CombineMode::single);
  } else if (auto b = budget_of(m)) {
    lang.emplace(std::vector<const AdapterParams*>{&ws.budget_adapter(*b, seed == 0 ? cfg.seeds.front() : seed)},
                 CombineMode::single);
  } else if (m == "ensemble") {
    lang.emplace(adapters, CombineMode::average);
  } else if (m == "cl") {
    cl.emplace(*adapters[0], cfg.cl_lr, cfg.cl_steps, false);
    run = [&](const Batch& b) { cl->adapt_and_predict(b, model, task); };
  } else if (m == "fusion") {
    fusion.emplace(adapters, ws.fusion(seed == 0 ? cfg.seeds.front() : seed));
    run = [&](const Batch& b) { predict(model, b, *fusion, task); };
  } else {
    EmeaConfig ec = cfg.emea;
    ec.steps = cfg.emea_steps ? *cfg.emea_steps : emea_preset_steps(m);
    lang.emplace(adapters, CombineMode::weighted, model.config.n_layers, ec.share_alpha_across_layers);
    run = [&, ec](const Batch& b) { emea_adapt(b, model, *lang, task, ec); };
  }
  if (!run) run = [&](const Batch& b) { predict(model, b, *lang, task); };
  for (std::size_t i = 0; i < warmup; ++i) run(batches[i]);
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = warmup; i < batches.size(); ++i) run(batches[i]);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return static_cast<double>(n_batches * batch_size) / std::max(secs, 1e-9);
}

std::vector<RunRecord> batch_size_sweep(Workspace& ws, std::size_t variety, const std::string& method,
                                        const std::vector<std::size_t>& sizes) {
  if (sizes.empty()) throw ConfigError("batch_size_sweep: no sizes");
  std::vector<RunRecord> out;
  for (auto size : sizes) {
    std::vector<RunRecord> per_seed;
    for (auto seed : ws.config().seeds) per_seed.push_back(evaluate_cell(ws, variety, method, seed, size));
    auto avg = average_over_seeds(per_seed);
    out.push_back(std::move(avg.front()));
  }
  return out;
}

// --- reporting ---------------------------------------------------------------

Report make_report(const std::vector<RunRecord>& per_seed, const std::string& group) {
  std::vector<const RunRecord*> rows;
  std::set<std::size_t> sizes;
  for (const auto& r : per_seed)
    if (group.empty() || r.group == group) {
      rows.push_back(&r);
      sizes.insert(r.batch_size);
    }
  if (rows.empty()) throw UsageError("report: no records for group '" + group + "'");
  auto label = [&](const RunRecord& r) {
    return sizes.size() > 1 ? r.method + " (bs=" + std::to_string(r.batch_size) + ")" : r.method;
  };
  std::vector<std::string> methods, varieties;
  std::map<std::string, std::map<std::string, std::vector<double>>> values;
  for (const auto* r : rows) {
    const std::string m = label(*r);
    if (std::find(methods.begin(), methods.end(), m) == methods.end()) methods.push_back(m);
    if (std::find(varieties.begin(), varieties.end(), r->variety) == varieties.end()) varieties.push_back(r->variety);
    values[m][r->variety].push_back(r->value);
  }
  Report rep;
  for (const auto& m : methods) {
    std::vector<double> per_variety;
    for (const auto& v : varieties) {
      const auto it = values[m].find(v);
      if (it == values[m].end()) continue;
      rep.cells[m][v] = mean(it->second);
      per_variety.push_back(rep.cells[m][v]);
    }
    rep.cells[m]["avg"] = mean(per_variety);
  }

  std::size_t width = 6;
  for (const auto& m : methods) width = std::max(width, m.size());
  std::ostringstream text, tsv;
  text << std::string(width, ' ');
  tsv << "method";
  for (const auto& v : varieties) {
    char buf[32];
    std::snprintf(buf, sizeof buf, " %8s", v.c_str());
    text << buf;
    tsv << "\t" << v;
  }
  text << "      avg\n";
  tsv << "\tavg\n";
  for (const auto& m : methods) {
    text << m << std::string(width - m.size(), ' ');
    tsv << m;
    for (const auto& v : varieties) {
      const auto it = rep.cells[m].find(v);
      char buf[32];
      if (it == rep.cells[m].end()) {
        std::snprintf(buf, sizeof buf, " %8s", "-");
        tsv << "\t";
      } else {
        std::snprintf(buf, sizeof buf, " %8.1f", 100.0 * it->second);
        char full[32];
        std::snprintf(full, sizeof full, "%.10g", it->second);
        tsv << "\t" << full;
      }
      text << buf;
    }
    char buf[32], full[32];
    std::snprintf(buf, sizeof buf, " %8.1f\n", 100.0 * rep.cells[m]["avg"]);
    std::snprintf(full, sizeof full, "%.10g", rep.cells[m]["avg"]);
    text << buf;
    tsv << "\t" << full << "\n";
  }
  rep.text = text.str();
  rep.tsv = tsv.str();
  return rep;
}

}  // namespace emea
