#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "emea/checkpoint.hpp"
#include "emea/corpus.hpp"
#include "emea/ensemble.hpp"
#include "emea/tokenizer.hpp"
#include "emea/training.hpp"

namespace emea {

// Synthetic continuum layout: variety 0 is the labeled source, varieties
// 1..n_related get language adapters, the rest are test varieties.
struct ContinuumConfig {
  std::uint64_t lexicon_seed = 7;
  std::size_t stems = 300;
  std::uint64_t seed = 11;
  std::vector<double> divergence{0.0, 0.1, 0.3, 0.2, 0.15, 0.25};
  std::size_t n_related = 2;
  std::size_t unlabeled_sentences = 2000;
  std::size_t labeled_sentences = 600;
  std::size_t dev_sentences = 200;
  std::size_t test_sentences = 300;
  std::size_t vocab_max_words = 3000;
  std::size_t vocab_min_count = 2;
  // Varieties whose unlabeled text the backbone is pretrained on.
  std::vector<std::size_t> pretrain_varieties{0, 1, 2, 3, 4, 5};

  void validate() const;
  std::size_t n_varieties() const { return divergence.size(); }
  std::size_t n_adapters() const { return 1 + n_related; }
};

struct ExperimentConfig {
  std::string group = "group1";
  std::filesystem::path workdir = "emea-work";
  std::string corpora_dir = "corpora";
  std::string checkpoints_dir = "checkpoints";
  std::string results_file = "results.jsonl";

  TaskKind task = TaskKind::ner;
  ContinuumConfig continuum;
  // vocab_size and n_tags are filled in from the generated data.
  ModelConfig model;
  TrainConfig pretrain;
  TrainConfig language_adapter;
  TrainConfig task_adapter;
  TrainConfig fusion;
  EmeaConfig emea;
  // Overrides the T of the emea-s1/emea-s10 presets when set.
  std::optional<std::size_t> emea_steps;
  float cl_lr = 2e-5f;
  std::size_t cl_steps = 1;
  std::size_t batch_size = 32;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<std::string> methods{"en", "related", "cl", "fusion", "ensemble", "emea-s1", "emea-s10"};
  // Figure-3 style comparison: adapters trained on N sentences of one test
  // variety, warm-started from the best related adapter.
  std::vector<std::size_t> budgets{1000, 10000, 50000};
  std::size_t budget_variety = 3;
  std::size_t budget_epochs = 1;
  std::vector<std::size_t> sweep_batch_sizes{1, 4, 16, 32};
  std::size_t bench_batches = 8;
  std::size_t bench_warmup = 3;

  static ExperimentConfig defaults();
  // Strict: unknown keys and wrong types raise ConfigError.
  static ExperimentConfig from_json(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);
  std::string to_json() const;
  // FNV-1a of the canonical JSON, hex.
  std::string hash() const;
  void validate() const;

  std::filesystem::path corpora() const { return workdir / corpora_dir; }
  std::filesystem::path checkpoints() const { return workdir / checkpoints_dir; }
  std::filesystem::path results() const { return workdir / results_file; }
};

// Methods accepted by the grid: the fixed list plus new-adapter-<N>.
bool is_known_method(const std::string& method);
std::optional<std::size_t> budget_of(const std::string& method);

struct RunRecord {
  std::string group;
  std::string variety;
  std::string method;
  std::optional<std::uint64_t> seed;  // nullopt for averages over seeds
  std::string metric_name;
  double value = 0.0;
  double examples_per_second = 0.0;
  std::size_t batch_size = 0;
  std::vector<double> alpha_mean;
  std::vector<double> alpha_std;
  std::string detail;  // e.g. the adapter chosen by the related baseline
  // Final mixing weights of every evaluated batch (EMEA only; not persisted).
  std::vector<std::vector<float>> batch_alpha;

  std::string key() const;  // variety|method|seed|batch_size
};

// Results file line. examples_per_second is not written: it lives in the
// timing log so that reruns reproduce the results file byte for byte.
std::string to_json_line(const RunRecord& r);
RunRecord run_record_from_json(const std::string& line);

struct AlphaStats {
  std::vector<double> mean;
  std::vector<double> std;
  std::vector<std::string> warnings;
};

// Per-adapter mean and population standard deviation of the final weights
// over all batches of the given EMEA records.
AlphaStats alpha_stats(const std::vector<RunRecord>& records);

// Unweighted mean over seeds for every (variety, method, batch size).
std::vector<RunRecord> average_over_seeds(const std::vector<RunRecord>& per_seed);

// --- pipeline stages ---------------------------------------------------------

// Every stage is a no-op when its outputs exist, unless force is set.
struct StageOptions {
  bool force = false;
  TrainLogger log;
};

void generate_data(const ExperimentConfig& cfg, const StageOptions& opt = {});
void pretrain_stage(const ExperimentConfig& cfg, const StageOptions& opt = {});
void language_adapter_stage(const ExperimentConfig& cfg, const StageOptions& opt = {});
void task_adapter_stage(const ExperimentConfig& cfg, std::uint64_t seed, const StageOptions& opt = {});
void fusion_stage(const ExperimentConfig& cfg, std::uint64_t seed, const StageOptions& opt = {});
void budget_adapter_stage(const ExperimentConfig& cfg, std::size_t budget, std::uint64_t seed,
                          const StageOptions& opt = {});
// All of the above for every seed and budget.
void prepare_all(const ExperimentConfig& cfg, const StageOptions& opt = {});

std::string variety_name(const ExperimentConfig& cfg, std::size_t index);
std::filesystem::path backbone_path(const ExperimentConfig& cfg);
std::filesystem::path language_adapter_path(const ExperimentConfig& cfg, std::size_t variety);
std::filesystem::path task_adapter_path(const ExperimentConfig& cfg, std::uint64_t seed);
std::filesystem::path fusion_path(const ExperimentConfig& cfg, std::uint64_t seed);
std::filesystem::path budget_adapter_path(const ExperimentConfig& cfg, std::size_t budget,
                                          std::uint64_t seed);

// --- evaluation --------------------------------------------------------------

struct LabeledSet {
  Corpus gold;
  EncodedCorpus encoded;
};

// Everything evaluation needs, loaded from the workdir. Per-seed artifacts
// are loaded on demand and cached.
class Workspace {
 public:
  explicit Workspace(ExperimentConfig cfg);

  const ExperimentConfig& config() const { return cfg_; }
  const Model& model() const { return model_; }
  const Vocabulary& vocab() const { return vocab_; }
  const std::vector<AdapterParams>& language_adapters() const { return adapters_; }
  std::vector<const AdapterParams*> adapter_ptrs() const;
  const LabeledSet& test(std::size_t variety);
  const LabeledSet& dev(std::size_t variety);
  const AdapterParams& task_adapter(std::uint64_t seed);
  const FusionParams& fusion(std::uint64_t seed);
  const AdapterParams& budget_adapter(std::size_t budget, std::uint64_t seed);
  // Index into language_adapters() of the related adapter with the best dev
  // score on the variety.
  std::size_t best_related(std::size_t variety, std::uint64_t seed);

  double score(const LabeledSet& set, const Predictions& pred) const;

 private:
  ExperimentConfig cfg_;
  Model model_;
  Vocabulary vocab_;
  std::vector<AdapterParams> adapters_;
  std::map<std::size_t, LabeledSet> test_, dev_;
  std::map<std::uint64_t, AdapterParams> tasks_;
  std::map<std::uint64_t, FusionParams> fusions_;
  std::map<std::pair<std::size_t, std::uint64_t>, AdapterParams> budgets_;
  std::map<std::pair<std::size_t, std::uint64_t>, std::size_t> related_;
};

// One (variety, method, seed) cell at the given batch size. EMEA presets fix
// T (1 or 10); `emea_steps`, then the config override, replace it when set.
RunRecord evaluate_cell(Workspace& ws, std::size_t variety, const std::string& method,
                        std::uint64_t seed, std::size_t batch_size,
                        std::optional<std::size_t> emea_steps = std::nullopt);

struct GridOptions {
  std::vector<std::string> methods;      // empty: config methods
  std::vector<std::size_t> varieties;    // empty: all test varieties
  bool force = false;                    // discard an existing results file
};

struct GridResult {
  std::vector<RunRecord> per_seed;
  std::vector<RunRecord> averages;
  std::size_t computed = 0;  // cells evaluated in this call
};

// Resumable: cells already in the results file are read back, not rerun.
GridResult run_grid(const ExperimentConfig& cfg, const GridOptions& opt = {});

// examples/second of `method` over n_batches test batches after `warmup`
// untimed ones.
double bench_throughput(Workspace& ws, const std::string& method, std::size_t batch_size,
                        std::size_t n_batches, std::size_t warmup = 3, std::uint64_t seed = 0);

// One averaged EMEA record per batch size over the configured seeds.
std::vector<RunRecord> batch_size_sweep(Workspace& ws, std::size_t variety,
                                        const std::string& method,
                                        const std::vector<std::size_t>& sizes);

// --- reporting ---------------------------------------------------------------

struct ResultsFile {
  std::string header;  // provenance line
  std::vector<RunRecord> records;
};

ResultsFile read_results(const std::filesystem::path& path);

struct Report {
  std::string text;  // aligned table, methods x (varieties + avg)
  std::string tsv;
  // method -> variety -> mean; "avg" holds the unweighted mean over varieties
  std::map<std::string, std::map<std::string, double>> cells;
};

Report make_report(const std::vector<RunRecord>& per_seed, const std::string& group);

// {"provenance":{...}} line written at the top of every output file.
std::string provenance_line(const ExperimentConfig& cfg, const std::string& command,
                            std::optional<std::uint64_t> seed = std::nullopt);

inline constexpr const char* kVersion = "0.1.0";

}  // namespace emea
