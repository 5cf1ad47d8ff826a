// emea: pipeline driver. Run `emea --help` for the subcommands.

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "emea/error.hpp"
#include "emea/harness.hpp"

namespace fs = std::filesystem;
using namespace emea;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitUsage = 2;
constexpr int kExitDependency = 3;
constexpr int kExitConfig = 4;

int exit_code(const Error& e) {
  const std::string c = e.category();
  if (c == "usage") return kExitUsage;
  if (c == "dependency" || c == "load") return kExitDependency;
  if (c == "config") return kExitConfig;
  return kExitOther;
}

// Exclusive lock on the workdir; a lock left by a dead process is taken over.
class WorkdirLock {
 public:
  explicit WorkdirLock(const fs::path& workdir) : path_(workdir / ".emea.lock") {
    fs::create_directories(workdir);
    for (int attempt = 0; attempt < 2; ++attempt) {
      const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
      if (fd >= 0) {
        const std::string pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
        ::close(fd);
        held_ = true;
        return;
      }
      if (errno != EEXIST) throw Error("cannot create lock " + path_.string());
      long owner = 0;
      std::ifstream(path_) >> owner;
      if (owner > 0 && (::kill(static_cast<pid_t>(owner), 0) == 0 || errno == EPERM))
        throw Error("workdir " + workdir.string() + " is locked by process " + std::to_string(owner));
      fs::remove(path_);
    }
    throw Error("cannot acquire lock " + path_.string());
  }
  ~WorkdirLock() {
    if (held_) {
      std::error_code ec;
      fs::remove(path_, ec);
    }
  }
  WorkdirLock(const WorkdirLock&) = delete;
  WorkdirLock& operator=(const WorkdirLock&) = delete;

 private:
  fs::path path_;
  bool held_ = false;
};

std::vector<std::string> split_list(const std::vector<std::string>& in) {
  std::vector<std::string> out;
  for (const auto& s : in) {
    std::size_t start = 0;
    while (start <= s.size()) {
      const auto end = s.find(',', start);
      const auto item = s.substr(start, end == std::string::npos ? std::string::npos : end - start);
      if (!item.empty()) out.push_back(item);
      if (end == std::string::npos) break;
      start = end + 1;
    }
  }
  return out;
}

std::size_t parse_variety(const ExperimentConfig& cfg, const std::string& s) {
  for (std::size_t v = 0; v < cfg.continuum.n_varieties(); ++v)
    if (variety_name(cfg, v) == s) return v;
  try {
    std::size_t used = 0;
    const auto v = std::stoul(s, &used);
    if (used == s.size() && v < cfg.continuum.n_varieties()) return v;
  } catch (const std::exception&) {
  }
  throw UsageError("unknown variety '" + s + "'");
}

TrainLogger epoch_logger(bool quiet) {
  if (quiet) return {};
  return [](const EpochRecord& r) { std::cerr << to_json_line(r) << "\n"; };
}

void write_with_header(const fs::path& path, const ExperimentConfig& cfg, const std::string& command,
                       const std::string& body) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << provenance_line(cfg, command) << "\n" << body;
}

struct Options {
  std::string config;
  std::string workdir;
  std::optional<std::uint64_t> seed;
  bool force = false;
  bool quiet = false;
  std::string group;

  // train-*
  std::optional<std::size_t> epochs;
  std::optional<float> lr;
  std::vector<std::string> varieties;
  std::optional<std::size_t> budget;

  // eval / bench
  std::vector<std::string> methods;
  std::optional<std::size_t> steps;
  std::optional<float> gamma;
  std::optional<std::size_t> batch_size;
  std::string results;
  std::optional<std::size_t> batches;
  std::optional<std::size_t> warmup;
  bool sweep = false;

  // report
  std::string out;
};

// Flags override the config file; the merged config is what every output's
// provenance header records.
ExperimentConfig effective_config(const Options& o, const std::string& command) {
  ExperimentConfig cfg = o.config.empty() ? ExperimentConfig::defaults() : ExperimentConfig::load(o.config);
  if (const char* env = std::getenv("EMEA_WORKDIR"); env && *env) cfg.workdir = env;
  if (!o.workdir.empty()) cfg.workdir = o.workdir;
  if (!o.group.empty()) cfg.group = o.group;
  if (!o.results.empty()) cfg.results_file = o.results;
  if (o.batch_size) cfg.batch_size = *o.batch_size;
  if (o.steps) cfg.emea_steps = *o.steps;
  if (o.gamma) cfg.emea.gamma = *o.gamma;
  if (o.batches) cfg.bench_batches = *o.batches;
  if (o.warmup) cfg.bench_warmup = *o.warmup;
  if (!o.methods.empty() && command == "eval") cfg.methods = split_list(o.methods);

  TrainConfig* phase = nullptr;
  if (command == "pretrain") phase = &cfg.pretrain;
  if (command == "train-lm-adapter") phase = o.budget ? nullptr : &cfg.language_adapter;
  if (command == "train-task-adapter") phase = &cfg.task_adapter;
  if (command == "train-fusion") phase = &cfg.fusion;
  if (phase && o.epochs) phase->epochs = *o.epochs;
  if (phase && o.lr) phase->lr = *o.lr;
  if (command == "train-lm-adapter" && o.budget && o.epochs) cfg.budget_epochs = *o.epochs;

  if (o.seed) {
    if (command == "gen-data") cfg.continuum.seed = *o.seed;
    else if (command == "pretrain") cfg.pretrain.seed = *o.seed;
    else if (command == "train-lm-adapter" && !o.budget) cfg.language_adapter.seed = *o.seed;
    else cfg.seeds = {*o.seed};
  }
  cfg.validate();
  return cfg;
}

int run_eval(const Options& o, const ExperimentConfig& cfg) {
  GridOptions g;
  for (const auto& v : split_list(o.varieties)) g.varieties.push_back(parse_variety(cfg, v));
  g.force = o.force;
  const auto r = run_grid(cfg, g);
  std::cerr << "evaluated " << r.computed << " new cells, " << r.per_seed.size() - r.computed << " reused\n";
  std::cout << make_report(r.per_seed, cfg.group).text;
  return kExitOk;
}

int run_bench(const Options& o, const ExperimentConfig& cfg) {
  Workspace ws(cfg);
  const fs::path path = cfg.workdir / "bench.jsonl";
  std::string body;
  if (o.sweep) {
    const auto methods = o.methods.empty() ? std::vector<std::string>{"emea-s10"} : split_list(o.methods);
    const std::size_t variety = o.varieties.empty() ? cfg.continuum.n_adapters() : parse_variety(cfg, o.varieties.front());
    for (const auto& m : methods) {
      for (const auto& r : batch_size_sweep(ws, variety, m, cfg.sweep_batch_sizes)) {
        std::printf("%-10s %-8s bs=%-3zu %s=%.4f\n", m.c_str(), r.variety.c_str(), r.batch_size, r.metric_name.c_str(),
                    r.value);
        body += to_json_line(r) + "\n";
      }
    }
  } else {
    const auto methods =
        o.methods.empty() ? std::vector<std::string>{"single", "ensemble", "emea-s1", "emea-s10"} : split_list(o.methods);
    for (const auto& m : methods) {
      const double eps = bench_throughput(ws, m, cfg.batch_size, cfg.bench_batches, cfg.bench_warmup, cfg.seeds.front());
      std::printf("%-10s bs=%-3zu %10.1f examples/s\n", m.c_str(), cfg.batch_size, eps);
      nlohmann::ordered_json j{{"method", m}, {"batch_size", cfg.batch_size}, {"examples_per_second", eps}};
      body += j.dump() + "\n";
    }
  }
  write_with_header(path, cfg, o.sweep ? "bench --sweep" : "bench", body);
  return kExitOk;
}

int run_report(const Options& o, const ExperimentConfig& cfg) {
  const auto file = read_results(cfg.results());
  const auto rep = make_report(file.records, o.group.empty() ? cfg.group : o.group);
  std::cout << rep.text;
  const fs::path out = o.out.empty() ? cfg.workdir / "report" : fs::path(o.out);
  write_with_header(fs::path(out.string() + ".txt"), cfg, "report", rep.text);
  write_with_header(fs::path(out.string() + ".tsv"), cfg, "report", rep.tsv);
  return kExitOk;
}

int dispatch(const std::string& command, const Options& o) {
  const ExperimentConfig cfg = effective_config(o, command);
  if (command == "report") return run_report(o, cfg);
  WorkdirLock lock(cfg.workdir);
  StageOptions st{o.force, epoch_logger(o.quiet)};
  if (command == "gen-data") {
    generate_data(cfg, st);
  } else if (command == "pretrain") {
    pretrain_stage(cfg, st);
  } else if (command == "train-lm-adapter") {
    if (o.budget) {
      for (auto seed : cfg.seeds) budget_adapter_stage(cfg, *o.budget, seed, st);
    } else {
      language_adapter_stage(cfg, st);
    }
  } else if (command == "train-task-adapter") {
    for (auto seed : cfg.seeds) task_adapter_stage(cfg, seed, st);
  } else if (command == "train-fusion") {
    for (auto seed : cfg.seeds) fusion_stage(cfg, seed, st);
  } else if (command == "prepare") {
    prepare_all(cfg, st);
  } else if (command == "eval") {
    return run_eval(o, cfg);
  } else if (command == "bench") {
    return run_bench(o, cfg);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adapter ensembling with entropy-minimized weights on a synthetic dialect continuum"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  Options o;
  app.add_option("--config", o.config, "experiment config (JSON)");
  app.add_option("--workdir", o.workdir, "working directory (overrides EMEA_WORKDIR and the config)");
  app.add_option("--seed", o.seed, "seed for the command's stochastic stage");
  app.add_flag("--force", o.force, "rebuild outputs that already exist");
  app.add_flag("-q,--quiet", o.quiet, "no per-epoch log lines");
  app.add_option("--group", o.group, "experiment group label");

  auto sub = [&](const char* name, const char* help) {
    auto* s = app.add_subcommand(name, help);
    s->fallthrough();
    return s;
  };
  sub("gen-data", "generate the synthetic continuum, corpora and vocabulary");
  auto* pre = sub("pretrain", "pretrain the backbone with masked language modelling");
  pre->add_option("--epochs", o.epochs);
  pre->add_option("--lr", o.lr);
  auto* lm = sub("train-lm-adapter", "train language adapters (or a budgeted adapter with --budget)");
  lm->add_option("--epochs", o.epochs);
  lm->add_option("--lr", o.lr);
  lm->add_option("--budget", o.budget, "sentences of the budget variety");
  auto* task = sub("train-task-adapter", "train the task adapter on the source variety");
  task->add_option("--epochs", o.epochs);
  task->add_option("--lr", o.lr);
  auto* fusion = sub("train-fusion", "train the fusion baseline");
  fusion->add_option("--epochs", o.epochs);
  fusion->add_option("--lr", o.lr);
  sub("prepare", "all of the above");
  auto* ev = sub("eval", "evaluate methods on test varieties and append to the results file");
  ev->add_option("--method", o.methods, "methods (repeatable or comma separated)");
  ev->add_option("--variety", o.varieties, "test varieties by name or index");
  ev->add_option("--steps", o.steps, "EMEA steps T (overrides the preset)");
  ev->add_option("--gamma", o.gamma, "EMEA learning rate");
  ev->add_option("--batch-size", o.batch_size);
  ev->add_option("--results", o.results, "results file, relative to the workdir");
  auto* bench = sub("bench", "throughput, or F1 against batch size with --sweep");
  bench->add_option("--method", o.methods);
  bench->add_option("--variety", o.varieties);
  bench->add_option("--batch-size", o.batch_size);
  bench->add_option("--batches", o.batches);
  bench->add_option("--warmup", o.warmup);
  bench->add_option("--steps", o.steps);
  bench->add_option("--gamma", o.gamma);
  bench->add_flag("--sweep", o.sweep);
  auto* report = sub("report", "render the results file as a method x variety table");
  report->add_option("--results", o.results);
  report->add_option("--out", o.out, "output prefix for .txt and .tsv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage: " << e.what() << "\n";
    return kExitUsage;
  }

  std::string command;
  for (const auto* s : app.get_subcommands()) command = s->get_name();
  try {
    return dispatch(command, o);
  } catch (const Error& e) {
    std::cerr << e.category() << ": " << e.what() << "\n";
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOther;
  }
}
