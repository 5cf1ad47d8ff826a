// Acceptance suite: one PASS/FAIL line per criterion.
//
//   emea_acceptance [--workdir DIR] [--only 1,2,...] [--reuse]
//
// Criteria 1-4 and 9 run on tiny random models. 5-8 and 10 build the
// reference continuum with the default config in DIR (fresh unless --reuse)
// and evaluate the full grid.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "emea/ensemble.hpp"
#include "emea/harness.hpp"
#include "emea/metrics.hpp"
#include "fixtures.hpp"
#include "oracle.hpp"

using namespace emea;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

struct Tiny {
  ModelConfig cfg;
  Model model;
  std::vector<AdapterParams> langs;
  AdapterParams task;

  Tiny(std::uint64_t seed, std::size_t r, std::size_t d_model)
      : cfg(fixtures::tiny_config(d_model)), model(fixtures::frozen_model(cfg, seed)),
        task(fixtures::task_adapter(cfg, seed + 100)) {
    for (std::size_t i = 0; i < r; ++i)
      langs.push_back(fixtures::language_adapter(cfg, "l" + std::to_string(i), seed + 10 * (i + 1)));
  }
  std::vector<const AdapterParams*> ptrs() const {
    std::vector<const AdapterParams*> out;
    for (const auto& a : langs) out.push_back(&a);
    return out;
  }
};

double max_logit_gap(const Model& m, const Batch& batch, const LayerCombiner& a, const LayerCombiner& b,
                     const AdapterParams& task) {
  double gap = 0.0;
  for (const auto& s : batch) {
    ParamBinder b1, b2;
    const Tensor x = forward_logits(m, s.ids, s.word_starts, {&a, &task}, Head::task, b1).value();
    const Tensor y = forward_logits(m, s.ids, s.word_starts, {&b, &task}, Head::task, b2).value();
    for (std::size_t i = 0; i < x.numel(); ++i) gap = std::max(gap, std::fabs(static_cast<double>(x[i]) - y[i]));
  }
  return gap;
}

// 1. Analytic entropy gradient against central differences with step 1e-3.
Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::size_t r = 2 + seed % 2;
    Tiny t(seed, r, seed % 2 ? 16 : 8);
    LanguageCombiner c(t.ptrs(), CombineMode::weighted);
    std::mt19937_64 rng(seed + 50);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    std::vector<double> beta(r);
    for (std::size_t i = 0; i < r; ++i) beta[i] = c.logits()[i] = u(rng);
    const auto batch = fixtures::random_batch(rng, t.cfg.vocab_size, 4);
    Tensor grad;
    entropy_gradient(t.model, batch, c, t.task, EntropyReduction::sum, grad);
    const auto numeric = oracle::entropy_gradient(t.model, batch, t.ptrs(), beta, t.task, 1e-3);
    worst = std::max(worst, oracle::relative_error(oracle::to_double(grad), numeric));
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-3 && secs < 60.0, "max relative error " + fmt("%.2e", worst) + " (< 1e-3), " + fmt("%.1fs", secs)};
}

// 2. T=0 equals the uniform ensemble; R=1 weighted equals single; identical
// adapters keep alpha exactly uniform.
Outcome degeneracies() {
  const auto t0 = Clock::now();
  double gap_a = 0.0, gap_b = 0.0;
  bool tie = true;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Tiny t(seed + 20, 3, seed % 2 ? 16 : 8);
    std::mt19937_64 rng(seed + 70);
    const auto batch = fixtures::random_batch(rng, t.cfg.vocab_size, 4);
    LanguageCombiner w(t.ptrs(), CombineMode::weighted);
    LanguageCombiner avg(t.ptrs(), CombineMode::average);
    EmeaConfig cfg;
    cfg.steps = 0;
    emea_adapt(batch, t.model, w, t.task, cfg);
    gap_a = std::max(gap_a, max_logit_gap(t.model, batch, w, avg, t.task));

    LanguageCombiner one({t.ptrs()[0]}, CombineMode::weighted);
    one.logits()[0] = 2.5f;
    LanguageCombiner single({t.ptrs()[0]}, CombineMode::single);
    gap_b = std::max(gap_b, max_logit_gap(t.model, batch, one, single, t.task));

    const AdapterParams copy = t.langs[0];
    LanguageCombiner twin({&t.langs[0], &copy}, CombineMode::weighted);
    for (std::size_t steps : {1u, 5u, 10u}) {
      cfg.steps = steps;
      const auto r = emea_adapt(batch, t.model, twin, t.task, cfg);
      tie = tie && r.alpha[0] == 0.5f && r.alpha[1] == 0.5f;
    }
  }
  const double secs = seconds_since(t0);
  return {gap_a <= 1e-6 && gap_b <= 1e-6 && tie && secs < 60.0,
          "T=0 gap " + fmt("%.1e", gap_a) + ", R=1 gap " + fmt("%.1e", gap_b) +
              (tie ? ", tie kept" : ", tie broken") + ", " + fmt("%.1fs", secs)};
}

// 3. One EMEA step with gamma 0.1 does not raise the batch entropy.
Outcome entropy_descent() {
  const auto t0 = Clock::now();
  std::size_t ok = 0;
  const std::size_t trials = 100;
  for (std::size_t i = 0; i < trials; ++i) {
    Tiny t(500 + i, 2 + i % 2, 8);
    std::mt19937_64 rng(900 + i);
    const auto batch = fixtures::random_batch(rng, t.cfg.vocab_size, 4);
    LanguageCombiner w(t.ptrs(), CombineMode::weighted);
    EmeaConfig cfg;
    cfg.gamma = 0.1f;
    cfg.steps = 1;
    const auto r = emea_adapt(batch, t.model, w, t.task, cfg);
    ok += r.entropy_trace.at(1) <= r.entropy_trace.at(0);
  }
  const double secs = seconds_since(t0);
  return {ok >= 95 && secs < 120.0, std::to_string(ok) + "/100 batches descend, " + fmt("%.1fs", secs)};
}

// 4. Bitwise isolation of frozen parameters; CL touches only its copy.
Outcome isolation() {
  bool ok = true;
  std::string why;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Tiny t(seed + 40, 3, 8);
    const auto bb = fixtures::snapshot(t.model.backbone);
    std::vector<std::vector<Tensor>> langs;
    for (const auto& a : t.langs) langs.push_back(fixtures::snapshot(a));
    const auto task = fixtures::snapshot(t.task);
    std::mt19937_64 rng(seed);
    for (bool shared : {true, false}) {
      LanguageCombiner w(t.ptrs(), CombineMode::weighted, t.cfg.n_layers, shared);
      EmeaConfig cfg;
      cfg.steps = 10;
      cfg.share_alpha_across_layers = shared;
      emea_adapt(fixtures::random_batch(rng, t.cfg.vocab_size, 3), t.model, w, t.task, cfg);
    }
    ContinualAdapter cl(t.langs[0], 1e-1f, 2, false);
    cl.adapt_and_predict(fixtures::random_batch(rng, t.cfg.vocab_size, 3), t.model, t.task);
    const bool same_bb = fixtures::unchanged(t.model.backbone, bb);
    bool same_langs = true;
    for (std::size_t i = 0; i < t.langs.size(); ++i) same_langs = same_langs && fixtures::unchanged(t.langs[i], langs[i]);
    const bool same_task = fixtures::unchanged(t.task, task);
    const bool copy_moved = !fixtures::unchanged(cl.current(), langs[0]);
    if (!(same_bb && same_langs && same_task && copy_moved)) {
      ok = false;
      why = "seed " + std::to_string(seed) + (same_bb ? "" : " backbone changed") + (same_langs ? "" : " adapter changed") +
            (same_task ? "" : " task adapter changed") + (copy_moved ? "" : " CL copy did not move");
    }
  }
  return {ok, ok ? "backbone, language and task adapters bitwise equal; CL copy updated" : why};
}

// 9. Hand-computed metric fixtures.
Outcome metric_fixtures() {
  using T = TagSequences;
  struct Case {
    const char* name;
    double got, want;
  };
  const T gold1{{"B-PER", "I-PER", "O", "B-LOC", "I-LOC"}};
  std::vector<Case> cases{
      {"span perfect", span_f1(gold1, gold1), 1.0},
      {"span no predictions", span_f1(gold1, T{{"O", "O", "O", "O", "O"}}), 0.0},
      {"span half recall", span_f1(gold1, T{{"B-PER", "I-PER", "O", "O", "O"}}), 2.0 / 3.0},
      {"span boundary mismatch", span_f1(T{{"B-PER", "I-PER", "O"}}, T{{"B-PER", "O", "O"}}), 0.0},
      {"span wrong type plus spurious",
       span_f1(T{{"B-PER", "O", "B-LOC", "O"}}, T{{"B-PER", "O", "B-ORG", "B-LOC"}}), 0.4},
      {"span micro over sentences",
       span_f1(T{{"B-PER", "O"}, {"B-LOC", "O"}}, T{{"B-PER", "O"}, {"O", "B-LOC"}}), 0.5},
      {"accuracy perfect", token_accuracy(T{{"N", "V"}}, T{{"N", "V"}}), 1.0},
      {"accuracy all wrong", token_accuracy(T{{"N", "V"}}, T{{"V", "N"}}), 0.0},
      {"accuracy half", token_accuracy(T{{"N", "N", "V", "V"}}, T{{"N", "N", "N", "N"}}), 0.5},
      {"macro f1 unpredicted tag", token_f1(T{{"N", "N", "V", "V"}}, T{{"N", "N", "N", "N"}}), 1.0 / 3.0},
      {"macro f1 unequal", token_f1(T{{"N", "N", "N", "V"}}, T{{"N", "N", "V", "V"}}), (0.8 + 2.0 / 3.0) / 2.0},
  };
  std::size_t ok = 0;
  std::string bad;
  for (const auto& c : cases) {
    if (std::fabs(c.got - c.want) <= 1e-12) ++ok;
    else bad += std::string(" ") + c.name + "=" + fmt("%.6f", c.got);
  }
  return {ok == cases.size(), std::to_string(ok) + "/" + std::to_string(cases.size()) + " fixtures exact" + bad};
}

// --- pipeline criteria -------------------------------------------------------

struct Pipeline {
  ExperimentConfig cfg;
  double prepare_seconds = 0.0;
  double grid_seconds = 0.0;
  GridResult grid;
  std::optional<Workspace> ws;

  // method -> mean over seeds and test varieties
  std::map<std::string, double> averages() const {
    std::map<std::string, std::vector<double>> v;
    for (const auto& r : grid.per_seed) v[r.method].push_back(r.value);
    std::map<std::string, double> out;
    for (const auto& [m, xs] : v) {
      double s = 0.0;
      for (double x : xs) s += x;
      out[m] = s / static_cast<double>(xs.size());
    }
    return out;
  }
};

Outcome directional(const Pipeline& p) {
  const auto avg = p.averages();
  const double s10 = avg.at("emea-s10"), ens = avg.at("ensemble");
  const double single = std::max({avg.at("en"), avg.at("related"), avg.at("cl")});
  const double total = p.prepare_seconds + p.grid_seconds;
  const bool a = s10 >= ens - 0.001, b = ens >= single - 0.001, c = s10 >= single + 0.005;
  std::ostringstream os;
  os << "emea-s10 " << fmt("%.2f", 100 * s10) << ", ensemble " << fmt("%.2f", 100 * ens) << ", best single "
     << fmt("%.2f", 100 * single) << " [s10>=ens-0.1 " << (a ? "ok" : "NO") << ", ens>=single-0.1 "
     << (b ? "ok" : "NO") << ", s10>=single+0.5 " << (c ? "ok" : "NO") << "], pipeline " << fmt("%.0fs", total);
  // Mean final weight per adapter (reported only).
  std::vector<RunRecord> emea;
  for (const auto& r : p.grid.per_seed)
    if (r.method == "emea-s10") emea.push_back(r);
  std::vector<double> alpha;
  for (const auto& r : emea) {
    alpha.resize(r.alpha_mean.size(), 0.0);
    for (std::size_t i = 0; i < alpha.size(); ++i) alpha[i] += r.alpha_mean[i] / static_cast<double>(emea.size());
  }
  os << "; emea-s10 mean alpha";
  for (std::size_t i = 0; i < alpha.size(); ++i) os << " " << variety_name(p.cfg, i) << "=" << fmt("%.2f", alpha[i]);
  return {a && b && c && total < 1800.0, os.str()};
}

Outcome batch_trend(Pipeline& p) {
  const auto& cfg = p.cfg;
  std::map<std::size_t, double> by_size;
  for (std::size_t v = cfg.continuum.n_adapters(); v < cfg.continuum.n_varieties(); ++v)
    for (const auto& r : batch_size_sweep(*p.ws, v, "emea-s10", {1, 4, 16, 32}))
      by_size[r.batch_size] += r.value / static_cast<double>(cfg.continuum.n_varieties() - cfg.continuum.n_adapters());
  const double ens = p.averages().at("ensemble");
  bool floor = true;
  std::ostringstream os;
  for (const auto& [bs, f] : by_size) {
    os << "bs" << bs << " " << fmt("%.2f", 100 * f) << ", ";
    floor = floor && f >= ens - 0.003;
  }
  const bool trend = by_size.at(1) >= by_size.at(32) - 0.003;
  os << "ensemble " << fmt("%.2f", 100 * ens);
  return {trend && floor, os.str()};
}

Outcome throughput(Pipeline& p) {
  const std::size_t bs = p.cfg.batch_size;
  std::map<std::string, double> eps;
  for (const char* m : {"single", "ensemble", "emea-s1", "emea-s10"})
    eps[m] = bench_throughput(*p.ws, m, bs, p.cfg.bench_batches, p.cfg.bench_warmup, p.cfg.seeds.front());
  const double ratio = eps["emea-s1"] / eps["emea-s10"];
  const bool order = eps["single"] >= eps["ensemble"] && eps["ensemble"] >= eps["emea-s1"] &&
                     eps["emea-s1"] >= eps["emea-s10"];
  std::ostringstream os;
  os << "single " << fmt("%.0f", eps["single"]) << ", ensemble " << fmt("%.0f", eps["ensemble"]) << ", emea-s1 "
     << fmt("%.1f", eps["emea-s1"]) << ", emea-s10 " << fmt("%.1f", eps["emea-s10"]) << " ex/s; s1/s10 "
     << fmt("%.2f", ratio);
  return {order && ratio >= 2.0 && ratio <= 15.0, os.str()};
}

Outcome budgets(Pipeline& p) {
  const auto& cfg = p.cfg;
  const std::size_t v = cfg.budget_variety;
  const std::size_t small = *std::min_element(cfg.budgets.begin(), cfg.budgets.end());
  const std::size_t large = *std::max_element(cfg.budgets.begin(), cfg.budgets.end());
  auto mean_over_seeds = [&](const std::string& method) {
    double s = 0.0;
    for (auto seed : cfg.seeds) s += evaluate_cell(*p.ws, v, method, seed, cfg.batch_size).value;
    return s / static_cast<double>(cfg.seeds.size());
  };
  const double s10 = mean_over_seeds("emea-s10");
  const double lo = mean_over_seeds("new-adapter-" + std::to_string(small));
  const double hi = mean_over_seeds("new-adapter-" + std::to_string(large));
  std::ostringstream os;
  os << variety_name(cfg, v) << ": new-" << small << " " << fmt("%.2f", 100 * lo) << " < emea-s10 "
     << fmt("%.2f", 100 * s10) << "; new-" << large << " " << fmt("%.2f", 100 * hi) << " (reported, "
     << (hi >= s10 - 0.01 ? "within 1 point or above" : "more than 1 point below") << ")";
  return {lo < s10, os.str()};
}

std::string body_without_header(const fs::path& p) {
  std::ifstream is(p);
  std::string line, out;
  std::getline(is, line);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Outcome determinism(Pipeline& p) {
  auto cfg = p.cfg;
  cfg.methods = {"ensemble", "emea-s10", "cl"};
  cfg.seeds = {cfg.seeds.front()};
  GridOptions force;
  force.force = true;
  cfg.results_file = "determinism_a.jsonl";
  const auto a = run_grid(cfg, force);
  cfg.results_file = "determinism_b.jsonl";
  // Same cells, second results file, fresh workspace.
  const auto b = run_grid(cfg, force);
  double gap = 0.0;
  for (std::size_t i = 0; i < a.per_seed.size(); ++i) gap = std::max(gap, std::fabs(a.per_seed[i].value - b.per_seed[i].value));
  for (const auto& r : a.per_seed)
    for (const auto& g : p.grid.per_seed)
      if (g.key() == r.key()) gap = std::max(gap, std::fabs(g.value - r.value));
  const bool bytes = body_without_header(cfg.workdir / "determinism_a.jsonl") ==
                     body_without_header(cfg.workdir / "determinism_b.jsonl");
  return {gap <= 1e-6 && bytes && a.per_seed.size() == b.per_seed.size(),
          "max metric gap " + fmt("%.1e", gap) + (bytes ? ", results bodies byte-identical" : ", results bodies differ")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string workdir = "emea-acceptance";
  std::vector<int> only;
  bool reuse = false;
  app.add_option("--workdir", workdir);
  app.add_option("--only", only)->delimiter(',');
  app.add_flag("--reuse", reuse, "keep artifacts from a previous run");
  CLI11_PARSE(app, argc, argv);
  const std::set<int> wanted(only.begin(), only.end());
  auto want = [&](int c) { return wanted.empty() || wanted.count(c); };

  int failures = 0;
  auto report = [&](int n, const char* name, const std::function<Outcome()>& f) {
    if (!want(n)) return;
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("criterion %2d %-28s %s  %s\n", n, name, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  };

  report(1, "gradient correctness", gradient_correctness);
  report(2, "degeneracy equalities", degeneracies);
  report(3, "entropy descent", entropy_descent);
  report(4, "isolation", isolation);

  const bool need_pipeline = want(5) || want(6) || want(7) || want(8) || want(10);
  Pipeline p;
  std::string pipeline_error;
  if (need_pipeline) {
    p.cfg = ExperimentConfig::defaults();
    p.cfg.workdir = workdir;
    try {
      if (!reuse) fs::remove_all(workdir);
      auto t0 = Clock::now();
      StageOptions st;
      st.log = [](const EpochRecord& r) {
        std::fprintf(stderr, "%s\n", to_json_line(r).c_str());
      };
      prepare_all(p.cfg, st);
      p.prepare_seconds = seconds_since(t0);
      t0 = Clock::now();
      p.grid = run_grid(p.cfg);
      p.grid_seconds = seconds_since(t0);
      p.ws.emplace(p.cfg);
      std::fprintf(stderr, "pipeline: prepare %.0fs, grid %.0fs (%zu new cells)\n", p.prepare_seconds, p.grid_seconds,
                   p.grid.computed);
      std::fprintf(stderr, "%s", make_report(p.grid.per_seed, p.cfg.group).text.c_str());
    } catch (const std::exception& e) {
      pipeline_error = e.what();
    }
  }
  auto piped = [&](const std::function<Outcome()>& f) {
    return [&, f]() -> Outcome {
      if (!pipeline_error.empty()) return {false, "pipeline failed: " + pipeline_error};
      return f();
    };
  };
  report(5, "directional reproduction", piped([&] { return directional(p); }));
  report(6, "batch-size trend", piped([&] { return batch_trend(p); }));
  report(7, "throughput ordering", piped([&] { return throughput(p); }));
  report(8, "budgeted adapters", piped([&] { return budgets(p); }));
  report(9, "metric fixtures", metric_fixtures);
  report(10, "determinism", piped([&] { return determinism(p); }));
  return failures == 0 ? 0 : 1;
}
