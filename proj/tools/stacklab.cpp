#include <cmath>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "stacklab/checkpoint.hpp"
#include "stacklab/runner.hpp"

using namespace stacklab;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kPartial = 1;
constexpr int kInvalid = 2;

std::vector<BinSpec> bins_or_default(const std::string& text) {
  return text.empty() ? default_bins() : parse_bins(text);
}

void emit(const std::optional<std::string>& path, const std::string& text) {
  if (path) write_file_atomic(*path, text);
  else std::cout << text;
}

int cmd_generate(const std::string& task_name, std::size_t min, std::size_t max,
                 std::size_t count, std::uint64_t seed, const std::string& out) {
  const LanguageTask task(parse_task(task_name));
  const SampleSpec spec{min, max, count, seed};
  write_dataset(out, task, spec, task.sample(spec));
  std::cout << "wrote " << count << " " << task.name() << " strings to " << out << "\n";
  return kOk;
}

int cmd_train(const std::optional<std::string>& config_path, const std::string& train_path,
              const std::string& valid_path, const std::string& out,
              std::optional<std::uint64_t> seed, std::size_t workers) {
  TrainConfig config;
  if (config_path) {
    std::ifstream in(*config_path);
    if (!in) throw std::invalid_argument("cannot open train config " + *config_path);
    config = train_config_from_json(nlohmann::json::parse(in));
  }
  if (seed) config.base_seed = *seed;
  config.checkpoint_dir = out;
  const Dataset train_set = read_dataset(train_path);
  const Dataset valid_set = read_dataset(valid_path);
  if (train_set.task != valid_set.task)
    throw std::invalid_argument("train and validation sets come from different tasks");
  const LanguageTask task(train_set.task);
  const TrainData data{train_set.strings, valid_set.strings, task.vocab_size(), task.eos()};
  const auto runs = train(config, data, workers);
  fs::create_directories(out);
  std::string log;
  std::vector<RunRecord> records;
  for (const auto& r : runs) {
    log += to_json(r.record).dump() + "\n";
    records.push_back(r.record);
  }
  write_file_atomic(fs::path(out) / "runs.jsonl", log);
  try {
    const std::size_t best = select_best(records);
    std::cout << "best restart " << best << " valid ppl " << records[best].best_valid_ppl
              << " checkpoint " << records[best].checkpoint << "\n";
  } catch (const std::runtime_error& e) {
    std::cerr << e.what() << "\n";
    return kPartial;
  }
  for (const auto& r : records)
    if (r.failed) return kPartial;
  return kOk;
}

struct Scored {
  std::vector<std::vector<Sequence>> strings;
  std::vector<std::vector<SequenceResult>> results;
  std::vector<BinMetrics> metrics;
};

Scored score_bins(const SequenceScorer& scorer, const LanguageTask& task,
                  const std::vector<BinSpec>& bins, std::size_t samples, std::uint64_t seed,
                  std::size_t workers) {
  Scored s;
  for (std::size_t b = 0; b < bins.size(); ++b) {
    s.strings.push_back(bin_test_set(task, bins[b], b, samples, seed));
    s.results.push_back(score_sequences(scorer, task, s.strings.back(), workers));
    s.metrics.push_back(aggregate(bins[b].label, s.results.back()));
  }
  return s;
}

int cmd_eval(const std::string& stem, const std::string& task_name, const std::string& bins,
             std::size_t samples, std::uint64_t seed, const std::optional<std::string>& out,
             const std::string& name, std::size_t restart, std::size_t workers) {
  const LanguageTask task(parse_task(task_name));
  const LoadedModel loaded = load_model(stem);
  const ModelScorer scorer(loaded.model);
  const auto scored = score_bins(scorer, task, bins_or_default(bins), samples, seed, workers);
  std::string csv = std::string(kResultsHeader) + "\n";
  for (const auto& m : scored.metrics)
    csv += format_row({std::string(task.name()), name.empty() ? fs::path(stem).filename().string() : name,
                       mode_label(loaded.meta.freeze), restart, m.label, m.accuracy, m.perplexity,
                       m.n_seq, m.n_det}) +
           "\n";
  emit(out, csv);
  return kOk;
}

int cmd_stability(const std::optional<std::string>& curve_path,
                  const std::optional<std::string>& stem, const std::string& task_name,
                  const std::string& bins, std::size_t samples, std::uint64_t seed,
                  std::optional<double> bound, const std::optional<std::string>& out,
                  std::size_t workers) {
  StabilityReport report;
  if (curve_path) {
    report.curve = read_curve_csv(*curve_path);
    report.bound = bound.value_or(INFINITY);
    const auto bc = error_bound_check(report.curve, report.bound);
    report.bound_c = bc.max_loss;
    report.within_bound = bc.pass;
    for (const auto& p : report.curve) report.variance_profile.push_back(p.loss);
    if (report.curve.size() >= 2) report.variance = variance_across_lengths(report.curve);
    if (report.curve.size() >= 4) {
      report.growth = growth_fit(report.curve, {.seed = seed});
    } else {
      report.growth.converged = false;
      report.growth.b = report.growth.b_low = report.growth.b_high = NAN;
    }
    if (!report.curve.empty()) report.delta_t = detect_delta_t(report.curve, report.curve.front().loss);
    report.verdict = decide_verdict(report.growth, report.degradation);
  } else {
    if (!stem || task_name.empty())
      throw std::invalid_argument("stability needs --curve, or --model with --task");
    const LanguageTask task(parse_task(task_name));
    const LoadedModel loaded = load_model(*stem);
    const ModelScorer scorer(loaded.model);
    const auto scored = score_bins(scorer, task, bins_or_default(bins), samples, seed, workers);
    StabilityOptions opt;
    opt.bound = bound;
    report = assess_stability(opt, seed, *stem, task, scorer, scored.strings, scored.results,
                              scored.metrics);
  }
  emit(out, to_json(report).dump(2) + "\n");
  return kOk;
}

int cmd_run(const std::string& config_path, const std::optional<std::string>& out,
            std::optional<std::uint64_t> seed, std::optional<std::size_t> workers,
            std::optional<double> fraction, const std::string& bins) {
  const ExperimentConfig config = read_experiment(config_path);
  RunOptions options;
  if (out) options.out = *out;
  else if (config.output) options.out = *config.output;
  else throw std::invalid_argument("no output directory: pass --out or set \"output\"");
  options.seed = seed;
  options.workers = workers;
  options.fraction = fraction;
  if (!bins.empty()) options.bins = parse_bins(bins);
  options.log = &std::cerr;
  const RunSummary s = run_experiment(config, options);
  std::cout << s.cells << " cells, " << s.resumed << " resumed, " << s.failed << " failed\n";
  for (const auto& f : s.failures) std::cerr << "failed: " << f << "\n";
  std::cout << "results in " << options.out.string() << "\n";
  return s.failed ? kPartial : kOk;
}

int cmd_report(const std::string& csv, const std::optional<std::string>& out) {
  emit(out, render_report(read_results_csv(fs::path(csv))));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stack-augmented RNN lab"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("generate", "sample a formal-language dataset");
  std::string task, out_path, bins, model_name;
  std::size_t min = 40, max = 80, count = 1000, samples = 1000, restart = 0;
  std::uint64_t seed = 0;
  gen->add_option("--task", task, "task name")->required();
  gen->add_option("--min", min, "minimum length");
  gen->add_option("--max", max, "maximum length");
  gen->add_option("--count", count, "number of strings");
  gen->add_option("--seed", seed, "sampling seed");
  gen->add_option("--out", out_path, "output file")->required();

  auto* tr = app.add_subcommand("train", "train restarts on generated datasets");
  std::optional<std::string> config_path, out_opt, model_stem, curve_path;
  std::string train_path, valid_path;
  std::optional<std::uint64_t> seed_opt;
  std::optional<std::size_t> workers_opt;
  std::size_t workers = 1;
  tr->add_option("--config", config_path, "train config JSON");
  tr->add_option("--train", train_path, "training dataset")->required();
  tr->add_option("--valid", valid_path, "validation dataset")->required();
  tr->add_option("--out", out_path, "checkpoint directory")->required();
  tr->add_option("--seed", seed_opt, "base seed");
  tr->add_option("--workers", workers, "parallel restarts");

  auto* ev = app.add_subcommand("eval", "length-binned evaluation of a checkpoint");
  ev->add_option("--model", out_path, "checkpoint stem")->required();
  ev->add_option("--task", task, "task name")->required();
  ev->add_option("--bins", bins, "e.g. 40-99,100-199,200-400");
  ev->add_option("--samples", samples, "strings per bin");
  ev->add_option("--seed", seed, "test-set seed");
  ev->add_option("--out", out_opt, "results CSV (stdout if absent)");
  ev->add_option("--name", model_name, "model column value");
  ev->add_option("--restart", restart, "restart column value");
  ev->add_option("--workers", workers, "scoring threads");

  auto* st = app.add_subcommand("stability", "stability diagnostics of a checkpoint or curve");
  std::optional<double> bound;
  st->add_option("--curve", curve_path, "loss curve CSV (length,loss,stderr,n)");
  st->add_option("--model", model_stem, "checkpoint stem");
  st->add_option("--task", task, "task name");
  st->add_option("--bins", bins, "e.g. 40-99,100-199,200-400");
  st->add_option("--samples", samples, "strings per bin");
  st->add_option("--seed", seed, "test-set and bootstrap seed");
  st->add_option("--bound", bound, "loss bound C");
  st->add_option("--out", out_opt, "report JSON (stdout if absent)");
  st->add_option("--workers", workers, "scoring threads");

  auto* run = app.add_subcommand("run", "run an experiment matrix");
  std::string experiment;
  std::optional<double> fraction;
  run->add_option("--config", experiment, "experiment JSON")->required();
  run->add_option("--out", out_opt, "output directory");
  run->add_option("--seed", seed_opt, "master seed");
  run->add_option("--workers", workers_opt, "parallel cells");
  run->add_option("--fraction", fraction, "PTB train fraction");
  run->add_option("--bins", bins, "e.g. 40-99,100-199,200-400");

  auto* rep = app.add_subcommand("report", "render summary tables from a results CSV");
  std::string csv;
  rep->add_option("--csv", csv, "results CSV")->required();
  rep->add_option("--out", out_opt, "output file (stdout if absent)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInvalid;
  }

  try {
    if (*gen) return cmd_generate(task, min, max, count, seed, out_path);
    if (*tr) return cmd_train(config_path, train_path, valid_path, out_path, seed_opt, workers);
    if (*ev) return cmd_eval(out_path, task, bins, samples, seed, out_opt, model_name, restart, workers);
    if (*st)
      return cmd_stability(curve_path, model_stem, task, bins, samples, seed, bound, out_opt, workers);
    if (*run) return cmd_run(experiment, out_opt, seed_opt, workers_opt, fraction, bins);
    if (*rep) return cmd_report(csv, out_opt);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::runtime_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kPartial;
  }
  return kInvalid;
}
