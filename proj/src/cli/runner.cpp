#include "stacklab/runner.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "stacklab/checkpoint.hpp"
#include "stacklab/seed.hpp"

namespace stacklab {

namespace fs = std::filesystem;
using nlohmann::json;

std::string mode_label(FreezeMode mode) {
  return mode == FreezeMode::none ? "n" : std::string(to_string(mode));
}

std::string Cell::id() const { return task + "/" + model + "/" + mode_label(mode); }

std::string content_hash(std::string_view bytes) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(bytes)));
  return buf;
}

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string slug(const Cell& cell) {
  std::string s = cell.id();
  std::replace(s.begin(), s.end(), '/', '_');
  return s;
}

json bins_json(const std::vector<BinSpec>& bins) {
  json arr = json::array();
  for (const auto& b : bins) arr.push_back({{"label", b.label}, {"lo", b.lo}, {"hi", b.hi}});
  return arr;
}

std::vector<BinSpec> bins_from(const json& j) {
  if (j.is_string()) return parse_bins(j.get<std::string>());
  std::vector<BinSpec> bins;
  for (const auto& b : j)
    bins.push_back({b.at("label").get<std::string>(), b.at("lo").get<std::size_t>(),
                    b.at("hi").get<std::size_t>()});
  return bins;
}

template <typename F>
void for_keys(const json& j, const std::string& where, F&& f) {
  if (!j.is_object()) throw std::invalid_argument(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!f(key, value)) throw std::invalid_argument("unknown key '" + key + "' in " + where);
  }
}

Cell cell_from(const json& j) {
  Cell c;
  bool has_task = false, has_model = false;
  for_keys(j, "cell", [&](const std::string& k, const json& v) {
    if (k == "task") c.task = v.get<std::string>(), has_task = true;
    else if (k == "model") c.model = v.get<std::string>(), has_model = true;
    else if (k == "mode") c.mode = parse_freeze_mode(v.get<std::string>());
    else if (k == "overrides") c.overrides = v;
    else return false;
    return true;
  });
  if (!has_task || !has_model) throw std::invalid_argument("cell needs task and model");
  return c;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (cells.empty()) throw std::invalid_argument("experiment has no cells");
  if (bins.empty()) throw std::invalid_argument("experiment has no bins");
  if (test_samples == 0) throw std::invalid_argument("test_samples must be positive");
  if (workers == 0) throw std::invalid_argument("workers must be positive");
  if (ptb_restarts == 0) throw std::invalid_argument("ptb_restarts must be positive");
  if (data.min_length > data.max_length || data.train_count == 0 || data.valid_count == 0)
    throw std::invalid_argument("data needs min_length <= max_length and positive counts");
  if (!(stability.bucket_width > 0)) throw std::invalid_argument("bucket_width must be positive");
  std::vector<std::string> ids;
  for (const auto& c : cells) {
    const std::string where = "cell " + c.id();
    if (!c.overrides.is_object()) throw std::invalid_argument(where + ": overrides must be an object");
    if (c.overrides.contains("model") || c.overrides.contains("freeze"))
      throw std::invalid_argument(where + ": model and freeze are set by the cell itself");
    try {
      if (c.is_ptb()) {
        resolve_lm_config(*this, c, 0);
        model_preset(c.model, 10, lm.hidden_size, 1);
      } else {
        const LanguageTask task(parse_task(c.task));
        const auto tc = resolve_train_config(*this, c);
        model_preset(c.model, task.vocab_size(), tc.hidden_size, tc.embedding_size).validate();
        if (task.attainable_lengths(data.min_length, data.max_length).empty())
          throw std::invalid_argument("no attainable training length in [" +
                                      std::to_string(data.min_length) + ", " +
                                      std::to_string(data.max_length) + "]");
        for (const auto& b : bins)
          if (task.attainable_lengths(b.lo, b.hi).empty())
            throw std::invalid_argument("bin " + b.label + " holds no attainable length");
      }
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(where + ": " + e.what());
    }
    if (std::find(ids.begin(), ids.end(), c.id()) != ids.end())
      throw std::invalid_argument("duplicate " + where);
    ids.push_back(c.id());
  }
}

json to_json(const ExperimentConfig& c) {
  json cells = json::array();
  for (const auto& cell : c.cells)
    cells.push_back({{"task", cell.task},
                     {"model", cell.model},
                     {"mode", mode_label(cell.mode)},
                     {"overrides", cell.overrides}});
  json j{{"seed", c.seed},
         {"cells", cells},
         {"train", to_json(c.train)},
         {"data",
          {{"train_count", c.data.train_count},
           {"valid_count", c.data.valid_count},
           {"min_length", c.data.min_length},
           {"max_length", c.data.max_length}}},
         {"bins", bins_json(c.bins)},
         {"test_samples", c.test_samples},
         {"synthetic",
          {{"vocab_size", c.synthetic.vocab_size},
           {"classes", c.synthetic.classes},
           {"train_tokens", c.synthetic.train_tokens},
           {"valid_tokens", c.synthetic.valid_tokens},
           {"test_tokens", c.synthetic.test_tokens},
           {"seed", c.synthetic.seed}}},
         {"lm", to_json(c.lm)},
         {"ptb_restarts", c.ptb_restarts},
         {"stability",
          {{"bucket_width", c.stability.bucket_width},
           {"perturbation_strings", c.stability.perturbation_strings},
           {"flips", c.stability.flips},
           {"bootstrap", c.stability.bootstrap}}},
         {"workers", c.workers}};
  if (c.stability.bound) j["stability"]["bound"] = *c.stability.bound;
  if (c.output) j["output"] = c.output->string();
  if (c.ptb_dir) j["ptb_dir"] = c.ptb_dir->string();
  return j;
}

ExperimentConfig experiment_from_json(const json& j) {
  ExperimentConfig c;
  for_keys(j, "experiment", [&](const std::string& k, const json& v) {
    if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k == "cells") {
      for (const auto& cell : v) c.cells.push_back(cell_from(cell));
    } else if (k == "matrix") {
      // Cross product, tasks outermost.
      std::vector<std::string> tasks, models, modes{"n"};
      for_keys(v, "matrix", [&](const std::string& mk, const json& mv) {
        if (mk == "tasks") tasks = mv.get<std::vector<std::string>>();
        else if (mk == "models") models = mv.get<std::vector<std::string>>();
        else if (mk == "modes") modes = mv.get<std::vector<std::string>>();
        else return false;
        return true;
      });
      for (const auto& t : tasks)
        for (const auto& m : models)
          for (const auto& mode : modes)
            c.cells.push_back({t, m, parse_freeze_mode(mode), json::object()});
    } else if (k == "train") c.train = train_config_from_json(v);
    else if (k == "data") {
      for_keys(v, "data", [&](const std::string& dk, const json& dv) {
        if (dk == "train_count") c.data.train_count = dv.get<std::size_t>();
        else if (dk == "valid_count") c.data.valid_count = dv.get<std::size_t>();
        else if (dk == "min_length") c.data.min_length = dv.get<std::size_t>();
        else if (dk == "max_length") c.data.max_length = dv.get<std::size_t>();
        else return false;
        return true;
      });
    } else if (k == "bins") c.bins = bins_from(v);
    else if (k == "test_samples") c.test_samples = v.get<std::size_t>();
    else if (k == "output") c.output = v.get<std::string>();
    else if (k == "ptb_dir") c.ptb_dir = v.get<std::string>();
    else if (k == "synthetic") {
      for_keys(v, "synthetic", [&](const std::string& sk, const json& sv) {
        if (sk == "vocab_size") c.synthetic.vocab_size = sv.get<std::size_t>();
        else if (sk == "classes") c.synthetic.classes = sv.get<std::size_t>();
        else if (sk == "train_tokens") c.synthetic.train_tokens = sv.get<std::size_t>();
        else if (sk == "valid_tokens") c.synthetic.valid_tokens = sv.get<std::size_t>();
        else if (sk == "test_tokens") c.synthetic.test_tokens = sv.get<std::size_t>();
        else if (sk == "seed") c.synthetic.seed = sv.get<std::uint64_t>();
        else return false;
        return true;
      });
    } else if (k == "lm") c.lm = lm_config_from_json(v);
    else if (k == "ptb_restarts") c.ptb_restarts = v.get<std::size_t>();
    else if (k == "stability") {
      for_keys(v, "stability", [&](const std::string& sk, const json& sv) {
        if (sk == "bucket_width") c.stability.bucket_width = sv.get<double>();
        else if (sk == "bound") c.stability.bound = sv.get<double>();
        else if (sk == "perturbation_strings") c.stability.perturbation_strings = sv.get<std::size_t>();
        else if (sk == "flips") c.stability.flips = sv.get<std::size_t>();
        else if (sk == "bootstrap") c.stability.bootstrap = sv.get<std::size_t>();
        else return false;
        return true;
      });
    } else if (k == "workers") c.workers = v.get<std::size_t>();
    else return false;
    return true;
  });
  c.validate();
  return c;
}

ExperimentConfig read_experiment(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open experiment config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
  return experiment_from_json(j);
}

TrainConfig resolve_train_config(const ExperimentConfig& config, const Cell& cell) {
  json j = to_json(config.train);
  j.update(cell.overrides);
  j["model"] = cell.model;
  j["freeze"] = std::string(to_string(cell.mode));
  TrainConfig tc = train_config_from_json(j);
  tc.base_seed = derive_seed(config.seed, cell.id());
  tc.validate();
  return tc;
}

LmConfig resolve_lm_config(const ExperimentConfig& config, const Cell& cell, std::size_t restart) {
  json j = to_json(config.lm);
  j.update(cell.overrides);
  j["model"] = cell.model;
  j["freeze"] = std::string(to_string(cell.mode));
  j["seed"] = derive_seed(config.seed, cell.id(), restart);
  return lm_config_from_json(j);
}

std::string cell_hash(const ExperimentConfig& config, const Cell& cell) {
  json j{{"id", cell.id()}, {"seed", config.seed}};
  if (cell.is_ptb()) {
    j["lm"] = to_json(resolve_lm_config(config, cell, 0));
    j["restarts"] = config.ptb_restarts;
    if (config.ptb_dir) j["ptb_dir"] = config.ptb_dir->string();
    else j["synthetic"] = to_json(config)["synthetic"];
  } else {
    j["train"] = to_json(resolve_train_config(config, cell));
    j["data"] = to_json(config)["data"];
    j["bins"] = bins_json(config.bins);
    j["test_samples"] = config.test_samples;
    j["stability"] = to_json(config)["stability"];
  }
  return content_hash(j.dump());
}

namespace {

struct Outcome {
  std::string rows;     // results CSV lines
  std::string summary;  // best-restart lines
  json runs = json::array();
  bool failed = false;
  std::string failure;
};

json outcome_json(const Outcome& o, const std::string& hash) {
  return {{"hash", hash},       {"rows", o.rows},       {"summary", o.summary},
          {"runs", o.runs},     {"failed", o.failed},   {"failure", o.failure}};
}

Outcome outcome_from(const json& j) {
  return {j.at("rows").get<std::string>(), j.at("summary").get<std::string>(), j.at("runs"),
          j.at("failed").get<bool>(), j.at("failure").get<std::string>()};
}

std::string lines(const std::vector<ResultRow>& rows) {
  std::string out;
  for (const auto& r : rows) out += format_row(r) + "\n";
  return out;
}

}  // namespace

StabilityReport assess_stability(const StabilityOptions& opt, std::uint64_t seed,
                                 const std::string& tag, const LanguageTask& task,
                                 const SequenceScorer& scorer,
                                 const std::vector<std::vector<Sequence>>& strings,
                                 const std::vector<std::vector<SequenceResult>>& results,
                                 const std::vector<BinMetrics>& metrics) {
  if (strings.empty() || strings.size() != results.size() || results.size() != metrics.size())
    throw std::invalid_argument("stability assessment needs matching per-bin inputs");
  StabilityReport r;
  std::vector<SequenceResult> all;
  std::vector<Sequence> all_strings;
  for (std::size_t b = 0; b < results.size(); ++b) {
    all.insert(all.end(), results[b].begin(), results[b].end());
    all_strings.insert(all_strings.end(), strings[b].begin(), strings[b].end());
  }
  r.curve = loss_curve(all, opt.bucket_width);
  r.bound = opt.bound.value_or(std::log(double(task.vocab_size())));
  const auto bc = error_bound_check(r.curve, r.bound);
  r.bound_c = bc.max_loss;
  r.within_bound = bc.pass;
  for (const auto& p : r.curve) r.variance_profile.push_back(p.loss);
  r.variance = r.curve.size() >= 2 ? variance_across_lengths(r.curve) : 0.0;
  if (r.curve.size() >= 4) {
    r.growth = growth_fit(r.curve, {.bootstrap = opt.bootstrap,
                                    .seed = derive_seed(seed, "fit/" + tag)});
  } else {
    r.growth.converged = false;
    r.growth.b = r.growth.b_low = r.growth.b_high = kNaN;
    r.growth.growth = Growth::inconclusive;
  }
  if (metrics.front().targets > 0 && metrics.back().targets > 0)
    r.degradation = degradation_ratio(metrics.front(), metrics.back());

  const auto model_acc = accuracy_curve(all, opt.bucket_width);
  if (!model_acc.empty()) {
    const auto chance = simulate_chance(
        task, all_strings, derive_seed(seed, "chance/" + std::string(task.name())));
    r.random_equivalence =
        random_equivalence_test(model_acc, accuracy_curve(chance, opt.bucket_width));
  }
  std::vector<Sequence> probe(
      strings.front().begin(),
      strings.front().begin() +
          std::ptrdiff_t(std::min(opt.perturbation_strings, strings.front().size())));
  if (!probe.empty()) {
    r.perturbation = perturbation_robustness(
        scorer, task, probe,
        {.flips = opt.flips, .seed = derive_seed(seed, "perturb/" + tag)});
    if (scorer.num_stacks() > 0) {
      try {
        r.stack_agreement = stack_action_agreement(
            scorer, task, probe, derive_seed(seed, "agree/" + tag));
      } catch (const std::invalid_argument&) {
        // no constrained positions for this task
      }
    }
  }
  r.delta_t = detect_delta_t(r.curve, r.curve.front().loss);
  r.verdict = decide_verdict(r.growth, r.degradation);
  return r;
}

namespace {

struct Runner {
  ExperimentConfig config;
  fs::path out;
  std::ostream* log = nullptr;
  std::mutex log_mutex;
  std::once_flag corpus_once;
  std::optional<Corpus> corpus;

  void say(const std::string& text) {
    if (!log) return;
    std::lock_guard lock(log_mutex);
    *log << text << std::endl;
  }

  const Corpus& ptb_corpus() {
    std::call_once(corpus_once, [&] {
      if (config.ptb_dir) {
        corpus = load_ptb(ptb_paths(*config.ptb_dir));
      } else {
        const fs::path dir = out / "ptb_synthetic";
        if (!fs::exists(ptb_paths(dir).test)) write_synthetic_ptb(dir, config.synthetic);
        corpus = load_ptb(ptb_paths(dir));
      }
    });
    return *corpus;
  }

  Outcome run_formal(const Cell& cell) {
    const LanguageTask task(parse_task(cell.task));
    const std::string tname(task.name());
    const auto& d = config.data;
    TrainData data;
    data.train = task.sample({d.min_length, d.max_length, d.train_count,
                              derive_seed(config.seed, "train/" + tname)});
    data.valid = task.sample({d.min_length, d.max_length, d.valid_count,
                              derive_seed(config.seed, "valid/" + tname)});
    data.vocab_size = task.vocab_size();
    data.eos = task.eos();
    TrainConfig tc = resolve_train_config(config, cell);
    tc.checkpoint_dir = out / "cells" / slug(cell);
    const auto runs = train(tc, data, 1);

    std::vector<std::vector<Sequence>> strings;
    const std::uint64_t test_seed = derive_seed(config.seed, "test/" + tname);
    for (std::size_t b = 0; b < config.bins.size(); ++b)
      strings.push_back(bin_test_set(task, config.bins[b], b, config.test_samples, test_seed));

    Outcome o;
    std::vector<RunRecord> records;
    std::vector<std::vector<ResultRow>> rows(runs.size());
    for (const auto& run : runs) {
      records.push_back(run.record);
      json line = to_json(run.record);
      line["cell"] = cell.id();
      o.runs.push_back(line);
    }
    std::optional<std::size_t> best;
    try {
      best = select_best(records);
    } catch (const std::runtime_error& e) {
      o.failed = true;
      o.failure = e.what();
    }
    for (std::size_t i = 0; i < runs.size(); ++i) {
      const auto& run = runs[i];
      if (!run.best) {
        for (const auto& bin : config.bins)
          rows[i].push_back({tname, cell.model, mode_label(cell.mode), i, bin.label, kNaN, kNaN,
                             0, 0});
        o.rows += lines(rows[i]);
        continue;
      }
      const ModelScorer scorer(*run.best);
      std::vector<std::vector<SequenceResult>> results;
      std::vector<BinMetrics> metrics;
      for (std::size_t b = 0; b < config.bins.size(); ++b) {
        results.push_back(score_sequences(scorer, task, strings[b], 1));
        metrics.push_back(aggregate(config.bins[b].label, results.back()));
        const auto& m = metrics.back();
        rows[i].push_back({tname, cell.model, mode_label(cell.mode), i, m.label, m.accuracy,
                           m.perplexity, m.n_seq, m.n_det});
      }
      if (best && *best == i) {
        const auto report = assess_stability(config.stability, config.seed, cell.id(), task,
                                             scorer, strings, results, metrics);
        fs::create_directories(out / "stability");
        write_file_atomic(out / "stability" / (slug(cell) + ".json"),
                          to_json(report).dump(2) + "\n");
      }
      o.rows += lines(rows[i]);
    }
    if (best) o.summary = lines(rows[*best]);
    return o;
  }

  Outcome run_ptb(const Cell& cell) {
    const Corpus& c = ptb_corpus();
    const fs::path dir = out / "cells" / slug(cell);
    fs::create_directories(dir);
    write_file_atomic(dir / "vocab.json", to_json(c.vocab).dump() + "\n");
    Outcome o;
    std::vector<std::vector<ResultRow>> rows;
    std::optional<std::size_t> best;
    double best_valid = INFINITY;
    for (std::size_t r = 0; r < config.ptb_restarts; ++r) {
      const LmConfig lm = resolve_lm_config(config, cell, r);
      json line{{"cell", cell.id()}, {"restart", r}, {"seed", lm.seed}};
      double valid = kNaN, test = kNaN;
      try {
        const auto result = train_lm(lm, c, [&](const LmEpoch& e) {
          say("  " + cell.id() + " restart " + std::to_string(r) + " epoch " +
              std::to_string(e.epoch) + " valid ppl " + std::to_string(e.valid_ppl));
        });
        valid = result.valid_ppl;
        test = result.test_ppl;
        json epochs = json::array();
        for (const auto& e : result.epochs)
          epochs.push_back({{"epoch", e.epoch}, {"train_ppl", e.train_ppl}, {"valid_ppl", e.valid_ppl}});
        line["epochs"] = epochs;
        line["failed"] = false;
        const auto stem = dir / ("restart" + std::to_string(r));
        save_model(stem, result.model, {lm.freeze, lm.train_classifier, lm.seed, 0});
        line["checkpoint"] = stem.string();
        if (valid < best_valid) best_valid = valid, best = r;
      } catch (const NonFiniteError& e) {
        line["failed"] = true;
        line["failure"] = e.what();
      }
      line["valid_ppl"] = std::isfinite(valid) ? json(valid) : json(nullptr);
      line["test_ppl"] = std::isfinite(test) ? json(test) : json(nullptr);
      o.runs.push_back(line);
      const std::string mode = mode_label(cell.mode);
      rows.push_back({{kPtbTask, cell.model, mode, r, "valid", kNaN, valid, c.valid.size(), 0},
                      {kPtbTask, cell.model, mode, r, "test", kNaN, test, c.test.size(), 0}});
      o.rows += lines(rows.back());
    }
    if (best) {
      o.summary = lines(rows[*best]);
    } else {
      o.failed = true;
      o.failure = "every PTB restart failed";
    }
    return o;
  }

  Outcome run_cell(const Cell& cell) {
    try {
      return cell.is_ptb() ? run_ptb(cell) : run_formal(cell);
    } catch (const std::exception& e) {
      Outcome o;
      o.failed = true;
      o.failure = e.what();
      return o;
    }
  }
};

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Diagnostics comparing each frozen cell with the fully trained cell of the
// same (task, model).
json comparisons(const ExperimentConfig& config, const fs::path& out,
                 const std::vector<std::optional<Outcome>>& outcomes) {
  json result = json::array();
  auto bin0_loss = [&](std::size_t i) -> std::optional<double> {
    if (!outcomes[i] || outcomes[i]->summary.empty()) return std::nullopt;
    std::istringstream in(std::string(kResultsHeader) + "\n" + outcomes[i]->summary);
    const auto rows = read_results_csv(in);
    if (rows.empty() || !std::isfinite(rows.front().ppl)) return std::nullopt;
    return std::log(rows.front().ppl);
  };
  auto report = [&](const Cell& c) -> std::optional<StabilityReport> {
    const auto p = out / "stability" / (slug(c) + ".json");
    if (!fs::exists(p)) return std::nullopt;
    return stability_report_from_json(json::parse(read_file(p)));
  };
  for (std::size_t i = 0; i < config.cells.size(); ++i) {
    const Cell& full = config.cells[i];
    if (full.is_ptb() || full.mode != FreezeMode::none) continue;
    const auto full_report = report(full);
    const auto full_loss = bin0_loss(i);
    if (!full_report || !full_loss) continue;
    json entry{{"task", full.task}, {"model", full.model}, {"frozen", json::array()}};
    std::vector<std::pair<std::string, double>> frozen_losses;
    for (std::size_t k = 0; k < config.cells.size(); ++k) {
      const Cell& f = config.cells[k];
      if (f.task != full.task || f.model != full.model || f.mode == FreezeMode::none) continue;
      const auto fr = report(f);
      const auto fl = bin0_loss(k);
      if (!fr || !fl) continue;
      frozen_losses.emplace_back(mode_label(f.mode), *fl);
      json fe{{"mode", mode_label(f.mode)}, {"bin0_loss", *fl}};
      try {
        const auto w = advantage_window(fr->curve, full_report->curve);
        fe["advantage_window"] = w.empty ? json(nullptr)
                                         : json{{"t_low", w.t_low}, {"t_high", w.t_high}};
      } catch (const std::invalid_argument&) {
        fe["advantage_window"] = nullptr;
      }
      fe["delta_t"] = fr->delta_t ? json(*fr->delta_t) : json(nullptr);
      entry["frozen"].push_back(fe);
    }
    const auto ord = ordering_check(full_report->verdict, *full_loss, frozen_losses);
    entry["full"] = {{"bin0_loss", *full_loss},
                     {"verdict", to_string(full_report->verdict)},
                     {"delta_t", full_report->delta_t ? json(*full_report->delta_t) : json(nullptr)}};
    entry["ordering"] = {{"asserted", ord.asserted}, {"holds", ord.holds}, {"note", ord.note}};
    result.push_back(entry);
  }
  return result;
}

}  // namespace

RunSummary run_experiment(ExperimentConfig config, const RunOptions& options) {
  if (options.seed) config.seed = *options.seed;
  if (options.workers) config.workers = *options.workers;
  if (options.fraction) config.lm.fraction = *options.fraction;
  if (options.bins) config.bins = *options.bins;
  config.validate();

  Runner runner;
  runner.config = config;
  runner.out = options.out;
  runner.log = options.log;
  const fs::path out = options.out;
  fs::create_directories(out / "cells");
  const std::size_t n = config.cells.size();
  std::vector<std::string> hashes;
  for (const auto& c : config.cells) hashes.push_back(cell_hash(config, c));

  RunSummary summary;
  summary.cells = n;
  std::vector<std::optional<Outcome>> outcomes(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto marker = out / "cells" / slug(config.cells[i]) / "done.json";
    if (!fs::exists(marker)) continue;
    try {
      const json j = json::parse(read_file(marker));
      if (j.at("hash").get<std::string>() == hashes[i]) {
        outcomes[i] = outcome_from(j);
        ++summary.resumed;
      }
    } catch (const std::exception&) {
      // unreadable marker: recompute the cell
    }
  }

  // results.csv holds the header plus rows of a prefix of cells; anything past
  // the longest consistent prefix is an interrupted tail and is cut off.
  const fs::path csv = out / "results.csv";
  std::string expected = std::string(kResultsHeader) + "\n";
  std::size_t flushed = 0;
  {
    const std::string existing = fs::exists(csv) ? read_file(csv) : std::string();
    if (existing.compare(0, expected.size(), expected) == 0) {
      while (flushed < n && outcomes[flushed]) {
        const std::string next = expected + outcomes[flushed]->rows;
        if (existing.compare(0, next.size(), next) != 0) break;
        expected = next;
        ++flushed;
      }
      if (existing.size() != expected.size()) fs::resize_file(csv, expected.size());
    } else {
      write_file_atomic(csv, expected);
    }
  }
  std::ofstream csv_out(csv, std::ios::app | std::ios::binary);
  std::mutex flush_mutex;
  auto flush_ready = [&] {
    std::lock_guard lock(flush_mutex);
    while (flushed < n && outcomes[flushed]) {
      csv_out << outcomes[flushed]->rows;
      csv_out.flush();
      ++flushed;
    }
  };
  flush_ready();

  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      if (outcomes[i]) continue;
      const Cell& cell = config.cells[i];
      runner.say("cell " + cell.id() + " started");
      Outcome o = runner.run_cell(cell);
      const auto dir = out / "cells" / slug(cell);
      fs::create_directories(dir);
      write_file_atomic(dir / "done.json", outcome_json(o, hashes[i]).dump() + "\n");
      runner.say("cell " + cell.id() + (o.failed ? " failed: " + o.failure : " done"));
      {
        std::lock_guard lock(flush_mutex);
        outcomes[i] = std::move(o);
      }
      flush_ready();
    }
  };
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < std::min(config.workers, n); ++w) pool.emplace_back(work);
  }
  flush_ready();
  csv_out.close();

  std::string summary_csv = std::string(kResultsHeader) + "\n";
  std::string runs;
  json manifest_cells = json::array();
  for (std::size_t i = 0; i < n; ++i) {
    const Outcome& o = *outcomes[i];
    summary_csv += o.summary;
    for (const auto& line : o.runs) runs += line.dump() + "\n";
    if (o.failed) {
      ++summary.failed;
      summary.failures.push_back(config.cells[i].id() + ": " + o.failure);
    }
    manifest_cells.push_back({{"id", config.cells[i].id()},
                              {"hash", hashes[i]},
                              {"seed", derive_seed(config.seed, config.cells[i].id())},
                              {"status", o.failed ? "failed" : "ok"}});
  }
  write_file_atomic(out / "summary.csv", summary_csv);
  write_file_atomic(out / "runs.jsonl", runs);
  write_file_atomic(out / "comparisons.json", comparisons(config, out, outcomes).dump(2) + "\n");
  std::istringstream summary_in(summary_csv);
  const std::string report = render_report(read_results_csv(summary_in));
  write_file_atomic(out / "report.txt", report);

  json artifacts;
  for (const char* name : {"results.csv", "summary.csv", "comparisons.json", "report.txt"})
    artifacts[name] = content_hash(read_file(out / name));
  const json manifest{{"tool", "stacklab"},
                      {"version", "0.1.0"},
                      {"master_seed", config.seed},
                      {"config", to_json(config)},
                      {"cells", manifest_cells},
                      {"artifacts", artifacts}};
  write_file_atomic(out / "manifest.json", manifest.dump(2) + "\n");
  return summary;
}

namespace {

std::string fixed(double v, int digits) {
  if (!std::isfinite(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

template <typename T>
void push_unique(std::vector<T>& v, const T& x) {
  if (std::find(v.begin(), v.end(), x) == v.end()) v.push_back(x);
}

// Lower is better; NaN never wins.
bool better(double a, double b) { return std::isfinite(a) && (!std::isfinite(b) || a < b); }

std::string formal_table(const std::string& task, const std::vector<const ResultRow*>& rows) {
  std::vector<std::string> bins;
  std::vector<std::pair<std::string, std::string>> keys;  // (model, mode)
  for (const auto* r : rows) {
    push_unique(bins, r->bin);
    push_unique(keys, {r->model, r->mode});
  }
  // Best restart per key: lowest first-bin perplexity.
  std::vector<std::map<std::string, double>> cells(keys.size());
  for (std::size_t k = 0; k < keys.size(); ++k) {
    std::map<std::size_t, std::map<std::string, const ResultRow*>> by_restart;
    for (const auto* r : rows)
      if (r->model == keys[k].first && r->mode == keys[k].second) by_restart[r->restart][r->bin] = r;
    std::optional<std::size_t> best;
    double best_ppl = kNaN;
    for (const auto& [restart, bins_of] : by_restart) {
      const auto it = bins_of.find(bins.front());
      const double ppl = it == bins_of.end() ? kNaN : it->second->ppl;
      if (!best || better(ppl, best_ppl)) best = restart, best_ppl = ppl;
    }
    for (const auto& [bin, r] : by_restart[*best]) cells[k][bin] = r->acc;
  }
  auto value = [&](std::size_t k, const std::string& bin) {
    const auto it = cells[k].find(bin);
    return it == cells[k].end() ? kNaN : it->second;
  };
  std::string out = task + "\n| model (mode) |";
  for (const auto& b : bins) out += " " + b + " |";
  out += "\n|---|";
  for (std::size_t i = 0; i < bins.size(); ++i) out += "---|";
  out += "\n";
  for (std::size_t k = 0; k < keys.size(); ++k) {
    out += "| " + keys[k].first + " (" + keys[k].second + ") |";
    for (const auto& b : bins) {
      const double v = value(k, b);
      bool bold = std::isfinite(v);
      std::size_t peers = 0;
      for (std::size_t o = 0; o < keys.size(); ++o) {
        if (o == k || keys[o].first != keys[k].first) continue;
        ++peers;
        const double w = value(o, b);
        if (std::isfinite(w) && !(v > w)) bold = false;
      }
      const std::string text = fixed(v, 2);
      out += " " + (bold && peers > 0 ? "**" + text + "**" : text) + " |";
    }
    out += "\n";
  }
  return out;
}

std::string ptb_table(const std::vector<const ResultRow*>& rows) {
  std::vector<std::string> models;
  std::vector<std::string> modes;
  for (const auto* r : rows) push_unique(models, r->model);
  for (const char* m : {"n", "c", "m", "cm"})
    for (const auto* r : rows)
      if (r->mode == m) {
        push_unique(modes, std::string(m));
        break;
      }
  // (model, mode) -> test perplexity of the restart with the lowest validation perplexity.
  std::map<std::pair<std::string, std::string>, double> test;
  for (const auto& model : models) {
    for (const auto& mode : modes) {
      std::map<std::size_t, std::pair<double, double>> by_restart;  // valid, test
      for (const auto* r : rows) {
        if (r->model != model || r->mode != mode) continue;
        auto& e = by_restart.try_emplace(r->restart, kNaN, kNaN).first->second;
        (r->bin == "valid" ? e.first : e.second) = r->ppl;
      }
      if (by_restart.empty()) continue;
      std::optional<std::size_t> best;
      for (const auto& [restart, vt] : by_restart) {
        const double key = std::isfinite(vt.first) ? vt.first : vt.second;
        const auto& cur = by_restart[best.value_or(restart)];
        const double cur_key = std::isfinite(cur.first) ? cur.first : cur.second;
        if (!best || better(key, cur_key)) best = restart;
      }
      test[{model, mode}] = by_restart[*best].second;
    }
  }
  auto value = [&](const std::string& model, const std::string& mode) {
    const auto it = test.find({model, mode});
    return it == test.end() ? kNaN : it->second;
  };
  std::string out = "ptb\n| model |";
  for (const auto& m : modes) out += " test ppl (" + m + ") |";
  out += "\n|---|";
  for (std::size_t i = 0; i < modes.size(); ++i) out += "---|";
  out += "\n";
  for (const auto& model : models) {
    out += "| " + model + " |";
    for (const auto& mode : modes) {
      const double v = value(model, mode);
      bool bold = std::isfinite(v) && models.size() > 1;
      for (const auto& other : models)
        if (other != model && std::isfinite(value(other, mode)) && !(v < value(other, mode)))
          bold = false;
      const std::string text = fixed(v, 1);
      out += " " + (bold ? "**" + text + "**" : text) + " |";
    }
    out += "\n";
  }
  return out;
}

}  // namespace

std::string render_report(const std::vector<ResultRow>& rows) {
  std::vector<std::string> tasks;
  for (const auto& r : rows) push_unique(tasks, r.task);
  std::string out;
  for (const auto& t : tasks) {
    std::vector<const ResultRow*> mine;
    for (const auto& r : rows)
      if (r.task == t) mine.push_back(&r);
    if (!out.empty()) out += "\n";
    out += t == kPtbTask ? ptb_table(mine) : formal_table(t, mine);
  }
  return out;
}

}  // namespace stacklab
