#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "stacklab/evaluator.hpp"
#include "stacklab/freeze.hpp"
#include "stacklab/ptb.hpp"
#include "stacklab/stability.hpp"
#include "stacklab/trainer.hpp"

namespace stacklab {

/// "n" for a fully trained model, otherwise the freeze mode name.
std::string mode_label(FreezeMode mode);

inline constexpr const char* kPtbTask = "ptb";

/// One (task, model, mode) entry of the experiment matrix. `task` is a
/// formal-language name or "ptb".
struct Cell {
  std::string task;
  std::string model;
  FreezeMode mode = FreezeMode::none;
  nlohmann::json overrides = nlohmann::json::object();  // TrainConfig or LmConfig keys

  /// "task/model/mode", the seed tag of the cell.
  std::string id() const;
  bool is_ptb() const { return task == kPtbTask; }
};

struct DataSpec {
  std::size_t train_count = 10000;
  std::size_t valid_count = 1000;
  std::size_t min_length = 40;
  std::size_t max_length = 80;
};

struct StabilityOptions {
  double bucket_width = 20.0;
  std::optional<double> bound;  // default: log(vocabulary size)
  std::size_t perturbation_strings = 100;
  std::size_t flips = 1;
  std::size_t bootstrap = 200;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;  // master seed
  std::vector<Cell> cells;
  TrainConfig train;  // shared by formal-language cells
  DataSpec data;
  std::vector<BinSpec> bins = default_bins();
  std::size_t test_samples = 1000;  // per bin
  std::optional<std::filesystem::path> output;
  std::optional<std::filesystem::path> ptb_dir;  // absent: synthetic corpus
  SyntheticPtbOptions synthetic;
  LmConfig lm;  // shared by PTB cells
  std::size_t ptb_restarts = 1;
  StabilityOptions stability;
  std::size_t workers = 1;

  /// Throws std::invalid_argument naming the first unresolvable field or cell.
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& config);
/// Unknown keys are rejected.
ExperimentConfig experiment_from_json(const nlohmann::json& j);
ExperimentConfig read_experiment(const std::filesystem::path& path);

/// Cell training config after shared settings and overrides are merged.
TrainConfig resolve_train_config(const ExperimentConfig& config, const Cell& cell);
LmConfig resolve_lm_config(const ExperimentConfig& config, const Cell& cell, std::size_t restart);

/// Content hash of everything that determines a cell's outputs.
std::string cell_hash(const ExperimentConfig& config, const Cell& cell);

struct RunOptions {
  std::filesystem::path out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::optional<double> fraction;  // PTB train fraction
  std::optional<std::vector<BinSpec>> bins;
  std::ostream* log = nullptr;
};

struct RunSummary {
  std::size_t cells = 0;
  std::size_t resumed = 0;  // skipped because already complete
  std::size_t failed = 0;
  std::vector<std::string> failures;
};

/// Runs every cell and writes into `options.out`:
///   results.csv   one row per (cell, restart, bin), in cell order
///   summary.csv   best-of-restarts rows per cell
///   runs.jsonl    one training record per restart
///   stability/    one report per formal-language cell
///   comparisons.json  frozen-versus-full diagnostics per (task, model)
///   report.txt    rendered summary tables
///   manifest.json seeds, config, cell hashes, artifact hashes
/// Completed cells (matching hash) are not recomputed.
RunSummary run_experiment(ExperimentConfig config, const RunOptions& options);

/// Stability diagnostics of one model from its per-bin test strings and
/// scores; `tag` keys the derived seeds (fit bootstrap, perturbation, chance).
StabilityReport assess_stability(const StabilityOptions& options, std::uint64_t seed,
                                 const std::string& tag, const LanguageTask& task,
                                 const SequenceScorer& scorer,
                                 const std::vector<std::vector<Sequence>>& strings,
                                 const std::vector<std::vector<SequenceResult>>& results,
                                 const std::vector<BinMetrics>& metrics);

/// Tables per task with rows "model (mode)" and one column per bin, using the
/// best restart per (task, model, mode): lowest first-bin perplexity, ties to
/// the lowest restart. In each column the strict maximum accuracy among rows of
/// the same model is bolded. PTB rows render as one table of test perplexity
/// per mode, restart chosen by validation perplexity, column minimum bolded.
std::string render_report(const std::vector<ResultRow>& rows);

/// 16 hex digits of FNV-1a over the bytes.
std::string content_hash(std::string_view bytes);

}  // namespace stacklab
