#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "stacklab/freeze.hpp"
#include "stacklab/language.hpp"
#include "stacklab/model.hpp"

namespace stacklab {

enum class OptimizerKind { sgd, adam };

struct TrainConfig {
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  double clip_norm = 5.0;
  std::size_t batch_size = 10;  // sequences per optimizer step
  std::size_t max_epochs = 100;
  std::size_t patience = 10;    // epochs without validation improvement
  std::size_t restarts = 1;
  std::uint64_t base_seed = 0;  // restart i uses base_seed + i
  FreezeMode freeze = FreezeMode::none;
  bool train_classifier = true;
  std::string model = "lstm";
  std::size_t hidden_size = 20;
  std::size_t embedding_size = 0;
  std::optional<std::filesystem::path> checkpoint_dir;

  void validate() const;  // throws std::invalid_argument
};

nlohmann::json to_json(const TrainConfig& config);
/// Missing keys keep their defaults; unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochStats {
  std::size_t epoch = 0;
  double train_ce = 0.0;  // mean per-symbol cross-entropy
  double valid_ce = 0.0;
};

struct RunRecord {
  std::size_t restart = 0;
  std::uint64_t seed = 0;
  std::vector<EpochStats> epochs;
  double best_valid_ppl = 0.0;
  std::size_t best_epoch = 0;
  std::string checkpoint;
  double wall_seconds = 0.0;
  bool failed = false;
  std::string failure;
  std::optional<std::string> warning;
};

nlohmann::json to_json(const RunRecord& record);
RunRecord run_record_from_json(const nlohmann::json& j);
void append_jsonl(const std::filesystem::path& path, const nlohmann::json& line);

/// Global L2 norm of all gradient buffers; rescales them to `max_norm` when it
/// is exceeded. Returns the pre-clip norm.
double clip_gradients(std::vector<Tensor*>& params, double max_norm);

/// First-order optimizer over the trainable subset of a model. Moment buffers
/// are allocated only for parameters with requires_grad.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double learning_rate, StackRnn& model);
  /// Applies grad / `scale` and clears gradient buffers.
  void step(double scale = 1.0);
  std::size_t steps() const { return t_; }
  std::size_t state_count() const { return m_.size(); }

 private:
  OptimizerKind kind_;
  double lr_;
  std::vector<Tensor*> params_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
  static constexpr double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
};

struct TrainData {
  std::vector<Sequence> train;
  std::vector<Sequence> valid;
  std::size_t vocab_size = 0;
  int eos = 0;
};

struct TrainedRun {
  RunRecord record;
  std::optional<StackRnn> best;  // empty when the restart failed
};

/// Builds the freshly initialized, masked model for `config` and a seed.
StackRnn build_model(const TrainConfig& config, std::size_t vocab_size, std::uint64_t seed,
                     std::optional<std::string>* warning = nullptr);

/// Sum of per-symbol cross-entropy over `data` (EOS included) and target count.
std::pair<double, std::size_t> total_cross_entropy(const StackRnn& model,
                                                   const std::vector<Sequence>& data, int eos);

using EpochCallback = std::function<void(const RunRecord&)>;

/// One restart on a formal-language dataset.
TrainedRun train_restart(const TrainConfig& config, std::size_t restart, const TrainData& data,
                         const EpochCallback& on_epoch = {});

/// All restarts, `workers` at a time; results are ordered by restart index.
std::vector<TrainedRun> train(const TrainConfig& config, const TrainData& data,
                              std::size_t workers = 1);

/// Lowest best_valid_ppl among non-failed records, ties to the lowest restart.
/// Throws std::runtime_error listing every failure when none succeeded.
std::size_t select_best(const std::vector<RunRecord>& records);

}  // namespace stacklab
