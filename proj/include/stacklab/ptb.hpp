#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "stacklab/freeze.hpp"
#include "stacklab/model.hpp"
#include "stacklab/trainer.hpp"

namespace stacklab {

inline constexpr const char* kEosToken = "<eos>";
inline constexpr const char* kUnkToken = "<unk>";

/// Word <-> id bijection. Ids are assigned by descending train frequency, ties
/// broken lexicographically.
struct Vocabulary {
  std::vector<std::string> words;
  std::unordered_map<std::string, int> ids;
  int eos = -1;
  int unk = -1;  // -1 when the train split has no unknown token

  std::size_t size() const { return words.size(); }
  /// Id of `word`, or the unknown id; throws if the word is unknown and no
  /// unknown token exists.
  int id(std::string_view word) const;
  const std::string& word(int id) const { return words.at(std::size_t(id)); }
};

nlohmann::json to_json(const Vocabulary& vocab);
Vocabulary vocabulary_from_json(const nlohmann::json& j);

struct Corpus {
  Vocabulary vocab;
  std::vector<int> train, valid, test;
};

struct PtbPaths {
  std::filesystem::path train, valid, test;
};
/// dir/ptb.train.txt, dir/ptb.valid.txt, dir/ptb.test.txt
PtbPaths ptb_paths(const std::filesystem::path& dir);

/// Whitespace-tokenized, one sentence per line; "<eos>" is appended per line.
/// The vocabulary comes from the train split only. Throws std::runtime_error
/// naming a missing file and std::invalid_argument for an empty split.
Corpus load_ptb(const PtbPaths& paths);

/// Ids of one line plus "<eos>".
std::vector<int> encode_line(const Vocabulary& vocab, std::string_view line);
/// Space-joined words; "<eos>" ends a line.
std::string decode(const Vocabulary& vocab, const std::vector<int>& ids);

/// Leading round(fraction * size) ids; fraction in (0, 1].
std::vector<int> leading_fraction(const std::vector<int>& ids, double fraction);

/// inputs[b] and targets[b] are stream b's window; targets are inputs shifted by one.
struct Block {
  std::vector<std::vector<int>> inputs;
  std::vector<std::vector<int>> targets;
};

/// Splits ids into `batch` contiguous streams (tail dropped), then cuts each
/// stream into full windows of `bptt` (input, target) pairs. Consecutive blocks
/// continue each stream, so hidden state can be carried between them.
std::vector<Block> batchify(const std::vector<int>& ids, std::size_t batch, std::size_t bptt);

/// Deterministic PTB-format corpus: a class-bigram process with Zipfian
/// within-class word frequencies, sentence ends at a fixed rate, and rare words
/// written as "<unk>".
struct SyntheticPtbOptions {
  std::size_t vocab_size = 10000;  // including <eos> and <unk>
  std::size_t classes = 64;
  std::size_t train_tokens = 929589;
  std::size_t valid_tokens = 73760;
  std::size_t test_tokens = 82430;
  std::uint64_t seed = 0;
};
void write_synthetic_ptb(const std::filesystem::path& dir, const SyntheticPtbOptions& options);

struct LmConfig {
  std::string model = "lstm";
  std::size_t hidden_size = 64;
  std::size_t embedding_size = 0;  // 0 selects min(hidden, 64)
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  double clip_norm = 5.0;
  std::size_t batch_size = 32;
  std::size_t bptt = 35;
  std::size_t epochs = 1;
  double fraction = 1.0;  // leading fraction of the train split
  std::size_t eval_batch = 10;
  std::uint64_t seed = 0;
  FreezeMode freeze = FreezeMode::none;
  bool train_classifier = true;

  void validate() const;
};

nlohmann::json to_json(const LmConfig& config);
/// Missing keys keep defaults; unknown keys are rejected.
LmConfig lm_config_from_json(const nlohmann::json& j);

/// Per-token perplexity of `model` over `ids` with truncated windows. Stacks
/// are emptied at every window; controller state carries across windows.
double lm_perplexity(const StackRnn& model, const std::vector<int>& ids, std::size_t batch,
                     std::size_t bptt);

struct LmEpoch {
  std::size_t epoch = 0;
  double train_ppl = 0.0;
  double valid_ppl = 0.0;
};

struct LmResult {
  std::vector<LmEpoch> epochs;
  double valid_ppl = 0.0;  // best epoch
  double test_ppl = 0.0;   // of the best-validation model
  std::optional<std::string> warning;
  StackRnn model;
};

/// Throws NonFiniteError on divergence.
LmResult train_lm(const LmConfig& config, const Corpus& corpus,
                  const std::function<void(const LmEpoch&)>& on_epoch = {});

}  // namespace stacklab
