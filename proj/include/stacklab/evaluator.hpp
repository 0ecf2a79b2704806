#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "stacklab/language.hpp"
#include "stacklab/model.hpp"

namespace stacklab {

struct BinSpec {
  std::string label;
  std::size_t lo = 0;  // inclusive total-length range
  std::size_t hi = 0;
};

/// bin0 [40,99], bin1 [100,199], bin2 [200,400].
std::vector<BinSpec> default_bins();
/// Parses "40-99,100-199,200-400"; labels are bin0, bin1, ...
std::vector<BinSpec> parse_bins(std::string_view text);

/// Score of one sequence: cross-entropy over every target (EOS included) and
/// argmax hits at determined targets.
struct SequenceResult {
  std::size_t length = 0;
  double total_ce = 0.0;
  std::size_t targets = 0;
  std::size_t determined = 0;
  std::size_t correct = 0;
};

struct BinMetrics {
  std::string label;
  double accuracy = 0.0;    // NaN when no determined targets exist
  double perplexity = 0.0;  // exp(total_ce / targets)
  std::size_t n_seq = 0;
  std::size_t n_det = 0;
  std::size_t n_correct = 0;
  double total_ce = 0.0;
  std::size_t targets = 0;
};

/// Index of the largest logit; ties go to the lowest index.
std::size_t argmax(const std::vector<double>& logits);

/// Scores every string (order-preserving) with up to `workers` threads.
std::vector<SequenceResult> score_sequences(const SequenceScorer& scorer,
                                            const LanguageTask& task,
                                            const std::vector<Sequence>& strings,
                                            std::size_t workers = 1);

/// Sums results in index order, so the metrics do not depend on worker count.
BinMetrics aggregate(const std::string& label, const std::vector<SequenceResult>& results);

/// Fresh test strings for bin `index`; the seed is derived from (seed, index)
/// and never coincides with training seeds derived by the runner.
std::vector<Sequence> bin_test_set(const LanguageTask& task, const BinSpec& bin,
                                   std::size_t index, std::size_t count, std::uint64_t seed);

/// Throws std::invalid_argument if a bin holds no attainable length or count is 0.
std::vector<BinMetrics> evaluate_bins(const SequenceScorer& scorer, const LanguageTask& task,
                                      const std::vector<BinSpec>& bins,
                                      std::size_t samples_per_bin, std::uint64_t seed,
                                      std::size_t workers = 1);

/// 1/k for a predictor guessing uniformly among k candidate classes.
double chance_from_classes(std::size_t k);

/// Expected accuracy of a predictor that draws its guess from the marginal
/// distribution of forced symbols, independent of context. For the copy family
/// this is 1/2 (binary content); for count3 it is estimated from sampled strings.
double chance_baseline(const LanguageTask& task, const BinSpec& bin, std::size_t samples = 1000,
                       std::uint64_t seed = 0);

/// Coin-flip predictor over the content class of each forced symbol, scored on
/// the given strings (EOS targets are never guessed correctly).
std::vector<SequenceResult> simulate_chance(const LanguageTask& task,
                                            const std::vector<Sequence>& strings,
                                            std::uint64_t seed);

/// Results CSV: task,model,mode,restart,bin,acc,ppl,n_seq,n_det
struct ResultRow {
  std::string task;
  std::string model;
  std::string mode;
  std::size_t restart = 0;
  std::string bin;
  double acc = 0.0;
  double ppl = 0.0;
  std::size_t n_seq = 0;
  std::size_t n_det = 0;
};

inline constexpr const char* kResultsHeader = "task,model,mode,restart,bin,acc,ppl,n_seq,n_det";
std::string format_row(const ResultRow& row);
/// Throws std::invalid_argument with the 1-based line number on schema errors.
std::vector<ResultRow> read_results_csv(std::istream& in);
std::vector<ResultRow> read_results_csv(const std::filesystem::path& path);

}  // namespace stacklab
