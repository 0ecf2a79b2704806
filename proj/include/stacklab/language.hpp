#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace stacklab {

enum class TaskId {
  count3,
  marked_reverse_and_copy,
  count_and_copy,
  marked_copy,
  unmarked_copy_diff_alphabets,
  unmarked_reverse_and_copy,
  unmarked_copy,
};

inline constexpr TaskId kAllTasks[] = {
    TaskId::count3,         TaskId::marked_reverse_and_copy,
    TaskId::count_and_copy, TaskId::marked_copy,
    TaskId::unmarked_copy_diff_alphabets, TaskId::unmarked_reverse_and_copy,
    TaskId::unmarked_copy,
};

std::string_view to_string(TaskId id);
/// Accepts the canonical names and their hyphenated spellings ("count-3").
TaskId parse_task(std::string_view name);

using Sequence = std::vector<int>;

struct SampleSpec {
  std::size_t min_length = 40;  // total length, end-of-sequence excluded
  std::size_t max_length = 80;
  std::size_t count = 0;
  std::uint64_t seed = 0;
};

enum class ExpectedAction { push, pop, noop, unconstrained };
std::string_view to_string(ExpectedAction action);

struct ReferenceProfile {
  std::vector<ExpectedAction> actions;  // one per input symbol
  std::optional<std::string> warning;
};

/// One of the seven benchmark languages. Symbol ids are 0..vocab_size()-1 with
/// end-of-sequence last.
///
///   count3                        a^n b^n c^n, n >= 0
///   marked_reverse_and_copy       w # w^R # w
///   count_and_copy                w #^|w| w
///   marked_copy                   w # w
///   unmarked_copy_diff_alphabets  w phi(w), phi(0)=2, phi(1)=3
///   unmarked_reverse_and_copy     w w^R w
///   unmarked_copy                 w w
///
/// with w in {0,1}^+ for the copy family.
class LanguageTask {
 public:
  explicit LanguageTask(TaskId id);

  TaskId id() const { return id_; }
  std::string_view name() const { return to_string(id_); }
  /// Symbol names, end-of-sequence ("<eos>") last.
  const std::vector<std::string>& symbols() const { return symbols_; }
  std::size_t vocab_size() const { return symbols_.size(); }
  int eos() const { return static_cast<int>(symbols_.size()) - 1; }
  /// Non-marker symbols that carry string content.
  const std::vector<int>& content_symbols() const { return content_; }

  bool length_attainable(std::size_t length) const;
  std::vector<std::size_t> attainable_lengths(std::size_t min_length,
                                              std::size_t max_length) const;

  /// Draws a length uniformly among attainable lengths in range, then a string
  /// uniformly among the language's strings of that length. Throws
  /// std::invalid_argument naming the nearest attainable lengths when the range
  /// holds none.
  std::vector<Sequence> sample(const SampleSpec& spec) const;

  /// Foreign symbols (including end-of-sequence) make the result false.
  bool member(std::span<const int> s) const;

  /// Bit i set iff symbol i can follow `prefix` in some string of the language.
  std::uint32_t next_mask(std::span<const int> prefix) const;
  /// Sorted admissible next symbols. Empty for a dead prefix, in which case
  /// `diagnostic` (when given) says why.
  std::vector<int> valid_next(std::span<const int> prefix,
                              std::string* diagnostic = nullptr) const;

  /// Target indices t in [0, |s|] whose prefix s[0:t] admits exactly one next
  /// symbol. Target |s| is the end-of-sequence prediction.
  std::vector<std::size_t> determined_positions(std::span<const int> s) const;

  /// Canonical one-stack action per input position.
  ReferenceProfile reference_profile(std::span<const int> s) const;

  /// Same-class substitutes for a content symbol (empty for markers).
  std::vector<int> alternatives(int symbol) const;

  std::string format(std::span<const int> s) const;  // space-separated names
  Sequence parse(std::string_view line) const;       // throws on unknown symbol

 private:
  int marker() const;
  std::uint32_t compute_next(std::span<const int> prefix, std::string* why) const;

  TaskId id_;
  std::vector<std::string> symbols_;
  std::vector<int> content_;
};

/// Writes `path` (one string per line) and `path`.json recording task, spec,
/// seed and symbol inventory. Both writes are atomic.
void write_dataset(const std::filesystem::path& path, const LanguageTask& task,
                   const SampleSpec& spec, const std::vector<Sequence>& strings);

struct Dataset {
  TaskId task;
  SampleSpec spec;
  std::vector<Sequence> strings;
};
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace stacklab
