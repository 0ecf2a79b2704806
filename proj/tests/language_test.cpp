#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include <gtest/gtest.h>

#include "stacklab/language.hpp"
#include "support/language_oracle.hpp"

using namespace stacklab;

namespace {

Sequence parse(TaskId id, std::string_view compact) {
  const LanguageTask task(id);
  std::string spaced;
  for (char c : compact) {
    spaced += c;
    spaced += ' ';
  }
  return task.parse(spaced);
}

}  // namespace

TEST(Names, RoundTrip) {
  for (TaskId id : kAllTasks) EXPECT_EQ(parse_task(to_string(id)), id);
  EXPECT_EQ(parse_task("count-3"), TaskId::count3);
  EXPECT_EQ(parse_task("unmarked-copy-diff-alpha"), TaskId::unmarked_copy_diff_alphabets);
  EXPECT_THROW(parse_task("dyck"), std::invalid_argument);
}

TEST(Alphabets, MatchDefinitions) {
  EXPECT_EQ(LanguageTask(TaskId::count3).symbols(),
            (std::vector<std::string>{"a", "b", "c", "<eos>"}));
  EXPECT_EQ(LanguageTask(TaskId::marked_copy).vocab_size(), 4u);
  EXPECT_EQ(LanguageTask(TaskId::unmarked_copy_diff_alphabets).vocab_size(), 5u);
  EXPECT_EQ(LanguageTask(TaskId::unmarked_copy).vocab_size(), 3u);
}

TEST(Sample, DefinitionExpansion) {
  const LanguageTask count3(TaskId::count3);
  const auto s = count3.sample({6, 6, 1, 0});
  EXPECT_EQ(count3.format(s[0]), "a a b b c c");
  EXPECT_TRUE(LanguageTask(TaskId::marked_copy).member(parse(TaskId::marked_copy, "01#01")));
}

TEST(Sample, LengthsAttainableAndMembers) {
  for (TaskId id : kAllTasks) {
    const LanguageTask task(id);
    for (const auto& s : task.sample({40, 80, 300, 5})) {
      EXPECT_GE(s.size(), 40u);
      EXPECT_LE(s.size(), 80u);
      EXPECT_TRUE(task.member(s)) << task.name() << ": " << task.format(s);
    }
  }
  for (const auto& s : LanguageTask(TaskId::count3).sample({40, 80, 200, 1})) {
    EXPECT_EQ(s.size() % 3, 0u);
  }
  for (const auto& s : LanguageTask(TaskId::count_and_copy).sample({40, 80, 200, 1})) {
    EXPECT_EQ(s.size() % 3, 0u);
  }
  for (const auto& s : LanguageTask(TaskId::marked_copy).sample({40, 80, 200, 1})) {
    EXPECT_EQ(s.size() % 2, 1u);
  }
}

TEST(Sample, DeterministicGivenSeed) {
  const LanguageTask task(TaskId::marked_reverse_and_copy);
  EXPECT_EQ(task.sample({40, 80, 50, 9}), task.sample({40, 80, 50, 9}));
  EXPECT_NE(task.sample({40, 80, 50, 9}), task.sample({40, 80, 50, 10}));
}

TEST(Sample, UnattainableRangeNamesNearest) {
  const LanguageTask task(TaskId::count3);
  try {
    task.sample({40, 41, 1, 0});
    FAIL();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("39"), std::string::npos) << msg;
    EXPECT_NE(msg.find("42"), std::string::npos) << msg;
  }
}

// Pearson chi-square of the length histogram against uniform over attainable
// lengths. Critical values are the 0.99 quantiles for the given degrees of freedom.
TEST(Sample, LengthHistogramUniform) {
  const std::map<TaskId, double> critical{{TaskId::count3, 26.217},       // df 12
                                          {TaskId::marked_copy, 36.191},  // df 19
                                          {TaskId::unmarked_copy, 37.566}};  // df 20
  for (const auto& [id, crit] : critical) {
    const LanguageTask task(id);
    const auto lengths = task.attainable_lengths(40, 80);
    std::map<std::size_t, double> hist;
    for (const auto& s : task.sample({40, 80, 1000, 123})) hist[s.size()] += 1;
    const double expected = 1000.0 / lengths.size();
    double chi2 = 0.0;
    for (std::size_t n : lengths) chi2 += (hist[n] - expected) * (hist[n] - expected) / expected;
    EXPECT_EQ(hist.size(), lengths.size());
    EXPECT_LT(chi2, crit) << task.name();
  }
}

TEST(Membership, Examples) {
  const LanguageTask count3(TaskId::count3);
  EXPECT_TRUE(count3.member(parse(TaskId::count3, "aabbcc")));
  EXPECT_FALSE(count3.member(parse(TaskId::count3, "aabbc")));
  EXPECT_TRUE(count3.member(Sequence{}));
  EXPECT_FALSE(count3.member(Sequence{0, 1, 7}));  // foreign symbol
  EXPECT_FALSE(count3.member(Sequence{0, 1, 2, 3}));  // end-of-sequence is not content
  EXPECT_TRUE(LanguageTask(TaskId::count_and_copy).member(parse(TaskId::count_and_copy, "01##01")));
  EXPECT_FALSE(LanguageTask(TaskId::count_and_copy).member(parse(TaskId::count_and_copy, "01#01")));
  const LanguageTask ucda(TaskId::unmarked_copy_diff_alphabets);
  EXPECT_TRUE(ucda.member(parse(TaskId::unmarked_copy_diff_alphabets, "0123")));
  EXPECT_FALSE(ucda.member(parse(TaskId::unmarked_copy_diff_alphabets, "0132")));
  EXPECT_TRUE(LanguageTask(TaskId::marked_reverse_and_copy)
                  .member(parse(TaskId::marked_reverse_and_copy, "01#10#01")));
  EXPECT_TRUE(LanguageTask(TaskId::unmarked_reverse_and_copy)
                  .member(parse(TaskId::unmarked_reverse_and_copy, "011001")));
}

TEST(ValidNext, Examples) {
  const LanguageTask count3(TaskId::count3);
  EXPECT_EQ(count3.valid_next(parse(TaskId::count3, "aab")), (std::vector<int>{1}));
  const LanguageTask mc(TaskId::marked_copy);
  EXPECT_EQ(mc.valid_next(parse(TaskId::marked_copy, "01#0")), (std::vector<int>{1}));
  EXPECT_EQ(mc.valid_next(parse(TaskId::marked_copy, "01#01")), (std::vector<int>{mc.eos()}));
  EXPECT_EQ(count3.valid_next(Sequence{}), (std::vector<int>{0, count3.eos()}));
}

TEST(ValidNext, DeadPrefixDiagnosed) {
  const LanguageTask mc(TaskId::marked_copy);
  std::string why;
  EXPECT_TRUE(mc.valid_next(parse(TaskId::marked_copy, "01#1"), &why).empty());
  EXPECT_FALSE(why.empty());
}

TEST(Determined, MarkedCopyAfterMarker) {
  const LanguageTask mc(TaskId::marked_copy);
  // Targets 3..5 predict the two copied symbols and end-of-sequence.
  EXPECT_EQ(mc.determined_positions(parse(TaskId::marked_copy, "01#01")),
            (std::vector<std::size_t>{3, 4, 5}));
}

TEST(Determined, Count3) {
  // Target t predicts s[t]; the first b (t=2) is not forced since a may follow
  // "aa", every later target is.
  const LanguageTask count3(TaskId::count3);
  EXPECT_EQ(count3.determined_positions(parse(TaskId::count3, "aabbcc")),
            (std::vector<std::size_t>{3, 4, 5, 6}));
}

TEST(Determined, EmptyPrefixNeverForcedForBinaryContent) {
  for (TaskId id : kAllTasks) {
    if (id == TaskId::count3) continue;
    EXPECT_GE(LanguageTask(id).valid_next(Sequence{}).size(), 2u) << to_string(id);
  }
}

TEST(Determined, UnmarkedTasksHaveNone) {
  for (TaskId id : {TaskId::unmarked_copy, TaskId::unmarked_reverse_and_copy}) {
    const LanguageTask task(id);
    for (const auto& s : task.sample({40, 80, 20, 3})) {
      EXPECT_TRUE(task.determined_positions(s).empty());
    }
  }
}

TEST(Profile, Examples) {
  using A = ExpectedAction;
  const LanguageTask count3(TaskId::count3);
  EXPECT_EQ(count3.reference_profile(parse(TaskId::count3, "aabbcc")).actions,
            (std::vector<A>{A::push, A::push, A::pop, A::pop, A::unconstrained, A::unconstrained}));
  const LanguageTask mrc(TaskId::marked_reverse_and_copy);
  EXPECT_EQ(mrc.reference_profile(parse(TaskId::marked_reverse_and_copy, "01#10#01")).actions,
            (std::vector<A>{A::push, A::push, A::noop, A::pop, A::pop, A::noop, A::unconstrained,
                            A::unconstrained}));
  const auto none = LanguageTask(TaskId::unmarked_copy).reference_profile(Sequence{0, 1, 0, 1});
  EXPECT_TRUE(none.warning);
  for (A a : none.actions) EXPECT_EQ(a, A::unconstrained);
}

TEST(Profile, MarkersAreNoop) {
  for (TaskId id : {TaskId::marked_copy, TaskId::count_and_copy, TaskId::marked_reverse_and_copy}) {
    const LanguageTask task(id);
    for (const auto& s : task.sample({20, 40, 10, 2})) {
      const auto profile = task.reference_profile(s);
      ASSERT_EQ(profile.actions.size(), s.size());
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == 2) EXPECT_EQ(profile.actions[i], ExpectedAction::noop);
      }
    }
  }
}

TEST(Properties, CorruptionInDeterminedRegionLeavesLanguage) {
  for (TaskId id : kAllTasks) {
    const LanguageTask task(id);
    std::mt19937_64 rng(4);
    for (auto s : task.sample({40, 80, 50, 8})) {
      for (std::size_t t : task.determined_positions(s)) {
        if (t == s.size()) continue;
        for (int other = 0; other < task.eos(); ++other) {
          if (other == s[t]) continue;
          Sequence corrupted = s;
          corrupted[t] = other;
          EXPECT_FALSE(task.member(corrupted)) << task.format(corrupted);
        }
      }
    }
  }
}

// Exhaustive agreement with the enumeration oracle over length <= 10 here;
// the acceptance suite runs the full length-12 sweep.
TEST(Oracle, ExhaustiveAgreementShort) {
  for (TaskId id : kAllTasks) {
    const auto a = oracle::check_task(id, 10);
    EXPECT_TRUE(a.ok()) << to_string(id) << ": " << a.first_failure;
    EXPECT_GT(a.checked, 1000u);
  }
}

TEST(Dataset, WriteReadRoundTrip) {
  const LanguageTask task(TaskId::count_and_copy);
  const SampleSpec spec{40, 80, 25, 77};
  const auto strings = task.sample(spec);
  const auto path = std::filesystem::temp_directory_path() / "stacklab_dataset_test.txt";
  write_dataset(path, task, spec, strings);
  const auto back = read_dataset(path);
  EXPECT_EQ(back.task, TaskId::count_and_copy);
  EXPECT_EQ(back.spec.seed, 77u);
  EXPECT_EQ(back.strings, strings);
  std::ifstream in(path);
  std::string first;
  std::getline(in, first);
  EXPECT_EQ(first, task.format(strings[0]));
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".json");
}
