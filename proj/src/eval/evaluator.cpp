#include "stacklab/evaluator.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "stacklab/seed.hpp"

namespace stacklab {

std::vector<BinSpec> default_bins() {
  return {{"bin0", 40, 99}, {"bin1", 100, 199}, {"bin2", 200, 400}};
}

std::vector<BinSpec> parse_bins(std::string_view text) {
  std::vector<BinSpec> bins;
  std::string item;
  std::istringstream in{std::string(text)};
  while (std::getline(in, item, ',')) {
    const auto dash = item.find('-');
    std::size_t lo = 0, hi = 0;
    const bool ok =
        dash != std::string::npos &&
        std::from_chars(item.data(), item.data() + dash, lo).ec == std::errc() &&
        std::from_chars(item.data() + dash + 1, item.data() + item.size(), hi).ec == std::errc();
    if (!ok || lo > hi) throw std::invalid_argument("bad bin '" + item + "', expected lo-hi");
    bins.push_back({"bin" + std::to_string(bins.size()), lo, hi});
  }
  if (bins.empty()) throw std::invalid_argument("no bins given");
  return bins;
}

std::size_t argmax(const std::vector<double>& logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return best;
}

namespace {

template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
}

double log_sum_exp(const std::vector<double>& l) {
  const double mx = *std::max_element(l.begin(), l.end());
  double z = 0.0;
  for (double v : l) z += std::exp(v - mx);
  return mx + std::log(z);
}

}  // namespace

std::vector<SequenceResult> score_sequences(const SequenceScorer& scorer,
                                            const LanguageTask& task,
                                            const std::vector<Sequence>& strings,
                                            std::size_t workers) {
  if (scorer.vocab_size() != task.vocab_size()) {
    throw std::invalid_argument("model vocabulary " + std::to_string(scorer.vocab_size()) +
                                " does not match task " + std::string(task.name()) + " (" +
                                std::to_string(task.vocab_size()) + ")");
  }
  std::vector<SequenceResult> out(strings.size());
  parallel_for(strings.size(), workers, [&](std::size_t i) {
    const Sequence& s = strings[i];
    const auto scores = scorer.score(s);
    SequenceResult r;
    r.length = s.size();
    r.targets = s.size() + 1;
    for (std::size_t t = 0; t <= s.size(); ++t) {
      const int target = t < s.size() ? s[t] : task.eos();
      r.total_ce += log_sum_exp(scores.logits[t]) - scores.logits[t][std::size_t(target)];
    }
    for (std::size_t t : task.determined_positions(s)) {
      const int target = t < s.size() ? s[t] : task.eos();
      ++r.determined;
      r.correct += argmax(scores.logits[t]) == std::size_t(target);
    }
    out[i] = r;
  });
  return out;
}

BinMetrics aggregate(const std::string& label, const std::vector<SequenceResult>& results) {
  BinMetrics m;
  m.label = label;
  m.n_seq = results.size();
  for (const auto& r : results) {
    m.total_ce += r.total_ce;
    m.targets += r.targets;
    m.n_det += r.determined;
    m.n_correct += r.correct;
  }
  m.accuracy = m.n_det ? double(m.n_correct) / double(m.n_det) : std::nan("");
  m.perplexity = m.targets ? std::exp(m.total_ce / double(m.targets)) : std::nan("");
  return m;
}

std::vector<Sequence> bin_test_set(const LanguageTask& task, const BinSpec& bin,
                                   std::size_t index, std::size_t count, std::uint64_t seed) {
  if (count == 0) throw std::invalid_argument("empty test sample for " + bin.label);
  return task.sample({bin.lo, bin.hi, count, derive_seed(seed, "test-bin", index)});
}

std::vector<BinMetrics> evaluate_bins(const SequenceScorer& scorer, const LanguageTask& task,
                                      const std::vector<BinSpec>& bins,
                                      std::size_t samples_per_bin, std::uint64_t seed,
                                      std::size_t workers) {
  std::vector<BinMetrics> out;
  for (std::size_t b = 0; b < bins.size(); ++b) {
    const auto strings = bin_test_set(task, bins[b], b, samples_per_bin, seed);
    out.push_back(aggregate(bins[b].label, score_sequences(scorer, task, strings, workers)));
  }
  return out;
}

double chance_from_classes(std::size_t k) {
  if (k == 0) throw std::invalid_argument("chance baseline needs at least one class");
  return 1.0 / double(k);
}

double chance_baseline(const LanguageTask& task, const BinSpec& bin, std::size_t samples,
                       std::uint64_t seed) {
  if (task.id() != TaskId::count3) return chance_from_classes(2);
  std::vector<double> freq(task.vocab_size(), 0.0);
  double total = 0.0;
  for (const auto& s : task.sample({bin.lo, bin.hi, samples, seed})) {
    for (std::size_t t : task.determined_positions(s)) {
      freq[std::size_t(t < s.size() ? s[t] : task.eos())] += 1.0;
      total += 1.0;
    }
  }
  double acc = 0.0;
  for (double f : freq) acc += (f / total) * (f / total);
  return acc;
}

std::vector<SequenceResult> simulate_chance(const LanguageTask& task,
                                            const std::vector<Sequence>& strings,
                                            std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<SequenceResult> out;
  out.reserve(strings.size());
  for (const auto& s : strings) {
    SequenceResult r;
    r.length = s.size();
    r.targets = s.size() + 1;
    for (std::size_t t : task.determined_positions(s)) {
      ++r.determined;
      if (t == s.size()) continue;
      auto candidates = task.alternatives(s[t]);
      candidates.push_back(s[t]);
      std::sort(candidates.begin(), candidates.end());
      std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
      r.correct += candidates[pick(rng)] == s[t];
    }
    // Uniform guess over the vocabulary for the cross-entropy side.
    r.total_ce = double(r.targets) * std::log(double(task.vocab_size()));
    out.push_back(r);
  }
  return out;
}

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::string format_row(const ResultRow& r) {
  return r.task + "," + r.model + "," + r.mode + "," + std::to_string(r.restart) + "," + r.bin +
         "," + fmt(r.acc) + "," + fmt(r.ppl) + "," + std::to_string(r.n_seq) + "," +
         std::to_string(r.n_det);
}

std::vector<ResultRow> read_results_csv(std::istream& in) {
  std::vector<ResultRow> rows;
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& why) {
    throw std::invalid_argument("results CSV line " + std::to_string(line_no) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1) {
      if (line.empty()) return rows;
      if (line != kResultsHeader) fail("expected header '" + std::string(kResultsHeader) + "'");
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::string field;
    std::istringstream ls(line);
    while (std::getline(ls, field, ',')) f.push_back(field);
    if (!line.empty() && line.back() == ',') f.push_back("");
    if (f.size() != 9) fail("expected 9 fields, got " + std::to_string(f.size()));
    ResultRow r;
    r.task = f[0];
    r.model = f[1];
    r.mode = f[2];
    r.bin = f[4];
    auto to_size = [&](const std::string& text, const char* name) {
      std::size_t v = 0;
      const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      if (ec != std::errc() || ptr != text.data() + text.size()) {
        fail(std::string("bad ") + name + " '" + text + "'");
      }
      return v;
    };
    auto to_double = [&](const std::string& text, const char* name) {
      if (text == "nan") return std::nan("");
      char* end = nullptr;
      const double v = std::strtod(text.c_str(), &end);
      if (text.empty() || end != text.c_str() + text.size()) {
        fail(std::string("bad ") + name + " '" + text + "'");
      }
      return v;
    };
    r.restart = to_size(f[3], "restart");
    r.acc = to_double(f[5], "acc");
    r.ppl = to_double(f[6], "ppl");
    r.n_seq = to_size(f[7], "n_seq");
    r.n_det = to_size(f[8], "n_det");
    if (r.task.empty() || r.model.empty() || r.mode.empty() || r.bin.empty()) {
      fail("empty key field");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<ResultRow> read_results_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open results CSV " + path.string());
  return read_results_csv(in);
}

}  // namespace stacklab
