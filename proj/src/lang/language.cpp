#include "stacklab/language.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "stacklab/checkpoint.hpp"

namespace stacklab {

namespace {

constexpr int kA = 0, kB = 1, kC = 2;  // count3
constexpr int kZero = 0, kOne = 1;     // copy family

std::uint32_t bit(int s) { return std::uint32_t(1) << s; }

int phi(int s) { return s + 2; }

// Number of marker symbols in s.
std::size_t count_of(std::span<const int> s, int symbol) {
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), symbol));
}

bool all_binary(std::span<const int> s) {
  return std::all_of(s.begin(), s.end(), [](int x) { return x == kZero || x == kOne; });
}

bool equal_reversed(std::span<const int> a, std::span<const int> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.rbegin());
}

bool is_prefix_of(std::span<const int> p, std::span<const int> s) {
  return p.size() <= s.size() && std::equal(p.begin(), p.end(), s.begin());
}

struct Dead {
  std::string* why;
  std::uint32_t operator()(const std::string& reason) const {
    if (why) *why = reason;
    return 0;
  }
};

}  // namespace

std::string_view to_string(TaskId id) {
  switch (id) {
    case TaskId::count3: return "count3";
    case TaskId::marked_reverse_and_copy: return "marked_reverse_and_copy";
    case TaskId::count_and_copy: return "count_and_copy";
    case TaskId::marked_copy: return "marked_copy";
    case TaskId::unmarked_copy_diff_alphabets: return "unmarked_copy_diff_alphabets";
    case TaskId::unmarked_reverse_and_copy: return "unmarked_reverse_and_copy";
    case TaskId::unmarked_copy: return "unmarked_copy";
  }
  return "unknown";
}

TaskId parse_task(std::string_view name) {
  std::string canon(name);
  std::replace(canon.begin(), canon.end(), '-', '_');
  if (canon == "count_3") canon = "count3";
  if (canon == "unmarked_copy_diff_alpha" || canon == "unmarked_copy_different_alphabets") {
    canon = "unmarked_copy_diff_alphabets";
  }
  for (TaskId id : kAllTasks) {
    if (to_string(id) == canon) return id;
  }
  throw std::invalid_argument("unknown task '" + std::string(name) + "'");
}

std::string_view to_string(ExpectedAction action) {
  switch (action) {
    case ExpectedAction::push: return "push";
    case ExpectedAction::pop: return "pop";
    case ExpectedAction::noop: return "noop";
    case ExpectedAction::unconstrained: return "unconstrained";
  }
  return "unconstrained";
}

LanguageTask::LanguageTask(TaskId id) : id_(id) {
  switch (id) {
    case TaskId::count3:
      symbols_ = {"a", "b", "c"};
      content_ = {kA, kB, kC};
      break;
    case TaskId::marked_reverse_and_copy:
    case TaskId::count_and_copy:
    case TaskId::marked_copy:
      symbols_ = {"0", "1", "#"};
      content_ = {kZero, kOne};
      break;
    case TaskId::unmarked_copy_diff_alphabets:
      symbols_ = {"0", "1", "2", "3"};
      content_ = {0, 1, 2, 3};
      break;
    case TaskId::unmarked_reverse_and_copy:
    case TaskId::unmarked_copy:
      symbols_ = {"0", "1"};
      content_ = {kZero, kOne};
      break;
  }
  symbols_.push_back("<eos>");
}

int LanguageTask::marker() const {
  switch (id_) {
    case TaskId::marked_reverse_and_copy:
    case TaskId::count_and_copy:
    case TaskId::marked_copy:
      return 2;
    default:
      return -1;
  }
}

bool LanguageTask::length_attainable(std::size_t n) const {
  switch (id_) {
    case TaskId::count3: return n % 3 == 0;
    case TaskId::marked_reverse_and_copy: return n >= 5 && (n - 2) % 3 == 0;
    case TaskId::count_and_copy:
    case TaskId::unmarked_reverse_and_copy: return n >= 3 && n % 3 == 0;
    case TaskId::marked_copy: return n >= 3 && n % 2 == 1;
    case TaskId::unmarked_copy_diff_alphabets:
    case TaskId::unmarked_copy: return n >= 2 && n % 2 == 0;
  }
  return false;
}

std::vector<std::size_t> LanguageTask::attainable_lengths(std::size_t min_length,
                                                          std::size_t max_length) const {
  std::vector<std::size_t> out;
  for (std::size_t n = min_length; n <= max_length; ++n) {
    if (length_attainable(n)) out.push_back(n);
  }
  return out;
}

std::vector<Sequence> LanguageTask::sample(const SampleSpec& spec) const {
  if (spec.min_length > spec.max_length) {
    throw std::invalid_argument("sample range [" + std::to_string(spec.min_length) + "," +
                                std::to_string(spec.max_length) + "] is empty");
  }
  const auto lengths = attainable_lengths(spec.min_length, spec.max_length);
  if (lengths.empty()) {
    std::string msg = std::string(name()) + ": no attainable length in [" +
                      std::to_string(spec.min_length) + "," + std::to_string(spec.max_length) +
                      "]; nearest attainable:";
    for (std::size_t n = spec.min_length; n-- > 0;) {
      if (length_attainable(n)) {
        msg += " " + std::to_string(n);
        break;
      }
    }
    for (std::size_t n = spec.max_length + 1;; ++n) {
      if (length_attainable(n)) {
        msg += " " + std::to_string(n);
        break;
      }
    }
    throw std::invalid_argument(msg);
  }

  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<std::size_t> pick_length(0, lengths.size() - 1);
  std::bernoulli_distribution coin(0.5);
  std::vector<Sequence> out;
  out.reserve(spec.count);
  for (std::size_t i = 0; i < spec.count; ++i) {
    const std::size_t n = lengths[pick_length(rng)];
    auto draw_w = [&](std::size_t k) {
      Sequence w(k);
      for (auto& x : w) x = coin(rng) ? kOne : kZero;
      return w;
    };
    Sequence s;
    s.reserve(n);
    switch (id_) {
      case TaskId::count3: {
        const std::size_t k = n / 3;
        s.insert(s.end(), k, kA);
        s.insert(s.end(), k, kB);
        s.insert(s.end(), k, kC);
        break;
      }
      case TaskId::marked_reverse_and_copy: {
        const Sequence w = draw_w((n - 2) / 3);
        s = w;
        s.push_back(marker());
        s.insert(s.end(), w.rbegin(), w.rend());
        s.push_back(marker());
        s.insert(s.end(), w.begin(), w.end());
        break;
      }
      case TaskId::count_and_copy: {
        const Sequence w = draw_w(n / 3);
        s = w;
        s.insert(s.end(), w.size(), marker());
        s.insert(s.end(), w.begin(), w.end());
        break;
      }
      case TaskId::marked_copy: {
        const Sequence w = draw_w((n - 1) / 2);
        s = w;
        s.push_back(marker());
        s.insert(s.end(), w.begin(), w.end());
        break;
      }
      case TaskId::unmarked_copy_diff_alphabets: {
        const Sequence w = draw_w(n / 2);
        s = w;
        for (int x : w) s.push_back(phi(x));
        break;
      }
      case TaskId::unmarked_reverse_and_copy: {
        const Sequence w = draw_w(n / 3);
        s = w;
        s.insert(s.end(), w.rbegin(), w.rend());
        s.insert(s.end(), w.begin(), w.end());
        break;
      }
      case TaskId::unmarked_copy: {
        const Sequence w = draw_w(n / 2);
        s = w;
        s.insert(s.end(), w.begin(), w.end());
        break;
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

bool LanguageTask::member(std::span<const int> s) const {
  const int eos_id = eos();
  for (int x : s) {
    if (x < 0 || x >= eos_id) return false;
  }
  const std::size_t n = s.size();
  if (!length_attainable(n)) return false;
  switch (id_) {
    case TaskId::count3: {
      const std::size_t k = n / 3;
      for (std::size_t i = 0; i < n; ++i) {
        if (s[i] != static_cast<int>(i / k)) return false;
      }
      return true;
    }
    case TaskId::marked_reverse_and_copy: {
      const std::size_t k = (n - 2) / 3;
      const auto w = s.subspan(0, k), r = s.subspan(k + 1, k), c = s.subspan(2 * k + 2, k);
      return s[k] == marker() && s[2 * k + 1] == marker() && all_binary(w) &&
             equal_reversed(w, r) && std::equal(w.begin(), w.end(), c.begin());
    }
    case TaskId::count_and_copy: {
      const std::size_t k = n / 3;
      const auto w = s.subspan(0, k), m = s.subspan(k, k), c = s.subspan(2 * k, k);
      return all_binary(w) && count_of(m, marker()) == k &&
             std::equal(w.begin(), w.end(), c.begin());
    }
    case TaskId::marked_copy: {
      const std::size_t k = (n - 1) / 2;
      const auto w = s.subspan(0, k), c = s.subspan(k + 1, k);
      return s[k] == marker() && all_binary(w) && std::equal(w.begin(), w.end(), c.begin());
    }
    case TaskId::unmarked_copy_diff_alphabets: {
      const std::size_t k = n / 2;
      for (std::size_t i = 0; i < k; ++i) {
        if (s[i] > kOne || s[k + i] != phi(s[i])) return false;
      }
      return true;
    }
    case TaskId::unmarked_reverse_and_copy: {
      const std::size_t k = n / 3;
      const auto w = s.subspan(0, k), r = s.subspan(k, k), c = s.subspan(2 * k, k);
      return equal_reversed(w, r) && std::equal(w.begin(), w.end(), c.begin());
    }
    case TaskId::unmarked_copy: {
      const std::size_t k = n / 2;
      return std::equal(s.begin(), s.begin() + k, s.begin() + k);
    }
  }
  return false;
}

std::uint32_t LanguageTask::compute_next(std::span<const int> p, std::string* why) const {
  Dead dead{why};
  const int eos_id = eos();
  for (int x : p) {
    if (x < 0 || x >= eos_id) return dead("foreign symbol in prefix");
  }
  const std::uint32_t binary = bit(kZero) | bit(kOne);
  const std::uint32_t end = bit(eos_id);
  const int hash = marker();

  // Prefix still inside w (no marker seen) for the marked tasks.
  auto open_w = [&]() -> std::uint32_t {
    if (!all_binary(p)) return dead("unexpected symbol before first marker");
    return p.empty() ? binary : binary | bit(hash);
  };

  switch (id_) {
    case TaskId::count3: {
      std::size_t i = 0, na = 0, nb = 0, nc = 0;
      while (i < p.size() && p[i] == kA) ++na, ++i;
      while (i < p.size() && p[i] == kB) ++nb, ++i;
      while (i < p.size() && p[i] == kC) ++nc, ++i;
      if (i != p.size()) return dead("symbols out of a*b*c* order");
      if (nc > 0) {
        if (nb != na) return dead("b-block length differs from a-block");
        if (nc > na) return dead("c-block longer than a-block");
        return nc < na ? bit(kC) : end;
      }
      if (nb > 0) {
        if (nb > na) return dead("b-block longer than a-block");
        return nb < na ? bit(kB) : bit(kC);
      }
      return na == 0 ? (bit(kA) | end) : (bit(kA) | bit(kB));
    }
    case TaskId::marked_copy: {
      const std::size_t h = count_of(p, hash);
      if (h == 0) return open_w();
      if (h > 1) return dead("more than one marker");
      const std::size_t k = std::find(p.begin(), p.end(), hash) - p.begin();
      const auto w = p.subspan(0, k), rest = p.subspan(k + 1);
      if (k == 0) return dead("empty w");
      if (!is_prefix_of(rest, w)) return dead("copy diverges from w");
      return rest.size() < k ? bit(w[rest.size()]) : end;
    }
    case TaskId::marked_reverse_and_copy: {
      const std::size_t h = count_of(p, hash);
      if (h == 0) return open_w();
      if (h > 2) return dead("more than two markers");
      const std::size_t k = std::find(p.begin(), p.end(), hash) - p.begin();
      if (k == 0) return dead("empty w");
      const auto w = p.subspan(0, k);
      const Sequence rev(w.rbegin(), w.rend());
      const auto rest = p.subspan(k + 1);
      if (h == 1) {
        if (!is_prefix_of(rest, rev)) return dead("reversal diverges from w");
        return rest.size() < k ? bit(rev[rest.size()]) : bit(hash);
      }
      if (rest.size() < k + 1 || rest[k] != hash ||
          !std::equal(rev.begin(), rev.end(), rest.begin())) {
        return dead("second segment is not the reversal of w");
      }
      const auto copy = rest.subspan(k + 1);
      if (!is_prefix_of(copy, w)) return dead("copy diverges from w");
      return copy.size() < k ? bit(w[copy.size()]) : end;
    }
    case TaskId::count_and_copy: {
      const std::size_t k = std::find(p.begin(), p.end(), hash) - p.begin();
      if (k == p.size()) return open_w();
      if (k == 0) return dead("empty w");
      const auto w = p.subspan(0, k);
      std::size_t j = k;
      while (j < p.size() && p[j] == hash) ++j;
      const std::size_t run = j - k;
      if (run > k) return dead("marker run longer than w");
      const auto copy = p.subspan(j);
      if (copy.empty()) return run < k ? bit(hash) : bit(w[0]);
      if (run != k) return dead("marker run shorter than w");
      if (!is_prefix_of(copy, w)) return dead("copy diverges from w");
      return copy.size() < k ? bit(w[copy.size()]) : end;
    }
    case TaskId::unmarked_copy_diff_alphabets: {
      std::size_t k = 0;
      while (k < p.size() && p[k] <= kOne) ++k;
      const auto w = p.subspan(0, k), rest = p.subspan(k);
      if (rest.empty()) return k == 0 ? binary : binary | bit(phi(w[0]));
      if (rest.size() > k) return dead("image longer than w");
      for (std::size_t i = 0; i < rest.size(); ++i) {
        if (rest[i] != phi(w[i])) return dead("image diverges from phi(w)");
      }
      return rest.size() < k ? bit(phi(w[rest.size()])) : end;
    }
    case TaskId::unmarked_reverse_and_copy:
    case TaskId::unmarked_copy:
      // Any binary prefix extends with either symbol by taking |w| >= |prefix|+1.
      return member(p) ? binary | end : binary;
  }
  return 0;
}

std::uint32_t LanguageTask::next_mask(std::span<const int> prefix) const {
  return compute_next(prefix, nullptr);
}

std::vector<int> LanguageTask::valid_next(std::span<const int> prefix,
                                          std::string* diagnostic) const {
  const std::uint32_t mask = compute_next(prefix, diagnostic);
  std::vector<int> out;
  for (int s = 0; s < static_cast<int>(vocab_size()); ++s) {
    if (mask & bit(s)) out.push_back(s);
  }
  return out;
}

std::vector<std::size_t> LanguageTask::determined_positions(std::span<const int> s) const {
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t <= s.size(); ++t) {
    if (std::popcount(next_mask(s.first(t))) == 1) out.push_back(t);
  }
  return out;
}

ReferenceProfile LanguageTask::reference_profile(std::span<const int> s) const {
  ReferenceProfile profile;
  profile.actions.assign(s.size(), ExpectedAction::unconstrained);
  const int hash = marker();
  switch (id_) {
    case TaskId::count3:
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == kA) profile.actions[i] = ExpectedAction::push;
        if (s[i] == kB) profile.actions[i] = ExpectedAction::pop;
      }
      break;
    case TaskId::marked_reverse_and_copy: {
      // push over w, pop over w^R, free over the final copy.
      std::size_t segment = 0;
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == hash) {
          profile.actions[i] = ExpectedAction::noop;
          ++segment;
        } else if (segment == 0) {
          profile.actions[i] = ExpectedAction::push;
        } else if (segment == 1) {
          profile.actions[i] = ExpectedAction::pop;
        }
      }
      break;
    }
    case TaskId::marked_copy:
    case TaskId::count_and_copy: {
      bool seen = false;
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == hash) {
          profile.actions[i] = ExpectedAction::noop;
          seen = true;
        } else if (!seen) {
          profile.actions[i] = ExpectedAction::push;
        }
      }
      break;
    }
    case TaskId::unmarked_copy_diff_alphabets:
    case TaskId::unmarked_reverse_and_copy:
    case TaskId::unmarked_copy:
      profile.warning = std::string(name()) + " has no canonical one-stack segment strategy";
      break;
  }
  return profile;
}

std::vector<int> LanguageTask::alternatives(int symbol) const {
  std::vector<int> out;
  if (id_ == TaskId::count3) {
    for (int x : {kA, kB, kC}) {
      if (x != symbol) out.push_back(x);
    }
  } else if (symbol >= 0 && symbol < eos() && symbol != marker()) {
    out.push_back(symbol ^ 1);  // 0<->1, 2<->3
  }
  return out;
}

std::string LanguageTask::format(std::span<const int> s) const {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ' ';
    out += symbols_.at(static_cast<std::size_t>(s[i]));
  }
  return out;
}

Sequence LanguageTask::parse(std::string_view line) const {
  Sequence out;
  std::istringstream in{std::string(line)};
  std::string tok;
  while (in >> tok) {
    const auto it = std::find(symbols_.begin(), symbols_.end() - 1, tok);
    if (it == symbols_.end() - 1) {
      throw std::invalid_argument("unknown symbol '" + tok + "' for task " + std::string(name()));
    }
    out.push_back(static_cast<int>(it - symbols_.begin()));
  }
  return out;
}

void write_dataset(const std::filesystem::path& path, const LanguageTask& task,
                   const SampleSpec& spec, const std::vector<Sequence>& strings) {
  std::string body;
  for (const auto& s : strings) body += task.format(s) + "\n";
  const nlohmann::json header{{"task", task.name()},
                              {"min_length", spec.min_length},
                              {"max_length", spec.max_length},
                              {"count", strings.size()},
                              {"seed", spec.seed},
                              {"symbols", task.symbols()}};
  write_file_atomic(path, body);
  write_file_atomic(path.string() + ".json", header.dump(2) + "\n");
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream hin(path.string() + ".json");
  if (!hin) throw std::runtime_error("missing dataset header " + path.string() + ".json");
  const auto header = nlohmann::json::parse(hin);
  Dataset d{parse_task(header.at("task").get<std::string>()), {}, {}};
  d.spec.min_length = header.at("min_length").get<std::size_t>();
  d.spec.max_length = header.at("max_length").get<std::size_t>();
  d.spec.count = header.at("count").get<std::size_t>();
  d.spec.seed = header.at("seed").get<std::uint64_t>();
  const LanguageTask task(d.task);
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    try {
      d.strings.push_back(task.parse(line));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (d.strings.size() != d.spec.count) {
    throw std::runtime_error(path.string() + ": header says " + std::to_string(d.spec.count) +
                             " strings, file has " + std::to_string(d.strings.size()));
  }
  return d;
}

}  // namespace stacklab
