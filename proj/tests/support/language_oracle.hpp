#pragma once

// Brute-force reference for the benchmark languages: strings are built
// directly from their free parameters, never through LanguageTask.

#include <bit>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "stacklab/language.hpp"

namespace oracle {

using stacklab::Sequence;
using stacklab::TaskId;

inline std::vector<Sequence> all_words(std::size_t max_len) {
  std::vector<Sequence> out;
  for (std::size_t k = 1; k <= max_len; ++k) {
    for (std::uint32_t bits = 0; bits < (1u << k); ++bits) {
      Sequence w(k);
      for (std::size_t i = 0; i < k; ++i) w[i] = (bits >> i) & 1;
      out.push_back(std::move(w));
    }
  }
  return out;
}

/// Every string of the language whose free parameter (|w| or n) is <= max_param.
inline std::vector<Sequence> enumerate_language(TaskId task, std::size_t max_param) {
  std::vector<Sequence> out;
  if (task == TaskId::count3) {
    for (std::size_t n = 0; n <= max_param; ++n) {
      Sequence s(n, 0);
      s.resize(2 * n, 1);
      s.resize(3 * n, 2);
      out.push_back(s);
    }
    return out;
  }
  const int hash = 2;
  for (const Sequence& w : all_words(max_param)) {
    const Sequence r(w.rbegin(), w.rend());
    Sequence s = w;
    switch (task) {
      case TaskId::marked_reverse_and_copy:
        s.push_back(hash);
        s.insert(s.end(), r.begin(), r.end());
        s.push_back(hash);
        s.insert(s.end(), w.begin(), w.end());
        break;
      case TaskId::count_and_copy:
        s.resize(2 * w.size(), hash);
        s.insert(s.end(), w.begin(), w.end());
        break;
      case TaskId::marked_copy:
        s.push_back(hash);
        s.insert(s.end(), w.begin(), w.end());
        break;
      case TaskId::unmarked_copy_diff_alphabets:
        for (int x : w) s.push_back(x == 0 ? 2 : 3);
        break;
      case TaskId::unmarked_reverse_and_copy:
        s.insert(s.end(), r.begin(), r.end());
        s.insert(s.end(), w.begin(), w.end());
        break;
      case TaskId::unmarked_copy:
        s.insert(s.end(), w.begin(), w.end());
        break;
      case TaskId::count3:
        break;
    }
    out.push_back(std::move(s));
  }
  return out;
}

/// Injective key for strings over an alphabet of `base - 1` symbols.
inline std::uint64_t key(const int* s, std::size_t n, std::uint64_t base) {
  std::uint64_t k = 0;
  for (std::size_t i = 0; i < n; ++i) k = k * base + std::uint64_t(s[i] + 1);
  return k;
}

struct Reference {
  std::uint64_t base;
  int eos;
  std::unordered_set<std::uint64_t> members;          // strings of length <= max_len
  std::unordered_map<std::uint64_t, std::uint32_t> next;  // prefixes of length <= max_len
};

/// Witnesses with parameter max_len + 1 cover every extension of a prefix of
/// length <= max_len by one symbol, for every task here.
inline Reference build_reference(TaskId task, std::size_t max_len) {
  const stacklab::LanguageTask lang(task);
  Reference ref{lang.vocab_size() + 1, lang.eos(), {}, {}};
  for (const Sequence& s : enumerate_language(task, max_len + 1)) {
    if (s.size() <= max_len) ref.members.insert(key(s.data(), s.size(), ref.base));
    for (std::size_t t = 0; t <= std::min(max_len, s.size()); ++t) {
      const int next = t < s.size() ? s[t] : ref.eos;
      ref.next[key(s.data(), t, ref.base)] |= 1u << next;
    }
  }
  return ref;
}

/// Calls visit(s) for every string over symbols 0..alphabet-1 of length <= max_len.
inline void for_each_string(int alphabet, std::size_t max_len,
                            const std::function<void(const Sequence&)>& visit) {
  for (std::size_t n = 0; n <= max_len; ++n) {
    Sequence s(n, 0);
    while (true) {
      visit(s);
      std::size_t i = n;
      while (i > 0 && s[i - 1] == alphabet - 1) s[--i] = 0;
      if (i == 0) break;
      ++s[i - 1];
    }
  }
}

struct Agreement {
  std::size_t checked = 0;
  std::size_t membership_mismatches = 0;
  std::size_t next_mismatches = 0;
  std::size_t determined_mismatches = 0;
  std::string first_failure;
  bool ok() const {
    return membership_mismatches == 0 && next_mismatches == 0 && determined_mismatches == 0;
  }
};

/// Exhaustive comparison of membership, valid_next and determined_positions
/// against the reference over all strings of length <= max_len.
inline Agreement check_task(TaskId task, std::size_t max_len) {
  const stacklab::LanguageTask lang(task);
  const Reference ref = build_reference(task, max_len);
  Agreement a;
  auto note = [&](const Sequence& s, const char* what) {
    if (a.first_failure.empty()) a.first_failure = std::string(what) + " on '" + lang.format(s) + "'";
  };
  for_each_string(lang.eos(), max_len, [&](const Sequence& s) {
    ++a.checked;
    const std::uint64_t k = key(s.data(), s.size(), ref.base);
    const bool in = ref.members.count(k) > 0;
    if (lang.member(s) != in) {
      ++a.membership_mismatches;
      note(s, "membership");
    }
    const auto it = ref.next.find(k);
    const std::uint32_t expected = it == ref.next.end() ? 0 : it->second;
    if (lang.next_mask(s) != expected) {
      ++a.next_mismatches;
      note(s, "valid_next");
    }
    if (in) {
      std::vector<std::size_t> det;
      for (std::size_t t = 0; t <= s.size(); ++t) {
        if (std::popcount(ref.next.at(key(s.data(), t, ref.base))) == 1) det.push_back(t);
      }
      if (lang.determined_positions(s) != det) {
        ++a.determined_mismatches;
        note(s, "determined_positions");
      }
    }
  });
  return a;
}

}  // namespace oracle
