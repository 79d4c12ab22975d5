#pragma once

// Slow, obviously-correct reference computations used to check the metric
// module. Nothing here calls into medres::metrics beyond reading tokens.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <string>
#include <vector>

namespace oracle {

using Tokens = std::vector<std::string>;
using Gram = std::vector<std::string>;

inline std::size_t count_occurrences(const Tokens& seq, const Gram& gram) {
  std::size_t c = 0;
  if (seq.size() < gram.size()) return 0;
  for (std::size_t i = 0; i + gram.size() <= seq.size(); ++i) {
    if (std::equal(gram.begin(), gram.end(), seq.begin() + static_cast<std::ptrdiff_t>(i))) ++c;
  }
  return c;
}

// CIDEr(-D) with every n-gram of the corpus laid out as an explicit dense
// vector coordinate.
inline std::vector<double> cider(const std::vector<Tokens>& cands, const std::vector<std::vector<Tokens>>& ref_sets,
                                 bool clipped_and_penalized, double sigma = 6.0, int max_n = 4) {
  const double docs = static_cast<double>(ref_sets.size());
  std::vector<double> out;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    double acc = 0.0;
    for (const Tokens& ref : ref_sets[i]) {
      double sum = 0.0;
      for (int n = 1; n <= max_n; ++n) {
        std::vector<Gram> universe;
        const auto collect = [&](const Tokens& s) {
          for (std::size_t k = 0; k + n <= s.size(); ++k) {
            Gram g(s.begin() + static_cast<std::ptrdiff_t>(k), s.begin() + static_cast<std::ptrdiff_t>(k + n));
            if (std::find(universe.begin(), universe.end(), g) == universe.end()) universe.push_back(g);
          }
        };
        for (const auto& c : cands) collect(c);
        for (const auto& set : ref_sets) {
          for (const auto& r : set) collect(r);
        }
        std::vector<double> vc, vr;
        for (const Gram& g : universe) {
          double df = 0.0;
          for (const auto& set : ref_sets) {
            bool present = false;
            for (const auto& r : set) present = present || count_occurrences(r, g) > 0;
            if (present) df += 1.0;
          }
          const double idf = std::log(docs) - std::log(std::max(1.0, df));
          vc.push_back(static_cast<double>(count_occurrences(cands[i], g)) * idf);
          vr.push_back(static_cast<double>(count_occurrences(ref, g)) * idf);
        }
        double dot = 0.0, nc = 0.0, nr = 0.0;
        for (std::size_t k = 0; k < universe.size(); ++k) {
          dot += (clipped_and_penalized ? std::min(vc[k], vr[k]) : vc[k]) * vr[k];
          nc += vc[k] * vc[k];
          nr += vr[k] * vr[k];
        }
        double sim = (nc > 0 && nr > 0) ? dot / (std::sqrt(nc) * std::sqrt(nr)) : 0.0;
        if (clipped_and_penalized) {
          const double d = static_cast<double>(cands[i].size()) - static_cast<double>(ref.size());
          sim *= std::exp(-d * d / (2 * sigma * sigma));
        }
        sum += sim;
      }
      acc += sum;
    }
    out.push_back(acc / static_cast<double>(ref_sets[i].size()) * 10.0 / max_n);
  }
  return out;
}

inline bool is_subsequence(const Tokens& sub, const Tokens& seq) {
  std::size_t j = 0;
  for (std::size_t i = 0; i < seq.size() && j < sub.size(); ++i) {
    if (seq[i] == sub[j]) ++j;
  }
  return j == sub.size();
}

// Longest subsequence of `a` (tried via every subset mask) that is also a
// subsequence of `b`.
inline std::size_t lcs(const Tokens& a, const Tokens& b) {
  std::size_t best = 0;
  for (unsigned mask = 0; mask < (1u << a.size()); ++mask) {
    Tokens sub;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (mask & (1u << i)) sub.push_back(a[i]);
    }
    if (sub.size() > best && is_subsequence(sub, b)) best = sub.size();
  }
  return best;
}

struct Alignment {
  std::size_t matches = 0;
  std::size_t chunks = 0;
};

// Every one-to-one exact-match alignment, keeping the most matches and then
// the fewest chunks (runs adjacent in both sequences).
inline Alignment meteor_alignment(const Tokens& cand, const Tokens& ref) {
  Alignment best{0, std::numeric_limits<std::size_t>::max()};
  std::vector<int> map_to(cand.size(), -1);
  std::vector<bool> used(ref.size(), false);
  const auto score = [&] {
    std::size_t m = 0, chunks = 0;
    for (std::size_t i = 0; i < cand.size(); ++i) {
      if (map_to[i] < 0) continue;
      ++m;
      const bool continues = i > 0 && map_to[i - 1] >= 0 && map_to[i] == map_to[i - 1] + 1;
      if (!continues) ++chunks;
    }
    if (m > best.matches || (m == best.matches && chunks < best.chunks)) best = {m, chunks};
  };
  const auto rec = [&](auto&& self, std::size_t i) -> void {
    if (i == cand.size()) {
      score();
      return;
    }
    self(self, i + 1);
    for (std::size_t j = 0; j < ref.size(); ++j) {
      if (used[j] || ref[j] != cand[i]) continue;
      used[j] = true;
      map_to[i] = static_cast<int>(j);
      self(self, i + 1);
      map_to[i] = -1;
      used[j] = false;
    }
  };
  rec(rec, 0);
  if (best.matches == 0) best.chunks = 0;
  return best;
}

}  // namespace oracle
