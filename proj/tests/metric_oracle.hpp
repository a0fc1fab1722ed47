/*
 * Copyright 2026 The fsqa Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Brute-force reference scorer and randomized case generator for the
// EM/F1 implementation. Shares no code with fsqa/metrics.hpp.

#ifndef FSQA_TESTS_METRIC_ORACLE_HPP
#define FSQA_TESTS_METRIC_ORACLE_HPP

#include <algorithm>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "fsqa/rng.hpp"

namespace fsqa::testing {

inline std::vector<std::string> oracle_tokens(const std::string& s) {
  std::string lowered;
  for (unsigned char c : s) {
    if (c >= 'A' && c <= 'Z') {
      lowered += static_cast<char>(c - 'A' + 'a');
    } else if ((c >= '!' && c <= '/') || (c >= ':' && c <= '@') ||
               (c >= '[' && c <= '`') || (c >= '{' && c <= '~')) {
      continue;
    } else {
      lowered += static_cast<char>(c);
    }
  }
  std::istringstream in(lowered);
  std::vector<std::string> out;
  std::string word;
  while (in >> word) {
    if (word == "a" || word == "an" || word == "the") continue;
    out.push_back(word);
  }
  return out;
}

inline double oracle_em(const std::string& pred, const std::vector<std::string>& golds) {
  for (const auto& g : golds)
    if (oracle_tokens(g) == oracle_tokens(pred)) return 1.0;
  return 0.0;
}

inline double oracle_f1(const std::string& pred, const std::vector<std::string>& golds) {
  double best = 0.0;
  for (const auto& g : golds) {
    auto p = oracle_tokens(pred), t = oracle_tokens(g);
    double score;
    if (p.empty() || t.empty()) {
      score = (p.empty() && t.empty()) ? 1.0 : 0.0;
    } else {
      std::sort(p.begin(), p.end());
      std::sort(t.begin(), t.end());
      std::vector<std::string> both;
      std::set_intersection(p.begin(), p.end(), t.begin(), t.end(),
                            std::back_inserter(both));
      const double common = static_cast<double>(both.size());
      if (common == 0.0) {
        score = 0.0;
      } else {
        const double precision = common / static_cast<double>(p.size());
        const double recall = common / static_cast<double>(t.size());
        score = 2.0 * precision * recall / (precision + recall);
      }
    }
    best = std::max(best, score);
  }
  return best;
}

struct MetricCase {
  std::string prediction;
  std::vector<std::string> golds;
};

// Cases 0 and 1 are worked examples (F1 0.8 once "the" is dropped, and
// F1 2/3 with P = R = 2/3); the rest mix a small word pool with
// articles, case changes, punctuation and repeated tokens.
inline std::vector<MetricCase> metric_cases(std::uint64_t seed, int n) {
  static const std::vector<std::string> kPool = {
      "cat", "sat", "down", "The", "a", "an", "dog", "Cat", "mat", "on",
      "sat.", "red", "blue", "x", "\"quoted\"", "it's", "THE", "1984", "-", "re-do"};
  Rng rng(seed);
  auto phrase = [&](int max_words) {
    std::string s;
    const int words = static_cast<int>(rng.below(max_words + 1));
    for (int i = 0; i < words; ++i) {
      if (i > 0) s += rng.uniform() < 0.2 ? "  " : " ";
      s += kPool[rng.below(kPool.size())];
    }
    return s;
  };
  std::vector<MetricCase> cases = {{"the cat sat", {"cat sat down"}},
                                     {"cat sat up", {"cat sat down"}}};
  while (static_cast<int>(cases.size()) < n) {
    MetricCase c;
    c.prediction = phrase(5);
    const int golds = 1 + static_cast<int>(rng.below(3));
    for (int g = 0; g < golds; ++g) {
      c.golds.push_back(rng.uniform() < 0.15 ? c.prediction : phrase(5));
    }
    cases.push_back(std::move(c));
  }
  return cases;
}

}  // namespace fsqa::testing

#endif  // FSQA_TESTS_METRIC_ORACLE_HPP
