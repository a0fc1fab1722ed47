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

// SQuAD-v1.1 style answer scoring and seed aggregation.

#ifndef FSQA_METRICS_HPP
#define FSQA_METRICS_HPP

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fsqa/errors.hpp"

namespace fsqa {

struct EvalResult {
  double exact_match = 0.0;  // percent
  double f1 = 0.0;           // percent
  int n_examples = 0;
};

struct AggregateCell {
  double mean = 0.0;
  double std = 0.0;
  int n_runs = 0;
};

namespace detail {

inline bool is_ascii_punct(char c) {
  return std::ispunct(static_cast<unsigned char>(c)) != 0;
}

inline std::vector<std::string> normalized_tokens(std::string_view s) {
  std::string cleaned;
  cleaned.reserve(s.size());
  for (char c : s) {
    if (is_ascii_punct(c)) continue;
    cleaned.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  std::vector<std::string> tokens;
  std::size_t i = 0;
  while (i < cleaned.size()) {
    while (i < cleaned.size() && std::isspace(static_cast<unsigned char>(cleaned[i])))
      ++i;
    std::size_t j = i;
    while (j < cleaned.size() && !std::isspace(static_cast<unsigned char>(cleaned[j])))
      ++j;
    if (j > i) {
      std::string word = cleaned.substr(i, j - i);
      if (word != "a" && word != "an" && word != "the") tokens.push_back(std::move(word));
    }
    i = j;
  }
  return tokens;
}

}  // namespace detail

// Lowercase, strip punctuation, drop the articles a/an/the, collapse
// whitespace.
inline std::string normalize_text(std::string_view s) {
  std::string out;
  for (const auto& t : detail::normalized_tokens(s)) {
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

inline void require_golds(std::span<const std::string> golds) {
  if (golds.empty()) throw ContractError("metric needs at least one gold answer");
}

inline double exact_match(std::string_view prediction,
                          std::span<const std::string> golds) {
  require_golds(golds);
  const std::string p = normalize_text(prediction);
  for (const auto& g : golds)
    if (normalize_text(g) == p) return 1.0;
  return 0.0;
}

// Max over golds of the harmonic mean of multiset token precision and recall.
inline double token_f1(std::string_view prediction,
                       std::span<const std::string> golds) {
  require_golds(golds);
  const auto pred = detail::normalized_tokens(prediction);
  double best = 0.0;
  for (const auto& g : golds) {
    const auto gold = detail::normalized_tokens(g);
    double score = 0.0;
    if (pred.empty() || gold.empty()) {
      score = pred.empty() && gold.empty() ? 1.0 : 0.0;
    } else {
      std::map<std::string_view, int> counts;
      for (const auto& t : gold) ++counts[t];
      int common = 0;
      for (const auto& t : pred) {
        auto it = counts.find(t);
        if (it != counts.end() && it->second > 0) {
          --it->second;
          ++common;
        }
      }
      if (common > 0) {
        const double precision = static_cast<double>(common) / pred.size();
        const double recall = static_cast<double>(common) / gold.size();
        score = 2.0 * precision * recall / (precision + recall);
      }
    }
    best = std::max(best, score);
  }
  return best;
}

// Mean and population standard deviation.
inline AggregateCell aggregate(std::span<const double> scores) {
  if (scores.empty()) throw ContractError("aggregate: no scores");
  AggregateCell cell;
  cell.n_runs = static_cast<int>(scores.size());
  double total = 0.0;
  for (double s : scores) total += s;
  cell.mean = total / scores.size();
  double sq = 0.0;
  for (double s : scores) sq += (s - cell.mean) * (s - cell.mean);
  cell.std = std::sqrt(sq / scores.size());
  return cell;
}

// Accumulates per-example scores into corpus-level percentages.
class ScoreAccumulator {
 public:
  void add(std::string_view prediction, std::span<const std::string> golds) {
    em_ += exact_match(prediction, golds);
    f1_ += token_f1(prediction, golds);
    ++n_;
  }
  void add_miss() { ++n_; }

  EvalResult result() const {
    EvalResult r;
    r.n_examples = n_;
    if (n_ > 0) {
      r.exact_match = 100.0 * em_ / n_;
      r.f1 = 100.0 * f1_ / n_;
    }
    return r;
  }

 private:
  double em_ = 0.0;
  double f1_ = 0.0;
  int n_ = 0;
};

}  // namespace fsqa

#endif  // FSQA_METRICS_HPP
