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

// Self-supervised pairs for the two span-corruption pretraining styles.
//
//   BartDenoise:   every masked span collapses to one <mask>; the target is
//                  the whole original sequence.
//   T5SpanInfill:  span k becomes <extra_id_k>; the target lists only the
//                  masked spans, each introduced by its sentinel, then </s>.

#ifndef FSQA_CORRUPTION_HPP
#define FSQA_CORRUPTION_HPP

#include <algorithm>
#include <span>
#include <string>
#include <vector>

#include "fsqa/errors.hpp"
#include "fsqa/rng.hpp"
#include "fsqa/vocab.hpp"

namespace fsqa {

enum class CorruptionStyle { kBartDenoise, kT5SpanInfill };

inline std::string to_string(CorruptionStyle s) {
  return s == CorruptionStyle::kBartDenoise ? "bart" : "t5";
}

inline CorruptionStyle corruption_style_from_string(const std::string& s) {
  if (s == "bart" || s == "BartDenoise") return CorruptionStyle::kBartDenoise;
  if (s == "t5" || s == "T5SpanInfill") return CorruptionStyle::kT5SpanInfill;
  throw ConfigError("unknown pretraining style '" + s + "' (bart|t5)");
}

struct MaskedSpan {
  std::size_t start = 0;
  std::size_t length = 0;
  bool operator==(const MaskedSpan&) const = default;
};

struct CorruptionSample {
  CorruptionStyle style = CorruptionStyle::kT5SpanInfill;
  std::vector<int> corrupted_ids;
  std::vector<int> target_ids;
  std::vector<MaskedSpan> masked_spans;  // over the (possibly shuffled) source
};

struct CorruptionOptions {
  double corruption_rate = 0.15;
  double mean_span_len = 3.0;
  bool shuffle_sentences = false;  // BartDenoise only
  int sentence_end_id = -1;        // token closing a sentence when shuffling
};

namespace detail {

inline void validate_spans(std::span<const int> ids,
                           std::span<const MaskedSpan> spans) {
  std::size_t prev_end = 0;
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const auto& s = spans[i];
    if (s.length == 0 || s.start + s.length > ids.size()) {
      throw ContractError("masked span out of range");
    }
    if (i > 0 && s.start < prev_end) {
      throw ContractError("masked spans must be sorted and non-overlapping");
    }
    for (std::size_t j = s.start; j < s.start + s.length; ++j) {
      if (Vocab::is_special(ids[j])) {
        throw ContractError("masked span covers a special token");
      }
    }
    prev_end = s.start + s.length;
  }
}

// Reorders sentences ending in `end_id`; a trailing fragment stays last.
inline std::vector<int> shuffle_sentences(std::span<const int> ids, int end_id,
                                          Rng& rng) {
  std::vector<std::vector<int>> sentences;
  std::vector<int> current;
  for (int id : ids) {
    current.push_back(id);
    if (id == end_id) {
      sentences.push_back(std::move(current));
      current.clear();
    }
  }
  rng.shuffle(std::span(sentences));
  std::vector<int> out;
  for (const auto& s : sentences) out.insert(out.end(), s.begin(), s.end());
  out.insert(out.end(), current.begin(), current.end());
  return out;
}

}  // namespace detail

// Picks spans left to right: at each eligible position a span starts with
// probability p, its length is 1 + Geometric(1/mean_span_len) clipped to the
// run of non-special tokens, and one unmasked token follows every span.
// p = rate / (mean_span_len * (1 - rate)) makes the long-run masked fraction
// equal to `rate`.
inline std::vector<MaskedSpan> sample_spans(std::span<const int> ids,
                                            double rate, double mean_span_len,
                                            Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("corruption_rate must lie in [0, 1)");
  }
  if (!(mean_span_len >= 1.0)) {
    throw ConfigError("mean_span_len must be at least 1");
  }
  std::vector<MaskedSpan> spans;
  if (rate == 0.0) return spans;
  const double p_start = std::min(1.0, rate / (mean_span_len * (1.0 - rate)));
  const double p_stop = 1.0 / mean_span_len;
  std::size_t i = 0;
  while (i < ids.size()) {
    if (Vocab::is_special(ids[i]) || rng.uniform() >= p_start) {
      ++i;
      continue;
    }
    std::size_t len = 1 + static_cast<std::size_t>(rng.geometric(p_stop));
    std::size_t run = 0;
    while (i + run < ids.size() && !Vocab::is_special(ids[i + run])) ++run;
    len = std::min(len, run);
    spans.push_back({i, len});
    i += len + 1;
  }
  return spans;
}

inline CorruptionSample corrupt_bart_with_spans(std::span<const int> ids,
                                                std::span<const MaskedSpan> spans) {
  detail::validate_spans(ids, spans);
  CorruptionSample out;
  out.style = CorruptionStyle::kBartDenoise;
  out.masked_spans.assign(spans.begin(), spans.end());
  out.target_ids.assign(ids.begin(), ids.end());
  std::size_t pos = 0;
  for (const auto& s : spans) {
    out.corrupted_ids.insert(out.corrupted_ids.end(), ids.begin() + pos,
                             ids.begin() + s.start);
    out.corrupted_ids.push_back(Vocab::kMask);
    pos = s.start + s.length;
  }
  out.corrupted_ids.insert(out.corrupted_ids.end(), ids.begin() + pos, ids.end());
  return out;
}

inline CorruptionSample corrupt_t5_with_spans(std::span<const int> ids,
                                              std::span<const MaskedSpan> spans) {
  if (spans.size() > static_cast<std::size_t>(kNumSentinels)) {
    throw ConfigError("T5 corruption selected " + std::to_string(spans.size()) +
                      " spans; at most " + std::to_string(kNumSentinels) +
                      " sentinels exist");
  }
  detail::validate_spans(ids, spans);
  CorruptionSample out;
  out.style = CorruptionStyle::kT5SpanInfill;
  out.masked_spans.assign(spans.begin(), spans.end());
  std::size_t pos = 0;
  for (std::size_t k = 0; k < spans.size(); ++k) {
    const auto& s = spans[k];
    const int sentinel = Vocab::sentinel(static_cast<int>(k));
    out.corrupted_ids.insert(out.corrupted_ids.end(), ids.begin() + pos,
                             ids.begin() + s.start);
    out.corrupted_ids.push_back(sentinel);
    out.target_ids.push_back(sentinel);
    out.target_ids.insert(out.target_ids.end(), ids.begin() + s.start,
                          ids.begin() + s.start + s.length);
    pos = s.start + s.length;
  }
  out.corrupted_ids.insert(out.corrupted_ids.end(), ids.begin() + pos, ids.end());
  out.target_ids.push_back(Vocab::kEos);
  return out;
}

inline CorruptionSample corrupt_bart(std::span<const int> ids,
                                     const CorruptionOptions& options, Rng& rng) {
  if (ids.empty()) throw ContractError("corrupt_bart: empty sequence");
  std::vector<int> source(ids.begin(), ids.end());
  if (options.shuffle_sentences && options.sentence_end_id >= 0) {
    source = detail::shuffle_sentences(ids, options.sentence_end_id, rng);
  }
  const auto spans =
      sample_spans(source, options.corruption_rate, options.mean_span_len, rng);
  CorruptionSample out = corrupt_bart_with_spans(source, spans);
  out.target_ids.assign(ids.begin(), ids.end());
  return out;
}

inline CorruptionSample corrupt_t5(std::span<const int> ids,
                                   const CorruptionOptions& options, Rng& rng) {
  if (ids.empty()) throw ContractError("corrupt_t5: empty sequence");
  const auto spans =
      sample_spans(ids, options.corruption_rate, options.mean_span_len, rng);
  return corrupt_t5_with_spans(ids, spans);
}

inline CorruptionSample corrupt(CorruptionStyle style, std::span<const int> ids,
                                const CorruptionOptions& options, Rng& rng) {
  return style == CorruptionStyle::kBartDenoise ? corrupt_bart(ids, options, rng)
                                                : corrupt_t5(ids, options, rng);
}

// Rebuilds the uncorrupted source from the corrupted input and the target
// alone, walking masks/sentinels left to right.
inline std::vector<int> reconstruct_source(const CorruptionSample& sample) {
  std::vector<int> out;
  if (sample.style == CorruptionStyle::kBartDenoise) {
    std::size_t k = 0;
    for (int id : sample.corrupted_ids) {
      if (id == Vocab::kMask && k < sample.masked_spans.size()) {
        const auto& s = sample.masked_spans[k++];
        out.insert(out.end(), sample.target_ids.begin() + s.start,
                   sample.target_ids.begin() + s.start + s.length);
      } else {
        out.push_back(id);
      }
    }
    return out;
  }
  for (int id : sample.corrupted_ids) {
    if (!Vocab::is_sentinel(id)) {
      out.push_back(id);
      continue;
    }
    auto it = std::find(sample.target_ids.begin(), sample.target_ids.end(), id);
    if (it == sample.target_ids.end()) {
      throw ContractError("sentinel missing from target");
    }
    for (++it; it != sample.target_ids.end() && !Vocab::is_sentinel(*it) &&
               *it != Vocab::kEos;
         ++it) {
      out.push_back(*it);
    }
  }
  return out;
}

}  // namespace fsqa

#endif  // FSQA_CORRUPTION_HPP
