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

#ifndef FSQA_DECODING_HPP
#define FSQA_DECODING_HPP

#include <cctype>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fsqa/errors.hpp"
#include "fsqa/model.hpp"
#include "fsqa/objectives.hpp"
#include "fsqa/vocab.hpp"

namespace fsqa {

enum class StopReason { kEos, kMaxSteps };

struct DecodeResult {
  std::vector<int> generated_ids;  // excludes BOS, includes EOS if emitted
  std::string text;
  int steps_used = 0;
  StopReason stopped_by = StopReason::kMaxSteps;
};

// Generation budgets: 50 tokens when the target restates the question,
// 25 when only the answer (optionally after a sentinel) is generated.
inline int default_max_steps(ObjectiveKind objective) {
  switch (objective) {
    case ObjectiveKind::kQuestionThenAnswer:
    case ObjectiveKind::kFullInputGeneration:
    case ObjectiveKind::kAnswerThenQuestion:
      return 50;
    case ObjectiveKind::kSentinelAnswer:
    case ObjectiveKind::kAnswerOnlyGeneration:
      return 25;
    case ObjectiveKind::kSpanSelection:
      break;
  }
  throw ContractError("SpanSelection is not decoded");
}

// Next-token scores given the tokens generated so far (prefix starts with BOS).
using NextLogitsFn = std::function<std::vector<float>(std::span<const int>)>;

// Greedy decoding from BOS until EOS or `max_steps` tokens. Argmax ties go
// to the lowest token id.
inline DecodeResult greedy_decode(const NextLogitsFn& next_logits,
                                  const Vocab& vocab, int max_steps) {
  if (max_steps < 1) throw ContractError("greedy_decode: max_steps must be >= 1");
  DecodeResult result;
  std::vector<int> prefix{Vocab::kBos};
  for (int step = 0; step < max_steps; ++step) {
    const std::vector<float> logits = next_logits(prefix);
    int best = 0;
    for (int id = 1; id < static_cast<int>(logits.size()); ++id)
      if (logits[id] > logits[best]) best = id;
    prefix.push_back(best);
    result.generated_ids.push_back(best);
    result.steps_used = step + 1;
    if (best == Vocab::kEos) {
      result.stopped_by = StopReason::kEos;
      break;
    }
  }
  result.text = decode(vocab, result.generated_ids);
  return result;
}

template <typename T>
DecodeResult greedy_decode(const Seq2SeqModel<T>& model, const Vocab& vocab,
                           std::span<const int> input_ids, int max_steps) {
  NoGradGuard no_grad;
  const auto memory = model.prepare_memory(model.encode(input_ids));
  const int limit =
      std::min(max_steps, model.config().max_positions);
  return greedy_decode(
      [&](std::span<const int> prefix) {
        const auto logits = model.next_token_logits(memory, prefix);
        return std::vector<float>(logits.begin(), logits.end());
      },
      vocab, limit);
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

}  // namespace detail

// Pulls the answer out of generated text: the text after the last
// "Answer:" marker, cut at the first period that is followed by the end of
// text or by a "Context:"/"Question:" section. AnswerOnlyGeneration returns
// the whole text. An empty result means extraction failed.
inline std::string answer_extract(std::string_view text, ObjectiveKind objective) {
  if (objective == ObjectiveKind::kSpanSelection) {
    throw ContractError("answer_extract: SpanSelection has no textual output");
  }
  if (objective == ObjectiveKind::kAnswerOnlyGeneration) {
    return std::string(detail::trim(text));
  }
  constexpr std::string_view kMarker = "Answer:";
  const std::size_t at = text.rfind(kMarker);
  if (at == std::string_view::npos) return "";
  std::string_view rest = text.substr(at + kMarker.size());
  for (std::size_t i = 0; i < rest.size(); ++i) {
    if (rest[i] != '.') continue;
    const std::string_view after = detail::trim(rest.substr(i + 1));
    if (after.empty() || after.starts_with("Context:") ||
        after.starts_with("Question:")) {
      rest = rest.substr(0, i);
      break;
    }
  }
  return std::string(detail::trim(rest));
}

}  // namespace fsqa

#endif  // FSQA_DECODING_HPP
