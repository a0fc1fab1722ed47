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

// Fine-tuning input/target construction for every objective variant, and
// the two training losses.
//
// Inputs (q = question, c = context):
//   mask-bearing      Question: q Answer: <mask>. Context: c
//                     (SentinelAnswer puts <extra_id_0> where <mask> is)
//   AnswerOnly        Question: q Context: c
//   SpanSelection     Question: q [S] Context: c
//
// Targets (a = answer):
//   QuestionThenAnswer    Question: q Answer: a.
//   AnswerThenQuestion    Answer: a. Question: q
//   FullInputGeneration   Question: q Answer: a. Context: c
//   AnswerOnlyGeneration  a
//   SentinelAnswer        <extra_id_0> Answer: a.
//   SpanSelection         first token span of a inside c

#ifndef FSQA_OBJECTIVES_HPP
#define FSQA_OBJECTIVES_HPP

#include <algorithm>
#include <array>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fsqa/autodiff.hpp"
#include "fsqa/errors.hpp"
#include "fsqa/example.hpp"
#include "fsqa/model.hpp"
#include "fsqa/vocab.hpp"

namespace fsqa {

enum class ObjectiveKind {
  kSpanSelection,
  kFullInputGeneration,
  kQuestionThenAnswer,
  kAnswerThenQuestion,
  kAnswerOnlyGeneration,
  kSentinelAnswer,
};

inline constexpr std::array<ObjectiveKind, 6> kAllObjectives = {
    ObjectiveKind::kSpanSelection,       ObjectiveKind::kFullInputGeneration,
    ObjectiveKind::kQuestionThenAnswer,  ObjectiveKind::kAnswerThenQuestion,
    ObjectiveKind::kAnswerOnlyGeneration, ObjectiveKind::kSentinelAnswer,
};

inline constexpr std::array<ObjectiveKind, 5> kGenerativeObjectives = {
    ObjectiveKind::kFullInputGeneration, ObjectiveKind::kQuestionThenAnswer,
    ObjectiveKind::kAnswerThenQuestion,  ObjectiveKind::kAnswerOnlyGeneration,
    ObjectiveKind::kSentinelAnswer,
};

inline std::string to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::kSpanSelection: return "SpanSelection";
    case ObjectiveKind::kFullInputGeneration: return "FullInputGeneration";
    case ObjectiveKind::kQuestionThenAnswer: return "QuestionThenAnswer";
    case ObjectiveKind::kAnswerThenQuestion: return "AnswerThenQuestion";
    case ObjectiveKind::kAnswerOnlyGeneration: return "AnswerOnlyGeneration";
    case ObjectiveKind::kSentinelAnswer: return "SentinelAnswer";
  }
  return "?";
}

inline ObjectiveKind objective_from_string(const std::string& s) {
  for (auto k : kAllObjectives)
    if (to_string(k) == s) return k;
  throw ConfigError("unknown objective '" + s + "'");
}

inline bool is_mask_bearing(ObjectiveKind k) {
  return k == ObjectiveKind::kFullInputGeneration ||
         k == ObjectiveKind::kQuestionThenAnswer ||
         k == ObjectiveKind::kAnswerThenQuestion ||
         k == ObjectiveKind::kSentinelAnswer;
}

inline bool is_generative(ObjectiveKind k) {
  return k != ObjectiveKind::kSpanSelection;
}

namespace detail {

inline std::string input_prefix(const std::string& q, ObjectiveKind objective) {
  switch (objective) {
    case ObjectiveKind::kSpanSelection:
      return "Question: " + q + " " + std::string(Vocab::kSepMarker) +
             " Context:";
    case ObjectiveKind::kAnswerOnlyGeneration:
      return "Question: " + q + " Context:";
    case ObjectiveKind::kSentinelAnswer:
      return "Question: " + q + " Answer: " + Vocab::sentinel_marker(0) +
             ". Context:";
    default:
      return "Question: " + q + " Answer: " + std::string(Vocab::kMaskMarker) +
             ". Context:";
  }
}

}  // namespace detail

inline std::string build_input(const std::string& q, const std::string& c,
                               ObjectiveKind objective) {
  return detail::input_prefix(q, objective) + " " + c;
}

inline std::string build_target(const std::string& q, const std::string& a,
                                const std::string& c, ObjectiveKind objective) {
  switch (objective) {
    case ObjectiveKind::kQuestionThenAnswer:
      return "Question: " + q + " Answer: " + a + ".";
    case ObjectiveKind::kAnswerThenQuestion:
      return "Answer: " + a + ". Question: " + q;
    case ObjectiveKind::kFullInputGeneration:
      return "Question: " + q + " Answer: " + a + ". Context: " + c;
    case ObjectiveKind::kAnswerOnlyGeneration:
      return a;
    case ObjectiveKind::kSentinelAnswer:
      return Vocab::sentinel_marker(0) + " Answer: " + a + ".";
    case ObjectiveKind::kSpanSelection:
      break;
  }
  throw ContractError("SpanSelection has no textual target; use a gold span");
}

struct TokenSpan {
  std::size_t start = 0;
  std::size_t end = 0;  // inclusive
  bool operator==(const TokenSpan&) const = default;
};

struct PromptPair {
  ObjectiveKind objective = ObjectiveKind::kQuestionThenAnswer;
  std::vector<int> input_ids;
  std::vector<int> target_ids;           // empty for SpanSelection
  std::optional<TokenSpan> gold_span;    // SpanSelection only
  std::size_t context_begin = 0;         // context token range in input_ids
  std::size_t context_end = 0;
  std::string example_id;
};

// First occurrence of the answer's tokens inside [begin, end) of `ids`.
inline std::optional<TokenSpan> find_token_span(std::span<const int> ids,
                                                std::span<const int> answer,
                                                std::size_t begin,
                                                std::size_t end) {
  if (answer.empty() || end > ids.size() || begin + answer.size() > end) {
    return std::nullopt;
  }
  for (std::size_t s = begin; s + answer.size() <= end; ++s) {
    if (std::equal(answer.begin(), answer.end(), ids.begin() + s)) {
      return TokenSpan{s, s + answer.size() - 1};
    }
  }
  return std::nullopt;
}

struct PromptLimits {
  std::size_t max_input_len = 0;   // 0 = unlimited; context is cut to fit
  std::size_t max_target_len = 0;  // 0 = unlimited
};

// Tokenized pair for one example. For SpanSelection the gold span is the
// first occurrence of the first answer in the (possibly truncated) context;
// if there is none the example is unanswerable, which is an error unless
// `require_answer` is false (evaluation inputs need no gold span).
inline PromptPair make_prompt_pair(const Vocab& vocab, const QAExample& ex,
                                   ObjectiveKind objective,
                                   const PromptLimits& limits = {},
                                   bool require_answer = true) {
  if (ex.answers.empty()) {
    throw ContractError("example " + ex.id + " has no answers");
  }
  PromptPair pair;
  pair.objective = objective;
  pair.example_id = ex.id;
  pair.input_ids = encode(vocab, detail::input_prefix(ex.question, objective));
  pair.context_begin = pair.input_ids.size();
  const auto context_ids = encode(vocab, ex.context);
  pair.input_ids.insert(pair.input_ids.end(), context_ids.begin(),
                        context_ids.end());
  if (limits.max_input_len > 0 && pair.input_ids.size() > limits.max_input_len) {
    if (pair.context_begin >= limits.max_input_len) {
      throw LengthError("example " + ex.id + ": prompt without context exceeds " +
                        std::to_string(limits.max_input_len) + " tokens");
    }
    pair.input_ids.resize(limits.max_input_len);
  }
  pair.context_end = pair.input_ids.size();

  if (objective == ObjectiveKind::kSpanSelection) {
    const auto answer_ids = encode(vocab, ex.answers.front());
    pair.gold_span = find_token_span(pair.input_ids, answer_ids,
                                     pair.context_begin, pair.context_end);
    if (!pair.gold_span && require_answer) {
      throw UnanswerableError("example " + ex.id +
                              ": answer not found in context");
    }
    return pair;
  }
  pair.target_ids = encode(
      vocab, build_target(ex.question, ex.answers.front(), ex.context, objective));
  if (limits.max_target_len > 0 &&
      pair.target_ids.size() + 1 > limits.max_target_len) {
    pair.target_ids.resize(limits.max_target_len);
  } else {
    pair.target_ids.push_back(Vocab::kEos);
  }
  return pair;
}

// Sum over target positions of -log P(y_i | y_<i, x).
template <typename T>
Tensor<T> compute_seq2seq_loss(const Seq2SeqModel<T>& model,
                               const PromptPair& pair) {
  if (pair.objective == ObjectiveKind::kSpanSelection) {
    throw ContractError("compute_seq2seq_loss: SpanSelection pairs have no target");
  }
  const Tensor<T> logits =
      model.forward_teacher_forced(pair.input_ids, pair.target_ids);
  return cross_entropy_logits(logits, std::span<const int>(pair.target_ids),
                              Vocab::kPad);
}

// Cross entropy of the start logits at the gold start plus that of the end
// logits at the gold end.
template <typename T>
Tensor<T> compute_span_loss(const Seq2SeqModel<T>& model, const PromptPair& pair) {
  if (pair.objective != ObjectiveKind::kSpanSelection || !pair.gold_span) {
    throw ContractError("compute_span_loss: pair has no gold span");
  }
  auto [start, end] = model.span_head_forward(pair.input_ids);
  const int s = static_cast<int>(pair.gold_span->start);
  const int e = static_cast<int>(pair.gold_span->end);
  return add(cross_entropy_logits(start, std::span<const int>(&s, 1), -1),
             cross_entropy_logits(end, std::span<const int>(&e, 1), -1));
}

template <typename T>
Tensor<T> compute_loss(const Seq2SeqModel<T>& model, const PromptPair& pair) {
  return pair.objective == ObjectiveKind::kSpanSelection
             ? compute_span_loss(model, pair)
             : compute_seq2seq_loss(model, pair);
}

}  // namespace fsqa

#endif  // FSQA_OBJECTIVES_HPP
