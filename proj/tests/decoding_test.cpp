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

#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "fsqa/decoding.hpp"

namespace fsqa {
namespace {

using K = ObjectiveKind;

constexpr int kVocab = Vocab::kFirstWordId;

NextLogitsFn constant_logits(int best) {
  return [best](std::span<const int>) {
    std::vector<float> logits(kVocab, 0.0f);
    logits[best] = 1.0f;
    return logits;
  };
}

TEST(GreedyDecode, ConstantModelRepeatsArgmax) {
  Vocab v;
  const int t = Vocab::char_id('a', false);
  const auto r = greedy_decode(constant_logits(t), v, 7);
  EXPECT_EQ(r.generated_ids, std::vector<int>(7, t));
  EXPECT_EQ(r.steps_used, 7);
  EXPECT_EQ(r.stopped_by, StopReason::kMaxSteps);
  EXPECT_EQ(r.text, decode(v, r.generated_ids));
}

TEST(GreedyDecode, StopsAtEos) {
  Vocab v;
  const int t = Vocab::char_id('b', false);
  auto stub = [t](std::span<const int> prefix) {
    std::vector<float> logits(kVocab, 0.0f);
    logits[prefix.size() == 3 ? Vocab::kEos : t] = 5.0f;
    return logits;
  };
  const auto r = greedy_decode(stub, v, 50);
  EXPECT_EQ(r.steps_used, 3);
  EXPECT_EQ(r.stopped_by, StopReason::kEos);
  EXPECT_EQ(r.generated_ids, (std::vector<int>{t, t, Vocab::kEos}));
  EXPECT_EQ(r.text, "b b");
}

TEST(GreedyDecode, PrefixStartsWithBos) {
  Vocab v;
  std::vector<std::vector<int>> seen;
  auto stub = [&](std::span<const int> prefix) {
    seen.emplace_back(prefix.begin(), prefix.end());
    std::vector<float> logits(kVocab, 0.0f);
    logits[200 + prefix.size()] = 1.0f;
    return logits;
  };
  greedy_decode(stub, v, 3);
  ASSERT_EQ(seen.size(), 3u);
  EXPECT_EQ(seen[0], (std::vector<int>{Vocab::kBos}));
  EXPECT_EQ(seen[2], (std::vector<int>{Vocab::kBos, 201, 202}));
}

TEST(GreedyDecode, TiesGoToLowestId) {
  Vocab v;
  auto stub = [](std::span<const int>) {
    std::vector<float> logits(kVocab, 0.0f);
    logits[250] = 2.0f;
    logits[150] = 2.0f;
    logits[290] = 2.0f;
    return logits;
  };
  EXPECT_EQ(greedy_decode(stub, v, 1).generated_ids, std::vector<int>{150});
}

TEST(GreedyDecode, RejectsZeroSteps) {
  Vocab v;
  EXPECT_THROW(greedy_decode(constant_logits(5), v, 0), ContractError);
}

TEST(GreedyDecode, StepsNeverExceedBudget) {
  Vocab v;
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const int max_steps = 1 + static_cast<int>(rng.below(30));
    auto stub = [&rng](std::span<const int>) {
      std::vector<float> logits(kVocab);
      for (auto& x : logits) x = static_cast<float>(rng.uniform());
      if (rng.uniform() < 0.1) logits[Vocab::kEos] = 2.0f;
      return logits;
    };
    const auto r = greedy_decode(stub, v, max_steps);
    EXPECT_LE(r.steps_used, max_steps);
    EXPECT_EQ(static_cast<int>(r.generated_ids.size()), r.steps_used);
    EXPECT_EQ(r.stopped_by == StopReason::kEos, r.generated_ids.back() == Vocab::kEos);
    EXPECT_EQ(r.text, decode(v, r.generated_ids));
  }
}

TEST(GreedyDecode, ModelDecodeIsDeterministic) {
  ModelConfig c;
  c.n_encoder_layers = 1;
  c.n_decoder_layers = 1;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.vocab_size = kVocab;
  c.max_positions = 32;
  auto model = Seq2SeqModel<float>::create(c, 11);
  Vocab v;
  const std::vector<int> input = {200, 201, 202, 203};
  const auto a = greedy_decode(model, v, input, 20);
  const auto b = greedy_decode(model, v, input, 20);
  EXPECT_EQ(a.generated_ids, b.generated_ids);
  EXPECT_EQ(a.steps_used, b.steps_used);
  EXPECT_LE(a.steps_used, 20);
  EXPECT_LE(greedy_decode(model, v, input, 500).steps_used, c.max_positions);
}

TEST(DefaultMaxSteps, PerObjective) {
  EXPECT_EQ(default_max_steps(K::kQuestionThenAnswer), 50);
  EXPECT_EQ(default_max_steps(K::kFullInputGeneration), 50);
  EXPECT_EQ(default_max_steps(K::kAnswerThenQuestion), 50);
  EXPECT_EQ(default_max_steps(K::kSentinelAnswer), 25);
  EXPECT_EQ(default_max_steps(K::kAnswerOnlyGeneration), 25);
  EXPECT_THROW(default_max_steps(K::kSpanSelection), ContractError);
}

TEST(AnswerExtract, Examples) {
  EXPECT_EQ(answer_extract("Question: who is x Answer: y. Context: x is y.",
                           K::kFullInputGeneration),
            "y");
  EXPECT_EQ(answer_extract("<extra_id_0> Answer: y.", K::kSentinelAnswer), "y");
  EXPECT_EQ(answer_extract("Question: who is x Context:", K::kQuestionThenAnswer), "");
  EXPECT_EQ(answer_extract("Answer: y. Question: who is x", K::kAnswerThenQuestion), "y");
  EXPECT_EQ(answer_extract("  some words  ", K::kAnswerOnlyGeneration), "some words");
}

TEST(AnswerExtract, UsesLastMarkerAndOpenEnd) {
  EXPECT_EQ(answer_extract("Answer: a. Answer: b.", K::kQuestionThenAnswer), "b");
  EXPECT_EQ(answer_extract("Question: q Answer: running on", K::kQuestionThenAnswer),
            "running on");
  EXPECT_EQ(answer_extract("Answer: 3.5 km.", K::kQuestionThenAnswer), "3.5 km");
  EXPECT_EQ(answer_extract("Answer:", K::kQuestionThenAnswer), "");
}

TEST(AnswerExtract, SpanSelectionIsContractError) {
  EXPECT_THROW(answer_extract("Answer: y.", K::kSpanSelection), ContractError);
}

TEST(AnswerExtract, DecodedTargetsRoundTrip) {
  const std::vector<std::string> corpus = {"Question: what colour is the sky ?",
                                           "Context: the sky is blue today ."};
  const Vocab v = build_vocab(corpus, 400);
  const std::string q = "what colour is the sky ?", a = "blue",
                    c = "the sky is blue today .";
  for (auto k : kGenerativeObjectives) {
    const auto ids = encode(v, build_target(q, a, c, k));
    EXPECT_EQ(answer_extract(decode(v, ids), k), a) << to_string(k);
  }
}

}  // namespace
}  // namespace fsqa
