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

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include <gtest/gtest.h>

#include "fsqa/datasets.hpp"

namespace fsqa {
namespace {

const std::string kData = FSQA_TEST_DATA_DIR;

SyntheticData small_synthetic(std::uint64_t seed = 7) {
  SyntheticConfig c;
  c.n_examples = 200;
  c.n_pretrain_docs = 50;
  c.seed = seed;
  return gen_synthetic(c);
}

std::vector<std::string> words_of(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() /
          ("fsqa_datasets_" + std::to_string(::getpid()) + "_" + name))
      .string();
}

TEST(Synthetic, AnswerAppearsInContext) {
  const auto data = small_synthetic();
  ASSERT_EQ(data.qa.size(), 200u);
  for (const auto& ex : data.qa) {
    ASSERT_EQ(ex.answers.size(), 1u);
    EXPECT_NE(ex.context.find(ex.answers[0]), std::string::npos) << ex.id;
  }
}

TEST(Synthetic, QuestionKeysAreUniqueAndAnswerIsTheirValue) {
  const auto data = small_synthetic();
  for (const auto& ex : data.qa) {
    const auto w = words_of(ex.context);
    ASSERT_EQ(w.size() % 4, 0u);
    std::map<std::pair<std::string, std::string>, std::string> facts;
    for (std::size_t i = 0; i < w.size(); i += 4) {
      EXPECT_EQ(w[i + 3], ".");
      EXPECT_TRUE(facts.emplace(std::pair(w[i], w[i + 1]), w[i + 2]).second)
          << "duplicate key in " << ex.id;
    }
    const auto q = words_of(ex.question);
    ASSERT_EQ(q.size(), 4u);
    EXPECT_EQ(q[0], "what");
    EXPECT_EQ(q[3], "?");
    const auto it = facts.find({q[2], q[1]});
    ASSERT_NE(it, facts.end()) << ex.id;
    EXPECT_EQ(it->second, ex.answers[0]);
  }
}

TEST(Synthetic, CorpusHasFactSequencesWithoutQuestions) {
  const auto data = small_synthetic();
  EXPECT_EQ(data.corpus.size(), 50u);
  for (const auto& doc : data.corpus) {
    EXPECT_EQ(doc.find('?'), std::string::npos);
    EXPECT_EQ(words_of(doc).size(), 16u);
  }
}

TEST(Synthetic, SameSeedSameData) {
  const auto a = small_synthetic(3), b = small_synthetic(3), c = small_synthetic(4);
  EXPECT_EQ(a.corpus, b.corpus);
  EXPECT_EQ(a.qa, b.qa);
  EXPECT_NE(a.qa, c.qa);
}

TEST(Synthetic, RejectsImpossibleConfigs) {
  SyntheticConfig c;
  c.context_facts = 1;
  EXPECT_THROW(gen_synthetic(c), ConfigError);
  c = {};
  c.n_values = 3;
  EXPECT_THROW(gen_synthetic(c), ConfigError);
  c = {};
  c.n_entities = 1;
  c.n_relations = 2;
  EXPECT_THROW(gen_synthetic(c), ConfigError);
  c = {};
  c.n_entities = 5000;
  EXPECT_THROW(gen_synthetic(c), ConfigError);
}

TEST(Mrqa, TwoQuestionsShareContext) {
  LoadReport report;
  const auto ex = load_mrqa(kData + "/mrqa_two_questions.jsonl", &report);
  ASSERT_EQ(ex.size(), 2u);
  EXPECT_EQ(ex[0].context, ex[1].context);
  EXPECT_EQ(ex[0].id, "q1");
  EXPECT_EQ(ex[0].answers, (std::vector<std::string>{"Ada Lovelace", "Lovelace"}));
  EXPECT_EQ(ex[1].answers, (std::vector<std::string>{"1843"}));
  EXPECT_EQ(report.records, 1);
  EXPECT_EQ(report.questions, 2);
  EXPECT_EQ(report.skipped_no_answer, 0);
}

TEST(Mrqa, EmptyAnswersSkippedAndCounted) {
  LoadReport report;
  const auto ex = load_mrqa(kData + "/mrqa_empty_answers.jsonl", &report);
  ASSERT_EQ(ex.size(), 1u);
  EXPECT_EQ(ex[0].id, "r2");
  EXPECT_EQ(report.skipped_no_answer, 1);
}

TEST(Mrqa, MissingFieldNamesLine) {
  try {
    load_mrqa(kData + "/mrqa_missing_qas.jsonl");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("qas"), std::string::npos);
  }
}

TEST(Mrqa, EmptyFileIsFormatError) {
  EXPECT_THROW(load_mrqa(kData + "/mrqa_empty.jsonl"), FormatError);
  EXPECT_THROW(load_mrqa(kData + "/does_not_exist.jsonl"), IoError);
}

TEST(Mrqa, MalformedJsonIsParseError) {
  const auto path = temp_path("bad.jsonl");
  {
    std::ofstream out(path);
    out << "{\"header\": {}}\n{\"context\": \"x\", \"qas\": [\n";
  }
  EXPECT_THROW(load_mrqa(path), ParseError);
  std::filesystem::remove(path);
}

TEST(Mrqa, WriteThenReadRoundTrip) {
  const auto data = small_synthetic();
  const auto path = temp_path("roundtrip.jsonl");
  write_mrqa(path, data.qa);
  EXPECT_EQ(load_mrqa(path), data.qa);
  std::filesystem::remove(path);
  std::vector<QAExample> shared = {{"a", "q1", "same", {"x"}}, {"b", "q2", "same", {"y", "z"}}};
  write_mrqa(path, shared);
  LoadReport report;
  EXPECT_EQ(load_mrqa(path, &report), shared);
  EXPECT_EQ(report.records, 1);
  std::filesystem::remove(path);
}

TEST(Fewshot, GoldenSplitIds) {
  const auto data = small_synthetic();
  const auto split = sample_fewshot(data.qa, 16, 2026);
  const auto golden = read_id_list(kData + "/split_n16_seed2026.txt");
  ASSERT_EQ(golden.size(), 32u);
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_EQ(split.train[i].id, golden[i]);
    EXPECT_EQ(split.dev[i].id, golden[16 + i]);
  }
}

TEST(Fewshot, RandomSplitsAreSizedAndDisjoint) {
  const auto data = small_synthetic();
  Rng rng(99);
  for (int draw = 0; draw < 1000; ++draw) {
    const int n = 1 + static_cast<int>(rng.below(99));
    const auto seed = rng.next_u64();
    const auto split = sample_fewshot(data.qa, n, seed);
    ASSERT_EQ(split.train.size(), static_cast<std::size_t>(n));
    ASSERT_EQ(split.dev.size(), static_cast<std::size_t>(n));
    ASSERT_EQ(split.train.size() + split.dev.size() + split.test.size(), data.qa.size());
    std::set<std::string> ids;
    for (const auto* part : {&split.train, &split.dev, &split.test})
      for (const auto& ex : *part) ASSERT_TRUE(ids.insert(ex.id).second);
  }
}

TEST(Fewshot, DeterministicAndSeedSensitive) {
  const auto data = small_synthetic();
  const auto a = sample_fewshot(data.qa, 8, 5), b = sample_fewshot(data.qa, 8, 5),
             c = sample_fewshot(data.qa, 8, 6);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.dev, b.dev);
  EXPECT_NE(a.train, c.train);
}

TEST(Fewshot, TestCap) {
  const auto data = small_synthetic();
  const auto split = sample_fewshot(data.qa, 16, 1, 50);
  EXPECT_EQ(split.test.size(), 50u);
}

TEST(Fewshot, InsufficientDataIsSizeError) {
  const auto data = small_synthetic();
  EXPECT_THROW(sample_fewshot(data.qa, 100, 1), SizeError);
  EXPECT_NO_THROW(sample_fewshot(data.qa, 99, 1));
  EXPECT_THROW(sample_fewshot(data.qa, 0, 1), SizeError);
}

TEST(Percentile, Examples) {
  std::vector<std::size_t> v(100);
  for (std::size_t i = 0; i < 100; ++i) v[i] = i + 1;
  EXPECT_EQ(percentile_nearest_rank(v, 0.99), 99u);
  EXPECT_EQ(percentile_nearest_rank(std::vector<std::size_t>(10, 7), 0.99), 7u);
  EXPECT_EQ(percentile_nearest_rank(std::vector<std::size_t>{42}, 0.99), 42u);
  EXPECT_THROW(percentile_nearest_rank({}, 0.99), ContractError);
}

TEST(Percentile, MatchesSortedRankOracle) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::size_t> v(1 + rng.below(300));
    for (auto& x : v) x = rng.below(1000);
    auto sorted = v;
    std::sort(sorted.begin(), sorted.end());
    // smallest value with at least 99% of the data at or below it
    std::size_t expected = sorted.back();
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      if (100 * (i + 1) >= 99 * sorted.size()) {
        expected = sorted[i];
        break;
      }
    }
    EXPECT_EQ(percentile_nearest_rank(v, 0.99), expected);
  }
}

TEST(MaxLen, UsesTemplateInputLength) {
  const auto data = small_synthetic();
  const Vocab v = build_vocab(data.corpus, 1000);
  const std::vector<QAExample> one = {data.qa[0]};
  EXPECT_EQ(compute_max_len(one, v),
            encode(v, build_input(data.qa[0].question, data.qa[0].context,
                                  ObjectiveKind::kQuestionThenAnswer))
                .size());
  EXPECT_THROW(compute_max_len(std::span<const QAExample>{}, v), ContractError);
}

}  // namespace
}  // namespace fsqa
