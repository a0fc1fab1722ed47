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

// Data sources and the few-shot split protocol.
//
// The synthetic task is key-value fact lookup. A context is a list of facts
// "<entity> <relation> <value> ." with distinct (entity, relation) pairs
// and distinct values; a question "what <relation> <entity> ?" asks for
// the value of one of them. The unlabeled pretraining corpus draws
// documents from the same fact distribution and restates some facts later
// in the same document, so a masked value is often recoverable from
// elsewhere in its document.

#ifndef FSQA_DATASETS_HPP
#define FSQA_DATASETS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <set>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "json.hpp"

#include "fsqa/errors.hpp"
#include "fsqa/example.hpp"
#include "fsqa/objectives.hpp"
#include "fsqa/rng.hpp"
#include "fsqa/vocab.hpp"

namespace fsqa {

struct SyntheticConfig {
  int n_examples = 3000;
  int n_entities = 60;
  int n_relations = 8;
  int n_values = 60;
  int context_facts = 4;
  int n_pretrain_docs = 6000;
  int restated_facts = 0;  // facts repeated at the end of each pretraining document
  std::uint64_t seed = 7;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SyntheticConfig, n_examples,
                                                n_entities, n_relations,
                                                n_values, context_facts,
                                                n_pretrain_docs,
                                                restated_facts, seed)

struct SyntheticData {
  std::vector<std::string> corpus;
  std::vector<QAExample> qa;
};

namespace detail {

// Pronounceable consonant-vowel words, in a fixed shuffled order so names
// from consecutive indices do not share prefixes.
inline const std::vector<std::string>& name_pool() {
  static const std::vector<std::string> pool = [] {
    const std::string consonants = "bdfgklmnprstvz";
    const std::string vowels = "aeiou";
    std::vector<std::string> syllables;
    for (char c : consonants)
      for (char v : vowels) syllables.push_back({c, v});
    std::vector<std::string> words;
    for (const auto& a : syllables)
      for (const auto& b : syllables) words.push_back(a + b);
    Rng rng(0x5eed0fa11ULL);
    rng.shuffle(std::span(words));
    return words;
  }();
  return pool;
}

struct Fact {
  int entity;
  int relation;
  int value;
};

}  // namespace detail

inline std::string synthetic_name(int index) {
  const auto& pool = detail::name_pool();
  if (index < 0 || static_cast<std::size_t>(index) >= pool.size()) {
    throw ConfigError("synthetic name index out of range");
  }
  return pool[index];
}

// Deterministic given config.seed.
inline SyntheticData gen_synthetic(const SyntheticConfig& config) {
  if (config.context_facts < 2) {
    throw ConfigError("gen_synthetic: context_facts must be at least 2");
  }
  if (config.n_entities <= 0 || config.n_relations <= 0 ||
      config.n_values <= 0 || config.n_examples < 0 ||
      config.n_pretrain_docs < 0 || config.restated_facts < 0) {
    throw ConfigError("gen_synthetic: sizes must be positive");
  }
  if (config.context_facts > config.n_entities * config.n_relations) {
    throw ConfigError("gen_synthetic: context_facts exceeds the number of "
                      "distinct (entity, relation) pairs");
  }
  if (config.context_facts > config.n_values) {
    throw ConfigError("gen_synthetic: need at least context_facts distinct values");
  }
  const std::size_t needed = static_cast<std::size_t>(config.n_entities) +
                             config.n_relations + config.n_values;
  if (needed > detail::name_pool().size()) {
    throw ConfigError("gen_synthetic: vocabulary parameters too large");
  }
  auto entity = [&](int i) { return synthetic_name(i); };
  auto relation = [&](int i) { return synthetic_name(config.n_entities + i); };
  auto value = [&](int i) {
    return synthetic_name(config.n_entities + config.n_relations + i);
  };

  auto draw_facts = [&](Rng& rng) {
    std::vector<detail::Fact> facts;
    std::set<std::pair<int, int>> keys;
    std::set<int> values;
    while (static_cast<int>(facts.size()) < config.context_facts) {
      const int e = static_cast<int>(rng.below(config.n_entities));
      const int r = static_cast<int>(rng.below(config.n_relations));
      if (!keys.insert({e, r}).second) continue;
      int v = static_cast<int>(rng.below(config.n_values));
      while (values.count(v)) v = static_cast<int>(rng.below(config.n_values));
      values.insert(v);
      facts.push_back({e, r, v});
    }
    return facts;
  };
  auto render = [&](std::span<const detail::Fact> facts) {
    std::string text;
    for (const auto& f : facts) {
      if (!text.empty()) text += ' ';
      text += entity(f.entity) + " " + relation(f.relation) + " " +
              value(f.value) + " .";
    }
    return text;
  };

  SyntheticData out;
  Rng qa_rng(derive_seed(config.seed, SeedStream::kData, 0));
  for (int i = 0; i < config.n_examples; ++i) {
    const auto facts = draw_facts(qa_rng);
    const auto& asked = facts[qa_rng.below(facts.size())];
    QAExample ex;
    ex.id = "syn-" + std::to_string(i);
    ex.question = "what " + relation(asked.relation) + " " + entity(asked.entity) + " ?";
    ex.context = render(facts);
    ex.answers = {value(asked.value)};
    out.qa.push_back(std::move(ex));
  }
  Rng corpus_rng(derive_seed(config.seed, SeedStream::kData, 1));
  for (int i = 0; i < config.n_pretrain_docs; ++i) {
    auto facts = draw_facts(corpus_rng);
    const int restate = std::min(config.restated_facts, config.context_facts);
    std::vector<detail::Fact> again(facts.begin(), facts.end());
    corpus_rng.shuffle(std::span(again));
    again.resize(restate);
    facts.insert(facts.end(), again.begin(), again.end());
    out.corpus.push_back(render(facts));
  }
  return out;
}

// ---------------------------------------------------------------------------
// MRQA line-delimited JSON
// ---------------------------------------------------------------------------

struct LoadReport {
  int records = 0;
  int questions = 0;
  int skipped_no_answer = 0;
};

// Reads an MRQA-style file: a header object on line 1, then one JSON
// object per line with "context" and "qas" (each {"qid", "question",
// "answers"}). Questions without answers are skipped and counted.
inline std::vector<QAExample> load_mrqa(const std::string& path,
                                        LoadReport* report = nullptr) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<QAExample> out;
  LoadReport local;
  std::string line;
  int line_no = 0;
  bool saw_header = false;
  std::unordered_set<std::string> seen_ids;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": malformed JSON: " + e.what());
    }
    if (!saw_header) {
      saw_header = true;
      if (!record.is_object() || !record.contains("header")) {
        throw FormatError(path + ":" + std::to_string(line_no) +
                          ": first line must be a header record");
      }
      continue;
    }
    auto fail = [&](const std::string& what) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": " + what);
    };
    if (!record.is_object()) fail("record is not an object");
    if (!record.contains("context") || !record["context"].is_string())
      fail("missing string field 'context'");
    if (!record.contains("qas") || !record["qas"].is_array())
      fail("missing array field 'qas'");
    const std::string context = record["context"].get<std::string>();
    if (context.empty()) fail("empty context");
    ++local.records;
    for (const auto& qa : record["qas"]) {
      if (!qa.is_object()) fail("qas entry is not an object");
      if (!qa.contains("question") || !qa["question"].is_string())
        fail("qas entry missing 'question'");
      if (!qa.contains("qid") || !qa["qid"].is_string())
        fail("qas entry missing 'qid'");
      if (!qa.contains("answers") || !qa["answers"].is_array())
        fail("qas entry missing 'answers'");
      ++local.questions;
      QAExample ex;
      ex.id = qa["qid"].get<std::string>();
      ex.question = qa["question"].get<std::string>();
      ex.context = context;
      for (const auto& a : qa["answers"]) {
        if (!a.is_string()) fail("answer is not a string");
        auto text = a.get<std::string>();
        if (!text.empty() &&
            std::find(ex.answers.begin(), ex.answers.end(), text) == ex.answers.end())
          ex.answers.push_back(std::move(text));
      }
      if (ex.answers.empty() || ex.question.empty() || ex.id.empty()) {
        ++local.skipped_no_answer;
        continue;
      }
      if (!seen_ids.insert(ex.id).second) fail("duplicate qid '" + ex.id + "'");
      out.push_back(std::move(ex));
    }
  }
  if (!saw_header) throw FormatError(path + " is empty");
  if (report) *report = local;
  return out;
}

// Writes examples in the format load_mrqa reads. Consecutive examples that
// share a context are grouped into one record.
inline void write_mrqa(const std::string& path, std::span<const QAExample> examples,
                       const std::string& dataset_name = "synthetic") {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << nlohmann::json{{"header", {{"dataset", dataset_name}, {"split", "all"}}}}.dump()
      << '\n';
  std::size_t i = 0;
  while (i < examples.size()) {
    nlohmann::json record;
    record["context"] = examples[i].context;
    record["qas"] = nlohmann::json::array();
    std::size_t j = i;
    while (j < examples.size() && examples[j].context == examples[i].context) {
      record["qas"].push_back({{"qid", examples[j].id},
                               {"question", examples[j].question},
                               {"answers", examples[j].answers}});
      ++j;
    }
    out << record.dump() << '\n';
    i = j;
  }
  if (!out) throw IoError("failed writing " + path);
}

// ---------------------------------------------------------------------------
// Few-shot splits
// ---------------------------------------------------------------------------

struct FewshotSplit {
  std::vector<QAExample> train;
  std::vector<QAExample> dev;
  std::vector<QAExample> test;
  std::uint64_t seed = 0;
  std::string source_name;
};

// Shuffles once with `seed`; the first n examples train, the next n form
// an equally sized dev set, the rest (capped at test_cap when non-zero)
// are the test set.
inline FewshotSplit sample_fewshot(std::span<const QAExample> data, int n,
                                   std::uint64_t seed, std::size_t test_cap = 0,
                                   std::string source_name = "") {
  if (n <= 0) throw SizeError("sample_fewshot: n must be positive");
  if (data.size() < 2 * static_cast<std::size_t>(n) + 1) {
    throw SizeError("sample_fewshot: need at least " + std::to_string(2 * n + 1) +
                    " examples for n = " + std::to_string(n) + ", have " +
                    std::to_string(data.size()));
  }
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span(order));
  FewshotSplit split;
  split.seed = seed;
  split.source_name = std::move(source_name);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& ex = data[order[i]];
    if (i < static_cast<std::size_t>(n)) {
      split.train.push_back(ex);
    } else if (i < 2 * static_cast<std::size_t>(n)) {
      split.dev.push_back(ex);
    } else if (test_cap == 0 || split.test.size() < test_cap) {
      split.test.push_back(ex);
    }
  }
  return split;
}

inline void write_id_list(const std::string& path, std::span<const QAExample> examples) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& ex : examples) out << ex.id << '\n';
}

inline std::vector<std::string> read_id_list(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ids.push_back(line);
  return ids;
}

// Nearest-rank percentile: the value at rank ceil(q * N) of the sorted data.
inline std::size_t percentile_nearest_rank(std::vector<std::size_t> values, double q) {
  if (values.empty()) throw ContractError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  auto rank = static_cast<std::size_t>(std::ceil(q * values.size() - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

// 99th percentile of tokenized mask-template input lengths over `dev`.
inline std::size_t compute_max_len(std::span<const QAExample> dev, const Vocab& vocab) {
  if (dev.empty()) throw ContractError("compute_max_len: empty dev set");
  std::vector<std::size_t> lengths;
  for (const auto& ex : dev) {
    lengths.push_back(
        encode(vocab, build_input(ex.question, ex.context,
                                  ObjectiveKind::kQuestionThenAnswer))
            .size());
  }
  return percentile_nearest_rank(std::move(lengths), 0.99);
}

}  // namespace fsqa

#endif  // FSQA_DATASETS_HPP
