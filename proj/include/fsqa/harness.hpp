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

// Training loops, evaluation, the few-shot experiment grid and report
// emission.

#ifndef FSQA_HARNESS_HPP
#define FSQA_HARNESS_HPP

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "fsqa/adam.hpp"
#include "fsqa/corruption.hpp"
#include "fsqa/datasets.hpp"
#include "fsqa/decoding.hpp"
#include "fsqa/metrics.hpp"
#include "fsqa/model.hpp"
#include "fsqa/objectives.hpp"
#include "fsqa/rng.hpp"
#include "fsqa/vocab.hpp"

namespace fsqa {

using Model = Seq2SeqModel<float>;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct PretrainConfig {
  CorruptionStyle style = CorruptionStyle::kT5SpanInfill;
  int steps = 1500;
  int batch_size = 16;
  double learning_rate = 1e-3;
  double corruption_rate = 0.15;
  double mean_span_len = 3.0;
  bool shuffle_sentences = false;
  int holdout_docs = 64;
  int log_every = 50;
};

struct TrainConfig {
  ObjectiveKind objective = ObjectiveKind::kQuestionThenAnswer;
  double learning_rate = 2e-5;
  int batch_size = 4;
  int max_epochs = 35;
  int max_steps = 1000;
  std::uint64_t seed = 1;
  int eval_every = 100;
  ModelConfig model;
  std::string pretrained_checkpoint;  // empty = none
};

// Optimizer steps: the larger of the epoch-derived and the step budget.
inline long budget_steps(const TrainConfig& c, std::size_t n_train) {
  const long per_epoch =
      static_cast<long>((n_train + c.batch_size - 1) / c.batch_size);
  return std::max(static_cast<long>(c.max_epochs) * per_epoch,
                  static_cast<long>(c.max_steps));
}

struct ExperimentConfig {
  std::vector<int> sizes = {16, 32, 64, 128};
  std::vector<ObjectiveKind> objectives = {kAllObjectives.begin(),
                                           kAllObjectives.end()};
  int n_seeds = 5;
  int jobs = 1;
  std::size_t test_cap = 2000;
};

struct DataConfig {
  SyntheticConfig synthetic;
  std::vector<std::string> mrqa_files;
  int vocab_max_size = 4000;
};

struct HarnessConfig {
  std::string preset = "desk";
  std::uint64_t seed = 1;
  DataConfig data;
  ModelConfig model;
  PretrainConfig pretrain;
  TrainConfig finetune;
  ExperimentConfig experiment;
};

inline void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = {{"style", to_string(c.style)},
       {"steps", c.steps},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"corruption_rate", c.corruption_rate},
       {"mean_span_len", c.mean_span_len},
       {"shuffle_sentences", c.shuffle_sentences},
       {"holdout_docs", c.holdout_docs},
       {"log_every", c.log_every}};
}

inline void from_json(const nlohmann::json& j, PretrainConfig& c) {
  if (j.contains("style")) c.style = corruption_style_from_string(j.at("style"));
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.corruption_rate = j.value("corruption_rate", c.corruption_rate);
  c.mean_span_len = j.value("mean_span_len", c.mean_span_len);
  c.shuffle_sentences = j.value("shuffle_sentences", c.shuffle_sentences);
  c.holdout_docs = j.value("holdout_docs", c.holdout_docs);
  c.log_every = j.value("log_every", c.log_every);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"objective", to_string(c.objective)},
       {"learning_rate", c.learning_rate},
       {"batch_size", c.batch_size},
       {"max_epochs", c.max_epochs},
       {"max_steps", c.max_steps},
       {"seed", c.seed},
       {"eval_every", c.eval_every},
       {"pretrained_checkpoint", c.pretrained_checkpoint}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (j.contains("objective")) c.objective = objective_from_string(j.at("objective"));
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.seed = j.value("seed", c.seed);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.pretrained_checkpoint = j.value("pretrained_checkpoint", c.pretrained_checkpoint);
}

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  std::vector<std::string> objectives;
  for (auto k : c.objectives) objectives.push_back(to_string(k));
  j = {{"sizes", c.sizes},       {"objectives", objectives},
       {"n_seeds", c.n_seeds},   {"jobs", c.jobs},
       {"test_cap", c.test_cap}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  c.sizes = j.value("sizes", c.sizes);
  if (j.contains("objectives")) {
    c.objectives.clear();
    for (const auto& name : j.at("objectives"))
      c.objectives.push_back(objective_from_string(name.get<std::string>()));
  }
  c.n_seeds = j.value("n_seeds", c.n_seeds);
  c.jobs = j.value("jobs", c.jobs);
  c.test_cap = j.value("test_cap", c.test_cap);
}

inline void to_json(nlohmann::json& j, const DataConfig& c) {
  j = {{"synthetic", c.synthetic},
       {"mrqa_files", c.mrqa_files},
       {"vocab_max_size", c.vocab_max_size}};
}

inline void from_json(const nlohmann::json& j, DataConfig& c) {
  if (j.contains("synthetic")) {
    nlohmann::json merged = c.synthetic;
    merged.update(j.at("synthetic"));
    c.synthetic = merged.get<SyntheticConfig>();
  }
  c.mrqa_files = j.value("mrqa_files", c.mrqa_files);
  c.vocab_max_size = j.value("vocab_max_size", c.vocab_max_size);
}

inline void to_json(nlohmann::json& j, const HarnessConfig& c) {
  j = {{"preset", c.preset},         {"seed", c.seed},
       {"data", c.data},             {"model", c.model},
       {"pretrain", c.pretrain},     {"finetune", c.finetune},
       {"experiment", c.experiment}};
}

// Both presets share architecture and data; they differ in optimization.
//   paper-mirror: lr 2e-5, batch 4, 35 epochs or 1000 steps, whichever is
//                 larger (hyperparameters meant for a large pretrained model)
//   desk:         lr 1e-3, batch 16, 300 steps, dev eval every 20 steps
inline HarnessConfig preset_config(const std::string& name) {
  HarnessConfig c;
  c.preset = name;
  if (name == "paper-mirror") {
    c.finetune.learning_rate = 2e-5;
    c.finetune.batch_size = 4;
    c.finetune.max_epochs = 35;
    c.finetune.max_steps = 1000;
    c.finetune.eval_every = 100;
  } else if (name == "desk") {
    c.finetune.learning_rate = 1e-3;
    c.finetune.batch_size = 16;
    c.finetune.max_epochs = 0;
    c.finetune.max_steps = 300;
    c.finetune.eval_every = 20;
  } else {
    throw ConfigError("unknown preset '" + name + "' (desk|paper-mirror)");
  }
  return c;
}

// Preset selected by the tree's "preset" key (default desk), then every key
// present in the tree overrides it.
inline HarnessConfig harness_config_from_json(const nlohmann::json& tree) {
  try {
    HarnessConfig c = preset_config(tree.value("preset", std::string("desk")));
    c.seed = tree.value("seed", c.seed);
    if (tree.contains("data")) from_json(tree.at("data"), c.data);
    if (tree.contains("model")) {
      nlohmann::json merged = c.model;
      merged.update(tree.at("model"));
      c.model = merged.get<ModelConfig>();
    }
    if (tree.contains("pretrain")) from_json(tree.at("pretrain"), c.pretrain);
    if (tree.contains("finetune")) from_json(tree.at("finetune"), c.finetune);
    if (tree.contains("experiment")) from_json(tree.at("experiment"), c.experiment);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
}

// Applies "a.b.c=value" to a JSON tree. The value is parsed as JSON when
// possible and kept as a string otherwise.
inline void apply_override(nlohmann::json& tree, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }
  nlohmann::json* node = &tree;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot - start);
    if (part.empty()) throw ConfigError("bad override key '" + key + "'");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

inline std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << v;
  return out.str();
}

inline std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---------------------------------------------------------------------------
// Vocabulary over everything the harness will tokenize
// ---------------------------------------------------------------------------

inline Vocab build_task_vocab(std::span<const std::string> corpus,
                              std::span<const QAExample> examples, int max_size) {
  std::vector<std::string> texts(corpus.begin(), corpus.end());
  texts.push_back("Question: Answer: Context:");
  for (const auto& ex : examples) {
    texts.push_back(ex.question);
    texts.push_back(ex.context);
  }
  return build_vocab(texts, max_size);
}

struct NamedDataset {
  std::string name;
  std::vector<QAExample> examples;
};

struct TaskData {
  std::vector<std::string> corpus;  // pretraining documents
  std::vector<NamedDataset> datasets;
  Vocab vocab;
};

// The synthetic task (when it has examples) followed by one dataset per
// MRQA file, named after the file stem. MRQA contexts join the pretraining
// corpus.
inline TaskData prepare_task(const DataConfig& config) {
  TaskData task;
  const auto synthetic = gen_synthetic(config.synthetic);
  task.corpus = synthetic.corpus;
  if (!synthetic.qa.empty()) task.datasets.push_back({"synthetic", synthetic.qa});
  for (const auto& path : config.mrqa_files) {
    NamedDataset d{std::filesystem::path(path).stem().string(), load_mrqa(path)};
    std::string previous;
    for (const auto& ex : d.examples) {
      if (ex.context != previous) task.corpus.push_back(ex.context);
      previous = ex.context;
    }
    task.datasets.push_back(std::move(d));
  }
  if (task.corpus.empty()) throw ConfigError("no pretraining documents configured");
  std::vector<QAExample> all;
  for (const auto& d : task.datasets) all.insert(all.end(), d.examples.begin(), d.examples.end());
  task.vocab = build_task_vocab(task.corpus, all, config.vocab_max_size);
  return task;
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

struct LossPoint {
  long step = 0;
  double loss = 0.0;  // mean per-token loss over the batch
};

struct PretrainResult {
  Model model;
  std::vector<LossPoint> loss_curve;
  double initial_holdout_loss = 0.0;  // per target token
  double final_holdout_loss = 0.0;
};

namespace detail {

inline void check_finite(double loss, const std::string& what) {
  if (!std::isfinite(loss)) {
    throw NumericError("non-finite loss during " + what);
  }
}

inline std::string ids_dump(std::span<const int> ids) {
  std::ostringstream out;
  for (std::size_t i = 0; i < ids.size(); ++i) out << (i ? " " : "") << ids[i];
  return out.str();
}

inline double mean_token_loss(const Model& model,
                              std::span<const CorruptionSample> samples) {
  NoGradGuard no_grad;
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& s : samples) {
    total += cross_entropy_logits(
                 model.forward_teacher_forced(s.corrupted_ids, s.target_ids),
                 std::span<const int>(s.target_ids), Vocab::kPad)
                 .item();
    tokens += s.target_ids.size();
  }
  return tokens ? total / tokens : 0.0;
}

}  // namespace detail

// Trains a fresh model on corruption samples drawn on the fly from
// `corpus`. The last holdout_docs documents are never trained on and give
// the before/after loss.
inline PretrainResult run_pretrain(std::span<const std::string> corpus,
                                   const Vocab& vocab, ModelConfig model_config,
                                   const PretrainConfig& config, std::uint64_t seed,
                                   std::ostream* log = nullptr) {
  if (corpus.empty()) throw ContractError("run_pretrain: empty corpus");
  model_config.vocab_size = vocab.size();
  model_config.span_head = false;
  std::vector<std::vector<int>> docs;
  for (const auto& text : corpus) {
    auto ids = encode(vocab, text);
    if (ids.empty()) continue;
    if (ids.size() > static_cast<std::size_t>(model_config.max_positions))
      ids.resize(model_config.max_positions);
    docs.push_back(std::move(ids));
  }
  const std::size_t holdout = std::min<std::size_t>(
      config.holdout_docs, docs.size() > 1 ? docs.size() / 2 : 0);
  const std::size_t n_train = docs.size() - holdout;
  if (n_train == 0) throw ContractError("run_pretrain: no training documents");

  CorruptionOptions options;
  options.corruption_rate = config.corruption_rate;
  options.mean_span_len = config.mean_span_len;
  options.shuffle_sentences = config.shuffle_sentences;
  options.sentence_end_id = vocab.find(".");

  Rng holdout_rng(derive_seed(seed, SeedStream::kCorruption, 1));
  std::vector<CorruptionSample> holdout_samples;
  for (std::size_t i = n_train; i < docs.size(); ++i)
    holdout_samples.push_back(corrupt(config.style, docs[i], options, holdout_rng));

  PretrainResult result{Model::create(model_config, derive_seed(seed, SeedStream::kInit)),
                        {}, 0.0, 0.0};
  Model& model = result.model;
  result.initial_holdout_loss = detail::mean_token_loss(model, holdout_samples);

  auto params = model.parameters();
  AdamState adam;
  adam.learning_rate = config.learning_rate;
  Rng corruption_rng(derive_seed(seed, SeedStream::kCorruption, 0));
  Rng order_rng(derive_seed(seed, SeedStream::kShuffle, 0));
  std::vector<std::size_t> order(n_train);
  for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
  order_rng.shuffle(std::span(order));
  std::size_t cursor = 0;
  model.set_training(true);
  for (int step = 1; step <= config.steps; ++step) {
    double batch_loss = 0.0;
    std::size_t batch_tokens = 0;
    for (int b = 0; b < config.batch_size; ++b) {
      if (cursor == order.size()) {
        order_rng.shuffle(std::span(order));
        cursor = 0;
      }
      const auto& doc = docs[order[cursor++]];
      const auto sample = corrupt(config.style, doc, options, corruption_rng);
      auto loss = cross_entropy_logits(
          model.forward_teacher_forced(sample.corrupted_ids, sample.target_ids),
          std::span<const int>(sample.target_ids), Vocab::kPad);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericError("non-finite pretraining loss at step " +
                           std::to_string(step) + "; input ids: " +
                           detail::ids_dump(sample.corrupted_ids) +
                           "; target ids: " + detail::ids_dump(sample.target_ids));
      }
      batch_loss += value;
      batch_tokens += sample.target_ids.size();
      backward(scale(loss, 1.0f / static_cast<float>(config.batch_size)));
    }
    adam_step(std::span(params), adam);
    const double per_token = batch_loss / std::max<std::size_t>(1, batch_tokens);
    if (config.log_every > 0 && (step % config.log_every == 0 || step == 1)) {
      result.loss_curve.push_back({step, per_token});
      if (log) *log << "pretrain step " << step << " loss " << per_token << "\n";
    }
  }
  model.set_training(false);
  result.final_holdout_loss = detail::mean_token_loss(model, holdout_samples);
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct Prediction {
  std::string example_id;
  std::string text;    // raw generated text, or the selected span
  std::string answer;  // extracted answer
  int steps_used = 0;
};

struct Evaluation {
  EvalResult scores;
  std::vector<Prediction> predictions;
};

inline Evaluation evaluate(const Model& model, const Vocab& vocab,
                           std::span<const QAExample> examples,
                           ObjectiveKind objective, const PromptLimits& limits) {
  NoGradGuard no_grad;
  Evaluation out;
  ScoreAccumulator acc;
  for (const auto& ex : examples) {
    const PromptPair pair = make_prompt_pair(vocab, ex, objective, limits, false);
    Prediction p;
    p.example_id = ex.id;
    if (objective == ObjectiveKind::kSpanSelection) {
      auto [start, end] = model.span_head_forward(pair.input_ids);
      const auto [s, e] = predict_span<float>(start.values(), end.values(),
                                              pair.context_begin, pair.context_end);
      const std::vector<int> span_ids(pair.input_ids.begin() + s,
                                      pair.input_ids.begin() + e + 1);
      p.text = decode(vocab, span_ids);
      p.answer = p.text;
    } else {
      const auto result =
          greedy_decode(model, vocab, pair.input_ids, default_max_steps(objective));
      p.text = result.text;
      p.answer = answer_extract(result.text, objective);
      p.steps_used = result.steps_used;
    }
    acc.add(p.answer, ex.answers);
    out.predictions.push_back(std::move(p));
  }
  out.scores = acc.result();
  return out;
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

struct DevPoint {
  long step = 0;
  double f1 = 0.0;
  double exact_match = 0.0;
  double train_loss = 0.0;  // mean per-example loss of the step's batch
};

struct FinetuneResult {
  Model model;  // parameters of the best dev checkpoint
  std::vector<DevPoint> history;
  long best_step = 0;
  double best_dev_f1 = 0.0;
  long steps_run = 0;
  int dropped_unanswerable = 0;
  std::size_t max_input_len = 0;
  std::vector<double> train_losses;  // one per step
};

// Fine-tunes from `init` (a pretrained model) or from scratch when `init`
// is null. Dev F1 is measured every eval_every steps and after the last
// step; the returned model is the earliest checkpoint with the best dev F1.
inline FinetuneResult run_finetune(const FewshotSplit& split, const TrainConfig& config,
                                   const Vocab& vocab, const Model* init,
                                   std::ostream* log = nullptr) {
  if (config.batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (split.train.empty() || split.dev.empty()) {
    throw ContractError("run_finetune: empty train or dev set");
  }
  ModelConfig model_config = config.model;
  model_config.vocab_size = vocab.size();
  model_config.span_head = config.objective == ObjectiveKind::kSpanSelection;
  if (init && !init->config().same_backbone(model_config)) {
    throw ConfigError("run_finetune: pretrained model config does not match");
  }
  const std::uint64_t init_seed = derive_seed(config.seed, SeedStream::kInit);
  FinetuneResult result{Model::create(model_config, init_seed), {}, 0, -1.0, 0, 0, 0, {}};
  Model& model = result.model;
  if (init) model.load_matching(*init);
  model.reseed_dropout(derive_seed(config.seed, SeedStream::kDropout));

  PromptLimits limits;
  limits.max_input_len = std::min<std::size_t>(compute_max_len(split.dev, vocab),
                                               model_config.max_positions);
  limits.max_target_len = model_config.max_positions;
  result.max_input_len = limits.max_input_len;
  std::vector<PromptPair> pairs;
  for (const auto& ex : split.train) {
    try {
      pairs.push_back(make_prompt_pair(vocab, ex, config.objective, limits));
    } catch (const UnanswerableError&) {
      ++result.dropped_unanswerable;
    }
  }
  if (pairs.empty()) throw ContractError("run_finetune: no usable training pairs");

  auto params = model.parameters();
  AdamState adam;
  adam.learning_rate = config.learning_rate;
  Rng order_rng(derive_seed(config.seed, SeedStream::kShuffle));
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  order_rng.shuffle(std::span(order));
  std::size_t cursor = 0;

  const long total_steps = budget_steps(config, pairs.size());
  std::vector<std::vector<float>> best_values;
  auto evaluate_dev = [&](long step, double train_loss) {
    model.set_training(false);
    const auto dev = evaluate(model, vocab, split.dev, config.objective, limits);
    model.set_training(true);
    result.history.push_back({step, dev.scores.f1, dev.scores.exact_match, train_loss});
    if (log) {
      *log << "finetune step " << step << " loss " << train_loss << " dev_f1 "
           << dev.scores.f1 << "\n";
    }
    if (dev.scores.f1 > result.best_dev_f1) {
      result.best_dev_f1 = dev.scores.f1;
      result.best_step = step;
      best_values = model.snapshot();
    }
  };

  model.set_training(true);
  for (long step = 1; step <= total_steps; ++step) {
    double batch_loss = 0.0;
    const int batch = std::min<int>(config.batch_size, static_cast<int>(pairs.size()));
    for (int b = 0; b < batch; ++b) {
      if (cursor == order.size()) {
        order_rng.shuffle(std::span(order));
        cursor = 0;
      }
      const auto& pair = pairs[order[cursor++]];
      auto loss = compute_loss(model, pair);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericError("non-finite fine-tuning loss at step " +
                           std::to_string(step) + " on example " + pair.example_id +
                           "; input ids: " + detail::ids_dump(pair.input_ids));
      }
      batch_loss += value;
      backward(scale(loss, 1.0f / static_cast<float>(batch)));
    }
    adam_step(std::span(params), adam);
    result.train_losses.push_back(batch_loss / batch);
    result.steps_run = step;
    const bool eval_now =
        (config.eval_every > 0 && step % config.eval_every == 0) || step == total_steps;
    if (eval_now) evaluate_dev(step, batch_loss / batch);
  }
  model.set_training(false);
  if (!best_values.empty()) model.restore(best_values);
  return result;
}

// ---------------------------------------------------------------------------
// Experiment grid
// ---------------------------------------------------------------------------

struct RunOutcome {
  bool ok = false;
  std::string error;
  double f1 = 0.0;
  double exact_match = 0.0;
  long best_step = 0;
  double best_dev_f1 = 0.0;
  std::uint64_t split_seed = 0;
  std::uint64_t train_seed = 0;
};

struct ReportRow {
  std::string dataset;
  int train_size = 0;
  ObjectiveKind objective = ObjectiveKind::kQuestionThenAnswer;
  std::vector<RunOutcome> runs;  // one per seed
  bool failed = false;
  std::string failure;
  AggregateCell f1;
  AggregateCell exact_match;
};

struct ExperimentReport {
  std::vector<ReportRow> rows;
  std::string config_hash;
  nlohmann::json config;
  std::uint64_t master_seed = 0;
  int n_seeds = 0;
  std::string started_at;
  std::string finished_at;
};

// Seeds for one run. The split depends on (dataset, size, seed index)
// only, so every objective sees the same examples for a given seed.
inline std::uint64_t split_seed_for(std::uint64_t master, std::size_t dataset,
                                    int size, int seed_index) {
  return derive_seed(master, SeedStream::kSampling,
                     (static_cast<std::uint64_t>(dataset) << 40) ^
                         (static_cast<std::uint64_t>(size) << 20) ^
                         static_cast<std::uint64_t>(seed_index));
}

inline std::uint64_t train_seed_for(std::uint64_t master, std::size_t dataset,
                                    int size, int seed_index) {
  return derive_seed(master, SeedStream::kInit,
                     (static_cast<std::uint64_t>(dataset) << 40) ^
                         (static_cast<std::uint64_t>(size) << 20) ^
                         static_cast<std::uint64_t>(seed_index));
}

inline void finalize_row(ReportRow& row) {
  std::vector<double> f1, em;
  for (const auto& r : row.runs) {
    if (!r.ok) {
      row.failed = true;
      if (row.failure.empty()) row.failure = r.error;
      continue;
    }
    f1.push_back(r.f1);
    em.push_back(r.exact_match);
  }
  if (!row.failed && !f1.empty()) {
    row.f1 = aggregate(f1);
    row.exact_match = aggregate(em);
  }
}

// Runs every (dataset, size, objective, seed) cell: sample a split,
// fine-tune from `pretrained`, score the test set. Failed runs are recorded
// and never abort the grid. Up to experiment.jobs runs execute at once.
inline ExperimentReport run_experiment(std::span<const NamedDataset> datasets,
                                       const HarnessConfig& config,
                                       const Vocab& vocab, const Model* pretrained,
                                       std::ostream* log = nullptr) {
  const auto& ex = config.experiment;
  if (ex.n_seeds < 1) throw ConfigError("experiment.n_seeds must be at least 1");
  ExperimentReport report;
  report.config = config;
  report.config_hash = hex64(fnv1a64(report.config.dump()));
  report.master_seed = config.seed;
  report.n_seeds = ex.n_seeds;
  report.started_at = utc_timestamp();

  struct Job {
    std::size_t row;
    std::size_t dataset;
    int seed_index;
  };
  std::vector<Job> jobs;
  for (std::size_t d = 0; d < datasets.size(); ++d) {
    for (int size : ex.sizes) {
      for (auto objective : ex.objectives) {
        ReportRow row;
        row.dataset = datasets[d].name;
        row.train_size = size;
        row.objective = objective;
        row.runs.resize(ex.n_seeds);
        report.rows.push_back(std::move(row));
        for (int s = 0; s < ex.n_seeds; ++s)
          jobs.push_back({report.rows.size() - 1, d, s});
      }
    }
  }

  std::mutex log_mutex;
  auto run_job = [&](const Job& job) {
    ReportRow& row = report.rows[job.row];
    RunOutcome& out = row.runs[job.seed_index];
    out.split_seed = split_seed_for(config.seed, job.dataset, row.train_size, job.seed_index);
    out.train_seed = train_seed_for(config.seed, job.dataset, row.train_size, job.seed_index);
    try {
      const auto split = sample_fewshot(datasets[job.dataset].examples, row.train_size,
                                        out.split_seed, ex.test_cap,
                                        datasets[job.dataset].name);
      TrainConfig tc = config.finetune;
      tc.objective = row.objective;
      tc.seed = out.train_seed;
      tc.model = config.model;
      const auto tuned = run_finetune(split, tc, vocab, pretrained);
      PromptLimits limits;
      limits.max_input_len = tuned.max_input_len;
      limits.max_target_len = tuned.model.config().max_positions;
      const auto test = evaluate(tuned.model, vocab, split.test, row.objective, limits);
      out.f1 = test.scores.f1;
      out.exact_match = test.scores.exact_match;
      out.best_step = tuned.best_step;
      out.best_dev_f1 = tuned.best_dev_f1;
      out.ok = true;
    } catch (const std::exception& e) {
      out.ok = false;
      out.error = e.what();
    }
    if (log) {
      std::lock_guard lock(log_mutex);
      *log << row.dataset << " n=" << row.train_size << " " << to_string(row.objective)
           << " seed#" << job.seed_index << ": "
           << (out.ok ? "test_f1 " + std::to_string(out.f1) : "FAILED " + out.error)
           << "\n";
    }
  };

  const int workers = std::max(1, std::min<int>(ex.jobs, static_cast<int>(jobs.size())));
  if (workers == 1) {
    for (const auto& job : jobs) run_job(job);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) run_job(jobs[i]);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& row : report.rows) finalize_row(row);
  report.finished_at = utc_timestamp();
  return report;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline std::string format_cell(double mean, double std) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f\xC2\xB1%.1f", mean, std);
  return buf;
}

inline const char* kMissingCell = "\xE2\x80\x94";  // em dash

inline nlohmann::json report_to_json(const ExperimentReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& run : row.runs) {
      runs.push_back({{"ok", run.ok},
                      {"error", run.error},
                      {"f1", run.f1},
                      {"exact_match", run.exact_match},
                      {"best_step", run.best_step},
                      {"best_dev_f1", run.best_dev_f1},
                      {"split_seed", run.split_seed},
                      {"train_seed", run.train_seed}});
    }
    rows.push_back({{"dataset", row.dataset},
                    {"train_size", row.train_size},
                    {"objective", to_string(row.objective)},
                    {"failed", row.failed},
                    {"failure", row.failure},
                    {"f1", {{"mean", row.f1.mean}, {"std", row.f1.std}, {"n_runs", row.f1.n_runs}}},
                    {"exact_match",
                     {{"mean", row.exact_match.mean},
                      {"std", row.exact_match.std},
                      {"n_runs", row.exact_match.n_runs}}},
                    {"runs", runs}});
  }
  return {{"provenance",
           {{"config_hash", r.config_hash},
            {"master_seed", r.master_seed},
            {"n_seeds", r.n_seeds},
            {"started_at", r.started_at},
            {"finished_at", r.finished_at}}},
          {"config", r.config},
          {"rows", rows}};
}

inline ExperimentReport report_from_json(const nlohmann::json& j) {
  try {
    ExperimentReport r;
    const auto& prov = j.at("provenance");
    r.config_hash = prov.at("config_hash");
    r.master_seed = prov.at("master_seed");
    r.n_seeds = prov.at("n_seeds");
    r.started_at = prov.value("started_at", "");
    r.finished_at = prov.value("finished_at", "");
    r.config = j.value("config", nlohmann::json::object());
    for (const auto& jr : j.at("rows")) {
      ReportRow row;
      row.dataset = jr.at("dataset");
      row.train_size = jr.at("train_size");
      row.objective = objective_from_string(jr.at("objective"));
      for (const auto& run : jr.at("runs")) {
        RunOutcome o;
        o.ok = run.at("ok");
        o.error = run.value("error", "");
        o.f1 = run.at("f1");
        o.exact_match = run.at("exact_match");
        o.best_step = run.value("best_step", 0L);
        o.best_dev_f1 = run.value("best_dev_f1", 0.0);
        o.split_seed = run.value("split_seed", std::uint64_t{0});
        o.train_seed = run.value("train_seed", std::uint64_t{0});
        row.runs.push_back(o);
      }
      finalize_row(row);
      r.rows.push_back(std::move(row));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed report: ") + e.what());
  }
}

// Table-style layout: one line per (train size, objective), one column per
// dataset, cells "mean±std" of test F1.
inline std::string render_table(const ExperimentReport& r) {
  std::vector<std::string> datasets;
  std::vector<std::pair<int, ObjectiveKind>> keys;
  for (const auto& row : r.rows) {
    if (std::find(datasets.begin(), datasets.end(), row.dataset) == datasets.end())
      datasets.push_back(row.dataset);
    const std::pair<int, ObjectiveKind> key{row.train_size, row.objective};
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) keys.push_back(key);
  }
  std::ostringstream out;
  out << "train_size,objective";
  for (const auto& d : datasets) out << "," << d;
  out << "\n";
  bool any_failed = false;
  for (const auto& [size, objective] : keys) {
    out << size << "," << to_string(objective);
    for (const auto& d : datasets) {
      out << ",";
      auto it = std::find_if(r.rows.begin(), r.rows.end(), [&](const ReportRow& row) {
        return row.dataset == d && row.train_size == size && row.objective == objective;
      });
      if (it == r.rows.end() || it->failed) {
        out << kMissingCell;
        any_failed = any_failed || it != r.rows.end();
      } else {
        out << format_cell(it->f1.mean, it->f1.std);
      }
    }
    out << "\n";
  }
  if (any_failed) {
    out << "# " << kMissingCell
        << " at least one seed of this cell failed; see report.json for the error\n";
  }
  return out.str();
}

// Plot series: test F1 against training-set size, per objective.
inline std::string render_series(const ExperimentReport& r) {
  std::ostringstream out;
  out << "dataset,objective,train_size,f1_mean,f1_std,em_mean,em_std\n";
  std::vector<const ReportRow*> rows;
  for (const auto& row : r.rows) rows.push_back(&row);
  std::stable_sort(rows.begin(), rows.end(), [](const ReportRow* a, const ReportRow* b) {
    if (a->dataset != b->dataset) return a->dataset < b->dataset;
    if (a->objective != b->objective) return a->objective < b->objective;
    return a->train_size < b->train_size;
  });
  char buf[160];
  for (const auto* row : rows) {
    if (row->failed) continue;
    std::snprintf(buf, sizeof buf, "%s,%s,%d,%.4f,%.4f,%.4f,%.4f\n", row->dataset.c_str(),
                  to_string(row->objective).c_str(), row->train_size, row->f1.mean,
                  row->f1.std, row->exact_match.mean, row->exact_match.std);
    out << buf;
  }
  return out.str();
}

// Directional readings of an objective-ablation grid.
struct AblationFindings {
  // Aligned (QuestionThenAnswer) minus SpanSelection mean F1, per size.
  std::map<int, double> aligned_gap;
  std::string gap_trend;  // by magnitude: "narrowing", "persisting", "widening" or "n/a"
  // QuestionThenAnswer >= AnswerThenQuestion, per size.
  std::map<int, bool> question_first_not_worse;
};

inline AblationFindings ablation_findings(const ExperimentReport& r,
                                          const std::string& dataset) {
  AblationFindings f;
  auto mean_of = [&](int size, ObjectiveKind k) -> std::optional<double> {
    for (const auto& row : r.rows)
      if (row.dataset == dataset && row.train_size == size && row.objective == k &&
          !row.failed)
        return row.f1.mean;
    return std::nullopt;
  };
  std::set<int> sizes;
  for (const auto& row : r.rows)
    if (row.dataset == dataset) sizes.insert(row.train_size);
  for (int size : sizes) {
    auto aligned = mean_of(size, ObjectiveKind::kQuestionThenAnswer);
    auto span = mean_of(size, ObjectiveKind::kSpanSelection);
    auto atq = mean_of(size, ObjectiveKind::kAnswerThenQuestion);
    if (aligned && span) f.aligned_gap[size] = *aligned - *span;
    if (aligned && atq) f.question_first_not_worse[size] = *aligned >= *atq;
  }
  f.gap_trend = "n/a";
  if (f.aligned_gap.size() >= 2) {
    const double first = std::abs(f.aligned_gap.begin()->second);
    const double last = std::abs(f.aligned_gap.rbegin()->second);
    if (last < first - 1.0) {
      f.gap_trend = "narrowing";
    } else if (last > first + 1.0) {
      f.gap_trend = "widening";
    } else {
      f.gap_trend = "persisting";
    }
  }
  return f;
}

inline nlohmann::json findings_to_json(const AblationFindings& f) {
  nlohmann::json gaps = nlohmann::json::object();
  for (const auto& [size, gap] : f.aligned_gap) gaps[std::to_string(size)] = gap;
  nlohmann::json order = nlohmann::json::object();
  for (const auto& [size, ok] : f.question_first_not_worse) order[std::to_string(size)] = ok;
  return {{"aligned_minus_span_selection_f1", gaps},
          {"gap_trend", f.gap_trend},
          {"question_then_answer_ge_answer_then_question", order}};
}

struct ReportFiles {
  std::string json_path;
  std::string table_path;
  std::string series_path;
};

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("failed writing " + path);
}

// Writes report.json (full provenance and per-seed results), table.csv and
// series.csv into `dir`.
inline ReportFiles emit_report(const ExperimentReport& report, const std::string& dir) {
  if (report.rows.empty()) throw ContractError("emit_report: empty report");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
  ReportFiles files{dir + "/report.json", dir + "/table.csv", dir + "/series.csv"};
  nlohmann::json j = report_to_json(report);
  nlohmann::json findings = nlohmann::json::object();
  std::set<std::string> datasets;
  for (const auto& row : report.rows) datasets.insert(row.dataset);
  for (const auto& d : datasets) findings[d] = findings_to_json(ablation_findings(report, d));
  j["findings"] = findings;
  write_text_file(files.json_path, j.dump(2) + "\n");
  write_text_file(files.table_path, render_table(report));
  write_text_file(files.series_path, render_series(report));
  return files;
}

}  // namespace fsqa

#endif  // FSQA_HARNESS_HPP
