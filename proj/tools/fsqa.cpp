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

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fsqa/harness.hpp"

namespace fs = std::filesystem;
using fsqa::HarnessConfig;
using fsqa::Model;
using nlohmann::json;

namespace {

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
};

struct TaskOptions {
  std::string checkpoint;
  std::string dataset;
  int size = 16;
  std::string objective;
  std::string report;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("-c,--config", o.config_path, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", o.overrides, "Override a config key, e.g. finetune.learning_rate=1e-3")
      ->take_all();
  cmd->add_option("--seed", o.seed, "Master seed");
  cmd->add_option("-o,--out", o.out, "Output directory");
}

HarnessConfig load_config(const CommonOptions& o) {
  json tree = json::object();
  if (!o.config_path.empty()) {
    std::ifstream in(o.config_path);
    if (!in) throw fsqa::IoError("cannot open " + o.config_path);
    try {
      tree = json::parse(in);
    } catch (const json::parse_error& e) {
      throw fsqa::ConfigError(o.config_path + ": " + e.what());
    }
  }
  for (const auto& assignment : o.overrides) fsqa::apply_override(tree, assignment);
  if (o.seed) tree["seed"] = *o.seed;
  return fsqa::harness_config_from_json(tree);
}

void prepare_out(const CommonOptions& o, const HarnessConfig& config) {
  fs::create_directories(o.out);
  fsqa::write_text_file(o.out + "/config.json", json(config).dump(2) + "\n");
}

class JsonLog {
 public:
  explicit JsonLog(const std::string& path) : out_(path) {
    if (!out_) throw fsqa::IoError("cannot write " + path);
  }
  void write(const json& record) { out_ << record.dump() << '\n' << std::flush; }

 private:
  std::ofstream out_;
};

// The vocabulary stored next to a checkpoint wins over a rebuilt one.
fsqa::Vocab vocab_for(const std::string& checkpoint, const fsqa::TaskData& task) {
  if (!checkpoint.empty()) {
    const auto path = fs::path(checkpoint).parent_path() / "vocab.txt";
    if (fs::exists(path)) return fsqa::Vocab::load(path.string());
  }
  return task.vocab;
}

std::unique_ptr<Model> load_model(const std::string& path, const fsqa::Vocab& vocab) {
  if (path.empty()) return nullptr;
  auto model = std::make_unique<Model>(fsqa::load_checkpoint<float>(path));
  if (model->config().vocab_size != vocab.size()) {
    throw fsqa::ConfigError("checkpoint " + path + " has vocab size " +
                            std::to_string(model->config().vocab_size) +
                            " but the vocabulary has " + std::to_string(vocab.size()));
  }
  return model;
}

std::size_t dataset_index(const fsqa::TaskData& task, const std::string& name) {
  if (task.datasets.empty()) throw fsqa::ConfigError("no QA datasets configured");
  if (name.empty()) return 0;
  for (std::size_t i = 0; i < task.datasets.size(); ++i)
    if (task.datasets[i].name == name) return i;
  throw fsqa::ConfigError("unknown dataset '" + name + "'");
}

int cmd_pretrain(const CommonOptions& o) {
  const auto config = load_config(o);
  prepare_out(o, config);
  const auto task = fsqa::prepare_task(config.data);
  std::cerr << "pretraining " << to_string(config.pretrain.style) << " on "
            << task.corpus.size() << " documents, vocab " << task.vocab.size() << "\n";
  const auto result = fsqa::run_pretrain(task.corpus, task.vocab, config.model,
                                         config.pretrain, config.seed, &std::cerr);
  task.vocab.save(o.out + "/vocab.txt");
  fsqa::save_checkpoint(result.model, o.out + "/pretrained.ckpt");
  JsonLog log(o.out + "/metrics.jsonl");
  for (const auto& p : result.loss_curve)
    log.write({{"phase", "pretrain"}, {"step", p.step}, {"train_loss", p.loss}});
  log.write({{"phase", "holdout"},
             {"initial_loss", result.initial_holdout_loss},
             {"final_loss", result.final_holdout_loss}});
  std::cerr << "holdout loss " << result.initial_holdout_loss << " -> "
            << result.final_holdout_loss << "\n";
  return 0;
}

int cmd_finetune(const CommonOptions& o, const TaskOptions& t) {
  auto config = load_config(o);
  if (!t.checkpoint.empty()) config.finetune.pretrained_checkpoint = t.checkpoint;
  if (!t.objective.empty()) config.finetune.objective = fsqa::objective_from_string(t.objective);
  prepare_out(o, config);
  const auto task = fsqa::prepare_task(config.data);
  const auto& ckpt = config.finetune.pretrained_checkpoint;
  const auto vocab = vocab_for(ckpt, task);
  const auto pretrained = load_model(ckpt, vocab);
  const std::size_t d = dataset_index(task, t.dataset);
  const auto split = fsqa::sample_fewshot(task.datasets[d].examples, t.size,
                                          fsqa::split_seed_for(config.seed, d, t.size, 0),
                                          config.experiment.test_cap, task.datasets[d].name);
  fsqa::TrainConfig tc = config.finetune;
  tc.model = config.model;
  tc.seed = fsqa::train_seed_for(config.seed, d, t.size, 0);
  const auto result = fsqa::run_finetune(split, tc, vocab, pretrained.get(), &std::cerr);

  vocab.save(o.out + "/vocab.txt");
  fsqa::save_checkpoint(result.model, o.out + "/finetuned.ckpt");
  fsqa::write_id_list(o.out + "/train_ids.txt", split.train);
  fsqa::write_id_list(o.out + "/dev_ids.txt", split.dev);
  JsonLog log(o.out + "/metrics.jsonl");
  for (const auto& p : result.history) {
    log.write({{"split", "dev"},
               {"step", p.step},
               {"f1", p.f1},
               {"exact_match", p.exact_match},
               {"train_loss", p.train_loss}});
  }
  fsqa::PromptLimits limits;
  limits.max_input_len = result.max_input_len;
  limits.max_target_len = result.model.config().max_positions;
  const auto test = fsqa::evaluate(result.model, vocab, split.test, tc.objective, limits);
  log.write({{"split", "test"},
             {"step", result.best_step},
             {"f1", test.scores.f1},
             {"exact_match", test.scores.exact_match},
             {"n_examples", test.scores.n_examples}});
  std::cout << "best dev f1 " << result.best_dev_f1 << " at step " << result.best_step
            << "; test f1 " << test.scores.f1 << " em " << test.scores.exact_match << "\n";
  return 0;
}

int cmd_eval(const CommonOptions& o, const TaskOptions& t) {
  auto config = load_config(o);
  if (!t.objective.empty()) config.finetune.objective = fsqa::objective_from_string(t.objective);
  prepare_out(o, config);
  const auto task = fsqa::prepare_task(config.data);
  const auto vocab = vocab_for(t.checkpoint, task);
  const auto model = load_model(t.checkpoint, vocab);
  const auto objective = config.finetune.objective;
  if ((objective == fsqa::ObjectiveKind::kSpanSelection) != model->config().span_head) {
    throw fsqa::ConfigError("checkpoint span head does not match objective " +
                            to_string(objective));
  }
  const std::size_t d = dataset_index(task, t.dataset);
  const auto split = fsqa::sample_fewshot(task.datasets[d].examples, t.size,
                                          fsqa::split_seed_for(config.seed, d, t.size, 0),
                                          config.experiment.test_cap, task.datasets[d].name);
  fsqa::PromptLimits limits;
  limits.max_input_len = std::min<std::size_t>(fsqa::compute_max_len(split.dev, vocab),
                                               model->config().max_positions);
  limits.max_target_len = model->config().max_positions;
  const auto result = fsqa::evaluate(*model, vocab, split.test, objective, limits);
  JsonLog metrics(o.out + "/metrics.jsonl");
  metrics.write({{"split", "test"},
                 {"f1", result.scores.f1},
                 {"exact_match", result.scores.exact_match},
                 {"n_examples", result.scores.n_examples}});
  JsonLog predictions(o.out + "/predictions.jsonl");
  for (const auto& p : result.predictions) {
    predictions.write({{"id", p.example_id},
                       {"text", p.text},
                       {"answer", p.answer},
                       {"steps_used", p.steps_used}});
  }
  std::cout << "test f1 " << result.scores.f1 << " em " << result.scores.exact_match
            << " over " << result.scores.n_examples << " examples\n";
  return 0;
}

int cmd_experiment(const CommonOptions& o, const TaskOptions& t) {
  auto config = load_config(o);
  if (!t.checkpoint.empty()) config.finetune.pretrained_checkpoint = t.checkpoint;
  prepare_out(o, config);
  const auto task = fsqa::prepare_task(config.data);
  std::string ckpt = config.finetune.pretrained_checkpoint;
  const auto vocab = vocab_for(ckpt, task);
  std::unique_ptr<Model> pretrained = load_model(ckpt, vocab);
  if (!pretrained && config.pretrain.steps > 0) {
    auto result = fsqa::run_pretrain(task.corpus, vocab, config.model, config.pretrain,
                                     config.seed, &std::cerr);
    vocab.save(o.out + "/vocab.txt");
    fsqa::save_checkpoint(result.model, o.out + "/pretrained.ckpt");
    pretrained = std::make_unique<Model>(std::move(result.model));
  }
  const auto report =
      fsqa::run_experiment(task.datasets, config, vocab, pretrained.get(), &std::cerr);
  fsqa::emit_report(report, o.out);
  JsonLog log(o.out + "/metrics.jsonl");
  int failures = 0;
  for (const auto& row : report.rows) {
    for (std::size_t s = 0; s < row.runs.size(); ++s) {
      const auto& run = row.runs[s];
      log.write({{"split", "test"},
                 {"dataset", row.dataset},
                 {"train_size", row.train_size},
                 {"objective", to_string(row.objective)},
                 {"seed_index", s},
                 {"ok", run.ok},
                 {"f1", run.f1},
                 {"exact_match", run.exact_match},
                 {"best_step", run.best_step},
                 {"best_dev_f1", run.best_dev_f1},
                 {"error", run.error}});
      if (!run.ok) ++failures;
    }
  }
  std::cout << fsqa::render_table(report);
  if (failures > 0) std::cerr << failures << " run(s) failed; see " << o.out << "/report.json\n";
  return failures > 0 ? 1 : 0;
}

int cmd_report(const CommonOptions& o, const TaskOptions& t) {
  std::ifstream in(t.report);
  if (!in) throw fsqa::IoError("cannot open " + t.report);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw fsqa::FormatError(t.report + ": " + e.what());
  }
  const auto report = fsqa::report_from_json(j);
  fsqa::emit_report(report, o.out);
  std::cout << fsqa::render_table(report);
  for (const auto& row : report.rows)
    if (row.failed) return 1;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot question answering with aligned seq2seq objectives"};
  app.require_subcommand(1);
  CommonOptions common;
  TaskOptions task;

  auto* pretrain = app.add_subcommand("pretrain", "Pretrain with span corruption");
  add_common(pretrain, common);

  auto* finetune = app.add_subcommand("finetune", "Fine-tune on one few-shot split");
  add_common(finetune, common);
  finetune->add_option("--checkpoint", task.checkpoint, "Pretrained checkpoint");
  finetune->add_option("--dataset", task.dataset, "Dataset name (default: first)");
  finetune->add_option("--size", task.size, "Training examples")->check(CLI::PositiveNumber);
  finetune->add_option("--objective", task.objective, "Fine-tuning objective");

  auto* eval = app.add_subcommand("eval", "Score a fine-tuned checkpoint on the test split");
  add_common(eval, common);
  eval->add_option("--checkpoint", task.checkpoint, "Fine-tuned checkpoint")->required();
  eval->add_option("--dataset", task.dataset, "Dataset name (default: first)");
  eval->add_option("--size", task.size, "Training examples of the split")
      ->check(CLI::PositiveNumber);
  eval->add_option("--objective", task.objective, "Objective the checkpoint was tuned for");

  auto* experiment = app.add_subcommand("experiment", "Run the size x objective x seed grid");
  add_common(experiment, common);
  experiment->add_option("--checkpoint", task.checkpoint,
                         "Pretrained checkpoint (default: pretrain first)");

  auto* report = app.add_subcommand("report", "Re-render tables from report.json");
  add_common(report, common);
  report->add_option("--in", task.report, "report.json to render")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*pretrain) return cmd_pretrain(common);
    if (*finetune) return cmd_finetune(common, task);
    if (*eval) return cmd_eval(common, task);
    if (*experiment) return cmd_experiment(common, task);
    if (*report) return cmd_report(common, task);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
