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

#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "fsqa/harness.hpp"

namespace fsqa {
namespace {

using K = ObjectiveKind;

std::string temp_dir(const std::string& name) {
  return (std::filesystem::temp_directory_path() /
          ("fsqa_harness_" + std::to_string(::getpid()) + "_" + name))
      .string();
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.n_encoder_layers = 1;
  c.n_decoder_layers = 1;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_positions = 64;
  return c;
}

struct TinyTask {
  SyntheticData data;
  Vocab vocab;
};

const TinyTask& tiny_task() {
  static const TinyTask task = [] {
    SyntheticConfig c;
    c.n_examples = 120;
    c.n_pretrain_docs = 40;
    c.n_entities = 10;
    c.n_values = 10;
    c.context_facts = 2;
    TinyTask t{gen_synthetic(c), Vocab{}};
    t.vocab = build_task_vocab(t.data.corpus, t.data.qa, 1000);
    return t;
  }();
  return task;
}

ReportRow make_row(const std::string& dataset, int size, K objective,
                   std::vector<double> f1s, bool fail_one = false) {
  ReportRow row;
  row.dataset = dataset;
  row.train_size = size;
  row.objective = objective;
  for (double f : f1s) {
    RunOutcome o;
    o.ok = true;
    o.f1 = f;
    o.exact_match = f / 2;
    row.runs.push_back(o);
  }
  if (fail_one) {
    row.runs.back().ok = false;
    row.runs.back().error = "boom";
  }
  finalize_row(row);
  return row;
}

ExperimentReport sample_report() {
  ExperimentReport r;
  r.config_hash = "00000000deadbeef";
  r.master_seed = 3;
  r.n_seeds = 2;
  r.started_at = "2026-01-01T00:00:00Z";
  r.finished_at = "2026-01-01T00:01:00Z";
  r.config = {{"preset", "desk"}};
  r.rows.push_back(make_row("syn", 16, K::kQuestionThenAnswer, {53.5, 57.5}));
  r.rows.push_back(make_row("syn", 16, K::kSpanSelection, {10.0, 12.0}));
  r.rows.push_back(make_row("syn", 16, K::kAnswerThenQuestion, {40.0, 44.0}));
  r.rows.push_back(make_row("syn", 128, K::kQuestionThenAnswer, {70.0, 70.0}));
  r.rows.push_back(make_row("syn", 128, K::kSpanSelection, {60.0, 62.0}));
  r.rows.push_back(make_row("syn", 128, K::kAnswerThenQuestion, {72.0, 72.0}));
  return r;
}

TEST(Budget, LargerOfEpochsAndSteps) {
  TrainConfig c;
  c.batch_size = 4;
  c.max_epochs = 35;
  c.max_steps = 1000;
  EXPECT_EQ(budget_steps(c, 16), 1000);   // 35 * 4 = 140
  EXPECT_EQ(budget_steps(c, 128), 1120);  // 35 * 32
  EXPECT_EQ(budget_steps(c, 130), 1155);  // 35 * ceil(130 / 4)
  c.max_epochs = 0;
  c.max_steps = 300;
  EXPECT_EQ(budget_steps(c, 16), 300);
}

TEST(Presets, DeskAndPaperMirror) {
  const auto desk = preset_config("desk");
  EXPECT_DOUBLE_EQ(desk.finetune.learning_rate, 1e-3);
  EXPECT_EQ(desk.finetune.batch_size, 16);
  EXPECT_EQ(desk.finetune.max_steps, 300);
  EXPECT_EQ(desk.finetune.eval_every, 20);
  const auto mirror = preset_config("paper-mirror");
  EXPECT_DOUBLE_EQ(mirror.finetune.learning_rate, 2e-5);
  EXPECT_EQ(mirror.finetune.batch_size, 4);
  EXPECT_EQ(mirror.finetune.max_epochs, 35);
  EXPECT_EQ(mirror.finetune.max_steps, 1000);
  EXPECT_THROW(preset_config("laptop"), ConfigError);
}

TEST(Config, OverridesMergeOntoPreset) {
  nlohmann::json tree = {{"preset", "paper-mirror"}};
  apply_override(tree, "finetune.learning_rate=0.001");
  apply_override(tree, "model.d_model=32");
  apply_override(tree, "experiment.objectives=[\"QuestionThenAnswer\"]");
  apply_override(tree, "pretrain.style=bart");
  apply_override(tree, "seed=9");
  const auto c = harness_config_from_json(tree);
  EXPECT_DOUBLE_EQ(c.finetune.learning_rate, 1e-3);
  EXPECT_EQ(c.finetune.batch_size, 4);
  EXPECT_EQ(c.model.d_model, 32);
  EXPECT_EQ(c.model.n_heads, ModelConfig{}.n_heads);
  EXPECT_EQ(c.experiment.objectives, std::vector<K>{K::kQuestionThenAnswer});
  EXPECT_EQ(c.pretrain.style, CorruptionStyle::kBartDenoise);
  EXPECT_EQ(c.seed, 9u);
}

TEST(Config, OverrideErrors) {
  nlohmann::json tree;
  EXPECT_THROW(apply_override(tree, "novalue"), ConfigError);
  EXPECT_THROW(apply_override(tree, "=3"), ConfigError);
  EXPECT_THROW(apply_override(tree, "a..b=3"), ConfigError);
  apply_override(tree, "finetune.objective=Nonsense");
  EXPECT_THROW(harness_config_from_json(tree), ConfigError);
  tree = {{"finetune", {{"batch_size", "many"}}}};
  EXPECT_THROW(harness_config_from_json(tree), ConfigError);
}

TEST(Config, JsonRoundTrip) {
  auto c = preset_config("desk");
  c.seed = 77;
  c.experiment.sizes = {16, 32};
  c.data.synthetic.n_examples = 500;
  const nlohmann::json j = c;
  const nlohmann::json again = harness_config_from_json(j);
  EXPECT_EQ(j, again);
}

TEST(Seeds, SplitSeedSharedAcrossObjectivesButNotSizes) {
  EXPECT_EQ(split_seed_for(1, 0, 16, 2), split_seed_for(1, 0, 16, 2));
  EXPECT_NE(split_seed_for(1, 0, 16, 2), split_seed_for(1, 0, 32, 2));
  EXPECT_NE(split_seed_for(1, 0, 16, 2), split_seed_for(1, 0, 16, 3));
  EXPECT_NE(split_seed_for(1, 0, 16, 2), split_seed_for(2, 0, 16, 2));
  EXPECT_NE(split_seed_for(1, 0, 16, 2), train_seed_for(1, 0, 16, 2));
}

TEST(Report, CellFormat) {
  EXPECT_EQ(format_cell(55.5, 2.0), "55.5\xC2\xB1" "2.0");
  EXPECT_EQ(format_cell(10.44, 5.9), "10.4\xC2\xB1" "5.9");
}

TEST(Report, TableLayout) {
  const auto table = render_table(sample_report());
  EXPECT_EQ(table,
            "train_size,objective,syn\n"
            "16,QuestionThenAnswer,55.5\xC2\xB1" "2.0\n"
            "16,SpanSelection,11.0\xC2\xB1" "1.0\n"
            "16,AnswerThenQuestion,42.0\xC2\xB1" "2.0\n"
            "128,QuestionThenAnswer,70.0\xC2\xB1" "0.0\n"
            "128,SpanSelection,61.0\xC2\xB1" "1.0\n"
            "128,AnswerThenQuestion,72.0\xC2\xB1" "0.0\n");
}

TEST(Report, FailedCellRendersDashWithFootnote) {
  auto r = sample_report();
  r.rows[1] = make_row("syn", 16, K::kSpanSelection, {10.0, 12.0}, true);
  EXPECT_TRUE(r.rows[1].failed);
  EXPECT_EQ(r.rows[1].failure, "boom");
  const auto table = render_table(r);
  EXPECT_NE(table.find("16,SpanSelection,\xE2\x80\x94\n"), std::string::npos);
  EXPECT_NE(table.find("\n# \xE2\x80\x94"), std::string::npos);
  EXPECT_EQ(render_table(sample_report()).find("# "), std::string::npos);
}

TEST(Report, JsonRoundTripPreservesTable) {
  const auto r = sample_report();
  const auto back = report_from_json(report_to_json(r));
  EXPECT_EQ(render_table(back), render_table(r));
  EXPECT_EQ(render_series(back), render_series(r));
  EXPECT_EQ(back.config_hash, r.config_hash);
  EXPECT_EQ(back.master_seed, r.master_seed);
  EXPECT_THROW(report_from_json(nlohmann::json{{"rows", 3}}), FormatError);
}

TEST(Report, SeriesSortedBySize) {
  const auto series = render_series(sample_report());
  std::istringstream in(series);
  std::string header, first, second;
  std::getline(in, header);
  EXPECT_EQ(header, "dataset,objective,train_size,f1_mean,f1_std,em_mean,em_std");
  std::getline(in, first);
  std::getline(in, second);
  EXPECT_EQ(first, "syn,SpanSelection,16,11.0000,1.0000,5.5000,0.5000");
  EXPECT_EQ(second, "syn,SpanSelection,128,61.0000,1.0000,30.5000,0.5000");
}

TEST(Report, EmitIsByteIdentical) {
  const auto dir = temp_dir("emit");
  const auto files = emit_report(sample_report(), dir);
  const auto table = read_file(files.table_path);
  const auto series = read_file(files.series_path);
  const auto json = read_file(files.json_path);
  emit_report(sample_report(), dir);
  EXPECT_EQ(read_file(files.table_path), table);
  EXPECT_EQ(read_file(files.series_path), series);
  EXPECT_EQ(read_file(files.json_path), json);
  const auto parsed = nlohmann::json::parse(json);
  EXPECT_EQ(parsed["findings"]["syn"]["gap_trend"], "narrowing");
  std::filesystem::remove_all(dir);
}

TEST(Report, EmitErrors) {
  EXPECT_THROW(emit_report(ExperimentReport{}, temp_dir("empty")), ContractError);
  const auto blocker = temp_dir("blocker");
  { std::ofstream(blocker) << "x"; }
  EXPECT_THROW(emit_report(sample_report(), blocker + "/sub"), IoError);
  std::filesystem::remove(blocker);
}

TEST(Findings, GapTrendAndOrdering) {
  const auto f = ablation_findings(sample_report(), "syn");
  EXPECT_DOUBLE_EQ(f.aligned_gap.at(16), 44.5);
  EXPECT_DOUBLE_EQ(f.aligned_gap.at(128), 9.0);
  EXPECT_EQ(f.gap_trend, "narrowing");
  EXPECT_TRUE(f.question_first_not_worse.at(16));
  EXPECT_FALSE(f.question_first_not_worse.at(128));
  auto r = sample_report();
  r.rows[3] = make_row("syn", 128, K::kQuestionThenAnswer, {110.0, 111.0});
  EXPECT_EQ(ablation_findings(r, "syn").gap_trend, "widening");
  r.rows[3] = make_row("syn", 128, K::kQuestionThenAnswer, {105.0, 106.0});
  EXPECT_EQ(ablation_findings(r, "syn").gap_trend, "persisting");
  EXPECT_EQ(ablation_findings(r, "other").gap_trend, "n/a");
  r.rows[0] = make_row("syn", 16, K::kQuestionThenAnswer, {0.0, 0.0});
  r.rows[3] = make_row("syn", 128, K::kQuestionThenAnswer, {55.0, 55.0});
  EXPECT_EQ(ablation_findings(r, "syn").gap_trend, "narrowing");
  r.rows[3] = make_row("syn", 128, K::kQuestionThenAnswer, {40.0, 40.0});
  EXPECT_EQ(ablation_findings(r, "syn").gap_trend, "widening");
}

TEST(Finetune, BudgetAndEarliestArgmaxSelection) {
  const auto& task = tiny_task();
  const auto split = sample_fewshot(task.data.qa, 8, 4, 20);
  TrainConfig c;
  c.objective = K::kAnswerOnlyGeneration;
  c.learning_rate = 3e-3;
  c.batch_size = 3;
  c.max_epochs = 5;  // 5 * ceil(8 / 3) = 15
  c.max_steps = 12;
  c.eval_every = 4;
  c.seed = 11;
  c.model = tiny_model();
  const auto r = run_finetune(split, c, task.vocab, nullptr);
  EXPECT_EQ(r.steps_run, 15);
  EXPECT_EQ(r.train_losses.size(), 15u);
  std::vector<long> steps;
  for (const auto& p : r.history) steps.push_back(p.step);
  EXPECT_EQ(steps, (std::vector<long>{4, 8, 12, 15}));
  auto best = std::max_element(r.history.begin(), r.history.end(),
                               [](const DevPoint& a, const DevPoint& b) { return a.f1 < b.f1; });
  EXPECT_EQ(r.best_step, best->step);
  EXPECT_EQ(r.best_dev_f1, best->f1);
  PromptLimits limits;
  limits.max_input_len = r.max_input_len;
  limits.max_target_len = r.model.config().max_positions;
  EXPECT_DOUBLE_EQ(evaluate(r.model, task.vocab, split.dev, c.objective, limits).scores.f1,
                   r.best_dev_f1);
}

TEST(Finetune, SameSeedSameHistory) {
  const auto& task = tiny_task();
  const auto split = sample_fewshot(task.data.qa, 4, 2, 10);
  TrainConfig c;
  c.objective = K::kSpanSelection;
  c.learning_rate = 1e-3;
  c.batch_size = 2;
  c.max_epochs = 0;
  c.max_steps = 6;
  c.eval_every = 3;
  c.model = tiny_model();
  const auto a = run_finetune(split, c, task.vocab, nullptr);
  const auto b = run_finetune(split, c, task.vocab, nullptr);
  EXPECT_EQ(a.train_losses, b.train_losses);
  EXPECT_EQ(a.model.snapshot(), b.model.snapshot());
  EXPECT_TRUE(a.model.config().span_head);
}

TEST(Finetune, RejectsBadInputs) {
  const auto& task = tiny_task();
  FewshotSplit empty;
  TrainConfig c;
  c.model = tiny_model();
  EXPECT_THROW(run_finetune(empty, c, task.vocab, nullptr), ContractError);
  auto split = sample_fewshot(task.data.qa, 4, 2, 10);
  c.batch_size = 0;
  EXPECT_THROW(run_finetune(split, c, task.vocab, nullptr), ConfigError);
}

TEST(Pretrain, HoldoutLossDrops) {
  const auto& task = tiny_task();
  PretrainConfig p;
  p.steps = 60;
  p.batch_size = 4;
  p.learning_rate = 3e-3;
  p.holdout_docs = 8;
  p.log_every = 20;
  const auto r = run_pretrain(task.data.corpus, task.vocab, tiny_model(), p, 5);
  EXPECT_LT(r.final_holdout_loss, r.initial_holdout_loss);
  ASSERT_EQ(r.loss_curve.size(), 4u);
  EXPECT_EQ(r.loss_curve.front().step, 1);
  EXPECT_EQ(r.loss_curve.back().step, 60);
  EXPECT_FALSE(r.model.config().span_head);
}

TEST(Experiment, FailedCellsDoNotAbortGrid) {
  const auto& task = tiny_task();
  auto config = preset_config("desk");
  config.model = tiny_model();
  config.finetune.max_steps = 2;
  config.finetune.eval_every = 0;
  config.experiment.sizes = {4, 100};  // 100 needs 201 examples
  config.experiment.objectives = {K::kAnswerOnlyGeneration, K::kSpanSelection};
  config.experiment.n_seeds = 2;
  config.experiment.test_cap = 10;
  config.experiment.jobs = 2;
  const std::vector<NamedDataset> datasets = {{"syn", task.data.qa}};
  const auto report = run_experiment(datasets, config, task.vocab, nullptr);
  ASSERT_EQ(report.rows.size(), 4u);
  for (const auto& row : report.rows) {
    EXPECT_EQ(row.failed, row.train_size == 100);
    if (row.failed) { EXPECT_NE(row.failure.find("need at least"), std::string::npos); }
    if (!row.failed) { EXPECT_EQ(row.f1.n_runs, 2); }
  }
  EXPECT_EQ(report.rows[0].runs[0].split_seed, report.rows[1].runs[0].split_seed);
  const auto table = render_table(report);
  EXPECT_NE(table.find("# \xE2\x80\x94"), std::string::npos);

  config.experiment.jobs = 1;
  const auto serial = run_experiment(datasets, config, task.vocab, nullptr);
  EXPECT_EQ(render_table(serial), table);
}

}  // namespace
}  // namespace fsqa
