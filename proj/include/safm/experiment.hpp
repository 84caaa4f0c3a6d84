#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "safm/decision.hpp"
#include "safm/evaluation.hpp"
#include "safm/tasks.hpp"
#include "safm/tuning.hpp"

namespace safm {

struct ExperimentConfig {
  std::string scenario = "similar";  // "similar" | "dissimilar"
  int n_tasks = 5;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::string method = "safm";  // finetune | adaptercl | acm | safm | safm_no_lw
  ModelConfig model;
  StreamOptions data;

  double alpha = 0.17;
  double beta = 0.02;
  int warmup_epochs = 3;
  int search_epochs = 3;
  int tune_epochs = 12;
  // Seeded LM pretraining over the full base vocabulary before the stream;
  // the desk-scale stand-in for starting from a pretrained language model.
  int pretrain_epochs = 30;
  int pretrain_n = 512;
  int batch_size = 8;
  double lr = 2e-3;
  double logit_lr = 2.5e-3;
  double weight_decay = 0.01;
  double replay_ratio = 0.2;
  double w_lw = 0.1;
  double w_gen = 0.25;
  std::vector<int> no_as_layers;  // empty => default mid-stack layer
  int gen_top_k = 5;              // pseudo-sample decoding
  double gen_temperature = 1.0;
  bool gen_greedy_answer = true;  // sample x, decode y greedily
  // After pretraining the backbone stays frozen while adapters train.
  // Finetune ignores this and keeps the backbone trainable throughout.
  bool freeze_backbone = true;
  std::string out_dir = "runs/out";

  void validate() const;
  std::string to_json() const;
  // Rejects unknown keys at every level.
  static ExperimentConfig from_json(const std::string& text);
  static ExperimentConfig load(const std::string& path);
};

struct SeedRunResult {
  EvalReport report;
  std::vector<DecisionLogRow> decisions;
  std::vector<TrainLogRow> train_log;
};

// One full continual-learning pass over the stream. When run_dir is
// non-empty, r_matrix.csv / decision_log.csv / train_log.csv / report.json
// and per-task checkpoints are written there (r_matrix.csv after every task).
SeedRunResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed,
                       const std::string& run_dir = "");

// Runs every seed into <out_dir>/seed_<s>/ and returns the reports.
std::vector<EvalReport> run_experiment(const ExperimentConfig& cfg);

// Aggregates every report.json found under `dir` (recursively): mean and
// stddev of Score/BWT per method, parameter counts, and per-layer selection
// frequencies from the decision logs. Writes report.md and report.csv in
// `dir` and returns the markdown.
std::string write_aggregate_report(const std::string& dir);

std::string decision_log_to_csv(const std::vector<DecisionLogRow>& rows);
std::string train_log_to_csv(const std::vector<TrainLogRow>& rows);

}  // namespace safm
