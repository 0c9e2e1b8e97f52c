// Copyright 2026 The fdn Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Experiment configuration files, multi-seed runs, reports and the k sweep.
//
// Config files are INI: `key = value` lines under `[section]` headers, `;`
// or `#` comments. Overrides use dotted keys, e.g. `train.epochs=30`.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "fdn/dataset.hpp"
#include "fdn/evaluation.hpp"
#include "fdn/objective.hpp"
#include "fdn/trainer.hpp"

namespace fdn::exp {

struct ExperimentConfig {
  // [data]
  std::string data_path;          // empty -> generate from [synth]
  data::Task task = data::Task::b2n;
  std::size_t shots = 16;
  std::size_t source_domain = 0;
  // [synth]
  data::SynthConfig synth;
  // [model], [loss], [train], [ablation]
  train::ModelConfig model;
  objective::LossConfig loss;
  train::TrainConfig train;
  train::Ablations ablations;
  // [eval]
  std::size_t eval_batch = 1;
  std::size_t seeds = 3;          // runs use train.seed, train.seed + 1, ...
  std::string heldout_context;    // phrase replacing the learned context
  // [sweep]
  std::vector<std::size_t> sweep_k{8, 16, 32, 48, 64, 96, 128};
};

/// Every resolved field as sorted `section.key = value` lines. With
/// `training_only` the eval.* and sweep.* keys are left out.
std::string canonical_text(const ExperimentConfig& cfg, bool training_only = false);
/// SHA-256 of canonical_text; reports carry the full hash, checkpoints the
/// training-only one so a checkpoint can be evaluated under other eval
/// settings.
train::ConfigHash config_hash(const ExperimentConfig& cfg, bool training_only = false);
std::string hex(const train::ConfigHash& h);

/// Applies one `section.key=value` assignment. ParameterError on unknown
/// keys or unparsable values.
void apply_override(ExperimentConfig& cfg, const std::string& assignment);

/// Reads an INI file (DataError when missing or malformed), then FDN_SEED
/// from the environment, then `overrides` in order.
ExperimentConfig load_config(const std::filesystem::path& path,
                             const std::vector<std::string>& overrides = {});
/// Defaults, then FDN_SEED, then overrides.
ExperimentConfig default_config(const std::vector<std::string>& overrides = {});

/// Reads data.path, or generates the synthetic dataset.
data::EmbeddingDataset load_dataset(const ExperimentConfig& cfg);

struct SeedRun {
  std::uint64_t seed = 0;
  std::vector<double> loss_trace;
  eval::SplitMetrics metrics;
  train::Checkpoint checkpoint;
};

/// One training run plus evaluation for `seed` (split and init both seeded
/// from it).
SeedRun run_seed(const ExperimentConfig& cfg, const data::EmbeddingDataset& ds,
                 std::uint64_t seed, bool verbose = false);

/// Rebuilds the model of `cfg`/`seed`, restores `ckpt` and evaluates.
eval::SplitMetrics evaluate_checkpoint(const ExperimentConfig& cfg,
                                       const data::EmbeddingDataset& ds,
                                       const train::Checkpoint& ckpt);

struct MetricsReport {
  std::string config_hash;
  std::string task;
  train::Ablations ablations;
  std::size_t k = 0;
  std::string schedule;
  std::vector<SeedRun> runs;

  double mean_metric() const;
  double std_metric() const;
  /// Mean over seeds of one eval set's accuracy.
  double mean_accuracy(const std::string& set_name) const;
};

MetricsReport run_experiment(const ExperimentConfig& cfg, const data::EmbeddingDataset& ds,
                             bool verbose = false);

void write_report_text(std::ostream& os, const MetricsReport& r);
void write_report_kv(std::ostream& os, const MetricsReport& r);

struct SweepRow {
  std::size_t k = 0;
  double mean = 0.0;
  double std = 0.0;
};

/// One run per (k, seed); the task metric averaged per k. `jobs` > 1 runs
/// independent trainings on worker threads.
std::vector<SweepRow> k_sensitivity_sweep(const ExperimentConfig& cfg,
                                          const data::EmbeddingDataset& ds,
                                          const std::vector<std::size_t>& k_list,
                                          std::size_t jobs = 1);

/// Header `k,mean,std`, one row per k.
void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows);

/// Central-difference audit of the full training loss on a small model:
/// feature width d, B=3, M=2, C=4, learnable lambda, Lambda=0.5.
ad::GradCheckReport full_loss_gradcheck(std::size_t d, std::size_t k, std::uint64_t seed,
                                        double h = 1e-5);

}  // namespace fdn::exp
