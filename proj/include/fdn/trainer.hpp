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

// Model assembly, the learning-rate schedule, SGD, checkpoints and the
// training loop.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "fdn/autodiff.hpp"
#include "fdn/dataset.hpp"
#include "fdn/objective.hpp"
#include "fdn/prompting.hpp"

namespace fdn::train {

enum class Schedule { cosine, constant };

std::string schedule_name(Schedule s);
Schedule parse_schedule(const std::string& name);

struct TrainConfig {
  std::size_t epochs = 50;
  double base_lr = 2e-3;
  double warmup_lr = 1e-5;
  std::size_t warmup_epochs = 1;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  Schedule schedule = Schedule::cosine;
  double clip_norm = 10.0;  // global gradient L2 norm; 0 disables
};

/// ParameterError on non-positive rates, zero batch size or zero epochs.
void validate(const TrainConfig& cfg);

struct ModelConfig {
  std::size_t k = 0;                // retained bins; 0 -> round(350 * d / 512)
  std::size_t context_length = 4;   // M
  std::size_t heads = 4;
  double lambda = 0.3;
  bool learnable_lambda = false;
  std::size_t text_width = 0;       // e; 0 -> d
  std::size_t text_layers = 2;
  std::uint64_t text_seed = 0;
  std::string context_init = prompting::kDefaultContextInit;
  std::vector<std::string> templates = prompting::default_templates();
};

/// k used for a given feature width.
std::size_t resolve_k(const ModelConfig& cfg, std::size_t d);

struct Ablations {
  bool no_ffb = false;     // k = d
  bool no_rpa = false;     // Lambda = 0
  bool no_fusion = false;  // lambda = 0
};

/// Frozen encoder, learnable weights and everything model_forward needs.
/// Move-only; `ctx.encoder` points into the owned encoder.
struct Model {
  std::unique_ptr<prompting::FrozenTextEncoder> encoder;
  ad::ParamStore params;
  objective::ModelContext ctx;
  DenseArray reference;        // (Z * n_classes) x d over all dataset classes
  std::size_t reference_z = 0;
  std::size_t n_classes = 0;

  /// Z blocks restricted to `class_ids`, (Z * |class_ids|) x d.
  DenseArray reference_for(const std::vector<std::size_t>& class_ids) const;
};

/// Deterministic in (dataset metadata, cfg, ablations, seed). The dataset's
/// text bank, when present, replaces the encoder-derived references.
Model build_model(const data::EmbeddingDataset& ds, const ModelConfig& cfg,
                  const Ablations& ablations, std::uint64_t seed);

/// epoch 0..warmup_epochs-1 -> warmup_lr; afterwards cosine decay from
/// base_lr toward 0 over the remaining epochs, or constant base_lr.
double lr_at(std::size_t epoch, const TrainConfig& cfg);

/// p <- p - rate * g for every learnable array. ContractError when a
/// learnable array has no gradient.
void sgd_step(ad::ParamStore& params, const ad::Gradients& grads, double rate);

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_gradients(ad::Gradients& grads, double max_norm);

using ConfigHash = std::array<std::uint8_t, 32>;

struct Checkpoint {
  ConfigHash config_hash{};
  std::uint64_t seed = 0;
  std::uint64_t epoch = 0;   // epochs completed
  std::uint64_t step = 0;    // SGD steps taken
  std::vector<std::string> names;
  std::vector<DenseArray> arrays;  // learnable arrays, same order as names

  bool operator==(const Checkpoint&) const = default;
};

Checkpoint make_checkpoint(const ad::ParamStore& params, const ConfigHash& hash,
                           std::uint64_t seed, std::uint64_t epoch, std::uint64_t step);
/// Copies checkpoint arrays into `params`. StateError on unknown names,
/// shape mismatch or a learnable array missing from the checkpoint.
void restore(ad::ParamStore& params, const Checkpoint& ckpt);

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct RunOptions {
  const Checkpoint* resume = nullptr;  // continue from this state
  std::size_t stop_epoch = 0;          // 0 -> cfg.epochs
  ConfigHash config_hash{};
  bool verbose = false;                // per-epoch loss on stderr
};

struct TrainResult {
  Model model;
  Checkpoint checkpoint;
  std::vector<double> loss_trace;  // per-epoch mean total loss
  std::vector<double> ce_trace;
  std::vector<double> rpa_trace;   // zeros when Lambda = 0
};

/// Epochs of shuffled mini-batches over split.train_ids (shuffle seeded
/// from (seed, epoch)); labels are positions in split.spec.seen_classes.
/// NumericError with epoch, batch and parameter norms on a non-finite loss.
TrainResult train_run(const data::EmbeddingDataset& ds, const data::Split& split,
                      const TrainConfig& cfg, const objective::LossConfig& loss_cfg,
                      const ModelConfig& model_cfg, const Ablations& ablations,
                      const RunOptions& options = {});

}  // namespace fdn::train
