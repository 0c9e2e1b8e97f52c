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

#include "fdn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iostream>
#include <numbers>
#include <sstream>

#include "binary_io.hpp"
#include "fdn/conditioning.hpp"
#include "fdn/errors.hpp"
#include "fdn/random.hpp"
#include "fdn/spectral.hpp"

namespace fdn::train {

namespace {

constexpr char kMagic[4] = {'F', 'D', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

std::string param_norms(const ad::ParamStore& params) {
  std::ostringstream os;
  bool first = true;
  for (const auto& name : params.learnable_names()) {
    os << (first ? "" : ", ") << name << "=" << l2_norm(params.get(name).data());
    first = false;
  }
  return os.str();
}

}  // namespace

std::string schedule_name(Schedule s) { return s == Schedule::cosine ? "cosine" : "constant"; }

Schedule parse_schedule(const std::string& name) {
  if (name == "cosine") return Schedule::cosine;
  if (name == "constant") return Schedule::constant;
  throw ParameterError("unknown schedule \"" + name + "\" (expected cosine or constant)");
}

void validate(const TrainConfig& cfg) {
  if (cfg.epochs == 0) throw ParameterError("epochs must be at least 1");
  if (cfg.batch_size == 0) throw ParameterError("batch_size must be at least 1");
  if (!(cfg.base_lr > 0.0) || !(cfg.warmup_lr > 0.0)) {
    throw ParameterError("learning rates must be positive");
  }
  if (cfg.clip_norm < 0.0) throw ParameterError("clip_norm must be non-negative");
}

std::size_t resolve_k(const ModelConfig& cfg, std::size_t d) {
  if (cfg.k != 0) return cfg.k;
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(350.0 * static_cast<double>(d) / 512.0)), 1, d);
}

DenseArray Model::reference_for(const std::vector<std::size_t>& class_ids) const {
  const std::size_t d = reference.cols();
  DenseArray out = DenseArray::matrix(reference_z * class_ids.size(), d);
  for (std::size_t z = 0; z < reference_z; ++z)
    for (std::size_t j = 0; j < class_ids.size(); ++j) {
      if (class_ids[j] >= n_classes) throw LookupError("class id " + std::to_string(class_ids[j]) + " out of range");
      auto src = reference.row_span(z * n_classes + class_ids[j]);
      std::copy(src.begin(), src.end(), out.row_span(z * class_ids.size() + j).begin());
    }
  return out;
}

Model build_model(const data::EmbeddingDataset& ds, const ModelConfig& cfg,
                  const Ablations& ablations, std::uint64_t seed) {
  const std::size_t d = ds.d;
  Model model;
  prompting::TextEncoderConfig enc;
  enc.e = cfg.text_width == 0 ? d : cfg.text_width;
  enc.d = d;
  enc.layers = cfg.text_layers;
  enc.seed = cfg.text_seed;
  model.encoder = std::make_unique<prompting::FrozenTextEncoder>(enc);

  Rng rng(derive_seed(seed, "init"));
  conditioning::ConditioningConfig cc;
  cc.d = d;
  cc.heads = cfg.heads;
  cc.lambda = ablations.no_fusion ? 0.0 : cfg.lambda;
  cc.learnable_lambda = cfg.learnable_lambda && !ablations.no_fusion;
  conditioning::init_params(model.params, cc, rng);

  prompting::PromptConfig pc;
  pc.m = cfg.context_length;
  pc.d = d;
  pc.e = enc.e;
  pc.context_init = cfg.context_init;
  prompting::init_params(model.params, pc, *model.encoder, rng);

  model.n_classes = ds.class_names.size();
  model.ctx.heads = cfg.heads;
  model.ctx.filter = spectral::build_lowpass_mask(d, ablations.no_ffb ? d : resolve_k(cfg, d));
  model.ctx.encoder = model.encoder.get();
  model.ctx.class_tokens = prompting::class_token_matrix(*model.encoder, ds.class_names);

  if (ds.has_text_bank()) {
    model.reference = ds.text_bank;
    model.reference_z = ds.text_bank_z;
  } else {
    if (cfg.templates.empty()) throw ParameterError("no reference templates configured");
    auto bank = prompting::reference_prompt_embeddings(*model.encoder, ds.class_names, cfg.templates);
    model.reference = std::move(bank.embeddings);
    model.reference_z = bank.z;
  }
  return model;
}

double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  if (epoch >= cfg.epochs) {
    throw ParameterError("epoch " + std::to_string(epoch) + " outside [0, " +
                         std::to_string(cfg.epochs) + ")");
  }
  if (epoch < cfg.warmup_epochs) return cfg.warmup_lr;
  if (cfg.schedule == Schedule::constant) return cfg.base_lr;
  const double span = static_cast<double>(cfg.epochs - cfg.warmup_epochs);
  const double phase = static_cast<double>(epoch - cfg.warmup_epochs) / span;
  return cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * phase));
}

void sgd_step(ad::ParamStore& params, const ad::Gradients& grads, double rate) {
  for (const auto& name : params.learnable_names()) {
    auto it = grads.find(name);
    if (it == grads.end()) throw ContractError("no gradient for learnable parameter " + name);
    auto& p = params.get_mut(name);
    if (it->second.shape() != p.shape()) {
      throw ContractError("gradient for " + name + " has shape " + shape_string(it->second.shape()) +
                          ", parameter has " + shape_string(p.shape()));
    }
    auto& pv = p.data();
    const auto& gv = it->second.data();
    for (std::size_t i = 0; i < pv.size(); ++i) pv[i] -= rate * gv[i];
  }
}

double clip_gradients(ad::Gradients& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads)
    for (double v : g.data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& [name, g] : grads)
      for (double& v : g.data()) v *= f;
  }
  return norm;
}

Checkpoint make_checkpoint(const ad::ParamStore& params, const ConfigHash& hash,
                           std::uint64_t seed, std::uint64_t epoch, std::uint64_t step) {
  Checkpoint c;
  c.config_hash = hash;
  c.seed = seed;
  c.epoch = epoch;
  c.step = step;
  for (const auto& name : params.learnable_names()) {
    c.names.push_back(name);
    c.arrays.push_back(params.get(name));
  }
  return c;
}

void restore(ad::ParamStore& params, const Checkpoint& ckpt) {
  for (std::size_t i = 0; i < ckpt.names.size(); ++i) {
    const auto& name = ckpt.names[i];
    if (!params.contains(name)) throw StateError("checkpoint array " + name + " is not a model parameter");
    auto& p = params.get_mut(name);
    if (p.shape() != ckpt.arrays[i].shape()) {
      throw StateError("checkpoint array " + name + " has shape " + shape_string(ckpt.arrays[i].shape()) +
                       ", model expects " + shape_string(p.shape()));
    }
  }
  for (const auto& name : params.learnable_names()) {
    if (std::find(ckpt.names.begin(), ckpt.names.end(), name) == ckpt.names.end()) {
      throw StateError("checkpoint lacks learnable parameter " + name);
    }
  }
  for (std::size_t i = 0; i < ckpt.names.size(); ++i) params.get_mut(ckpt.names[i]) = ckpt.arrays[i];
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  detail::Writer w;
  w.bytes(kMagic, 4);
  w.le(kCheckpointVersion);
  w.bytes(ckpt.config_hash.data(), ckpt.config_hash.size());
  w.le(ckpt.seed);
  w.le(ckpt.epoch);
  w.le(ckpt.step);
  w.le(static_cast<std::uint32_t>(ckpt.names.size()));
  for (std::size_t i = 0; i < ckpt.names.size(); ++i) {
    const auto& a = ckpt.arrays[i];
    w.name(ckpt.names[i]);
    w.le(static_cast<std::uint32_t>(a.rows()));
    w.le(static_cast<std::uint32_t>(a.cols()));
    for (double v : a.data()) w.f64(v);
  }
  return w.take();
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::Reader r(bytes);
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw MagicError("not a checkpoint (bad magic)");
  r.le<std::uint32_t>("magic");
  const auto version = r.le<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw VersionError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  r.need(32, "config hash");
  for (auto& b : c.config_hash) b = r.le<std::uint8_t>("config hash");
  c.seed = r.le<std::uint64_t>("seed");
  c.epoch = r.le<std::uint64_t>("epoch");
  c.step = r.le<std::uint64_t>("step");
  const auto count = r.le<std::uint32_t>("array count");
  for (std::uint32_t i = 0; i < count; ++i) {
    c.names.push_back(r.name("array name"));
    const auto rows = r.le<std::uint32_t>("array rows");
    const auto cols = r.le<std::uint32_t>("array cols");
    r.need(static_cast<std::size_t>(rows) * cols * 8, "array values");
    DenseArray a = DenseArray::matrix(rows, cols);
    for (double& v : a.data()) {
      v = r.f64("array values");
      if (!std::isfinite(v)) throw NonFiniteError("non-finite value in checkpoint array " + c.names.back());
    }
    c.arrays.push_back(std::move(a));
  }
  if (r.remaining() != 0) throw FormatError(std::to_string(r.remaining()) + " trailing bytes in checkpoint");
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  detail::write_file(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(detail::read_file(path, "checkpoint"));
}

TrainResult train_run(const data::EmbeddingDataset& ds, const data::Split& split,
                      const TrainConfig& cfg, const objective::LossConfig& loss_cfg,
                      const ModelConfig& model_cfg, const Ablations& ablations,
                      const RunOptions& options) {
  validate(cfg);
  if (split.train_ids.empty()) throw ParameterError("split has no training records");
  const auto& classes = split.spec.seen_classes;
  std::vector<std::size_t> local(ds.class_names.size(), classes.size());
  for (std::size_t j = 0; j < classes.size(); ++j) local[classes[j]] = j;

  TrainResult result{build_model(ds, model_cfg, ablations, cfg.seed), {}, {}, {}, {}};
  Model& model = result.model;
  model.ctx.tau = loss_cfg.tau;
  objective::LossConfig loss = loss_cfg;
  if (ablations.no_rpa) loss.rpa_weight = 0.0;
  const DenseArray reference = model.reference_for(classes);

  std::size_t epoch = 0;
  std::uint64_t step = 0;
  if (options.resume != nullptr) {
    if (options.resume->seed != cfg.seed) throw StateError("checkpoint seed differs from the run seed");
    restore(model.params, *options.resume);
    epoch = options.resume->epoch;
    step = options.resume->step;
  }
  const std::size_t stop = options.stop_epoch == 0 ? cfg.epochs : std::min(options.stop_epoch, cfg.epochs);
  const std::size_t d = ds.d;

  for (; epoch < stop; ++epoch) {
    std::vector<std::size_t> order = split.train_ids;
    Rng rng(derive_seed(derive_seed(cfg.seed, "shuffle"), static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    const double rate = lr_at(epoch, cfg);
    double sum_total = 0.0, sum_ce = 0.0, sum_rpa = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batches) {
      const std::size_t b = std::min(cfg.batch_size, order.size() - start);
      DenseArray x = DenseArray::matrix(b, d);
      std::vector<std::size_t> labels(b);
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t id = order[start + i];
        auto src = ds.features.row_span(id);
        std::copy(src.begin(), src.end(), x.row_span(i).begin());
        labels[i] = local[ds.labels[id]];
        if (labels[i] == classes.size()) throw ContractError("training record of an unseen class");
      }
      try {
        ad::Tape tape;
        auto lb = objective::training_loss(tape, model.params, model.ctx, loss, x, labels, classes, reference);
        const double total = lb.total.value().item();
        if (!std::isfinite(total)) throw NumericError("loss is " + std::to_string(total));
        sum_total += total;
        sum_ce += lb.ce.value().item();
        if (lb.rpa.valid()) sum_rpa += lb.rpa.value().item();
        auto grads = tape.backward(lb.total);
        clip_gradients(grads, cfg.clip_norm);
        sgd_step(model.params, grads, rate);
        if (model.params.learnable(conditioning::kLambda)) conditioning::clamp_lambda(model.params);
        ++step;
      } catch (const NumericError& e) {
        throw NumericError("non-finite value during training at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(batches) + ": " + e.what() +
                           "; parameter norms: " + param_norms(model.params));
      }
    }
    const double nb = static_cast<double>(batches);
    result.loss_trace.push_back(sum_total / nb);
    result.ce_trace.push_back(sum_ce / nb);
    result.rpa_trace.push_back(sum_rpa / nb);
    if (options.verbose) {
      std::cerr << "epoch " << epoch << " lr " << rate << " loss " << sum_total / nb << " ce "
                << sum_ce / nb << " rpa " << sum_rpa / nb << "\n";
    }
  }
  result.checkpoint = make_checkpoint(model.params, options.config_hash, cfg.seed, epoch, step);
  return result;
}

}  // namespace fdn::train
