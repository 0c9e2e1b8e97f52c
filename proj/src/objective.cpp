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

#include "fdn/objective.hpp"

#include <cmath>

#include "fdn/conditioning.hpp"
#include "fdn/errors.hpp"

namespace fdn::objective {

namespace {

constexpr double kUnitTolerance = 1e-4;

void require_unit_rows(const DenseArray& a, const char* what) {
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double n = l2_norm(a.row_span(r));
    if (std::abs(n - 1.0) > kUnitTolerance) {
      throw ContractError(std::string("class_posterior: ") + what + " row " + std::to_string(r) +
                          " has norm " + std::to_string(n) + ", expected unit length");
    }
  }
}

}  // namespace

ad::Var class_posterior(ad::Var image, ad::Var text, std::size_t n_classes, double tau) {
  if (!(tau > 0.0)) throw ParameterError("temperature must be positive");
  const std::size_t B = image.rows();
  if (n_classes == 0 || text.rows() != B * n_classes || text.cols() != image.cols()) {
    throw DimensionError("class_posterior: expected " + std::to_string(B * n_classes) + " x " +
                         std::to_string(image.cols()) + " text rows, got " +
                         shape_string(text.value().shape()));
  }
  require_unit_rows(image.value(), "image");
  require_unit_rows(text.value(), "text");
  std::vector<std::size_t> rep(B * n_classes);
  for (std::size_t i = 0; i < rep.size(); ++i) rep[i] = i / n_classes;
  auto sims = ad::row_sum(ad::mul(ad::gather_rows(image, std::move(rep)), text));
  return ad::softmax_rows(ad::scale(ad::reshape(sims, B, n_classes), 1.0 / tau));
}

ad::Var loss_ce(ad::Var posterior, const std::vector<std::size_t>& labels) {
  const std::size_t B = posterior.rows(), C = posterior.cols();
  if (labels.size() != B) {
    throw DimensionError("loss_ce: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(B) + " rows");
  }
  for (std::size_t y : labels) {
    if (y >= C) {
      throw IndexError("label " + std::to_string(y) + " outside " + std::to_string(C) +
                       " classes");
    }
  }
  for (std::size_t r = 0; r < B; ++r) {
    double total = 0.0;
    for (double v : posterior.value().row_span(r)) total += v;
    if (std::abs(total - 1.0) > 1e-6) {
      throw ContractError("loss_ce: posterior row " + std::to_string(r) + " sums to " +
                          std::to_string(total));
    }
  }
  return ad::scale(ad::mean(ad::log_clamped(ad::pick_per_row(posterior, labels), 1e-12)), -1.0);
}

ad::Var loss_rpa(ad::Var learned, const DenseArray& reference) {
  const std::size_t nc = learned.rows(), d = learned.cols();
  if (reference.cols() != d || reference.rows() == 0 || reference.rows() % nc != 0) {
    throw DimensionError("loss_rpa: reference " + shape_string(reference.shape()) +
                         " does not hold Z blocks of " + std::to_string(nc) + " x " +
                         std::to_string(d));
  }
  const std::size_t z = reference.rows() / nc;
  std::vector<std::size_t> tile(z * nc);
  for (std::size_t i = 0; i < tile.size(); ++i) tile[i] = i % nc;
  auto diff = ad::sub(ad::gather_rows(learned, std::move(tile)),
                      learned.tape().constant_ref(reference));
  return ad::scale(ad::sum(ad::mul(diff, diff)), 1.0 / static_cast<double>(z * nc));
}

ad::Var loss_total(ad::Var ce, ad::Var rpa, double rpa_weight) {
  if (rpa_weight < 0.0) throw ParameterError("RPA weight must be non-negative");
  return ad::add(ce, ad::scale(rpa, rpa_weight));
}

std::size_t predict(std::span<const double> row) {
  if (row.empty()) throw ContractError("predict on an empty posterior row");
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

ForwardResult model_forward(ad::Tape& tape, const ad::ParamStore& params,
                            const ModelContext& ctx, ad::Var features,
                            const std::vector<std::size_t>& class_ids,
                            const DenseArray* context_override) {
  if (ctx.encoder == nullptr) throw StateError("model context has no text encoder");
  ForwardResult r;
  r.psi = conditioning::pif_pipeline(tape, params, features, ctx.heads, ctx.filter);
  r.upsilon = prompting::metanet_forward(tape, params, r.psi);
  auto batch = prompting::assemble_prompts(tape, params, r.upsilon, ctx.class_tokens, class_ids,
                                           context_override);
  r.text = prompting::frozen_text_encode(*ctx.encoder, batch);
  r.posterior = class_posterior(features, r.text, class_ids.size(), ctx.tau);
  return r;
}

ad::Var learned_class_embeddings(const ad::ParamStore& params, const ModelContext& ctx,
                                 ad::Var upsilon, const std::vector<std::size_t>& class_ids) {
  auto batch = prompting::assemble_prompts(upsilon.tape(), params, ad::col_mean(upsilon),
                                           ctx.class_tokens, class_ids);
  return prompting::frozen_text_encode(*ctx.encoder, batch);
}

LossBreakdown training_loss(ad::Tape& tape, const ad::ParamStore& params,
                            const ModelContext& ctx, const LossConfig& loss,
                            const DenseArray& features, const std::vector<std::size_t>& labels,
                            const std::vector<std::size_t>& class_ids,
                            const DenseArray& reference) {
  LossBreakdown out;
  out.forward = model_forward(tape, params, ctx, tape.constant_ref(features), class_ids);
  out.ce = loss_ce(out.forward.posterior, labels);
  if (loss.rpa_weight > 0.0) {
    auto learned = learned_class_embeddings(params, ctx, out.forward.upsilon, class_ids);
    out.rpa = loss_rpa(learned, reference);
    out.total = loss_total(out.ce, out.rpa, loss.rpa_weight);
  } else {
    out.total = out.ce;
  }
  return out;
}

}  // namespace fdn::objective
