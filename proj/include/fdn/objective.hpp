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

// Similarity head, class posterior, cross-entropy and prompt-alignment
// losses, and the full forward pass from frozen features to posteriors.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fdn/autodiff.hpp"
#include "fdn/prompting.hpp"
#include "fdn/spectral.hpp"

namespace fdn::objective {

struct LossConfig {
  double tau = 0.01;
  double rpa_weight = 0.5;  // Lambda
};

/// Row-softmax of cosine / tau. `text` holds B*C unit rows, sample-major:
/// row b*C + j is class j for sample b. ContractError when a row is not
/// unit length within 1e-4.
ad::Var class_posterior(ad::Var image, ad::Var text, std::size_t n_classes, double tau);

/// Mean over rows of -log(max(p[label], 1e-12)). IndexError on bad labels.
ad::Var loss_ce(ad::Var posterior, const std::vector<std::size_t>& labels);

/// Mean over Z and N_c of ||learned_i - reference_{z,i}||^2. `reference`
/// stores Z blocks of N_c rows.
ad::Var loss_rpa(ad::Var learned, const DenseArray& reference);

ad::Var loss_total(ad::Var ce, ad::Var rpa, double rpa_weight);

/// Argmax with ties broken toward the lowest index.
std::size_t predict(std::span<const double> row);

/// Everything the forward pass needs besides the learnable parameters.
struct ModelContext {
  std::size_t heads = 4;
  spectral::SpectralFilterSpec filter;
  const prompting::FrozenTextEncoder* encoder = nullptr;
  DenseArray class_tokens;  // all dataset classes, n_classes x e
  double tau = 0.01;
};

struct ForwardResult {
  ad::Var psi;
  ad::Var upsilon;
  ad::Var text;       // (B*C) x d
  ad::Var posterior;  // B x C
};

/// pif_pipeline -> metanet -> prompts for each class in `class_ids` ->
/// frozen text encoder -> class_posterior. `context_override` swaps the
/// learned context for fixed tokens (held-out template evaluation).
ForwardResult model_forward(ad::Tape& tape, const ad::ParamStore& params,
                            const ModelContext& ctx, ad::Var features,
                            const std::vector<std::size_t>& class_ids,
                            const DenseArray* context_override = nullptr);

/// Learned class embeddings c_i with upsilon averaged over the batch,
/// N_c x d (one row per entry of class_ids).
ad::Var learned_class_embeddings(const ad::ParamStore& params, const ModelContext& ctx,
                                 ad::Var upsilon, const std::vector<std::size_t>& class_ids);

struct LossBreakdown {
  ad::Var total;
  ad::Var ce;
  ad::Var rpa;  // invalid when rpa_weight == 0
  ForwardResult forward;
};

/// Training objective on one batch. `labels` index into `class_ids`;
/// `reference` is the Z x N_c bank restricted to `class_ids`.
LossBreakdown training_loss(ad::Tape& tape, const ad::ParamStore& params,
                            const ModelContext& ctx, const LossConfig& loss,
                            const DenseArray& features, const std::vector<std::size_t>& labels,
                            const std::vector<std::size_t>& class_ids,
                            const DenseArray& reference);

}  // namespace fdn::objective
