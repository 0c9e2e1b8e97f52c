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

// Processed image features: projection gate, batch self-attention, the
// lambda-scaled fusion with division residual, then the Fourier filter.
//
// All weights live in an ad::ParamStore under the names below so the
// trainer, checkpoints and gradient checks see one flat namespace.

#pragma once

#include <cstdint>
#include <string>

#include "fdn/autodiff.hpp"
#include "fdn/random.hpp"
#include "fdn/spectral.hpp"

namespace fdn::conditioning {

inline constexpr const char* kW1 = "cond.W1";
inline constexpr const char* kB1 = "cond.b1";
inline constexpr const char* kW2 = "cond.W2";
inline constexpr const char* kB2 = "cond.b2";
inline constexpr const char* kW3 = "cond.W3";
inline constexpr const char* kB3 = "cond.b3";
inline constexpr const char* kWq = "cond.attn.Wq";
inline constexpr const char* kWk = "cond.attn.Wk";
inline constexpr const char* kWv = "cond.attn.Wv";
inline constexpr const char* kWo = "cond.attn.Wo";
inline constexpr const char* kLambda = "cond.lambda";

struct ConditioningConfig {
  std::size_t d = 512;
  std::size_t heads = 4;
  double lambda = 0.3;
  bool learnable_lambda = false;
  double attn_init_std = 0.01;
};

/// Projection weights uniform(+-1/sqrt(fan_in)), biases zero; attention
/// projections identity + N(0, attn_init_std^2); lambda stored as a 1x1
/// array, learnable only when requested.
void init_params(ad::ParamStore& params, const ConditioningConfig& config, Rng& rng);

/// Attention projections set to exactly the identity (tests, A5).
void set_identity_attention(ad::ParamStore& params);

/// Clamps a learnable lambda back into [0, 2] after an update.
void clamp_lambda(ad::ParamStore& params);

/// ReLU(GELU(GELU(X W1 + b1) W2 + b2) W3 + b3) * X.
ad::Var projection_forward(ad::Tape& tape, const ad::ParamStore& params, ad::Var x);

/// Rows of X are the tokens; heads split the projected columns.
ad::Var self_attention_forward(ad::Tape& tape, const ad::ParamStore& params, ad::Var x,
                               std::size_t heads);

/// X_final = safe_div(lambda * X_proj * X_self, X) + X.
ad::Var fuse_features(ad::Var x, ad::Var x_proj, ad::Var x_self, ad::Var lambda);

struct PifTrace {
  ad::Var projected;
  ad::Var attended;
  ad::Var fused;
  ad::Var retained;  // psi
};

PifTrace pif_pipeline_trace(ad::Tape& tape, const ad::ParamStore& params, ad::Var x,
                            std::size_t heads, const spectral::SpectralFilterSpec& spec);

/// psi = ffb(fuse(X, projection(X), attention(X), lambda)).
ad::Var pif_pipeline(ad::Tape& tape, const ad::ParamStore& params, ad::Var x,
                     std::size_t heads, const spectral::SpectralFilterSpec& spec);

}  // namespace fdn::conditioning
