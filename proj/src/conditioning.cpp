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

#include "fdn/conditioning.hpp"

#include <algorithm>
#include <cmath>

#include "fdn/errors.hpp"

namespace fdn::conditioning {

namespace {

DenseArray identity_plus_noise(std::size_t d, double stddev, Rng& rng) {
  DenseArray w = normal_array({d, d}, stddev, rng);
  for (std::size_t i = 0; i < d; ++i) w.at(i, i) += 1.0;
  return w;
}

}  // namespace

void init_params(ad::ParamStore& params, const ConditioningConfig& config, Rng& rng) {
  const std::size_t d = config.d;
  if (d == 0) throw DimensionError("conditioning width must be positive");
  if (config.heads == 0 || d % config.heads != 0) {
    throw ParameterError("feature width " + std::to_string(d) + " not divisible by " +
                         std::to_string(config.heads) + " heads");
  }
  if (!(config.lambda >= 0.0 && config.lambda <= 2.0)) {
    throw ParameterError("lambda must lie in [0, 2]");
  }
  const double b_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double b_2d = 1.0 / std::sqrt(static_cast<double>(2 * d));
  params.add(kW1, uniform_array({d, d}, b_d, rng));
  params.add(kB1, DenseArray::matrix(1, d));
  params.add(kW2, uniform_array({d, 2 * d}, b_d, rng));
  params.add(kB2, DenseArray::matrix(1, 2 * d));
  params.add(kW3, uniform_array({2 * d, d}, b_2d, rng));
  params.add(kB3, DenseArray::matrix(1, d));
  params.add(kWq, identity_plus_noise(d, config.attn_init_std, rng));
  params.add(kWk, identity_plus_noise(d, config.attn_init_std, rng));
  params.add(kWv, identity_plus_noise(d, config.attn_init_std, rng));
  params.add(kWo, identity_plus_noise(d, config.attn_init_std, rng));
  params.add(kLambda, DenseArray::scalar(config.lambda), config.learnable_lambda);
}

void set_identity_attention(ad::ParamStore& params) {
  for (const char* name : {kWq, kWk, kWv, kWo}) {
    auto& w = params.get_mut(name);
    w = DenseArray::identity(w.rows());
  }
}

void clamp_lambda(ad::ParamStore& params) {
  auto& l = params.get_mut(kLambda);
  l[0] = std::clamp(l[0], 0.0, 2.0);
}

ad::Var projection_forward(ad::Tape& tape, const ad::ParamStore& params, ad::Var x) {
  const auto& w1 = params.get(kW1);
  if (x.cols() != w1.rows()) {
    throw DimensionError("projection_forward: input width " + std::to_string(x.cols()) +
                         " vs W1 rows " + std::to_string(w1.rows()));
  }
  auto x1 = ad::add_row_vector(ad::matmul(x, params.bind(tape, kW1)), params.bind(tape, kB1));
  auto x2 = ad::add_row_vector(ad::matmul(ad::gelu(x1), params.bind(tape, kW2)),
                               params.bind(tape, kB2));
  auto x3 = ad::add_row_vector(ad::matmul(ad::gelu(x2), params.bind(tape, kW3)),
                               params.bind(tape, kB3));
  return ad::mul(ad::relu(x3), x);
}

ad::Var self_attention_forward(ad::Tape& tape, const ad::ParamStore& params, ad::Var x,
                               std::size_t heads) {
  const std::size_t d = x.cols();
  if (heads == 0 || d % heads != 0) {
    throw ParameterError("feature width " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  if (params.get(kWq).rows() != d) {
    throw DimensionError("self_attention_forward: projection width mismatch");
  }
  auto q = ad::matmul(x, params.bind(tape, kWq));
  auto k = ad::matmul(x, params.bind(tape, kWk));
  auto v = ad::matmul(x, params.bind(tape, kWv));
  const double scale = 1.0 / std::sqrt(static_cast<double>(d / heads));
  auto attended = ad::segment_attention(q, k, v, x.rows(), heads, scale);
  return ad::matmul(attended, params.bind(tape, kWo));
}

ad::Var fuse_features(ad::Var x, ad::Var x_proj, ad::Var x_self, ad::Var lambda) {
  auto out = ad::mul(ad::mul(x_proj, x_self), lambda);
  return ad::add(ad::safe_div(out, x), x);
}

PifTrace pif_pipeline_trace(ad::Tape& tape, const ad::ParamStore& params, ad::Var x,
                            std::size_t heads, const spectral::SpectralFilterSpec& spec) {
  if (spec.d != x.cols()) {
    throw DimensionError("filter length " + std::to_string(spec.d) + " vs feature width " +
                         std::to_string(x.cols()));
  }
  PifTrace t;
  t.projected = projection_forward(tape, params, x);
  t.attended = self_attention_forward(tape, params, x, heads);
  t.fused = fuse_features(x, t.projected, t.attended, params.bind(tape, kLambda));
  t.retained = spectral::ffb_apply(t.fused, spec);
  return t;
}

ad::Var pif_pipeline(ad::Tape& tape, const ad::ParamStore& params, ad::Var x,
                     std::size_t heads, const spectral::SpectralFilterSpec& spec) {
  return pif_pipeline_trace(tape, params, x, heads, spec).retained;
}

}  // namespace fdn::conditioning
