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

// Learnable context tokens, the per-position Meta-Net, prompt assembly and
// a seeded frozen text tower.
//
// Token sequences are stored flat: a batch of n prompts of length L is an
// (n*L) x e matrix, prompt i occupying rows [i*L, (i+1)*L).

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "fdn/autodiff.hpp"
#include "fdn/random.hpp"

namespace fdn::prompting {

inline constexpr const char* kContext = "prompt.context";
inline constexpr const char* kDefaultContextInit = "a photo of a";

/// Default reference templates; "{}" is the class-name slot.
std::vector<std::string> default_templates();

/// Lowercased whitespace tokens.
std::vector<std::string> tokenize(std::string_view text);

/// Replaces the single "{}" slot. FormatError when the slot is missing.
std::string fill_template(std::string_view tmpl, std::string_view class_name);

struct TextEncoderConfig {
  std::size_t e = 512;          // token width
  std::size_t d = 512;          // output width (matches image features)
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t max_tokens = 77;
  std::uint64_t seed = 0;
};

/// Pre-LN transformer over token sequences, mean-pooled, projected to d and
/// L2-normalized. Every weight is drawn from the seed at construction and is
/// never exposed mutably.
class FrozenTextEncoder {
 public:
  explicit FrozenTextEncoder(TextEncoderConfig config);

  const TextEncoderConfig& config() const { return config_; }
  const ad::ParamStore& weights() const { return weights_; }

  /// Hash-derived N(0, 1/e) vector for one vocabulary token, 1 x e.
  DenseArray token_embedding(std::string_view token) const;
  /// Stacked token embeddings of tokenize(text), n x e.
  DenseArray embed_text(std::string_view text) const;
  /// Single class-name token: mean of its word embeddings, 1 x e.
  DenseArray class_token(std::string_view class_name) const;

  /// `sequences` is (n*seq_len) x e; returns n x d unit rows.
  ad::Var encode(ad::Tape& tape, ad::Var sequences, std::size_t seq_len) const;

  /// Convenience: encodes tokenize(text) without a caller-visible tape.
  DenseArray encode_text(std::string_view text) const;

 private:
  TextEncoderConfig config_;
  ad::ParamStore weights_;
};

/// Context tokens built from a phrase: if the phrase has more than M tokens
/// the last M are kept, if fewer it is left-padded with the token "x".
DenseArray context_from_phrase(const FrozenTextEncoder& encoder, std::string_view phrase,
                               std::size_t m);

struct PromptConfig {
  std::size_t m = 4;        // context length
  std::size_t d = 512;      // input width of the Meta-Net (psi)
  std::size_t e = 512;      // token width
  double context_noise = 0.02;
  std::string context_init = kDefaultContextInit;
};

std::size_t metanet_hidden(std::size_t d);

std::string metanet_name(std::size_t m, const char* part);

/// context (M x e) from context_init plus N(0, noise^2); M independent maps
/// h_m: d -> max(1, d/16) -> e with uniform(+-1/sqrt(fan_in)) weights and
/// zero biases.
void init_params(ad::ParamStore& params, const PromptConfig& config,
                 const FrozenTextEncoder& encoder, Rng& rng);

std::size_t context_length(const ad::ParamStore& params);

/// upsilon laid out B x (M*e): entry [b, m*e + j] is h_m(psi_b)_j.
ad::Var metanet_forward(ad::Tape& tape, const ad::ParamStore& params, ad::Var psi);

struct PromptBatch {
  ad::Var tokens;            // (n_samples * n_classes * seq_len) x e
  std::size_t n_samples = 0;
  std::size_t n_classes = 0;
  std::size_t seq_len = 0;
};

/// One prompt per (sample, class), ordered sample-major. Each prompt is
/// [c_1 + u_1, ..., c_M + u_M, class_tokens[class_ids[j]]]. When
/// `context_override` is given it replaces the learned context (held-out
/// template evaluation); it must be M x e.
PromptBatch assemble_prompts(ad::Tape& tape, const ad::ParamStore& params, ad::Var upsilon,
                             const DenseArray& class_tokens,
                             const std::vector<std::size_t>& class_ids,
                             const DenseArray* context_override = nullptr);

/// Encodes every prompt; returns (n_samples * n_classes) x d.
ad::Var frozen_text_encode(const FrozenTextEncoder& encoder, const PromptBatch& batch);

/// Class-name tokens for a label set, n_classes x e.
DenseArray class_token_matrix(const FrozenTextEncoder& encoder,
                              const std::vector<std::string>& class_names);

/// Z x N_c reference embeddings, stored (Z*N_c) x d with row z*N_c + c.
struct ReferenceBank {
  DenseArray embeddings;
  std::size_t z = 0;
  std::size_t n_classes = 0;

  std::span<const double> row(std::size_t template_index, std::size_t class_id) const {
    return embeddings.row_span(template_index * n_classes + class_id);
  }
};

ReferenceBank reference_prompt_embeddings(const FrozenTextEncoder& encoder,
                                          const std::vector<std::string>& class_names,
                                          const std::vector<std::string>& templates);

}  // namespace fdn::prompting
