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

#include "fdn/prompting.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

#include "fdn/errors.hpp"

namespace fdn::prompting {

namespace {

std::string layer_name(std::size_t layer, const char* part) {
  return "enc.l" + std::to_string(layer) + "." + part;
}

}  // namespace

std::vector<std::string> default_templates() {
  return {"a photo of a {}", "satellite photo of a {}", "an aerial image of a {}",
          "remote sensing scene of a {}"};
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string fill_template(std::string_view tmpl, std::string_view class_name) {
  const auto pos = tmpl.find("{}");
  if (pos == std::string_view::npos) {
    throw FormatError("prompt template has no {} class slot: \"" + std::string(tmpl) + "\"");
  }
  if (tmpl.find("{}", pos + 2) != std::string_view::npos) {
    throw FormatError("prompt template has more than one {} slot: \"" + std::string(tmpl) + "\"");
  }
  std::string out(tmpl.substr(0, pos));
  out += class_name;
  out += tmpl.substr(pos + 2);
  return out;
}

// ---------------------------------------------------------------------------
// FrozenTextEncoder
// ---------------------------------------------------------------------------

FrozenTextEncoder::FrozenTextEncoder(TextEncoderConfig config) : config_(config) {
  const std::size_t e = config_.e;
  if (e == 0 || config_.d == 0) throw DimensionError("text encoder widths must be positive");
  if (config_.heads == 0 || e % config_.heads != 0) {
    throw ParameterError("token width " + std::to_string(e) + " not divisible by " +
                         std::to_string(config_.heads) + " heads");
  }
  Rng rng(derive_seed(config_.seed, "text-encoder"));
  const double s_e = 1.0 / std::sqrt(static_cast<double>(e));
  const double s_h = 1.0 / std::sqrt(static_cast<double>(e * config_.mlp_ratio));
  // Positional rows are an order of magnitude below the token scale so the
  // pooled output is dominated by content.
  weights_.add("enc.pos", normal_array({config_.max_tokens, e}, 0.1 * s_e, rng), false);
  for (std::size_t l = 0; l < config_.layers; ++l) {
    for (const char* p : {"Wq", "Wk", "Wv", "Wo"}) {
      weights_.add(layer_name(l, p), normal_array({e, e}, s_e, rng), false);
    }
    weights_.add(layer_name(l, "W1"), normal_array({e, e * config_.mlp_ratio}, s_e, rng), false);
    weights_.add(layer_name(l, "W2"), normal_array({e * config_.mlp_ratio, e}, s_h, rng), false);
  }
  weights_.add("enc.out", normal_array({e, config_.d}, s_e, rng), false);
}

DenseArray FrozenTextEncoder::token_embedding(std::string_view token) const {
  Rng rng(derive_seed(config_.seed, fnv1a64(token)));
  return normal_array({1, config_.e}, 1.0 / std::sqrt(static_cast<double>(config_.e)), rng);
}

DenseArray FrozenTextEncoder::embed_text(std::string_view text) const {
  const auto tokens = tokenize(text);
  if (tokens.empty()) throw ParameterError("cannot embed an empty phrase");
  DenseArray out = DenseArray::matrix(tokens.size(), config_.e);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto row = token_embedding(tokens[i]);
    std::copy(row.data().begin(), row.data().end(), out.row_span(i).begin());
  }
  return out;
}

DenseArray FrozenTextEncoder::class_token(std::string_view class_name) const {
  const auto words = embed_text(class_name);
  DenseArray out = DenseArray::matrix(1, config_.e);
  for (std::size_t r = 0; r < words.rows(); ++r)
    for (std::size_t c = 0; c < config_.e; ++c) out[c] += words.at(r, c);
  for (auto& v : out.data()) v /= static_cast<double>(words.rows());
  return out;
}

ad::Var FrozenTextEncoder::encode(ad::Tape& tape, ad::Var sequences, std::size_t seq_len) const {
  const std::size_t e = config_.e;
  if (sequences.cols() != e) {
    throw DimensionError("text encoder expects token width " + std::to_string(e) + ", got " +
                         std::to_string(sequences.cols()));
  }
  if (seq_len == 0 || sequences.rows() % seq_len != 0) {
    throw DimensionError("token rows not a multiple of the sequence length");
  }
  if (seq_len > config_.max_tokens) {
    throw ParameterError("prompt of " + std::to_string(seq_len) + " tokens exceeds the " +
                         std::to_string(config_.max_tokens) + "-token limit");
  }
  std::vector<std::size_t> pos_idx(sequences.rows());
  for (std::size_t i = 0; i < pos_idx.size(); ++i) pos_idx[i] = i % seq_len;
  auto x = ad::add(sequences, ad::gather_rows(weights_.bind(tape, "enc.pos"), pos_idx));

  const double scale = 1.0 / std::sqrt(static_cast<double>(e / config_.heads));
  for (std::size_t l = 0; l < config_.layers; ++l) {
    auto h = ad::layer_norm_rows(x);
    auto q = ad::matmul(h, weights_.bind(tape, layer_name(l, "Wq")));
    auto k = ad::matmul(h, weights_.bind(tape, layer_name(l, "Wk")));
    auto v = ad::matmul(h, weights_.bind(tape, layer_name(l, "Wv")));
    auto a = ad::segment_attention(q, k, v, seq_len, config_.heads, scale);
    x = ad::add(x, ad::matmul(a, weights_.bind(tape, layer_name(l, "Wo"))));
    h = ad::layer_norm_rows(x);
    auto mlp = ad::matmul(ad::gelu(ad::matmul(h, weights_.bind(tape, layer_name(l, "W1")))),
                          weights_.bind(tape, layer_name(l, "W2")));
    x = ad::add(x, mlp);
  }
  auto pooled = ad::mean_pool_segments(ad::layer_norm_rows(x), seq_len);
  return ad::l2_normalize_rows(ad::matmul(pooled, weights_.bind(tape, "enc.out")));
}

DenseArray FrozenTextEncoder::encode_text(std::string_view text) const {
  ad::Tape tape;
  auto tokens = embed_text(text);
  const std::size_t len = tokens.rows();
  return encode(tape, tape.constant(std::move(tokens)), len).value();
}

// ---------------------------------------------------------------------------
// PromptState
// ---------------------------------------------------------------------------

DenseArray context_from_phrase(const FrozenTextEncoder& encoder, std::string_view phrase,
                               std::size_t m) {
  if (m == 0) throw ParameterError("context length must be at least 1");
  auto tokens = tokenize(phrase);
  if (tokens.size() > m) tokens.erase(tokens.begin(), tokens.end() - static_cast<long>(m));
  while (tokens.size() < m) tokens.insert(tokens.begin(), "x");
  DenseArray out = DenseArray::matrix(m, encoder.config().e);
  for (std::size_t i = 0; i < m; ++i) {
    const auto row = encoder.token_embedding(tokens[i]);
    std::copy(row.data().begin(), row.data().end(), out.row_span(i).begin());
  }
  return out;
}

std::size_t metanet_hidden(std::size_t d) { return std::max<std::size_t>(1, d / 16); }

std::string metanet_name(std::size_t m, const char* part) {
  return "prompt.h" + std::to_string(m) + "." + part;
}

void init_params(ad::ParamStore& params, const PromptConfig& config,
                 const FrozenTextEncoder& encoder, Rng& rng) {
  if (config.e != encoder.config().e) {
    throw DimensionError("prompt token width " + std::to_string(config.e) +
                         " differs from the text encoder width " +
                         std::to_string(encoder.config().e));
  }
  DenseArray ctx = context_from_phrase(encoder, config.context_init, config.m);
  const DenseArray noise = normal_array(ctx.shape(), config.context_noise, rng);
  for (std::size_t i = 0; i < ctx.size(); ++i) ctx[i] += noise[i];
  params.add(kContext, std::move(ctx));
  const std::size_t hid = metanet_hidden(config.d);
  for (std::size_t m = 0; m < config.m; ++m) {
    params.add(metanet_name(m, "W1"),
               uniform_array({config.d, hid}, 1.0 / std::sqrt(static_cast<double>(config.d)), rng));
    params.add(metanet_name(m, "b1"), DenseArray::matrix(1, hid));
    params.add(metanet_name(m, "W2"),
               uniform_array({hid, config.e}, 1.0 / std::sqrt(static_cast<double>(hid)), rng));
    params.add(metanet_name(m, "b2"), DenseArray::matrix(1, config.e));
  }
}

std::size_t context_length(const ad::ParamStore& params) { return params.get(kContext).rows(); }

ad::Var metanet_forward(ad::Tape& tape, const ad::ParamStore& params, ad::Var psi) {
  const std::size_t m_count = context_length(params);
  const auto& w1 = params.get(metanet_name(0, "W1"));
  if (psi.cols() != w1.rows()) {
    throw DimensionError("metanet_forward: psi width " + std::to_string(psi.cols()) +
                         " vs Meta-Net input " + std::to_string(w1.rows()));
  }
  std::vector<ad::Var> outs;
  outs.reserve(m_count);
  for (std::size_t m = 0; m < m_count; ++m) {
    auto h = ad::relu(ad::add_row_vector(ad::matmul(psi, params.bind(tape, metanet_name(m, "W1"))),
                                         params.bind(tape, metanet_name(m, "b1"))));
    outs.push_back(ad::add_row_vector(ad::matmul(h, params.bind(tape, metanet_name(m, "W2"))),
                                      params.bind(tape, metanet_name(m, "b2"))));
  }
  return outs.size() == 1 ? outs.front() : ad::concat_cols(outs);
}

PromptBatch assemble_prompts(ad::Tape& tape, const ad::ParamStore& params, ad::Var upsilon,
                             const DenseArray& class_tokens,
                             const std::vector<std::size_t>& class_ids,
                             const DenseArray* context_override) {
  const DenseArray& ctx_value = params.get(kContext);
  const std::size_t M = ctx_value.rows(), e = ctx_value.cols();
  const std::size_t B = upsilon.rows();
  if (upsilon.cols() != M * e) {
    throw DimensionError("upsilon width " + std::to_string(upsilon.cols()) + " vs M*e = " +
                         std::to_string(M * e));
  }
  if (class_tokens.cols() != e) throw DimensionError("class token width mismatch");
  if (class_ids.empty()) throw ParameterError("assemble_prompts needs at least one class");
  for (std::size_t id : class_ids) {
    if (id >= class_tokens.rows()) {
      throw LookupError("unknown class id " + std::to_string(id) + " (have " +
                        std::to_string(class_tokens.rows()) + " classes)");
    }
  }
  ad::Var ctx;
  if (context_override != nullptr) {
    if (context_override->shape() != ctx_value.shape()) {
      throw DimensionError("context override must be " + shape_string(ctx_value.shape()));
    }
    ctx = tape.constant_ref(*context_override);
  } else {
    ctx = params.bind(tape, kContext);
  }
  std::vector<std::size_t> tile(B * M);
  for (std::size_t i = 0; i < tile.size(); ++i) tile[i] = i % M;
  // Row b*M + m holds c_m + u_m(b).
  auto conditioned = ad::add(ad::gather_rows(ctx, tile), ad::reshape(upsilon, B * M, e));
  auto pool = ad::concat_rows({conditioned, tape.constant_ref(class_tokens)});

  const std::size_t C = class_ids.size(), L = M + 1;
  std::vector<std::size_t> order;
  order.reserve(B * C * L);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < C; ++j) {
      for (std::size_t m = 0; m < M; ++m) order.push_back(b * M + m);
      order.push_back(B * M + class_ids[j]);
    }
  return PromptBatch{ad::gather_rows(pool, std::move(order)), B, C, L};
}

ad::Var frozen_text_encode(const FrozenTextEncoder& encoder, const PromptBatch& batch) {
  return encoder.encode(batch.tokens.tape(), batch.tokens, batch.seq_len);
}

DenseArray class_token_matrix(const FrozenTextEncoder& encoder,
                              const std::vector<std::string>& class_names) {
  DenseArray out = DenseArray::matrix(class_names.size(), encoder.config().e);
  for (std::size_t i = 0; i < class_names.size(); ++i) {
    const auto row = encoder.class_token(class_names[i]);
    std::copy(row.data().begin(), row.data().end(), out.row_span(i).begin());
  }
  return out;
}

ReferenceBank reference_prompt_embeddings(const FrozenTextEncoder& encoder,
                                          const std::vector<std::string>& class_names,
                                          const std::vector<std::string>& templates) {
  if (templates.empty()) throw ParameterError("need at least one reference template");
  if (class_names.empty()) throw ParameterError("need at least one class name");
  ReferenceBank bank;
  bank.z = templates.size();
  bank.n_classes = class_names.size();
  bank.embeddings = DenseArray::matrix(bank.z * bank.n_classes, encoder.config().d);
  for (std::size_t z = 0; z < bank.z; ++z)
    for (std::size_t c = 0; c < bank.n_classes; ++c) {
      const auto v = encoder.encode_text(fill_template(templates[z], class_names[c]));
      std::copy(v.data().begin(), v.data().end(),
                bank.embeddings.row_span(z * bank.n_classes + c).begin());
    }
  return bank;
}

}  // namespace fdn::prompting
