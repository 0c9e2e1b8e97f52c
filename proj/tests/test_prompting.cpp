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

#include <cmath>

#include "doctest.h"
#include "fdn/errors.hpp"
#include "fdn/prompting.hpp"
#include "test_util.hpp"

using fdn::DenseArray;
using fdn::testing::random_array;
namespace ad = fdn::ad;
namespace pr = fdn::prompting;

namespace {

pr::FrozenTextEncoder small_encoder(std::uint64_t seed, std::size_t e = 16, std::size_t d = 16) {
  pr::TextEncoderConfig cfg;
  cfg.e = e;
  cfg.d = d;
  cfg.seed = seed;
  return pr::FrozenTextEncoder(cfg);
}

ad::ParamStore prompt_params(const pr::FrozenTextEncoder& enc, std::size_t m, std::size_t d,
                             std::uint64_t seed) {
  ad::ParamStore p;
  pr::PromptConfig cfg;
  cfg.m = m;
  cfg.d = d;
  cfg.e = enc.config().e;
  fdn::Rng rng(seed);
  pr::init_params(p, cfg, enc, rng);
  return p;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  return fdn::dot(a, b) / (fdn::l2_norm(a) * fdn::l2_norm(b));
}

}  // namespace

TEST_CASE("tokenize and fill_template") {
  CHECK(pr::tokenize("  A photo  of\ta ") == std::vector<std::string>{"a", "photo", "of", "a"});
  CHECK(pr::tokenize("").empty());
  CHECK(pr::fill_template("a photo of a {}", "forest") == "a photo of a forest");
  CHECK(pr::fill_template("{} seen from above", "river") == "river seen from above");
  CHECK_THROWS_AS(pr::fill_template("a photo of a", "forest"), fdn::FormatError);
  CHECK_THROWS_AS(pr::fill_template("{} and {}", "forest"), fdn::FormatError);
  CHECK(pr::default_templates().size() == 4);
}

TEST_CASE("context_from_phrase length rule") {
  auto enc = small_encoder(1);
  auto four = pr::context_from_phrase(enc, "a photo of a", 4);
  CHECK(four.shape() == fdn::Shape{4, 16});
  auto two = pr::context_from_phrase(enc, "a photo of a", 2);
  // Keeps the last two tokens: "of a".
  CHECK(fdn::max_abs_diff(DenseArray::row(two.row_span(0)), enc.token_embedding("of")) == 0.0);
  CHECK(fdn::max_abs_diff(DenseArray::row(two.row_span(1)), enc.token_embedding("a")) == 0.0);
  auto six = pr::context_from_phrase(enc, "a photo of a", 6);
  CHECK(fdn::max_abs_diff(DenseArray::row(six.row_span(0)), enc.token_embedding("x")) == 0.0);
  CHECK(fdn::max_abs_diff(DenseArray::row(six.row_span(2)), enc.token_embedding("a")) == 0.0);
  CHECK_THROWS_AS(pr::context_from_phrase(enc, "a", 0), fdn::ParameterError);
}

TEST_CASE("token table is hash-derived and seeded") {
  auto a = small_encoder(1);
  auto b = small_encoder(1);
  auto c = small_encoder(2);
  CHECK(a.token_embedding("forest") == b.token_embedding("forest"));
  CHECK_FALSE(a.token_embedding("forest") == c.token_embedding("forest"));
  CHECK_FALSE(a.token_embedding("forest") == a.token_embedding("river"));
  CHECK(a.weights() == b.weights());
  auto cls = a.class_token("dense residential");
  auto w1 = a.token_embedding("dense"), w2 = a.token_embedding("residential");
  for (std::size_t i = 0; i < 16; ++i) CHECK(cls[i] == doctest::Approx(0.5 * (w1[i] + w2[i])));
}

TEST_CASE("init_params builds the prompt state") {
  auto enc = small_encoder(3, 32, 32);
  auto p = prompt_params(enc, 4, 32, 5);
  CHECK(p.get(pr::kContext).shape() == fdn::Shape{4, 32});
  CHECK(pr::metanet_hidden(32) == 2);
  CHECK(pr::metanet_hidden(8) == 1);
  CHECK(p.get(pr::metanet_name(3, "W1")).shape() == fdn::Shape{32, 2});
  CHECK(p.get(pr::metanet_name(3, "W2")).shape() == fdn::Shape{2, 32});
  // Context sits within a few noise sigmas of the phrase tokens.
  auto base = pr::context_from_phrase(enc, pr::kDefaultContextInit, 4);
  const double dev = fdn::max_abs_diff(base, p.get(pr::kContext));
  CHECK(dev > 0.0);
  CHECK(dev < 0.15);
}

TEST_CASE("metanet_forward examples") {
  auto enc = small_encoder(1, 32, 16);
  SUBCASE("zero weights give zero upsilon") {
    auto p = prompt_params(enc, 4, 16, 1);
    for (const auto& n : p.names())
      if (n != pr::kContext) p.get_mut(n) = DenseArray(p.get(n).shape(), 0.0);
    ad::Tape t;
    auto u = pr::metanet_forward(t, p, t.constant(random_array({4, 16}, 2)));
    CHECK(u.value().shape() == fdn::Shape{4, 4 * 32});
    for (double v : u.value().data()) CHECK(v == 0.0);
  }
  SUBCASE("hidden width 1 matches a loop oracle") {
    auto p = prompt_params(enc, 3, 16, 7);
    for (const auto& n : p.names())
      if (n != pr::kContext) p.get_mut(n) = random_array(p.get(n).shape(), fdn::fnv1a64(n));
    auto psi = random_array({2, 16}, 9);
    ad::Tape t;
    auto u = pr::metanet_forward(t, p, t.constant(psi)).value();
    for (std::size_t m = 0; m < 3; ++m) {
      const auto& W1 = p.get(pr::metanet_name(m, "W1"));
      const auto& b1 = p.get(pr::metanet_name(m, "b1"));
      const auto& W2 = p.get(pr::metanet_name(m, "W2"));
      const auto& b2 = p.get(pr::metanet_name(m, "b2"));
      for (std::size_t b = 0; b < 2; ++b) {
        double h = b1[0];
        for (std::size_t i = 0; i < 16; ++i) h += psi.at(b, i) * W1.at(i, 0);
        h = std::max(0.0, h);
        for (std::size_t j = 0; j < 32; ++j) {
          CHECK(std::abs(u.at(b, m * 32 + j) - (h * W2.at(0, j) + b2[j])) < 1e-12);
        }
      }
    }
  }
  SUBCASE("width mismatch") {
    auto p = prompt_params(enc, 2, 16, 1);
    ad::Tape t;
    CHECK_THROWS_AS(pr::metanet_forward(t, p, t.constant(random_array({2, 8}, 1))),
                    fdn::DimensionError);
  }
}

TEST_CASE("assemble_prompts examples") {
  auto enc = small_encoder(1, 8, 8);
  auto p = prompt_params(enc, 4, 8, 2);
  const auto& ctx = p.get(pr::kContext);
  auto cls = pr::class_token_matrix(enc, {"forest", "river", "beach"});

  SUBCASE("zero upsilon reproduces the raw context") {
    ad::Tape t;
    auto batch = pr::assemble_prompts(t, p, t.constant(DenseArray::matrix(2, 32)), cls, {0, 2});
    CHECK(batch.seq_len == 5);
    CHECK(batch.tokens.rows() == 2 * 2 * 5);
    const auto& tok = batch.tokens.value();
    for (std::size_t s = 0; s < 4; ++s) {
      for (std::size_t m = 0; m < 4; ++m)
        for (std::size_t j = 0; j < 8; ++j) CHECK(tok.at(s * 5 + m, j) == ctx.at(m, j));
    }
    // Class token last; sample-major then class order.
    for (std::size_t j = 0; j < 8; ++j) {
      CHECK(tok.at(4, j) == cls.at(0, j));
      CHECK(tok.at(9, j) == cls.at(2, j));
      CHECK(tok.at(19, j) == cls.at(2, j));
    }
  }
  SUBCASE("B=1 hand values") {
    DenseArray u = DenseArray::matrix(1, 32);
    for (std::size_t i = 0; i < 32; ++i) u[i] = 0.1 * static_cast<double>(i);
    ad::Tape t;
    auto tok = pr::assemble_prompts(t, p, t.constant(u), cls, {1}).tokens.value();
    for (std::size_t m = 0; m < 4; ++m)
      for (std::size_t j = 0; j < 8; ++j) CHECK(tok.at(m, j) == ctx.at(m, j) + u[m * 8 + j]);
  }
  SUBCASE("additive in upsilon") {
    auto u = random_array({3, 32}, 4);
    DenseArray u2(u.shape());
    for (std::size_t i = 0; i < u.size(); ++i) u2[i] = 2.0 * u[i];
    ad::Tape t;
    auto a = pr::assemble_prompts(t, p, t.constant(u), cls, {0, 1, 2}).tokens.value();
    auto b = pr::assemble_prompts(t, p, t.constant(u2), cls, {0, 1, 2}).tokens.value();
    for (std::size_t s = 0; s < 9; ++s)
      for (std::size_t m = 0; m < 4; ++m)
        for (std::size_t j = 0; j < 8; ++j) {
          const double da = a.at(s * 5 + m, j) - ctx.at(m, j);
          const double db = b.at(s * 5 + m, j) - ctx.at(m, j);
          CHECK(std::abs(db - 2.0 * da) < 1e-15);
        }
  }
  SUBCASE("two samples, one class differ only through upsilon") {
    auto u = random_array({2, 32}, 5);
    ad::Tape t;
    auto tok = pr::assemble_prompts(t, p, t.constant(u), cls, {1}).tokens.value();
    for (std::size_t m = 0; m < 4; ++m)
      for (std::size_t j = 0; j < 8; ++j)
        CHECK(std::abs((tok.at(5 + m, j) - tok.at(m, j)) - (u.at(1, m * 8 + j) - u.at(0, m * 8 + j))) <
              1e-15);
    for (std::size_t j = 0; j < 8; ++j) CHECK(tok.at(4, j) == tok.at(9, j));
  }
  SUBCASE("context override replaces learned tokens") {
    auto held_out = pr::context_from_phrase(enc, "satellite photo of a", 4);
    ad::Tape t;
    auto tok = pr::assemble_prompts(t, p, t.constant(DenseArray::matrix(1, 32)), cls, {0}, &held_out)
                   .tokens.value();
    for (std::size_t m = 0; m < 4; ++m)
      for (std::size_t j = 0; j < 8; ++j) CHECK(tok.at(m, j) == held_out.at(m, j));
  }
  SUBCASE("errors") {
    ad::Tape t;
    CHECK_THROWS_AS(pr::assemble_prompts(t, p, t.constant(DenseArray::matrix(1, 32)), cls, {3}),
                    fdn::LookupError);
    CHECK_THROWS_AS(pr::assemble_prompts(t, p, t.constant(DenseArray::matrix(1, 30)), cls, {0}),
                    fdn::DimensionError);
  }
}

TEST_CASE("frozen_text_encode contracts") {
  auto enc1 = small_encoder(1, 16, 12);
  auto enc2 = small_encoder(2, 16, 12);
  const std::size_t L = 5;
  double worst_cos = -1.0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    auto tokens = random_array({L, 16}, 100 + s, -0.5, 0.5);
    ad::Tape t;
    auto a = enc1.encode(t, t.constant(tokens), L).value();
    auto a_again = enc1.encode(t, t.constant(tokens), L).value();
    auto b = enc2.encode(t, t.constant(tokens), L).value();
    CHECK(a.shape() == fdn::Shape{1, 12});
    CHECK(fdn::max_abs_diff(a, a_again) == 0.0);
    CHECK(std::abs(fdn::l2_norm(a.data()) - 1.0) < 1e-9);
    worst_cos = std::max(worst_cos, cosine(a.data(), b.data()));
  }
  CHECK(worst_cos < 0.99);
}

TEST_CASE("encoding batches prompts independently") {
  auto enc = small_encoder(4, 16, 16);
  auto x = random_array({3 * 4, 16}, 1);
  ad::Tape t;
  auto all = enc.encode(t, t.constant(x), 4).value();
  for (std::size_t i = 0; i < 3; ++i) {
    DenseArray one = DenseArray::matrix(4, 16);
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 16; ++c) one.at(r, c) = x.at(i * 4 + r, c);
    auto single = enc.encode(t, t.constant(one), 4).value();
    for (std::size_t c = 0; c < 16; ++c) CHECK(std::abs(single[c] - all.at(i, c)) < 1e-13);
  }
}

TEST_CASE("text encoder errors") {
  auto enc = small_encoder(1, 16, 16);
  ad::Tape t;
  CHECK_THROWS_AS(enc.encode(t, t.constant(random_array({5, 8}, 1)), 5), fdn::DimensionError);
  CHECK_THROWS_AS(enc.encode(t, t.constant(random_array({6, 16}, 1)), 5), fdn::DimensionError);
  CHECK_THROWS_AS(enc.encode(t, t.constant(random_array({80, 16}, 1)), 80), fdn::ParameterError);
  pr::TextEncoderConfig bad;
  bad.e = 18;
  CHECK_THROWS_AS(pr::FrozenTextEncoder{bad}, fdn::ParameterError);
}

TEST_CASE("gradients reach context tokens and Meta-Net but not the encoder") {
  auto enc = small_encoder(5, 16, 16);
  auto p = prompt_params(enc, 2, 16, 6);
  p.add("psi", random_array({2, 16}, 7));
  p.add("target", random_array({4, 16}, 8));
  auto cls = pr::class_token_matrix(enc, {"forest", "river"});
  const auto before = enc.weights();
  auto f = [&](ad::Tape& t, const ad::ParamStore& ps) {
    auto u = pr::metanet_forward(t, ps, ps.bind(t, "psi"));
    auto batch = pr::assemble_prompts(t, ps, u, cls, {0, 1});
    auto emb = pr::frozen_text_encode(enc, batch);
    return ad::sum(ad::mul(emb, ps.bind(t, "target")));
  };
  auto report = ad::finite_diff_check(f, p);
  INFO(report.worst_param << "[" << report.worst_index << "]");
  CHECK(report.max_rel_error < 1e-4);

  ad::Tape t;
  auto grads = t.backward(f(t, p));
  CHECK(grads.count(pr::kContext) == 1);
  CHECK(grads.count("enc.l0.Wq") == 0);
  double ctx_norm = 0.0;
  for (double v : grads.at(pr::kContext).data()) ctx_norm += v * v;
  CHECK(ctx_norm > 0.0);
  CHECK(enc.weights() == before);
}

TEST_CASE("reference_prompt_embeddings") {
  auto enc = small_encoder(9, 16, 24);
  std::vector<std::string> classes{"forest", "river"};
  auto one = pr::reference_prompt_embeddings(enc, classes, {"a photo of a {}"});
  CHECK(one.z == 1);
  CHECK(one.embeddings.shape() == fdn::Shape{2, 24});
  auto dup = pr::reference_prompt_embeddings(enc, classes, {"a photo of a {}", "a photo of a {}"});
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t j = 0; j < 24; ++j) CHECK(dup.row(0, c)[j] == dup.row(1, c)[j]);
  auto again = pr::reference_prompt_embeddings(enc, classes, {"a photo of a {}"});
  CHECK(again.embeddings == one.embeddings);
  // Row equals direct text encoding of the filled template.
  auto direct = enc.encode_text("a photo of a river");
  for (std::size_t j = 0; j < 24; ++j) CHECK(one.row(0, 1)[j] == direct[j]);

  std::vector<std::string> sixteen;
  for (int i = 0; i < 16; ++i) sixteen.push_back("class_" + std::to_string(i));
  auto full = pr::reference_prompt_embeddings(enc, sixteen, pr::default_templates());
  CHECK(full.embeddings.shape() == fdn::Shape{4 * 16, 24});
  CHECK_THROWS_AS(pr::reference_prompt_embeddings(enc, classes, {"a photo"}), fdn::FormatError);
  CHECK_THROWS_AS(pr::reference_prompt_embeddings(enc, classes, {}), fdn::ParameterError);
}

TEST_CASE("class names are separable after encoding") {
  // The surrogate must tell classes apart, otherwise zero-shot transfer in
  // the synthetic experiments has nothing to work with.
  auto enc = small_encoder(1, 64, 64);
  double worst = -1.0;
  for (int a = 0; a < 8; ++a)
    for (int b = a + 1; b < 8; ++b) {
      auto ea = enc.encode_text("a photo of a class_0" + std::to_string(a));
      auto eb = enc.encode_text("a photo of a class_0" + std::to_string(b));
      worst = std::max(worst, cosine(ea.data(), eb.data()));
    }
  CHECK(worst < 0.98);
}
