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
#include "fdn/conditioning.hpp"
#include "fdn/errors.hpp"
#include "test_util.hpp"

using fdn::DenseArray;
using fdn::testing::naive_matmul;
using fdn::testing::random_array;
namespace ad = fdn::ad;
namespace cond = fdn::conditioning;

namespace {

ad::ParamStore make_params(std::size_t d, std::uint64_t seed, double lambda = 0.3) {
  ad::ParamStore p;
  fdn::Rng rng(seed);
  cond::ConditioningConfig cfg;
  cfg.d = d;
  cfg.lambda = lambda;
  cond::init_params(p, cfg, rng);
  return p;
}

// Perturb every weight and bias so the oracles are not tested at a special point.
void randomize(ad::ParamStore& p, std::uint64_t seed, double amp = 0.3) {
  std::uint64_t s = seed;
  for (const auto& name : p.names()) {
    if (name == cond::kLambda) continue;
    auto noise = random_array(p.get(name).shape(), ++s, -amp, amp);
    auto& w = p.get_mut(name);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] += noise[i];
  }
}

double erf_gelu(double z) { return 0.5 * z * (1.0 + std::erf(z / std::sqrt(2.0))); }

// Straight-line projection oracle, scalar loops only.
DenseArray oracle_projection(const DenseArray& x, const ad::ParamStore& p) {
  const std::size_t B = x.rows(), d = x.cols();
  const auto& W1 = p.get(cond::kW1);
  const auto& b1 = p.get(cond::kB1);
  const auto& W2 = p.get(cond::kW2);
  const auto& b2 = p.get(cond::kB2);
  const auto& W3 = p.get(cond::kW3);
  const auto& b3 = p.get(cond::kB3);
  DenseArray out = DenseArray::matrix(B, d);
  for (std::size_t r = 0; r < B; ++r) {
    std::vector<double> h1(d), h2(2 * d), h3(d);
    for (std::size_t j = 0; j < d; ++j) {
      double s = b1[j];
      for (std::size_t i = 0; i < d; ++i) s += x.at(r, i) * W1.at(i, j);
      h1[j] = s;
    }
    for (std::size_t j = 0; j < 2 * d; ++j) {
      double s = b2[j];
      for (std::size_t i = 0; i < d; ++i) s += erf_gelu(h1[i]) * W2.at(i, j);
      h2[j] = s;
    }
    for (std::size_t j = 0; j < d; ++j) {
      double s = b3[j];
      for (std::size_t i = 0; i < 2 * d; ++i) s += erf_gelu(h2[i]) * W3.at(i, j);
      h3[j] = s;
    }
    for (std::size_t j = 0; j < d; ++j) out.at(r, j) = std::max(0.0, h3[j]) * x.at(r, j);
  }
  return out;
}

// Loop-based multi-head attention over batch rows.
DenseArray oracle_attention(const DenseArray& x, const ad::ParamStore& p, std::size_t H) {
  const std::size_t B = x.rows(), d = x.cols(), dh = d / H;
  auto Q = naive_matmul(x, p.get(cond::kWq));
  auto K = naive_matmul(x, p.get(cond::kWk));
  auto V = naive_matmul(x, p.get(cond::kWv));
  DenseArray heads = DenseArray::matrix(B, d);
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t i = 0; i < B; ++i) {
      std::vector<double> s(B);
      double mx = -1e300;
      for (std::size_t j = 0; j < B; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dot += Q.at(i, h * dh + c) * K.at(j, h * dh + c);
        s[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (auto& v : s) z += (v = std::exp(v - mx));
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < B; ++j) acc += s[j] / z * V.at(j, h * dh + c);
        heads.at(i, h * dh + c) = acc;
      }
    }
  }
  return naive_matmul(heads, p.get(cond::kWo));
}

DenseArray oracle_fuse(const DenseArray& x, const DenseArray& xp, const DenseArray& xs,
                       double lambda) {
  DenseArray out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double a = lambda * xp[i] * xs[i], b = x[i];
    double v;
    if (std::abs(b) <= 1e-30 && a == 0.0) {
      v = 0.0;
    } else {
      v = a / (b + 1e-8 * (b >= 0.0 ? 1.0 : -1.0));
    }
    out[i] = v + b;
  }
  return out;
}

DenseArray run_projection(const DenseArray& x, const ad::ParamStore& p) {
  ad::Tape t;
  return cond::projection_forward(t, p, t.constant(x)).value();
}

DenseArray run_attention(const DenseArray& x, const ad::ParamStore& p, std::size_t H) {
  ad::Tape t;
  return cond::self_attention_forward(t, p, t.constant(x), H).value();
}

DenseArray run_fuse(const DenseArray& x, const DenseArray& xp, const DenseArray& xs,
                    double lambda) {
  ad::Tape t;
  return cond::fuse_features(t.constant(x), t.constant(xp), t.constant(xs),
                             t.constant(DenseArray::scalar(lambda)))
      .value();
}

}  // namespace

TEST_CASE("init_params shapes and ranges") {
  auto p = make_params(16, 1);
  CHECK(p.get(cond::kW1).shape() == fdn::Shape{16, 16});
  CHECK(p.get(cond::kW2).shape() == fdn::Shape{16, 32});
  CHECK(p.get(cond::kW3).shape() == fdn::Shape{32, 16});
  CHECK(p.get(cond::kB2).size() == 32);
  for (double v : p.get(cond::kW1).data()) CHECK(std::abs(v) <= 0.25);
  for (double v : p.get(cond::kW3).data()) CHECK(std::abs(v) <= 1.0 / std::sqrt(32.0));
  for (double v : p.get(cond::kB3).data()) CHECK(v == 0.0);
  CHECK(fdn::max_abs_diff(p.get(cond::kWq), DenseArray::identity(16)) < 0.1);
  CHECK(p.get(cond::kLambda).item() == 0.3);
  CHECK_FALSE(p.learnable(cond::kLambda));
  CHECK(make_params(16, 1) == p);

  ad::ParamStore q;
  fdn::Rng rng(0);
  cond::ConditioningConfig bad;
  bad.d = 10;
  CHECK_THROWS_AS(cond::init_params(q, bad, rng), fdn::ParameterError);
  cond::ConditioningConfig bad_lambda;
  bad_lambda.d = 8;
  bad_lambda.lambda = 2.5;
  ad::ParamStore q2;
  CHECK_THROWS_AS(cond::init_params(q2, bad_lambda, rng), fdn::ParameterError);
}

TEST_CASE("projection_forward examples") {
  const std::size_t d = 8;
  auto x = fdn::testing::random_unit_rows(2, d, 3);
  SUBCASE("zero weights give zeros") {
    auto p = make_params(d, 2);
    for (const auto& n : p.names())
      if (n != cond::kLambda) p.get_mut(n) = DenseArray(p.get(n).shape(), 0.0);
    auto y = run_projection(x, p);
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("saturated gate returns 10 X") {
    auto p = make_params(d, 2);
    for (const auto& n : p.names())
      if (n != cond::kLambda) p.get_mut(n) = DenseArray(p.get(n).shape(), 0.0);
    p.get_mut(cond::kB3) = DenseArray({1, d}, 10.0);
    auto y = run_projection(x, p);
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(10.0 * x[i]));
  }
  SUBCASE("random weights match the scalar oracle") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      auto p = make_params(d, seed);
      randomize(p, seed * 97);
      auto xr = random_array({2, d}, seed + 50);
      CHECK(fdn::max_abs_diff(run_projection(xr, p), oracle_projection(xr, p)) < 1e-12);
    }
  }
  SUBCASE("width mismatch") {
    auto p = make_params(d, 2);
    CHECK_THROWS_AS(run_projection(random_array({2, 9}, 1), p), fdn::DimensionError);
  }
}

TEST_CASE("self_attention_forward examples") {
  SUBCASE("B=1 identity projections is a pass-through") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      auto p = make_params(16, seed);
      cond::set_identity_attention(p);
      auto x = random_array({1, 16}, seed + 1000);
      CHECK(fdn::max_abs_diff(run_attention(x, p, 4), x) <= 1e-12);
    }
  }
  SUBCASE("identical rows average to themselves") {
    auto p = make_params(8, 3);
    cond::set_identity_attention(p);
    auto row = random_array({1, 8}, 4);
    DenseArray x = DenseArray::matrix(2, 8);
    for (std::size_t c = 0; c < 8; ++c) x.at(0, c) = x.at(1, c) = row[c];
    auto y = run_attention(x, p, 4);
    for (std::size_t c = 0; c < 8; ++c) {
      CHECK(y.at(0, c) == doctest::Approx(row[c]).epsilon(1e-12));
      CHECK(y.at(1, c) == doctest::Approx(row[c]).epsilon(1e-12));
    }
  }
  SUBCASE("random weights match the loop oracle") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      auto p = make_params(8, seed);
      randomize(p, seed + 7);
      auto x = random_array({3, 8}, seed + 77);
      CHECK(fdn::max_abs_diff(run_attention(x, p, 4), oracle_attention(x, p, 4)) < 1e-12);
    }
  }
  SUBCASE("H=1 identity reduces to softmax(X X^T / sqrt d) X") {
    auto p = make_params(8, 5);
    cond::set_identity_attention(p);
    auto x = random_array({4, 8}, 6);
    auto y = run_attention(x, p, 1);
    DenseArray expect = DenseArray::matrix(4, 8);
    for (std::size_t i = 0; i < 4; ++i) {
      std::vector<double> w(4);
      double z = 0.0;
      for (std::size_t j = 0; j < 4; ++j) {
        w[j] = std::exp(fdn::dot(x.row_span(i), x.row_span(j)) / std::sqrt(8.0));
        z += w[j];
      }
      for (std::size_t c = 0; c < 8; ++c)
        for (std::size_t j = 0; j < 4; ++j) expect.at(i, c) += w[j] / z * x.at(j, c);
    }
    CHECK(fdn::max_abs_diff(y, expect) < 1e-12);
  }
  SUBCASE("heads must divide the width") {
    auto p = make_params(8, 1);
    CHECK_THROWS_AS(run_attention(random_array({2, 8}, 1), p, 3), fdn::ParameterError);
  }
}

TEST_CASE("self_attention_forward is batch-permutation equivariant") {
  auto p = make_params(16, 11);
  randomize(p, 12, 0.1);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto x = random_array({5, 16}, seed);
    std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    DenseArray xp = DenseArray::matrix(5, 16);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t c = 0; c < 16; ++c) xp.at(i, c) = x.at(perm[i], c);
    auto y = run_attention(x, p, 4);
    auto yp = run_attention(xp, p, 4);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t c = 0; c < 16; ++c) CHECK(std::abs(yp.at(i, c) - y.at(perm[i], c)) < 1e-12);
  }
}

TEST_CASE("fuse_features examples") {
  SUBCASE("lambda=0 returns X exactly") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      auto x = random_array({3, 8}, seed);
      x[seed % 24] = 0.0;  // exact zeros must pass through too
      auto y = run_fuse(x, random_array({3, 8}, seed + 1), random_array({3, 8}, seed + 2), 0.0);
      CHECK(y == x);
    }
  }
  SUBCASE("ones") {
    DenseArray ones({2, 3}, 1.0);
    auto y = run_fuse(ones, ones, ones, 1.0);
    for (double v : y.data()) CHECK(v == doctest::Approx(2.0).epsilon(1e-7));
  }
  SUBCASE("scalar arithmetic") {
    auto y = run_fuse(DenseArray::scalar(2.0), DenseArray::scalar(3.0), DenseArray::scalar(4.0),
                      0.5);
    // 6 / (2 + eps) + 2 sits 1.5e-8 below 5.
    CHECK(std::abs(y.item() - (2.0 + 6.0 / (2.0 + 1e-8))) < 1e-15);
    CHECK(std::abs(y.item() - 5.0) < 2e-8);
  }
  SUBCASE("random inputs match the scalar oracle") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      auto x = random_array({4, 6}, seed);
      auto xp = random_array({4, 6}, seed + 100);
      auto xs = random_array({4, 6}, seed + 200);
      CHECK(fdn::max_abs_diff(run_fuse(x, xp, xs, 0.7), oracle_fuse(x, xp, xs, 0.7)) < 1e-12);
    }
  }
}

TEST_CASE("pif_pipeline examples") {
  SUBCASE("k=d and lambda=0 is the identity") {
    auto p = make_params(16, 1, 0.0);
    auto x = fdn::testing::random_unit_rows(4, 16, 2);
    ad::Tape t;
    auto psi = cond::pif_pipeline(t, p, t.constant(x), 4, fdn::spectral::build_lowpass_mask(16, 16));
    CHECK(fdn::max_abs_diff(psi.value(), x) < 1e-9);
  }
  SUBCASE("constant rows survive any k when lambda=0") {
    auto p = make_params(16, 1, 0.0);
    DenseArray x({3, 16}, 0.25);
    for (std::size_t k : {1u, 2u, 7u, 16u}) {
      ad::Tape t;
      auto psi = cond::pif_pipeline(t, p, t.constant(x), 4, fdn::spectral::build_lowpass_mask(16, k));
      CHECK(fdn::max_abs_diff(psi.value(), x) < 1e-12);
    }
  }
  SUBCASE("random B=4, d=16, k=11 matches the chained oracles") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      auto p = make_params(16, seed, 0.3);
      randomize(p, seed + 31, 0.2);
      auto x = fdn::testing::random_unit_rows(4, 16, seed + 9);
      auto spec = fdn::spectral::build_lowpass_mask(16, 11);
      ad::Tape t;
      auto psi = cond::pif_pipeline(t, p, t.constant(x), 4, spec);
      auto fused = oracle_fuse(x, oracle_projection(x, p), oracle_attention(x, p, 4), 0.3);
      // Odd k keeps a conjugate-symmetric band, so the filter is a real
      // orthogonal projection onto |f| <= 5 cosines and sines.
      DenseArray expect = DenseArray::matrix(4, 16);
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t pp = 0; pp < 16; ++pp) {
          double s = 0.0;
          for (std::size_t j = 0; j < 16; ++j) {
            double w = 1.0;
            for (int f = 1; f <= 5; ++f)
              w += 2.0 * std::cos(2.0 * M_PI * f * (static_cast<double>(pp) - static_cast<double>(j)) / 16.0);
            s += w / 16.0 * fused.at(r, j);
          }
          expect.at(r, pp) = s;
        }
      CHECK(psi.value().shape() == x.shape());
      CHECK(fdn::max_abs_diff(psi.value(), expect) < 1e-10);
    }
  }
  SUBCASE("filter length must match") {
    auto p = make_params(16, 1);
    ad::Tape t;
    CHECK_THROWS_AS(cond::pif_pipeline(t, p, t.constant(random_array({2, 16}, 1)), 4,
                                       fdn::spectral::build_lowpass_mask(8, 3)),
                    fdn::DimensionError);
  }
}

TEST_CASE("pif_pipeline gradients pass finite differences") {
  for (std::size_t k : {16u, 11u}) {
    auto p = make_params(16, 40 + k, 0.3);
    randomize(p, k, 0.1);
    p.set_learnable(cond::kLambda, true);
    p.add("x", fdn::testing::random_unit_rows(3, 16, k));
    p.add("w", random_array({3, 16}, k + 1));
    auto spec = fdn::spectral::build_lowpass_mask(16, k);
    auto report = ad::finite_diff_check(
        [&spec](ad::Tape& t, const ad::ParamStore& ps) {
          auto psi = cond::pif_pipeline(t, ps, ps.bind(t, "x"), 4, spec);
          return ad::sum(ad::mul(psi, ps.bind(t, "w")));
        },
        p);
    INFO("k=" << k << " worst=" << report.worst_param << "[" << report.worst_index << "]");
    CHECK(report.max_rel_error < 1e-4);
    CHECK(report.checked == p.learnable_scalar_count());
  }
}

TEST_CASE("clamp_lambda") {
  auto p = make_params(8, 1);
  p.get_mut(cond::kLambda)[0] = 2.7;
  cond::clamp_lambda(p);
  CHECK(p.get(cond::kLambda).item() == 2.0);
  p.get_mut(cond::kLambda)[0] = -0.1;
  cond::clamp_lambda(p);
  CHECK(p.get(cond::kLambda).item() == 0.0);
}
