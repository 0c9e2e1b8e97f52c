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

#include "fdn/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "fdn/errors.hpp"

namespace fdn::ad {

// ---------------------------------------------------------------------------
// Var / Tape
// ---------------------------------------------------------------------------

const DenseArray& Var::value() const {
  if (!tape_) throw StateError("use of an unbound Var");
  return tape_->value_of(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

const DenseArray& Tape::value_of(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.borrowed ? *n.borrowed : n.value;
}

Var Tape::parameter(const std::string& name, const DenseArray& value) {
  if (finished_) throw StateError("tape already consumed by backward()");
  if (auto it = params_.find(name); it != params_.end()) return Var(this, it->second);
  if (!value.all_finite()) throw NumericError("parameter '" + name + "' is not finite");
  Node n;
  n.op = "parameter";
  n.value = value;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  params_.emplace(name, nodes_.size() - 1);
  param_order_.push_back(name);
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(DenseArray value) {
  if (finished_) throw StateError("tape already consumed by backward()");
  if (!value.all_finite()) throw NumericError("constant is not finite");
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant_ref(const DenseArray& value) {
  if (finished_) throw StateError("tape already consumed by backward()");
  Node n;
  n.op = "constant";
  n.borrowed = &value;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(const char* op, DenseArray value, std::vector<Var> inputs, BackwardFn backward) {
  if (finished_) throw StateError("tape already consumed by backward()");
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite output from op '") + op + "'");
  }
  Node n;
  n.op = op;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (&v.tape() != this) throw ContractError(std::string("op '") + op + "' mixes tapes");
    n.inputs.push_back(v.id());
    n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

std::vector<std::string> Tape::parameter_names() const { return param_order_; }

Gradients Tape::backward(Var loss) {
  if (finished_) throw StateError("backward() called twice on the same tape");
  if (&loss.tape() != this) throw ContractError("loss belongs to another tape");
  if (loss.value().size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        shape_string(loss.value().shape()));
  }
  finished_ = true;

  std::vector<DenseArray> grads(nodes_.size());
  auto grad_slot = [&](std::size_t id) -> DenseArray& {
    if (grads[id].empty()) grads[id] = DenseArray(value_of(id).shape(), 0.0);
    return grads[id];
  };
  if (nodes_[loss.id()].requires_grad) grad_slot(loss.id())[0] = 1.0;

  std::vector<DenseArray*> slots;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || !n.backward || grads[id].empty()) continue;
    slots.assign(n.inputs.size(), nullptr);
    for (std::size_t i = 0; i < n.inputs.size(); ++i) {
      if (nodes_[n.inputs[i]].requires_grad) slots[i] = &grad_slot(n.inputs[i]);
    }
    n.backward(grads[id], value_of(id), slots);
    grads[id] = DenseArray();
  }

  Gradients out;
  for (const auto& name : param_order_) {
    const std::size_t id = params_.at(name);
    out.emplace(name, grads[id].empty() ? DenseArray(value_of(id).shape(), 0.0)
                                        : std::move(grads[id]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

std::size_t ParamStore::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw LookupError("unknown parameter '" + name + "'");
  return it->second;
}

void ParamStore::add(const std::string& name, DenseArray value, bool learnable) {
  if (contains(name)) throw ContractError("duplicate parameter '" + name + "'");
  index_.emplace(name, names_.size());
  names_.push_back(name);
  values_.push_back(std::move(value));
  learnable_.push_back(learnable);
}

const DenseArray& ParamStore::get(const std::string& name) const { return values_[index_of(name)]; }
DenseArray& ParamStore::get_mut(const std::string& name) { return values_[index_of(name)]; }
bool ParamStore::learnable(const std::string& name) const { return learnable_[index_of(name)]; }
void ParamStore::set_learnable(const std::string& name, bool learnable) {
  learnable_[index_of(name)] = learnable;
}

std::vector<std::string> ParamStore::learnable_names() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (learnable_[i]) out.push_back(names_[i]);
  }
  return out;
}

std::size_t ParamStore::learnable_scalar_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (learnable_[i]) n += values_[i].size();
  }
  return n;
}

Var ParamStore::bind(Tape& tape, const std::string& name) const {
  const std::size_t i = index_of(name);
  return learnable_[i] ? tape.parameter(name, values_[i]) : tape.constant_ref(values_[i]);
}

bool ParamStore::operator==(const ParamStore& other) const {
  return names_ == other.names_ && values_ == other.values_ && learnable_ == other.learnable_;
}

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

namespace {

void require_same_shape(const char* op, const DenseArray& a, const DenseArray& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

void require_2d(const char* op, const DenseArray& a) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a rank-2 array, got " +
                         shape_string(a.shape()));
  }
}

// out (m x p) += a (m x n) * b (n x p)
void gemm_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t n,
              std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out + i * p;
    const double* arow = a + i * n;
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = arow[k];
      if (aik == 0.0) continue;
      const double* brow = b + k * p;
      for (std::size_t j = 0; j < p; ++j) orow[j] += aik * brow[j];
    }
  }
}

// out (m x n) += g (m x p) * b^T where b is (n x p)
void gemm_abt_acc(const double* g, const double* b, double* out, std::size_t m, std::size_t n,
                  std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * p;
    double* orow = out + i * n;
    for (std::size_t k = 0; k < n; ++k) {
      const double* brow = b + k * p;
      double s = 0.0;
      for (std::size_t j = 0; j < p; ++j) s += grow[j] * brow[j];
      orow[k] += s;
    }
  }
}

// out (n x p) += a^T * g where a is (m x n), g is (m x p)
void gemm_atb_acc(const double* a, const double* g, double* out, std::size_t m, std::size_t n,
                  std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    const double* grow = g + i * p;
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = arow[k];
      if (aik == 0.0) continue;
      double* orow = out + k * p;
      for (std::size_t j = 0; j < p; ++j) orow[j] += aik * grow[j];
    }
  }
}

bool is_scalar(const DenseArray& a) { return a.size() == 1; }

}  // namespace

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
  const DenseArray& av = a.value();
  const DenseArray& bv = b.value();
  require_2d("matmul", av);
  require_2d("matmul", bv);
  const std::size_t m = av.rows(), n = av.cols(), p = bv.cols();
  if (bv.rows() != n) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_string(av.shape()) + " x " +
                         shape_string(bv.shape()));
  }
  DenseArray out = DenseArray::matrix(m, p);
  gemm_acc(av.data().data(), bv.data().data(), out.data().data(), m, n, p);
  return a.tape().record("matmul", std::move(out), {a, b},
                         [a, b, m, n, p](const DenseArray& g, const DenseArray&, std::span<DenseArray* const> in) {
                           if (in[0]) {
                             gemm_abt_acc(g.data().data(), b.value().data().data(),
                                          in[0]->data().data(), m, n, p);
                           }
                           if (in[1]) {
                             gemm_atb_acc(a.value().data().data(), g.data().data(),
                                          in[1]->data().data(), m, n, p);
                           }
                         });
}

Var transpose(Var a) {
  const DenseArray& av = a.value();
  require_2d("transpose", av);
  const std::size_t r = av.rows(), c = av.cols();
  DenseArray out = DenseArray::matrix(c, r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = av.at(i, j);
  return a.tape().record("transpose", std::move(out), {a},
                         [r, c](const DenseArray& g, const DenseArray&, std::span<DenseArray* const> in) {
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j) in[0]->at(i, j) += g.at(j, i);
                         });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

double safe_div_value(double a, double b, double eps) {
  if (std::abs(b) <= 1e-30 && a == 0.0) return 0.0;
  const double den = b >= 0.0 ? b + eps : b - eps;
  const double q = a / den;
  constexpr double big = std::numeric_limits<double>::max();
  return std::clamp(q, -big, big);
}

Var elementwise(ElementwiseKind kind, Var a, Var b) {
  const DenseArray& av = a.value();
  const DenseArray& bv = b.value();
  const bool broadcast = is_scalar(bv) && !is_scalar(av);
  if (!broadcast) require_same_shape("elementwise", av, bv);
  const std::size_t n = av.size();
  auto bval = [broadcast](const DenseArray& x, std::size_t i) { return broadcast ? x[0] : x[i]; };

  DenseArray out(av.shape());
  switch (kind) {
    case ElementwiseKind::add:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bval(bv, i);
      break;
    case ElementwiseKind::sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - bval(bv, i);
      break;
    case ElementwiseKind::mul:
    case ElementwiseKind::scale:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bval(bv, i);
      break;
    case ElementwiseKind::safe_div:
      for (std::size_t i = 0; i < n; ++i) out[i] = safe_div_value(av[i], bval(bv, i));
      break;
  }

  static constexpr const char* names[] = {"add", "sub", "mul", "safe_div", "scale"};
  return a.tape().record(
      names[static_cast<int>(kind)], std::move(out), {a, b},
      [a, b, kind, broadcast, n](const DenseArray& g, const DenseArray&, std::span<DenseArray* const> in) {
        const DenseArray& av = a.value();
        const DenseArray& bv = b.value();
        auto bidx = [broadcast](std::size_t i) { return broadcast ? std::size_t{0} : i; };
        for (std::size_t i = 0; i < n; ++i) {
          const double bi = bv[bidx(i)];
          double da = 0.0, db = 0.0;
          switch (kind) {
            case ElementwiseKind::add: da = g[i]; db = g[i]; break;
            case ElementwiseKind::sub: da = g[i]; db = -g[i]; break;
            case ElementwiseKind::mul:
            case ElementwiseKind::scale: da = g[i] * bi; db = g[i] * av[i]; break;
            case ElementwiseKind::safe_div: {
              const double den = bi >= 0.0 ? bi + 1e-8 : bi - 1e-8;
              da = g[i] / den;
              if (!(std::abs(bi) <= 1e-30 && av[i] == 0.0)) db = -g[i] * av[i] / (den * den);
              break;
            }
          }
          if (in[0]) (*in[0])[i] += da;
          if (in[1]) (*in[1])[bidx(i)] += db;
        }
      });
}

Var add(Var a, Var b) { return elementwise(ElementwiseKind::add, a, b); }
Var sub(Var a, Var b) { return elementwise(ElementwiseKind::sub, a, b); }
Var mul(Var a, Var b) { return elementwise(ElementwiseKind::mul, a, b); }

Var safe_div(Var a, Var b, double eps) {
  if (eps == 1e-8) return elementwise(ElementwiseKind::safe_div, a, b);
  // Non-default epsilon: same rule, own closure.
  const DenseArray& av = a.value();
  const DenseArray& bv = b.value();
  require_same_shape("safe_div", av, bv);
  DenseArray out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = safe_div_value(av[i], bv[i], eps);
  return a.tape().record("safe_div", std::move(out), {a, b},
                         [a, b, eps](const DenseArray& g, const DenseArray&, std::span<DenseArray* const> in) {
                           const DenseArray& av = a.value();
                           const DenseArray& bv = b.value();
                           for (std::size_t i = 0; i < av.size(); ++i) {
                             const double den = bv[i] >= 0.0 ? bv[i] + eps : bv[i] - eps;
                             if (in[0]) (*in[0])[i] += g[i] / den;
                             if (in[1] && !(std::abs(bv[i]) <= 1e-30 && av[i] == 0.0))
                               (*in[1])[i] -= g[i] * av[i] / (den * den);
                           }
                         });
}

Var scale(Var a, double factor) {
  const DenseArray& av = a.value();
  DenseArray out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * factor;
  return a.tape().record("scale", std::move(out), {a},
                         [factor](const DenseArray& g, const DenseArray&, std::span<DenseArray* const> in) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i] * factor;
                         });
}

Var add_row_vector(Var a, Var bias) {
  const DenseArray& av = a.value();
  const DenseArray& bv = bias.value();
  require_2d("add_row_vector", av);
  const std::size_t r = av.rows(), c = av.cols();
  if (bv.size() != c) {
    throw DimensionError("add_row_vector: bias of size " + std::to_string(bv.size()) +
                         " for " + std::to_string(c) + " columns");
  }
  DenseArray out = av;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) += bv[j];
  return a.tape().record("add_row_vector", std::move(out), {a, bias},
                         [r, c](const DenseArray& g, const DenseArray&, std::span<DenseArray* const> in) {
                           if (in[0])
                             for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i];
                           if (in[1])
                             for (std::size_t i = 0; i < r; ++i)
                               for (std::size_t j = 0; j < c; ++j) (*in[1])[j] += g.at(i, j);
                         });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

namespace {

double std_normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }
double std_normal_pdf(double z) {
  return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
}

}  // namespace

double gelu_value(double z) { return z * std_normal_cdf(z); }

Var activation(ActivationKind kind, Var a) {
  const DenseArray& av = a.value();
  DenseArray out(av.shape());
  if (kind == ActivationKind::gelu) {
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = gelu_value(av[i]);
    return a.tape().record("gelu", std::move(out), {a},
                           [a](const DenseArray& g, const DenseArray&, std::span<DenseArray* const> in) {
                             const DenseArray& x = a.value();
                             for (std::size_t i = 0; i < g.size(); ++i) {
                               const double z = x[i];
                               (*in[0])[i] += g[i] * (std_normal_cdf(z) + z * std_normal_pdf(z));
                             }
                           });
  }
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  return a.tape().record("relu", std::move(out), {a},
                         [a](const DenseArray& g, const DenseArray&, std::span<DenseArray* const> in) {
                           const DenseArray& x = a.value();
                           for (std::size_t i = 0; i < g.size(); ++i)
                             if (x[i] > 0.0) (*in[0])[i] += g[i];
                         });
}

Var gelu(Var a) { return activation(ActivationKind::gelu, a); }
Var relu(Var a) { return activation(ActivationKind::relu, a); }

// ---------------------------------------------------------------------------
// Row-wise normalizations
// ---------------------------------------------------------------------------

Var softmax_rows(Var a) {
  const DenseArray& av = a.value();
  require_2d("softmax_rows", av);
  const std::size_t r = av.rows(), c = av.cols();
  DenseArray out(av.shape());
  for (std::size_t i = 0; i < r; ++i) {
    auto x = av.row_span(i);
    auto y = out.row_span(i);
    const double mx = *std::max_element(x.begin(), x.end());
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < c; ++j) y[j] /= s;
  }
  return a.tape().record(
      "softmax_rows", std::move(out), {a},
      [r, c](const DenseArray& g, const DenseArray& y, std::span<DenseArray* const> in) {
        for (std::size_t i = 0; i < r; ++i) {
          double gy = 0.0;
          for (std::size_t j = 0; j < c; ++j) gy += g.at(i, j) * y.at(i, j);
          for (std::size_t j = 0; j < c; ++j) in[0]->at(i, j) += y.at(i, j) * (g.at(i, j) - gy);
        }
      });
}

Var layer_norm_rows(Var a, double eps) {
  const DenseArray& av = a.value();
  require_2d("layer_norm_rows", av);
  const std::size_t r = av.rows(), c = av.cols();
  DenseArray out(av.shape());
  std::vector<double> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    auto x = av.row_span(i);
    double mu = 0.0;
    for (double v : x) mu += v;
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = (x[j] - mu) * inv_std[i];
  }
  return a.tape().record(
      "layer_norm_rows", std::move(out), {a},
      [r, c, inv_std = std::move(inv_std)](const DenseArray& g, const DenseArray& y,
                                           std::span<DenseArray* const> in) {
        const double inv_c = 1.0 / static_cast<double>(c);
        for (std::size_t i = 0; i < r; ++i) {
          double mg = 0.0, mgy = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            mg += g.at(i, j);
            mgy += g.at(i, j) * y.at(i, j);
          }
          mg *= inv_c;
          mgy *= inv_c;
          for (std::size_t j = 0; j < c; ++j)
            in[0]->at(i, j) += inv_std[i] * (g.at(i, j) - mg - y.at(i, j) * mgy);
        }
      });
}

Var l2_normalize_rows(Var a) {
  const DenseArray& av = a.value();
  require_2d("l2_normalize_rows", av);
  const std::size_t r = av.rows(), c = av.cols();
  DenseArray out(av.shape());
  std::vector<double> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    norms[i] = l2_norm(av.row_span(i));
    if (norms[i] < 1e-300) throw NumericError("l2_normalize_rows: zero row");
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = av.at(i, j) / norms[i];
  }
  return a.tape().record(
      "l2_normalize_rows", std::move(out), {a},
      [r, c, norms = std::move(norms)](const DenseArray& g, const DenseArray& y,
                                       std::span<DenseArray* const> in) {
        for (std::size_t i = 0; i < r; ++i) {
          const double gy = dot(g.row_span(i), y.row_span(i));
          for (std::size_t j = 0; j < c; ++j)
            in[0]->at(i, j) += (g.at(i, j) - y.at(i, j) * gy) / norms[i];
        }
      });
}

Var log_clamped(Var a, double floor) {
  const DenseArray& av = a.value();
  DenseArray out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::log(std::max(av[i], floor));
  return a.tape().record("log_clamped", std::move(out), {a},
                         [a, floor](const DenseArray& g, const DenseArray&,
                                    std::span<DenseArray* const> in) {
                           const DenseArray& x = a.value();
                           for (std::size_t i = 0; i < g.size(); ++i)
                             if (x[i] > floor) (*in[0])[i] += g[i] / x[i];
                         });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Var sum(Var a) {
  const DenseArray& av = a.value();
  double s = 0.0;
  for (double v : av.data()) s += v;
  return a.tape().record("sum", DenseArray::scalar(s), {a},
                         [](const DenseArray& g, const DenseArray&, std::span<DenseArray* const> in) {
                           for (double& v : in[0]->data()) v += g[0];
                         });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var row_sum(Var a) {
  const DenseArray& av = a.value();
  require_2d("row_sum", av);
  const std::size_t r = av.rows(), c = av.cols();
  DenseArray out = DenseArray::matrix(r, 1);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += av.at(i, j);
  return a.tape().record("row_sum", std::move(out), {a},
                         [r, c](const DenseArray& g, const DenseArray&,
                                std::span<DenseArray* const> in) {
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j) in[0]->at(i, j) += g[i];
                         });
}

Var col_mean(Var a) {
  const DenseArray& av = a.value();
  require_2d("col_mean", av);
  const std::size_t r = av.rows(), c = av.cols();
  DenseArray out = DenseArray::matrix(1, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += av.at(i, j);
  for (std::size_t j = 0; j < c; ++j) out[j] /= static_cast<double>(r);
  return a.tape().record("col_mean", std::move(out), {a},
                         [r, c](const DenseArray& g, const DenseArray&,
                                std::span<DenseArray* const> in) {
                           const double inv = 1.0 / static_cast<double>(r);
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j) in[0]->at(i, j) += g[j] * inv;
                         });
}

Var mean_pool_segments(Var a, std::size_t segment_rows) {
  const DenseArray& av = a.value();
  require_2d("mean_pool_segments", av);
  const std::size_t r = av.rows(), c = av.cols();
  if (segment_rows == 0 || r % segment_rows != 0) {
    throw DimensionError("mean_pool_segments: " + std::to_string(r) +
                         " rows not divisible into segments of " + std::to_string(segment_rows));
  }
  const std::size_t s = r / segment_rows;
  const double inv = 1.0 / static_cast<double>(segment_rows);
  DenseArray out = DenseArray::matrix(s, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(i / segment_rows, j) += av.at(i, j) * inv;
  return a.tape().record("mean_pool_segments", std::move(out), {a},
                         [r, c, segment_rows, inv](const DenseArray& g, const DenseArray&,
                                                   std::span<DenseArray* const> in) {
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j)
                               in[0]->at(i, j) += g.at(i / segment_rows, j) * inv;
                         });
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

Var reshape(Var a, std::size_t rows, std::size_t cols) {
  DenseArray out = a.value().reshaped({rows, cols});
  return a.tape().record("reshape", std::move(out), {a},
                         [](const DenseArray& g, const DenseArray&, std::span<DenseArray* const> in) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i];
                         });
}

Var slice_cols(Var a, std::size_t start, std::size_t count) {
  const DenseArray& av = a.value();
  require_2d("slice_cols", av);
  const std::size_t r = av.rows();
  if (count == 0 || start + count > av.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") outside " +
                         std::to_string(av.cols()) + " columns");
  }
  DenseArray out = DenseArray::matrix(r, count);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) out.at(i, j) = av.at(i, start + j);
  return a.tape().record("slice_cols", std::move(out), {a},
                         [r, start, count](const DenseArray& g, const DenseArray&,
                                           std::span<DenseArray* const> in) {
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < count; ++j)
                               in[0]->at(i, start + j) += g.at(i, j);
                         });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t r = parts[0].value().rows();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const Var& p : parts) {
    require_2d("concat_cols", p.value());
    if (p.value().rows() != r) throw DimensionError("concat_cols: row count mismatch");
    offsets.push_back(total);
    total += p.value().cols();
  }
  DenseArray out = DenseArray::matrix(r, total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const DenseArray& pv = parts[k].value();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < pv.cols(); ++j) out.at(i, offsets[k] + j) = pv.at(i, j);
  }
  return parts[0].tape().record(
      "concat_cols", std::move(out), parts,
      [r, offsets](const DenseArray& g, const DenseArray&, std::span<DenseArray* const> in) {
        for (std::size_t k = 0; k < in.size(); ++k) {
          if (!in[k]) continue;
          const std::size_t w = in[k]->cols();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j) in[k]->at(i, j) += g.at(i, offsets[k] + j);
        }
      });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts[0].value().cols();
  std::vector<double> data;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    require_2d("concat_rows", p.value());
    if (p.value().cols() != c) throw DimensionError("concat_rows: column count mismatch");
    offsets.push_back(data.size());
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  }
  const std::size_t r = data.size() / c;
  return parts[0].tape().record(
      "concat_rows", DenseArray({r, c}, std::move(data)), parts,
      [offsets](const DenseArray& g, const DenseArray&, std::span<DenseArray* const> in) {
        for (std::size_t k = 0; k < in.size(); ++k) {
          if (!in[k]) continue;
          for (std::size_t i = 0; i < in[k]->size(); ++i) (*in[k])[i] += g[offsets[k] + i];
        }
      });
}

Var gather_rows(Var a, std::vector<std::size_t> indices) {
  const DenseArray& av = a.value();
  require_2d("gather_rows", av);
  const std::size_t c = av.cols();
  if (indices.empty()) throw DimensionError("gather_rows: empty index list");
  DenseArray out = DenseArray::matrix(indices.size(), c);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= av.rows()) throw IndexError("gather_rows: row index out of range");
    std::copy_n(av.row_span(indices[i]).begin(), c, out.row_span(i).begin());
  }
  return a.tape().record("gather_rows", std::move(out), {a},
                         [c, indices = std::move(indices)](const DenseArray& g, const DenseArray&,
                                                           std::span<DenseArray* const> in) {
                           for (std::size_t i = 0; i < indices.size(); ++i)
                             for (std::size_t j = 0; j < c; ++j)
                               in[0]->at(indices[i], j) += g.at(i, j);
                         });
}

Var pick_per_row(Var a, std::vector<std::size_t> indices) {
  const DenseArray& av = a.value();
  require_2d("pick_per_row", av);
  if (indices.size() != av.rows()) throw DimensionError("pick_per_row: one index per row");
  DenseArray out = DenseArray::matrix(av.rows(), 1);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= av.cols()) throw IndexError("pick_per_row: column index out of range");
    out[i] = av.at(i, indices[i]);
  }
  return a.tape().record("pick_per_row", std::move(out), {a},
                         [indices = std::move(indices)](const DenseArray& g, const DenseArray&,
                                                        std::span<DenseArray* const> in) {
                           for (std::size_t i = 0; i < indices.size(); ++i)
                             in[0]->at(i, indices[i]) += g[i];
                         });
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

Var segment_attention(Var q, Var k, Var v, std::size_t segment_rows, std::size_t heads,
                      double score_scale) {
  const DenseArray& qv = q.value();
  const DenseArray& kv = k.value();
  const DenseArray& vv = v.value();
  require_2d("segment_attention", qv);
  require_same_shape("segment_attention", qv, kv);
  require_same_shape("segment_attention", qv, vv);
  const std::size_t n = qv.rows(), width = qv.cols();
  if (segment_rows == 0 || n % segment_rows != 0) {
    throw DimensionError("segment_attention: rows not divisible by segment length");
  }
  if (heads == 0 || width % heads != 0) {
    throw ParameterError("segment_attention: width " + std::to_string(width) +
                         " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t L = segment_rows, dh = width / heads, segments = n / L;

  // probs layout: [segment][head][L x L]
  std::vector<double> probs(segments * heads * L * L);
  DenseArray out = DenseArray::matrix(n, width);
  for (std::size_t s = 0; s < segments; ++s) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* P = probs.data() + (s * heads + h) * L * L;
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < L; ++i) {
        const double* qi = qv.data().data() + (s * L + i) * width + c0;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < L; ++j) {
          const double* kj = kv.data().data() + (s * L + j) * width + c0;
          double sc = 0.0;
          for (std::size_t t = 0; t < dh; ++t) sc += qi[t] * kj[t];
          P[i * L + j] = sc * score_scale;
          mx = std::max(mx, P[i * L + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < L; ++j) z += (P[i * L + j] = std::exp(P[i * L + j] - mx));
        for (std::size_t j = 0; j < L; ++j) P[i * L + j] /= z;
        double* oi = out.data().data() + (s * L + i) * width + c0;
        for (std::size_t j = 0; j < L; ++j) {
          const double* vj = vv.data().data() + (s * L + j) * width + c0;
          const double pij = P[i * L + j];
          for (std::size_t t = 0; t < dh; ++t) oi[t] += pij * vj[t];
        }
      }
    }
  }

  return q.tape().record(
      "segment_attention", std::move(out), {q, k, v},
      [q, k, v, L, dh, width, heads, segments, score_scale, probs = std::move(probs)](
          const DenseArray& g, const DenseArray&, std::span<DenseArray* const> in) {
        const DenseArray& qv = q.value();
        const DenseArray& kv = k.value();
        const DenseArray& vv = v.value();
        std::vector<double> dP(L * L), dS(L * L);
        for (std::size_t s = 0; s < segments; ++s) {
          for (std::size_t h = 0; h < heads; ++h) {
            const double* P = probs.data() + (s * heads + h) * L * L;
            const std::size_t c0 = h * dh;
            for (std::size_t i = 0; i < L; ++i) {
              const double* gi = g.data().data() + (s * L + i) * width + c0;
              for (std::size_t j = 0; j < L; ++j) {
                const double* vj = vv.data().data() + (s * L + j) * width + c0;
                double acc = 0.0;
                for (std::size_t t = 0; t < dh; ++t) acc += gi[t] * vj[t];
                dP[i * L + j] = acc;
                if (in[2]) {
                  double* dvj = in[2]->data().data() + (s * L + j) * width + c0;
                  const double pij = P[i * L + j];
                  for (std::size_t t = 0; t < dh; ++t) dvj[t] += pij * gi[t];
                }
              }
              double row = 0.0;
              for (std::size_t j = 0; j < L; ++j) row += dP[i * L + j] * P[i * L + j];
              for (std::size_t j = 0; j < L; ++j)
                dS[i * L + j] = P[i * L + j] * (dP[i * L + j] - row) * score_scale;
            }
            for (std::size_t i = 0; i < L; ++i) {
              for (std::size_t j = 0; j < L; ++j) {
                const double ds = dS[i * L + j];
                if (ds == 0.0) continue;
                if (in[0]) {
                  double* dqi = in[0]->data().data() + (s * L + i) * width + c0;
                  const double* kj = kv.data().data() + (s * L + j) * width + c0;
                  for (std::size_t t = 0; t < dh; ++t) dqi[t] += ds * kj[t];
                }
                if (in[1]) {
                  double* dkj = in[1]->data().data() + (s * L + j) * width + c0;
                  const double* qi = qv.data().data() + (s * L + i) * width + c0;
                  for (std::size_t t = 0; t < dh; ++t) dkj[t] += ds * qi[t];
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

GradCheckReport finite_diff_check(const ScalarBuilder& f, const ParamStore& params, double h,
                                  std::size_t max_per_param) {
  if (!(h > 0.0)) throw ParameterError("finite_diff_check: step must be positive");
  Gradients analytic;
  {
    Tape tape;
    Var loss = f(tape, params);
    analytic = tape.backward(loss);
  }
  auto evaluate = [&f](const ParamStore& p) {
    Tape tape;
    return f(tape, p).value().item();
  };

  GradCheckReport report;
  ParamStore probe = params;
  for (const auto& name : params.learnable_names()) {
    DenseArray& w = probe.get_mut(name);
    const auto it = analytic.find(name);
    const std::size_t n = w.size();
    const std::size_t stride =
        (max_per_param == 0 || n <= max_per_param) ? 1 : (n + max_per_param - 1) / max_per_param;
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = w[i];
      w[i] = saved + h;
      const double up = evaluate(probe);
      w[i] = saved - h;
      const double down = evaluate(probe);
      w[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = it == analytic.end() ? 0.0 : it->second[i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      ++report.checked;
      if (err > report.max_rel_error || report.worst_param.empty()) {
        if (err >= report.max_rel_error) {
          report.max_rel_error = err;
          report.worst_param = name;
          report.worst_index = i;
        }
      }
    }
  }
  return report;
}

}  // namespace fdn::ad
