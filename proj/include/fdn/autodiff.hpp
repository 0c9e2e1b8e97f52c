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

#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "fdn/dense_array.hpp"

namespace fdn::ad {

class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
class Var {
 public:
  Var() = default;

  const DenseArray& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

using Gradients = std::map<std::string, DenseArray>;

/// Accumulates upstream gradient `g` into the gradients of each input.
/// `out` is the node's own forward value. `input_grads[i]` is null when
/// input i does not require a gradient.
using BackwardFn = std::function<void(const DenseArray& g, const DenseArray& out,
                                      std::span<DenseArray* const> input_grads)>;

/// One-shot reverse-mode tape over a static DAG. Nodes are appended in
/// execution order, so the recording order is already topological.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Learnable leaf. Registering the same name twice returns the first node.
  Var parameter(const std::string& name, const DenseArray& value);
  Var constant(DenseArray value);
  /// Constant that borrows `value`; it must outlive the tape.
  Var constant_ref(const DenseArray& value);

  /// Appends an op node. Throws NumericError when `value` is not finite.
  Var record(const char* op, DenseArray value, std::vector<Var> inputs, BackwardFn backward);

  /// Gradients for every registered parameter. Callable once per tape.
  Gradients backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  bool finished() const { return finished_; }
  const DenseArray& value_of(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::vector<std::string> parameter_names() const;

 private:
  struct Node {
    const char* op = "";
    DenseArray value;
    const DenseArray* borrowed = nullptr;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> params_;
  std::vector<std::string> param_order_;
  bool finished_ = false;
};

/// Named arrays plus a learnable flag; the single source of truth for model
/// weights. Iteration order is insertion order.
class ParamStore {
 public:
  void add(const std::string& name, DenseArray value, bool learnable = true);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const DenseArray& get(const std::string& name) const;
  DenseArray& get_mut(const std::string& name);
  bool learnable(const std::string& name) const;
  void set_learnable(const std::string& name, bool learnable);

  const std::vector<std::string>& names() const { return names_; }
  std::vector<std::string> learnable_names() const;
  std::size_t learnable_scalar_count() const;

  /// Parameter leaf when learnable, borrowed constant otherwise.
  Var bind(Tape& tape, const std::string& name) const;

  bool operator==(const ParamStore& other) const;

 private:
  std::vector<std::string> names_;
  std::vector<DenseArray> values_;
  std::vector<bool> learnable_;
  std::unordered_map<std::string, std::size_t> index_;

  std::size_t index_of(const std::string& name) const;
};

// ---------------------------------------------------------------------------
// Primitives. Every op checks shapes and registers its adjoint.
// ---------------------------------------------------------------------------

Var matmul(Var a, Var b);
Var transpose(Var a);

enum class ElementwiseKind { add, sub, mul, safe_div, scale };

/// `b` must match `a` in shape or hold a single value (scalar broadcast).
Var elementwise(ElementwiseKind kind, Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var safe_div(Var a, Var b, double eps = 1e-8);
Var scale(Var a, double factor);
Var add_row_vector(Var a, Var bias);

/// Scalar rule shared with tests and oracles.
double safe_div_value(double a, double b, double eps = 1e-8);

enum class ActivationKind { gelu, relu };
Var activation(ActivationKind kind, Var a);
Var gelu(Var a);
Var relu(Var a);
double gelu_value(double z);

Var softmax_rows(Var a);
Var layer_norm_rows(Var a, double eps = 1e-5);
Var l2_normalize_rows(Var a);
Var log_clamped(Var a, double floor);

Var sum(Var a);
Var mean(Var a);
Var row_sum(Var a);
Var col_mean(Var a);
Var mean_pool_segments(Var a, std::size_t segment_rows);

Var reshape(Var a, std::size_t rows, std::size_t cols);
Var slice_cols(Var a, std::size_t start, std::size_t count);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var gather_rows(Var a, std::vector<std::size_t> indices);
/// out[i] = a[i, indices[i]], shape n x 1.
Var pick_per_row(Var a, std::vector<std::size_t> indices);

/// Block-diagonal multi-head attention: rows are grouped into consecutive
/// segments of `segment_rows` tokens and each segment attends only to
/// itself. Columns split evenly into `heads` heads; scores are scaled by
/// `score_scale` before the row softmax.
Var segment_attention(Var q, Var k, Var v, std::size_t segment_rows, std::size_t heads,
                      double score_scale);

// ---------------------------------------------------------------------------
// Finite-difference oracle.
// ---------------------------------------------------------------------------

using ScalarBuilder = std::function<Var(Tape&, const ParamStore&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// Max over learnable scalars of |analytic - central difference| /
/// max(1, |analytic|). `max_per_param` > 0 subsamples large arrays with a
/// fixed stride so every parameter group is still covered.
GradCheckReport finite_diff_check(const ScalarBuilder& f, const ParamStore& params,
                                  double h = 1e-5, std::size_t max_per_param = 0);

}  // namespace fdn::ad
