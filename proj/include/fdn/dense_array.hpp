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
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace fdn {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

/// Row-major dense array of doubles. Most of the engine works on rank-2
/// arrays; higher ranks only appear at module boundaries (e.g. B x M x e
/// visual tokens) and are reshaped before entering the tape.
class DenseArray {
 public:
  DenseArray() = default;
  explicit DenseArray(Shape shape, double fill = 0.0);
  DenseArray(Shape shape, std::vector<double> data);

  static DenseArray matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return DenseArray({rows, cols}, fill);
  }
  static DenseArray from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static DenseArray row(std::initializer_list<double> values);
  static DenseArray row(std::span<const double> values);
  static DenseArray scalar(double value) { return DenseArray({1, 1}, value); }
  static DenseArray identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rank-2 view; a rank-1 array is treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> row_span(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row_span(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  DenseArray reshaped(Shape shape) const;
  bool all_finite() const;
  double item() const;

  bool operator==(const DenseArray&) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

std::size_t shape_product(const Shape& shape);

double max_abs_diff(const DenseArray& a, const DenseArray& b);
double l2_norm(std::span<const double> v);
double dot(std::span<const double> a, std::span<const double> b);

}  // namespace fdn
