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

#include "fdn/dense_array.hpp"

#include <algorithm>
#include <cmath>

#include "fdn/errors.hpp"

namespace fdn {

std::string shape_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

std::size_t shape_product(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

DenseArray::DenseArray(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_product(shape_), fill) {
  for (auto s : shape_) {
    if (s == 0) throw DimensionError("array dimensions must be positive: " + shape_string(shape_));
  }
}

DenseArray::DenseArray(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto s : shape_) {
    if (s == 0) throw DimensionError("array dimensions must be positive: " + shape_string(shape_));
  }
  if (shape_product(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
  }
}

DenseArray DenseArray::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged row list");
    data.insert(data.end(), row.begin(), row.end());
  }
  return DenseArray({r, c}, std::move(data));
}

DenseArray DenseArray::row(std::initializer_list<double> values) {
  return DenseArray({1, values.size()}, std::vector<double>(values));
}

DenseArray DenseArray::row(std::span<const double> values) {
  return DenseArray({1, values.size()}, std::vector<double>(values.begin(), values.end()));
}

DenseArray DenseArray::identity(std::size_t n) {
  DenseArray out = matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) out.at(i, i) = 1.0;
  return out;
}

std::size_t DenseArray::rows() const {
  if (shape_.empty()) return 0;
  if (shape_.size() == 1) return 1;
  return data_.size() / shape_.back();
}

std::size_t DenseArray::cols() const { return shape_.empty() ? 0 : shape_.back(); }

DenseArray DenseArray::reshaped(Shape shape) const {
  if (shape_product(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return DenseArray(std::move(shape), data_);
}

bool DenseArray::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double DenseArray::item() const {
  if (data_.size() != 1) throw ContractError("item() on array of shape " + shape_string(shape_));
  return data_[0];
}

double max_abs_diff(const DenseArray& a, const DenseArray& b) {
  if (a.size() != b.size()) throw DimensionError("max_abs_diff size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

}  // namespace fdn
