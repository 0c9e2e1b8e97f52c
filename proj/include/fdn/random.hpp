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

#include <cstdint>
#include <random>
#include <string_view>

#include "fdn/dense_array.hpp"

namespace fdn {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Independent stream for a named purpose under one run seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  return splitmix64(seed ^ splitmix64(fnv1a64(tag)));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a) {
  return splitmix64(seed ^ splitmix64(a + 0x632be59bd9b4e019ULL));
}

using Rng = std::mt19937_64;

inline DenseArray normal_array(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  DenseArray a(std::move(shape));
  for (auto& v : a.data()) v = dist(rng);
  return a;
}

inline DenseArray uniform_array(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  DenseArray a(std::move(shape));
  for (auto& v : a.data()) v = dist(rng);
  return a;
}

}  // namespace fdn
