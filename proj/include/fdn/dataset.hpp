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

// Embedding dataset files, generalization splits and the synthetic
// generator.
//
// File layout, little-endian:
//   "FDNE" | u32 version (1) | u32 d | u32 n_classes | u32 n_domains |
//   u64 n_records | u32 flags (bit0 text bank, bit1 variant count) |
//   [u32 Z] | class names | domain names | records | [text bank]
// Names are u16 length-prefixed UTF-8. A record is u32 class, u32 domain,
// d x binary32. The text bank is Z x n_classes x d binary32.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fdn/dense_array.hpp"

namespace fdn::data {

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::uint32_t kFlagTextBank = 1u << 0;
inline constexpr std::uint32_t kFlagVariantCount = 1u << 1;

struct EmbeddingDataset {
  std::size_t d = 0;
  std::vector<std::string> class_names;
  std::vector<std::string> domain_names;
  DenseArray features;                 // n_records x d
  std::vector<std::uint32_t> labels;   // class index per record
  std::vector<std::uint32_t> domains;  // domain index per record
  std::size_t text_bank_z = 0;         // 0 when absent
  DenseArray text_bank;                // (Z * n_classes) x d, row z*n_classes + c

  std::size_t size() const { return labels.size(); }
  bool has_text_bank() const { return text_bank_z > 0; }
  bool operator==(const EmbeddingDataset&) const = default;
};

/// Throws FormatError on inconsistent shapes or indices.
void validate(const EmbeddingDataset& ds);

std::vector<std::uint8_t> serialize(const EmbeddingDataset& ds);

struct ReadReport {
  std::size_t renormalized_rows = 0;   // rows off unit length by more than 1e-6
  double max_norm_deviation = 0.0;     // before renormalization
};

/// Parses a byte buffer. Rows are renormalized to unit length; rows already
/// within 1e-6 of unit length are kept bit-exact.
EmbeddingDataset deserialize(const std::vector<std::uint8_t>& bytes, ReadReport* report = nullptr);

void write_dataset(const EmbeddingDataset& ds, const std::filesystem::path& path);
/// Warns on stderr when any row deviated from unit norm by more than 1e-3.
EmbeddingDataset read_dataset(const std::filesystem::path& path, ReadReport* report = nullptr);

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

enum class Task { b2n, cd, dg };

std::string task_name(Task task);
/// Accepts "b2n", "cd", "dg" (any case). ParameterError otherwise.
Task parse_task(const std::string& name);

struct SplitSpec {
  Task task = Task::b2n;
  std::vector<std::size_t> seen_classes;
  std::vector<std::size_t> unseen_classes;
  std::vector<std::size_t> source_domains;
  std::vector<std::size_t> target_domains;
  std::size_t shots = 16;
};

struct EvalSet {
  std::string name;                     // "base", "new", or "target:<domain>"
  std::vector<std::size_t> record_ids;
  std::vector<std::size_t> class_ids;   // candidate classes, label order
};

struct Split {
  SplitSpec spec;
  std::vector<std::size_t> train_ids;   // record ids, grouped by class
  std::vector<EvalSet> eval_sets;
};

/// B2N: classes sorted by name, first half seen; every domain pooled; eval
/// "base" = seen-class records not used for training, "new" = all
/// unseen-class records. CD: train on `source_domain` with the seen half,
/// evaluate each other domain on the unseen half. DG: train on
/// `source_domain` with all classes, evaluate each other domain on all
/// classes. `shots` records per seen class are drawn without replacement.
Split make_split(const EmbeddingDataset& ds, Task task, std::uint64_t seed, std::size_t shots,
                 std::size_t source_domain = 0);

/// Empty when the split is clean; otherwise one message per violation.
std::vector<std::string> leakage_violations(const EmbeddingDataset& ds, const Split& split);

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

struct SynthConfig {
  std::size_t n_classes = 8;
  std::size_t n_domains = 2;
  std::size_t d = 128;
  std::size_t samples_per = 64;   // per class and domain
  std::size_t low_band = 32;
  std::vector<double> clutter_gain{0.0, 0.6};
  std::uint64_t seed = 0;
  double jitter = 0.05;           // expected norm of the low-band jitter
  /// Seed of the frozen text encoder whose class embeddings anchor the
  /// prototypes; the training run must use the same seed.
  std::uint64_t text_seed = 0;
  std::string anchor_template = "a photo of a {}";
};

std::string synth_class_name(std::size_t i);
std::string synth_domain_name(std::size_t i);

/// Per class a unit low-band prototype (|f| < low_band/2); per sample the
/// prototype plus low-band jitter plus high-band clutter (|f| >= low_band/2)
/// scaled by the domain's gain, renormalized and rounded to binary32.
EmbeddingDataset synth_generate(const SynthConfig& config);

/// Projects a row onto bins with |centered f| < cutoff (keep_low) or its
/// complement. Exact real projection for any d.
std::vector<double> band_project(std::span<const double> x, double cutoff, bool keep_low);

}  // namespace fdn::data
