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

// Accuracy, harmonic mean and per-task evaluation of a trained model.

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fdn/dataset.hpp"
#include "fdn/trainer.hpp"

namespace fdn::eval {

struct EvalOptions {
  std::size_t batch = 1;  // samples per forward pass
  /// Fixed context tokens replacing the learned ones (held-out template);
  /// empty to use the learned context.
  DenseArray context_override;
};

/// Top-1 accuracy in percent over `set.record_ids`, candidates
/// `set.class_ids`. ParameterError on an empty set or class list.
double evaluate_accuracy(const train::Model& model, const data::EmbeddingDataset& ds,
                         const data::EvalSet& set, const EvalOptions& options = {});

/// 2ab/(a+b); 0 when both are 0. ParameterError on negative input.
double harmonic_mean(double base, double novel);

struct SplitMetrics {
  std::vector<std::pair<std::string, double>> accuracies;  // eval set name -> percent
  double base = 0.0;    // B2N only
  double novel = 0.0;   // B2N only
  double hm = 0.0;      // B2N only
  double mean_target = 0.0;  // CD and DG
  double metric = 0.0;  // HM for B2N, mean target accuracy otherwise

  double accuracy(const std::string& name) const;
};

/// Runs every eval set of `split`. InsufficientDataError when an eval set
/// is empty (for B2N: every seen-class record was used for training).
SplitMetrics evaluate_split(const train::Model& model, const data::EmbeddingDataset& ds,
                            const data::Split& split, const EvalOptions& options = {});

}  // namespace fdn::eval
