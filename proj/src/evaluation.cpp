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

#include "fdn/evaluation.hpp"

#include <algorithm>

#include "fdn/errors.hpp"
#include "fdn/objective.hpp"

namespace fdn::eval {

double evaluate_accuracy(const train::Model& model, const data::EmbeddingDataset& ds,
                         const data::EvalSet& set, const EvalOptions& options) {
  if (set.record_ids.empty()) throw ParameterError("eval set \"" + set.name + "\" is empty");
  if (set.class_ids.empty()) throw ParameterError("eval set \"" + set.name + "\" has no classes");
  if (options.batch == 0) throw ParameterError("eval batch must be at least 1");
  std::vector<std::size_t> local(ds.class_names.size(), set.class_ids.size());
  for (std::size_t j = 0; j < set.class_ids.size(); ++j) local[set.class_ids[j]] = j;
  const DenseArray* override_ctx = options.context_override.size() > 0 ? &options.context_override : nullptr;

  std::size_t correct = 0;
  const auto& ids = set.record_ids;
  for (std::size_t start = 0; start < ids.size(); start += options.batch) {
    const std::size_t b = std::min(options.batch, ids.size() - start);
    DenseArray x = DenseArray::matrix(b, ds.d);
    for (std::size_t i = 0; i < b; ++i) {
      auto src = ds.features.row_span(ids[start + i]);
      std::copy(src.begin(), src.end(), x.row_span(i).begin());
    }
    ad::Tape tape;
    auto fwd = objective::model_forward(tape, model.params, model.ctx, tape.constant_ref(x),
                                        set.class_ids, override_ctx);
    for (std::size_t i = 0; i < b; ++i) {
      if (objective::predict(fwd.posterior.value().row_span(i)) == local[ds.labels[ids[start + i]]]) ++correct;
    }
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(ids.size());
}

double harmonic_mean(double base, double novel) {
  if (base < 0.0 || novel < 0.0) throw ParameterError("harmonic_mean of a negative accuracy");
  if (base + novel == 0.0) return 0.0;
  if (base == novel) return base;  // 2a^2/(2a) can round away from a
  return 2.0 * base * novel / (base + novel);
}

double SplitMetrics::accuracy(const std::string& name) const {
  for (const auto& [n, a] : accuracies)
    if (n == name) return a;
  throw LookupError("no eval set named \"" + name + "\"");
}

SplitMetrics evaluate_split(const train::Model& model, const data::EmbeddingDataset& ds,
                            const data::Split& split, const EvalOptions& options) {
  SplitMetrics m;
  for (const auto& set : split.eval_sets) {
    if (set.record_ids.empty()) {
      throw InsufficientDataError("eval set \"" + set.name + "\" has no records (all used for training?)");
    }
    m.accuracies.emplace_back(set.name, evaluate_accuracy(model, ds, set, options));
  }
  if (split.spec.task == data::Task::b2n) {
    m.base = m.accuracy("base");
    m.novel = m.accuracy("new");
    m.hm = harmonic_mean(m.base, m.novel);
    m.metric = m.hm;
  } else {
    double s = 0.0;
    for (const auto& [n, a] : m.accuracies) s += a;
    m.mean_target = s / static_cast<double>(m.accuracies.size());
    m.metric = m.mean_target;
  }
  return m;
}

}  // namespace fdn::eval
