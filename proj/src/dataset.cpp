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

#include "fdn/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <iterator>
#include <numeric>
#include <set>

#include "binary_io.hpp"
#include "fdn/errors.hpp"
#include "fdn/prompting.hpp"
#include "fdn/random.hpp"
#include "fdn/spectral.hpp"

namespace fdn::data {

namespace {

using detail::Reader;
using detail::Writer;

constexpr char kMagic[4] = {'F', 'D', 'N', 'E'};
constexpr double kKeepExactTolerance = 1e-6;
constexpr double kWarnTolerance = 1e-3;

// Renormalizes rows that are not unit length within kKeepExactTolerance.
void renormalize_rows(DenseArray& a, ReadReport& report, const char* what) {
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto row = a.row_span(r);
    const double n = l2_norm(row);
    if (n == 0.0) throw FormatError(std::string(what) + " row " + std::to_string(r) + " is all zeros");
    const double dev = std::abs(n - 1.0);
    report.max_norm_deviation = std::max(report.max_norm_deviation, dev);
    if (dev > kKeepExactTolerance) {
      for (auto& v : row) v /= n;
      ++report.renormalized_rows;
    }
  }
}

}  // namespace

void validate(const EmbeddingDataset& ds) {
  if (ds.d == 0) throw FormatError("dataset dimension is zero");
  if (ds.class_names.empty()) throw FormatError("dataset has no classes");
  if (ds.domain_names.empty()) throw FormatError("dataset has no domains");
  const std::size_t n = ds.labels.size();
  if (ds.domains.size() != n) throw FormatError("label and domain counts differ");
  if (n > 0 && (ds.features.rows() != n || ds.features.cols() != ds.d)) {
    throw FormatError("feature matrix is " + shape_string(ds.features.shape()) + ", expected " +
                      std::to_string(n) + " x " + std::to_string(ds.d));
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (ds.labels[i] >= ds.class_names.size()) {
      throw FormatError("record " + std::to_string(i) + " has class index " +
                        std::to_string(ds.labels[i]) + " out of range");
    }
    if (ds.domains[i] >= ds.domain_names.size()) {
      throw FormatError("record " + std::to_string(i) + " has domain index " +
                        std::to_string(ds.domains[i]) + " out of range");
    }
  }
  if (ds.text_bank_z > 0 && (ds.text_bank.rows() != ds.text_bank_z * ds.class_names.size() ||
                             ds.text_bank.cols() != ds.d)) {
    throw FormatError("text bank shape " + shape_string(ds.text_bank.shape()) +
                      " does not match Z x classes x d");
  }
}

std::vector<std::uint8_t> serialize(const EmbeddingDataset& ds) {
  validate(ds);
  Writer w;
  w.bytes(kMagic, 4);
  w.le(kFormatVersion);
  w.le(static_cast<std::uint32_t>(ds.d));
  w.le(static_cast<std::uint32_t>(ds.class_names.size()));
  w.le(static_cast<std::uint32_t>(ds.domain_names.size()));
  w.le(static_cast<std::uint64_t>(ds.size()));
  const std::uint32_t flags = ds.has_text_bank() ? (kFlagTextBank | kFlagVariantCount) : 0u;
  w.le(flags);
  if (flags & kFlagVariantCount) w.le(static_cast<std::uint32_t>(ds.text_bank_z));
  for (const auto& s : ds.class_names) w.name(s);
  for (const auto& s : ds.domain_names) w.name(s);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    w.le(ds.labels[i]);
    w.le(ds.domains[i]);
    for (double v : ds.features.row_span(i)) w.f32(v);
  }
  if (ds.has_text_bank())
    for (double v : ds.text_bank.data()) w.f32(v);
  return w.take();
}

EmbeddingDataset deserialize(const std::vector<std::uint8_t>& bytes, ReadReport* report) {
  Reader r(bytes);
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw MagicError("bad magic: expected \"FDNE\", found \"" +
                     std::string(reinterpret_cast<const char*>(bytes.data()), 4) + "\"");
  }
  r.le<std::uint32_t>("magic");
  const auto version = r.le<std::uint32_t>("version");
  if (version != kFormatVersion) {
    throw VersionError("unsupported dataset version " + std::to_string(version) + " (expected " +
                       std::to_string(kFormatVersion) + ")");
  }
  EmbeddingDataset ds;
  ds.d = r.le<std::uint32_t>("header");
  const auto n_classes = r.le<std::uint32_t>("header");
  const auto n_domains = r.le<std::uint32_t>("header");
  const auto n_records = r.le<std::uint64_t>("header");
  const auto flags = r.le<std::uint32_t>("header");
  if (flags & ~(kFlagTextBank | kFlagVariantCount)) {
    throw FormatError("unknown flag bits " + std::to_string(flags));
  }
  std::uint32_t z = 1;
  if (flags & kFlagVariantCount) z = r.le<std::uint32_t>("variant count");
  if (ds.d == 0 || n_classes == 0 || n_domains == 0) {
    throw FormatError("header declares an empty dimension, class or domain table");
  }
  if ((flags & kFlagTextBank) && z == 0) throw FormatError("text bank with zero variants");
  for (std::uint32_t i = 0; i < n_classes; ++i) ds.class_names.push_back(r.name("class names"));
  for (std::uint32_t i = 0; i < n_domains; ++i) ds.domain_names.push_back(r.name("domain names"));

  const std::uint64_t record_bytes = 8 + 4 * static_cast<std::uint64_t>(ds.d);
  if (n_records > r.remaining() / record_bytes) {
    // Walk to the first incomplete record so the offset points at it.
    const std::uint64_t whole = r.remaining() / record_bytes;
    throw TruncationError("record section holds " + std::to_string(whole) + " of " +
                              std::to_string(n_records) + " records",
                          r.pos() + whole * record_bytes);
  }
  ds.labels.resize(n_records);
  ds.domains.resize(n_records);
  ds.features = n_records > 0 ? DenseArray::matrix(n_records, ds.d) : DenseArray();
  for (std::uint64_t i = 0; i < n_records; ++i) {
    ds.labels[i] = r.le<std::uint32_t>("record");
    ds.domains[i] = r.le<std::uint32_t>("record");
    for (std::size_t j = 0; j < ds.d; ++j) {
      const std::size_t at = r.pos();
      const float v = r.f32("record");
      if (!std::isfinite(v)) {
        throw NonFiniteError("non-finite feature in record " + std::to_string(i) + " at byte offset " +
                             std::to_string(at));
      }
      ds.features.at(i, j) = v;
    }
  }
  if (flags & kFlagTextBank) {
    ds.text_bank_z = z;
    ds.text_bank = DenseArray::matrix(static_cast<std::size_t>(z) * n_classes, ds.d);
    for (auto& v : ds.text_bank.data()) {
      const std::size_t at = r.pos();
      const float f = r.f32("text bank");
      if (!std::isfinite(f)) {
        throw NonFiniteError("non-finite text bank value at byte offset " + std::to_string(at));
      }
      v = f;
    }
  }
  if (r.remaining() != 0) {
    throw FormatError(std::to_string(r.remaining()) + " trailing bytes after offset " +
                      std::to_string(r.pos()));
  }
  validate(ds);
  ReadReport local;
  if (n_records > 0) renormalize_rows(ds.features, local, "feature");
  if (ds.has_text_bank()) renormalize_rows(ds.text_bank, local, "text bank");
  if (report != nullptr) *report = local;
  return ds;
}

void write_dataset(const EmbeddingDataset& ds, const std::filesystem::path& path) {
  const auto bytes = serialize(ds);
  detail::write_file(path, bytes);
}

EmbeddingDataset read_dataset(const std::filesystem::path& path, ReadReport* report) {
  const auto bytes = detail::read_file(path, "dataset");
  ReadReport local;
  auto ds = deserialize(bytes, &local);
  if (local.max_norm_deviation > kWarnTolerance) {
    std::cerr << "warning: " << path.string() << ": " << local.renormalized_rows
              << " rows were not unit length (max deviation " << local.max_norm_deviation
              << "); renormalized\n";
  }
  if (report != nullptr) *report = local;
  return ds;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

std::string task_name(Task task) {
  switch (task) {
    case Task::b2n: return "b2n";
    case Task::cd: return "cd";
    case Task::dg: return "dg";
  }
  return "?";
}

Task parse_task(const std::string& name) {
  std::string s;
  for (char c : name) s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (s == "b2n") return Task::b2n;
  if (s == "cd") return Task::cd;
  if (s == "dg") return Task::dg;
  throw ParameterError("unknown task \"" + name + "\" (expected b2n, cd or dg)");
}

Split make_split(const EmbeddingDataset& ds, Task task, std::uint64_t seed, std::size_t shots,
                 std::size_t source_domain) {
  validate(ds);
  if (shots == 0) throw ParameterError("shots must be positive");
  const std::size_t nc = ds.class_names.size(), nd = ds.domain_names.size();
  if (task != Task::dg && nc < 2) {
    throw ParameterError(task_name(task) + " needs at least two classes");
  }
  if (task != Task::b2n && nd < 2) {
    throw ParameterError(task_name(task) + " needs at least two domains");
  }
  if (source_domain >= nd) throw ParameterError("source domain index out of range");

  std::vector<std::size_t> by_name(nc);
  std::iota(by_name.begin(), by_name.end(), 0);
  std::stable_sort(by_name.begin(), by_name.end(), [&ds](std::size_t a, std::size_t b) {
    return ds.class_names[a] < ds.class_names[b];
  });
  const std::size_t n_seen = (nc + 1) / 2;

  Split split;
  SplitSpec& spec = split.spec;
  spec.task = task;
  spec.shots = shots;
  if (task == Task::dg) {
    spec.seen_classes = by_name;
    spec.unseen_classes = by_name;
  } else {
    spec.seen_classes.assign(by_name.begin(), by_name.begin() + static_cast<long>(n_seen));
    spec.unseen_classes.assign(by_name.begin() + static_cast<long>(n_seen), by_name.end());
  }
  if (task == Task::b2n) {
    spec.source_domains.resize(nd);
    std::iota(spec.source_domains.begin(), spec.source_domains.end(), 0);
    spec.target_domains = spec.source_domains;
  } else {
    spec.source_domains = {source_domain};
    for (std::size_t dmn = 0; dmn < nd; ++dmn)
      if (dmn != source_domain) spec.target_domains.push_back(dmn);
  }

  const std::set<std::size_t> sources(spec.source_domains.begin(), spec.source_domains.end());
  Rng rng(derive_seed(seed, "split:" + task_name(task)));
  for (std::size_t c : spec.seen_classes) {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds.labels[i] == c && sources.count(ds.domains[i])) pool.push_back(i);
    if (pool.size() < shots) {
      throw InsufficientDataError("class \"" + ds.class_names[c] + "\" has " +
                                  std::to_string(pool.size()) + " source records, " +
                                  std::to_string(shots) + " shots requested");
    }
    // Partial Fisher-Yates with explicit index draws keeps the sample
    // independent of the standard library's shuffle implementation.
    for (std::size_t i = 0; i < shots; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng() % (pool.size() - i));
      std::swap(pool[i], pool[j]);
    }
    std::vector<std::size_t> chosen(pool.begin(), pool.begin() + static_cast<long>(shots));
    std::sort(chosen.begin(), chosen.end());
    split.train_ids.insert(split.train_ids.end(), chosen.begin(), chosen.end());
  }

  const std::set<std::size_t> train(split.train_ids.begin(), split.train_ids.end());
  auto records_where = [&](auto pred) {
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (!train.count(i) && pred(i)) ids.push_back(i);
    return ids;
  };
  auto sorted_ids = [](std::vector<std::size_t> v) {
    std::sort(v.begin(), v.end());
    return v;
  };
  if (task == Task::b2n) {
    const std::set<std::size_t> seen(spec.seen_classes.begin(), spec.seen_classes.end());
    split.eval_sets.push_back(
        {"base", records_where([&](std::size_t i) { return seen.count(ds.labels[i]) > 0; }),
         sorted_ids(spec.seen_classes)});
    split.eval_sets.push_back(
        {"new", records_where([&](std::size_t i) { return seen.count(ds.labels[i]) == 0; }),
         sorted_ids(spec.unseen_classes)});
  } else {
    const std::set<std::size_t> eval_classes(spec.unseen_classes.begin(), spec.unseen_classes.end());
    for (std::size_t dmn : spec.target_domains) {
      split.eval_sets.push_back({"target:" + ds.domain_names[dmn], records_where([&](std::size_t i) {
                                   return ds.domains[i] == dmn && eval_classes.count(ds.labels[i]) > 0;
                                 }),
                                 sorted_ids(spec.unseen_classes)});
    }
  }
  return split;
}

std::vector<std::string> leakage_violations(const EmbeddingDataset& ds, const Split& split) {
  std::vector<std::string> out;
  const auto& spec = split.spec;
  const std::set<std::size_t> seen(spec.seen_classes.begin(), spec.seen_classes.end());
  const std::set<std::size_t> unseen(spec.unseen_classes.begin(), spec.unseen_classes.end());
  const std::set<std::size_t> sources(spec.source_domains.begin(), spec.source_domains.end());
  const std::set<std::size_t> targets(spec.target_domains.begin(), spec.target_domains.end());
  const std::set<std::size_t> train(split.train_ids.begin(), split.train_ids.end());

  if (train.size() != split.train_ids.size()) out.push_back("duplicate training record");
  if (split.train_ids.size() != spec.seen_classes.size() * spec.shots) {
    out.push_back("training stream has " + std::to_string(split.train_ids.size()) +
                  " records, expected shots x seen classes");
  }
  for (std::size_t i : split.train_ids) {
    if (!seen.count(ds.labels[i])) out.push_back("training record " + std::to_string(i) + " has an unseen class");
    if (spec.task != Task::dg && unseen.count(ds.labels[i])) {
      out.push_back("training record " + std::to_string(i) + " has a held-out class");
    }
    if (!sources.count(ds.domains[i])) {
      out.push_back("training record " + std::to_string(i) + " comes from a non-source domain");
    }
  }
  if (spec.task != Task::dg) {
    for (std::size_t c : seen)
      if (unseen.count(c)) out.push_back("class " + std::to_string(c) + " is both seen and unseen");
  } else if (seen != unseen) {
    out.push_back("domain generalization must keep the label set fixed");
  }
  if (spec.task != Task::b2n) {
    for (std::size_t dmn : sources)
      if (targets.count(dmn)) out.push_back("domain " + std::to_string(dmn) + " is both source and target");
  }
  for (const auto& es : split.eval_sets) {
    const std::set<std::size_t> allowed(es.class_ids.begin(), es.class_ids.end());
    for (std::size_t i : es.record_ids) {
      if (train.count(i)) out.push_back(es.name + ": record " + std::to_string(i) + " also in training");
      if (!allowed.count(ds.labels[i])) out.push_back(es.name + ": record " + std::to_string(i) + " outside its class set");
      if (spec.task != Task::b2n && !targets.count(ds.domains[i])) {
        out.push_back(es.name + ": record " + std::to_string(i) + " not from a target domain");
      }
    }
    if (es.name == "new" || spec.task == Task::cd) {
      for (std::size_t c : es.class_ids)
        if (seen.count(c)) out.push_back(es.name + ": evaluates seen class " + std::to_string(c));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

std::string synth_class_name(std::size_t i) {
  std::string s = std::to_string(i);
  if (s.size() < 2) s.insert(s.begin(), 2 - s.size(), '0');
  return "class_" + s;
}

std::string synth_domain_name(std::size_t i) { return "dom_" + std::to_string(i); }

std::vector<double> band_project(std::span<const double> x, double cutoff, bool keep_low) {
  std::vector<spectral::Complex> work(x.begin(), x.end());
  const std::size_t d = x.size();
  spectral::fft_in_place(work, false);
  for (std::size_t q = 0; q < d; ++q) {
    const bool low = std::abs(static_cast<double>(spectral::centered_frequency(q, d))) < cutoff;
    if (low != keep_low) work[q] = 0.0;
  }
  spectral::fft_in_place(work, true);
  std::vector<double> out(d);
  for (std::size_t p = 0; p < d; ++p) out[p] = work[p].real() / static_cast<double>(d);
  return out;
}

namespace {

std::size_t band_size(std::size_t d, double cutoff, bool low) {
  std::size_t n = 0;
  for (std::size_t q = 0; q < d; ++q)
    if ((std::abs(static_cast<double>(spectral::centered_frequency(q, d))) < cutoff) == low) ++n;
  return n;
}

// Gaussian vector restricted to one band with expected squared norm amp^2.
std::vector<double> band_noise(std::size_t d, double cutoff, bool low, double amp, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> z(d);
  for (auto& v : z) v = g(rng);
  auto proj = band_project(z, cutoff, low);
  const double scale = amp / std::sqrt(static_cast<double>(band_size(d, cutoff, low)));
  for (auto& v : proj) v *= scale;
  return proj;
}

}  // namespace

EmbeddingDataset synth_generate(const SynthConfig& c) {
  if (c.n_classes == 0 || c.n_domains == 0 || c.samples_per == 0) {
    throw ParameterError("synthetic dataset needs at least one class, domain and sample");
  }
  if (c.d < 2) throw ParameterError("synthetic dimension must be at least 2");
  if (c.low_band < 1 || c.low_band >= c.d) {
    throw ParameterError("low_band must lie in [1, d)");
  }
  if (c.clutter_gain.size() != c.n_domains) {
    throw ParameterError("need one clutter gain per domain (" + std::to_string(c.n_domains) + ")");
  }
  for (double g : c.clutter_gain)
    if (!(g >= 0.0) || !std::isfinite(g)) throw ParameterError("clutter gains must be finite and >= 0");
  if (!(c.jitter >= 0.0)) throw ParameterError("jitter must be >= 0");
  const double cutoff = static_cast<double>(c.low_band) / 2.0;
  if (band_size(c.d, cutoff, false) == 0 && std::any_of(c.clutter_gain.begin(), c.clutter_gain.end(),
                                                        [](double g) { return g > 0.0; })) {
    throw ParameterError("no high-frequency bins left for clutter");
  }

  prompting::TextEncoderConfig ec;
  ec.e = c.d;
  ec.d = c.d;
  ec.seed = c.text_seed;
  const prompting::FrozenTextEncoder encoder(ec);

  EmbeddingDataset ds;
  ds.d = c.d;
  for (std::size_t i = 0; i < c.n_classes; ++i) ds.class_names.push_back(synth_class_name(i));
  for (std::size_t i = 0; i < c.n_domains; ++i) ds.domain_names.push_back(synth_domain_name(i));

  std::vector<std::vector<double>> prototypes;
  for (std::size_t i = 0; i < c.n_classes; ++i) {
    const auto anchor = encoder.encode_text(prompting::fill_template(c.anchor_template, ds.class_names[i]));
    auto p = band_project(anchor.data(), cutoff, true);
    const double n = l2_norm(p);
    if (n < 1e-12) throw NumericError("prototype for " + ds.class_names[i] + " has no low-band energy");
    for (auto& v : p) v /= n;
    prototypes.push_back(std::move(p));
  }

  const std::size_t total = c.n_classes * c.n_domains * c.samples_per;
  ds.features = DenseArray::matrix(total, c.d);
  Rng rng(derive_seed(c.seed, "synth"));
  std::size_t r = 0;
  for (std::size_t dom = 0; dom < c.n_domains; ++dom)
    for (std::size_t cls = 0; cls < c.n_classes; ++cls)
      for (std::size_t s = 0; s < c.samples_per; ++s, ++r) {
        auto row = ds.features.row_span(r);
        const auto jit = band_noise(c.d, cutoff, true, c.jitter, rng);
        const auto clut = band_noise(c.d, cutoff, false, c.clutter_gain[dom], rng);
        for (std::size_t j = 0; j < c.d; ++j) row[j] = prototypes[cls][j] + jit[j] + clut[j];
        const double n = l2_norm(row);
        for (auto& v : row) v = static_cast<double>(static_cast<float>(v / n));
        ds.labels.push_back(static_cast<std::uint32_t>(cls));
        ds.domains.push_back(static_cast<std::uint32_t>(dom));
      }
  return ds;
}

}  // namespace fdn::data
