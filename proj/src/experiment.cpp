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

#include "fdn/experiment.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>
#include <thread>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "fdn/errors.hpp"
#include "fdn/prompting.hpp"
#include "fdn/random.hpp"

namespace fdn::exp {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto s = trim(v);
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(out)) {
    throw ParameterError(key + ": expected a number, got \"" + v + "\"");
  }
  return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto s = trim(v);
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ParameterError(key + ": expected a non-negative integer, got \"" + v + "\"");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  const auto s = trim(v);
  if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
  if (s == "0" || s == "false" || s == "no" || s == "off") return false;
  throw ParameterError(key + ": expected a boolean, got \"" + v + "\"");
}

template <typename T>
std::string join(const std::vector<T>& xs, const char* sep) {
  std::ostringstream os;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) os << sep;
    if constexpr (std::is_floating_point_v<T>) {
      os << fmt_double(xs[i]);
    } else {
      os << xs[i];
    }
  }
  return os.str();
}

struct Field {
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string& key, const std::string&)> set;
};

#define FDN_UINT(path)                                                                        \
  Field {                                                                                     \
    [](const ExperimentConfig& c) { return std::to_string(c.path); },                        \
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {                \
          c.path = static_cast<decltype(c.path)>(parse_uint(k, v));                           \
        }                                                                                     \
  }
#define FDN_DOUBLE(path)                                                                                  \
  Field {                                                                                                 \
    [](const ExperimentConfig& c) { return fmt_double(c.path); },                                        \
        [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.path = parse_double(k, v); } \
  }
#define FDN_BOOL(path)                                                                                  \
  Field {                                                                                               \
    [](const ExperimentConfig& c) { return std::string(c.path ? "true" : "false"); },                  \
        [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.path = parse_bool(k, v); } \
  }
#define FDN_STRING(path)                                                                             \
  Field {                                                                                            \
    [](const ExperimentConfig& c) { return c.path; },                                               \
        [](ExperimentConfig& c, const std::string&, const std::string& v) { c.path = trim(v); }     \
  }

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      {"data.path", FDN_STRING(data_path)},
      {"data.task",
       {[](const ExperimentConfig& c) { return data::task_name(c.task); },
        [](ExperimentConfig& c, const std::string&, const std::string& v) { c.task = data::parse_task(trim(v)); }}},
      {"data.shots", FDN_UINT(shots)},
      {"data.source_domain", FDN_UINT(source_domain)},
      {"synth.n_classes", FDN_UINT(synth.n_classes)},
      {"synth.n_domains", FDN_UINT(synth.n_domains)},
      {"synth.d", FDN_UINT(synth.d)},
      {"synth.samples_per", FDN_UINT(synth.samples_per)},
      {"synth.low_band", FDN_UINT(synth.low_band)},
      {"synth.clutter_gain",
       {[](const ExperimentConfig& c) { return join(c.synth.clutter_gain, ","); },
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.synth.clutter_gain.clear();
          for (const auto& item : split_list(v, ',')) c.synth.clutter_gain.push_back(parse_double(k, item));
        }}},
      {"synth.seed", FDN_UINT(synth.seed)},
      {"synth.jitter", FDN_DOUBLE(synth.jitter)},
      {"synth.text_seed", FDN_UINT(synth.text_seed)},
      {"model.k", FDN_UINT(model.k)},
      {"model.context_length", FDN_UINT(model.context_length)},
      {"model.heads", FDN_UINT(model.heads)},
      {"model.lambda", FDN_DOUBLE(model.lambda)},
      {"model.learnable_lambda", FDN_BOOL(model.learnable_lambda)},
      {"model.text_width", FDN_UINT(model.text_width)},
      {"model.text_layers", FDN_UINT(model.text_layers)},
      {"model.text_seed", FDN_UINT(model.text_seed)},
      {"model.context_init", FDN_STRING(model.context_init)},
      {"model.templates",
       {[](const ExperimentConfig& c) { return join(c.model.templates, ";"); },
        [](ExperimentConfig& c, const std::string&, const std::string& v) { c.model.templates = split_list(v, ';'); }}},
      {"loss.tau", FDN_DOUBLE(loss.tau)},
      {"loss.rpa_weight", FDN_DOUBLE(loss.rpa_weight)},
      {"train.epochs", FDN_UINT(train.epochs)},
      {"train.base_lr", FDN_DOUBLE(train.base_lr)},
      {"train.warmup_lr", FDN_DOUBLE(train.warmup_lr)},
      {"train.warmup_epochs", FDN_UINT(train.warmup_epochs)},
      {"train.batch_size", FDN_UINT(train.batch_size)},
      {"train.seed", FDN_UINT(train.seed)},
      {"train.schedule",
       {[](const ExperimentConfig& c) { return train::schedule_name(c.train.schedule); },
        [](ExperimentConfig& c, const std::string&, const std::string& v) {
          c.train.schedule = train::parse_schedule(trim(v));
        }}},
      {"train.clip_norm", FDN_DOUBLE(train.clip_norm)},
      {"ablation.no_ffb", FDN_BOOL(ablations.no_ffb)},
      {"ablation.no_rpa", FDN_BOOL(ablations.no_rpa)},
      {"ablation.no_fusion", FDN_BOOL(ablations.no_fusion)},
      {"eval.batch", FDN_UINT(eval_batch)},
      {"eval.seeds", FDN_UINT(seeds)},
      {"eval.heldout_context", FDN_STRING(heldout_context)},
      {"sweep.k",
       {[](const ExperimentConfig& c) { return join(c.sweep_k, ","); },
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.sweep_k.clear();
          for (const auto& item : split_list(v, ',')) c.sweep_k.push_back(parse_uint(k, item));
        }}},
  };
  return table;
}

#undef FDN_UINT
#undef FDN_DOUBLE
#undef FDN_BOOL
#undef FDN_STRING

void set_key(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  auto it = fields().find(key);
  if (it == fields().end()) throw ParameterError("unknown config key \"" + key + "\"");
  it->second.set(cfg, key, value);
}

void apply_env(ExperimentConfig& cfg) {
  if (const char* s = std::getenv("FDN_SEED"); s != nullptr && *s != '\0') {
    set_key(cfg, "train.seed", s);
  }
}

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

// Sample standard deviation; 0 for fewer than two values.
double std_of(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

eval::EvalOptions eval_options(const ExperimentConfig& cfg, const train::Model& model) {
  eval::EvalOptions o;
  o.batch = cfg.eval_batch;
  if (!cfg.heldout_context.empty()) {
    o.context_override = prompting::context_from_phrase(*model.encoder, cfg.heldout_context,
                                                        prompting::context_length(model.params));
  }
  return o;
}

std::string ablation_list(const train::Ablations& a) {
  std::vector<std::string> on;
  if (a.no_ffb) on.push_back("no_ffb");
  if (a.no_rpa) on.push_back("no_rpa");
  if (a.no_fusion) on.push_back("no_fusion");
  return on.empty() ? "none" : join(on, ",");
}

}  // namespace

std::string canonical_text(const ExperimentConfig& cfg, bool training_only) {
  std::ostringstream os;
  for (const auto& [key, field] : fields()) {
    if (training_only && (key.rfind("eval.", 0) == 0 || key.rfind("sweep.", 0) == 0)) continue;
    os << key << " = " << field.get(cfg) << "\n";
  }
  return os.str();
}

train::ConfigHash config_hash(const ExperimentConfig& cfg, bool training_only) {
  const std::string text = canonical_text(cfg, training_only);
  train::ConfigHash h{};
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), h.data(), &len, EVP_sha256(), nullptr) != 1 || len != h.size()) {
    throw Error("SHA-256 digest failed");
  }
  return h;
}

std::string hex(const train::ConfigHash& h) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (auto b : h) {
    s.push_back(digits[b >> 4]);
    s.push_back(digits[b & 15]);
  }
  return s;
}

void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ParameterError("override \"" + assignment + "\" is not of the form section.key=value");
  }
  set_key(cfg, trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

ExperimentConfig default_config(const std::vector<std::string>& overrides) {
  ExperimentConfig cfg;
  apply_env(cfg);
  for (const auto& o : overrides) apply_override(cfg, o);
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  if (!std::filesystem::exists(path)) throw DataError("config file not found: " + path.string());
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw DataError("cannot parse config " + path.string() + ": " + e.what());
  }
  ExperimentConfig cfg;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ParameterError("config key \"" + section + "\" outside a section");
    for (const auto& [key, value] : body) set_key(cfg, section + "." + key, value.data());
  }
  apply_env(cfg);
  for (const auto& o : overrides) apply_override(cfg, o);
  return cfg;
}

data::EmbeddingDataset load_dataset(const ExperimentConfig& cfg) {
  if (!cfg.data_path.empty()) return data::read_dataset(cfg.data_path);
  return data::synth_generate(cfg.synth);
}

SeedRun run_seed(const ExperimentConfig& cfg, const data::EmbeddingDataset& ds, std::uint64_t seed,
                 bool verbose) {
  auto split = data::make_split(ds, cfg.task, seed, cfg.shots, cfg.source_domain);
  auto tc = cfg.train;
  tc.seed = seed;
  train::RunOptions opts;
  opts.config_hash = config_hash(cfg, true);
  opts.verbose = verbose;
  auto result = train::train_run(ds, split, tc, cfg.loss, cfg.model, cfg.ablations, opts);
  SeedRun run;
  run.seed = seed;
  run.loss_trace = result.loss_trace;
  run.metrics = eval::evaluate_split(result.model, ds, split, eval_options(cfg, result.model));
  run.checkpoint = std::move(result.checkpoint);
  return run;
}

eval::SplitMetrics evaluate_checkpoint(const ExperimentConfig& cfg, const data::EmbeddingDataset& ds,
                                       const train::Checkpoint& ckpt) {
  if (ckpt.config_hash != config_hash(cfg, true)) {
    throw StateError("checkpoint was trained under config hash " + hex(ckpt.config_hash) +
                     ", current training config hashes to " + hex(config_hash(cfg, true)));
  }
  auto split = data::make_split(ds, cfg.task, ckpt.seed, cfg.shots, cfg.source_domain);
  auto model = train::build_model(ds, cfg.model, cfg.ablations, ckpt.seed);
  model.ctx.tau = cfg.loss.tau;
  train::restore(model.params, ckpt);
  return eval::evaluate_split(model, ds, split, eval_options(cfg, model));
}

double MetricsReport::mean_metric() const {
  std::vector<double> xs;
  for (const auto& r : runs) xs.push_back(r.metrics.metric);
  return mean_of(xs);
}

double MetricsReport::std_metric() const {
  std::vector<double> xs;
  for (const auto& r : runs) xs.push_back(r.metrics.metric);
  return std_of(xs);
}

double MetricsReport::mean_accuracy(const std::string& set_name) const {
  std::vector<double> xs;
  for (const auto& r : runs) xs.push_back(r.metrics.accuracy(set_name));
  return mean_of(xs);
}

MetricsReport run_experiment(const ExperimentConfig& cfg, const data::EmbeddingDataset& ds, bool verbose) {
  if (cfg.seeds == 0) throw ParameterError("eval.seeds must be at least 1");
  MetricsReport r;
  r.config_hash = hex(config_hash(cfg));
  r.task = data::task_name(cfg.task);
  r.ablations = cfg.ablations;
  r.k = cfg.ablations.no_ffb ? ds.d : train::resolve_k(cfg.model, ds.d);
  r.schedule = train::schedule_name(cfg.train.schedule);
  for (std::size_t i = 0; i < cfg.seeds; ++i) r.runs.push_back(run_seed(cfg, ds, cfg.train.seed + i, verbose));
  return r;
}

void write_report_text(std::ostream& os, const MetricsReport& r) {
  char buf[256];
  os << "run report\n";
  os << "  config hash  " << r.config_hash << "\n";
  os << "  task         " << r.task << "\n";
  os << "  retained k   " << r.k << "\n";
  os << "  schedule     " << r.schedule
     << (r.schedule == "cosine" ? " (post-warmup decay is an assumption)" : "") << "\n";
  os << "  ablations    " << ablation_list(r.ablations) << "\n";
  for (const auto& run : r.runs) {
    std::snprintf(buf, sizeof buf, "  seed %llu:", static_cast<unsigned long long>(run.seed));
    os << buf;
    for (const auto& [name, acc] : run.metrics.accuracies) {
      std::snprintf(buf, sizeof buf, "  %s %.2f", name.c_str(), acc);
      os << buf;
    }
    if (r.task == "b2n") {
      std::snprintf(buf, sizeof buf, "  HM %.2f", run.metrics.hm);
      os << buf;
    }
    if (!run.loss_trace.empty()) {
      std::snprintf(buf, sizeof buf, "  final loss %.4f", run.loss_trace.back());
      os << buf;
    }
    os << "\n";
  }
  std::snprintf(buf, sizeof buf, "  %s %.2f +- %.2f over %zu seed(s)\n",
                r.task == "b2n" ? "HM" : "mean target accuracy", r.mean_metric(), r.std_metric(),
                r.runs.size());
  os << buf;
}

void write_report_kv(std::ostream& os, const MetricsReport& r) {
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  os << "config_hash=" << r.config_hash << "\n";
  os << "task=" << r.task << "\n";
  os << "k=" << r.k << "\n";
  os << "schedule=" << r.schedule << "\n";
  os << "ablation.no_ffb=" << r.ablations.no_ffb << "\n";
  os << "ablation.no_rpa=" << r.ablations.no_rpa << "\n";
  os << "ablation.no_fusion=" << r.ablations.no_fusion << "\n";
  os << "seeds=" << r.runs.size() << "\n";
  for (std::size_t i = 0; i < r.runs.size(); ++i) {
    const auto& run = r.runs[i];
    const std::string p = "run." + std::to_string(i) + ".";
    os << p << "seed=" << run.seed << "\n";
    for (const auto& [name, acc] : run.metrics.accuracies) os << p << "acc." << name << "=" << num(acc) << "\n";
    if (r.task == "b2n") os << p << "hm=" << num(run.metrics.hm) << "\n";
    os << p << "metric=" << num(run.metrics.metric) << "\n";
    if (!run.loss_trace.empty()) os << p << "final_loss=" << num(run.loss_trace.back()) << "\n";
  }
  if (!r.runs.empty()) {
    for (const auto& [name, acc] : r.runs.front().metrics.accuracies) {
      os << "mean.acc." << name << "=" << num(r.mean_accuracy(name)) << "\n";
    }
  }
  os << "mean.metric=" << num(r.mean_metric()) << "\n";
  os << "std.metric=" << num(r.std_metric()) << "\n";
}

std::vector<SweepRow> k_sensitivity_sweep(const ExperimentConfig& cfg, const data::EmbeddingDataset& ds,
                                          const std::vector<std::size_t>& k_list, std::size_t jobs) {
  if (cfg.seeds == 0) throw ParameterError("eval.seeds must be at least 1");
  for (std::size_t k : k_list) {
    if (k < 1 || k > ds.d) {
      throw ParameterError("sweep k=" + std::to_string(k) + " outside [1, " + std::to_string(ds.d) + "]");
    }
  }
  const std::size_t n = k_list.size() * cfg.seeds;
  std::vector<double> metric(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        auto c = cfg;
        c.model.k = k_list[i / cfg.seeds];
        c.ablations.no_ffb = false;
        metric[i] = run_seed(c, ds, cfg.train.seed + i % cfg.seeds).metrics.metric;
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, n));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::vector<SweepRow> rows;
  for (std::size_t j = 0; j < k_list.size(); ++j) {
    std::vector<double> xs(metric.begin() + static_cast<long>(j * cfg.seeds),
                           metric.begin() + static_cast<long>((j + 1) * cfg.seeds));
    rows.push_back({k_list[j], mean_of(xs), std_of(xs)});
  }
  return rows;
}

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "k,mean,std\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f\n", r.k, r.mean, r.std);
    os << buf;
  }
}

ad::GradCheckReport full_loss_gradcheck(std::size_t d, std::size_t k, std::uint64_t seed, double h) {
  data::EmbeddingDataset meta;
  meta.d = d;
  meta.class_names = {data::synth_class_name(0), data::synth_class_name(1), data::synth_class_name(2),
                      data::synth_class_name(3)};
  meta.domain_names = {data::synth_domain_name(0)};
  train::ModelConfig mc;
  mc.k = k;
  mc.context_length = 2;
  mc.learnable_lambda = true;
  mc.text_seed = seed;
  auto model = train::build_model(meta, mc, {}, seed);
  const std::vector<std::size_t> classes{0, 1, 2, 3};
  const auto reference = model.reference_for(classes);
  Rng rng(derive_seed(seed, "gradcheck"));
  auto x = normal_array({3, d}, 1.0, rng);
  for (std::size_t r = 0; r < 3; ++r) {
    auto row = x.row_span(r);
    const double n = l2_norm(row);
    for (double& v : row) v /= n;
  }
  objective::LossConfig lc;
  return ad::finite_diff_check(
      [&](ad::Tape& t, const ad::ParamStore& ps) {
        return objective::training_loss(t, ps, model.ctx, lc, x, {0, 2, 3}, classes, reference).total;
      },
      model.params, h);
}

}  // namespace fdn::exp
