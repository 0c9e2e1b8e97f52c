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

// fdn command-line entry point.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fdn/dataset.hpp"
#include "fdn/errors.hpp"
#include "fdn/experiment.hpp"
#include "fdn/random.hpp"
#include "fdn/spectral.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kUsage = 1;
constexpr int kData = 2;
constexpr int kNumeric = 3;

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  bool verbose = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "experiment config file (INI)");
  cmd->add_option("--set", c.overrides, "override, e.g. --set train.epochs=30")->take_all();
  cmd->add_flag("-v,--verbose", c.verbose, "per-epoch loss on stderr");
}

fdn::exp::ExperimentConfig resolve(const Common& c) {
  return c.config.empty() ? fdn::exp::default_config(c.overrides)
                          : fdn::exp::load_config(c.config, c.overrides);
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw fdn::DataError("cannot write " + path.string());
  f << text;
}

int cmd_synth(const Common& c, const std::string& out) {
  auto cfg = resolve(c);
  auto ds = fdn::data::synth_generate(cfg.synth);
  fdn::data::write_dataset(ds, out);
  std::cout << "wrote " << out << ": " << ds.size() << " records, d=" << ds.d << ", "
            << ds.class_names.size() << " classes, " << ds.domain_names.size() << " domains\n";
  return 0;
}

int cmd_train(const Common& c, const std::string& out_dir) {
  auto cfg = resolve(c);
  auto ds = fdn::exp::load_dataset(cfg);
  auto report = fdn::exp::run_experiment(cfg, ds, c.verbose);
  fs::create_directories(out_dir);
  std::ostringstream text, kv;
  fdn::exp::write_report_text(text, report);
  fdn::exp::write_report_kv(kv, report);
  write_file(fs::path(out_dir) / "report.txt", text.str());
  write_file(fs::path(out_dir) / "report.kv", kv.str());
  write_file(fs::path(out_dir) / "config.ini", fdn::exp::canonical_text(cfg));
  for (const auto& run : report.runs) {
    fdn::train::save_checkpoint(run.checkpoint,
                                fs::path(out_dir) / ("seed_" + std::to_string(run.seed) + ".fdck"));
  }
  std::cout << text.str();
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, std::size_t eval_batch) {
  auto cfg = resolve(c);
  if (eval_batch > 0) cfg.eval_batch = eval_batch;
  auto ds = fdn::exp::load_dataset(cfg);
  auto ckpt = fdn::train::load_checkpoint(checkpoint);
  auto metrics = fdn::exp::evaluate_checkpoint(cfg, ds, ckpt);
  fdn::exp::MetricsReport report;
  report.config_hash = fdn::exp::hex(fdn::exp::config_hash(cfg));
  report.task = fdn::data::task_name(cfg.task);
  report.ablations = cfg.ablations;
  report.k = cfg.ablations.no_ffb ? ds.d : fdn::train::resolve_k(cfg.model, ds.d);
  report.schedule = fdn::train::schedule_name(cfg.train.schedule);
  fdn::exp::SeedRun run;
  run.seed = ckpt.seed;
  run.metrics = metrics;
  report.runs.push_back(run);
  fdn::exp::write_report_text(std::cout, report);
  std::cout << "\n";
  fdn::exp::write_report_kv(std::cout, report);
  return 0;
}

int cmd_sweep(const Common& c, std::vector<std::size_t> ks, std::size_t jobs, const std::string& out) {
  auto cfg = resolve(c);
  if (ks.empty()) ks = cfg.sweep_k;
  auto ds = fdn::exp::load_dataset(cfg);
  auto rows = fdn::exp::k_sensitivity_sweep(cfg, ds, ks, jobs);
  std::ostringstream csv;
  fdn::exp::write_sweep_csv(csv, rows);
  if (!out.empty()) write_file(out, csv.str());
  std::cout << "# config_hash=" << fdn::exp::hex(fdn::exp::config_hash(cfg)) << "\n" << csv.str();
  return 0;
}

// Smooth shapes plus a fine checkerboard and noise.
fdn::DenseArray demo_image(std::size_t n) {
  fdn::DenseArray img = fdn::DenseArray::matrix(n, n);
  fdn::Rng rng(7);
  std::normal_distribution<double> noise(0.0, 0.15);
  const double c = static_cast<double>(n) / 2.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double y = static_cast<double>(i), x = static_cast<double>(j);
      double v = 0.3 * x / static_cast<double>(n);
      if ((x - c) * (x - c) + (y - c) * (y - c) < (0.3 * n) * (0.3 * n)) v += 0.5;
      if (x > 0.1 * n && x < 0.3 * n && y > 0.6 * n && y < 0.9 * n) v += 0.3;
      v += 0.2 * (((i + j) % 2 == 0) ? 1.0 : -1.0) + noise(rng);
      img.at(i, j) = v;
    }
  return img;
}

int cmd_demo_image(const std::string& input, double keep, const std::string& out_dir, std::size_t size) {
  auto img = input.empty() ? demo_image(size) : fdn::spectral::read_pgm(input);
  auto r = fdn::spectral::dft_lowpass_2d(img, keep);
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  fdn::spectral::write_pgm(dir / "input.pgm", img);
  fdn::spectral::write_pgm(dir / "spectrum.pgm", r.log_magnitude);
  fdn::spectral::write_pgm(dir / "filtered_spectrum.pgm", r.filtered_log_magnitude);
  fdn::spectral::write_pgm(dir / "filtered.pgm", r.filtered);
  std::cout << "kept " << r.kept_rows << " x " << r.kept_cols << " of " << img.rows() << " x "
            << img.cols() << " frequencies; wrote input.pgm, spectrum.pgm, filtered_spectrum.pgm, "
            << "filtered.pgm to " << out_dir << "\n";
  return 0;
}

int cmd_inspect(const std::string& path) {
  fdn::data::ReadReport rep;
  auto ds = fdn::data::read_dataset(path, &rep);
  std::cout << "file        " << path << "\n";
  std::cout << "version     " << fdn::data::kFormatVersion << "\n";
  std::cout << "d           " << ds.d << "\n";
  std::cout << "classes     " << ds.class_names.size() << "\n";
  std::cout << "domains     " << ds.domain_names.size() << "\n";
  std::cout << "records     " << ds.size() << "\n";
  if (ds.has_text_bank()) {
    std::cout << "text bank   Z=" << ds.text_bank_z << "\n";
  } else {
    std::cout << "text bank   none\n";
  }
  std::cout << "class names";
  for (const auto& n : ds.class_names) std::cout << " " << n;
  std::cout << "\ndomain names";
  for (const auto& n : ds.domain_names) std::cout << " " << n;
  std::vector<std::size_t> per_class(ds.class_names.size());
  for (auto l : ds.labels) ++per_class[l];
  std::cout << "\nper class  ";
  for (auto n : per_class) std::cout << " " << n;
  std::printf("\nmax |norm-1| %.3g\nrenormalized %zu\n", rep.max_norm_deviation, rep.renormalized_rows);
  return 0;
}

int cmd_gradcheck(std::size_t dim, std::vector<std::size_t> ks, std::uint64_t seed, double tol) {
  if (ks.empty()) {
    ks = {dim, std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(11.0 * dim / 16.0)))};
  }
  double worst = 0.0;
  for (std::size_t k : ks) {
    auto r = fdn::exp::full_loss_gradcheck(dim, k, seed);
    std::printf("d=%zu k=%zu: %zu entries, max relative error %.3e (%s[%zu])\n", dim, k, r.checked,
                r.max_rel_error, r.worst_param.c_str(), r.worst_index);
    worst = std::max(worst, r.max_rel_error);
  }
  const bool ok = worst < tol;
  std::printf("max relative error %.3e %s %.0e: %s\n", worst, ok ? "<" : ">=", tol, ok ? "PASS" : "FAIL");
  return ok ? 0 : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fdn: frequency-filtered prompt learning on frozen embeddings"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  Common common;
  std::string out = "fdn_out", synth_out, checkpoint, image_input, csv_out;
  std::size_t eval_batch = 0, jobs = 1, dim = 16, image_size = 128;
  std::vector<std::size_t> ks;
  std::uint64_t seed = 0;
  double keep = 350.0 / 512.0, tol = 1e-4;

  auto* synth = app.add_subcommand("synth", "generate a synthetic embedding dataset");
  add_common(synth, common);
  synth->add_option("--out", synth_out, "output dataset file")->required();

  auto* trn = app.add_subcommand("train", "train over eval.seeds seeds and write reports and checkpoints");
  add_common(trn, common);
  trn->add_option("--out-dir", out, "directory for report.txt, report.kv and checkpoints");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(ev, common);
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  ev->add_option("--eval-batch", eval_batch, "samples per forward pass (default 1)");

  auto* sweep = app.add_subcommand("sweep-k", "k sensitivity sweep, CSV k,mean,std");
  add_common(sweep, common);
  sweep->add_option("--k", ks, "retained-bin counts (default sweep.k)")->delimiter(',');
  sweep->add_option("--jobs", jobs, "parallel training workers");
  sweep->add_option("--out", csv_out, "also write the CSV here");

  auto* demo = app.add_subcommand("demo-image", "2-D DFT low-pass demo, writes PGM files");
  demo->add_option("--input", image_input, "P5 PGM input (default: generated test image)");
  demo->add_option("--keep", keep, "fraction of frequencies kept per axis")->check(CLI::Range(0.0, 1.0));
  demo->add_option("--size", image_size, "generated image size")->check(CLI::Range(2, 4096));
  demo->add_option("--out-dir", out, "output directory");

  std::string inspect_path;
  auto* insp = app.add_subcommand("inspect", "print a dataset file header");
  insp->add_option("path", inspect_path, "dataset file")->required();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference audit of the full loss");
  gc->add_option("--dim", dim, "feature width")->check(CLI::Range(4, 256));
  gc->add_option("--k", ks, "retained-bin counts (default d and 11d/16)")->delimiter(',');
  gc->add_option("--seed", seed, "seed");
  gc->add_option("--tol", tol, "pass threshold on the max relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (*synth) return cmd_synth(common, synth_out);
    if (*trn) return cmd_train(common, out);
    if (*ev) return cmd_eval(common, checkpoint, eval_batch);
    if (*sweep) return cmd_sweep(common, ks, jobs, csv_out);
    if (*demo) return cmd_demo_image(image_input, keep, out, image_size);
    if (*insp) return cmd_inspect(inspect_path);
    if (*gc) return cmd_gradcheck(dim, ks, seed, tol);
  } catch (const fdn::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const fdn::StateError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const fdn::ParameterError& e) {
    std::cerr << "usage error: " << e.what() << "\n" << app.help();
    return kUsage;
  } catch (const fdn::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  }
  return kUsage;
}
