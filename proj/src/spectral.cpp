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

#include "fdn/spectral.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "fdn/errors.hpp"

namespace fdn::spectral {

namespace {

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

std::atomic<std::uint64_t> g_residue_warnings{0};

void direct_transform(std::vector<Complex>& data, bool inverse) {
  const std::size_t n = data.size();
  const double sign = inverse ? 1.0 : -1.0;
  std::vector<Complex> out(n);
  for (std::size_t q = 0; q < n; ++q) {
    Complex acc = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      // Reduce p*q mod n before forming the angle to keep it small.
      const double angle = sign * 2.0 * std::numbers::pi *
                           static_cast<double>((p * q) % n) / static_cast<double>(n);
      acc += data[p] * std::polar(1.0, angle);
    }
    out[q] = acc;
  }
  data.swap(out);
}

void radix2_transform(std::vector<Complex>& a, bool inverse) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  const double sign = inverse ? 1.0 : -1.0;
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2;
    std::vector<Complex> tw(half);
    for (std::size_t k = 0; k < half; ++k) {
      tw[k] = std::polar(1.0, sign * 2.0 * std::numbers::pi * static_cast<double>(k) /
                                  static_cast<double>(len));
    }
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t k = 0; k < half; ++k) {
        const Complex u = a[i + k];
        const Complex v = a[i + k + half] * tw[k];
        a[i + k] = u + v;
        a[i + k + half] = u - v;
      }
    }
  }
}

// y = Re(IDFT(mask * DFT(x))) on one row; returns the discarded imaginary max.
double filter_row(std::span<const double> x, std::span<double> y,
                  const std::vector<std::uint8_t>& mask, std::vector<Complex>& work) {
  const std::size_t d = x.size();
  work.assign(x.begin(), x.end());
  fft_in_place(work, false);
  for (std::size_t q = 0; q < d; ++q)
    if (!mask[q]) work[q] = 0.0;
  fft_in_place(work, true);
  double residue = 0.0;
  const double inv = 1.0 / static_cast<double>(d);
  for (std::size_t p = 0; p < d; ++p) {
    y[p] = work[p].real() * inv;
    residue = std::max(residue, std::abs(work[p].imag() * inv));
  }
  return residue;
}

DenseArray filter_rows(const DenseArray& x, const std::vector<std::uint8_t>& mask,
                       bool track_residue) {
  DenseArray y(x.shape());
  std::vector<Complex> work;
  bool warned = false;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double residue = filter_row(x.row_span(r), y.row_span(r), mask, work);
    if (track_residue && !warned && residue > 1e-6 * l2_norm(x.row_span(r))) {
      warned = true;
      if (g_residue_warnings.fetch_add(1) == 0) {
        std::cerr << "warning: low-pass mask is not conjugate-symmetric; discarding imaginary "
                     "residue up to "
                  << residue << " (reported once)\n";
      }
    }
  }
  return y;
}

}  // namespace

void fft_in_place(std::vector<Complex>& data, bool inverse) {
  if (data.empty()) throw DimensionError("DFT of an empty signal");
  if (is_power_of_two(data.size())) {
    radix2_transform(data, inverse);
  } else {
    direct_transform(data, inverse);
  }
}

ComplexSpectrum dft_1d(std::span<const double> signal) {
  ComplexSpectrum s;
  s.bins.assign(signal.begin(), signal.end());
  fft_in_place(s.bins, false);
  return s;
}

ComplexSpectrum naive_dft(std::span<const double> signal) {
  if (signal.empty()) throw DimensionError("DFT of an empty signal");
  ComplexSpectrum s;
  s.bins.assign(signal.begin(), signal.end());
  direct_transform(s.bins, false);
  return s;
}

InverseResult idft_1d(const ComplexSpectrum& spectrum) {
  std::vector<Complex> work = spectrum.bins;
  fft_in_place(work, true);
  InverseResult r;
  r.signal.resize(work.size());
  const double inv = 1.0 / static_cast<double>(work.size());
  for (std::size_t p = 0; p < work.size(); ++p) {
    r.signal[p] = work[p].real() * inv;
    r.max_imag_residue = std::max(r.max_imag_residue, std::abs(work[p].imag() * inv));
  }
  return r;
}

long centered_frequency(std::size_t q, std::size_t d) {
  return q <= d / 2 ? static_cast<long>(q) : static_cast<long>(q) - static_cast<long>(d);
}

std::vector<std::uint8_t> SpectralFilterSpec::reversed_mask() const {
  std::vector<std::uint8_t> out(d);
  for (std::size_t q = 0; q < d; ++q) out[(d - q) % d] = mask[q];
  return out;
}

SpectralFilterSpec build_lowpass_mask(std::size_t d, std::size_t k) {
  if (d == 0) throw DimensionError("low-pass mask over zero bins");
  if (k < 1 || k > d) {
    throw ParameterError("retained bin count k=" + std::to_string(k) + " outside [1, " +
                         std::to_string(d) + "]");
  }
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [d](std::size_t a, std::size_t b) {
    const long fa = centered_frequency(a, d), fb = centered_frequency(b, d);
    if (std::labs(fa) != std::labs(fb)) return std::labs(fa) < std::labs(fb);
    return fa > fb;
  });
  SpectralFilterSpec spec{d, k, std::vector<std::uint8_t>(d, 0)};
  for (std::size_t i = 0; i < k; ++i) spec.mask[order[i]] = 1;
  return spec;
}

DenseArray ffb_apply(const DenseArray& x, const SpectralFilterSpec& spec) {
  if (x.cols() != spec.d) {
    throw DimensionError("ffb_apply: row length " + std::to_string(x.cols()) +
                         " does not match filter length " + std::to_string(spec.d));
  }
  return filter_rows(x, spec.mask, true);
}

ad::Var ffb_apply(ad::Var x, const SpectralFilterSpec& spec) {
  DenseArray y = ffb_apply(x.value(), spec);
  return x.tape().record(
      "ffb_apply", std::move(y), {x},
      [reversed = spec.reversed_mask()](const DenseArray& g, const DenseArray&,
                                        std::span<DenseArray* const> in) {
        DenseArray back = filter_rows(g, reversed, false);
        for (std::size_t i = 0; i < back.size(); ++i) (*in[0])[i] += back[i];
      });
}

std::uint64_t imaginary_residue_warnings() { return g_residue_warnings.load(); }

// ---------------------------------------------------------------------------
// 2-D
// ---------------------------------------------------------------------------

namespace {

void transform_2d(std::vector<Complex>& data, std::size_t rows, std::size_t cols, bool inverse) {
  std::vector<Complex> line;
  for (std::size_t r = 0; r < rows; ++r) {
    line.assign(data.begin() + r * cols, data.begin() + (r + 1) * cols);
    fft_in_place(line, inverse);
    std::copy(line.begin(), line.end(), data.begin() + r * cols);
  }
  line.resize(rows);
  for (std::size_t c = 0; c < cols; ++c) {
    for (std::size_t r = 0; r < rows; ++r) line[r] = data[r * cols + c];
    fft_in_place(line, inverse);
    for (std::size_t r = 0; r < rows; ++r) data[r * cols + c] = line[r];
  }
}

DenseArray centered_log_magnitude(const std::vector<Complex>& s, std::size_t rows,
                                  std::size_t cols) {
  DenseArray out = DenseArray::matrix(rows, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t rr = (r + rows / 2) % rows, cc = (c + cols / 2) % cols;
      out.at(rr, cc) = std::log1p(std::abs(s[r * cols + c]));
    }
  return out;
}

std::size_t axis_keep(double fraction, std::size_t n) {
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  return std::clamp<std::size_t>(k, 1, n);
}

}  // namespace

LowpassImage dft_lowpass_2d(const DenseArray& image, double keep_fraction) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw ParameterError("keep_fraction must lie in (0, 1]");
  }
  if (image.rank() != 2) throw DimensionError("dft_lowpass_2d expects a rank-2 image");
  const std::size_t rows = image.rows(), cols = image.cols();
  std::vector<Complex> spec(image.data().begin(), image.data().end());
  transform_2d(spec, rows, cols, false);

  LowpassImage out;
  out.log_magnitude = centered_log_magnitude(spec, rows, cols);
  out.kept_rows = axis_keep(keep_fraction, rows);
  out.kept_cols = axis_keep(keep_fraction, cols);
  const auto row_mask = build_lowpass_mask(rows, out.kept_rows);
  const auto col_mask = build_lowpass_mask(cols, out.kept_cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      if (!(row_mask.keeps(r) && col_mask.keeps(c))) spec[r * cols + c] = 0.0;
  out.filtered_log_magnitude = centered_log_magnitude(spec, rows, cols);

  transform_2d(spec, rows, cols, true);
  out.filtered = DenseArray::matrix(rows, cols);
  const double inv = 1.0 / static_cast<double>(rows * cols);
  for (std::size_t i = 0; i < spec.size(); ++i) out.filtered[i] = spec[i].real() * inv;
  return out;
}

std::vector<Complex> naive_dft_2d(const DenseArray& image) {
  const std::size_t P = image.rows(), T = image.cols();
  std::vector<Complex> out(P * T);
  for (std::size_t q = 0; q < P; ++q)
    for (std::size_t r = 0; r < T; ++r) {
      Complex acc = 0.0;
      for (std::size_t p = 0; p < P; ++p)
        for (std::size_t t = 0; t < T; ++t) {
          const double angle =
              -2.0 * std::numbers::pi *
              (static_cast<double>((p * q) % P) / static_cast<double>(P) +
               static_cast<double>((t * r) % T) / static_cast<double>(T));
          acc += image.at(p, t) * std::polar(1.0, angle);
        }
      out[q * T + r] = acc;
    }
  return out;
}

// ---------------------------------------------------------------------------
// PGM
// ---------------------------------------------------------------------------

void write_pgm(const std::filesystem::path& path, const DenseArray& image) {
  if (image.rank() != 2) throw DimensionError("write_pgm expects a rank-2 image");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path.string() + " for writing");
  const auto [lo, hi] = std::minmax_element(image.data().begin(), image.data().end());
  const double span = *hi - *lo;
  f << "P5\n" << image.cols() << " " << image.rows() << "\n255\n";
  for (double v : image.data()) {
    const double unit = span > 0.0 ? (v - *lo) / span : 0.0;
    f.put(static_cast<char>(static_cast<unsigned char>(std::lround(unit * 255.0))));
  }
  if (!f) throw DataError("write failed for " + path.string());
}

DenseArray read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path.string());
  std::string magic;
  f >> magic;
  if (magic != "P5") throw MagicError("not a binary PGM (P5): " + path.string());
  auto next_int = [&f, &path]() {
    f >> std::ws;
    while (f.peek() == '#') {
      std::string comment;
      std::getline(f, comment);
      f >> std::ws;
    }
    long v = -1;
    if (!(f >> v) || v <= 0) throw FormatError("malformed PGM header in " + path.string());
    return static_cast<std::size_t>(v);
  };
  const std::size_t cols = next_int(), rows = next_int(), maxval = next_int();
  if (maxval > 255) throw FormatError("only 8-bit PGM is supported");
  f.get();
  DenseArray img = DenseArray::matrix(rows, cols);
  for (std::size_t i = 0; i < rows * cols; ++i) {
    const int c = f.get();
    if (c == EOF) throw TruncationError("PGM pixel data truncated", static_cast<std::uint64_t>(i));
    img[i] = static_cast<double>(c) / static_cast<double>(maxval);
  }
  return img;
}

}  // namespace fdn::spectral
