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

#include <complex>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "fdn/autodiff.hpp"
#include "fdn/dense_array.hpp"

namespace fdn::spectral {

using Complex = std::complex<double>;

struct ComplexSpectrum {
  std::vector<Complex> bins;
  std::size_t length() const { return bins.size(); }
};

/// S_q = sum_p s_p exp(-i 2 pi p q / d). Radix-2 FFT for power-of-two
/// lengths, direct summation otherwise.
ComplexSpectrum dft_1d(std::span<const double> signal);

struct InverseResult {
  std::vector<double> signal;       // real part
  double max_imag_residue = 0.0;    // max |Im| discarded
};

/// s_p = (1/d) sum_q S_q exp(+i 2 pi p q / d), real part returned.
InverseResult idft_1d(const ComplexSpectrum& spectrum);

/// In-place complex transform used by both directions. No 1/d scaling.
void fft_in_place(std::vector<Complex>& data, bool inverse);

/// O(d^2) reference summation; kept public for diagnostics and demos.
ComplexSpectrum naive_dft(std::span<const double> signal);

/// Centered frequency of bin q: q for q <= d/2, q - d otherwise.
long centered_frequency(std::size_t q, std::size_t d);

/// Binary retention mask over the d bins of a full complex DFT. Bins are
/// ranked by |centered frequency|, positive frequency first on ties, and
/// the first k are kept.
struct SpectralFilterSpec {
  std::size_t d = 0;
  std::size_t k = 0;
  std::vector<std::uint8_t> mask;

  bool keeps(std::size_t q) const { return mask[q] != 0; }
  /// Mask with bin q moved to bin (d - q) mod d.
  std::vector<std::uint8_t> reversed_mask() const;
};

SpectralFilterSpec build_lowpass_mask(std::size_t d, std::size_t k);

/// Applies Re(IDFT(mask * DFT(row))) to every row of x (B x d).
DenseArray ffb_apply(const DenseArray& x, const SpectralFilterSpec& spec);

/// Tape version; the adjoint applies the frequency-reversed filter to the
/// upstream gradient.
ad::Var ffb_apply(ad::Var x, const SpectralFilterSpec& spec);

/// Number of inverse transforms whose imaginary residue exceeded
/// 1e-6 * ||input|| since process start (odd k never triggers this).
std::uint64_t imaginary_residue_warnings();

struct LowpassImage {
  DenseArray filtered;               // real part after inverse 2-D DFT
  DenseArray log_magnitude;          // log(1 + |S|) of the input, DC centered
  DenseArray filtered_log_magnitude; // same after masking
  std::size_t kept_rows = 0;
  std::size_t kept_cols = 0;
};

/// Row-then-column 2-D DFT, keeps round(f*P) x round(f*T) centered
/// low-frequency bins (each axis ranked like build_lowpass_mask), inverts.
LowpassImage dft_lowpass_2d(const DenseArray& image, double keep_fraction);

/// Direct O(P^2 T^2) double sum, the oracle for dft_lowpass_2d.
std::vector<Complex> naive_dft_2d(const DenseArray& image);

/// Binary PGM (P5, 8-bit). Values are min-max scaled to [0, 255] on write.
void write_pgm(const std::filesystem::path& path, const DenseArray& image);
DenseArray read_pgm(const std::filesystem::path& path);

}  // namespace fdn::spectral
