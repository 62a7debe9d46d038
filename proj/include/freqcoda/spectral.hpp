#pragma once

#include <complex>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "freqcoda/tensor.hpp"

// 2D Fourier transforms and radius-masked low/high band splitting of real
// planes. Spectra are presented DC-centered: the zero-frequency bin sits at
// (floor(h/2), floor(w/2)). Forward transforms are unnormalized; inverses
// carry the 1/(h*w) factor.
namespace freqcoda::spectral {

using Complex = std::complex<double>;

struct Spectrum {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Complex> bins;  // row-major, DC-centered

  Complex& at(std::size_t u, std::size_t v) { return bins[u * width + v]; }
  const Complex& at(std::size_t u, std::size_t v) const { return bins[u * width + v]; }
  std::size_t dc_row() const { return height / 2; }
  std::size_t dc_col() const { return width / 2; }
};

// Exact partition of the (centered) bin grid: a bin is low iff its Euclidean
// distance from the DC bin is <= radius.
struct FrequencyMask {
  std::size_t height = 0;
  std::size_t width = 0;
  double radius = 0.0;
  std::vector<std::uint8_t> low;
  std::vector<std::uint8_t> high;

  bool is_low(std::size_t u, std::size_t v) const { return low[u * width + v] != 0; }
  std::size_t low_count() const;
};

struct Decomposition {
  Tensor lfc;
  Tensor hfc;
};

enum class Band { low, high };

Spectrum dft2(std::span<const double> grid, std::size_t height, std::size_t width);
Spectrum dft2(std::span<const float> grid, std::size_t height, std::size_t width);

// Complex spatial grid; for spectra of real grids the imaginary part is
// rounding noise.
std::vector<Complex> idft2(const Spectrum& spectrum);

FrequencyMask make_masks(std::size_t height, std::size_t width, double radius);

// Smallest radius whose low mask covers every bin.
double full_radius(std::size_t height, std::size_t width);

// Signed frequency index of unshifted bin u on an axis of length n.
inline long signed_frequency(std::size_t u, std::size_t n) {
  const std::size_t half_up = (n + 1) / 2;
  return u < half_up ? static_cast<long>(u) : static_cast<long>(u) - static_cast<long>(n);
}

// Precomputed splitter for one (height, width, radius): forward transform,
// mask in unshifted layout, two inverse transforms. Immutable and safe to
// share across threads.
class BandSplitter {
 public:
  BandSplitter(std::size_t height, std::size_t width, double radius);

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  double radius() const noexcept { return radius_; }
  bool has_high_band() const noexcept { return has_high_; }

  // lfc/hfc receive the real parts of the two inverse transforms. Returns the
  // largest imaginary residue seen.
  double split(std::span<const float> plane, std::span<float> lfc, std::span<float> hfc) const;
  double split(std::span<const double> plane, std::span<double> lfc, std::span<double> hfc) const;

  // Magnitude spectrum restricted to one band, in centered layout; bins
  // outside the band are zero.
  std::vector<double> band_magnitudes(std::span<const float> plane, Band band) const;

 private:
  std::size_t height_;
  std::size_t width_;
  double radius_;
  bool has_high_ = false;
  std::vector<std::uint8_t> low_unshifted_;
};

// Per-channel split of a C x H x W image. Throws InvalidData on non-finite
// input and if an inverse leaves an imaginary residue above 1e-6 (scaled by
// the input magnitude).
Decomposition decompose(const Tensor& image, double radius);

// Same split applied to each sample of an N x C x H x W batch.
Decomposition decompose_batch(const Tensor& batch, double radius);

// max(1, round(fraction * spatial_size)) for fraction in (0, 1].
double scaled_radius(double radius_fraction, std::size_t spatial_size);

// Sum of squares of a real grid.
double energy(std::span<const float> values);

}  // namespace freqcoda::spectral
