#include "freqcoda/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "freqcoda/parallel.hpp"

namespace freqcoda::spectral {
namespace {

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

// 1D transform along a strided line: iterative radix-2 for powers of two,
// direct summation otherwise.
class Line {
 public:
  explicit Line(std::size_t n) : n_(n), pow2_(is_power_of_two(n)), roots_(n) {
    for (std::size_t k = 0; k < n; ++k) {
      const double angle = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
      roots_[k] = Complex(std::cos(angle), std::sin(angle));
    }
    if (pow2_) {
      bitrev_.resize(n);
      std::size_t bits = 0;
      while ((std::size_t{1} << bits) < n) ++bits;
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t r = 0;
        for (std::size_t b = 0; b < bits; ++b)
          if (i & (std::size_t{1} << b)) r |= std::size_t{1} << (bits - 1 - b);
        bitrev_[i] = r;
      }
    }
  }

  // Unnormalized in both directions.
  void run(Complex* data, std::size_t stride, bool inverse, std::vector<Complex>& scratch) const {
    scratch.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) scratch[i] = data[i * stride];
    if (pow2_) {
      for (std::size_t i = 0; i < n_; ++i) data[i * stride] = scratch[bitrev_[i]];
      for (std::size_t len = 2; len <= n_; len <<= 1) {
        const std::size_t half = len / 2;
        const std::size_t root_step = n_ / len;
        for (std::size_t start = 0; start < n_; start += len)
          for (std::size_t j = 0; j < half; ++j) {
            Complex w = roots_[j * root_step];
            if (inverse) w = std::conj(w);
            Complex& a = data[(start + j) * stride];
            Complex& b = data[(start + j + half) * stride];
            const Complex t = w * b;
            b = a - t;
            a = a + t;
          }
      }
      return;
    }
    for (std::size_t k = 0; k < n_; ++k) {
      Complex acc(0.0, 0.0);
      for (std::size_t j = 0; j < n_; ++j) {
        const Complex w = roots_[(j * k) % n_];
        acc += scratch[j] * (inverse ? std::conj(w) : w);
      }
      data[k * stride] = acc;
    }
  }

 private:
  std::size_t n_;
  bool pow2_;
  std::vector<Complex> roots_;
  std::vector<std::size_t> bitrev_;
};

void transform2d(std::vector<Complex>& grid, std::size_t h, std::size_t w, bool inverse) {
  const Line rows(w);
  const Line cols(h);
  std::vector<Complex> scratch;
  for (std::size_t r = 0; r < h; ++r) rows.run(grid.data() + r * w, 1, inverse, scratch);
  for (std::size_t c = 0; c < w; ++c) cols.run(grid.data() + c, w, inverse, scratch);
  if (inverse) {
    const double scale = 1.0 / static_cast<double>(h * w);
    for (Complex& v : grid) v *= scale;
  }
}

void check_extent(std::size_t h, std::size_t w) {
  if (h == 0 || w == 0)
    throw InvalidShape("spectral transform needs non-empty grid, got " + std::to_string(h) + "x" +
                       std::to_string(w));
}

void check_radius(double radius) {
  if (!(radius >= 0.0)) throw InvalidArgument("radius must be non-negative");
}

template <class T>
Spectrum forward_centered(std::span<const T> grid, std::size_t h, std::size_t w) {
  check_extent(h, w);
  if (grid.size() != h * w) throw InvalidShape("grid length does not match height*width");
  std::vector<Complex> work(grid.begin(), grid.end());
  transform2d(work, h, w, false);
  Spectrum s{h, w, std::vector<Complex>(h * w)};
  for (std::size_t u = 0; u < h; ++u)
    for (std::size_t v = 0; v < w; ++v)
      s.bins[((u + h / 2) % h) * w + (v + w / 2) % w] = work[u * w + v];
  return s;
}

std::vector<std::uint8_t> unshifted_low(std::size_t h, std::size_t w, double radius) {
  std::vector<std::uint8_t> low(h * w);
  for (std::size_t u = 0; u < h; ++u) {
    const double fu = static_cast<double>(signed_frequency(u, h));
    for (std::size_t v = 0; v < w; ++v) {
      const double fv = static_cast<double>(signed_frequency(v, w));
      low[u * w + v] = std::sqrt(fu * fu + fv * fv) <= radius ? 1 : 0;
    }
  }
  return low;
}

template <class T>
double split_impl(std::span<const T> plane, std::span<T> lfc, std::span<T> hfc, std::size_t h,
                  std::size_t w, const std::vector<std::uint8_t>& low) {
  const std::size_t n = h * w;
  if (plane.size() != n || lfc.size() != n || hfc.size() != n)
    throw InvalidShape("band split: plane length does not match splitter extent");
  std::vector<Complex> lo(plane.begin(), plane.end());
  transform2d(lo, h, w, false);
  std::vector<Complex> hi(n);
  for (std::size_t i = 0; i < n; ++i)
    if (!low[i]) {
      hi[i] = lo[i];
      lo[i] = Complex(0.0, 0.0);
    }
  transform2d(lo, h, w, true);
  transform2d(hi, h, w, true);
  double residue = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    lfc[i] = static_cast<T>(lo[i].real());
    hfc[i] = static_cast<T>(hi[i].real());
    residue = std::max({residue, std::abs(lo[i].imag()), std::abs(hi[i].imag())});
  }
  return residue;
}

}  // namespace

std::size_t FrequencyMask::low_count() const {
  return static_cast<std::size_t>(std::count(low.begin(), low.end(), std::uint8_t{1}));
}

Spectrum dft2(std::span<const double> grid, std::size_t height, std::size_t width) {
  return forward_centered(grid, height, width);
}

Spectrum dft2(std::span<const float> grid, std::size_t height, std::size_t width) {
  return forward_centered(grid, height, width);
}

std::vector<Complex> idft2(const Spectrum& spectrum) {
  const std::size_t h = spectrum.height, w = spectrum.width;
  check_extent(h, w);
  if (spectrum.bins.size() != h * w) throw InvalidShape("spectrum bin count mismatch");
  std::vector<Complex> work(h * w);
  for (std::size_t u = 0; u < h; ++u)
    for (std::size_t v = 0; v < w; ++v)
      work[u * w + v] = spectrum.bins[((u + h / 2) % h) * w + (v + w / 2) % w];
  transform2d(work, h, w, true);
  return work;
}

FrequencyMask make_masks(std::size_t height, std::size_t width, double radius) {
  check_extent(height, width);
  check_radius(radius);
  FrequencyMask m{height, width, radius, std::vector<std::uint8_t>(height * width),
                  std::vector<std::uint8_t>(height * width)};
  const double cu = static_cast<double>(height / 2);
  const double cv = static_cast<double>(width / 2);
  for (std::size_t u = 0; u < height; ++u)
    for (std::size_t v = 0; v < width; ++v) {
      const double du = static_cast<double>(u) - cu;
      const double dv = static_cast<double>(v) - cv;
      const bool low = std::sqrt(du * du + dv * dv) <= radius;
      m.low[u * width + v] = low ? 1 : 0;
      m.high[u * width + v] = low ? 0 : 1;
    }
  return m;
}

double full_radius(std::size_t height, std::size_t width) {
  const double a = static_cast<double>((height + 1) / 2);
  const double b = static_cast<double>((width + 1) / 2);
  return std::sqrt(a * a + b * b);
}

BandSplitter::BandSplitter(std::size_t height, std::size_t width, double radius)
    : height_(height), width_(width), radius_(radius) {
  check_extent(height, width);
  check_radius(radius);
  low_unshifted_ = unshifted_low(height, width, radius);
  has_high_ = std::find(low_unshifted_.begin(), low_unshifted_.end(), std::uint8_t{0}) !=
              low_unshifted_.end();
}

double BandSplitter::split(std::span<const float> plane, std::span<float> lfc,
                           std::span<float> hfc) const {
  if (!has_high_) {
    std::copy(plane.begin(), plane.end(), lfc.begin());
    std::fill(hfc.begin(), hfc.end(), 0.0f);
    return 0.0;
  }
  return split_impl(plane, lfc, hfc, height_, width_, low_unshifted_);
}

double BandSplitter::split(std::span<const double> plane, std::span<double> lfc,
                           std::span<double> hfc) const {
  if (!has_high_) {
    std::copy(plane.begin(), plane.end(), lfc.begin());
    std::fill(hfc.begin(), hfc.end(), 0.0);
    return 0.0;
  }
  return split_impl(plane, lfc, hfc, height_, width_, low_unshifted_);
}

std::vector<double> BandSplitter::band_magnitudes(std::span<const float> plane, Band band) const {
  const Spectrum s = dft2(plane, height_, width_);
  const FrequencyMask mask = make_masks(height_, width_, radius_);
  std::vector<double> out(s.bins.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const bool keep = band == Band::low ? mask.low[i] != 0 : mask.high[i] != 0;
    out[i] = keep ? std::abs(s.bins[i]) : 0.0;
  }
  return out;
}

namespace {

void split_planes(const Tensor& input, std::size_t planes, std::size_t h, std::size_t w,
                  double radius, Decomposition& out) {
  if (!input.all_finite()) throw InvalidData("decompose: input contains non-finite values");
  check_radius(radius);
  const BandSplitter splitter(h, w, radius);
  const std::size_t n = h * w;
  double scale = 1.0;
  for (float v : input.values()) scale = std::max(scale, static_cast<double>(std::abs(v)));
  std::vector<double> residues(planes, 0.0);
  parallel_for(planes, [&](std::size_t p) {
    residues[p] = splitter.split(input.span().subspan(p * n, n), out.lfc.span().subspan(p * n, n),
                                 out.hfc.span().subspan(p * n, n));
  });
  const double worst = *std::max_element(residues.begin(), residues.end());
  if (worst > 1e-6 * scale)
    throw InvalidData("decompose: imaginary residue " + std::to_string(worst) +
                      " exceeds tolerance (asymmetric mask?)");
}

}  // namespace

Decomposition decompose(const Tensor& image, double radius) {
  require_rank(image, 3, "decompose");
  check_extent(image.dim(1), image.dim(2));
  Decomposition d{Tensor(image.dims()), Tensor(image.dims())};
  split_planes(image, image.dim(0), image.dim(1), image.dim(2), radius, d);
  return d;
}

Decomposition decompose_batch(const Tensor& batch, double radius) {
  require_rank(batch, 4, "decompose_batch");
  check_extent(batch.dim(2), batch.dim(3));
  Decomposition d{Tensor(batch.dims()), Tensor(batch.dims())};
  split_planes(batch, batch.dim(0) * batch.dim(1), batch.dim(2), batch.dim(3), radius, d);
  return d;
}

double scaled_radius(double radius_fraction, std::size_t spatial_size) {
  if (!(radius_fraction > 0.0 && radius_fraction <= 1.0))
    throw InvalidArgument("radius fraction must lie in (0, 1]");
  if (spatial_size == 0) throw InvalidArgument("spatial size must be >= 1");
  return std::max(1.0, std::round(radius_fraction * static_cast<double>(spatial_size)));
}

double energy(std::span<const float> values) {
  double e = 0.0;
  for (float v : values) e += static_cast<double>(v) * v;
  return e;
}

}  // namespace freqcoda::spectral
