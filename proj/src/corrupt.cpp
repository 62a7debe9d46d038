#include <algorithm>
#include <cmath>
#include <sstream>

#include "freqcoda/data.hpp"
#include "freqcoda/rng.hpp"

namespace freqcoda::data {
namespace {

constexpr std::array<double, 5> kGaussianSigma{0.08, 0.12, 0.18, 0.26, 0.38};
constexpr std::array<double, 5> kShotPhotons{60, 25, 12, 5, 3};
constexpr std::array<double, 5> kImpulseProb{0.03, 0.06, 0.09, 0.17, 0.27};
constexpr std::array<double, 5> kDefocusRadius{1.0, 1.5, 2.0, 2.5, 3.0};
constexpr std::array<double, 5> kContrastFactor{0.4, 0.3, 0.2, 0.1, 0.05};
constexpr std::array<double, 5> kBrightnessShift{0.1, 0.2, 0.3, 0.4, 0.5};
constexpr std::array<double, 5> kPixelateScale{0.6, 0.5, 0.4, 0.3, 0.25};

constexpr std::array<std::pair<CorruptionKind, std::string_view>, 8> kNames{{
    {CorruptionKind::identity, "identity"},
    {CorruptionKind::gaussian_noise, "gaussian_noise"},
    {CorruptionKind::shot_noise, "shot_noise"},
    {CorruptionKind::impulse_noise, "impulse_noise"},
    {CorruptionKind::defocus_blur, "defocus_blur"},
    {CorruptionKind::contrast, "contrast"},
    {CorruptionKind::brightness, "brightness"},
    {CorruptionKind::pixelate, "pixelate"},
}};

float clip01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

std::size_t reflect(long i, std::size_t n) {
  const long len = static_cast<long>(n);
  if (len == 1) return 0;
  const long period = 2 * (len - 1);
  long m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < len ? m : period - m);
}

Tensor defocus(const Tensor& img, double radius) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  std::vector<std::pair<long, long>> taps;
  const long reach = static_cast<long>(std::floor(radius));
  for (long dy = -reach; dy <= reach; ++dy)
    for (long dx = -reach; dx <= reach; ++dx)
      if (static_cast<double>(dy * dy + dx * dx) <= radius * radius) taps.emplace_back(dy, dx);
  const double weight = 1.0 / static_cast<double>(taps.size());
  Tensor out(img.dims());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (auto [dy, dx] : taps)
          acc += img[(ch * h + reflect(static_cast<long>(y) + dy, h)) * w + reflect(static_cast<long>(x) + dx, w)];
        out[(ch * h + y) * w + x] = clip01(acc * weight);
      }
  return out;
}

Tensor pixelate(const Tensor& img, double scale) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const std::size_t mh = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(h) * scale)));
  const std::size_t mw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(w) * scale)));
  Tensor out(img.dims());
  std::vector<double> sum(mh * mw);
  std::vector<std::size_t> count(mh * mw);
  for (std::size_t ch = 0; ch < c; ++ch) {
    std::fill(sum.begin(), sum.end(), 0.0);
    std::fill(count.begin(), count.end(), 0);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t cell = (y * mh / h) * mw + x * mw / w;
        sum[cell] += img[(ch * h + y) * w + x];
        ++count[cell];
      }
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t cell = (y * mh / h) * mw + x * mw / w;
        out[(ch * h + y) * w + x] = clip01(sum[cell] / static_cast<double>(count[cell]));
      }
  }
  return out;
}

// HSV value shift: hue and saturation are kept, so RGB scales by v'/v.
Tensor brightness(const Tensor& img, double shift) {
  const std::size_t c = img.dim(0), hw = img.dim(1) * img.dim(2);
  Tensor out(img.dims());
  for (std::size_t p = 0; p < hw; ++p) {
    double v = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) v = std::max(v, static_cast<double>(img[ch * hw + p]));
    const double v_new = std::clamp(v + shift, 0.0, 1.0);
    for (std::size_t ch = 0; ch < c; ++ch)
      out[ch * hw + p] = v > 0.0 ? clip01(img[ch * hw + p] * (v_new / v)) : clip01(v_new);
  }
  return out;
}

}  // namespace

std::string_view to_string(CorruptionKind kind) {
  for (const auto& [k, name] : kNames)
    if (k == kind) return name;
  return "unknown";
}

CorruptionKind parse_corruption(std::string_view name) {
  for (const auto& [k, n] : kNames)
    if (n == name) return k;
  throw InvalidArgument("unknown corruption kind: " + std::string(name));
}

std::vector<CorruptionKind> parse_corruption_list(std::string_view comma_separated) {
  std::vector<CorruptionKind> out;
  std::stringstream ss{std::string(comma_separated)};
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(parse_corruption(item));
  if (out.empty()) throw InvalidArgument("empty corruption list");
  return out;
}

double severity_parameter(CorruptionKind kind, int severity) {
  if (kind == CorruptionKind::identity) return 0.0;
  if (severity < 1 || severity > 5) throw InvalidArgument("corruption severity must be in [1, 5]");
  const std::size_t i = static_cast<std::size_t>(severity - 1);
  switch (kind) {
    case CorruptionKind::gaussian_noise: return kGaussianSigma[i];
    case CorruptionKind::shot_noise: return kShotPhotons[i];
    case CorruptionKind::impulse_noise: return kImpulseProb[i];
    case CorruptionKind::defocus_blur: return kDefocusRadius[i];
    case CorruptionKind::contrast: return kContrastFactor[i];
    case CorruptionKind::brightness: return kBrightnessShift[i];
    case CorruptionKind::pixelate: return kPixelateScale[i];
    case CorruptionKind::identity: break;
  }
  throw InvalidArgument("unknown corruption kind");
}

Tensor apply_corruption(const Tensor& image, CorruptionKind kind, double parameter, std::uint64_t seed) {
  require_rank(image, 3, "corrupt");
  if (!(parameter >= 0.0)) throw InvalidArgument("corruption parameter must be non-negative");
  std::mt19937_64 rng = make_rng(seed, static_cast<std::uint64_t>(kind));
  Tensor out(image.dims());
  switch (kind) {
    case CorruptionKind::identity:
      return image;
    case CorruptionKind::gaussian_noise: {
      if (parameter == 0.0) return image;
      std::normal_distribution<double> n(0.0, parameter);
      for (std::size_t i = 0; i < image.size(); ++i) out[i] = clip01(image[i] + n(rng));
      return out;
    }
    case CorruptionKind::shot_noise: {
      if (!(parameter > 0.0)) throw InvalidArgument("shot noise needs a positive photon count");
      for (std::size_t i = 0; i < image.size(); ++i) {
        const double rate = std::max(0.0, static_cast<double>(image[i])) * parameter;
        const double k = rate > 0.0 ? static_cast<double>(std::poisson_distribution<long>(rate)(rng)) : 0.0;
        out[i] = clip01(k / parameter);
      }
      return out;
    }
    case CorruptionKind::impulse_noise: {
      if (parameter > 1.0) throw InvalidArgument("impulse probability must be <= 1");
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (std::size_t i = 0; i < image.size(); ++i) {
        const bool hit = u(rng) < parameter;
        const bool salt = u(rng) < 0.5;
        out[i] = hit ? (salt ? 1.0f : 0.0f) : image[i];
      }
      return out;
    }
    case CorruptionKind::defocus_blur:
      return defocus(image, parameter);
    case CorruptionKind::contrast: {
      const std::size_t c = image.dim(0), hw = image.dim(1) * image.dim(2);
      for (std::size_t ch = 0; ch < c; ++ch) {
        double mean = 0.0;
        for (std::size_t j = 0; j < hw; ++j) mean += image[ch * hw + j];
        mean /= static_cast<double>(hw);
        for (std::size_t j = 0; j < hw; ++j) out[ch * hw + j] = clip01((image[ch * hw + j] - mean) * parameter + mean);
      }
      return out;
    }
    case CorruptionKind::brightness:
      return brightness(image, parameter);
    case CorruptionKind::pixelate:
      if (!(parameter > 0.0 && parameter <= 1.0)) throw InvalidArgument("pixelate scale must be in (0, 1]");
      return pixelate(image, parameter);
  }
  throw InvalidArgument("unknown corruption kind");
}

Tensor corrupt(const Tensor& image, const CorruptionSpec& spec) {
  return apply_corruption(image, spec.kind, severity_parameter(spec.kind, spec.severity), spec.seed);
}

Dataset corrupt_dataset(const Dataset& dataset, const CorruptionSpec& spec) {
  Dataset out{Tensor(dataset.images.dims()), dataset.labels, dataset.num_classes,
              dataset.name + ":" + std::string(to_string(spec.kind)) + "-" + std::to_string(spec.severity)};
  const std::size_t stride = dataset.images.size() / std::max<std::size_t>(1, dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    CorruptionSpec s = spec;
    s.seed = spec.seed ^ i;
    const Tensor y = corrupt(dataset.image(i), s);
    std::copy(y.values().begin(), y.values().end(), out.images.data() + i * stride);
  }
  return out;
}

}  // namespace freqcoda::data
