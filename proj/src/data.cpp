#include "freqcoda/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "freqcoda/io.hpp"
#include "freqcoda/rng.hpp"

namespace freqcoda::data {
namespace {

constexpr std::size_t kRecordBytes = 3073;
constexpr std::size_t kSide = 32;

struct Rgb {
  float r, g, b;
};

}  // namespace

Tensor Dataset::image(std::size_t i) const {
  Tensor t({images.dim(1), images.dim(2), images.dim(3)});
  const auto s = images.slab(i);
  std::copy(s.begin(), s.end(), t.data());
  return t;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset d{gather_batch(images, indices), {}, num_classes, name};
  d.labels.reserve(indices.size());
  for (std::size_t i : indices) d.labels.push_back(labels.at(i));
  return d;
}

Dataset Dataset::head(std::size_t n) const {
  n = std::min(n, size());
  return Dataset{slice_batch(images, 0, n), std::vector<int>(labels.begin(), labels.begin() + n), num_classes,
                 name};
}

void Dataset::validate() const {
  if (images.rank() != 4) throw InvalidData("dataset " + name + ": images must be N x C x H x W");
  if (images.dim(0) != labels.size()) throw InvalidData("dataset " + name + ": image/label count mismatch");
  for (float v : images.values())
    if (!(v >= 0.0f && v <= 1.0f)) throw InvalidData("dataset " + name + ": pixel outside [0,1]");
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= num_classes)
      throw InvalidData("dataset " + name + ": label " + std::to_string(l) + " out of range");
}

Dataset parse_cifar_records(std::string_view bytes, std::string_view source) {
  if (bytes.size() % kRecordBytes != 0)
    throw FormatError(std::string(source) + ": length " + std::to_string(bytes.size()) +
                      " is not a multiple of 3073");
  const std::size_t n = bytes.size() / kRecordBytes;
  Dataset d{Tensor({n, 3, kSide, kSide}), std::vector<int>(n), 10, std::string(source)};
  for (std::size_t i = 0; i < n; ++i) {
    const auto* rec = reinterpret_cast<const unsigned char*>(bytes.data() + i * kRecordBytes);
    if (rec[0] >= 10)
      throw FormatError(std::string(source) + ": record " + std::to_string(i) + " has label " +
                        std::to_string(rec[0]));
    d.labels[i] = rec[0];
    float* px = d.images.data() + i * 3 * kSide * kSide;
    for (std::size_t j = 0; j < 3 * kSide * kSide; ++j) px[j] = static_cast<float>(rec[1 + j]) / 255.0f;
  }
  return d;
}

Dataset load_cifar_batch(const std::filesystem::path& file) {
  if (!std::filesystem::exists(file)) throw IngestionError("missing CIFAR-10 file: " + file.string());
  const std::string bytes = io::read_file(file);
  return parse_cifar_records(bytes, file.filename().string());
}

CifarSplits load_cifar10(const std::filesystem::path& directory) {
  std::vector<std::filesystem::path> train_files;
  for (int i = 1; i <= 5; ++i) train_files.push_back(directory / ("data_batch_" + std::to_string(i) + ".bin"));
  const std::filesystem::path test_file = directory / "test_batch.bin";
  for (const auto& f : train_files)
    if (!std::filesystem::exists(f)) throw IngestionError("missing CIFAR-10 file: " + f.string());
  if (!std::filesystem::exists(test_file)) throw IngestionError("missing CIFAR-10 file: " + test_file.string());

  std::vector<Dataset> parts;
  std::size_t total = 0;
  for (const auto& f : train_files) {
    parts.push_back(load_cifar_batch(f));
    total += parts.back().size();
  }
  CifarSplits out;
  out.train = Dataset{Tensor({total, 3, kSide, kSide}), {}, 10, "cifar10-train"};
  std::size_t offset = 0;
  for (const Dataset& p : parts) {
    std::copy(p.images.values().begin(), p.images.values().end(), out.train.images.data() + offset);
    offset += p.images.size();
    out.train.labels.insert(out.train.labels.end(), p.labels.begin(), p.labels.end());
  }
  out.test = load_cifar_batch(test_file);
  out.test.name = "cifar10-test";
  return out;
}

namespace {

enum class Shape { disk, square, hstripes, checker, ring, cross, triangle, vstripes, dstripes, diamond };

bool inside(Shape shape, double dy, double dx, double scale, double period, double phase) {
  const double r = std::sqrt(dy * dy + dx * dx);
  const double box = std::max(std::abs(dy), std::abs(dx));
  auto band = [&](double coord) {
    const double t = std::fmod(coord + phase + 1000.0 * period, period);
    return t < period / 2.0;
  };
  switch (shape) {
    case Shape::disk:
      return r <= scale;
    case Shape::square:
      return box <= scale * 0.85;
    case Shape::hstripes:
      return box <= scale && band(dy);
    case Shape::checker:
      return box <= scale && (band(dy) != band(dx));
    case Shape::ring:
      return r <= scale && r >= scale * 0.55;
    case Shape::cross:
      return box <= scale && (std::abs(dy) <= scale * 0.3 || std::abs(dx) <= scale * 0.3);
    case Shape::triangle:
      return dy <= scale * 0.8 && dy >= -scale && std::abs(dx) <= (dy + scale) * 0.55;
    case Shape::vstripes:
      return box <= scale && band(dx);
    case Shape::dstripes:
      return box <= scale && band((dx + dy) / std::numbers::sqrt2);
    case Shape::diamond:
      return std::abs(dy) + std::abs(dx) <= scale;
  }
  return false;
}

}  // namespace

Dataset synth_dataset(std::uint64_t seed, std::size_t n, std::size_t num_classes) {
  if (num_classes < 2 || num_classes > 10) throw InvalidArgument("synth_dataset: num_classes must be in [2, 10]");
  if (n < num_classes) throw InvalidArgument("synth_dataset: n must be >= num_classes");
  Dataset d{Tensor({n, 3, kSide, kSide}), std::vector<int>(n), num_classes,
            "synthetic-" + std::to_string(num_classes)};
  const std::size_t plane = kSide * kSide;
  for (std::size_t i = 0; i < n; ++i) {
    std::mt19937_64 rng = make_rng(seed, i);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const int label = static_cast<int>(i % num_classes);
    d.labels[i] = label;

    double bg_level = 0.15 + 0.3 * u(rng);
    double fg_level = bg_level + 0.3 + 0.2 * u(rng);
    if (u(rng) < 0.5) std::swap(bg_level, fg_level);
    Rgb bg{}, fg{};
    for (float* ch : {&bg.r, &bg.g, &bg.b}) *ch = static_cast<float>(bg_level + 0.2 * (u(rng) - 0.5));
    for (float* ch : {&fg.r, &fg.g, &fg.b}) *ch = static_cast<float>(fg_level + 0.3 * (u(rng) - 0.5));
    const double cy = 11.0 + 10.0 * u(rng);
    const double cx = 11.0 + 10.0 * u(rng);
    const double scale = 7.0 + 4.0 * u(rng);
    const double period = 6.0 + 4.0 * u(rng);
    const double phase = period * u(rng);
    const double noise = 0.02 + 0.03 * u(rng);
    std::normal_distribution<double> gauss(0.0, 1.0);

    float* px = d.images.data() + i * 3 * plane;
    const Shape shape = static_cast<Shape>(label);
    for (std::size_t y = 0; y < kSide; ++y)
      for (std::size_t x = 0; x < kSide; ++x) {
        const bool on = inside(shape, static_cast<double>(y) + 0.5 - cy, static_cast<double>(x) + 0.5 - cx, scale,
                               period, phase);
        const Rgb& c = on ? fg : bg;
        const float vals[3] = {c.r, c.g, c.b};
        for (std::size_t ch = 0; ch < 3; ++ch) {
          const double v = vals[ch] + noise * gauss(rng);
          px[ch * plane + y * kSide + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
  }
  return d;
}

Tensor normalize(const Tensor& batch, const ChannelNorm& norm) {
  require_rank(batch, 4, "normalize");
  const std::size_t c = batch.dim(1), hw = batch.dim(2) * batch.dim(3);
  if (norm.mean.size() != c || norm.std.size() != c) throw InvalidArgument("normalize: channel count mismatch");
  for (float s : norm.std)
    if (!(s > 0.0f)) throw InvalidArgument("normalize: std must be positive");
  Tensor out(batch.dims());
  for (std::size_t n = 0; n < batch.dim(0); ++n)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (n * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) out[off + j] = (batch[off + j] - norm.mean[ch]) / norm.std[ch];
    }
  return out;
}

Tensor denormalize(const Tensor& batch, const ChannelNorm& norm) {
  require_rank(batch, 4, "denormalize");
  const std::size_t c = batch.dim(1), hw = batch.dim(2) * batch.dim(3);
  if (norm.mean.size() != c || norm.std.size() != c) throw InvalidArgument("denormalize: channel count mismatch");
  Tensor out(batch.dims());
  for (std::size_t n = 0; n < batch.dim(0); ++n)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (n * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) out[off + j] = batch[off + j] * norm.std[ch] + norm.mean[ch];
    }
  return out;
}

Dataset normalize(const Dataset& dataset, const ChannelNorm& norm) {
  return Dataset{normalize(dataset.images, norm), dataset.labels, dataset.num_classes, dataset.name};
}

}  // namespace freqcoda::data
