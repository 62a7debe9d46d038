#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "freqcoda/tensor.hpp"

namespace freqcoda::data {

// images: N x 3 x H x W in [0, 1]; labels in [0, num_classes).
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::string name;

  std::size_t size() const noexcept { return labels.size(); }
  Tensor image(std::size_t i) const;
  Dataset subset(std::span<const std::size_t> indices) const;
  Dataset head(std::size_t n) const;
  // Throws InvalidData if any invariant is broken.
  void validate() const;
};

struct CifarSplits {
  Dataset train;
  Dataset test;
};

// Standard binary layout: data_batch_{1..5}.bin and test_batch.bin, each a
// sequence of 3073-byte records (label byte + 3072 channel-planar pixels).
CifarSplits load_cifar10(const std::filesystem::path& directory);
Dataset load_cifar_batch(const std::filesystem::path& file);
Dataset parse_cifar_records(std::string_view bytes, std::string_view source);

// Procedural 3x32x32 shapes, one shape family per class (disk, square,
// horizontal stripes, checker, ring, cross, triangle, vertical stripes,
// diagonal stripes, diamond). Labels cycle 0..num_classes-1.
Dataset synth_dataset(std::uint64_t seed, std::size_t n, std::size_t num_classes = 4);

enum class CorruptionKind : std::uint8_t {
  identity,
  gaussian_noise,
  shot_noise,
  impulse_noise,
  defocus_blur,
  contrast,
  brightness,
  pixelate,
};

inline constexpr std::array<CorruptionKind, 7> kBenchmarkCorruptions{
    CorruptionKind::gaussian_noise, CorruptionKind::shot_noise, CorruptionKind::impulse_noise,
    CorruptionKind::defocus_blur,   CorruptionKind::contrast,   CorruptionKind::brightness,
    CorruptionKind::pixelate};

std::string_view to_string(CorruptionKind kind);
CorruptionKind parse_corruption(std::string_view name);  // InvalidArgument on unknown names
std::vector<CorruptionKind> parse_corruption_list(std::string_view comma_separated);

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 3;
  std::uint64_t seed = 0;
};

// Kind-specific magnitude for severity 1..5:
//   gaussian_noise  sigma        0.08 0.12 0.18 0.26 0.38
//   shot_noise      photons      60   25   12   5    3
//   impulse_noise   probability  0.03 0.06 0.09 0.17 0.27
//   defocus_blur    disk radius  1.0  1.5  2.0  2.5  3.0
//   contrast        factor       0.4  0.3  0.2  0.1  0.05
//   brightness      V shift      0.1  0.2  0.3  0.4  0.5
//   pixelate        scale        0.6  0.5  0.4  0.3  0.25
double severity_parameter(CorruptionKind kind, int severity);

// Applies a corruption with an explicit magnitude to one C x H x W image.
Tensor apply_corruption(const Tensor& image, CorruptionKind kind, double parameter, std::uint64_t seed);

Tensor corrupt(const Tensor& image, const CorruptionSpec& spec);

// Image i uses seed spec.seed ^ i.
Dataset corrupt_dataset(const Dataset& dataset, const CorruptionSpec& spec);

struct ChannelNorm {
  std::vector<float> mean{0.4914f, 0.4822f, 0.4465f};
  std::vector<float> std{0.2470f, 0.2435f, 0.2616f};
};

// (x - mean) / std per channel of an N x C x H x W batch.
Tensor normalize(const Tensor& batch, const ChannelNorm& norm);
Tensor denormalize(const Tensor& batch, const ChannelNorm& norm);
Dataset normalize(const Dataset& dataset, const ChannelNorm& norm);

}  // namespace freqcoda::data
