#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "freqcoda/data.hpp"
#include "freqcoda/spectral.hpp"
#include "freqcoda/tta.hpp"

namespace freqcoda::analysis {

struct DistanceMatrix {
  std::vector<std::string> labels;
  std::vector<double> values;  // K x K, row-major

  std::size_t size() const noexcept { return labels.size(); }
  double at(std::size_t i, std::size_t j) const { return values[i * labels.size() + j]; }
  double mean_off_diagonal() const;
};

// 1 - cos(a, b). Two zero vectors are at distance 0, one zero vector at 1.
double cosine_distance(std::span<const double> a, std::span<const double> b);

struct DistanceOptions {
  double radius = 8.0;
  spectral::Band band = spectral::Band::low;
  std::size_t samples_per_class = 8;
  std::uint64_t seed = 0;  // image sampling
};

struct DistanceReport {
  DistanceMatrix overall;                 // mean of the per-class matrices
  std::vector<DistanceMatrix> per_class;  // one per class with sampled images
  std::vector<int> classes;
};

// For each sampled image, every corrupted variant is transformed to a
// magnitude spectrum masked to one band; variants are compared pairwise by
// cosine distance. Matrices are averaged over a class's images, then over
// classes.
DistanceReport frequency_distance_matrix(const data::Dataset& base, const std::vector<data::CorruptionSpec>& specs,
                                         const DistanceOptions& options);

std::string domain_label(const data::CorruptionSpec& spec);

struct SseReport {
  std::vector<double> per_layer;
  double total = 0.0;
};

// Per layer sum over channels of (source mean - adapted mean)^2.
SseReport bn_sse(const std::vector<tta::BatchStats>& source, const std::vector<tta::BatchStats>& adapted);

// Source running stats of every BN layer, in bn_layers() order.
std::vector<tta::BatchStats> source_stats(const ModelGraph& model);

// Mean of the per-batch SSE over every recorded batch of a run.
SseReport mean_run_sse(const std::vector<tta::BatchStats>& source, const tta::AdaptationRun& run);

void write_matrix_csv(const std::filesystem::path& path, const DistanceMatrix& matrix);

}  // namespace freqcoda::analysis
