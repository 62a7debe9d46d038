#include "freqcoda/analysis.hpp"

#include <algorithm>
#include <cmath>

#include "freqcoda/io.hpp"
#include "freqcoda/parallel.hpp"
#include "freqcoda/rng.hpp"

namespace freqcoda::analysis {

double DistanceMatrix::mean_off_diagonal() const {
  const std::size_t k = size();
  if (k < 2) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j)
      if (i != j) s += at(i, j);
  return s / static_cast<double>(k * (k - 1));
}

double cosine_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidShape("cosine_distance: length mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 && bb == 0.0) return 0.0;
  if (aa == 0.0 || bb == 0.0) return 1.0;
  return std::clamp(1.0 - ab / std::sqrt(aa * bb), 0.0, 2.0);
}

std::string domain_label(const data::CorruptionSpec& spec) {
  if (spec.kind == data::CorruptionKind::identity) return "clean";
  return std::string(data::to_string(spec.kind)) + "-" + std::to_string(spec.severity);
}

namespace {

std::vector<double> band_vector(const spectral::BandSplitter& splitter, const Tensor& image, spectral::Band band) {
  const std::size_t c = image.dim(0), hw = image.dim(1) * image.dim(2);
  std::vector<double> out;
  out.reserve(c * hw);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const std::vector<double> mags = splitter.band_magnitudes(image.span().subspan(ch * hw, hw), band);
    out.insert(out.end(), mags.begin(), mags.end());
  }
  return out;
}

DistanceMatrix empty_matrix(const std::vector<std::string>& labels) {
  return DistanceMatrix{labels, std::vector<double>(labels.size() * labels.size(), 0.0)};
}

}  // namespace

DistanceReport frequency_distance_matrix(const data::Dataset& base, const std::vector<data::CorruptionSpec>& specs,
                                         const DistanceOptions& options) {
  if (specs.empty()) throw InvalidArgument("frequency_distance_matrix: empty corruption list");
  if (options.samples_per_class < 1) throw InvalidArgument("frequency_distance_matrix: samples_per_class must be >= 1");
  if (base.size() == 0) throw InvalidArgument("frequency_distance_matrix: empty dataset");
  require_rank(base.images, 4, "frequency_distance_matrix");

  std::vector<std::string> labels;
  for (const data::CorruptionSpec& s : specs) labels.push_back(domain_label(s));
  const std::size_t k = specs.size();

  // Per class, a seeded choice of up to samples_per_class images.
  std::vector<std::vector<std::size_t>> by_class(base.num_classes);
  for (std::size_t i = 0; i < base.size(); ++i) by_class[static_cast<std::size_t>(base.labels[i])].push_back(i);
  DistanceReport report;
  std::vector<std::size_t> chosen;
  std::vector<std::size_t> chosen_class;
  for (std::size_t c = 0; c < base.num_classes; ++c) {
    std::vector<std::size_t>& idx = by_class[c];
    if (idx.empty()) continue;
    std::mt19937_64 rng = make_rng(options.seed, c);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(idx.size(), options.samples_per_class));
    std::sort(idx.begin(), idx.end());
    report.classes.push_back(static_cast<int>(c));
    for (std::size_t i : idx) {
      chosen.push_back(i);
      chosen_class.push_back(report.classes.size() - 1);
    }
  }

  const spectral::BandSplitter splitter(base.images.dim(2), base.images.dim(3), options.radius);
  std::vector<std::vector<double>> per_image(chosen.size(), std::vector<double>(k * k, 0.0));
  parallel_for(chosen.size(), [&](std::size_t n) {
    const std::size_t img = chosen[n];
    const Tensor image = base.image(img);
    std::vector<std::vector<double>> vecs;
    vecs.reserve(k);
    for (const data::CorruptionSpec& s : specs) {
      data::CorruptionSpec per = s;
      per.seed = s.seed ^ img;
      vecs.push_back(band_vector(splitter, data::corrupt(image, per), options.band));
    }
    std::vector<double>& m = per_image[n];
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = i + 1; j < k; ++j) m[i * k + j] = m[j * k + i] = cosine_distance(vecs[i], vecs[j]);
  });

  report.per_class.assign(report.classes.size(), empty_matrix(labels));
  std::vector<std::size_t> counts(report.classes.size(), 0);
  for (std::size_t n = 0; n < chosen.size(); ++n) {
    std::vector<double>& acc = report.per_class[chosen_class[n]].values;
    for (std::size_t e = 0; e < k * k; ++e) acc[e] += per_image[n][e];
    ++counts[chosen_class[n]];
  }
  report.overall = empty_matrix(labels);
  for (std::size_t c = 0; c < report.per_class.size(); ++c) {
    for (double& v : report.per_class[c].values) v /= static_cast<double>(counts[c]);
    for (std::size_t e = 0; e < k * k; ++e) report.overall.values[e] += report.per_class[c].values[e];
  }
  for (double& v : report.overall.values) v /= static_cast<double>(report.per_class.size());
  return report;
}

SseReport bn_sse(const std::vector<tta::BatchStats>& source, const std::vector<tta::BatchStats>& adapted) {
  if (source.size() != adapted.size())
    throw InvalidArgument("bn_sse: " + std::to_string(source.size()) + " source layers vs " +
                          std::to_string(adapted.size()) + " adapted layers");
  SseReport r;
  for (std::size_t l = 0; l < source.size(); ++l) {
    if (source[l].mean.size() != adapted[l].mean.size())
      throw InvalidArgument("bn_sse: channel mismatch at layer " + std::to_string(l));
    double s = 0.0;
    for (std::size_t c = 0; c < source[l].mean.size(); ++c) {
      const double d = source[l].mean[c] - adapted[l].mean[c];
      s += d * d;
    }
    r.per_layer.push_back(s);
    r.total += s;
  }
  return r;
}

std::vector<tta::BatchStats> source_stats(const ModelGraph& model) {
  std::vector<tta::BatchStats> out;
  for (const BatchNormLayer* bn : model.bn_layers()) {
    tta::BatchStats s;
    s.mean.assign(bn->running_mean.values().begin(), bn->running_mean.values().end());
    s.var.assign(bn->running_var.values().begin(), bn->running_var.values().end());
    out.push_back(std::move(s));
  }
  return out;
}

SseReport mean_run_sse(const std::vector<tta::BatchStats>& source, const tta::AdaptationRun& run) {
  SseReport mean;
  mean.per_layer.assign(source.size(), 0.0);
  std::size_t batches = 0;
  for (const tta::DomainSummary& d : run.domains)
    for (const std::vector<tta::BatchStats>& adapted : d.stats) {
      const SseReport r = bn_sse(source, adapted);
      for (std::size_t l = 0; l < source.size(); ++l) mean.per_layer[l] += r.per_layer[l];
      ++batches;
    }
  if (batches == 0) throw InvalidArgument("mean_run_sse: the run recorded no statistics");
  for (double& v : mean.per_layer) {
    v /= static_cast<double>(batches);
    mean.total += v;
  }
  return mean;
}

void write_matrix_csv(const std::filesystem::path& path, const DistanceMatrix& matrix) {
  std::string text = "domain";
  for (const std::string& l : matrix.labels) text += "," + l;
  text += "\n";
  char cell[48];
  for (std::size_t i = 0; i < matrix.size(); ++i) {
    text += matrix.labels[i];
    for (std::size_t j = 0; j < matrix.size(); ++j) {
      std::snprintf(cell, sizeof cell, ",%.8f", matrix.at(i, j));
      text += cell;
    }
    text += "\n";
  }
  io::write_file_atomic(path, text);
}

}  // namespace freqcoda::analysis
