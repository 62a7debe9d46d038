#include <doctest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <numbers>

#include "freqcoda/analysis.hpp"
#include "freqcoda/io.hpp"
#include "unit/helpers.hpp"

using namespace freqcoda;
using namespace freqcoda::analysis;

namespace {

long signed_index(std::size_t u, std::size_t n) {
  return u < (n + 1) / 2 ? static_cast<long>(u) : static_cast<long>(u) - static_cast<long>(n);
}

// Band-limited magnitude spectrum by direct DFT, every channel concatenated.
std::vector<double> naive_band_vector(const Tensor& image, double radius, bool low) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<double> out;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t u = 0; u < h; ++u)
      for (std::size_t v = 0; v < w; ++v) {
        const double fu = static_cast<double>(signed_index(u, h)), fv = static_cast<double>(signed_index(v, w));
        const bool in_low = fu * fu + fv * fv <= radius * radius;
        if (in_low != low) {
          out.push_back(0.0);
          continue;
        }
        std::complex<double> acc = 0.0;
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            const double ang = -2.0 * std::numbers::pi * (static_cast<double>(u * y) / h + static_cast<double>(v * x) / w);
            acc += static_cast<double>(image[(ch * h + y) * w + x]) * std::polar(1.0, ang);
          }
        out.push_back(std::abs(acc));
      }
  return out;
}

double naive_cosine_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return 1.0 - ab / std::sqrt(aa * bb);
}

data::Dataset small_images(std::size_t per_class, std::size_t side) {
  const data::Dataset big = data::synth_dataset(21, 4 * per_class);
  data::Dataset out = big;
  out.images = Tensor({big.size(), 3, side, side});
  for (std::size_t i = 0; i < big.size(); ++i)
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x)
          out.images[((i * 3 + ch) * side + y) * side + x] = big.images[((i * 3 + ch) * 32 + y * 2) * 32 + x * 2];
  return out;
}

void check_metric_structure(const DistanceMatrix& m) {
  for (std::size_t i = 0; i < m.size(); ++i) {
    CHECK(m.at(i, i) == 0.0);
    for (std::size_t j = 0; j < m.size(); ++j) {
      CHECK(m.at(i, j) == m.at(j, i));
      CHECK(m.at(i, j) >= 0.0);
      CHECK(m.at(i, j) <= 2.0);
    }
  }
}

}  // namespace

TEST_SUITE("analysis") {
  TEST_CASE("cosine distance") {
    const std::vector<double> a{1, 0}, b{0, 1}, c{2, 0}, d{-1, 0}, z{0, 0};
    CHECK(cosine_distance(a, b) == doctest::Approx(1.0));
    CHECK(cosine_distance(a, c) == doctest::Approx(0.0));
    CHECK(cosine_distance(a, d) == doctest::Approx(2.0));
    CHECK(cosine_distance(z, z) == 0.0);
    CHECK(cosine_distance(a, z) == 1.0);
    CHECK_THROWS_AS(cosine_distance(a, std::vector<double>{1.0}), InvalidShape);
  }

  TEST_CASE("distance matrix matches a direct-DFT oracle") {
    const data::Dataset ds = small_images(2, 12);
    const std::vector<data::CorruptionSpec> specs{{data::CorruptionKind::identity, 1, 0},
                                                  {data::CorruptionKind::gaussian_noise, 3, 4},
                                                  {data::CorruptionKind::contrast, 2, 0}};
    for (spectral::Band band : {spectral::Band::low, spectral::Band::high}) {
      const bool low = band == spectral::Band::low;
      DistanceOptions opt;
      opt.radius = 3.0;
      opt.band = band;
      opt.samples_per_class = 2;
      const DistanceReport rep = frequency_distance_matrix(ds, specs, opt);
      REQUIRE(rep.classes.size() == 4);
      std::vector<double> expect(9, 0.0);
      for (int cls = 0; cls < 4; ++cls) {
        std::vector<double> per(9, 0.0);
        std::size_t count = 0;
        for (std::size_t i = 0; i < ds.size(); ++i) {
          if (ds.labels[i] != cls) continue;
          std::vector<std::vector<double>> vecs;
          for (data::CorruptionSpec s : specs) {
            s.seed ^= i;
            vecs.push_back(naive_band_vector(data::corrupt(ds.image(i), s), opt.radius, low));
          }
          for (std::size_t a = 0; a < 3; ++a)
            for (std::size_t b = 0; b < 3; ++b)
              if (a != b) per[a * 3 + b] += naive_cosine_distance(vecs[a], vecs[b]);
          ++count;
        }
        for (std::size_t e = 0; e < 9; ++e) expect[e] += per[e] / static_cast<double>(count) / 4.0;
      }
      for (std::size_t e = 0; e < 9; ++e) CHECK(rep.overall.values[e] == doctest::Approx(expect[e]).epsilon(1e-6));
      check_metric_structure(rep.overall);
      for (const DistanceMatrix& m : rep.per_class) check_metric_structure(m);
    }
  }

  TEST_CASE("duplicate identity entries are at distance zero") {
    const data::Dataset ds = data::synth_dataset(3, 8);
    const std::vector<data::CorruptionSpec> specs{{data::CorruptionKind::identity, 1, 0},
                                                  {data::CorruptionKind::pixelate, 3, 0},
                                                  {data::CorruptionKind::identity, 1, 0}};
    const DistanceReport rep = frequency_distance_matrix(ds, specs, {});
    CHECK(rep.overall.at(0, 2) == 0.0);
    CHECK(rep.overall.at(0, 1) > 0.0);
    CHECK(rep.overall.labels == std::vector<std::string>{"clean", "pixelate-3", "clean"});
  }

  TEST_CASE("distance matrices are deterministic and validate inputs") {
    const data::Dataset ds = data::synth_dataset(4, 40);
    std::vector<data::CorruptionSpec> specs;
    for (data::CorruptionKind k : data::kBenchmarkCorruptions) specs.push_back({k, 3, 9});
    DistanceOptions opt;
    opt.samples_per_class = 3;
    opt.seed = 5;
    const DistanceReport a = frequency_distance_matrix(ds, specs, opt), b = frequency_distance_matrix(ds, specs, opt);
    CHECK(a.overall.values == b.overall.values);
    CHECK_THROWS_AS(frequency_distance_matrix(ds, {}, opt), InvalidArgument);
    opt.samples_per_class = 0;
    CHECK_THROWS_AS(frequency_distance_matrix(ds, specs, opt), InvalidArgument);
  }

  TEST_CASE("low band is more domain-invariant than the high band") {
    const data::Dataset ds = data::synth_dataset(8, 80);
    std::vector<data::CorruptionSpec> specs;
    for (data::CorruptionKind k : data::kBenchmarkCorruptions) specs.push_back({k, 3, 11});
    DistanceOptions opt;
    opt.samples_per_class = 5;
    const double low = frequency_distance_matrix(ds, specs, opt).overall.mean_off_diagonal();
    opt.band = spectral::Band::high;
    const double high = frequency_distance_matrix(ds, specs, opt).overall.mean_off_diagonal();
    CHECK(low < high);
  }

  TEST_CASE("BN statistic SSE") {
    using tta::BatchStats;
    const std::vector<BatchStats> zero{{{0.0, 0.0}, {1.0, 1.0}}}, one{{{1.0, 1.0}, {1.0, 1.0}}};
    CHECK(bn_sse(zero, zero).total == 0.0);
    CHECK(bn_sse(zero, one).total == doctest::Approx(2.0));
    const std::vector<BatchStats> src{{{0.0}, {1.0}}, {{1.0, 2.0, 3.0}, {1.0, 1.0, 1.0}}};
    const std::vector<BatchStats> ad{{{0.5}, {1.0}}, {{1.0, 1.0, 1.0}, {2.0, 2.0, 2.0}}};
    const SseReport r = bn_sse(src, ad);
    CHECK(r.per_layer == std::vector<double>{0.25, 5.0});
    const std::vector<BatchStats> src_rev{src[1], src[0]}, ad_rev{ad[1], ad[0]};
    CHECK(bn_sse(src_rev, ad_rev).total == r.total);
    CHECK_THROWS_AS(bn_sse(src, zero), InvalidArgument);
    CHECK_THROWS_AS(bn_sse(zero, std::vector<BatchStats>{{{0.0}, {1.0}}}), InvalidArgument);

    tta::AdaptationRun run;
    run.domains.resize(2);
    run.domains[0].stats = {ad, src};
    run.domains[1].stats = {ad};
    const SseReport m = mean_run_sse(src, run);
    CHECK(m.total == doctest::Approx(2.0 * r.total / 3.0));
    CHECK_THROWS_AS(mean_run_sse(src, tta::AdaptationRun{}), InvalidArgument);
  }

  TEST_CASE("source statistics follow the BN layer order") {
    ResNetConfig c;
    c.depth_blocks = {1};
    c.base_width = 4;
    ModelGraph m(c);
    m.bn_layers()[1]->running_mean[2] = 7.0f;
    const auto s = source_stats(m);
    REQUIRE(s.size() == m.bn_layers().size());
    CHECK(s[1].mean[2] == 7.0);
  }

  TEST_CASE("matrix CSV layout") {
    const DistanceMatrix m{{"clean", "contrast-3"}, {0.0, 0.25, 0.25, 0.0}};
    const auto path = std::filesystem::temp_directory_path() / "freqcoda_matrix.csv";
    write_matrix_csv(path, m);
    CHECK(io::read_file(path) == "domain,clean,contrast-3\nclean,0.00000000,0.25000000\ncontrast-3,0.25000000,0.00000000\n");
  }
}
