// End-to-end acceptance run: one PASS/FAIL line per criterion.
//
// Scale of the training-based criteria (8-14) is controlled by environment
// variables: FREQCODA_ACCEPT_TRAIN, FREQCODA_ACCEPT_TEST, FREQCODA_ACCEPT_EPOCHS,
// FREQCODA_ACCEPT_WIDTH, FREQCODA_ACCEPT_SEEDS. FREQCODA_CIFAR_DIR switches
// from synthetic data to CIFAR-10 binaries. FREQCODA_ACCEPT_ONLY=a,b,... runs
// a subset of criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "freqcoda/analysis.hpp"
#include "freqcoda/data.hpp"
#include "freqcoda/errors.hpp"
#include "freqcoda/layers.hpp"
#include "freqcoda/model.hpp"
#include "freqcoda/quant.hpp"
#include "freqcoda/spectral.hpp"
#include "freqcoda/train.hpp"
#include "freqcoda/tta.hpp"

using namespace freqcoda;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* pattern, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, pattern, args...);
  return buf;
}

std::size_t env_size(const char* name, std::size_t fallback) {
  const char* v = std::getenv(name);
  return v && *v ? static_cast<std::size_t>(std::stoull(v)) : fallback;
}

std::mt19937_64 rng_for(std::uint64_t seed) { return std::mt19937_64(seed * 0x9E3779B97F4A7C15ULL + 17); }

Tensor uniform_tensor(Dims dims, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  Tensor t(std::move(dims));
  std::uniform_real_distribution<double> u(lo, hi);
  for (float& v : t.values()) v = static_cast<float>(u(rng));
  return t;
}

TensorD uniform_tensor_d(Dims dims, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  TensorD t(std::move(dims));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.values()) v = u(rng);
  return t;
}

// Per-channel mean and biased variance over (N, H, W), accumulated in double.
tta::BatchStats direct_stats(const Tensor& f) {
  const std::size_t n = f.dim(0), c = f.dim(1), hw = f.dim(2) * f.dim(3);
  tta::BatchStats s{std::vector<double>(c), std::vector<double>(c)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < hw; ++p) sum += f[(i * c + ch) * hw + p];
    const double cnt = static_cast<double>(n * hw);
    const double mean = sum / cnt;
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < hw; ++p) {
        const double d = f[(i * c + ch) * hw + p] - mean;
        sq += d * d;
      }
    s.mean[ch] = mean;
    s.var[ch] = sq / cnt;
  }
  return s;
}

// Feature batch with channel-specific offsets and scales.
Tensor feature_batch(std::mt19937_64& rng, std::size_t n, std::size_t c, std::size_t side) {
  Tensor t({n, c, side, side});
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::vector<double> offset(c), scale(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    offset[ch] = u(rng);
    scale[ch] = 0.2 + std::abs(u(rng));
  }
  const std::size_t hw = side * side;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p)
        t[(i * c + ch) * hw + p] = static_cast<float>(offset[ch] + scale[ch] * g(rng));
  return t;
}

BatchNormLayer source_layer(std::size_t c, std::mt19937_64& rng) {
  BatchNormLayer bn = BatchNormLayer::make("bn", c);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < c; ++i) {
    bn.running_mean[i] = static_cast<float>(u(rng) - 0.5);
    bn.running_var[i] = static_cast<float>(0.5 + u(rng));
  }
  return bn;
}

ModelGraph small_model(std::uint64_t seed, int bits) {
  ResNetConfig c;
  c.depth_blocks = {1, 1};
  c.base_width = 8;
  c.num_classes = 4;
  c.seed = seed;
  ModelGraph m(c);
  if (bits) quant::wrap_quantized(m, bits);
  const data::Dataset ds = data::synth_dataset(seed, 64);
  const train::InputPipeline pipe;
  for (int i = 0; i < 3; ++i) m.forward(pipe.prepare(ds.images), {BnMode::train});
  return m;
}

Tensor shifted_batch(std::uint64_t seed, std::size_t n) {
  const data::Dataset ds =
      data::corrupt_dataset(data::synth_dataset(seed, n), {data::CorruptionKind::contrast, 4, seed});
  return train::InputPipeline{}.prepare(ds.images);
}

// ---------------------------------------------------------------- 1
Verdict decomposition_identity() {
  auto rng = rng_for(1);
  const std::size_t side = 32;
  const double full = spectral::full_radius(side, side);
  const std::vector<double> radii{0, 1, 2, 4, 8, 16, full};
  std::vector<spectral::BandSplitter> splitters;
  for (double r : radii) splitters.emplace_back(side, side, r);

  double worst_sum = 0.0, worst_overlap = 0.0;
  const std::size_t plane = side * side;
  std::vector<double> pd(plane), lo(plane), hi(plane);
  for (int img = 0; img < 1000; ++img) {
    const Tensor x = uniform_tensor({3, side, side}, rng);
    for (std::size_t k = 0; k < radii.size(); ++k) {
      const spectral::Decomposition d = spectral::decompose(x, radii[k]);
      for (std::size_t i = 0; i < x.size(); ++i)
        worst_sum = std::max<double>(worst_sum, std::abs(x[i] - (d.lfc[i] + d.hfc[i])));
      // Band supports in double: every bin's product relative to the
      // squared spectral peak.
      for (std::size_t ch = 0; ch < 3; ++ch) {
        for (std::size_t p = 0; p < plane; ++p) pd[p] = x[ch * plane + p];
        splitters[k].split(pd, lo, hi);
        const spectral::Spectrum sl = spectral::dft2(std::span<const double>(lo), side, side);
        const spectral::Spectrum sh = spectral::dft2(std::span<const double>(hi), side, side);
        const spectral::Spectrum sx = spectral::dft2(std::span<const double>(pd), side, side);
        double peak = 0.0;
        for (const auto& b : sx.bins) peak = std::max(peak, std::abs(b));
        for (std::size_t p = 0; p < plane; ++p)
          worst_overlap = std::max(worst_overlap, std::abs(sl.bins[p] * sh.bins[p]) / (peak * peak));
      }
    }
  }
  const bool pass = worst_sum <= 1e-5 && worst_overlap <= 1e-12;
  return {pass, fmt("max|x-(lfc+hfc)|=%.3g (<=1e-5), max|LFC*HFC|/peak^2=%.3g (<=1e-12)", worst_sum, worst_overlap)};
}

// ---------------------------------------------------------------- 2
Verdict stats_additivity() {
  auto rng = rng_for(2);
  std::uniform_int_distribution<int> pick(0, 2);
  double worst_mean = 0.0, worst_var = 0.0;
  for (int b = 0; b < 100; ++b) {
    const std::size_t side = std::array<std::size_t, 3>{8, 16, 32}[static_cast<std::size_t>(pick(rng))];
    const std::size_t c = 2 + static_cast<std::size_t>(pick(rng)) * 3;
    const std::size_t n = 4 + static_cast<std::size_t>(pick(rng)) * 6;
    const Tensor f = feature_batch(rng, n, c, side);
    const BatchNormLayer bn = source_layer(c, rng);
    tta::FabnState st = tta::FabnState::from_layer(bn, 1.0, 0.25);
    const tta::BatchStats got = tta::fabn_stats(f, st, 0, true);
    const tta::BatchStats want = direct_stats(f);
    for (std::size_t ch = 0; ch < c; ++ch) {
      worst_mean = std::max(worst_mean, std::abs(got.mean[ch] - want.mean[ch]));
      worst_var = std::max(worst_var, std::abs(got.var[ch] - want.var[ch]) / want.var[ch]);
    }
  }

  ModelGraph m1 = small_model(21, 0), m2 = small_model(21, 0);
  const Tensor x = shifted_batch(22, 32);
  tta::TtaConfig cfg;
  cfg.method = tta::Method::fabn;
  cfg.alpha = 1.0;
  tta::Adapter fabn(m1, cfg);
  cfg.method = tta::Method::norm;
  tta::Adapter norm(m2, cfg);
  const tta::StepResult rf = tta::adapt_forward(fabn, x);
  const tta::StepResult rn = tta::adapt_forward(norm, x);
  double logit_dev = 0.0;
  for (std::size_t i = 0; i < rf.logits.size(); ++i)
    logit_dev = std::max<double>(logit_dev, std::abs(rf.logits[i] - rn.logits[i]));
  const bool same_pred = rf.predictions == rn.predictions;

  const bool pass = worst_mean <= 1e-4 && worst_var <= 1e-3 && logit_dev <= 1e-4 && same_pred;
  return {pass, fmt("mean abs err %.3g (<=1e-4), var rel err %.3g (<=1e-3), FABN(a=1) vs NORM logit dev %.3g "
                    "(<=1e-4), predictions %s",
                    worst_mean, worst_var, logit_dev, same_pred ? "equal" : "differ")};
}

// ---------------------------------------------------------------- 3
double rel_norm_err(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale == 0.0 ? std::sqrt(diff) : std::sqrt(diff) / scale;
}

// Central differences of a scalar function over every entry of `x`.
std::vector<double> numeric_grad(std::vector<double>& x, const std::function<double()>& f, double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f();
    x[i] = keep - h;
    const double down = f();
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

double weighted_sum(const TensorD& t, const TensorD& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) s += t[i] * w[i];
  return s;
}

Verdict gradient_checks() {
  auto rng = rng_for(3);
  std::map<std::string, double> errs;

  for (std::size_t stride : {1, 2}) {
    TensorD x = uniform_tensor_d({2, 3, 7, 7}, rng);
    TensorD w = uniform_tensor_d({4, 3, 3, 3}, rng);
    const nn::ConvGeom geom{stride, 1};
    const TensorD probe = uniform_tensor_d(nn::conv2d_forward(x, w, geom).dims(), rng);
    const nn::ConvGrads<double> g = nn::conv2d_backward(x, w, probe, geom);
    auto f = [&] { return weighted_sum(nn::conv2d_forward(x, w, geom), probe); };
    const std::string key = "conv/s" + std::to_string(stride);
    errs[key + ".input"] = rel_norm_err(g.grad_input.values(), numeric_grad(x.values(), f));
    errs[key + ".weight"] = rel_norm_err(g.grad_weight.values(), numeric_grad(w.values(), f));
  }

  {
    TensorD x = uniform_tensor_d({3, 5}, rng), w = uniform_tensor_d({4, 5}, rng), b = uniform_tensor_d({4}, rng);
    const TensorD probe = uniform_tensor_d({3, 4}, rng);
    const nn::LinearGrads<double> g = nn::linear_backward(x, w, probe);
    auto f = [&] { return weighted_sum(nn::linear_forward(x, w, b), probe); };
    errs["linear.input"] = rel_norm_err(g.grad_input.values(), numeric_grad(x.values(), f));
    errs["linear.weight"] = rel_norm_err(g.grad_weight.values(), numeric_grad(w.values(), f));
    errs["linear.bias"] = rel_norm_err(g.grad_bias.values(), numeric_grad(b.values(), f));
  }

  {
    TensorD x = uniform_tensor_d({4, 3, 5, 5}, rng);
    std::vector<double> gamma{1.3, 0.7, -0.4}, beta{0.1, -0.2, 0.3};
    const TensorD probe = uniform_tensor_d(x.dims(), rng);
    auto run = [&](nn::NormCache<double>* cache) {
      const nn::ChannelStats<double> s = nn::channel_stats(x);
      return nn::normalize_affine<double>(x, s.mean, s.var, gamma, beta, 1e-5, cache);
    };
    nn::NormCache<double> cache;
    run(&cache);
    const nn::NormGrads<double> g = nn::normalize_backward_batch_stats<double>(probe, cache, gamma);
    auto f = [&] { return weighted_sum(run(nullptr), probe); };
    errs["batchnorm.input"] = rel_norm_err(g.grad_input.values(), numeric_grad(x.values(), f));
    errs["batchnorm.gamma"] = rel_norm_err(g.grad_gamma, numeric_grad(gamma, f));
    errs["batchnorm.beta"] = rel_norm_err(g.grad_beta, numeric_grad(beta, f));
  }

  {
    TensorD logits = uniform_tensor_d({5, 7}, rng, -3.0, 3.0);
    const std::vector<int> labels{0, 6, 3, 3, 1};
    const nn::LossAndGrad<double> lg = nn::cross_entropy_loss(logits, labels);
    auto f = [&] { return nn::cross_entropy_loss(logits, labels).loss; };
    errs["softmax_ce.logits"] = rel_norm_err(lg.grad.values(), numeric_grad(logits.values(), f));
  }

  bool pass = std::all_of(errs.begin(), errs.end(), [](const auto& e) { return e.second <= 1e-6; });

  // Step gradient against differences of the rounding-frozen forward, at
  // points away from rounding and clipping boundaries.
  double lsq_worst = 0.0;
  std::mt19937_64 qrng = rng_for(31);
  for (int bits : {2, 4, 8}) {
    quant::QuantizerState q = quant::QuantizerState::make(quant::QuantKind::weight, bits);
    q.step = bits == 2 ? 0.3f : bits == 4 ? 0.07f : 0.004f;
    const std::size_t count = 400;
    Tensor x = uniform_tensor({count}, qrng, -1.0, 1.0);
    for (float& v : x.values()) {
      const double t = v / q.step;
      const double frac = t - std::floor(t);
      const bool at_clip = std::abs(t - q.q_neg) < 0.02 || std::abs(t - q.q_pos) < 0.02;
      if (std::abs(frac - 0.5) < 0.02 || at_clip) v += 0.05f * q.step;
    }
    const Tensor g = uniform_tensor({count}, qrng, -1.0, 1.0);
    q.grad_scale = quant::lsq_grad_scale(count, q.q_pos);
    auto frozen = [&](double s) {
      double total = 0.0;
      for (std::size_t i = 0; i < count; ++i) {
        const double v0 = static_cast<double>(x[i]) / q.step;
        const double v = static_cast<double>(x[i]) / s;
        double level;
        if (v0 < q.q_neg) level = q.q_neg;
        else if (v0 > q.q_pos) level = q.q_pos;
        else level = v + (std::nearbyint(v0) - v0);
        total += g[i] * level * s;
      }
      return total;
    };
    const double h = 1e-4 * q.step;
    const double numeric = (frozen(q.step + h) - frozen(q.step - h)) / (2.0 * h) * q.grad_scale;
    const double analytic = quant::fake_quantize_backward(g, x, q).grad_step;
    const double err = std::abs(analytic - numeric) / std::max(std::abs(numeric), 1e-12);
    lsq_worst = std::max(lsq_worst, err);
  }
  pass = pass && lsq_worst <= 1e-3;

  std::string worst_name;
  double worst = -1.0;
  for (const auto& [k, v] : errs)
    if (v > worst) worst = v, worst_name = k;
  return {pass, fmt("worst f64 rel err %.3g at %s (<=1e-6), LSQ step rel err %.3g (<=1e-3)", worst,
                    worst_name.c_str(), lsq_worst)};
}

// ---------------------------------------------------------------- 4
Verdict ema_limits() {
  auto rng = rng_for(4);
  const std::size_t c = 6, side = 16;
  const BatchNormLayer bn = source_layer(c, rng);

  tta::FabnState frozen = tta::FabnState::from_layer(bn, 0.0, 0.25);
  const tta::BatchStats seed = frozen.layers[0].lfc;
  bool frozen_ok = true;
  for (int b = 0; b < 50; ++b) {
    tta::fabn_stats(feature_batch(rng, 8, c, side), frozen, 0, true);
    frozen_ok = frozen_ok && frozen.layers[0].lfc.mean == seed.mean && frozen.layers[0].lfc.var == seed.var;
  }

  tta::FabnState tracking = tta::FabnState::from_layer(bn, 1.0, 0.25);
  bool tracking_ok = true;
  for (int b = 0; b < 50; ++b) {
    const Tensor f = feature_batch(rng, 8, c, side);
    const tta::BandStats bands = tta::band_batch_stats(f, tracking.radius_for(side, side));
    tta::fabn_stats(f, tracking, 0, true);
    tracking_ok = tracking_ok && tracking.layers[0].lfc.mean == bands.low.mean &&
                  tracking.layers[0].lfc.var == bands.low.var;
  }

  double worst = 0.0;
  for (double alpha : {0.1, 0.3, 0.7}) {
    tta::FabnState st = tta::FabnState::from_layer(bn, alpha, 0.25);
    const Tensor f = feature_batch(rng, 8, c, side);
    const tta::BandStats target = tta::band_batch_stats(f, st.radius_for(side, side));
    auto gaps = [&] {
      std::vector<double> d;
      for (std::size_t ch = 0; ch < c; ++ch) {
        d.push_back(st.layers[0].lfc.mean[ch] - target.low.mean[ch]);
        d.push_back(st.layers[0].lfc.var[ch] - target.low.var[ch]);
      }
      return d;
    };
    for (int t = 0; t < 30; ++t) {
      const std::vector<double> before = gaps();
      tta::fabn_stats(f, st, 0, true);
      const std::vector<double> after = gaps();
      for (std::size_t i = 0; i < before.size(); ++i)
        if (std::abs(before[i]) >= 1e-6) worst = std::max(worst, std::abs(after[i] / before[i] - (1.0 - alpha)));
    }
  }
  const bool pass = frozen_ok && tracking_ok && worst <= 1e-6;
  return {pass, fmt("alpha=0 bitwise over 50 batches: %s, alpha=1 exact tracking: %s, contraction factor err %.3g "
                    "(<=1e-6)",
                    frozen_ok ? "yes" : "no", tracking_ok ? "yes" : "no", worst)};
}

// ---------------------------------------------------------------- 5
std::vector<NamedTensor> state_of(const ModelGraph& m) { return m.export_state(); }

bool affine_name(const std::string& name) { return name.ends_with(".gamma") || name.ends_with(".beta"); }

Verdict adaptation_footprint() {
  std::vector<std::string> broken, still;
  for (tta::Method method : {tta::Method::tent, tta::Method::sar, tta::Method::fabn_tent, tta::Method::fabn_sar}) {
    ModelGraph m = small_model(51, 2);
    const auto before = state_of(m);
    tta::TtaConfig cfg;
    cfg.method = method;
    // Large enough for SAR updates to register on every step.
    cfg.sar_lr = 0.01;
    cfg.sar_e0 = 1.2;
    tta::Adapter a(m, cfg);
    for (std::uint64_t step = 0; step < 20; ++step) tta::adapt_batch(a, shifted_batch(500 + step, 32));
    const auto after = state_of(m);
    bool any_affine_change = false;
    for (std::size_t i = 0; i < before.size(); ++i) {
      const bool same = before[i].value == after[i].value;
      if (affine_name(before[i].name)) any_affine_change = any_affine_change || !same;
      else if (!same) broken.push_back(std::string(tta::to_string(method)) + ":" + before[i].name);
    }
    if (!any_affine_change) still.push_back(std::string(tta::to_string(method)));
  }

  double worst = 0.0;
  std::size_t kept = 0, seen = 0;
  for (bool fabn : {false, true}) {
    ModelGraph m1 = small_model(52, 2), m2 = small_model(52, 2);
    tta::TtaConfig cfg;
    cfg.method = fabn ? tta::Method::fabn_sar : tta::Method::sar;
    cfg.sar_hyper = cfg.tent_hyper;
    cfg.sar_lr = cfg.tent_lr;
    tta::Adapter sar(m1, cfg);
    cfg.method = fabn ? tta::Method::fabn_tent : tta::Method::tent;
    tta::Adapter tent(m2, cfg);
    const auto p0 = state_of(m1);
    const double e0 = 1.2;
    for (std::uint64_t step = 0; step < 5; ++step) {
      const Tensor x = shifted_batch(600 + step, 32);
      const tta::StepResult rs = tta::sar_step(sar, x, e0, 0.0);
      const tta::StepResult rt = tta::tent_step(tent, x, e0);
      if (rs.filtered != rt.filtered) worst = std::numeric_limits<double>::infinity();
      kept += x.dim(0) - rs.filtered;
      seen += x.dim(0);
    }
    const auto s1 = state_of(m1), s2 = state_of(m2);
    for (std::size_t i = 0; i < p0.size(); ++i)
      for (std::size_t j = 0; j < p0[i].value.size(); ++j) {
        const double d1 = static_cast<double>(s1[i].value[j]) - p0[i].value[j];
        const double d2 = static_cast<double>(s2[i].value[j]) - p0[i].value[j];
        worst = std::max(worst, std::abs(d1 - d2));
      }
  }
  const bool pass = broken.empty() && still.empty() && kept > 0 && worst <= 1e-6;
  std::string detail = fmt("non-affine tensors changed: %zu, SAR(rho=0) vs filtered TENT delta dev %.3g (<=1e-6) "
                           "with %zu of %zu samples kept",
                           broken.size(), worst, kept, seen);
  if (!broken.empty()) detail += ", first=" + broken.front();
  for (const std::string& m : still) detail += ", affine unchanged under " + m;
  return {pass, detail};
}

// ---------------------------------------------------------------- 6
std::size_t distinct_values(const Tensor& t) { return std::set<float>(t.values().begin(), t.values().end()).size(); }

Verdict quantizer_grid() {
  std::size_t violations = 0, checked = 0;
  float min_step = std::numeric_limits<float>::infinity();
  auto rng = rng_for(6);
  for (int bits : {2, 4, 8}) {
    ResNetConfig cfg;
    cfg.depth_blocks = {1, 1};
    cfg.base_width = 4;
    cfg.num_classes = 3;
    cfg.seed = static_cast<std::uint64_t>(bits);
    ModelGraph m(cfg);
    quant::wrap_quantized(m, bits);
    const std::size_t levels = std::size_t{1} << bits;
    auto count_grid = [&] {
      for (ConvLayer* conv : m.conv_layers()) {
        if (!conv->quant) continue;
        ++checked;
        if (distinct_values(quant::fake_quantize(conv->weight, conv->quant->weight)) > levels) ++violations;
      }
    };
    count_grid();
    train::OptimizerState opt;
    const train::OptimizerHyper hyper{train::OptimizerRule::sgd_momentum, 0.9, 5e-4};
    std::uniform_int_distribution<int> label(0, 2);
    for (int step = 0; step < 1000; ++step) {
      const Tensor x = uniform_tensor({4, 3, 12, 12}, rng, -1.0, 1.0);
      std::vector<int> y(4);
      for (int& v : y) v = label(rng);
      m.zero_grad();
      const Tensor logits = m.forward(x, {BnMode::train, nullptr, true, false});
      m.backward(nn::cross_entropy_loss(logits, y).grad);
      train::optimizer_step(m.parameters(), opt, hyper, 0.05);
    }
    for (ConvLayer* conv : m.conv_layers())
      if (conv->quant) min_step = std::min({min_step, conv->quant->weight.step, conv->quant->activation.step});
    count_grid();
  }
  const bool pass = violations == 0 && min_step > 0.0f;
  return {pass, fmt("%zu of %zu quantized weight tensors exceed 2^bits values; min step after 1000 updates %.3g (>0)",
                    violations, checked, static_cast<double>(min_step))};
}

// ---------------------------------------------------------------- 7
std::vector<data::CorruptionSpec> seven_corruptions(std::uint64_t seed) {
  std::vector<data::CorruptionSpec> specs;
  for (data::CorruptionKind k : data::kBenchmarkCorruptions) specs.push_back({k, 3, seed});
  return specs;
}

Verdict distance_structure() {
  const data::Dataset base = data::synth_dataset(71, 40, 10);
  std::vector<data::CorruptionSpec> specs{{data::CorruptionKind::identity, 1, 0}};
  for (const auto& s : seven_corruptions(7)) specs.push_back(s);
  bool pass = true;
  std::size_t matrices = 0;
  for (spectral::Band band : {spectral::Band::low, spectral::Band::high}) {
    analysis::DistanceOptions opt;
    opt.band = band;
    opt.samples_per_class = 2;
    opt.seed = 3;
    const analysis::DistanceReport a = analysis::frequency_distance_matrix(base, specs, opt);
    const analysis::DistanceReport b = analysis::frequency_distance_matrix(base, specs, opt);
    pass = pass && a.overall.values == b.overall.values && a.overall.labels == b.overall.labels;
    std::vector<const analysis::DistanceMatrix*> all{&a.overall};
    for (const auto& m : a.per_class) all.push_back(&m);
    for (const analysis::DistanceMatrix* m : all) {
      ++matrices;
      for (std::size_t i = 0; i < m->size(); ++i) {
        pass = pass && m->at(i, i) == 0.0;
        for (std::size_t j = 0; j < m->size(); ++j) pass = pass && m->at(i, j) == m->at(j, i);
      }
    }
  }
  return {pass, fmt("%zu matrices (8 domains, both bands): exact symmetry, zero diagonal, identical reruns", matrices)};
}

// ---------------------------------------------------------------- 8-14
struct Scale {
  std::size_t train_n, test_n, epochs, width, seeds;
  std::string cifar;
};

Scale read_scale() {
  Scale s{env_size("FREQCODA_ACCEPT_TRAIN", 3000), env_size("FREQCODA_ACCEPT_TEST", 1000),
          env_size("FREQCODA_ACCEPT_EPOCHS", 15), env_size("FREQCODA_ACCEPT_WIDTH", 16),
          env_size("FREQCODA_ACCEPT_SEEDS", 3), ""};
  if (const char* dir = std::getenv("FREQCODA_CIFAR_DIR")) s.cifar = dir;
  return s;
}

struct SeedData {
  data::Dataset train, val, test;
};

SeedData seed_data(const Scale& s, std::uint64_t seed, const std::optional<data::CifarSplits>& cifar) {
  if (cifar) {
    std::vector<std::size_t> idx(cifar->train.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 r = rng_for(seed);
    std::shuffle(idx.begin(), idx.end(), r);
    const std::size_t val_n = std::min<std::size_t>(500, s.test_n);
    std::vector<std::size_t> tr(idx.begin(), idx.begin() + static_cast<long>(s.train_n));
    std::vector<std::size_t> va(idx.begin() + static_cast<long>(s.train_n),
                                idx.begin() + static_cast<long>(s.train_n + val_n));
    return {cifar->train.subset(tr), cifar->train.subset(va), cifar->test.head(s.test_n)};
  }
  return {data::synth_dataset(1000 + seed, s.train_n, 10), data::synth_dataset(2000 + seed, 500, 10),
          data::synth_dataset(3000 + seed, s.test_n, 10)};
}

struct SeedResult {
  double lfc_clean = 0, ffc_clean = 0, hfc_clean = 0;
  double lfc_noisy = 0, ffc_noisy = 0;
  double tta_none = 0, tta_norm = 0, tta_fabn = 0, tta_fabn_tent = 0;
  double fabn_prefiltered = 0;
  double norm_b8 = 0, fabn_b8 = 0;
  double dist_low = 0, dist_high = 0;
  double sse_lfc_fabn = 0, sse_ffc_norm = 0;
};

const std::vector<data::CorruptionKind> kStream{data::CorruptionKind::gaussian_noise,
                                                data::CorruptionKind::impulse_noise,
                                                data::CorruptionKind::defocus_blur, data::CorruptionKind::contrast};

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

SeedResult run_seed(const Scale& s, std::uint64_t seed, const std::optional<data::CifarSplits>& cifar) {
  const auto t0 = std::chrono::steady_clock::now();
  const SeedData d = seed_data(s, seed, cifar);
  SeedResult r;

  auto trained = [&](train::FilterMode mode) {
    train::TrainConfig c;
    c.filter_mode = mode;
    c.radius = 8.0;
    c.bits = 2;
    c.epochs = s.epochs;
    c.batch_size = 64;
    c.lr = 0.05;
    c.seed = seed;
    c.model.depth_blocks = {1, 1, 1};
    c.model.base_width = s.width;
    ModelGraph m = train::train_qat(c, d.train, d.val).model;
    std::fprintf(stderr, "  seed %llu: trained %s model (%.0f s)\n", static_cast<unsigned long long>(seed),
                 std::string(train::to_string(mode)).c_str(), elapsed(t0));
    return m;
  };
  ModelGraph lfc = trained(train::FilterMode::low);
  ModelGraph ffc = trained(train::FilterMode::none);
  ModelGraph hfc = trained(train::FilterMode::high);

  const train::InputPipeline full{train::FilterMode::none, 8.0, {}};
  const data::Dataset noisy = data::corrupt_dataset(d.test, {data::CorruptionKind::gaussian_noise, 3, seed});
  r.lfc_clean = train::evaluate(lfc, d.test, 256, full).accuracy;
  r.ffc_clean = train::evaluate(ffc, d.test, 256, full).accuracy;
  r.hfc_clean = train::evaluate(hfc, d.test, 256, full).accuracy;
  r.lfc_noisy = train::evaluate(lfc, noisy, 256, full).accuracy;
  r.ffc_noisy = train::evaluate(ffc, noisy, 256, full).accuracy;

  std::vector<tta::Domain> stream;
  for (data::CorruptionKind k : kStream)
    stream.push_back({std::string(data::to_string(k)), data::corrupt_dataset(d.test, {k, 3, seed * 31 + 7})});

  auto adapt = [&](ModelGraph& m, tta::Method method, std::size_t batch, const train::InputPipeline& pipe,
                   bool record) {
    tta::TtaConfig cfg;
    cfg.method = method;
    cfg.batch_size = batch;
    cfg.record_stats = record;
    tta::AdaptationRun run = tta::run_adaptation(m, stream, cfg, pipe);
    std::string per_domain;
    for (const auto& dom : run.domains) per_domain += fmt(" %s=%.3f", dom.name.c_str(), dom.accuracy);
    std::fprintf(stderr, "    %s b%zu%s:%s\n", std::string(tta::to_string(method)).c_str(), batch,
                 pipe.filter == train::FilterMode::none ? "" : " prefiltered", per_domain.c_str());
    return run;
  };
  r.tta_none = adapt(lfc, tta::Method::none, 64, full, false).accuracy;
  r.tta_norm = adapt(lfc, tta::Method::norm, 64, full, false).accuracy;
  const tta::AdaptationRun fabn_run = adapt(lfc, tta::Method::fabn, 64, full, true);
  r.tta_fabn = fabn_run.accuracy;
  r.tta_fabn_tent = adapt(lfc, tta::Method::fabn_tent, 64, full, false).accuracy;
  const train::InputPipeline prefiltered{train::FilterMode::low, 4.0, {}};
  r.fabn_prefiltered = adapt(lfc, tta::Method::fabn, 64, prefiltered, false).accuracy;
  r.norm_b8 = adapt(lfc, tta::Method::norm, 8, full, false).accuracy;
  r.fabn_b8 = adapt(lfc, tta::Method::fabn, 8, full, false).accuracy;

  const tta::AdaptationRun ffc_norm = adapt(ffc, tta::Method::norm, 64, full, true);
  r.sse_lfc_fabn = analysis::mean_run_sse(analysis::source_stats(lfc), fabn_run).total;
  r.sse_ffc_norm = analysis::mean_run_sse(analysis::source_stats(ffc), ffc_norm).total;

  analysis::DistanceOptions opt;
  opt.radius = 8.0;
  opt.samples_per_class = 8;
  opt.seed = seed;
  const auto specs = seven_corruptions(seed);
  opt.band = spectral::Band::low;
  r.dist_low = analysis::frequency_distance_matrix(d.test, specs, opt).overall.mean_off_diagonal();
  opt.band = spectral::Band::high;
  r.dist_high = analysis::frequency_distance_matrix(d.test, specs, opt).overall.mean_off_diagonal();

  std::fprintf(stderr,
               "  seed %llu (%.0f s): clean lfc %.4f ffc %.4f hfc %.4f | gauss3 lfc %.4f ffc %.4f | stream none %.4f "
               "norm %.4f fabn %.4f fabn+tent %.4f prefiltered %.4f | b8 norm %.4f fabn %.4f | dist low %.4f high "
               "%.4f | sse lfc/fabn %.4g ffc/norm %.4g\n",
               static_cast<unsigned long long>(seed), elapsed(t0), r.lfc_clean, r.ffc_clean, r.hfc_clean,
               r.lfc_noisy, r.ffc_noisy, r.tta_none, r.tta_norm, r.tta_fabn, r.tta_fabn_tent, r.fabn_prefiltered,
               r.norm_b8, r.fabn_b8, r.dist_low, r.dist_high, r.sse_lfc_fabn, r.sse_ffc_norm);
  return r;
}

double mean_of(const std::vector<SeedResult>& rs, double SeedResult::*field) {
  double s = 0.0;
  for (const auto& r : rs) s += r.*field;
  return s / static_cast<double>(rs.size());
}

bool all_of(const std::vector<SeedResult>& rs, const std::function<bool(const SeedResult&)>& pred) {
  return std::all_of(rs.begin(), rs.end(), pred);
}

std::map<int, Verdict> trend_verdicts(const std::vector<SeedResult>& rs) {
  std::map<int, Verdict> v;
  const double lc = mean_of(rs, &SeedResult::lfc_clean), fc = mean_of(rs, &SeedResult::ffc_clean);
  const double hc = mean_of(rs, &SeedResult::hfc_clean);
  const double ln = mean_of(rs, &SeedResult::lfc_noisy), fn = mean_of(rs, &SeedResult::ffc_noisy);
  v[8] = {ln - fn >= 0.02 && std::abs(lc - fc) <= 0.05,
          fmt("gaussian-3 acc LFC %.4f vs FFC %.4f (gap %+.4f, need >=+0.02); clean LFC %.4f vs FFC %.4f (|gap| "
              "%.4f, need <=0.05)",
              ln, fn, ln - fn, lc, fc, std::abs(lc - fc))};
  v[9] = {hc <= 0.5 * lc, fmt("clean acc HFC %.4f vs 0.5 x LFC %.4f", hc, 0.5 * lc)};

  const double none = mean_of(rs, &SeedResult::tta_none), norm = mean_of(rs, &SeedResult::tta_norm);
  const double fabn = mean_of(rs, &SeedResult::tta_fabn), tent = mean_of(rs, &SeedResult::tta_fabn_tent);
  v[10] = {fabn >= norm + 0.01 && norm >= none + 0.03 && tent >= fabn - 0.005,
           fmt("stream acc none %.4f, NORM %.4f, FABN %.4f, FABN+TENT %.4f (need FABN>=NORM+0.01, NORM>=none+0.03, "
               "FABN+TENT>=FABN-0.005)",
               none, norm, fabn, tent)};

  const double pre = mean_of(rs, &SeedResult::fabn_prefiltered);
  v[11] = {pre <= fabn - 0.05, fmt("FABN on LFC(r=4) inputs %.4f vs unfiltered %.4f (need <= -0.05)", pre, fabn)};

  const double norm_drop = norm - mean_of(rs, &SeedResult::norm_b8);
  const double fabn_drop = fabn - mean_of(rs, &SeedResult::fabn_b8);
  v[12] = {fabn_drop < norm_drop, fmt("batch 64->8 drop FABN %+.4f vs NORM %+.4f", fabn_drop, norm_drop)};

  std::string dist;
  for (const auto& r : rs) dist += fmt(" %.4f<%.4f", r.dist_low, r.dist_high);
  v[13] = {all_of(rs, [](const SeedResult& r) { return r.dist_low < r.dist_high; }),
           "mean off-diagonal distance low<high per seed:" + dist};

  std::string sse;
  for (const auto& r : rs) sse += fmt(" %.4g<%.4g", r.sse_lfc_fabn, r.sse_ffc_norm);
  v[14] = {all_of(rs, [](const SeedResult& r) { return r.sse_lfc_fabn < r.sse_ffc_norm; }),
           "BN SSE LFC/FABN < FFC/NORM per seed:" + sse};
  return v;
}

}  // namespace

int main() {
  std::set<int> only;
  if (const char* sel = std::getenv("FREQCODA_ACCEPT_ONLY")) {
    std::stringstream ss(sel);
    for (std::string tok; std::getline(ss, tok, ',');)
      if (!tok.empty()) only.insert(std::stoi(tok));
  }
  auto wanted = [&](int id) { return only.empty() || only.contains(id); };

  int failures = 0;
  auto report = [&](int id, const char* name, const Verdict& v, double seconds) {
    if (!v.pass) ++failures;
    std::printf("%s criterion %d: %s (%.1f s) -- %s\n", v.pass ? "PASS" : "FAIL", id, name, seconds,
                v.detail.c_str());
    std::fflush(stdout);
  };
  auto guarded = [&](int id, const char* name, const std::function<Verdict()>& fn) {
    if (!wanted(id)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    report(id, name, v, elapsed(t0));
  };

  guarded(1, "decomposition identity and band disjointness", decomposition_identity);
  guarded(2, "band statistics additivity", stats_additivity);
  guarded(3, "gradient checks", gradient_checks);
  guarded(4, "EMA limits", ema_limits);
  guarded(5, "adaptation footprint", adaptation_footprint);
  guarded(6, "quantizer grid", quantizer_grid);
  guarded(7, "distance-matrix structure", distance_structure);

  const std::vector<std::pair<int, const char*>> trends{
      {8, "low-band QAT robustness"},     {9, "high-band collapse"},        {10, "adaptation ordering"},
      {11, "full-frequency adaptation"}, {12, "batch-size robustness"},    {13, "low-band domain invariance"},
      {14, "BN mean shift"}};
  if (std::none_of(trends.begin(), trends.end(), [&](const auto& t) { return wanted(t.first); }))
    return failures == 0 ? 0 : 1;

  const auto t0 = std::chrono::steady_clock::now();
  const Scale scale = read_scale();
  std::map<int, Verdict> verdicts;
  try {
    std::optional<data::CifarSplits> cifar;
    if (!scale.cifar.empty()) cifar = data::load_cifar10(scale.cifar);
    std::fprintf(stderr, "trend runs: %s, train %zu, test %zu, epochs %zu, width %zu, seeds %zu\n",
                 cifar ? "CIFAR-10" : "synthetic 10-class", scale.train_n, scale.test_n, scale.epochs, scale.width,
                 scale.seeds);
    std::vector<SeedResult> results;
    for (std::uint64_t seed = 1; seed <= scale.seeds; ++seed) results.push_back(run_seed(scale, seed, cifar));
    verdicts = trend_verdicts(results);
  } catch (const std::exception& e) {
    for (const auto& [id, name] : trends) verdicts[id] = {false, std::string("exception: ") + e.what()};
  }
  const double seconds = elapsed(t0);
  for (const auto& [id, name] : trends)
    if (wanted(id)) report(id, name, verdicts[id], seconds);
  return failures == 0 ? 0 : 1;
}
