#include "freqcoda/tta.hpp"

#include <cmath>

#include "freqcoda/io.hpp"
#include "freqcoda/parallel.hpp"
#include "freqcoda/spectral.hpp"

namespace freqcoda::tta {
namespace {

void require_features(const Tensor& f, const char* what) {
  require_rank(f, 4, what);
  if (f.dim(0) == 0) throw InvalidArgument(std::string(what) + ": empty batch");
  if (f.dim(2) == 0 || f.dim(3) == 0) throw InvalidShape(std::string(what) + ": empty feature map");
}

void mean_var(const std::vector<double>& v, double& mean, double& var) {
  double s = 0.0;
  for (double x : v) s += x;
  mean = s / static_cast<double>(v.size());
  double q = 0.0;
  for (double x : v) q += (x - mean) * (x - mean);
  var = q / static_cast<double>(v.size());
}

nn::ChannelStats<float> as_channel_stats(const BatchStats& s) { return {s.mean, s.var}; }

struct FabnUpdate {
  BatchStats combined;
  BatchStats low_ema;
};

FabnUpdate fabn_update(const Tensor& features, FabnState& state, std::size_t layer_index, bool commit) {
  require_features(features, "fabn");
  if (layer_index >= state.layers.size())
    throw InvalidArgument("fabn: layer index " + std::to_string(layer_index) + " out of range");
  FabnLayerState& layer = state.layers[layer_index];
  if (features.dim(1) != layer.lfc.channels())
    throw InvalidShape("fabn: layer " + std::to_string(layer_index) + " expects " +
                       std::to_string(layer.lfc.channels()) + " channels, got " + dims_string(features.dims()));
  const BandStats bands = band_batch_stats(features, state.radius_for(features.dim(2), features.dim(3)));
  FabnUpdate out;
  out.low_ema = layer.lfc;
  ema_update(out.low_ema, bands.low, state.alpha);
  out.combined = combine(out.low_ema, bands.high);
  if (commit) {
    layer.lfc = out.low_ema;
    ++layer.t;
  }
  return out;
}

const ModelGraph& as_const_model(ModelGraph& m) { return m; }

}  // namespace

BandStats band_batch_stats(const Tensor& features, double radius) {
  require_features(features, "band_batch_stats");
  const std::size_t n = features.dim(0), c = features.dim(1), h = features.dim(2), w = features.dim(3);
  const std::size_t hw = h * w;
  const spectral::BandSplitter splitter(h, w, radius);
  BandStats out;
  out.low.mean.assign(c, 0.0);
  out.low.var.assign(c, 0.0);
  out.high.mean.assign(c, 0.0);
  out.high.var.assign(c, 0.0);
  parallel_for(c, [&](std::size_t ch) {
    std::vector<double> low(n * hw), high(n * hw), plane(hw);
    for (std::size_t i = 0; i < n; ++i) {
      const float* src = features.data() + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) plane[j] = src[j];
      splitter.split(plane, std::span<double>(low.data() + i * hw, hw), std::span<double>(high.data() + i * hw, hw));
    }
    mean_var(low, out.low.mean[ch], out.low.var[ch]);
    mean_var(high, out.high.mean[ch], out.high.var[ch]);
  });
  return out;
}

BatchStats combine(const BatchStats& low, const BatchStats& high) {
  if (low.channels() != high.channels() || low.var.size() != low.channels() || high.var.size() != high.channels())
    throw InvalidShape("combine: channel count mismatch");
  BatchStats out{low.mean, low.var};
  for (std::size_t c = 0; c < out.channels(); ++c) {
    out.mean[c] += high.mean[c];
    out.var[c] += high.var[c];
  }
  return out;
}

void ema_update(BatchStats& running, const BatchStats& batch, double alpha) {
  if (running.channels() != batch.channels()) throw InvalidShape("ema_update: channel count mismatch");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidArgument("ema_update: alpha must lie in [0, 1]");
  for (std::size_t c = 0; c < running.channels(); ++c) {
    running.mean[c] = (1.0 - alpha) * running.mean[c] + alpha * batch.mean[c];
    running.var[c] = (1.0 - alpha) * running.var[c] + alpha * batch.var[c];
  }
}

FabnState FabnState::from_layer(const BatchNormLayer& layer, double alpha, double radius_fraction,
                                std::optional<double> absolute_radius) {
  FabnState s;
  s.alpha = alpha;
  s.radius_fraction = radius_fraction;
  s.absolute_radius = absolute_radius;
  FabnLayerState l;
  l.lfc.mean.assign(layer.running_mean.values().begin(), layer.running_mean.values().end());
  l.lfc.var.assign(layer.running_var.values().begin(), layer.running_var.values().end());
  s.layers.push_back(std::move(l));
  s.validate();
  return s;
}

FabnState FabnState::from_model(const ModelGraph& model, double alpha, double radius_fraction,
                                std::optional<double> absolute_radius) {
  FabnState s;
  s.alpha = alpha;
  s.radius_fraction = radius_fraction;
  s.absolute_radius = absolute_radius;
  for (const BatchNormLayer* bn : model.bn_layers()) {
    FabnLayerState l;
    l.lfc.mean.assign(bn->running_mean.values().begin(), bn->running_mean.values().end());
    l.lfc.var.assign(bn->running_var.values().begin(), bn->running_var.values().end());
    s.layers.push_back(std::move(l));
  }
  s.validate();
  return s;
}

void FabnState::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidArgument("fabn: alpha must lie in [0, 1]");
  if (!(radius_fraction > 0.0 && radius_fraction <= 1.0))
    throw InvalidArgument("fabn: radius fraction must lie in (0, 1]");
  if (absolute_radius && !(*absolute_radius >= 0.0)) throw InvalidArgument("fabn: absolute radius must be >= 0");
}

double FabnState::radius_for(std::size_t height, std::size_t width) const {
  if (absolute_radius) return *absolute_radius;
  return spectral::scaled_radius(radius_fraction, std::min(height, width));
}

BatchStats fabn_stats(const Tensor& features, FabnState& state, std::size_t layer_index, bool commit) {
  return fabn_update(features, state, layer_index, commit).combined;
}

Tensor fabn_forward(const Tensor& features, const BatchNormLayer& layer, FabnState& state, std::size_t layer_index) {
  if (features.rank() == 4 && features.dim(1) != layer.channels())
    throw InvalidShape("fabn_forward: channel mismatch with " + layer.name);
  const BatchStats s = fabn_stats(features, state, layer_index, true);
  return nn::normalize_affine<float>(features, s.mean, s.var, std::span<const float>(layer.gamma.span()),
                              std::span<const float>(layer.beta.span()), layer.eps, nullptr);
}

Tensor norm_adapt_forward(const Tensor& features, const BatchNormLayer& layer) {
  require_features(features, "norm_adapt_forward");
  BatchNormLayer copy = layer;
  return batchnorm_forward(features, copy, BnMode::batch_stats);
}

nn::ChannelStats<float> FabnStatsProvider::stats_for(std::size_t bn_index, const Tensor& input) {
  FabnUpdate u = fabn_update(input, state_, bn_index, commit_);
  if (low_band_.size() <= bn_index) low_band_.resize(bn_index + 1);
  low_band_[bn_index] = std::move(u.low_ema);
  return as_channel_stats(u.combined);
}

nn::ChannelStats<float> BatchStatsProvider::stats_for(std::size_t bn_index, const Tensor& input) {
  require_features(input, "norm");
  if (input.dim(0) * input.dim(2) * input.dim(3) < 2)
    throw InvalidArgument("norm: batch statistics need N*H*W >= 2");
  nn::ChannelStats<float> st = nn::channel_stats(input);
  if (recorded_.size() <= bn_index) recorded_.resize(bn_index + 1);
  recorded_[bn_index] = BatchStats{st.mean, st.var};
  return st;
}

std::string_view to_string(Method method) {
  switch (method) {
    case Method::none: return "none";
    case Method::norm: return "norm";
    case Method::tent: return "tent";
    case Method::sar: return "sar";
    case Method::fabn: return "fabn";
    case Method::fabn_tent: return "fabn+tent";
    case Method::fabn_sar: return "fabn+sar";
  }
  return "none";
}

Method parse_method(std::string_view name) {
  for (Method m : {Method::none, Method::norm, Method::tent, Method::sar, Method::fabn, Method::fabn_tent,
                   Method::fabn_sar})
    if (to_string(m) == name) return m;
  throw InvalidArgument("unknown adaptation method: " + std::string(name));
}

bool uses_fabn(Method m) { return m == Method::fabn || m == Method::fabn_tent || m == Method::fabn_sar; }
bool uses_entropy_update(Method m) {
  return m == Method::tent || m == Method::sar || m == Method::fabn_tent || m == Method::fabn_sar;
}
bool uses_sar(Method m) { return m == Method::sar || m == Method::fabn_sar; }

std::string_view to_string(ResetPolicy policy) {
  return policy == ResetPolicy::per_domain ? "per-domain" : "continual";
}

ResetPolicy parse_reset_policy(std::string_view name) {
  if (name == "per-domain") return ResetPolicy::per_domain;
  if (name == "continual") return ResetPolicy::continual;
  throw InvalidArgument("unknown reset policy: " + std::string(name));
}

double default_entropy_threshold(std::size_t num_classes) {
  if (num_classes < 2) throw InvalidArgument("entropy threshold needs >= 2 classes");
  return 0.4 * std::log(static_cast<double>(num_classes));
}

void TtaConfig::validate() const {
  if (batch_size < 1) throw InvalidArgument("tta: batch_size must be >= 1");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidArgument("tta: alpha must lie in [0, 1]");
  if (!(radius_fraction > 0.0 && radius_fraction <= 1.0)) throw InvalidArgument("tta: radius fraction must lie in (0, 1]");
  if (absolute_radius && !(*absolute_radius >= 0.0)) throw InvalidArgument("tta: absolute radius must be >= 0");
  if (!(tent_lr >= 0.0) || !(sar_lr >= 0.0)) throw InvalidArgument("tta: learning rates must be >= 0");
  if (!(sar_rho >= 0.0)) throw InvalidArgument("tta: rho must be >= 0");
  if (sar_e0 && !(*sar_e0 > 0.0)) throw InvalidArgument("tta: e0 must be > 0");
}

Adapter::Adapter(ModelGraph& m, const TtaConfig& c)
    : model(&m), config(c), fabn(FabnState::from_model(m, c.alpha, c.radius_fraction, c.absolute_radius)) {
  config.validate();
}

std::vector<ParamRef> affine_parameters(ModelGraph& model) {
  std::vector<ParamRef> out;
  for (ParamRef& p : model.parameters())
    if (is_bn_affine(p.group)) out.push_back(p);
  check_trainable(out);
  return out;
}

void check_trainable(std::span<const ParamRef> params) {
  for (const ParamRef& p : params)
    if (!is_bn_affine(p.group)) throw InvalidState("adaptation would update non-affine parameter " + p.name);
}

namespace {

void require_input(const Adapter& a, const Tensor& input) {
  require_rank(input, 4, "adapt");
  if (input.dim(0) == 0) throw InvalidArgument("adapt: empty batch");
  if (input.dim(1) != a.model->config().in_channels)
    throw InvalidArgument("adapt: batch has " + std::to_string(input.dim(1)) + " channels, model expects " +
                          std::to_string(a.model->config().in_channels));
}

struct PassOutput {
  Tensor logits;
  std::vector<BatchStats> stats;
};

// One forward with the method's normalization scheme. `fabn_state` is the
// state the FABN layers read and advance.
PassOutput adaptive_pass(Adapter& a, const Tensor& input, FabnState& fabn_state, bool keep_cache) {
  const Method m = a.config.method;
  ForwardOptions opt;
  opt.keep_cache = keep_cache;
  PassOutput out;
  if (uses_fabn(m)) {
    FabnStatsProvider provider(fabn_state, true);
    opt.bn_mode = BnMode::external;
    opt.stats_source = &provider;
    out.logits = a.model->forward(input, opt);
    if (a.config.record_stats) out.stats = provider.low_band();
  } else if (m == Method::none) {
    opt.bn_mode = BnMode::eval;
    out.logits = a.model->forward(input, opt);
  } else if (m == Method::norm && !keep_cache) {
    BatchStatsProvider provider;
    opt.bn_mode = BnMode::external;
    opt.stats_source = &provider;
    out.logits = a.model->forward(input, opt);
    if (a.config.record_stats) out.stats = provider.recorded();
  } else {
    opt.bn_mode = BnMode::batch_stats;
    out.logits = a.model->forward(input, opt);
  }
  return out;
}

StepResult finish(PassOutput&& pass) {
  StepResult r;
  r.predictions = nn::argmax_rows(pass.logits);
  r.entropies = nn::prediction_entropies(pass.logits);
  r.logits = std::move(pass.logits);
  r.stats = std::move(pass.stats);
  return r;
}

std::vector<std::uint8_t> keep_below(const std::vector<double>& entropies, std::optional<double> threshold,
                                     std::size_t& kept) {
  std::vector<std::uint8_t> keep(entropies.size(), 1);
  kept = entropies.size();
  if (!threshold) return keep;
  for (std::size_t i = 0; i < entropies.size(); ++i)
    if (!(entropies[i] < *threshold)) {
      keep[i] = 0;
      --kept;
    }
  return keep;
}

void backprop_entropy(ModelGraph& model, const Tensor& logits, std::span<const std::uint8_t> keep) {
  const nn::LossAndGrad<float> loss = nn::entropy_loss(logits, keep);
  model.backward(loss.grad);
}

}  // namespace

StepResult adapt_forward(Adapter& a, const Tensor& input) {
  require_input(a, input);
  return finish(adaptive_pass(a, input, a.fabn, false));
}

StepResult tent_step(Adapter& a, const Tensor& input, std::optional<double> threshold) {
  require_input(a, input);
  ModelGraph& model = *a.model;
  model.zero_grad();
  StepResult r = finish(adaptive_pass(a, input, a.fabn, true));
  std::size_t kept = 0;
  const std::vector<std::uint8_t> keep = keep_below(r.entropies, threshold, kept);
  r.filtered = r.entropies.size() - kept;
  if (kept > 0) {
    backprop_entropy(model, r.logits, keep);
    const std::vector<ParamRef> params = affine_parameters(model);
    train::optimizer_step(params, a.opt, a.config.tent_hyper, a.config.tent_lr);
  }
  model.clear_cache();
  return r;
}

StepResult sar_step(Adapter& a, const Tensor& input, double e0, double rho) {
  if (!(e0 > 0.0)) throw InvalidArgument("sar: e0 must be > 0");
  if (!(rho >= 0.0)) throw InvalidArgument("sar: rho must be >= 0");
  require_input(a, input);
  ModelGraph& model = *a.model;
  const FabnState before = a.fabn;

  model.zero_grad();
  StepResult r = finish(adaptive_pass(a, input, a.fabn, true));
  std::size_t kept = 0;
  std::vector<std::uint8_t> keep = keep_below(r.entropies, e0, kept);
  r.filtered = r.entropies.size() - kept;
  if (kept == 0) {
    model.clear_cache();
    return r;
  }
  backprop_entropy(model, r.logits, keep);

  // Ascend to the worst point within radius rho.
  const std::vector<ParamRef> params = affine_parameters(model);
  double norm_sq = 0.0;
  for (const ParamRef& p : params)
    for (float g : p.grad) norm_sq += static_cast<double>(g) * g;
  const double scale = rho / (std::sqrt(norm_sq) + 1e-12);
  std::vector<std::vector<float>> saved;
  saved.reserve(params.size());
  for (const ParamRef& p : params) {
    saved.emplace_back(p.value.begin(), p.value.end());
    for (std::size_t j = 0; j < p.value.size(); ++j)
      p.value[j] = static_cast<float>(p.value[j] + scale * p.grad[j]);
  }

  // Gradient at the perturbed point; FABN stats replayed from the pre-batch state.
  model.zero_grad();
  FabnState replay = before;
  PassOutput second = adaptive_pass(a, input, replay, true);
  const std::vector<double> ent2 = nn::prediction_entropies(second.logits);
  std::size_t kept2 = 0;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    keep[i] = keep[i] && ent2[i] < e0 ? 1 : 0;
    kept2 += keep[i];
  }
  if (kept2 > 0) backprop_entropy(model, second.logits, keep);
  for (std::size_t i = 0; i < params.size(); ++i) std::copy(saved[i].begin(), saved[i].end(), params[i].value.begin());
  if (kept2 > 0) train::optimizer_step(params, a.opt, a.config.sar_hyper, a.config.sar_lr);
  model.clear_cache();
  return r;
}

StepResult adapt_batch(Adapter& a, const Tensor& input) {
  const Method m = a.config.method;
  if (uses_sar(m)) {
    const double e0 = a.config.sar_e0 ? *a.config.sar_e0 : default_entropy_threshold(a.model->config().num_classes);
    return sar_step(a, input, e0, a.config.sar_rho);
  }
  if (uses_entropy_update(m)) return tent_step(a, input);
  return adapt_forward(a, input);
}

AdaptationRun run_adaptation(ModelGraph& model, const std::vector<Domain>& stream, const TtaConfig& config,
                             const train::InputPipeline& pipeline) {
  config.validate();
  for (const Domain& d : stream) {
    if (d.data.size() == 0) continue;
    require_rank(d.data.images, 4, "run_adaptation");
    if (d.data.images.dim(1) != model.config().in_channels)
      throw InvalidArgument("run_adaptation: domain " + d.name + " has " + std::to_string(d.data.images.dim(1)) +
                            " channels, model expects " + std::to_string(model.config().in_channels));
    if (d.data.num_classes != model.config().num_classes)
      throw InvalidArgument("run_adaptation: domain " + d.name + " class count differs from the model");
  }
  const ModelGraph source = as_const_model(model);
  Adapter adapter(model, config);
  AdaptationRun run;
  run.method = config.method;
  run.reset = config.reset;
  std::size_t total_hits = 0, total_seen = 0;
  for (std::size_t di = 0; di < stream.size(); ++di) {
    const Domain& d = stream[di];
    if (di > 0 && config.reset == ResetPolicy::per_domain) {
      model = source;
      adapter = Adapter(model, config);
    }
    DomainSummary summary;
    summary.name = d.name;
    std::size_t hits = 0, seen = 0;
    for (std::size_t first = 0, b = 0; first < d.data.size(); first += config.batch_size, ++b) {
      if (config.max_batches != 0 && b >= config.max_batches) break;
      const std::size_t count = std::min(config.batch_size, d.data.size() - first);
      const Tensor input = pipeline.prepare(slice_batch(d.data.images, first, count));
      StepResult r = adapt_batch(adapter, input);
      std::size_t batch_hits = 0;
      double ent = 0.0;
      for (std::size_t i = 0; i < count; ++i) {
        batch_hits += r.predictions[i] == d.data.labels[first + i] ? 1 : 0;
        summary.predictions.push_back(r.predictions[i]);
        ent += r.entropies[i];
      }
      hits += batch_hits;
      seen += count;
      BatchRecord rec;
      rec.domain = d.name;
      rec.batch_idx = b;
      rec.online_acc = static_cast<double>(batch_hits) / static_cast<double>(count);
      rec.cum_acc = static_cast<double>(hits) / static_cast<double>(seen);
      rec.mean_entropy = ent / static_cast<double>(count);
      rec.filtered = r.filtered;
      rec.size = count;
      run.batches.push_back(rec);
      if (config.record_stats) summary.stats.push_back(std::move(r.stats));
    }
    summary.samples = seen;
    summary.accuracy = seen ? static_cast<double>(hits) / static_cast<double>(seen) : 0.0;
    total_hits += hits;
    total_seen += seen;
    run.domains.push_back(std::move(summary));
  }
  run.accuracy = total_seen ? static_cast<double>(total_hits) / static_cast<double>(total_seen) : 0.0;
  model = source;
  return run;
}

void write_adaptation_csv(const std::filesystem::path& path, const AdaptationRun& run) {
  std::string text = "domain,batch_idx,method,online_acc,cum_acc,mean_entropy,filtered\n";
  char line[160];
  for (const BatchRecord& r : run.batches) {
    std::snprintf(line, sizeof line, ",%zu,%s,%.6f,%.6f,%.6f,%zu\n", r.batch_idx,
                  std::string(to_string(run.method)).c_str(), r.online_acc, r.cum_acc, r.mean_entropy, r.filtered);
    text += r.domain;
    text += line;
  }
  io::write_file_atomic(path, text);
}

}  // namespace freqcoda::tta
