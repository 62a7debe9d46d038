#include "freqcoda/model.hpp"

#include <cmath>
#include <map>
#include <random>

namespace freqcoda {
namespace {

bool uses_batch_stats(BnMode mode) { return mode == BnMode::train || mode == BnMode::batch_stats; }

Tensor he_normal(Dims dims, std::size_t fan_in, double gain, std::mt19937_64& rng) {
  Tensor t(std::move(dims));
  std::normal_distribution<double> dist(0.0, gain / std::sqrt(static_cast<double>(fan_in)));
  for (float& v : t.values()) v = static_cast<float>(dist(rng));
  return t;
}

ConvLayer make_conv(std::string name, std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                    std::mt19937_64& rng) {
  ConvLayer c;
  c.name = std::move(name);
  c.weight = he_normal({out, in, k, k}, in * k * k, std::sqrt(2.0), rng);
  c.grad = Tensor(c.weight.dims());
  c.geom = nn::ConvGeom{stride, k / 2};
  return c;
}

void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void add_into(Tensor& dst, std::span<const float> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

std::span<const float> as_const(const Tensor& t) { return t.span(); }

Tensor scalar_tensor(float v) { return Tensor({1}, std::vector<float>{v}); }

}  // namespace

BatchNormLayer BatchNormLayer::make(std::string name, std::size_t channels) {
  BatchNormLayer bn;
  bn.name = std::move(name);
  bn.gamma = Tensor({channels}, 1.0f);
  bn.beta = Tensor({channels}, 0.0f);
  bn.running_mean = Tensor({channels}, 0.0f);
  bn.running_var = Tensor({channels}, 1.0f);
  bn.grad_gamma = Tensor({channels});
  bn.grad_beta = Tensor({channels});
  return bn;
}

Tensor batchnorm_forward(const Tensor& input, BatchNormLayer& layer, BnMode mode, nn::NormCache<float>* cache) {
  require_rank(input, 4, "batchnorm_forward");
  if (input.dim(1) != layer.channels())
    throw InvalidShape("batchnorm " + layer.name + ": expected " + std::to_string(layer.channels()) +
                       " channels, got " + dims_string(input.dims()));
  if (mode == BnMode::external) throw InvalidArgument("batchnorm_forward: external mode needs a stats source");
  if (uses_batch_stats(mode)) {
    if (input.dim(0) * input.dim(2) * input.dim(3) < 2)
      throw InvalidArgument("batchnorm " + layer.name + ": batch statistics need N*H*W >= 2");
    const nn::ChannelStats<float> st = nn::channel_stats(input);
    if (mode == BnMode::train) {
      const double m = layer.momentum;
      for (std::size_t c = 0; c < layer.channels(); ++c) {
        layer.running_mean[c] = static_cast<float>((1.0 - m) * layer.running_mean[c] + m * st.mean[c]);
        layer.running_var[c] = static_cast<float>((1.0 - m) * layer.running_var[c] + m * st.var[c]);
      }
    }
    return nn::normalize_affine(input, st.mean, st.var, as_const(layer.gamma), as_const(layer.beta),
                                layer.eps, cache);
  }
  std::vector<double> mean(layer.running_mean.values().begin(), layer.running_mean.values().end());
  std::vector<double> var(layer.running_var.values().begin(), layer.running_var.values().end());
  return nn::normalize_affine(input, mean, var, as_const(layer.gamma), as_const(layer.beta), layer.eps, cache);
}

ModelGraph::ModelGraph(const ResNetConfig& config) : config_(config) {
  if (config.depth_blocks.empty()) throw InvalidArgument("build_resnet: need at least one stage");
  for (std::size_t d : config.depth_blocks)
    if (d < 1) throw InvalidArgument("build_resnet: every stage needs >= 1 block");
  if (config.base_width < 4) throw InvalidArgument("build_resnet: base_width must be >= 4");
  if (config.num_classes < 2) throw InvalidArgument("build_resnet: need >= 2 classes");
  if (config.in_channels < 1) throw InvalidArgument("build_resnet: need >= 1 input channel");

  std::mt19937_64 rng(config.seed);
  stem_ = make_conv("stem", config.in_channels, config.base_width, 3, 1, rng);
  std::size_t in = config.base_width;
  for (std::size_t s = 0; s < config.depth_blocks.size(); ++s) {
    const std::size_t width = config.base_width << s;
    for (std::size_t b = 0; b < config.depth_blocks[s]; ++b) {
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      const std::string prefix = "stage" + std::to_string(s) + ".block" + std::to_string(b);
      Block blk;
      blk.bn1 = BatchNormLayer::make(prefix + ".bn1", in);
      blk.conv1 = make_conv(prefix + ".conv1", in, width, 3, stride, rng);
      blk.bn2 = BatchNormLayer::make(prefix + ".bn2", width);
      blk.conv2 = make_conv(prefix + ".conv2", width, width, 3, 1, rng);
      if (stride != 1 || in != width) blk.shortcut = make_conv(prefix + ".shortcut", in, width, 1, stride, rng);
      blocks_.push_back(std::move(blk));
      in = width;
    }
  }
  final_bn_ = BatchNormLayer::make("final.bn", in);
  head_.name = "head";
  head_.weight = he_normal({config.num_classes, in}, in, 1.0, rng);
  head_.bias = Tensor({config.num_classes});
  head_.grad_weight = Tensor(head_.weight.dims());
  head_.grad_bias = Tensor(head_.bias.dims());
}

ModelGraph build_resnet(const ResNetConfig& config) { return ModelGraph(config); }

void ModelGraph::note(const std::string& layer, const Tensor& out, const ForwardOptions& opt) {
  if (opt.check_finite && first_nonfinite_.empty() && !out.all_finite()) first_nonfinite_ = layer;
}

Tensor ModelGraph::conv_forward(ConvLayer& conv, const Tensor& input, bool keep) {
  if (!conv.quant) {
    if (keep) conv.input = input;
    return nn::conv2d_forward(input, conv.weight, conv.geom);
  }
  ConvQuant& q = *conv.quant;
  if (!q.activation.initialized) {
    q.activation.step = quant::init_step(input, q.activation.bits);
    q.activation.initialized = true;
  }
  q.activation.grad_scale = quant::lsq_grad_scale(input.size() / input.dim(0), q.activation.q_pos);
  Tensor qx = quant::fake_quantize(input, q.activation);
  Tensor qw = quant::fake_quantize(conv.weight, q.weight);
  Tensor out = nn::conv2d_forward(qx, qw, conv.geom);
  if (keep) {
    conv.input = input;
    conv.q_input = std::move(qx);
    conv.q_weight = std::move(qw);
  }
  return out;
}

Tensor ModelGraph::conv_backward(ConvLayer& conv, const Tensor& grad_out, bool param_grads) {
  if (conv.input.empty()) throw InvalidState("backward without cached forward in " + conv.name);
  if (!conv.quant) {
    nn::ConvGrads<float> g = nn::conv2d_backward(conv.input, conv.weight, grad_out, conv.geom, true, param_grads);
    if (param_grads) add_into(conv.grad, g.grad_weight);
    return std::move(g.grad_input);
  }
  ConvQuant& q = *conv.quant;
  nn::ConvGrads<float> g = nn::conv2d_backward(conv.q_input, conv.q_weight, grad_out, conv.geom, true, param_grads);
  if (param_grads) {
    quant::QuantGrads wg = quant::fake_quantize_backward(g.grad_weight, conv.weight, q.weight);
    add_into(conv.grad, wg.grad_x);
    q.grad_weight_step += wg.grad_step;
  }
  quant::QuantGrads ag = quant::fake_quantize_backward(g.grad_input, conv.input, q.activation);
  if (param_grads) q.grad_activation_step += ag.grad_step;
  return std::move(ag.grad_x);
}

Tensor ModelGraph::bn_forward(BatchNormLayer& bn, std::size_t index, const Tensor& input, const ForwardOptions& opt,
                              nn::NormCache<float>& cache) {
  nn::NormCache<float>* c = opt.keep_cache ? &cache : nullptr;
  if (opt.bn_mode != BnMode::external) return batchnorm_forward(input, bn, opt.bn_mode, c);
  if (opt.stats_source == nullptr) throw InvalidArgument("external BN mode without a stats source");
  const nn::ChannelStats<float> st = opt.stats_source->stats_for(index, input);
  return nn::normalize_affine(input, st.mean, st.var, as_const(bn.gamma), as_const(bn.beta), bn.eps, c);
}

Tensor ModelGraph::bn_backward(BatchNormLayer& bn, const Tensor& grad_out, const nn::NormCache<float>& cache,
                               bool param_grads) {
  nn::NormGrads<float> g = uses_batch_stats(last_mode_)
                               ? nn::normalize_backward_batch_stats(grad_out, cache, as_const(bn.gamma))
                               : nn::normalize_backward_const_stats(grad_out, cache, as_const(bn.gamma));
  if (param_grads) {
    add_into(bn.grad_gamma, g.grad_gamma);
    add_into(bn.grad_beta, g.grad_beta);
  }
  return std::move(g.grad_input);
}

Tensor ModelGraph::forward(const Tensor& input, const ForwardOptions& opt) {
  require_rank(input, 4, "model input");
  if (input.dim(1) != config_.in_channels)
    throw InvalidShape("model expects " + std::to_string(config_.in_channels) + " input channels, got " +
                       dims_string(input.dims()));
  first_nonfinite_.clear();
  last_mode_ = opt.bn_mode;
  const bool keep = opt.keep_cache;
  Tensor x = conv_forward(stem_, input, keep);
  note(stem_.name, x, opt);
  std::size_t bn_index = 0;
  for (Block& b : blocks_) {
    Tensor act1 = nn::relu_forward(bn_forward(b.bn1, bn_index++, x, opt, b.bn1_cache));
    note(b.bn1.name, act1, opt);
    Tensor hidden = conv_forward(b.conv1, act1, keep);
    note(b.conv1.name, hidden, opt);
    Tensor act2 = nn::relu_forward(bn_forward(b.bn2, bn_index++, hidden, opt, b.bn2_cache));
    note(b.bn2.name, act2, opt);
    Tensor out = conv_forward(b.conv2, act2, keep);
    note(b.conv2.name, out, opt);
    Tensor skip = b.shortcut ? conv_forward(*b.shortcut, act1, keep) : x;
    if (b.shortcut) note(b.shortcut->name, skip, opt);
    out = nn::add(out, skip);
    if (keep) {
      b.input = std::move(x);
      b.act1 = std::move(act1);
      b.hidden = std::move(hidden);
      b.act2 = std::move(act2);
    }
    x = std::move(out);
  }
  Tensor act = nn::relu_forward(bn_forward(final_bn_, bn_index, x, opt, final_cache_));
  note(final_bn_.name, act, opt);
  Tensor pooled = nn::global_avg_pool_forward(act);
  Tensor logits = nn::linear_forward(pooled, head_.weight, head_.bias);
  note(head_.name, logits, opt);
  if (keep) {
    final_input_ = std::move(x);
    final_act_ = std::move(act);
    head_.input = std::move(pooled);
  }
  return logits;
}

Tensor ModelGraph::backward(const Tensor& grad_logits, bool param_grads) {
  if (final_act_.empty()) throw InvalidState("backward called without a cached forward pass");
  nn::LinearGrads<float> hg = nn::linear_backward(head_.input, head_.weight, grad_logits);
  if (param_grads) {
    add_into(head_.grad_weight, hg.grad_weight);
    add_into(head_.grad_bias, hg.grad_bias);
  }
  Tensor g = nn::global_avg_pool_backward(hg.grad_input, final_act_.dims());
  g = bn_backward(final_bn_, nn::relu_backward(g, final_act_), final_cache_, param_grads);
  for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) {
    Block& b = *it;
    Tensor g_act2 = conv_backward(b.conv2, g, param_grads);
    Tensor g_hidden = bn_backward(b.bn2, nn::relu_backward(g_act2, b.act2), b.bn2_cache, param_grads);
    Tensor g_act1 = conv_backward(b.conv1, g_hidden, param_grads);
    if (b.shortcut) add_into(g_act1, conv_backward(*b.shortcut, g, param_grads));
    Tensor g_in = bn_backward(b.bn1, nn::relu_backward(g_act1, b.act1), b.bn1_cache, param_grads);
    if (!b.shortcut) add_into(g_in, g);
    g = std::move(g_in);
  }
  return conv_backward(stem_, g, param_grads);
}

void ModelGraph::zero_grad() {
  for (ParamRef& p : parameters()) std::fill(p.grad.begin(), p.grad.end(), 0.0f);
}

void ModelGraph::clear_cache() {
  for (ConvLayer* c : conv_layers()) c->input = c->q_input = c->q_weight = Tensor();
  for (Block& b : blocks_) {
    b.input = b.act1 = b.hidden = b.act2 = Tensor();
    b.bn1_cache = b.bn2_cache = {};
  }
  final_input_ = final_act_ = pooled_ = head_.input = Tensor();
  final_cache_ = {};
}

std::vector<ConvLayer*> ModelGraph::conv_layers() {
  std::vector<ConvLayer*> out{&stem_};
  for (Block& b : blocks_) {
    out.push_back(&b.conv1);
    out.push_back(&b.conv2);
    if (b.shortcut) out.push_back(&*b.shortcut);
  }
  return out;
}

std::vector<const ConvLayer*> ModelGraph::conv_layers() const {
  std::vector<const ConvLayer*> out;
  for (ConvLayer* c : const_cast<ModelGraph*>(this)->conv_layers()) out.push_back(c);
  return out;
}

std::vector<BatchNormLayer*> ModelGraph::bn_layers() {
  std::vector<BatchNormLayer*> out;
  for (Block& b : blocks_) {
    out.push_back(&b.bn1);
    out.push_back(&b.bn2);
  }
  out.push_back(&final_bn_);
  return out;
}

std::vector<const BatchNormLayer*> ModelGraph::bn_layers() const {
  std::vector<const BatchNormLayer*> out;
  for (BatchNormLayer* b : const_cast<ModelGraph*>(this)->bn_layers()) out.push_back(b);
  return out;
}

std::vector<ParamRef> ModelGraph::parameters() {
  std::vector<ParamRef> out;
  for (ConvLayer* c : conv_layers()) {
    out.push_back({c->name + ".weight", c->weight.span(), c->grad.span(), ParamGroup::conv_weight});
    if (c->quant) {
      ConvQuant& q = *c->quant;
      out.push_back({c->name + ".wstep", std::span<float>(&q.weight.step, 1),
                     std::span<float>(&q.grad_weight_step, 1), ParamGroup::quant_step});
      out.push_back({c->name + ".astep", std::span<float>(&q.activation.step, 1),
                     std::span<float>(&q.grad_activation_step, 1), ParamGroup::quant_step});
    }
  }
  for (BatchNormLayer* bn : bn_layers()) {
    out.push_back({bn->name + ".gamma", bn->gamma.span(), bn->grad_gamma.span(), ParamGroup::bn_gamma});
    out.push_back({bn->name + ".beta", bn->beta.span(), bn->grad_beta.span(), ParamGroup::bn_beta});
  }
  out.push_back({head_.name + ".weight", head_.weight.span(), head_.grad_weight.span(), ParamGroup::linear_weight});
  out.push_back({head_.name + ".bias", head_.bias.span(), head_.grad_bias.span(), ParamGroup::linear_bias});
  return out;
}

std::vector<NamedTensor> ModelGraph::export_state() const {
  std::vector<NamedTensor> out;
  for (const ConvLayer* c : conv_layers()) {
    out.push_back({c->name + ".weight", c->weight});
    if (c->quant) {
      out.push_back({c->name + ".wstep", scalar_tensor(c->quant->weight.step)});
      const quant::QuantizerState& a = c->quant->activation;
      // negative marks an activation step not yet calibrated
      out.push_back({c->name + ".astep", scalar_tensor(a.initialized ? a.step : -1.0f)});
    }
  }
  for (const BatchNormLayer* bn : bn_layers()) {
    out.push_back({bn->name + ".gamma", bn->gamma});
    out.push_back({bn->name + ".beta", bn->beta});
    out.push_back({bn->name + ".running_mean", bn->running_mean});
    out.push_back({bn->name + ".running_var", bn->running_var});
  }
  out.push_back({head_.name + ".weight", head_.weight});
  out.push_back({head_.name + ".bias", head_.bias});
  return out;
}

void ModelGraph::import_state(const std::vector<NamedTensor>& state) {
  std::map<std::string, const Tensor*> by_name;
  for (const NamedTensor& t : state) by_name[t.name] = &t.value;
  auto take = [&](const std::string& name, Tensor& dst) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing tensor " + name);
    if (it->second->dims() != dst.dims())
      throw FormatError("checkpoint tensor " + name + " has dims " + dims_string(it->second->dims()) +
                        ", model expects " + dims_string(dst.dims()));
    dst = *it->second;
  };
  auto take_scalar = [&](const std::string& name) {
    Tensor t({1});
    take(name, t);
    return t[0];
  };
  for (ConvLayer* c : conv_layers()) {
    take(c->name + ".weight", c->weight);
    if (c->quant) {
      c->quant->weight.step = take_scalar(c->name + ".wstep");
      const float a = take_scalar(c->name + ".astep");
      c->quant->activation.initialized = a > 0.0f;
      if (a > 0.0f) c->quant->activation.step = a;
    }
  }
  for (BatchNormLayer* bn : bn_layers()) {
    take(bn->name + ".gamma", bn->gamma);
    take(bn->name + ".beta", bn->beta);
    take(bn->name + ".running_mean", bn->running_mean);
    take(bn->name + ".running_var", bn->running_var);
  }
  take(head_.name + ".weight", head_.weight);
  take(head_.name + ".bias", head_.bias);
}

}  // namespace freqcoda
