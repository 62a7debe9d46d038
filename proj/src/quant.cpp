#include "freqcoda/quant.hpp"

#include <cmath>
#include <string>

#include "freqcoda/kernels.hpp"
#include "freqcoda/model.hpp"

namespace freqcoda::quant {

QuantizerState QuantizerState::make(QuantKind kind, int bits) {
  if (bits != 2 && bits != 4 && bits != 8)
    throw InvalidArgument("quantizer bits must be 2, 4 or 8, got " + std::to_string(bits));
  QuantizerState q;
  q.kind = kind;
  q.bits = bits;
  if (kind == QuantKind::weight) {
    q.q_neg = -(1 << (bits - 1));
    q.q_pos = (1 << (bits - 1)) - 1;
  } else {
    q.q_neg = 0;
    q.q_pos = (1 << bits) - 1;
  }
  return q;
}

void QuantizerState::clamp_step() noexcept {
  if (!(step >= kMinStep)) step = kMinStep;
}

Tensor fake_quantize(const Tensor& x, const QuantizerState& q) {
  if (!(q.step > 0.0f)) throw InvalidState("fake_quantize: step must be positive");
  if (!x.all_finite()) throw InvalidData("fake_quantize: non-finite input");
  Tensor y(x.dims());
  kernels::active().fake_quantize(x.data(), y.data(), x.size(), q.step, static_cast<float>(q.q_neg),
                                  static_cast<float>(q.q_pos));
  return y;
}

QuantGrads fake_quantize_backward(const Tensor& grad_out, const Tensor& x, const QuantizerState& q) {
  require_same_dims(grad_out, x, "fake_quantize_backward");
  QuantGrads g{Tensor(x.dims()), 0.0f};
  const double sum = kernels::active().fake_quantize_backward(
      x.data(), grad_out.data(), g.grad_x.data(), x.size(), q.step, static_cast<float>(q.q_neg),
      static_cast<float>(q.q_pos));
  g.grad_step = static_cast<float>(sum * q.grad_scale);
  return g;
}

float init_step(const Tensor& values, int bits) {
  if (values.empty()) throw InvalidArgument("init_step: empty tensor");
  double mean_abs = 0.0;
  for (float v : values.values()) mean_abs += std::abs(static_cast<double>(v));
  mean_abs /= static_cast<double>(values.size());
  const double p = static_cast<double>((1 << (bits - 1)) - 1);
  return std::max(kMinStep, static_cast<float>(2.0 * mean_abs * p));
}

float lsq_grad_scale(std::size_t count, int q_pos) {
  return static_cast<float>(1.0 / std::sqrt(static_cast<double>(count) * q_pos));
}

void wrap_quantized(ModelGraph& model, int bits) {
  if (model.quant_bits() != 0) throw InvalidState("wrap_quantized: model is already quantized");
  if (bits != 2 && bits != 4 && bits != 8)
    throw InvalidArgument("wrap_quantized: bits must be 2, 4 or 8");
  for (ConvLayer* conv : model.conv_layers()) {
    if (conv == &model.stem()) continue;
    ConvQuant cq;
    cq.weight = QuantizerState::make(QuantKind::weight, bits);
    cq.weight.step = init_step(conv->weight, bits);
    cq.weight.grad_scale = lsq_grad_scale(conv->weight.size(), cq.weight.q_pos);
    cq.weight.initialized = true;
    cq.activation = QuantizerState::make(QuantKind::activation, bits);
    conv->quant = cq;
  }
  model.set_quant_bits(bits);
}

}  // namespace freqcoda::quant
