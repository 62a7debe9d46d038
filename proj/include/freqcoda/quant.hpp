#pragma once

#include <cstdint>

#include "freqcoda/tensor.hpp"

namespace freqcoda {
class ModelGraph;
}

// Learned-step-size fake quantization (LSQ) with straight-through gradients.
namespace freqcoda::quant {

enum class QuantKind : std::uint8_t { weight, activation };

inline constexpr float kMinStep = 1e-8f;

struct QuantizerState {
  float step = 1.0f;
  int q_neg = 0;
  int q_pos = 0;
  float grad_scale = 1.0f;
  QuantKind kind = QuantKind::weight;
  int bits = 8;
  bool initialized = false;  // activation steps are set from the first calibration batch

  // Weights are signed: [-2^(b-1), 2^(b-1)-1]; activations sit after a ReLU
  // and are unsigned: [0, 2^b - 1].
  static QuantizerState make(QuantKind kind, int bits);

  int levels() const noexcept { return q_pos - q_neg + 1; }
  void clamp_step() noexcept;
};

Tensor fake_quantize(const Tensor& x, const QuantizerState& q);

struct QuantGrads {
  Tensor grad_x;
  float grad_step = 0.0f;  // already multiplied by q.grad_scale
};

QuantGrads fake_quantize_backward(const Tensor& grad_out, const Tensor& x, const QuantizerState& q);

// s = 2 * mean(|w|) * (2^(bits-1) - 1), floored at kMinStep.
float init_step(const Tensor& values, int bits);

// 1 / sqrt(count * q_pos)
float lsq_grad_scale(std::size_t count, int q_pos);

// Adds weight and input-activation quantizers to every conv except the stem
// and leaves the classifier full precision. Activation steps stay
// uninitialized until the first forward pass sees a batch.
void wrap_quantized(ModelGraph& model, int bits);

}  // namespace freqcoda::quant
