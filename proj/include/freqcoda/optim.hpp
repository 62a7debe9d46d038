#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "freqcoda/model.hpp"

namespace freqcoda::train {

enum class OptimizerRule : std::uint8_t { sgd_momentum, adam };

struct OptimizerHyper {
  OptimizerRule rule = OptimizerRule::sgd_momentum;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Weight decay applies to conv/linear weights and the classifier bias, never
// to BN affine parameters or quantizer steps.
bool weight_decay_applies(ParamGroup group);

// Per-parameter moment buffers, bound to a parameter list on first use.
struct OptimizerState {
  std::vector<std::vector<float>> first;
  std::vector<std::vector<float>> second;
  std::uint64_t steps = 0;
};

// sgd:  v <- m v + g + wd p;  p <- p - lr v
// adam: bias-corrected moments of (g + wd p); p <- p - lr m_hat / (sqrt(v_hat) + eps)
// Quantizer steps are clamped to stay positive after the update. A
// non-finite gradient throws NumericalError naming the parameter.
void optimizer_step(std::span<const ParamRef> params, OptimizerState& state, const OptimizerHyper& hyper,
                    double lr);

}  // namespace freqcoda::train
