#include "freqcoda/optim.hpp"

#include <cmath>

namespace freqcoda::train {

bool weight_decay_applies(ParamGroup group) {
  return group == ParamGroup::conv_weight || group == ParamGroup::linear_weight ||
         group == ParamGroup::linear_bias;
}

void optimizer_step(std::span<const ParamRef> params, OptimizerState& state, const OptimizerHyper& hyper,
                    double lr) {
  if (state.first.empty()) {
    state.first.resize(params.size());
    if (hyper.rule == OptimizerRule::adam) state.second.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.first[i].assign(params[i].value.size(), 0.0f);
      if (hyper.rule == OptimizerRule::adam) state.second[i].assign(params[i].value.size(), 0.0f);
    }
  }
  if (state.first.size() != params.size()) throw InvalidState("optimizer state bound to a different parameter list");
  for (const ParamRef& p : params) {
    if (p.grad.size() != p.value.size()) throw InvalidShape("gradient slot size mismatch for " + p.name);
    for (float g : p.grad)
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient in " + p.name);
  }
  ++state.steps;
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.steps));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.steps));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const ParamRef& p = params[i];
    if (state.first[i].size() != p.value.size()) throw InvalidState("optimizer buffer size mismatch for " + p.name);
    const double wd = weight_decay_applies(p.group) ? hyper.weight_decay : 0.0;
    std::vector<float>& m = state.first[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j] + wd * p.value[j];
      if (hyper.rule == OptimizerRule::sgd_momentum) {
        m[j] = static_cast<float>(hyper.momentum * m[j] + g);
        p.value[j] = static_cast<float>(p.value[j] - lr * m[j]);
      } else {
        std::vector<float>& v = state.second[i];
        m[j] = static_cast<float>(hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g);
        v[j] = static_cast<float>(hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g * g);
        const double m_hat = m[j] / bc1;
        const double v_hat = v[j] / bc2;
        p.value[j] = static_cast<float>(p.value[j] - lr * m_hat / (std::sqrt(v_hat) + hyper.eps));
      }
    }
    if (p.group == ParamGroup::quant_step)
      for (float& s : p.value)
        if (!(s >= quant::kMinStep)) s = quant::kMinStep;
  }
}

}  // namespace freqcoda::train
