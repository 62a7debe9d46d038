#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "freqcoda/tensor.hpp"

// Differentiable building blocks with explicit backward passes. Every
// function is instantiated for float (working precision, SIMD kernels) and
// double (scalar reference, used for finite-difference checks).
namespace freqcoda::nn {

struct ConvGeom {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

template <class T>
struct ConvGrads {
  BasicTensor<T> grad_input;
  BasicTensor<T> grad_weight;
};

// Cross-correlation; input N x C x H x W, weight O x C x k x k.
template <class T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const BasicTensor<T>& weight, ConvGeom geom);

template <class T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                             const BasicTensor<T>& grad_out, ConvGeom geom, bool need_input_grad = true,
                             bool need_weight_grad = true);

template <class T>
struct LinearGrads {
  BasicTensor<T> grad_input;
  BasicTensor<T> grad_weight;
  BasicTensor<T> grad_bias;
};

// input N x F, weight O x F, bias O.
template <class T>
BasicTensor<T> linear_forward(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                              const BasicTensor<T>& bias);

template <class T>
LinearGrads<T> linear_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                               const BasicTensor<T>& grad_out);

// Saved by the normalizing forward for the backward pass.
template <class T>
struct NormCache {
  std::vector<double> mean;
  std::vector<double> inv_std;
  BasicTensor<T> xhat;
};

template <class T>
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> var;  // biased (divides by N*H*W)
};

template <class T>
ChannelStats<T> channel_stats(const BasicTensor<T>& input);

// y = gamma * (x - mean) / sqrt(var + eps) + beta, channelwise.
template <class T>
BasicTensor<T> normalize_affine(const BasicTensor<T>& input, std::span<const double> mean,
                                std::span<const double> var, std::span<const T> gamma,
                                std::span<const T> beta, double eps, NormCache<T>* cache);

template <class T>
struct NormGrads {
  BasicTensor<T> grad_input;
  std::vector<T> grad_gamma;
  std::vector<T> grad_beta;
};

// Backward when mean/var were computed from this very batch: gradients flow
// through the statistics.
template <class T>
NormGrads<T> normalize_backward_batch_stats(const BasicTensor<T>& grad_out, const NormCache<T>& cache,
                                            std::span<const T> gamma);

// Backward when mean/var are treated as constants (eval mode, FABN).
template <class T>
NormGrads<T> normalize_backward_const_stats(const BasicTensor<T>& grad_out, const NormCache<T>& cache,
                                            std::span<const T> gamma);

template <class T>
BasicTensor<T> relu_forward(const BasicTensor<T>& input);

// Gradient mask taken from the forward *output* (y > 0).
template <class T>
BasicTensor<T> relu_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& output);

template <class T>
BasicTensor<T> global_avg_pool_forward(const BasicTensor<T>& input);  // N x C x H x W -> N x C

template <class T>
BasicTensor<T> global_avg_pool_backward(const BasicTensor<T>& grad_out, const Dims& input_dims);

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Row-wise softmax of N x C logits, max-subtracted.
template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& logits);

template <class T>
struct LossAndGrad {
  double loss = 0.0;
  BasicTensor<T> grad;  // d loss / d logits
};

// Mean over samples of -log softmax(logits)[label].
template <class T>
LossAndGrad<T> cross_entropy_loss(const BasicTensor<T>& logits, std::span<const int> labels);

// Shannon entropy (natural log) of a probability vector; 0 ln 0 = 0.
double entropy(std::span<const double> probabilities);
double entropy(std::span<const float> probabilities);

// Per-sample prediction entropies of N x C logits.
template <class T>
std::vector<double> prediction_entropies(const BasicTensor<T>& logits);

// Mean entropy over the samples with keep[i] != 0 (all when keep is empty),
// with its gradient with respect to the logits. Loss is 0 with zero gradient
// when nothing is kept.
template <class T>
LossAndGrad<T> entropy_loss(const BasicTensor<T>& logits, std::span<const std::uint8_t> keep = {});

template <class T>
std::vector<int> argmax_rows(const BasicTensor<T>& logits);

}  // namespace freqcoda::nn
