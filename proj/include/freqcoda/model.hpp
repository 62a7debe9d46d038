#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "freqcoda/layers.hpp"
#include "freqcoda/quant.hpp"
#include "freqcoda/tensor.hpp"

namespace freqcoda {

// How a BN layer obtains the statistics it normalizes with.
//   train:       batch stats, running stats updated, gradients through stats
//   eval:        running stats, constant in backward
//   batch_stats: batch stats, running stats untouched, gradients through stats
//   external:    stats supplied by a NormStatsSource, constant in backward
enum class BnMode : std::uint8_t { train, eval, batch_stats, external };

struct BatchNormLayer {
  std::string name;
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  float eps = 1e-5f;
  float momentum = 0.1f;
  Tensor grad_gamma;
  Tensor grad_beta;

  static BatchNormLayer make(std::string name, std::size_t channels);
  std::size_t channels() const noexcept { return gamma.size(); }
};

// Standalone BN forward in train or eval mode (train updates running stats).
Tensor batchnorm_forward(const Tensor& input, BatchNormLayer& layer, BnMode mode,
                         nn::NormCache<float>* cache = nullptr);

// Supplies per-channel statistics for BN layers in BnMode::external. The
// layer index is the position in ModelGraph::bn_layers().
class NormStatsSource {
 public:
  virtual ~NormStatsSource() = default;
  virtual nn::ChannelStats<float> stats_for(std::size_t bn_index, const Tensor& input) = 0;
};

struct ConvQuant {
  quant::QuantizerState weight;
  quant::QuantizerState activation;
  float grad_weight_step = 0.0f;
  float grad_activation_step = 0.0f;
};

struct ConvLayer {
  std::string name;
  Tensor weight;
  Tensor grad;
  nn::ConvGeom geom;
  std::optional<ConvQuant> quant;
  // forward cache
  Tensor input;
  Tensor q_input;
  Tensor q_weight;
};

struct LinearLayer {
  std::string name;
  Tensor weight;
  Tensor bias;
  Tensor grad_weight;
  Tensor grad_bias;
  Tensor input;
};

enum class ParamGroup : std::uint8_t { conv_weight, linear_weight, linear_bias, bn_gamma, bn_beta, quant_step };

inline bool is_bn_affine(ParamGroup g) { return g == ParamGroup::bn_gamma || g == ParamGroup::bn_beta; }

// A trainable parameter and its gradient slot.
struct ParamRef {
  std::string name;
  std::span<float> value;
  std::span<float> grad;
  ParamGroup group;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct ResNetConfig {
  std::vector<std::size_t> depth_blocks{1, 1, 1};
  std::size_t base_width = 16;
  std::size_t num_classes = 10;
  std::size_t in_channels = 3;
  std::uint64_t seed = 0;
};

struct ForwardOptions {
  BnMode bn_mode = BnMode::eval;
  NormStatsSource* stats_source = nullptr;
  bool keep_cache = false;    // required before backward()
  bool check_finite = false;  // records the first layer producing non-finite output
};

// Pre-activation residual network: stem conv, stages of (BN-ReLU-conv) x 2
// blocks with stride-2 stage transitions, final BN-ReLU, global average pool,
// linear head.
class ModelGraph {
 public:
  struct Block {
    BatchNormLayer bn1;
    ConvLayer conv1;
    BatchNormLayer bn2;
    ConvLayer conv2;
    std::optional<ConvLayer> shortcut;
    // forward cache
    Tensor input, act1, hidden, act2;
    nn::NormCache<float> bn1_cache, bn2_cache;
  };

  ModelGraph() = default;
  explicit ModelGraph(const ResNetConfig& config);

  const ResNetConfig& config() const noexcept { return config_; }

  Tensor forward(const Tensor& input, const ForwardOptions& options = {});

  // Accumulates parameter gradients (when param_grads) from the last
  // forward, which must have used keep_cache. Returns d loss / d input.
  Tensor backward(const Tensor& grad_logits, bool param_grads = true);

  void zero_grad();
  void clear_cache();

  std::vector<ParamRef> parameters();
  std::vector<BatchNormLayer*> bn_layers();
  std::vector<const BatchNormLayer*> bn_layers() const;
  std::vector<ConvLayer*> conv_layers();
  std::vector<const ConvLayer*> conv_layers() const;
  ConvLayer& stem() noexcept { return stem_; }
  LinearLayer& head() noexcept { return head_; }
  const LinearLayer& head() const noexcept { return head_; }

  int quant_bits() const noexcept { return quant_bits_; }
  void set_quant_bits(int bits) noexcept { quant_bits_ = bits; }

  // Every persistent tensor (parameters, running stats, quantizer steps).
  std::vector<NamedTensor> export_state() const;
  void import_state(const std::vector<NamedTensor>& state);

  // Name of the first layer whose output was non-finite in the last forward
  // run with check_finite; empty when all were finite.
  const std::string& first_nonfinite_layer() const noexcept { return first_nonfinite_; }

 private:
  Tensor conv_forward(ConvLayer& conv, const Tensor& input, bool keep);
  Tensor conv_backward(ConvLayer& conv, const Tensor& grad_out, bool param_grads);
  Tensor bn_forward(BatchNormLayer& bn, std::size_t index, const Tensor& input, const ForwardOptions& opt,
                    nn::NormCache<float>& cache);
  Tensor bn_backward(BatchNormLayer& bn, const Tensor& grad_out, const nn::NormCache<float>& cache,
                     bool param_grads);
  void note(const std::string& layer, const Tensor& out, const ForwardOptions& opt);

  ResNetConfig config_;
  ConvLayer stem_;
  std::vector<Block> blocks_;
  BatchNormLayer final_bn_;
  LinearLayer head_;
  int quant_bits_ = 0;

  BnMode last_mode_ = BnMode::eval;
  Tensor final_input_, final_act_, pooled_;
  nn::NormCache<float> final_cache_;
  std::string first_nonfinite_;
};

ModelGraph build_resnet(const ResNetConfig& config);

}  // namespace freqcoda
