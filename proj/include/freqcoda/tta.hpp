#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "freqcoda/data.hpp"
#include "freqcoda/model.hpp"
#include "freqcoda/optim.hpp"
#include "freqcoda/train.hpp"

namespace freqcoda::tta {

struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;

  std::size_t channels() const noexcept { return mean.size(); }
};

// Per-channel statistics of the two spectral bands of a feature batch, over
// (N, H, W). The DC bin belongs to the low band.
struct BandStats {
  BatchStats low;
  BatchStats high;
};

BandStats band_batch_stats(const Tensor& features, double radius);

// Channelwise sum of means and of variances.
BatchStats combine(const BatchStats& low, const BatchStats& high);

// running <- (1 - alpha) running + alpha batch, for mean and var.
void ema_update(BatchStats& running, const BatchStats& batch, double alpha);

struct FabnLayerState {
  BatchStats lfc;  // EMA of low-band stats, seeded from the source running stats
  std::size_t t = 0;
};

struct FabnState {
  std::vector<FabnLayerState> layers;
  double alpha = 0.1;
  double radius_fraction = 0.25;
  std::optional<double> absolute_radius;

  // Seeds every layer from the model's running stats.
  static FabnState from_model(const ModelGraph& model, double alpha, double radius_fraction,
                              std::optional<double> absolute_radius = std::nullopt);
  static FabnState from_layer(const BatchNormLayer& layer, double alpha, double radius_fraction,
                              std::optional<double> absolute_radius = std::nullopt);

  double radius_for(std::size_t height, std::size_t width) const;
  std::size_t step() const noexcept { return layers.empty() ? 0 : layers.front().t; }
  void validate() const;
};

// Statistics FABN normalizes a batch with at one layer. When commit is set
// the layer's EMA is advanced (update-then-normalize); otherwise the state is
// left as is and the would-be update is returned.
BatchStats fabn_stats(const Tensor& features, FabnState& state, std::size_t layer_index, bool commit = true);

// Single-layer FABN: split, update the low-band EMA, add the batch high-band
// stats, normalize the full feature and apply the layer's affine transform.
Tensor fabn_forward(const Tensor& features, const BatchNormLayer& layer, FabnState& state,
                    std::size_t layer_index = 0);

// Current-batch statistics only; running stats untouched.
Tensor norm_adapt_forward(const Tensor& features, const BatchNormLayer& layer);

// Feeds FABN statistics to ModelGraph BN layers running in external mode.
class FabnStatsProvider final : public NormStatsSource {
 public:
  FabnStatsProvider(FabnState& state, bool commit) : state_(state), commit_(commit) {}
  nn::ChannelStats<float> stats_for(std::size_t bn_index, const Tensor& input) override;
  // Low-band EMA each layer used during the last forward.
  const std::vector<BatchStats>& low_band() const noexcept { return low_band_; }

 private:
  FabnState& state_;
  bool commit_;
  std::vector<BatchStats> low_band_;
};

// Plain current-batch statistics through the external hook, recording them.
class BatchStatsProvider final : public NormStatsSource {
 public:
  nn::ChannelStats<float> stats_for(std::size_t bn_index, const Tensor& input) override;
  const std::vector<BatchStats>& recorded() const noexcept { return recorded_; }

 private:
  std::vector<BatchStats> recorded_;
};

enum class Method : std::uint8_t { none, norm, tent, sar, fabn, fabn_tent, fabn_sar };

std::string_view to_string(Method method);
Method parse_method(std::string_view name);
bool uses_fabn(Method method);
bool uses_entropy_update(Method method);
bool uses_sar(Method method);

enum class ResetPolicy : std::uint8_t { per_domain, continual };

std::string_view to_string(ResetPolicy policy);
ResetPolicy parse_reset_policy(std::string_view name);

double default_entropy_threshold(std::size_t num_classes);  // 0.4 ln C

struct TtaConfig {
  Method method = Method::fabn;
  double alpha = 0.1;
  double radius_fraction = 0.25;
  std::optional<double> absolute_radius;
  ResetPolicy reset = ResetPolicy::per_domain;
  std::size_t batch_size = 64;
  std::size_t max_batches = 0;  // per domain; 0 = all
  // Entropy update on BN affine parameters.
  train::OptimizerHyper tent_hyper{train::OptimizerRule::adam, 0.9, 0.0};
  double tent_lr = 1e-3;
  train::OptimizerHyper sar_hyper{train::OptimizerRule::sgd_momentum, 0.9, 0.0};
  double sar_lr = 0.00025;
  double sar_rho = 0.05;
  std::optional<double> sar_e0;  // default 0.4 ln C
  bool record_stats = false;

  void validate() const;
};

// Adaptation state for one model: FABN EMA plus the optimizer over BN affine
// parameters.
struct Adapter {
  ModelGraph* model = nullptr;
  TtaConfig config;
  FabnState fabn;
  train::OptimizerState opt;

  Adapter(ModelGraph& model, const TtaConfig& config);
};

struct StepResult {
  Tensor logits;
  std::vector<int> predictions;
  std::vector<double> entropies;
  std::size_t filtered = 0;            // samples dropped by the entropy threshold
  std::vector<BatchStats> stats;        // recorded per-layer stats, if requested
};

// BN affine parameters of the model; throws InvalidState if the list ever
// contains anything else.
std::vector<ParamRef> affine_parameters(ModelGraph& model);
void check_trainable(std::span<const ParamRef> params);

// Forward with the active normalization scheme and no parameter update.
StepResult adapt_forward(Adapter& adapter, const Tensor& input);

// One entropy-minimization step on BN affine parameters. Samples whose
// entropy exceeds `threshold` (if given) are excluded from the loss.
StepResult tent_step(Adapter& adapter, const Tensor& input, std::optional<double> threshold = std::nullopt);

// Entropy filter plus a two-pass sharpness-aware update of radius rho.
StepResult sar_step(Adapter& adapter, const Tensor& input, double e0, double rho);

// Dispatches on adapter.config.method.
StepResult adapt_batch(Adapter& adapter, const Tensor& input);

struct Domain {
  std::string name;
  data::Dataset data;  // pixel-space images
};

struct BatchRecord {
  std::string domain;
  std::size_t batch_idx = 0;
  double online_acc = 0.0;
  double cum_acc = 0.0;  // within the domain
  double mean_entropy = 0.0;
  std::size_t filtered = 0;
  std::size_t size = 0;
};

struct DomainSummary {
  std::string name;
  double accuracy = 0.0;
  std::size_t samples = 0;
  std::vector<int> predictions;
  // Per batch, per BN layer (record_stats): the low-band EMA for FABN
  // methods, the batch stats for NORM.
  std::vector<std::vector<BatchStats>> stats;
};

struct AdaptationRun {
  Method method = Method::none;
  ResetPolicy reset = ResetPolicy::per_domain;
  std::vector<BatchRecord> batches;
  std::vector<DomainSummary> domains;
  double accuracy = 0.0;  // over every adapted sample
};

// Streams each domain in order in batches of config.batch_size. The model is
// restored to its initial state afterwards.
AdaptationRun run_adaptation(ModelGraph& model, const std::vector<Domain>& stream, const TtaConfig& config,
                             const train::InputPipeline& pipeline);

void write_adaptation_csv(const std::filesystem::path& path, const AdaptationRun& run);

}  // namespace freqcoda::tta
