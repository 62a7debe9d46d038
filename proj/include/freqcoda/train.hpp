#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "freqcoda/data.hpp"
#include "freqcoda/model.hpp"
#include "freqcoda/optim.hpp"

namespace freqcoda::train {

enum class FilterMode : std::uint8_t { none, low, high };

std::string_view to_string(FilterMode mode);
FilterMode parse_filter_mode(std::string_view name);

struct LrSchedule {
  enum class Kind : std::uint8_t { constant, step, multistep, cosine };
  Kind kind = Kind::cosine;
  std::size_t step_size = 30;              // step
  std::vector<std::size_t> milestones;     // multistep
  double gamma = 0.1;                      // step, multistep
  std::size_t t_max = 0;                   // cosine; 0 means the epoch count

  // Learning rate for a 0-based epoch.
  double lr_at(std::size_t epoch, double base_lr, std::size_t total_epochs) const;
};

struct TrainConfig {
  FilterMode filter_mode = FilterMode::none;
  double radius = 8.0;  // absolute bins at input resolution
  int bits = 0;         // 0 = full precision
  std::size_t epochs = 15;
  std::size_t batch_size = 64;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  OptimizerRule rule = OptimizerRule::sgd_momentum;
  LrSchedule schedule;
  std::uint64_t seed = 0;
  ResNetConfig model;  // num_classes and seed are taken from the dataset and `seed`
  data::ChannelNorm norm;
  bool augment = false;  // random crop (pad 4) + horizontal flip, applied before filtering
  std::size_t eval_batch_size = 256;
  std::filesystem::path checkpoint_path;  // empty: no checkpoint written
  std::filesystem::path metrics_path;     // empty: no CSV written

  void validate() const;
};

// Pixel-space images -> network input: optional band filtering, then
// per-channel normalization.
struct InputPipeline {
  FilterMode filter = FilterMode::none;
  double radius = 8.0;
  data::ChannelNorm norm;

  Tensor prepare(const Tensor& images) const;
};

InputPipeline pipeline_for(const TrainConfig& config);

// filter none: identity; low: LFC; high: HFC plus the per-image channel mean.
// Followed by normalization.
Tensor preprocess_batch(const Tensor& images, const TrainConfig& config);

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double eval_acc = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochMetrics> epochs;
  double wall_seconds = 0.0;
  std::filesystem::path checkpoint_path;
  double best_eval_acc = 0.0;
  std::size_t best_epoch = 0;
};

struct TrainResult {
  TrainReport report;
  ModelGraph model;  // best-eval parameters
};

// Eval accuracy is measured on unfiltered inputs whatever the training
// filter. Deterministic given config.seed. Throws NumericalError naming the first
// non-finite layer when the loss diverges.
TrainResult train_qat(const TrainConfig& config, const data::Dataset& train_set, const data::Dataset& eval_set);

struct EvalResult {
  double accuracy = 0.0;
  std::vector<double> per_class;
  std::vector<int> predictions;
};

// Eval-mode BN; results do not depend on batch size or order.
EvalResult evaluate(ModelGraph& model, const data::Dataset& dataset, std::size_t batch_size,
                    const InputPipeline& pipeline);

// Per-epoch permutation from (seed, epoch).
std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::size_t epoch);

struct CheckpointMeta {
  ResNetConfig model;
  int bits = 0;
  FilterMode filter = FilterMode::none;
  double radius = 8.0;
  std::size_t input_size = 32;
  data::ChannelNorm norm;
};

struct LoadedModel {
  ModelGraph model;
  CheckpointMeta meta;
};

void save_model_checkpoint(const std::filesystem::path& path, const ModelGraph& model, const CheckpointMeta& meta);
LoadedModel load_model_checkpoint(const std::filesystem::path& path);

void write_metrics_csv(const std::filesystem::path& path, const TrainReport& report);

}  // namespace freqcoda::train
