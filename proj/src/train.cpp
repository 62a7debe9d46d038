#include "freqcoda/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "freqcoda/io.hpp"
#include "freqcoda/quant.hpp"
#include "freqcoda/rng.hpp"
#include "freqcoda/spectral.hpp"

namespace freqcoda::train {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Random 4-pixel-padded crop and horizontal flip, per image.
Tensor augment_batch(const Tensor& images, std::uint64_t seed, std::size_t epoch, std::size_t first_index) {
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  Tensor out(images.dims());
  for (std::size_t i = 0; i < n; ++i) {
    std::mt19937_64 rng = make_rng(seed ^ (0xa5a5ULL + epoch * 0x100000001b3ULL), first_index + i);
    const long dy = static_cast<long>(rng() % 9) - 4;
    const long dx = static_cast<long>(rng() % 9) - 4;
    const bool flip = (rng() & 1) != 0;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const long sy = static_cast<long>(y) + dy;
          const long sxr = static_cast<long>(flip ? w - 1 - x : x) + dx;
          const bool in = sy >= 0 && sxr >= 0 && sy < static_cast<long>(h) && sxr < static_cast<long>(w);
          out.at(i, ch, y, x) = in ? images.at(i, ch, static_cast<std::size_t>(sy), static_cast<std::size_t>(sxr)) : 0.0f;
        }
  }
  return out;
}

std::string first_bad_layer(const ModelGraph& model) {
  return model.first_nonfinite_layer().empty() ? std::string("loss") : model.first_nonfinite_layer();
}

}  // namespace

std::string_view to_string(FilterMode mode) {
  switch (mode) {
    case FilterMode::none: return "none";
    case FilterMode::low: return "low";
    case FilterMode::high: return "high";
  }
  return "none";
}

FilterMode parse_filter_mode(std::string_view name) {
  if (name == "none") return FilterMode::none;
  if (name == "low") return FilterMode::low;
  if (name == "high") return FilterMode::high;
  throw InvalidArgument("unknown filter mode: " + std::string(name));
}

double LrSchedule::lr_at(std::size_t epoch, double base_lr, std::size_t total_epochs) const {
  switch (kind) {
    case Kind::constant:
      return base_lr;
    case Kind::step:
      return base_lr * std::pow(gamma, static_cast<double>(step_size ? epoch / step_size : 0));
    case Kind::multistep: {
      const auto passed = std::count_if(milestones.begin(), milestones.end(), [&](std::size_t m) { return epoch >= m; });
      return base_lr * std::pow(gamma, static_cast<double>(passed));
    }
    case Kind::cosine: {
      const double period = static_cast<double>(t_max ? t_max : std::max<std::size_t>(1, total_epochs));
      return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / period));
    }
  }
  return base_lr;
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw InvalidArgument("train config: lr must be > 0");
  if (batch_size < 2) throw InvalidArgument("train config: batch_size must be >= 2");
  if (epochs < 1) throw InvalidArgument("train config: epochs must be >= 1");
  if (bits != 0 && bits != 2 && bits != 4 && bits != 8) throw InvalidArgument("train config: bits must be 0, 2, 4 or 8");
  if (filter_mode != FilterMode::none && !(radius >= 0.0))
    throw InvalidArgument("train config: radius required (>= 0) when filtering");
  if (eval_batch_size < 1) throw InvalidArgument("train config: eval_batch_size must be >= 1");
}

Tensor InputPipeline::prepare(const Tensor& images) const {
  require_rank(images, 4, "input pipeline");
  if (filter == FilterMode::none) return data::normalize(images, norm);
  spectral::Decomposition d = spectral::decompose_batch(images, radius);
  if (filter == FilterMode::low) return data::normalize(d.lfc, norm);
  // HFC has no DC component; re-centre on each image's channel mean.
  const std::size_t planes = images.dim(0) * images.dim(1), hw = images.dim(2) * images.dim(3);
  for (std::size_t p = 0; p < planes; ++p) {
    double mean = 0.0;
    for (std::size_t j = 0; j < hw; ++j) mean += images[p * hw + j];
    mean /= static_cast<double>(hw);
    for (std::size_t j = 0; j < hw; ++j) d.hfc[p * hw + j] += static_cast<float>(mean);
  }
  return data::normalize(d.hfc, norm);
}

InputPipeline pipeline_for(const TrainConfig& config) {
  return InputPipeline{config.filter_mode, config.radius, config.norm};
}

Tensor preprocess_batch(const Tensor& images, const TrainConfig& config) {
  return pipeline_for(config).prepare(images);
}

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng = make_rng(seed ^ 0x5eedULL, epoch);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(perm[i - 1], perm[j]);
  }
  return perm;
}

EvalResult evaluate(ModelGraph& model, const data::Dataset& dataset, std::size_t batch_size,
                    const InputPipeline& pipeline) {
  if (dataset.num_classes != model.config().num_classes)
    throw InvalidArgument("evaluate: dataset has " + std::to_string(dataset.num_classes) + " classes, model has " +
                          std::to_string(model.config().num_classes));
  if (batch_size < 1) throw InvalidArgument("evaluate: batch_size must be >= 1");
  EvalResult r;
  r.predictions.reserve(dataset.size());
  std::vector<std::size_t> correct(dataset.num_classes, 0), total(dataset.num_classes, 0);
  std::size_t hits = 0;
  for (std::size_t first = 0; first < dataset.size(); first += batch_size) {
    const std::size_t count = std::min(batch_size, dataset.size() - first);
    const Tensor input = pipeline.prepare(slice_batch(dataset.images, first, count));
    const std::vector<int> pred = nn::argmax_rows(model.forward(input, {BnMode::eval}));
    for (std::size_t i = 0; i < count; ++i) {
      const int label = dataset.labels[first + i];
      ++total[static_cast<std::size_t>(label)];
      if (pred[i] == label) {
        ++hits;
        ++correct[static_cast<std::size_t>(label)];
      }
      r.predictions.push_back(pred[i]);
    }
  }
  r.accuracy = dataset.size() ? static_cast<double>(hits) / static_cast<double>(dataset.size()) : 0.0;
  r.per_class.resize(dataset.num_classes);
  for (std::size_t c = 0; c < dataset.num_classes; ++c)
    r.per_class[c] = total[c] ? static_cast<double>(correct[c]) / static_cast<double>(total[c]) : 0.0;
  return r;
}

TrainResult train_qat(const TrainConfig& config, const data::Dataset& train_set, const data::Dataset& eval_set) {
  config.validate();
  if (eval_set.size() == 0) throw InvalidArgument("train_qat: eval set is empty");
  if (train_set.size() < 2) throw InvalidArgument("train_qat: need at least 2 training images");
  if (train_set.num_classes != eval_set.num_classes) throw InvalidArgument("train_qat: class count mismatch");

  const auto t_start = Clock::now();
  ResNetConfig mc = config.model;
  mc.num_classes = train_set.num_classes;
  mc.in_channels = train_set.images.dim(1);
  mc.seed = config.seed;
  ModelGraph model(mc);
  if (config.bits != 0) quant::wrap_quantized(model, config.bits);

  const InputPipeline pipeline = pipeline_for(config);
  const InputPipeline test_pipeline{FilterMode::none, config.radius, config.norm};
  const OptimizerHyper hyper{config.rule, config.momentum, config.weight_decay};
  OptimizerState opt_state;
  std::vector<ParamRef> params = model.parameters();

  TrainResult result;
  result.model = model;
  result.report.best_eval_acc = -1.0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t_epoch = Clock::now();
    const double lr = config.schedule.lr_at(epoch, config.lr, config.epochs);
    const std::vector<std::size_t> perm = epoch_permutation(train_set.size(), config.seed, epoch);
    double loss_sum = 0.0;
    std::size_t seen = 0, hits = 0;
    for (std::size_t first = 0; first < perm.size(); first += config.batch_size) {
      const std::size_t count = std::min(config.batch_size, perm.size() - first);
      if (count < 2) break;
      const std::span<const std::size_t> idx(perm.data() + first, count);
      Tensor images = gather_batch(train_set.images, idx);
      if (config.augment) images = augment_batch(images, config.seed, epoch, first);
      std::vector<int> labels(count);
      for (std::size_t i = 0; i < count; ++i) labels[i] = train_set.labels[idx[i]];

      const Tensor input = pipeline.prepare(images);
      model.zero_grad();
      const Tensor logits = model.forward(input, {BnMode::train, nullptr, true, true});
      const nn::LossAndGrad<float> ce = nn::cross_entropy_loss(logits, labels);
      if (!std::isfinite(ce.loss))
        throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch) +
                             "; first non-finite layer: " + first_bad_layer(model));
      model.backward(ce.grad);
      optimizer_step(params, opt_state, hyper, lr);

      loss_sum += ce.loss * static_cast<double>(count);
      seen += count;
      const std::vector<int> pred = nn::argmax_rows(logits);
      for (std::size_t i = 0; i < count; ++i) hits += pred[i] == labels[i] ? 1 : 0;
    }
    model.clear_cache();
    EpochMetrics m;
    m.epoch = epoch + 1;
    m.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    m.train_acc = seen ? static_cast<double>(hits) / static_cast<double>(seen) : 0.0;
    m.eval_acc = evaluate(model, eval_set, config.eval_batch_size, test_pipeline).accuracy;
    m.seconds = seconds_since(t_epoch);
    result.report.epochs.push_back(m);
    if (m.eval_acc > result.report.best_eval_acc) {
      result.report.best_eval_acc = m.eval_acc;
      result.report.best_epoch = m.epoch;
      result.model = model;
    }
  }
  result.model.clear_cache();
  result.report.wall_seconds = seconds_since(t_start);
  if (!config.checkpoint_path.empty()) {
    CheckpointMeta meta{mc, config.bits, config.filter_mode, config.radius, train_set.images.dim(2), config.norm};
    save_model_checkpoint(config.checkpoint_path, result.model, meta);
    result.report.checkpoint_path = config.checkpoint_path;
  }
  if (!config.metrics_path.empty()) write_metrics_csv(config.metrics_path, result.report);
  return result;
}

namespace {

Tensor vector_tensor(const std::vector<float>& v) { return Tensor({v.size()}, v); }
Tensor scalar(double v) { return Tensor({1}, std::vector<float>{static_cast<float>(v)}); }

const Tensor& find_meta(const std::vector<NamedTensor>& all, const std::string& name) {
  for (const NamedTensor& t : all)
    if (t.name == name) return t.value;
  throw FormatError("checkpoint is missing " + name);
}

std::size_t as_count(float v) { return static_cast<std::size_t>(std::lround(v)); }

}  // namespace

void save_model_checkpoint(const std::filesystem::path& path, const ModelGraph& model, const CheckpointMeta& meta) {
  std::vector<NamedTensor> all;
  std::vector<float> blocks(meta.model.depth_blocks.begin(), meta.model.depth_blocks.end());
  all.push_back({"meta.depth_blocks", vector_tensor(blocks)});
  all.push_back({"meta.base_width", scalar(static_cast<double>(meta.model.base_width))});
  all.push_back({"meta.num_classes", scalar(static_cast<double>(meta.model.num_classes))});
  all.push_back({"meta.in_channels", scalar(static_cast<double>(meta.model.in_channels))});
  all.push_back({"meta.bits", scalar(meta.bits)});
  all.push_back({"meta.filter", scalar(static_cast<double>(meta.filter))});
  all.push_back({"meta.radius", scalar(meta.radius)});
  all.push_back({"meta.input_size", scalar(static_cast<double>(meta.input_size))});
  all.push_back({"meta.norm_mean", vector_tensor(meta.norm.mean)});
  all.push_back({"meta.norm_std", vector_tensor(meta.norm.std)});
  for (NamedTensor& t : model.export_state()) all.push_back(std::move(t));
  io::write_checkpoint(path, all);
}

LoadedModel load_model_checkpoint(const std::filesystem::path& path) {
  const std::vector<NamedTensor> all = io::read_checkpoint(path);
  CheckpointMeta meta;
  meta.model.depth_blocks.clear();
  for (float v : find_meta(all, "meta.depth_blocks").values()) meta.model.depth_blocks.push_back(as_count(v));
  meta.model.base_width = as_count(find_meta(all, "meta.base_width")[0]);
  meta.model.num_classes = as_count(find_meta(all, "meta.num_classes")[0]);
  meta.model.in_channels = as_count(find_meta(all, "meta.in_channels")[0]);
  meta.bits = static_cast<int>(std::lround(find_meta(all, "meta.bits")[0]));
  meta.filter = static_cast<FilterMode>(std::lround(find_meta(all, "meta.filter")[0]));
  meta.radius = find_meta(all, "meta.radius")[0];
  meta.input_size = as_count(find_meta(all, "meta.input_size")[0]);
  meta.norm.mean = find_meta(all, "meta.norm_mean").values();
  meta.norm.std = find_meta(all, "meta.norm_std").values();
  LoadedModel out{ModelGraph(meta.model), meta};
  if (meta.bits != 0) quant::wrap_quantized(out.model, meta.bits);
  out.model.import_state(all);
  return out;
}

void write_metrics_csv(const std::filesystem::path& path, const TrainReport& report) {
  std::string text = "epoch,train_loss,train_acc,eval_acc,seconds\n";
  char line[256];
  for (const EpochMetrics& m : report.epochs) {
    std::snprintf(line, sizeof line, "%zu,%.6f,%.6f,%.6f,%.3f\n", m.epoch, m.train_loss, m.train_acc, m.eval_acc,
                  m.seconds);
    text += line;
  }
  io::write_file_atomic(path, text);
}

}  // namespace freqcoda::train
