#include "freqcoda/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <iostream>
#include <map>
#include <numeric>
#include <random>

#include "freqcoda/analysis.hpp"
#include "freqcoda/data.hpp"
#include "freqcoda/errors.hpp"
#include "freqcoda/io.hpp"
#include "freqcoda/rng.hpp"
#include "freqcoda/spectral.hpp"
#include "freqcoda/train.hpp"
#include "freqcoda/tta.hpp"

namespace freqcoda::cli {
namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Kind { integer, real, text, boolean };

struct Key {
  std::string name;
  Kind kind;
  json fallback;  // null: optional, resolved by the subcommand
  std::string help;
};

const std::string kAllCorruptions =
    "gaussian_noise,shot_noise,impulse_noise,defocus_blur,contrast,brightness,pixelate";

std::vector<Key> data_keys(bool with_classes) {
  std::vector<Key> k{
      {"dataset", Kind::text, "synthetic", "cifar10 or synthetic"},
      {"data_dir", Kind::text, "", "directory holding the CIFAR-10 binary batches"},
      {"eval_size", Kind::integer, 1000, "test images used (0 = all)"},
  };
  if (with_classes) k.push_back({"num_classes", Kind::integer, 10, "classes of the synthetic dataset"});
  return k;
}

std::vector<Key> adapt_keys() {
  return {
      {"checkpoint", Kind::text, json(), "model checkpoint (FQCK)"},
      {"method", Kind::text, "fabn", "none, norm, tent, sar, fabn, fabn+tent or fabn+sar"},
      {"alpha", Kind::real, 0.1, "EMA blend factor of the low-band statistics"},
      {"batch_size", Kind::integer, 64, "test batch size"},
      {"severity", Kind::integer, 3, "corruption severity 1..5"},
      {"all_severities", Kind::boolean, false, "stream every corruption at severities 1..5 instead"},
      {"corruptions", Kind::text, kAllCorruptions, "comma-separated corruption stream"},
      {"reset", Kind::text, "per-domain", "per-domain or continual"},
      {"absolute_radius", Kind::boolean, false, "use the training radius literally at every layer"},
      {"radius", Kind::real, json(), "training radius behind the per-layer split (default: checkpoint)"},
      {"batches", Kind::integer, 0, "batches per domain (0 = all)"},
      {"filter", Kind::text, "none", "test-time input filter none, low or high"},
      {"input_radius", Kind::real, json(), "test-time input filter radius (default: checkpoint radius)"},
      {"lr", Kind::real, json(), "learning rate of the affine update (default: 1e-3 tent, 2.5e-4 sar)"},
      {"rho", Kind::real, 0.05, "sharpness radius of the sar update"},
      {"e0", Kind::real, json(), "sar entropy threshold (default: 0.4 ln C)"},
  };
}

std::map<std::string, std::vector<Key>> subcommand_keys() {
  std::map<std::string, std::vector<Key>> m;
  std::vector<Key> train = data_keys(true);
  for (Key k : std::vector<Key>{
           {"train_size", Kind::integer, 2000, "training images used (0 = all)"},
           {"bits", Kind::integer, 2, "quantization bits 0 (full precision), 2, 4 or 8"},
           {"filter", Kind::text, "low", "input filter none, low or high"},
           {"radius", Kind::real, 8.0, "filter radius in frequency bins"},
           {"epochs", Kind::integer, 15, "training epochs"},
           {"batch_size", Kind::integer, 64, "training batch size"},
           {"lr", Kind::real, 0.1, "initial learning rate"},
           {"momentum", Kind::real, 0.9, "SGD momentum"},
           {"weight_decay", Kind::real, 5e-4, "weight decay on conv and linear weights"},
           {"schedule", Kind::text, "cosine", "constant or cosine"},
           {"width", Kind::integer, 16, "base channel width"},
           {"blocks", Kind::text, "1,1,1", "residual blocks per stage"},
           {"augment", Kind::boolean, false, "random crop and flip"},
           {"eval_batch_size", Kind::integer, 256, "evaluation batch size"},
       })
    train.push_back(k);
  m["train"] = train;

  std::vector<Key> eval = data_keys(false);
  eval.push_back({"checkpoint", Kind::text, json(), "model checkpoint (FQCK)"});
  eval.push_back({"corruptions", Kind::text, "", "comma-separated corruptions; empty = clean only"});
  eval.push_back({"severity", Kind::integer, 3, "corruption severity 1..5"});
  eval.push_back({"all_severities", Kind::boolean, false, "evaluate severities 1..5 and report their means"});
  eval.push_back({"batch_size", Kind::integer, 256, "evaluation batch size"});
  eval.push_back({"filter", Kind::text, "none", "test-time input filter none, low or high"});
  eval.push_back({"input_radius", Kind::real, json(), "test-time input filter radius (default: checkpoint radius)"});
  m["eval"] = eval;

  std::vector<Key> adapt = data_keys(false);
  for (const Key& k : adapt_keys()) adapt.push_back(k);
  m["adapt"] = adapt;

  std::vector<Key> sse = adapt;
  m["analyze-bn-sse"] = sse;

  m["decompose"] = {
      {"input", Kind::text, json(), "FQT0 tensor, C x H x W or N x C x H x W"},
      {"radius", Kind::real, 8.0, "split radius in frequency bins"},
  };
  m["corrupt"] = {
      {"input", Kind::text, json(), "FQT0 tensor, C x H x W or N x C x H x W, values in [0, 1]"},
      {"corruptions", Kind::text, kAllCorruptions, "comma-separated corruptions"},
      {"severity", Kind::integer, 3, "corruption severity 1..5"},
  };
  std::vector<Key> dist = data_keys(true);
  dist.push_back({"radius", Kind::real, 8.0, "band radius in frequency bins"});
  dist.push_back({"corruptions", Kind::text, kAllCorruptions, "comma-separated corruptions"});
  dist.push_back({"severity", Kind::integer, 3, "corruption severity 1..5"});
  dist.push_back({"samples_per_class", Kind::integer, 8, "images sampled per class"});
  m["analyze-distance"] = dist;

  for (auto& [name, keys] : m) {
    keys.insert(keys.begin(), {"seed", Kind::integer, json(), "random seed (drawn and recorded when omitted)"});
    keys.insert(keys.begin(), {"out_dir", Kind::text, json(), "output directory"});
  }
  return m;
}

const char* description(const std::string& sub) {
  static const std::map<std::string, const char*> d{
      {"train", "quantization-aware training on filtered inputs"},
      {"eval", "accuracy of a checkpoint on clean and corrupted test data"},
      {"adapt", "test-time adaptation over a corruption stream"},
      {"decompose", "split a tensor into low- and high-frequency parts"},
      {"corrupt", "apply corruptions to a tensor of images"},
      {"analyze-distance", "inter-domain distance matrices of the two bands"},
      {"analyze-bn-sse", "squared error between source and adapted BN means"},
  };
  return d.at(sub);
}

std::string flag_name(const std::string& key) {
  std::string f = "--" + key;
  std::replace(f.begin(), f.end(), '_', '-');
  return f;
}

json convert(const Key& key, const std::string& raw) {
  try {
    std::size_t used = 0;
    switch (key.kind) {
      case Kind::integer: {
        const long long v = std::stoll(raw, &used);
        if (used != raw.size()) break;
        return v;
      }
      case Kind::real: {
        const double v = std::stod(raw, &used);
        if (used != raw.size()) break;
        return v;
      }
      case Kind::text:
        return raw;
      case Kind::boolean:
        if (raw == "true" || raw == "1") return true;
        if (raw == "false" || raw == "0") return false;
        break;
    }
  } catch (const std::exception&) {
  }
  throw UsageError("invalid value for " + flag_name(key.name) + ": " + raw);
}

void check_type(const Key& key, const json& v) {
  if (v.is_null()) return;
  bool ok = false;
  switch (key.kind) {
    case Kind::integer: ok = v.is_number_integer(); break;
    case Kind::real: ok = v.is_number(); break;
    case Kind::text: ok = v.is_string(); break;
    case Kind::boolean: ok = v.is_boolean(); break;
  }
  if (!ok) throw UsageError("config key " + key.name + " has the wrong type");
}

// Defaults, then the config file, then explicit flags.
json merge_config(const std::vector<Key>& keys, const std::string& config_path,
                  const std::map<std::string, std::string>& flags, const std::map<std::string, bool>& switches) {
  json cfg = json::object();
  for (const Key& k : keys) cfg[k.name] = k.fallback;
  if (!config_path.empty()) {
    json file;
    try {
      file = json::parse(io::read_file(config_path));
    } catch (const json::exception& e) {
      throw UsageError("cannot parse config " + config_path + ": " + e.what());
    } catch (const IngestionError& e) {
      throw UsageError(std::string("cannot read config: ") + e.what());
    }
    if (!file.is_object()) throw UsageError("config " + config_path + " must hold a JSON object");
    for (auto it = file.begin(); it != file.end(); ++it) {
      auto key = std::find_if(keys.begin(), keys.end(), [&](const Key& k) { return k.name == it.key(); });
      if (key == keys.end()) throw UsageError("unknown config key: " + it.key());
      check_type(*key, it.value());
      cfg[it.key()] = it.value();
    }
  }
  for (const Key& k : keys) {
    if (k.kind == Kind::boolean) {
      if (switches.at(k.name)) cfg[k.name] = true;
    } else if (auto it = flags.find(k.name); it != flags.end()) {
      cfg[k.name] = convert(k, it->second);
    }
  }
  for (const Key& k : keys)
    if (k.kind == Kind::real && cfg[k.name].is_number()) cfg[k.name] = cfg[k.name].get<double>();
  return cfg;
}

std::uint64_t resolve_seed(json& cfg) {
  if (cfg["seed"].is_null()) {
    std::random_device rd;
    cfg["seed"] = (static_cast<std::uint64_t>(rd()) << 20) ^ rd();
  }
  if (cfg["seed"].get<long long>() < 0) throw UsageError("seed must be >= 0");
  return cfg["seed"].get<std::uint64_t>();
}

std::string need_text(const json& cfg, const char* key) {
  if (!cfg[key].is_string() || cfg[key].get<std::string>().empty())
    throw UsageError(std::string("missing required option ") + flag_name(key));
  return cfg[key].get<std::string>();
}

std::size_t count_of(const json& cfg, const char* key) {
  const long long v = cfg[key].get<long long>();
  if (v < 0) throw UsageError(flag_name(key) + " must be >= 0");
  return static_cast<std::size_t>(v);
}

int severity_of(const json& cfg) {
  const int s = cfg["severity"].get<int>();
  if (s < 1 || s > 5) throw UsageError("--severity must lie in 1..5");
  return s;
}

std::uint64_t test_seed(std::uint64_t seed) { return splitmix64(seed ^ 0x7e57da7aULL); }

data::Dataset pick(const data::Dataset& ds, std::size_t n, std::uint64_t seed, bool shuffle) {
  if (n == 0 || n >= ds.size()) return ds;
  if (!shuffle) return ds.head(n);
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng = make_rng(seed, 0xc1fa);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  return ds.subset(idx);
}

struct Splits {
  data::Dataset train;
  data::Dataset test;
};

// Synthetic test data depends only on the seed, so train and adapt runs that
// share a seed see the same test images.
Splits load_data(const json& cfg, std::uint64_t seed, bool need_train, std::size_t num_classes) {
  const std::string name = cfg["dataset"].get<std::string>();
  const std::size_t eval_size = count_of(cfg, "eval_size");
  const std::size_t train_size = cfg.contains("train_size") ? count_of(cfg, "train_size") : 0;
  Splits s;
  if (name == "cifar10") {
    const std::string dir = cfg["data_dir"].get<std::string>();
    if (dir.empty()) throw UsageError("--data-dir is required for --dataset cifar10");
    if (need_train) {
      data::CifarSplits c = data::load_cifar10(dir);
      s.train = pick(c.train, train_size, seed, true);
      s.test = pick(c.test, eval_size, seed, false);
    } else {
      s.test = pick(data::load_cifar_batch(fs::path(dir) / "test_batch.bin"), eval_size, seed, false);
    }
  } else if (name == "synthetic") {
    if (need_train) s.train = data::synth_dataset(seed, train_size ? train_size : 2000, num_classes);
    s.test = data::synth_dataset(test_seed(seed), eval_size ? eval_size : 1000, num_classes);
  } else {
    throw UsageError("unknown dataset: " + name);
  }
  return s;
}

std::vector<data::CorruptionSpec> corruption_specs(const std::string& list, int severity, std::uint64_t seed) {
  std::vector<data::CorruptionSpec> specs;
  if (list.empty()) return specs;
  for (data::CorruptionKind k : data::parse_corruption_list(list))
    specs.push_back({k, severity, splitmix64(seed + 0x9e37ULL * (static_cast<std::uint64_t>(k) + 1))});
  return specs;
}

// One severity, or every kind at 1..5 (kind-major) with --all-severities.
std::vector<data::CorruptionSpec> requested_specs(const json& cfg, std::uint64_t seed) {
  const std::string list = cfg["corruptions"].get<std::string>();
  if (!cfg["all_severities"].get<bool>()) return corruption_specs(list, severity_of(cfg), seed);
  std::vector<data::CorruptionSpec> specs;
  for (const data::CorruptionSpec& base : corruption_specs(list, 1, seed))
    for (int sev = 1; sev <= 5; ++sev) specs.push_back({base.kind, sev, base.seed});
  return specs;
}

std::vector<std::size_t> parse_blocks(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      const long v = std::stol(part, &used);
      if (used != part.size() || v < 1) throw UsageError("");
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw UsageError("--blocks expects positive counts like 1,1,1");
    }
  }
  if (out.empty()) throw UsageError("--blocks is empty");
  return out;
}

struct Job {
  json cfg;
  fs::path out;
  std::uint64_t seed = 0;
  json artifacts = json::array();
  json results = json::object();

  fs::path artifact(const std::string& name) {
    artifacts.push_back(name);
    return out / name;
  }
};

void train_cmd(Job& job) {
  const json& c = job.cfg;
  train::TrainConfig tc;
  tc.filter_mode = train::parse_filter_mode(c["filter"].get<std::string>());
  tc.radius = c["radius"].get<double>();
  tc.bits = c["bits"].get<int>();
  tc.epochs = count_of(c, "epochs");
  tc.batch_size = count_of(c, "batch_size");
  tc.lr = c["lr"].get<double>();
  tc.momentum = c["momentum"].get<double>();
  tc.weight_decay = c["weight_decay"].get<double>();
  const std::string schedule = c["schedule"].get<std::string>();
  if (schedule == "cosine") tc.schedule.kind = train::LrSchedule::Kind::cosine;
  else if (schedule == "constant") tc.schedule.kind = train::LrSchedule::Kind::constant;
  else throw UsageError("unknown schedule: " + schedule);
  tc.seed = job.seed;
  tc.model.base_width = count_of(c, "width");
  tc.model.depth_blocks = parse_blocks(c["blocks"].get<std::string>());
  tc.augment = c["augment"].get<bool>();
  tc.eval_batch_size = count_of(c, "eval_batch_size");
  tc.checkpoint_path = job.artifact("model.fqck");
  tc.metrics_path = job.artifact("metrics.csv");
  try {
    tc.validate();
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  const Splits s = load_data(c, job.seed, true, count_of(c, "num_classes"));
  const train::TrainResult r = train::train_qat(tc, s.train, s.test);
  job.results["best_eval_acc"] = r.report.best_eval_acc;
  job.results["best_epoch"] = r.report.best_epoch;
  std::printf("best eval accuracy %.4f at epoch %zu (%.1fs)\n", r.report.best_eval_acc, r.report.best_epoch,
              r.report.wall_seconds);
}

void eval_cmd(Job& job) {
  const json& c = job.cfg;
  train::LoadedModel lm = train::load_model_checkpoint(need_text(c, "checkpoint"));
  const Splits s = load_data(c, job.seed, false, lm.model.config().num_classes);
  json& cfg = job.cfg;
  if (cfg["input_radius"].is_null()) cfg["input_radius"] = lm.meta.radius;
  const train::InputPipeline pipeline{train::parse_filter_mode(cfg["filter"].get<std::string>()),
                                      cfg["input_radius"].get<double>(), lm.meta.norm};
  const std::size_t batch = count_of(c, "batch_size");
  std::string csv = "domain,accuracy\n";
  char line[128];
  auto run = [&](const std::string& name, const data::Dataset& ds) {
    const double acc = train::evaluate(lm.model, ds, batch, pipeline).accuracy;
    std::snprintf(line, sizeof line, "%s,%.6f\n", name.c_str(), acc);
    csv += line;
    job.results[name] = acc;
    std::printf("%s", line);
  };
  run("clean", s.test);
  std::map<std::string, std::vector<double>> by_kind;
  std::vector<double> corrupted;
  for (const data::CorruptionSpec& spec : requested_specs(c, job.seed)) {
    const std::string name = analysis::domain_label(spec);
    run(name, data::corrupt_dataset(s.test, spec));
    by_kind[std::string(data::to_string(spec.kind))].push_back(job.results[name].get<double>());
    corrupted.push_back(job.results[name].get<double>());
  }
  if (c["all_severities"].get<bool>() && !corrupted.empty()) {
    auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
    for (const auto& [kind, accs] : by_kind) {
      const double m = mean(accs);
      std::snprintf(line, sizeof line, "%s-mean,%.6f\n", kind.c_str(), m);
      csv += line;
      job.results[kind + "-mean"] = m;
    }
    std::snprintf(line, sizeof line, "corrupted-mean,%.6f\n", mean(corrupted));
    csv += line;
    job.results["corrupted-mean"] = mean(corrupted);
    std::printf("corrupted-mean %.6f\n", mean(corrupted));
  }
  io::write_file_atomic(job.artifact("eval.csv"), csv);
}

struct AdaptSetup {
  train::LoadedModel lm;
  tta::TtaConfig tc;
  train::InputPipeline pipeline;
  std::vector<tta::Domain> stream;
};

AdaptSetup adapt_setup(Job& job, bool record) {
  json& c = job.cfg;
  AdaptSetup a{train::load_model_checkpoint(need_text(c, "checkpoint")), {}, {}, {}};
  const train::CheckpointMeta& meta = a.lm.meta;
  if (c["radius"].is_null()) c["radius"] = meta.radius;
  if (c["input_radius"].is_null()) c["input_radius"] = meta.radius;
  a.tc.method = tta::parse_method(c["method"].get<std::string>());
  a.tc.alpha = c["alpha"].get<double>();
  const double radius = c["radius"].get<double>();
  if (!(radius > 0.0)) throw UsageError("--radius must be > 0");
  a.tc.radius_fraction = std::min(1.0, radius / static_cast<double>(meta.input_size));
  if (c["absolute_radius"].get<bool>()) a.tc.absolute_radius = radius;
  a.tc.reset = tta::parse_reset_policy(c["reset"].get<std::string>());
  a.tc.batch_size = count_of(c, "batch_size");
  a.tc.max_batches = count_of(c, "batches");
  if (!c["lr"].is_null()) a.tc.tent_lr = a.tc.sar_lr = c["lr"].get<double>();
  a.tc.sar_rho = c["rho"].get<double>();
  if (!c["e0"].is_null()) a.tc.sar_e0 = c["e0"].get<double>();
  a.tc.record_stats = record;
  try {
    a.tc.validate();
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  a.pipeline = {train::parse_filter_mode(c["filter"].get<std::string>()), c["input_radius"].get<double>(), meta.norm};
  const Splits s = load_data(c, job.seed, false, a.lm.model.config().num_classes);
  const std::vector<data::CorruptionSpec> specs = requested_specs(c, job.seed);
  if (specs.empty()) a.stream.push_back({"clean", s.test});
  for (const data::CorruptionSpec& spec : specs)
    a.stream.push_back({analysis::domain_label(spec), data::corrupt_dataset(s.test, spec)});
  return a;
}

void adapt_cmd(Job& job) {
  AdaptSetup a = adapt_setup(job, false);
  const tta::AdaptationRun run = tta::run_adaptation(a.lm.model, a.stream, a.tc, a.pipeline);
  tta::write_adaptation_csv(job.artifact("adapt_log.csv"), run);
  std::string preds = "domain,index,prediction\n";
  for (const tta::DomainSummary& d : run.domains) {
    for (std::size_t i = 0; i < d.predictions.size(); ++i)
      preds += d.name + "," + std::to_string(i) + "," + std::to_string(d.predictions[i]) + "\n";
    job.results["accuracy"][d.name] = d.accuracy;
    std::printf("%s %.4f\n", d.name.c_str(), d.accuracy);
  }
  io::write_file_atomic(job.artifact("predictions.csv"), preds);
  job.results["mean_accuracy"] = run.accuracy;
  std::printf("mean %.4f\n", run.accuracy);
}

void bn_sse_cmd(Job& job) {
  AdaptSetup a = adapt_setup(job, true);
  const tta::Method m = a.tc.method;
  if (m != tta::Method::norm && !tta::uses_fabn(m))
    throw UsageError("analyze-bn-sse needs a method that records statistics: norm or a fabn variant");
  const std::vector<tta::BatchStats> source = analysis::source_stats(a.lm.model);
  const tta::AdaptationRun run = tta::run_adaptation(a.lm.model, a.stream, a.tc, a.pipeline);
  const analysis::SseReport r = analysis::mean_run_sse(source, run);
  const std::vector<const BatchNormLayer*> layers = std::as_const(a.lm.model).bn_layers();
  std::string csv = "layer,name,sse\n";
  char line[160];
  for (std::size_t l = 0; l < r.per_layer.size(); ++l) {
    std::snprintf(line, sizeof line, "%zu,%s,%.9g\n", l, layers[l]->name.c_str(), r.per_layer[l]);
    csv += line;
  }
  std::snprintf(line, sizeof line, "total,all,%.9g\n", r.total);
  csv += line;
  io::write_file_atomic(job.artifact("bn_sse.csv"), csv);
  job.results["total_sse"] = r.total;
  std::printf("total sse %.6g\n", r.total);
}

void decompose_cmd(Job& job) {
  const Tensor input = io::read_tensor(need_text(job.cfg, "input"));
  const double radius = job.cfg["radius"].get<double>();
  if (!(radius >= 0.0)) throw UsageError("--radius must be >= 0");
  spectral::Decomposition d;
  if (input.rank() == 3) d = spectral::decompose(input, radius);
  else if (input.rank() == 4) d = spectral::decompose_batch(input, radius);
  else throw InvalidData("decompose expects a rank-3 or rank-4 tensor, got " + dims_string(input.dims()));
  io::write_tensor(job.artifact("lfc.fqt"), d.lfc);
  io::write_tensor(job.artifact("hfc.fqt"), d.hfc);
}

void corrupt_cmd(Job& job) {
  const Tensor input = io::read_tensor(need_text(job.cfg, "input"));
  if (input.rank() != 3 && input.rank() != 4)
    throw InvalidData("corrupt expects a rank-3 or rank-4 tensor, got " + dims_string(input.dims()));
  for (const data::CorruptionSpec& spec :
       corruption_specs(job.cfg["corruptions"].get<std::string>(), severity_of(job.cfg), job.seed)) {
    Tensor out(input.dims());
    if (input.rank() == 3) {
      out = data::corrupt(input, spec);
    } else {
      const std::size_t per = input.size() / input.dim(0);
      for (std::size_t i = 0; i < input.dim(0); ++i) {
        data::CorruptionSpec s = spec;
        s.seed = spec.seed ^ i;
        Tensor image = slice_batch(input, i, 1);
        image.reshape({input.dim(1), input.dim(2), input.dim(3)});
        const Tensor one = data::corrupt(image, s);
        std::copy(one.values().begin(), one.values().end(), out.values().begin() + static_cast<long>(i * per));
      }
    }
    io::write_tensor(job.artifact(analysis::domain_label(spec) + ".fqt"), out);
  }
}

void distance_cmd(Job& job) {
  const json& c = job.cfg;
  const Splits s = load_data(c, job.seed, false, count_of(c, "num_classes"));
  const std::vector<data::CorruptionSpec> specs =
      corruption_specs(c["corruptions"].get<std::string>(), severity_of(c), job.seed);
  analysis::DistanceOptions opt;
  opt.radius = c["radius"].get<double>();
  opt.samples_per_class = count_of(c, "samples_per_class");
  opt.seed = job.seed;
  for (spectral::Band band : {spectral::Band::low, spectral::Band::high}) {
    opt.band = band;
    const std::string tag = band == spectral::Band::low ? "low" : "high";
    const analysis::DistanceReport r = analysis::frequency_distance_matrix(s.test, specs, opt);
    analysis::write_matrix_csv(job.artifact("distance_" + tag + ".csv"), r.overall);
    for (std::size_t i = 0; i < r.classes.size(); ++i)
      analysis::write_matrix_csv(job.artifact("distance_" + tag + "_class" + std::to_string(r.classes[i]) + ".csv"),
                                 r.per_class[i]);
    job.results["mean_off_diagonal_" + tag] = r.overall.mean_off_diagonal();
    std::printf("%s band mean off-diagonal distance %.6f\n", tag.c_str(), r.overall.mean_off_diagonal());
  }
}

int fail(int code, const std::string& message) {
  std::cerr << "error: " << message << "\n";
  return code;
}

}  // namespace

int run(int argc, const char* const* argv) {
  const auto t0 = std::chrono::steady_clock::now();
  CLI::App app{"Frequency-aware quantized training and test-time adaptation", "freqcoda"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  const std::map<std::string, std::vector<Key>> all_keys = subcommand_keys();
  std::map<std::string, std::map<std::string, std::string>> flag_values;
  std::map<std::string, std::map<std::string, bool>> switch_values;
  std::map<std::string, std::string> config_paths;
  std::map<std::string, std::map<std::string, CLI::Option*>> options;
  for (const auto& [name, keys] : all_keys) {
    CLI::App* sub = app.add_subcommand(name, description(name));
    sub->add_option("--config", config_paths[name], "JSON config; flags override its values")
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    for (const Key& k : keys) {
      if (k.kind == Kind::boolean) {
        switch_values[name][k.name] = false;
        sub->add_flag(flag_name(k.name), switch_values[name][k.name], k.help);
      } else {
        CLI::Option* opt = sub->add_option(flag_name(k.name), flag_values[name][k.name], k.help);
        opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
        opt->type_name(k.kind == Kind::integer ? "INT" : k.kind == Kind::real ? "FLOAT" : "TEXT");
        options[name][k.name] = opt;
      }
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  const std::string sub = app.get_subcommands().front()->get_name();
  std::map<std::string, std::string> given;
  for (const auto& [key, opt] : options[sub])
    if (opt->count() > 0) given[key] = flag_values[sub][key];

  Job job;
  try {
    job.cfg = merge_config(all_keys.at(sub), config_paths[sub], given, switch_values[sub]);
    job.out = need_text(job.cfg, "out_dir");
    job.seed = resolve_seed(job.cfg);
    fs::create_directories(job.out);
    if (sub == "train") train_cmd(job);
    else if (sub == "eval") eval_cmd(job);
    else if (sub == "adapt") adapt_cmd(job);
    else if (sub == "analyze-bn-sse") bn_sse_cmd(job);
    else if (sub == "decompose") decompose_cmd(job);
    else if (sub == "corrupt") corrupt_cmd(job);
    else distance_cmd(job);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.get_subcommand(sub)->help();
    return kExitUsage;
  } catch (const NumericalError& e) {
    return fail(kExitNumerical, e.what());
  } catch (const IngestionError& e) {
    return fail(kExitData, e.what());
  } catch (const FormatError& e) {
    return fail(kExitData, e.what());
  } catch (const InvalidData& e) {
    return fail(kExitData, e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(kExitData, e.what());
  } catch (const std::invalid_argument& e) {
    return fail(kExitUsage, e.what());
  } catch (const std::exception& e) {
    return fail(kExitUsage, e.what());
  }

  json manifest;
  manifest["subcommand"] = sub;
  manifest["config"] = job.cfg;
  manifest["seed"] = job.seed;
  manifest["artifacts"] = job.artifacts;
  manifest["results"] = job.results;
  manifest["version"] = kVersion;
  manifest["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  try {
    io::write_file_atomic(job.out / "manifest.json", manifest.dump(2) + "\n");
  } catch (const std::exception& e) {
    return fail(kExitData, e.what());
  }
  return kExitOk;
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.reserve(args.size());
  for (const std::string& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace freqcoda::cli
