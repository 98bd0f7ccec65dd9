#include "epanet/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "epanet/errors.hpp"

namespace epanet::pipeline {

using json = nlohmann::json;

// ---------------------------------------------------------------- config

json to_json(const RunConfig& c) {
  return json{{"version", c.version},
              {"seed", c.seed},
              {"model", detector::to_json(c.model)},
              {"data",
               {{"source", c.data.source},
                {"root", c.data.root},
                {"split", c.data.split},
                {"eval_split", c.data.eval_split},
                {"synth_count", c.data.synth_count},
                {"classes", c.data.classes}}},
              {"train",
               {{"steps", c.train.steps},
                {"batch_size", c.train.batch_size},
                {"optimizer", c.train.optimizer},
                {"lr", c.train.lr},
                {"momentum", c.train.momentum},
                {"weight_decay", c.train.weight_decay},
                {"warmup_steps", c.train.warmup_steps},
                {"final_lr_fraction", c.train.final_lr_fraction},
                {"grad_clip", c.train.grad_clip},
                {"hflip", c.train.hflip},
                {"checkpoint_every", c.train.checkpoint_every}}},
              {"eval",
               {{"decode_conf", c.eval.decode_conf},
                {"conf_thresh", c.eval.conf_thresh},
                {"nms_iou", c.eval.nms_iou},
                {"max_det", c.eval.max_det},
                {"interpolation", c.eval.interpolation},
                {"checkpoint", c.eval.checkpoint}}}};
}

namespace {

// Reads every key of `j` through `read`, which returns false for unknown keys.
template <typename Fn>
void read_section(const json& j, const std::string& section, Fn&& read) {
  if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    try {
      known = read(key, value);
    } catch (const json::exception& e) {
      throw ConfigError("config key '" + section + "." + key + "': " + e.what());
    }
    if (!known) throw ConfigError("unknown config key '" + section + "." + key + "'");
  }
}

}  // namespace

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be an object");
  if (!j.contains("version")) throw ConfigError("config is missing the top-level \"version\" key");
  RunConfig c;
  read_section(j, "", [&](const std::string& key, const json& v) {
    if (key == "version") {
      c.version = v.get<int>();
      if (c.version != 1) throw ConfigError("unsupported config version " + std::to_string(c.version));
    } else if (key == "seed") {
      c.seed = v.get<std::uint64_t>();
    } else if (key == "model") {
      // Start from the nano defaults so partial model sections stay small.
      json merged = detector::to_json(detector::DetectorConfig::nano(3, 64));
      merged.merge_patch(v);
      if (!v.contains("topology_spec")) merged.erase("topology_spec");
      c.model = detector::config_from_json(merged);
    } else if (key == "data") {
      read_section(v, "data", [&](const std::string& k, const json& x) {
        if (k == "source") c.data.source = x.get<std::string>();
        else if (k == "root") c.data.root = x.get<std::string>();
        else if (k == "split") c.data.split = x.get<std::string>();
        else if (k == "eval_split") c.data.eval_split = x.get<std::string>();
        else if (k == "synth_count") c.data.synth_count = x.get<int>();
        else if (k == "classes") c.data.classes = x.get<int>();
        else return false;
        return true;
      });
    } else if (key == "train") {
      read_section(v, "train", [&](const std::string& k, const json& x) {
        if (k == "steps") c.train.steps = x.get<int>();
        else if (k == "batch_size") c.train.batch_size = x.get<int>();
        else if (k == "optimizer") c.train.optimizer = x.get<std::string>();
        else if (k == "lr") c.train.lr = x.get<double>();
        else if (k == "momentum") c.train.momentum = x.get<double>();
        else if (k == "weight_decay") c.train.weight_decay = x.get<double>();
        else if (k == "warmup_steps") c.train.warmup_steps = x.get<int>();
        else if (k == "final_lr_fraction") c.train.final_lr_fraction = x.get<double>();
        else if (k == "grad_clip") c.train.grad_clip = x.get<double>();
        else if (k == "hflip") c.train.hflip = x.get<bool>();
        else if (k == "checkpoint_every") c.train.checkpoint_every = x.get<int>();
        else return false;
        return true;
      });
    } else if (key == "eval") {
      read_section(v, "eval", [&](const std::string& k, const json& x) {
        if (k == "decode_conf") c.eval.decode_conf = x.get<double>();
        else if (k == "conf_thresh") c.eval.conf_thresh = x.get<double>();
        else if (k == "nms_iou") c.eval.nms_iou = x.get<double>();
        else if (k == "max_det") c.eval.max_det = x.get<int>();
        else if (k == "interpolation") c.eval.interpolation = x.get<std::string>();
        else if (k == "checkpoint") c.eval.checkpoint = x.get<std::string>();
        else return false;
        return true;
      });
    } else {
      return false;
    }
    return true;
  });

  if (c.data.source != "synthetic" && c.data.source != "yolo")
    throw ConfigError("data.source must be 'synthetic' or 'yolo'");
  if (c.data.source == "yolo" && c.data.root.empty()) throw ConfigError("data.root is required for yolo data");
  if (c.data.synth_count < 1) throw ConfigError("data.synth_count must be positive");
  if (c.data.classes != c.model.num_classes)
    throw ConfigError("data.classes (" + std::to_string(c.data.classes) + ") differs from model.num_classes (" +
                      std::to_string(c.model.num_classes) + ")");
  if (c.train.steps < 1 || c.train.batch_size < 1) throw ConfigError("train.steps and train.batch_size must be positive");
  if (c.train.optimizer != "sgd" && c.train.optimizer != "adamw")
    throw ConfigError("train.optimizer must be 'sgd' or 'adamw'");
  if (!(c.eval.conf_thresh > 0.0 && c.eval.conf_thresh < 1.0) || !(c.eval.decode_conf > 0.0 && c.eval.decode_conf < 1.0))
    throw ConfigError("eval confidence thresholds must lie in (0, 1)");
  if (!(c.eval.nms_iou > 0.0 && c.eval.nms_iou <= 1.0)) throw ConfigError("eval.nms_iou must lie in (0, 1]");
  try {
    metrics::parse_interpolation(c.eval.interpolation);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return run_config_from_json(j);
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json* node = &doc;
  std::stringstream path(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(path, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (!node->is_object() || !node->contains(parts[i])) throw ConfigError("override key '" + key + "' does not exist");
    node = &(*node)[parts[i]];
  }
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  *node = value;
}

Seeds derive_seeds(std::uint64_t seed) {
  auto splitmix = [](std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t state = seed;
  Seeds s;
  s.data = splitmix(state);
  s.init = splitmix(state);
  s.augment = splitmix(state);
  return s;
}

void set_deterministic() {
  torch::set_num_threads(1);
  at::globalContext().setDeterministicAlgorithms(true, false);
}

// ---------------------------------------------------------------- data

std::vector<data::Sample> load_samples(const RunConfig& cfg, bool eval_split) {
  const int size = static_cast<int>(cfg.model.input_size);
  const std::string& split = eval_split ? cfg.data.eval_split : cfg.data.split;
  std::vector<data::Sample> samples;
  if (cfg.data.source == "synthetic") {
    // "train" reuses the training images; any other split draws a disjoint stream.
    std::uint64_t seed = derive_seeds(cfg.seed).data;
    if (split != "train") {
      for (unsigned char ch : split) seed = (seed ^ ch) * 0x100000001b3ULL;  // FNV-1a step per character
    }
    samples = data::synth_dataset(seed, cfg.data.synth_count, size, cfg.data.classes);
  } else {
    const auto ds = data::load_yolo_dataset(cfg.data.root, data::parse_split(split));
    for (std::size_t i = 0; i < ds.size(); ++i) samples.push_back(ds.get(i));
  }
  for (auto& s : samples) {
    if (s.image.cols != size || s.image.rows != size) s = data::letterbox_sample(s, size);
    for (const auto& b : s.boxes) {
      if (b.class_id >= cfg.model.num_classes)
        throw ConfigError("sample " + s.image_id + " has class " + std::to_string(b.class_id) + " >= num_classes");
    }
  }
  return samples;
}

torch::Tensor to_tensor(const std::vector<data::Sample>& samples) {
  if (samples.empty()) throw ConfigError("to_tensor: no samples");
  const int h = samples.front().image.rows, w = samples.front().image.cols;
  auto out = torch::empty({static_cast<std::int64_t>(samples.size()), 3, h, w});
  auto acc = out.accessor<float, 4>();
  for (std::size_t b = 0; b < samples.size(); ++b) {
    const auto& img = samples[b].image;
    if (img.rows != h || img.cols != w || img.type() != CV_8UC3) throw ConfigError("to_tensor: inconsistent images");
    for (int y = 0; y < h; ++y) {
      const auto* row = img.ptr<cv::Vec3b>(y);
      for (int x = 0; x < w; ++x) {
        for (int c = 0; c < 3; ++c) acc[b][c][y][x] = row[x][2 - c] / 255.0f;  // BGR -> RGB
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------- training

namespace {

double lr_at(const TrainConfig& t, int step) {
  if (t.warmup_steps > 0 && step <= t.warmup_steps) return t.lr * step / t.warmup_steps;
  const double span = std::max(1, t.steps - t.warmup_steps);
  const double progress = std::clamp((step - t.warmup_steps) / span, 0.0, 1.0);
  const double floor = t.final_lr_fraction;
  return t.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(M_PI * progress)));
}

std::unique_ptr<torch::optim::Optimizer> make_optimizer(const TrainConfig& t, detector::DetectorImpl& model) {
  // Weight decay on conv weights only; biases and BN affine parameters are exempt.
  std::vector<torch::Tensor> decay, no_decay;
  for (const auto& p : model.named_parameters()) {
    (p.value().dim() > 1 ? decay : no_decay).push_back(p.value());
  }
  if (t.optimizer == "adamw") {
    std::vector<torch::optim::OptimizerParamGroup> groups;
    groups.emplace_back(decay, std::make_unique<torch::optim::AdamWOptions>(
                                   torch::optim::AdamWOptions(t.lr).weight_decay(t.weight_decay)));
    groups.emplace_back(no_decay,
                        std::make_unique<torch::optim::AdamWOptions>(torch::optim::AdamWOptions(t.lr).weight_decay(0)));
    return std::make_unique<torch::optim::AdamW>(std::move(groups));
  }
  std::vector<torch::optim::OptimizerParamGroup> groups;
  groups.emplace_back(decay, std::make_unique<torch::optim::SGDOptions>(
                                 torch::optim::SGDOptions(t.lr).momentum(t.momentum).nesterov(true).weight_decay(
                                     t.weight_decay)));
  groups.emplace_back(no_decay, std::make_unique<torch::optim::SGDOptions>(
                                    torch::optim::SGDOptions(t.lr).momentum(t.momentum).nesterov(true)));
  return std::make_unique<torch::optim::SGD>(std::move(groups), torch::optim::SGDOptions(t.lr));
}

void set_lr(torch::optim::Optimizer& opt, double lr) {
  for (auto& group : opt.param_groups()) group.options().set_lr(lr);
}

}  // namespace

TrainResult train(const RunConfig& cfg, const std::vector<data::Sample>& samples, const StepCallback& on_step) {
  if (samples.empty()) throw ConfigError("train: no samples");
  set_deterministic();
  const Seeds seeds = derive_seeds(cfg.seed);
  torch::manual_seed(seeds.init);

  TrainResult result;
  result.model = detector::Detector(cfg.model);
  auto& model = *result.model;
  model.train();
  auto optimizer = make_optimizer(cfg.train, model);

  std::mt19937_64 order_rng(seeds.data);
  std::mt19937_64 augment_rng(seeds.augment);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.train.batch_size), samples.size());

  for (int step = 1; step <= cfg.train.steps; ++step) {
    std::vector<data::Sample> batch_samples;
    while (batch_samples.size() < batch) {
      if (cursor >= order.size()) {
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      const auto& s = samples[order[cursor++]];
      const bool flip = cfg.train.hflip && std::bernoulli_distribution(0.5)(augment_rng);
      batch_samples.push_back(flip ? data::hflip(s) : s);
    }
    std::vector<std::vector<GroundTruthBox>> targets;
    for (const auto& s : batch_samples) targets.push_back(s.boxes);

    const double lr = lr_at(cfg.train, step);
    set_lr(*optimizer, lr);
    optimizer->zero_grad();
    const auto raw = model.forward(to_tensor(batch_samples));
    const auto loss = detector::compute_loss(raw, targets);
    const double total = loss.total.item<double>();
    if (!std::isfinite(total)) throw NumericError("training diverged at step " + std::to_string(step));
    loss.total.backward();
    if (cfg.train.grad_clip > 0) torch::nn::utils::clip_grad_norm_(model.parameters(), cfg.train.grad_clip);
    optimizer->step();

    LossRecord rec{step, total, loss.cls.item<double>(), loss.box.item<double>(), lr};
    result.log.push_back(rec);
    if (on_step) on_step(rec, model);
  }
  model.eval();
  return result;
}

EvalResult evaluate_model(detector::DetectorImpl& model, const std::vector<data::Sample>& samples,
                          const EvalConfig& cfg) {
  torch::NoGradGuard no_grad;
  const bool was_training = model.is_training();
  model.eval();
  EvalResult result;
  std::vector<GroundTruthBox> gts;
  std::vector<std::string> ids;
  const detector::DecodeOptions decode{cfg.decode_conf, cfg.nms_iou, static_cast<std::size_t>(cfg.max_det)};
  constexpr std::size_t kChunk = 16;
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    const std::vector<data::Sample> chunk(samples.begin() + static_cast<std::ptrdiff_t>(start),
                                          samples.begin() + static_cast<std::ptrdiff_t>(std::min(samples.size(), start + kChunk)));
    std::vector<std::string> chunk_ids;
    for (const auto& s : chunk) {
      chunk_ids.push_back(s.image_id);
      ids.push_back(s.image_id);
      gts.insert(gts.end(), s.boxes.begin(), s.boxes.end());
    }
    const auto per_image = detector::decode_predictions(model.forward(to_tensor(chunk)), decode, chunk_ids);
    for (const auto& dets : per_image) result.detections.insert(result.detections.end(), dets.begin(), dets.end());
  }
  metrics::EvalOptions options;
  options.conf_thresh = cfg.conf_thresh;
  options.interpolation = metrics::parse_interpolation(cfg.interpolation);
  result.report = metrics::evaluate(result.detections, gts, ids, options);
  if (was_training) model.train();
  return result;
}

}  // namespace epanet::pipeline
