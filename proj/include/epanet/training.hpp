#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "epanet/data.hpp"
#include "epanet/detector.hpp"
#include "epanet/metrics.hpp"

// Run configuration, training loop and evaluation over samples.

namespace epanet::pipeline {

struct DataConfig {
  std::string source = "synthetic";  // synthetic | yolo
  std::string root;                  // yolo dataset root
  std::string split = "train";
  std::string eval_split = "train";  // synthetic "val" draws a disjoint seed stream
  int synth_count = 16;
  int classes = 3;
};

struct TrainConfig {
  int steps = 500;
  int batch_size = 16;
  std::string optimizer = "sgd";  // sgd | adamw
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int warmup_steps = 20;
  double final_lr_fraction = 0.1;  // cosine decay target
  double grad_clip = 10.0;
  bool hflip = false;
  int checkpoint_every = 0;  // 0: only the final checkpoint
};

struct EvalConfig {
  double decode_conf = 0.001;  // candidate threshold for AP
  double conf_thresh = 0.25;   // precision / recall / F1
  double nms_iou = 0.6;
  int max_det = 300;
  std::string interpolation = "coco101";
  std::string checkpoint;  // eval / viz input
};

struct RunConfig {
  int version = 1;
  std::uint64_t seed = 0;
  detector::DetectorConfig model = detector::DetectorConfig::nano(3, 64);
  DataConfig data;
  TrainConfig train;
  EvalConfig eval;
};

nlohmann::json to_json(const RunConfig& cfg);
/// Strict parse: unknown keys and a missing or unsupported "version" are ConfigErrors.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

/// Applies "a.b.c=value" to a config document. The key must already exist;
/// the value is parsed as JSON when possible, else taken as a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Independent streams derived from one top-level seed.
struct Seeds {
  std::uint64_t data = 0;
  std::uint64_t init = 0;
  std::uint64_t augment = 0;
};
Seeds derive_seeds(std::uint64_t seed);

/// Makes torch single-threaded and deterministic.
void set_deterministic();

/// Samples for a split, letterboxed to the model input size.
std::vector<data::Sample> load_samples(const RunConfig& cfg, bool eval_split);

/// B x 3 x S x S float tensor in [0, 1], RGB order.
torch::Tensor to_tensor(const std::vector<data::Sample>& samples);

struct LossRecord {
  int step = 0;
  double total = 0.0;
  double cls = 0.0;
  double box = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  detector::Detector model{nullptr};
  std::vector<LossRecord> log;
};

using StepCallback = std::function<void(const LossRecord&, detector::DetectorImpl&)>;

/// Trains a freshly initialized model on `samples`.
TrainResult train(const RunConfig& cfg, const std::vector<data::Sample>& samples, const StepCallback& on_step = {});

struct EvalResult {
  metrics::EvalReport report;
  std::vector<Detection> detections;
};

EvalResult evaluate_model(detector::DetectorImpl& model, const std::vector<data::Sample>& samples,
                          const EvalConfig& cfg);

}  // namespace epanet::pipeline
