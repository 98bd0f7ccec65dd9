#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "epanet/blocks.hpp"
#include "epanet/flops.hpp"
#include "epanet/pyramid.hpp"
#include "epanet/types.hpp"

namespace epanet::detector {

struct DetectorConfig {
  int num_classes = 1;
  std::int64_t input_size = 640;
  double width_scale = 0.25;
  double depth_scale = 0.33;
  std::int64_t max_channels = 1024;
  /// Unified channel width of every fusion node.
  std::int64_t neck_width = 64;
  /// Preset name or path to a topology file; ignored when topology_spec is set.
  std::string topology = "epa";
  std::optional<pyramid::FusionGraphSpec> topology_spec;
  /// plain turns every msc2f fusion node into c2f.
  blocks::BottleneckKind neck_bottleneck = blocks::BottleneckKind::msddsp;
  /// Bottleneck inside the backbone's C2f stages.
  blocks::BottleneckKind backbone_bottleneck = blocks::BottleneckKind::plain;
  std::vector<std::int64_t> strides{8, 16, 32};

  void validate() const;

  /// Desk-scale model for CPU experiments.
  static DetectorConfig nano(int num_classes, std::int64_t input_size = 64);
  /// Scale comparable to the "s" family of YOLO detectors.
  static DetectorConfig small(int num_classes, std::int64_t input_size = 640);
};

nlohmann::json to_json(const DetectorConfig& cfg);
DetectorConfig config_from_json(const nlohmann::json& j);

/// Topology with neck width and bottleneck choice applied.
pyramid::FusionGraphSpec resolve_topology(const DetectorConfig& cfg);

/// Backbone stage widths (stem, stage1..4) and C2f depths (stage1..4).
std::vector<std::int64_t> backbone_widths(const DetectorConfig& cfg);
std::vector<std::int64_t> backbone_depths(const DetectorConfig& cfg);

/// CSP-style backbone: stem CBS(s2) then four stages of CBS(s2) + C2f.
/// Returns C3 (S/8), C4 (S/16), C5 (S/32).
class BackboneImpl : public torch::nn::Module {
 public:
  explicit BackboneImpl(const DetectorConfig& cfg);
  std::map<int, torch::Tensor> forward(const torch::Tensor& image);
  std::map<int, std::int64_t> level_widths() const;

  blocks::Cbs stem{nullptr};
  torch::nn::ModuleList stages{nullptr};

 private:
  std::vector<std::int64_t> widths_;
};
TORCH_MODULE(Backbone);

/// Raw head output. Each level tensor is (B, 4 + num_classes, H, W): channels
/// 0..3 are left/top/right/bottom distance logits, the rest class logits.
struct RawPredictions {
  std::vector<torch::Tensor> levels;
  std::vector<std::int64_t> strides;
  int num_classes = 0;
  std::int64_t input_size = 0;

  std::int64_t batch() const { return levels.empty() ? 0 : levels.front().size(0); }
  std::int64_t total_cells() const;
};

/// Decoupled anchor-free head: per level, a box branch and a class branch,
/// each two 3x3 CBS followed by a 1x1 conv.
class HeadImpl : public torch::nn::Module {
 public:
  HeadImpl(int num_classes, const std::vector<std::int64_t>& in_widths);
  std::vector<torch::Tensor> forward(const std::vector<torch::Tensor>& features);

  /// Sets the class-logit biases to log(p / (1 - p)).
  void init_class_prior(double p);

  torch::nn::ModuleList box_branches{nullptr};
  torch::nn::ModuleList cls_branches{nullptr};

 private:
  int num_classes_;
};
TORCH_MODULE(Head);

class DetectorImpl : public torch::nn::Module {
 public:
  explicit DetectorImpl(DetectorConfig cfg);

  RawPredictions forward(const torch::Tensor& images);

  struct Features {
    std::map<int, torch::Tensor> backbone;
    std::map<std::string, torch::Tensor> neck;  // every fusion node
    RawPredictions raw;
  };
  Features forward_features(const torch::Tensor& images);

  const DetectorConfig& config() const { return cfg_; }

  /// Model summary: per-module params, fusion order and notes such as
  /// dropped C2f residuals.
  std::string summary() const;

  Backbone backbone{nullptr};
  pyramid::FusionGraph neck{nullptr};
  Head head{nullptr};

 private:
  DetectorConfig cfg_;
};
TORCH_MODULE(Detector);

/// Backbone-only forward with the input-size checks.
std::map<int, torch::Tensor> backbone_forward(BackboneImpl& backbone, const torch::Tensor& image);
RawPredictions head_forward(HeadImpl& head, const std::vector<torch::Tensor>& features, const DetectorConfig& cfg);

// --- box coding -----------------------------------------------------------------

/// Distance logits -> pixel distances: softplus(raw) * stride.
double decode_distance(double raw, double stride);
/// Inverse of decode_distance; distances below 1e-3 * stride are clamped.
double encode_distance(double distance, double stride);
/// Box from a cell centre and l/t/r/b logits.
Box decode_box(double cx, double cy, const double raw[4], double stride);
void encode_box(const Box& box, double cx, double cy, double stride, double raw_out[4]);

struct DecodeOptions {
  double conf_thresh = 0.25;
  double nms_iou = 0.6;
  std::size_t max_det = 300;
};

/// Per-image detections sorted by descending score. Cells whose best class
/// probability reaches conf_thresh become boxes; class-wise greedy NMS
/// suppresses overlaps with IoU > nms_iou.
std::vector<std::vector<Detection>> decode_predictions(const RawPredictions& raw, const DecodeOptions& options,
                                                       const std::vector<std::string>& image_ids = {});

/// Greedy class-wise NMS over one image's candidates.
std::vector<Detection> class_wise_nms(std::vector<Detection> candidates, double nms_iou, std::size_t max_det);

// --- loss -------------------------------------------------------------------------

struct LossConfig {
  double box_weight = 7.5;
  /// A box is assigned to the level whose stride * ratio is closest (log scale)
  /// to sqrt(w * h).
  double size_to_stride = 4.0;
};

struct LossComponents {
  torch::Tensor cls;           // BCE over every cell / max(1, positives)
  torch::Tensor box;           // mean (1 - IoU) over positives
  torch::Tensor total;         // cls + box_weight * box
  torch::Tensor cls_positive;  // BCE restricted to positive cells / max(1, positives)
  std::int64_t num_positive = 0;
};

struct CellAssignment {
  std::size_t level = 0;
  std::int64_t row = 0;
  std::int64_t col = 0;
  std::size_t target = 0;  // index into the image's target list
};

/// Centre-in-cell assignment at the best-matching level. Degenerate boxes
/// are skipped with a warning; on a cell collision the smaller box wins.
std::vector<CellAssignment> assign_targets(const RawPredictions& raw, const std::vector<GroundTruthBox>& targets,
                                           const LossConfig& cfg);

/// `targets[b]` are the boxes of batch image b, in network pixels.
LossComponents compute_loss(const RawPredictions& raw, const std::vector<std::vector<GroundTruthBox>>& targets,
                            const LossConfig& cfg = {});

// --- profiling ----------------------------------------------------------------------

struct ProfileOptions {
  std::int64_t input_size = 640;
  int warmup = 5;
  int timed_runs = 50;
  bool measure_latency = true;
};

struct ModuleCost {
  std::string name;
  std::int64_t params = 0;
  std::int64_t flops = 0;
};

struct ProfileReport {
  std::int64_t params = 0;
  std::int64_t flops = 0;
  double latency_ms = 0.0;  // NaN when not measured
  std::vector<ModuleCost> modules;  // top level; sums to params / flops
  std::vector<ModuleCost> details;  // finer breakdown (stages, fusion edges and nodes, head levels)
  std::vector<flops::LayerRecord> layers;
};

/// Params by exact count, FLOPs from per-layer closed forms at batch 1,
/// latency as the median of timed forwards after warmup.
ProfileReport profile_model(DetectorImpl& model, const ProfileOptions& options = {});

/// Same for a fusion graph alone, fed with random backbone-shaped features.
ProfileReport profile_graph(pyramid::FusionGraphImpl& graph, const std::map<int, std::int64_t>& backbone_widths,
                            const ProfileOptions& options = {});

// --- checkpoints ----------------------------------------------------------------------

struct Checkpoint {
  DetectorConfig config;
  nlohmann::json run_config;
  std::int64_t step = 0;
  Detector model{nullptr};
};

/// Single-file archive with the model config (topology included), the run
/// config, the step counter and every parameter and buffer.
void save_checkpoint(const std::string& path, DetectorImpl& model, const nlohmann::json& run_config,
                     std::int64_t step);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace epanet::detector
