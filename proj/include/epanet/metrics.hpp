#pragma once

#include <cstddef>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "epanet/types.hpp"

// Detection metrics: IoU, greedy matching, interpolated AP, mAP over IoU
// thresholds 0.50:0.05:0.95, and precision / recall / F1 at one confidence.

namespace epanet::metrics {

/// Intersection over union of two corner boxes; throws std::invalid_argument
/// if either box has zero or negative extent.
double iou(const Box& a, const Box& b);

/// Greedy matching within one image. Detections are visited by descending
/// score (stable); each takes the unmatched same-class ground truth with the
/// highest IoU >= iou_thresh. Returns TP flags aligned with `dets`.
std::vector<bool> match_detections(const std::vector<Detection>& dets, const std::vector<GroundTruthBox>& gts,
                                   double iou_thresh);

enum class Interpolation { coco101, all_points, voc11 };

Interpolation parse_interpolation(std::string_view name);
std::string_view to_string(Interpolation mode);

struct ApValue {
  double value = 0.0;
  bool defined = true;  // false only for n_gt == 0 without detections (value 1.0)
};

/// AP from TP/FP flags ordered by descending score.
ApValue average_precision(const std::vector<bool>& tp_by_score, std::size_t n_gt,
                          Interpolation mode = Interpolation::coco101);

/// {0.50, 0.55, ..., 0.95}.
const std::vector<double>& iou_thresholds();

struct EvalOptions {
  double conf_thresh = 0.25;  // for precision / recall / F1
  double pr_iou = 0.5;
  Interpolation interpolation = Interpolation::coco101;
};

struct EvalReport {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::map<double, double> ap_per_iou;  // keyed by iou_thresholds()
  double map50 = 0.0;
  double map50_95 = 0.0;
  std::map<int, double> ap50_per_class;
  std::vector<int> undefined_classes;  // classes with no GT and no detections at some threshold
  std::size_t num_images = 0;
  std::size_t num_ground_truth = 0;
  std::size_t num_detections = 0;
  Interpolation interpolation = Interpolation::coco101;
  double conf_thresh = 0.25;
};

/// Joint evaluation over every image. `image_ids` lists all evaluated images
/// (background images included); when empty it is taken from `gts`.
/// Throws std::invalid_argument when a detection names an unknown image.
EvalReport evaluate(const std::vector<Detection>& dets, const std::vector<GroundTruthBox>& gts,
                    const std::vector<std::string>& image_ids = {}, const EvalOptions& options = {});

std::string format_report(const EvalReport& report);
nlohmann::json to_json(const EvalReport& report);

/// COCO-results-style records, one JSON object per line:
/// {"image_id", "category_id", "score", "bbox": [x, y, w, h]}.
void write_detections_jsonl(std::ostream& out, const std::vector<Detection>& dets);
std::vector<Detection> read_detections_jsonl(std::istream& in);

}  // namespace epanet::metrics
