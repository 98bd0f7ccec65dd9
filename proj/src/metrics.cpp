#include "epanet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace epanet::metrics {

double iou(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument("iou: degenerate box");
  const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = ix * iy;
  if (inter <= 0.0) return 0.0;
  return inter / (a.area() + b.area() - inter);
}

namespace {

std::vector<std::size_t> order_by_score(const std::vector<Detection>& dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  return order;
}

}  // namespace

std::vector<bool> match_detections(const std::vector<Detection>& dets, const std::vector<GroundTruthBox>& gts,
                                   double iou_thresh) {
  std::vector<bool> tp(dets.size(), false);
  std::vector<bool> taken(gts.size(), false);
  for (std::size_t d : order_by_score(dets)) {
    double best = iou_thresh;
    std::ptrdiff_t best_gt = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g] || gts[g].class_id != dets[d].class_id) continue;
      const double overlap = iou(dets[d].box, gts[g].box);
      if (overlap >= best && (best_gt < 0 || overlap > best)) {
        best = overlap;
        best_gt = static_cast<std::ptrdiff_t>(g);
      }
    }
    if (best_gt >= 0) {
      taken[static_cast<std::size_t>(best_gt)] = true;
      tp[d] = true;
    }
  }
  return tp;
}

Interpolation parse_interpolation(std::string_view name) {
  if (name == "coco101") return Interpolation::coco101;
  if (name == "all_points") return Interpolation::all_points;
  if (name == "voc11") return Interpolation::voc11;
  throw std::invalid_argument("unknown interpolation '" + std::string(name) + "' (coco101, all_points, voc11)");
}

std::string_view to_string(Interpolation mode) {
  switch (mode) {
    case Interpolation::coco101: return "coco101";
    case Interpolation::all_points: return "all_points";
    case Interpolation::voc11: return "voc11";
  }
  return "?";
}

ApValue average_precision(const std::vector<bool>& tp_by_score, std::size_t n_gt, Interpolation mode) {
  if (n_gt == 0) return tp_by_score.empty() ? ApValue{1.0, false} : ApValue{0.0, true};
  const std::size_t n = tp_by_score.size();
  if (n == 0) return {0.0, true};

  std::vector<double> recall(n), precision(n);
  double tp = 0.0, fp = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    (tp_by_score[i] ? tp : fp) += 1.0;
    recall[i] = tp / static_cast<double>(n_gt);
    precision[i] = tp / (tp + fp);
  }
  // Precision envelope: running maximum from the right.
  for (std::size_t i = n - 1; i > 0; --i) precision[i - 1] = std::max(precision[i - 1], precision[i]);

  auto sampled = [&](int points) {
    double sum = 0.0;
    for (int k = 0; k < points; ++k) {
      const double r = static_cast<double>(k) / static_cast<double>(points - 1);
      auto it = std::lower_bound(recall.begin(), recall.end(), r);
      if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
    }
    return sum / points;
  };

  switch (mode) {
    case Interpolation::coco101:
      return {sampled(101), true};
    case Interpolation::voc11:
      return {sampled(11), true};
    case Interpolation::all_points: {
      double area = 0.0, prev_recall = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        area += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
      }
      return {area, true};
    }
  }
  return {0.0, true};
}

const std::vector<double>& iou_thresholds() {
  static const std::vector<double> thresholds = [] {
    std::vector<double> t;
    for (int k = 0; k < 10; ++k) t.push_back((50.0 + 5.0 * k) / 100.0);
    return t;
  }();
  return thresholds;
}

EvalReport evaluate(const std::vector<Detection>& dets, const std::vector<GroundTruthBox>& gts,
                    const std::vector<std::string>& image_ids, const EvalOptions& options) {
  EvalReport report;
  report.interpolation = options.interpolation;
  report.conf_thresh = options.conf_thresh;

  std::vector<std::string> images = image_ids;
  if (images.empty()) {
    std::unordered_set<std::string> seen;
    for (const auto& g : gts)
      if (seen.insert(g.image_id).second) images.push_back(g.image_id);
  }
  std::unordered_map<std::string, std::size_t> image_index;
  for (const auto& id : images) image_index.emplace(id, image_index.size());

  std::vector<std::vector<std::size_t>> dets_by_image(image_index.size()), gts_by_image(image_index.size());
  for (std::size_t i = 0; i < dets.size(); ++i) {
    auto it = image_index.find(dets[i].image_id);
    if (it == image_index.end()) throw std::invalid_argument("evaluate: detection for unknown image '" + dets[i].image_id + "'");
    dets_by_image[it->second].push_back(i);
  }
  for (std::size_t i = 0; i < gts.size(); ++i) {
    auto it = image_index.find(gts[i].image_id);
    if (it == image_index.end()) throw std::invalid_argument("evaluate: ground truth for unlisted image '" + gts[i].image_id + "'");
    gts_by_image[it->second].push_back(i);
  }

  std::set<int> classes;
  for (const auto& d : dets) classes.insert(d.class_id);
  for (const auto& g : gts) classes.insert(g.class_id);

  report.num_images = image_index.size();
  report.num_ground_truth = gts.size();
  report.num_detections = dets.size();

  // TP flags of every detection at one IoU threshold, matched per image.
  auto flags_at = [&](double thr, double min_score) {
    std::vector<int> flags(dets.size(), -1);  // -1: filtered out
    for (std::size_t img = 0; img < dets_by_image.size(); ++img) {
      std::vector<Detection> local;
      std::vector<std::size_t> local_index;
      for (auto i : dets_by_image[img]) {
        if (dets[i].score >= min_score) {
          local.push_back(dets[i]);
          local_index.push_back(i);
        }
      }
      std::vector<GroundTruthBox> local_gt;
      for (auto i : gts_by_image[img]) local_gt.push_back(gts[i]);
      const auto tp = match_detections(local, local_gt, thr);
      for (std::size_t k = 0; k < local.size(); ++k) flags[local_index[k]] = tp[k] ? 1 : 0;
    }
    return flags;
  };

  const auto global_order = order_by_score(dets);
  std::set<int> undefined;
  for (double thr : iou_thresholds()) {
    const auto flags = flags_at(thr, -std::numeric_limits<double>::infinity());
    double sum = 0.0;
    std::size_t counted = 0;
    for (int c : classes) {
      std::vector<bool> ordered;
      for (auto i : global_order)
        if (dets[i].class_id == c) ordered.push_back(flags[i] == 1);
      const auto n_gt = static_cast<std::size_t>(
          std::count_if(gts.begin(), gts.end(), [c](const GroundTruthBox& g) { return g.class_id == c; }));
      const ApValue ap = average_precision(ordered, n_gt, options.interpolation);
      if (!ap.defined) {
        undefined.insert(c);
        continue;
      }
      sum += ap.value;
      ++counted;
      if (thr == iou_thresholds().front()) report.ap50_per_class[c] = ap.value;
    }
    report.ap_per_iou[thr] = counted > 0 ? sum / static_cast<double>(counted) : 1.0;
  }
  report.undefined_classes.assign(undefined.begin(), undefined.end());
  report.map50 = report.ap_per_iou.at(iou_thresholds().front());
  double total = 0.0;
  for (const auto& [thr, ap] : report.ap_per_iou) total += ap;
  report.map50_95 = total / static_cast<double>(report.ap_per_iou.size());

  const auto pr_flags = flags_at(options.pr_iou, options.conf_thresh);
  std::size_t kept = 0, tp = 0;
  for (int f : pr_flags) {
    if (f < 0) continue;
    ++kept;
    tp += static_cast<std::size_t>(f);
  }
  report.precision = kept > 0 ? static_cast<double>(tp) / static_cast<double>(kept) : 0.0;
  report.recall = gts.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(gts.size());
  const double pr = report.precision + report.recall;
  report.f1 = pr > 0.0 ? 2.0 * report.precision * report.recall / pr : 0.0;
  return report;
}

namespace {

std::string threshold_key(double thr) {
  std::ostringstream key;
  key << std::fixed << std::setprecision(2) << thr;
  return key.str();
}

}  // namespace

std::string format_report(const EvalReport& r) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << "images " << r.num_images << "  ground truth " << r.num_ground_truth << "  detections " << r.num_detections
      << "\n";
  out << "P " << r.precision << "  R " << r.recall << "  F1 " << r.f1 << "  (conf >= " << r.conf_thresh
      << ", IoU 0.50)\n";
  out << "mAP50 " << r.map50 << "  mAP50-95 " << r.map50_95 << "  (" << to_string(r.interpolation) << ")\n";
  out << "AP by IoU:";
  for (const auto& [thr, ap] : r.ap_per_iou) out << "  " << threshold_key(thr) << "=" << ap;
  out << "\n";
  for (const auto& [c, ap] : r.ap50_per_class) out << "  class " << c << " AP50 " << ap << "\n";
  return out.str();
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["f1"] = r.f1;
  j["map50"] = r.map50;
  j["map50_95"] = r.map50_95;
  j["ap_per_iou"] = nlohmann::json::object();
  for (const auto& [thr, ap] : r.ap_per_iou) j["ap_per_iou"][threshold_key(thr)] = ap;
  j["ap50_per_class"] = nlohmann::json::object();
  for (const auto& [c, ap] : r.ap50_per_class) j["ap50_per_class"][std::to_string(c)] = ap;
  j["undefined_classes"] = r.undefined_classes;
  j["num_images"] = r.num_images;
  j["num_ground_truth"] = r.num_ground_truth;
  j["num_detections"] = r.num_detections;
  j["interpolation"] = to_string(r.interpolation);
  j["conf_thresh"] = r.conf_thresh;
  return j;
}

void write_detections_jsonl(std::ostream& out, const std::vector<Detection>& dets) {
  for (const auto& d : dets) {
    nlohmann::json j{{"image_id", d.image_id},
                     {"category_id", d.class_id},
                     {"score", d.score},
                     {"bbox", {d.box.x1, d.box.y1, d.box.width(), d.box.height()}}};
    out << j.dump() << '\n';
  }
}

std::vector<Detection> read_detections_jsonl(std::istream& in) {
  std::vector<Detection> dets;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    Detection d;
    d.image_id = j.at("image_id").get<std::string>();
    d.class_id = j.at("category_id").get<int>();
    d.score = j.at("score").get<double>();
    const auto& b = j.at("bbox");
    d.box = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(0).get<double>() + b.at(2).get<double>(),
             b.at(1).get<double>() + b.at(3).get<double>()};
    dets.push_back(std::move(d));
  }
  return dets;
}

}  // namespace epanet::metrics
