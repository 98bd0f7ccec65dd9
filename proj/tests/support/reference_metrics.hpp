#pragma once

// Brute-force reference implementations of the detection metrics, written
// straight from the definitions and sharing no code with src/metrics.cpp.
// Used as comparison targets by the unit tests and the acceptance run.

#include <algorithm>
#include <cstddef>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "epanet/types.hpp"

namespace reference {

inline double overlap_1d(double a0, double a1, double b0, double b1) {
  const double lo = a0 > b0 ? a0 : b0;
  const double hi = a1 < b1 ? a1 : b1;
  return hi > lo ? hi - lo : 0.0;
}

inline double iou(const epanet::Box& a, const epanet::Box& b) {
  const double inter = overlap_1d(a.x1, a.x2, b.x1, b.x2) * overlap_1d(a.y1, a.y2, b.y1, b.y2);
  const double area_a = (a.x2 - a.x1) * (a.y2 - a.y1);
  const double area_b = (b.x2 - b.x1) * (b.y2 - b.y1);
  return inter / (area_a + area_b - inter);
}

/// Detection indices by descending score via repeated selection of the
/// highest remaining score (lowest index on ties).
inline std::vector<std::size_t> selection_order(const std::vector<double>& scores) {
  std::vector<std::size_t> order;
  std::vector<bool> used(scores.size(), false);
  for (std::size_t k = 0; k < scores.size(); ++k) {
    std::size_t best = scores.size();
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (used[i]) continue;
      if (best == scores.size() || scores[i] > scores[best]) best = i;
    }
    used[best] = true;
    order.push_back(best);
  }
  return order;
}

/// Full IoU matrix first, then each detection (by score) claims the best
/// unclaimed same-class ground truth reaching the threshold.
inline std::vector<bool> match(const std::vector<epanet::Detection>& dets,
                               const std::vector<epanet::GroundTruthBox>& gts, double thr) {
  std::vector<std::vector<double>> m(dets.size(), std::vector<double>(gts.size(), -1.0));
  for (std::size_t d = 0; d < dets.size(); ++d)
    for (std::size_t g = 0; g < gts.size(); ++g)
      if (dets[d].class_id == gts[g].class_id) m[d][g] = iou(dets[d].box, gts[g].box);
  std::vector<double> scores;
  for (const auto& d : dets) scores.push_back(d.score);
  std::vector<bool> tp(dets.size(), false), claimed(gts.size(), false);
  for (std::size_t d : selection_order(scores)) {
    int pick = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (claimed[g] || m[d][g] < thr) continue;
      if (pick < 0 || m[d][g] > m[d][static_cast<std::size_t>(pick)]) pick = static_cast<int>(g);
    }
    if (pick >= 0) {
      claimed[static_cast<std::size_t>(pick)] = true;
      tp[d] = true;
    }
  }
  return tp;
}

/// Literal 101-point interpolated AP: mean over r in {0, 0.01, ..., 1} of the
/// maximum precision at any rank whose recall reaches r (0 if none).
inline double ap101(const std::vector<bool>& flags, std::size_t n_gt) {
  if (n_gt == 0) return flags.empty() ? 1.0 : 0.0;
  std::vector<double> precision, recall;
  double tp = 0, fp = 0;
  for (bool f : flags) {
    if (f) tp += 1; else fp += 1;
    precision.push_back(tp / (tp + fp));
    recall.push_back(tp / static_cast<double>(n_gt));
  }
  double total = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    double best = 0.0;
    for (std::size_t i = 0; i < flags.size(); ++i)
      if (recall[i] >= r && precision[i] > best) best = precision[i];
    total += best;
  }
  return total / 101.0;
}

struct Report {
  double precision = 0, recall = 0, f1 = 0, map50 = 0, map50_95 = 0;
  std::map<int, double> ap_by_threshold_index;
};

/// Composition of the references above over a multi-image instance.
inline Report evaluate(const std::vector<epanet::Detection>& dets, const std::vector<epanet::GroundTruthBox>& gts,
                       const std::vector<std::string>& images, double conf) {
  Report rep;
  std::set<int> classes;
  for (const auto& d : dets) classes.insert(d.class_id);
  for (const auto& g : gts) classes.insert(g.class_id);

  auto per_image_flags = [&](double thr, double min_score) {
    std::vector<int> flags(dets.size(), -1);
    for (const auto& img : images) {
      std::vector<epanet::Detection> local;
      std::vector<std::size_t> where;
      std::vector<epanet::GroundTruthBox> local_gt;
      for (std::size_t i = 0; i < dets.size(); ++i)
        if (dets[i].image_id == img && dets[i].score >= min_score) {
          local.push_back(dets[i]);
          where.push_back(i);
        }
      for (const auto& g : gts)
        if (g.image_id == img) local_gt.push_back(g);
      const auto tp = match(local, local_gt, thr);
      for (std::size_t k = 0; k < local.size(); ++k) flags[where[k]] = tp[k] ? 1 : 0;
    }
    return flags;
  };

  std::vector<double> scores;
  for (const auto& d : dets) scores.push_back(d.score);
  const auto order = selection_order(scores);
  double sum_all = 0.0;
  for (int t = 0; t < 10; ++t) {
    const double thr = 0.5 + 0.05 * t;
    const auto flags = per_image_flags(thr, -1.0);
    double sum = 0.0;
    int counted = 0;
    for (int c : classes) {
      std::vector<bool> ordered;
      for (auto i : order)
        if (dets[i].class_id == c) ordered.push_back(flags[i] == 1);
      std::size_t n_gt = 0;
      for (const auto& g : gts) n_gt += g.class_id == c ? 1 : 0;
      if (n_gt == 0 && ordered.empty()) continue;
      sum += ap101(ordered, n_gt);
      ++counted;
    }
    const double ap = counted > 0 ? sum / counted : 1.0;
    rep.ap_by_threshold_index[t] = ap;
    if (t == 0) rep.map50 = ap;
    sum_all += ap;
  }
  rep.map50_95 = sum_all / 10.0;

  const auto flags = per_image_flags(0.5, conf);
  double kept = 0, tp = 0;
  for (int f : flags) {
    if (f < 0) continue;
    kept += 1;
    tp += f;
  }
  rep.precision = kept > 0 ? tp / kept : 0.0;
  rep.recall = gts.empty() ? 0.0 : tp / static_cast<double>(gts.size());
  rep.f1 = rep.precision + rep.recall > 0 ? 2 * rep.precision * rep.recall / (rep.precision + rep.recall) : 0.0;
  return rep;
}

/// Random instance: boxes on a 100 x 100 canvas, detections jittered from
/// ground truth or placed at random, continuous scores.
struct Instance {
  std::vector<epanet::Detection> dets;
  std::vector<epanet::GroundTruthBox> gts;
  std::vector<std::string> images;
};

inline epanet::Box random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pos(0.0, 80.0), size(4.0, 30.0);
  const double x = pos(rng), y = pos(rng);
  return {x, y, x + size(rng), y + size(rng)};
}

inline Instance random_instance(std::mt19937_64& rng, int images, int max_gt, int max_det, int classes) {
  Instance inst;
  std::uniform_int_distribution<int> n_gt(0, max_gt), n_det(0, max_det), cls(0, classes - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0), jitter(-4.0, 4.0);
  for (int i = 0; i < images; ++i) {
    const std::string id = "img" + std::to_string(i);
    inst.images.push_back(id);
    std::vector<epanet::GroundTruthBox> local;
    const int g = n_gt(rng);
    for (int k = 0; k < g; ++k) local.push_back({cls(rng), random_box(rng), id});
    const int d = n_det(rng);
    for (int k = 0; k < d; ++k) {
      epanet::Detection det;
      det.image_id = id;
      det.score = unit(rng);
      if (!local.empty() && unit(rng) < 0.7) {
        const auto& src = local[static_cast<std::size_t>(k) % local.size()];
        det.class_id = unit(rng) < 0.85 ? src.class_id : cls(rng);
        const double x1 = src.box.x1 + jitter(rng), y1 = src.box.y1 + jitter(rng);
        det.box = {x1, y1, std::max(x1 + 1.0, src.box.x2 + jitter(rng)), std::max(y1 + 1.0, src.box.y2 + jitter(rng))};
      } else {
        det.class_id = cls(rng);
        det.box = random_box(rng);
      }
      inst.dets.push_back(det);
    }
    inst.gts.insert(inst.gts.end(), local.begin(), local.end());
  }
  return inst;
}

}  // namespace reference
