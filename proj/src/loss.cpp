#include <algorithm>
#include <cmath>
#include <limits>

#include "epanet/detector.hpp"
#include "epanet/errors.hpp"

namespace epanet::detector {

namespace {

using torch::indexing::Slice;

std::size_t best_level(const RawPredictions& raw, const Box& box, double size_to_stride) {
  const double size = std::sqrt(box.width() * box.height());
  std::size_t best = 0;
  double best_gap = std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l < raw.strides.size(); ++l) {
    const double gap = std::abs(std::log2(size / (static_cast<double>(raw.strides[l]) * size_to_stride)));
    if (gap < best_gap) {
      best_gap = gap;
      best = l;
    }
  }
  return best;
}

}  // namespace

std::vector<CellAssignment> assign_targets(const RawPredictions& raw, const std::vector<GroundTruthBox>& targets,
                                           const LossConfig& cfg) {
  std::vector<CellAssignment> cells;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const Box& box = targets[t].box;
    if (!box.valid()) {
      warn("loss: skipped degenerate target box in image '" + targets[t].image_id + "'");
      continue;
    }
    const std::size_t level = best_level(raw, box, cfg.size_to_stride);
    const double stride = static_cast<double>(raw.strides[level]);
    const std::int64_t h = raw.levels[level].size(2);
    const std::int64_t w = raw.levels[level].size(3);
    const auto col = std::clamp<std::int64_t>(
        static_cast<std::int64_t>(std::floor((box.x1 + box.x2) * 0.5 / stride)), 0, w - 1);
    const auto row = std::clamp<std::int64_t>(
        static_cast<std::int64_t>(std::floor((box.y1 + box.y2) * 0.5 / stride)), 0, h - 1);

    auto clash = std::find_if(cells.begin(), cells.end(), [&](const CellAssignment& c) {
      return c.level == level && c.row == row && c.col == col;
    });
    if (clash == cells.end()) {
      cells.push_back({level, row, col, t});
    } else if (box.area() < targets[clash->target].box.area()) {
      clash->target = t;  // the smaller box keeps the cell
    }
  }
  std::sort(cells.begin(), cells.end(), [](const CellAssignment& a, const CellAssignment& b) {
    return std::tie(a.level, a.row, a.col) < std::tie(b.level, b.row, b.col);
  });
  return cells;
}

LossComponents compute_loss(const RawPredictions& raw, const std::vector<std::vector<GroundTruthBox>>& targets,
                            const LossConfig& cfg) {
  const std::int64_t batch = raw.batch();
  if (static_cast<std::int64_t>(targets.size()) != batch) {
    throw ConfigError("compute_loss: " + std::to_string(targets.size()) + " target lists for batch " +
                      std::to_string(batch));
  }
  const auto options = raw.levels.front().options();
  const int nc = raw.num_classes;

  // Positive cells grouped per level.
  struct LevelTargets {
    std::vector<std::int64_t> b, row, col, cls;
    std::vector<double> boxes;  // x1 y1 x2 y2 per positive
  };
  std::vector<LevelTargets> per_level(raw.levels.size());
  std::int64_t num_positive = 0;
  for (std::int64_t b = 0; b < batch; ++b) {
    const auto& image_targets = targets[static_cast<std::size_t>(b)];
    for (const auto& a : assign_targets(raw, image_targets, cfg)) {
      const auto& gt = image_targets[a.target];
      if (gt.class_id < 0 || gt.class_id >= nc) {
        throw ConfigError("compute_loss: class id " + std::to_string(gt.class_id) + " out of range");
      }
      auto& lt = per_level[a.level];
      lt.b.push_back(b);
      lt.row.push_back(a.row);
      lt.col.push_back(a.col);
      lt.cls.push_back(gt.class_id);
      lt.boxes.insert(lt.boxes.end(), {gt.box.x1, gt.box.y1, gt.box.x2, gt.box.y2});
      ++num_positive;
    }
  }

  auto cls_sum = torch::zeros({}, options);
  auto cls_pos_sum = torch::zeros({}, options);
  std::vector<torch::Tensor> ious;
  for (std::size_t l = 0; l < raw.levels.size(); ++l) {
    const auto& level = raw.levels[l];
    const auto logits = level.index({Slice(), Slice(4, torch::indexing::None)});
    auto target = torch::zeros_like(logits);
    const auto& lt = per_level[l];
    if (!lt.b.empty()) {
      const auto idx_opts = torch::TensorOptions().dtype(torch::kLong);
      const auto bi = torch::tensor(lt.b, idx_opts);
      const auto ri = torch::tensor(lt.row, idx_opts);
      const auto ci = torch::tensor(lt.col, idx_opts);
      const auto ki = torch::tensor(lt.cls, idx_opts);
      target.index_put_({bi, ki, ri, ci}, 1.0);

      // (n, C) predictions at positive cells.
      const auto cells = level.permute({0, 2, 3, 1}).index({bi, ri, ci});
      const auto cell_logits = cells.index({Slice(), Slice(4, torch::indexing::None)});
      const auto cell_target = target.permute({0, 2, 3, 1}).index({bi, ri, ci});
      cls_pos_sum = cls_pos_sum + torch::binary_cross_entropy_with_logits(
                                      cell_logits, cell_target, {}, {}, at::Reduction::Sum);

      const double stride = static_cast<double>(raw.strides[l]);
      const auto dist = torch::softplus(cells.index({Slice(), Slice(0, 4)})) * stride;
      const auto cx = (ci.to(options.dtype()) + 0.5) * stride;
      const auto cy = (ri.to(options.dtype()) + 0.5) * stride;
      const auto px1 = cx - dist.select(1, 0);
      const auto py1 = cy - dist.select(1, 1);
      const auto px2 = cx + dist.select(1, 2);
      const auto py2 = cy + dist.select(1, 3);
      const auto gt = torch::tensor(lt.boxes, torch::TensorOptions().dtype(torch::kDouble))
                          .to(options.dtype())
                          .view({-1, 4});
      const auto gx1 = gt.select(1, 0), gy1 = gt.select(1, 1), gx2 = gt.select(1, 2), gy2 = gt.select(1, 3);
      const auto iw = (torch::minimum(px2, gx2) - torch::maximum(px1, gx1)).clamp_min(0.0);
      const auto ih = (torch::minimum(py2, gy2) - torch::maximum(py1, gy1)).clamp_min(0.0);
      const auto inter = iw * ih;
      const auto uni = (px2 - px1) * (py2 - py1) + (gx2 - gx1) * (gy2 - gy1) - inter;
      ious.push_back(inter / (uni + 1e-9));
    }
    cls_sum = cls_sum + torch::binary_cross_entropy_with_logits(logits, target, {}, {}, at::Reduction::Sum);
  }

  const double norm = static_cast<double>(std::max<std::int64_t>(1, num_positive));
  LossComponents out;
  out.num_positive = num_positive;
  out.cls = cls_sum / norm;
  out.cls_positive = cls_pos_sum / norm;
  out.box = ious.empty() ? torch::zeros({}, options) : (1.0 - torch::cat(ious)).mean();
  out.total = out.cls + cfg.box_weight * out.box;
  return out;
}

}  // namespace epanet::detector
