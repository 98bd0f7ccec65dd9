#pragma once

#include <string>

namespace epanet {

/// Axis-aligned box in pixel corner coordinates.
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() > 0.0 && height() > 0.0 ? width() * height() : 0.0; }
  bool valid() const { return x2 > x1 && y2 > y1; }

  friend bool operator==(const Box&, const Box&) = default;
};

struct GroundTruthBox {
  int class_id = 0;
  Box box;
  std::string image_id;
};

struct Detection {
  std::string image_id;
  int class_id = 0;
  double score = 0.0;
  Box box;
};

}  // namespace epanet
