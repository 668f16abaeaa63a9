#pragma once

#include <algorithm>

namespace dtnet {

// Axis-aligned box, center/size form, pixel units.
struct Box {
  double cx = 0;
  double cy = 0;
  double w = 0;
  double h = 0;
};

inline double iou(const Box& a, const Box& b) {
  const double ax1 = a.cx - a.w / 2, ax2 = a.cx + a.w / 2;
  const double ay1 = a.cy - a.h / 2, ay2 = a.cy + a.h / 2;
  const double bx1 = b.cx - b.w / 2, bx2 = b.cx + b.w / 2;
  const double by1 = b.cy - b.h / 2, by2 = b.cy + b.h / 2;
  const double iw = std::max(0.0, std::min(ax2, bx2) - std::max(ax1, bx1));
  const double ih = std::max(0.0, std::min(ay2, by2) - std::max(ay1, by1));
  const double inter = iw * ih;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0 ? inter / uni : 0.0;
}

struct GtBox {
  Box box;
  int class_id = 0;
};

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0;
};

}  // namespace dtnet
