#include "ulast/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace ulast {

double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double center_distance(const Box& a, const Box& b) { return std::hypot(a.cx() - b.cx(), a.cy() - b.cy()); }

Box clamp_box(const Box& b, double width, double height, double min_side) {
  auto clamp_axis = [min_side](double lo, double hi, double limit) {
    lo = std::clamp(lo, 0.0, limit);
    hi = std::clamp(hi, 0.0, limit);
    if (hi - lo < min_side) {
      const double half = 0.5 * std::min(min_side, limit);
      const double c = std::clamp(0.5 * (lo + hi), half, limit - half);
      lo = c - half;
      hi = c + half;
    }
    return std::pair{lo, hi};
  };
  const auto [x1, x2] = clamp_axis(b.x1, b.x2, width);
  const auto [y1, y2] = clamp_axis(b.y1, b.y2, height);
  return {x1, y1, x2, y2};
}

}  // namespace ulast
