#pragma once

#include <array>

namespace ulast {

// Axis-aligned box in corner form, pixel units.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  double area() const { return width() * height(); }
  bool valid() const { return x2 > x1 && y2 > y1; }

  static Box from_center(double cx, double cy, double w, double h) {
    return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  }
  std::array<double, 4> as_array() const { return {x1, y1, x2, y2}; }
  bool operator==(const Box&) const = default;
};

double intersection_area(const Box& a, const Box& b);
double iou(const Box& a, const Box& b);
double center_distance(const Box& a, const Box& b);

// Clamps into [0, width] x [0, height] keeping each side at least min_side.
Box clamp_box(const Box& b, double width, double height, double min_side);

}  // namespace ulast
