#pragma once

#include <algorithm>

namespace ecls {

/// Axis-aligned box in pixel units, (x1, y1) inclusive corner, (x2, y2) exclusive.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const noexcept { return x2 - x1; }
  double height() const noexcept { return y2 - y1; }
  double area() const noexcept { return valid() ? width() * height() : 0.0; }
  bool valid() const noexcept { return x2 > x1 && y2 > y1; }
  double center_x() const noexcept { return 0.5 * (x1 + x2); }
  double center_y() const noexcept { return 0.5 * (y1 + y2); }

  friend bool operator==(const Box&, const Box&) = default;
};

inline double intersection_area(const Box& a, const Box& b) noexcept {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

/// Intersection over union. A zero-area box has IoU 0 with everything,
/// itself included.
inline double iou(const Box& a, const Box& b) noexcept {
  if (!a.valid() || !b.valid()) return 0.0;
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline Box clip(const Box& b, double width, double height) noexcept {
  return {std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height),
          std::clamp(b.x2, 0.0, width), std::clamp(b.y2, 0.0, height)};
}

}  // namespace ecls
