#pragma once

#include <algorithm>
#include <cmath>

namespace stark {

// Axis-aligned box, (x,y) top-left corner, in whatever pixel frame the caller
// is working in (original image or crop).
struct BoxF {
  double x = 0, y = 0, w = 0, h = 0;

  double x2() const { return x + w; }
  double y2() const { return y + h; }
  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }
  double area() const { return std::max(0.0, w) * std::max(0.0, h); }

  static BoxF from_corners(double x1, double y1, double x2, double y2) {
    return BoxF{x1, y1, x2 - x1, y2 - y1};
  }
};

// Intersection over union; 0 by convention when the union is empty.
inline double iou(const BoxF& a, const BoxF& b) {
  const double ix = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

// IoU minus the enclosing-box penalty; in (-1, 1].
inline double giou(const BoxF& a, const BoxF& b) {
  const double ix = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  const double cw = std::max(a.x2(), b.x2()) - std::min(a.x, b.x);
  const double ch = std::max(a.y2(), b.y2()) - std::min(a.y, b.y);
  const double hull = cw * ch;
  const double v = uni <= 0.0 ? 0.0 : inter / uni;
  if (hull <= 0.0) return v;
  return v - (hull - uni) / hull;
}

inline double center_distance(const BoxF& a, const BoxF& b) {
  const double dx = a.cx() - b.cx();
  const double dy = a.cy() - b.cy();
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace stark
