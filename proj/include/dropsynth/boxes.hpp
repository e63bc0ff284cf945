#pragma once

#include <string>

namespace dropsynth {

// Axis-aligned box in normalized image coordinates (0..1, origin top-left).
// Single-class data: `cls` is always 0 (droplet).
struct BoundingBox {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  int cls = 0;

  static BoundingBox from_center(double cx, double cy, double w, double h) {
    return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, 0};
  }

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }
  double cx() const { return (x0 + x1) / 2; }
  double cy() const { return (y0 + y1) / 2; }

  // Inside [0, 1] (within tol) with positive area.
  bool valid(double tol = 1e-6) const {
    return x0 < x1 && y0 < y1 && x0 >= -tol && y0 >= -tol && x1 <= 1 + tol && y1 <= 1 + tol;
  }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

// Box in pixel units on a square image of known size.
struct PixelBox {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  BoundingBox normalized(double image_size) const {
    return {x0 / image_size, y0 / image_size, x1 / image_size, y1 / image_size, 0};
  }
};

}  // namespace dropsynth
