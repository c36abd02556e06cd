#pragma once

#include <array>

namespace afd {

/// Axis-aligned box in pixel coordinates: {x1, y1, x2, y2}.
using Box = std::array<double, 4>;

/// Box deltas {dx, dy, dw, dh}.
using Deltas = std::array<double, 4>;

inline double box_width(const Box& b) { return b[2] - b[0]; }
inline double box_height(const Box& b) { return b[3] - b[1]; }
inline double box_area(const Box& b) { return box_width(b) * box_height(b); }
inline bool box_valid(const Box& b) { return b[2] > b[0] && b[3] > b[1]; }

/// Intersection over union; 0 for disjoint boxes. Throws on degenerate input.
double iou(const Box& a, const Box& b);

Box clip_box(const Box& b, double width, double height);

/// Standard R-CNN box parameterization: center offsets scaled by the
/// reference size and log-scaled width/height, each multiplied by a weight.
class BoxCoder {
 public:
  explicit BoxCoder(std::array<double, 4> weights = {1.0, 1.0, 1.0, 1.0}) : weights_(weights) {}

  Deltas encode(const Box& target, const Box& reference) const;
  Box decode(const Deltas& deltas, const Box& reference) const;

  const std::array<double, 4>& weights() const { return weights_; }

 private:
  std::array<double, 4> weights_;
};

}  // namespace afd
