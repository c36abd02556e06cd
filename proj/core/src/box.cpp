#include "afd/box.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace afd {

namespace {
// exp() argument cap for dw/dh; keeps decoded boxes finite.
const double kMaxLogScale = std::log(1000.0 / 16.0);
}  // namespace

double iou(const Box& a, const Box& b) {
  if (!box_valid(a) || !box_valid(b)) {
    throw std::invalid_argument("iou: degenerate box");
  }
  const double iw = std::min(a[2], b[2]) - std::max(a[0], b[0]);
  const double ih = std::min(a[3], b[3]) - std::max(a[1], b[1]);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (box_area(a) + box_area(b) - inter);
}

Box clip_box(const Box& b, double width, double height) {
  return {std::clamp(b[0], 0.0, width), std::clamp(b[1], 0.0, height), std::clamp(b[2], 0.0, width),
          std::clamp(b[3], 0.0, height)};
}

Deltas BoxCoder::encode(const Box& target, const Box& reference) const {
  const double rw = box_width(reference), rh = box_height(reference);
  const double rx = reference[0] + 0.5 * rw, ry = reference[1] + 0.5 * rh;
  const double tw = box_width(target), th = box_height(target);
  const double tx = target[0] + 0.5 * tw, ty = target[1] + 0.5 * th;
  return {weights_[0] * (tx - rx) / rw, weights_[1] * (ty - ry) / rh, weights_[2] * std::log(tw / rw),
          weights_[3] * std::log(th / rh)};
}

Box BoxCoder::decode(const Deltas& d, const Box& reference) const {
  const double rw = box_width(reference), rh = box_height(reference);
  const double rx = reference[0] + 0.5 * rw, ry = reference[1] + 0.5 * rh;
  const double dw = std::min(d[2] / weights_[2], kMaxLogScale);
  const double dh = std::min(d[3] / weights_[3], kMaxLogScale);
  const double cx = rx + d[0] / weights_[0] * rw;
  const double cy = ry + d[1] / weights_[1] * rh;
  const double w = rw * std::exp(dw), h = rh * std::exp(dh);
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

}  // namespace afd
