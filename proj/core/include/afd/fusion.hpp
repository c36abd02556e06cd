#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "afd/dualheads.hpp"

namespace afd {

/// Pair features for both tasks. Row k = i * m + j pairs RoI i with class j
/// and holds [r * a, r - a, r].
struct AggregatedFeatures {
  Tensor cls;  // [n*m, 3*d_cls]
  Tensor reg;  // [n*m, 3*d_reg]
  std::size_t n = 0;
  std::size_t m = 0;
};

AggregatedFeatures aggregate(const TaskVectors& rois, const TaskVectors& attentive);

struct PairPredictions {
  Tensor cls_logits;  // [n, m]
  Tensor deltas;      // [n*m, 4]
  Tensor scores;      // [n, m+1]: pair logits then the background logit
  std::size_t n = 0;
  std::size_t m = 0;
};

/// Separate classification and regression heads, each fc + ReLU + fc, plus a
/// learned background logit appended to every RoI's class logits.
struct DetectHeads {
  Linear cls_fc1, cls_fc2;
  Linear reg_fc1, reg_fc2;
  Tensor bg_logit;  // [1]

  static constexpr std::size_t kHidden = 128;

  static DetectHeads init(Rng& rng, std::size_t cls_in, std::size_t reg_in);
  PairPredictions forward(const AggregatedFeatures& f) const;
  void collect(const std::string& prefix, ParamList& out) const;
  void collect_task(const std::string& prefix, Task task, ParamList& out) const;
};

/// Box coder used by the R-CNN heads.
inline BoxCoder rcnn_box_coder() { return BoxCoder({10.0, 10.0, 5.0, 5.0}); }

struct Detection {
  int class_id = 0;
  Box box{};
  double score = 0.0;
  std::uint64_t scene_id = 0;
};

using DetectionSet = std::vector<Detection>;

/// Per RoI: softmax over [pair logits, background]; the argmax class is kept
/// when it is not background and its probability reaches `score_thresh`, and
/// its box is decoded from that class's deltas and clipped to the image.
DetectionSet decode_detections(const PairPredictions& preds, std::span<const Box> proposals,
                               std::span<const int> class_list, double score_thresh, double image_width,
                               double image_height, std::uint64_t scene_id = 0);

}  // namespace afd
