#pragma once

#include <span>
#include <vector>

#include "afd/fusion.hpp"
#include "afd/perception.hpp"

namespace afd {

/// Per-RoI training targets: label j indexes the episode's class list and
/// label m marks background.
struct RoiTargets {
  std::vector<int> labels;
  std::vector<Deltas> regression;  // valid for positives
  std::vector<std::size_t> positives;
};

/// Foreground when IoU >= fg_iou with a ground-truth object whose class is in
/// `class_list`; matched to the best such object.
RoiTargets assign_roi_targets(std::span<const Box> proposals, std::span<const GtObject> ground_truth,
                              std::span<const int> class_list, double fg_iou = 0.5);

inline constexpr double kRpnSmoothL1Beta = 1.0 / 9.0;
inline constexpr double kRcnnSmoothL1Beta = 1.0;

struct DetectionLosses {
  Tensor rpn_cls;
  Tensor rpn_reg;
  Tensor rcnn_cls;
  Tensor rcnn_reg;
};

/// Objectness BCE over the sampled anchors, smooth-L1 on positive anchors,
/// (m+1)-way cross-entropy per RoI and smooth-L1 on the target class deltas of
/// positive RoIs. Both regression terms are normalized by their positive count.
DetectionLosses faster_rcnn_loss(const RpnOutput& rpn, const AnchorTargets& anchor_targets, const AnchorSample& sample,
                                 const PairPredictions& preds, const RoiTargets& roi_targets);

/// One linear classifier per task over all classes.
struct MetaClassifiers {
  Linear cls;
  Linear reg;

  static MetaClassifiers init(Rng& rng, std::size_t d_cls, std::size_t d_reg, std::size_t num_classes);
  const Linear& get(Task t) const { return t == Task::cls ? cls : reg; }
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Mean cross-entropy of classifier(vectors[k]) against class_ids[k].
Tensor meta_loss(const Tensor& vectors, std::span<const int> class_ids, const Linear& classifier);

struct LossReport {
  Tensor rpn_cls;
  Tensor rpn_reg;
  Tensor rcnn_cls;
  Tensor rcnn_reg;
  Tensor meta_cls;
  Tensor meta_reg;
  Tensor total;
};

/// Unweighted sum of all six components. Undefined meta terms count as zero.
LossReport total_loss(const DetectionLosses& det, const Tensor& meta_cls, const Tensor& meta_reg);

}  // namespace afd
