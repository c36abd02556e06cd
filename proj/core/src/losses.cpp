#include "afd/losses.hpp"

#include <algorithm>
#include <stdexcept>

#include "afd/ops.hpp"

namespace afd {

RoiTargets assign_roi_targets(std::span<const Box> proposals, std::span<const GtObject> ground_truth,
                              std::span<const int> class_list, double fg_iou) {
  const int m = static_cast<int>(class_list.size());
  const BoxCoder coder = rcnn_box_coder();
  RoiTargets t;
  t.labels.assign(proposals.size(), m);
  t.regression.assign(proposals.size(), Deltas{});
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    double best = 0.0;
    int best_j = -1;
    const GtObject* match = nullptr;
    for (const auto& gt : ground_truth) {
      const auto it = std::find(class_list.begin(), class_list.end(), gt.class_id);
      if (it == class_list.end()) continue;
      const double o = iou(proposals[i], gt.box);
      if (o > best) best = o, best_j = static_cast<int>(it - class_list.begin()), match = &gt;
    }
    if (match && best >= fg_iou) {
      t.labels[i] = best_j;
      t.regression[i] = coder.encode(match->box, proposals[i]);
      t.positives.push_back(i);
    }
  }
  return t;
}

namespace {

Tensor zero() { return Tensor::scalar(0.0); }

std::vector<double> flatten(std::span<const Deltas> d, std::span<const std::size_t> rows) {
  std::vector<double> v;
  v.reserve(4 * rows.size());
  for (auto r : rows) v.insert(v.end(), d[r].begin(), d[r].end());
  return v;
}

}  // namespace

DetectionLosses faster_rcnn_loss(const RpnOutput& rpn, const AnchorTargets& anchor_targets, const AnchorSample& sample,
                                 const PairPredictions& preds, const RoiTargets& roi_targets) {
  DetectionLosses out;
  if (sample.indices.empty()) {
    out.rpn_cls = zero();
  } else {
    out.rpn_cls = ops::bce_with_logits(ops::gather_rows(rpn.objectness, sample.indices), sample.labels);
  }
  if (sample.positives.empty()) {
    out.rpn_reg = zero();
  } else {
    const auto tg = flatten(anchor_targets.regression, sample.positives);
    out.rpn_reg = ops::scale(ops::smooth_l1(ops::gather_rows(rpn.deltas, sample.positives), tg, kRpnSmoothL1Beta),
                             1.0 / static_cast<double>(sample.positives.size()));
  }

  if (roi_targets.labels.size() != preds.n) {
    throw std::invalid_argument("faster_rcnn_loss: " + std::to_string(roi_targets.labels.size()) + " RoI targets for " +
                                std::to_string(preds.n) + " RoIs");
  }
  out.rcnn_cls = ops::cross_entropy(preds.scores, roi_targets.labels);
  if (roi_targets.positives.empty()) {
    out.rcnn_reg = zero();
  } else {
    std::vector<std::size_t> rows;
    for (auto i : roi_targets.positives) rows.push_back(i * preds.m + static_cast<std::size_t>(roi_targets.labels[i]));
    const auto tg = flatten(roi_targets.regression, roi_targets.positives);
    out.rcnn_reg = ops::scale(ops::smooth_l1(ops::gather_rows(preds.deltas, rows), tg, kRcnnSmoothL1Beta),
                              1.0 / static_cast<double>(rows.size()));
  }
  return out;
}

MetaClassifiers MetaClassifiers::init(Rng& rng, std::size_t d_cls, std::size_t d_reg, std::size_t num_classes) {
  return {Linear::init(rng, d_cls, num_classes, 0.01), Linear::init(rng, d_reg, num_classes, 0.01)};
}

void MetaClassifiers::collect(const std::string& prefix, ParamList& out) const {
  cls.collect(prefix + ".cls", out);
  reg.collect(prefix + ".reg", out);
}

Tensor meta_loss(const Tensor& vectors, std::span<const int> class_ids, const Linear& classifier) {
  const int C = static_cast<int>(classifier.weight.dim(1));
  if (vectors.dim(0) != class_ids.size()) {
    throw std::invalid_argument("meta_loss: " + std::to_string(vectors.dim(0)) + " vectors for " +
                                std::to_string(class_ids.size()) + " class ids");
  }
  for (int c : class_ids) {
    if (c < 0 || c >= C) throw std::invalid_argument("meta_loss: unknown class id " + std::to_string(c));
  }
  return ops::cross_entropy(classifier.forward(vectors), class_ids);
}

LossReport total_loss(const DetectionLosses& det, const Tensor& meta_cls, const Tensor& meta_reg) {
  LossReport r{det.rpn_cls, det.rpn_reg, det.rcnn_cls, det.rcnn_reg, meta_cls.defined() ? meta_cls : zero(),
               meta_reg.defined() ? meta_reg : zero(), Tensor()};
  r.total = ops::add(ops::add(ops::add(r.rpn_cls, r.rpn_reg), ops::add(r.rcnn_cls, r.rcnn_reg)),
                     ops::add(r.meta_cls, r.meta_reg));
  return r;
}

}  // namespace afd
