#include "afd/fusion.hpp"

#include <cmath>
#include <stdexcept>

#include "afd/ops.hpp"

namespace afd {

namespace {

Tensor aggregate_task(const Tensor& r, const Tensor& a, Task t) {
  if (r.rank() != 2 || a.rank() != 2 || r.dim(1) != a.dim(1)) {
    throw ShapeError(std::string("aggregate: ") + task_name(t) + " RoI vectors " + shape_str(r.shape()) +
                     " vs class-attentive vectors " + shape_str(a.shape()));
  }
  const std::size_t n = r.dim(0), m = a.dim(0);
  std::vector<std::size_t> ri(n * m), ai(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) ri[i * m + j] = i, ai[i * m + j] = j;
  Tensor R = ops::gather_rows(r, ri);
  Tensor A = ops::gather_rows(a, ai);
  const Tensor parts[] = {ops::mul(R, A), ops::sub(R, A), R};
  return ops::concat(parts, 1);
}

}  // namespace

AggregatedFeatures aggregate(const TaskVectors& rois, const TaskVectors& attentive) {
  if (rois.cls.dim(0) != rois.reg.dim(0) || attentive.cls.dim(0) != attentive.reg.dim(0)) {
    throw ShapeError("aggregate: cls and reg vector counts differ");
  }
  return {aggregate_task(rois.cls, attentive.cls, Task::cls), aggregate_task(rois.reg, attentive.reg, Task::reg),
          rois.cls.dim(0), attentive.cls.dim(0)};
}

DetectHeads DetectHeads::init(Rng& rng, std::size_t cls_in, std::size_t reg_in) {
  DetectHeads h;
  h.cls_fc1 = Linear::init(rng, cls_in, kHidden);
  h.cls_fc2 = Linear::init(rng, kHidden, 1, 0.01);
  h.reg_fc1 = Linear::init(rng, reg_in, kHidden);
  h.reg_fc2 = Linear::init(rng, kHidden, 4, 0.001);
  h.bg_logit = constant_param({1}, 0.0);
  return h;
}

PairPredictions DetectHeads::forward(const AggregatedFeatures& f) const {
  if (f.cls.dim(0) != f.n * f.m || f.reg.dim(0) != f.n * f.m) {
    throw ShapeError("detect_heads: expected " + std::to_string(f.n * f.m) + " pair features per task, got cls " +
                     shape_str(f.cls.shape()) + ", reg " + shape_str(f.reg.shape()));
  }
  PairPredictions p;
  p.n = f.n;
  p.m = f.m;
  p.cls_logits = ops::reshape(cls_fc2.forward(ops::relu(cls_fc1.forward(f.cls))), {f.n, f.m});
  p.deltas = reg_fc2.forward(ops::relu(reg_fc1.forward(f.reg)));
  const Tensor parts[] = {p.cls_logits, ops::expand_scalar(bg_logit, {f.n, 1})};
  p.scores = ops::concat(parts, 1);
  return p;
}

void DetectHeads::collect(const std::string& prefix, ParamList& out) const {
  collect_task(prefix, Task::cls, out);
  collect_task(prefix, Task::reg, out);
}

void DetectHeads::collect_task(const std::string& prefix, Task task, ParamList& out) const {
  if (task == Task::cls) {
    cls_fc1.collect(prefix + ".cls_fc1", out);
    cls_fc2.collect(prefix + ".cls_fc2", out);
    out.push_back({prefix + ".bg_logit", bg_logit});
  } else {
    reg_fc1.collect(prefix + ".reg_fc1", out);
    reg_fc2.collect(prefix + ".reg_fc2", out);
  }
}

DetectionSet decode_detections(const PairPredictions& preds, std::span<const Box> proposals,
                               std::span<const int> class_list, double score_thresh, double image_width,
                               double image_height, std::uint64_t scene_id) {
  if (!(score_thresh >= 0.0 && score_thresh < 1.0)) throw std::invalid_argument("decode_detections: score_thresh must be in [0,1)");
  const std::size_t n = preds.n, m = preds.m;
  if (proposals.size() != n || class_list.size() != m) {
    throw std::invalid_argument("decode_detections: " + std::to_string(n) + "x" + std::to_string(m) +
                                " predictions for " + std::to_string(proposals.size()) + " proposals and " +
                                std::to_string(class_list.size()) + " classes");
  }
  const BoxCoder coder = rcnn_box_coder();
  const auto s = preds.scores.values();
  const auto d = preds.deltas.values();
  DetectionSet out;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = s.data() + i * (m + 1);
    std::size_t best = 0;
    double mx = row[0];
    for (std::size_t j = 1; j <= m; ++j)
      if (row[j] > mx) mx = row[j], best = j;
    double z = 0.0;
    for (std::size_t j = 0; j <= m; ++j) z += std::exp(row[j] - mx);
    const double prob = 1.0 / z;
    if (best == m || prob < score_thresh) continue;
    const double* dd = d.data() + (i * m + best) * 4;
    Box b = clip_box(coder.decode({dd[0], dd[1], dd[2], dd[3]}, proposals[i]), image_width, image_height);
    if (!box_valid(b)) continue;
    out.push_back({class_list[best], b, prob, scene_id});
  }
  return out;
}

}  // namespace afd
