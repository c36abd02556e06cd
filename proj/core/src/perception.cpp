#include "afd/perception.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "afd/ops.hpp"

namespace afd {

Backbone Backbone::init(Rng& rng) {
  Backbone b;
  b.layers.push_back(Conv2d::init(rng, 4, 16, 3, 2, 1));
  b.layers.push_back(Conv2d::init(rng, 16, 32, 3, 2, 1));
  b.layers.push_back(Conv2d::init(rng, 32, 64, 3, 2, 1));
  b.layers.push_back(Conv2d::init(rng, 64, 64, 3, 1, 1));
  return b;
}

Tensor Backbone::forward_batch(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != kInChannels) {
    throw ShapeError("backbone: expected [N,4,H,W] input, got " + shape_str(images.shape()));
  }
  Tensor x = images;
  for (const auto& layer : layers) x = ops::relu(layer.forward(x));
  return x;
}

void Backbone::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(prefix + ".conv" + std::to_string(i + 1), out);
}

FeatureMap backbone_forward(const Backbone& backbone, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != Backbone::kInChannels) {
    throw ShapeError("backbone: expected [4,H,W] image, got " + shape_str(image.shape()));
  }
  const Shape s = image.shape();
  Tensor out = backbone.forward_batch(ops::reshape(image, {1, s[0], s[1], s[2]}));
  const Shape o = out.shape();
  return {ops::reshape(out, {o[1], o[2], o[3]}), Backbone::kStride};
}

Tensor query_input(const Tensor& rgb) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) throw ShapeError("query image must be [3,H,W], got " + shape_str(rgb.shape()));
  const std::size_t plane = rgb.dim(1) * rgb.dim(2);
  std::vector<double> v(4 * plane, 0.0);
  std::copy(rgb.values().begin(), rgb.values().end(), v.begin());
  return Tensor::from({4, rgb.dim(1), rgb.dim(2)}, std::move(v));
}

Tensor stack_supports(std::span<const SupportImage* const> supports) {
  if (supports.empty()) throw std::invalid_argument("stack_supports: no support images");
  const Shape s = supports.front()->image_with_mask.shape();
  std::vector<double> v;
  v.reserve(supports.size() * shape_numel(s));
  for (const SupportImage* sup : supports) {
    if (sup->image_with_mask.shape() != s) {
      throw ShapeError("stack_supports: mixed support shapes " + shape_str(s) + " and " +
                       shape_str(sup->image_with_mask.shape()));
    }
    const auto vals = sup->image_with_mask.values();
    v.insert(v.end(), vals.begin(), vals.end());
  }
  return Tensor::from({supports.size(), s[0], s[1], s[2]}, std::move(v));
}

std::vector<Box> make_anchors(std::size_t feat_h, std::size_t feat_w, int stride) {
  const double half = 2.0 * stride;
  std::vector<Box> anchors;
  anchors.reserve(feat_h * feat_w);
  for (std::size_t y = 0; y < feat_h; ++y)
    for (std::size_t x = 0; x < feat_w; ++x) {
      const double cx = (x + 0.5) * stride, cy = (y + 0.5) * stride;
      anchors.push_back({cx - half, cy - half, cx + half, cy + half});
    }
  return anchors;
}

Rpn Rpn::init(Rng& rng) {
  return {Conv2d::init(rng, 64, 64, 3, 1, 1), Conv2d::init(rng, 64, 1, 1, 1, 0, 0.01),
          Conv2d::init(rng, 64, 4, 1, 1, 0, 0.01)};
}

RpnOutput Rpn::forward(const FeatureMap& features) const {
  const Shape s = features.tensor.shape();
  if (s.size() != 3) throw ShapeError("rpn: expected [C,H,W] features, got " + shape_str(s));
  const std::size_t A = s[1] * s[2];
  Tensor h = ops::relu(conv.forward(ops::reshape(features.tensor, {1, s[0], s[1], s[2]})));
  RpnOutput out;
  out.objectness = ops::reshape(cls.forward(h), {A});
  out.deltas = ops::transpose2d(ops::reshape(reg.forward(h), {4, A}));
  out.anchors = make_anchors(s[1], s[2], features.stride);
  return out;
}

void Rpn::collect(const std::string& prefix, ParamList& out) const {
  conv.collect(prefix + ".conv", out);
  cls.collect(prefix + ".cls", out);
  reg.collect(prefix + ".reg", out);
}

ProposalSet rpn_propose(const RpnOutput& rpn, double image_width, double image_height, bool train_mode, int top_n,
                        std::span<const GtObject> ground_truth) {
  if (top_n < 1) throw std::invalid_argument("rpn_propose: top_n must be >= 1");
  const std::size_t A = rpn.anchors.size();
  if (rpn.objectness.numel() != A || rpn.deltas.numel() != 4 * A) {
    throw ShapeError("rpn_propose: " + std::to_string(A) + " anchors but objectness " +
                     shape_str(rpn.objectness.shape()) + ", deltas " + shape_str(rpn.deltas.shape()));
  }
  const BoxCoder coder = rpn_box_coder();
  const auto logits = rpn.objectness.values();
  const auto deltas = rpn.deltas.values();

  struct Candidate {
    Box box;
    double score;
    std::size_t anchor;
  };
  std::vector<Candidate> cands;
  for (std::size_t a = 0; a < A; ++a) {
    const Deltas d{deltas[4 * a], deltas[4 * a + 1], deltas[4 * a + 2], deltas[4 * a + 3]};
    const Box b = clip_box(coder.decode(d, rpn.anchors[a]), image_width, image_height);
    if (box_width(b) < 1.0 || box_height(b) < 1.0) continue;
    cands.push_back({b, 1.0 / (1.0 + std::exp(-logits[a])), a});
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Candidate& x, const Candidate& y) { return x.score > y.score; });
  if (cands.size() > static_cast<std::size_t>(top_n)) cands.resize(top_n);

  ProposalSet out;
  for (const auto& c : cands) {
    out.boxes.push_back(c.box);
    out.objectness.push_back(c.score);
  }
  if (train_mode) {
    for (const auto& gt : ground_truth) {
      out.boxes.push_back(clip_box(gt.box, image_width, image_height));
      out.objectness.push_back(1.0);
    }
  }
  return out;
}

AnchorTargets assign_rpn_targets(std::span<const Box> anchors, std::span<const Box> gt_boxes, double pos_iou,
                                 double neg_iou) {
  const std::size_t A = anchors.size(), G = gt_boxes.size();
  AnchorTargets t;
  t.labels.assign(A, AnchorLabel::negative);
  t.regression.assign(A, Deltas{});
  t.matched_gt.assign(A, 0);
  if (G == 0) return t;

  std::vector<double> m(A * G);
  for (std::size_t a = 0; a < A; ++a)
    for (std::size_t g = 0; g < G; ++g) m[a * G + g] = iou(anchors[a], gt_boxes[g]);

  std::vector<double> best_for_gt(G, 0.0);
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t a = 0; a < A; ++a) best_for_gt[g] = std::max(best_for_gt[g], m[a * G + g]);

  const BoxCoder coder = rpn_box_coder();
  for (std::size_t a = 0; a < A; ++a) {
    std::size_t arg = 0;
    for (std::size_t g = 1; g < G; ++g)
      if (m[a * G + g] > m[a * G + arg]) arg = g;
    const double best = m[a * G + arg];
    bool is_best_match = false;
    for (std::size_t g = 0; g < G; ++g) is_best_match = is_best_match || (best_for_gt[g] > 0.0 && m[a * G + g] == best_for_gt[g]);

    if (best >= pos_iou || is_best_match) {
      t.labels[a] = AnchorLabel::positive;
    } else if (best <= neg_iou) {
      t.labels[a] = AnchorLabel::negative;
    } else {
      t.labels[a] = AnchorLabel::ignore;
    }
    t.matched_gt[a] = arg;
    if (t.labels[a] == AnchorLabel::positive) t.regression[a] = coder.encode(gt_boxes[arg], anchors[a]);
  }
  return t;
}

AnchorSample sample_anchors(const AnchorTargets& targets, Rng& rng, std::size_t batch) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t a = 0; a < targets.labels.size(); ++a) {
    if (targets.labels[a] == AnchorLabel::positive) pos.push_back(a);
    if (targets.labels[a] == AnchorLabel::negative) neg.push_back(a);
  }
  rng.shuffle(pos);
  rng.shuffle(neg);
  const std::size_t npos = std::min(pos.size(), batch / 4);
  const std::size_t nneg = std::min(neg.size(), batch - npos);
  pos.resize(npos);
  neg.resize(nneg);
  std::sort(pos.begin(), pos.end());
  std::sort(neg.begin(), neg.end());

  AnchorSample s;
  s.positives = pos;
  for (auto a : pos) s.indices.push_back(a), s.labels.push_back(1.0);
  for (auto a : neg) s.indices.push_back(a), s.labels.push_back(0.0);
  return s;
}

Tensor roi_align(const FeatureMap& features, std::span<const Box> boxes, int pool) {
  return ops::roi_align(features.tensor, boxes, pool, features.stride);
}

}  // namespace afd
