#pragma once

#include <span>
#include <vector>

#include "afd/box.hpp"
#include "afd/episodes.hpp"
#include "afd/layers.hpp"

namespace afd {

/// Backbone output for one image.
struct FeatureMap {
  Tensor tensor;  // [C, Hf, Wf]
  int stride = 8;
};

/// Four 3x3 convolutions 4->16->32->64->64 with ReLU; the first three
/// downsample by 2, giving a net stride of 8.
struct Backbone {
  static constexpr std::size_t kInChannels = 4;
  static constexpr std::size_t kOutChannels = 64;
  static constexpr int kStride = 8;

  std::vector<Conv2d> layers;

  static Backbone init(Rng& rng);
  /// Batched forward: [N, 4, H, W] -> [N, 64, ceil(H/8), ceil(W/8)].
  Tensor forward_batch(const Tensor& images) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Single image [4, H, W] through the backbone.
FeatureMap backbone_forward(const Backbone& backbone, const Tensor& image);

/// Query images carry no mask: the RGB planes get a zero fourth channel.
Tensor query_input(const Tensor& rgb);

/// Stacks support images [4, H, W] into one [N, 4, H, W] batch.
Tensor stack_supports(std::span<const SupportImage* const> supports);

/// One square anchor of side 4 * stride centered on every feature cell,
/// ordered row-major over (y, x).
std::vector<Box> make_anchors(std::size_t feat_h, std::size_t feat_w, int stride);

struct RpnOutput {
  Tensor objectness;  // [A] logits
  Tensor deltas;      // [A, 4]
  std::vector<Box> anchors;
};

struct Rpn {
  Conv2d conv;
  Conv2d cls;
  Conv2d reg;

  static Rpn init(Rng& rng);
  RpnOutput forward(const FeatureMap& features) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Box coder used for anchors.
inline BoxCoder rpn_box_coder() { return BoxCoder({1.0, 1.0, 1.0, 1.0}); }

struct ProposalSet {
  std::vector<Box> boxes;
  std::vector<double> objectness;
};

/// Decodes every anchor, clips to the image, drops boxes thinner than one
/// pixel, keeps the top_n by objectness (ties by anchor order) and, in
/// training mode, appends the ground-truth boxes with objectness 1.
ProposalSet rpn_propose(const RpnOutput& rpn, double image_width, double image_height, bool train_mode,
                        int top_n, std::span<const GtObject> ground_truth = {});

enum class AnchorLabel : int { negative = 0, positive = 1, ignore = -1 };

struct AnchorTargets {
  std::vector<AnchorLabel> labels;
  std::vector<Deltas> regression;  // valid for positive anchors
  std::vector<std::size_t> matched_gt;
};

/// Positive at IoU >= 0.6 or when the anchor is some box's best match;
/// negative at max IoU <= 0.3; otherwise ignored.
AnchorTargets assign_rpn_targets(std::span<const Box> anchors, std::span<const Box> gt_boxes,
                                 double pos_iou = 0.6, double neg_iou = 0.3);

struct AnchorSample {
  std::vector<std::size_t> indices;  // sampled anchors, positives first
  std::vector<double> labels;        // 1 or 0 per sampled anchor
  std::vector<std::size_t> positives;
};

/// At most `batch` anchors with at most a quarter positive.
AnchorSample sample_anchors(const AnchorTargets& targets, Rng& rng, std::size_t batch = 32);

/// Pooled [n, C, pool, pool] patches for the given boxes.
Tensor roi_align(const FeatureMap& features, std::span<const Box> boxes, int pool);

}  // namespace afd
