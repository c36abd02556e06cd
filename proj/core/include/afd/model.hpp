#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "afd/episodes.hpp"
#include "afd/fusion.hpp"
#include "afd/losses.hpp"

namespace afd {

/// How pair scores are turned into class decisions. Only softmax is
/// implemented; binary is a placeholder for per-class sigmoid scoring.
enum class PairObjective { softmax, binary };

struct ModelConfig {
  int num_classes = 5;
  int pool = 4;
  PathFlags paths;
  int train_top_n = 32;  // RPN proposals kept before ground truth is appended
  int test_top_n = 32;
  std::size_t rpn_batch = 32;
  bool meta_cls = true;
  bool meta_reg = true;
  bool meta_per_support = true;  // false: meta losses see the K-averaged vectors
  PairObjective pair_objective = PairObjective::softmax;
};

/// Parameter groups that can be frozen.
struct FreezeFlags {
  bool backbone = false;
  bool rpn = false;
  bool dqe = false;
  bool dag = false;
  bool heads = false;
  bool lambdas = false;
  bool meta = false;
};

/// The full detector. Every member tensor is a parameter; copies of a Model
/// share storage, use clone() for an independent copy.
struct Model {
  ModelConfig config;
  Backbone backbone;
  Rpn rpn;
  FusionWeights lambdas;
  DualEncoder dqe;
  DualEncoder dag;
  DetectHeads heads;
  MetaClassifiers meta;

  static Model init(const ModelConfig& config, std::uint64_t seed);

  /// Every parameter in a fixed order with stable names.
  ParamList parameters() const;
  /// Parameters updated by the optimizer: disabled paths, disabled meta
  /// classifiers and frozen groups are left out.
  ParamList trainable(const FreezeFlags& freeze = {}) const;
  Model clone() const;
};

/// Copies values from `source` into `model` after checking that the names and
/// shapes match exactly; nothing is modified when validation fails.
void assign_parameters(Model& model, const std::vector<NamedTensor>& source);

/// The non-differentiable part of a training step: proposals, anchor and RoI
/// targets and the anchor sample. Holding it fixed makes the episode loss a
/// smooth function of the parameters.
struct TrainingPlan {
  ProposalSet proposals;
  AnchorTargets anchor_targets;
  AnchorSample anchor_sample;
  RoiTargets roi_targets;
};

TrainingPlan make_training_plan(const Model& model, const Episode& episode, Rng& rng);

/// Differentiable episode loss under a fixed plan.
LossReport episode_loss(const Model& model, const Episode& episode, const TrainingPlan& plan);

struct InferenceOptions {
  double score_thresh = 0.05;
  double nms_iou = 0.5;
};

/// Support clusters encoded once and reused across query scenes.
AttentiveVectors encode_supports(const Model& model, std::span<const std::vector<SupportImage>> clusters);

/// Detections for one RGB scene image [3, H, W] against `class_list`, whose
/// j-th entry corresponds to row j of the attentive vectors.
DetectionSet detect(const Model& model, const Tensor& image, const AttentiveVectors& attentive,
                    std::span<const int> class_list, const InferenceOptions& options = {},
                    std::uint64_t scene_id = 0);

}  // namespace afd
