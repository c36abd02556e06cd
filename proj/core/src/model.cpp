#include "afd/model.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

#include "afd/eval.hpp"
#include "afd/ops.hpp"

namespace afd {

Model Model::init(const ModelConfig& config, std::uint64_t seed) {
  config.paths.validate();
  if (config.num_classes < 2) throw std::invalid_argument("model: need at least 2 classes");
  if (config.pool < 1) throw std::invalid_argument("model: pool must be >= 1");
  // Each component draws from its own stream so that disabling a path does
  // not shift the initialization of the others.
  auto stream = [seed](std::uint64_t k) { return Rng(derive_seed(seed, 0x1417'0000ull + k)); };
  Model m;
  m.config = config;
  Rng r0 = stream(0), r1 = stream(1), r2 = stream(2), r3 = stream(3), r4 = stream(4), r5 = stream(5);
  m.backbone = Backbone::init(r0);
  m.rpn = Rpn::init(r1);
  m.lambdas = FusionWeights::init();
  m.dqe = DualEncoder::init(r2, Backbone::kOutChannels, config.pool);
  m.dag = DualEncoder::init(r3, Backbone::kOutChannels, config.pool);
  const std::size_t d_cls = config.paths.fused_dim(Task::cls), d_reg = config.paths.fused_dim(Task::reg);
  m.heads = DetectHeads::init(r4, 3 * d_cls, 3 * d_reg);
  m.meta = MetaClassifiers::init(r5, d_cls, d_reg, config.num_classes);
  return m;
}

ParamList Model::parameters() const {
  ParamList out;
  backbone.collect("backbone", out);
  rpn.collect("rpn", out);
  lambdas.collect("lambda", out);
  dqe.collect("dqe", out);
  dag.collect("dag", out);
  heads.collect("heads", out);
  meta.collect("meta", out);
  return out;
}

ParamList Model::trainable(const FreezeFlags& freeze) const {
  std::vector<std::string> excluded;
  auto add_group = [&](bool frozen, const char* prefix) {
    if (frozen) excluded.emplace_back(prefix);
  };
  add_group(freeze.backbone, "backbone.");
  add_group(freeze.rpn, "rpn.");
  add_group(freeze.dqe, "dqe.");
  add_group(freeze.dag, "dag.");
  add_group(freeze.heads, "heads.");
  add_group(freeze.lambdas, "lambda.");
  add_group(freeze.meta, "meta.");
  for (Task t : {Task::cls, Task::reg}) {
    const std::string tn = task_name(t);
    for (bool conv : {true, false}) {
      if (conv ? config.paths.conv(t) : config.paths.fc(t)) continue;
      const std::string path = tn + (conv ? "_conv" : "_fc");
      excluded.push_back("dqe." + path + ".");
      excluded.push_back("dag." + path + ".");
      excluded.push_back("lambda." + path);
    }
  }
  add_group(!config.meta_cls, "meta.cls.");
  add_group(!config.meta_reg, "meta.reg.");

  ParamList out;
  for (auto& p : parameters()) {
    const bool skip = std::any_of(excluded.begin(), excluded.end(), [&](const std::string& e) {
      return p.name.compare(0, e.size(), e) == 0 && (p.name.size() == e.size() || e.back() == '.');
    });
    if (!skip) out.push_back(std::move(p));
  }
  return out;
}

Model Model::clone() const {
  Model copy = Model::init(config, 0);
  assign_parameters(copy, parameters());
  return copy;
}

void assign_parameters(Model& model, const std::vector<NamedTensor>& source) {
  auto dest = model.parameters();
  std::map<std::string, const Tensor*> by_name;
  for (const auto& s : source) by_name[s.name] = &s.tensor;
  for (const auto& d : dest) {
    auto it = by_name.find(d.name);
    if (it == by_name.end()) throw std::invalid_argument("parameter '" + d.name + "' missing from checkpoint");
    if (it->second->shape() != d.tensor.shape()) {
      throw std::invalid_argument("parameter '" + d.name + "' has shape " + shape_str(it->second->shape()) +
                                  " in checkpoint but " + shape_str(d.tensor.shape()) + " in the current config");
    }
  }
  if (by_name.size() != dest.size() || source.size() != dest.size()) {
    std::map<std::string, int> known;
    for (const auto& d : dest) known[d.name] = 1;
    for (const auto& s : source) {
      if (!known.count(s.name)) throw std::invalid_argument("checkpoint tensor '" + s.name + "' is not a model parameter");
    }
    throw std::invalid_argument("checkpoint lists a parameter more than once");
  }
  for (auto& d : dest) {
    const auto src = by_name[d.name]->values();
    std::copy(src.begin(), src.end(), d.tensor.mutable_values().begin());
  }
}

namespace {

std::vector<Box> gt_boxes(const Scene& s) {
  std::vector<Box> b;
  for (const auto& o : s.objects) b.push_back(o.box);
  return b;
}

}  // namespace

TrainingPlan make_training_plan(const Model& model, const Episode& episode, Rng& rng) {
  NoGradGuard no_grad;
  const Scene& q = episode.query;
  const FeatureMap fm = backbone_forward(model.backbone, query_input(q.image));
  const RpnOutput rpn = model.rpn.forward(fm);
  TrainingPlan plan;
  plan.proposals = rpn_propose(rpn, double(q.width()), double(q.height()), true, model.config.train_top_n, q.objects);
  const auto gt = gt_boxes(q);
  plan.anchor_targets = assign_rpn_targets(rpn.anchors, gt);
  plan.anchor_sample = sample_anchors(plan.anchor_targets, rng, model.config.rpn_batch);
  plan.roi_targets = assign_roi_targets(plan.proposals.boxes, q.objects, episode.class_list);
  return plan;
}

LossReport episode_loss(const Model& model, const Episode& episode, const TrainingPlan& plan) {
  const ModelConfig& cfg = model.config;
  const FeatureMap fm = backbone_forward(model.backbone, query_input(episode.query.image));
  const RpnOutput rpn = model.rpn.forward(fm);
  const Tensor patches = roi_align(fm, plan.proposals.boxes, cfg.pool);
  const TaskVectors rois = dqe_encode(model.dqe, patches, model.lambdas, cfg.paths);
  const AttentiveVectors att = dag_encode(model.dag, model.backbone, episode.support, model.lambdas, cfg.paths, cfg.pool);
  const PairPredictions preds = model.heads.forward(aggregate(rois, att.per_class));
  const DetectionLosses det = faster_rcnn_loss(rpn, plan.anchor_targets, plan.anchor_sample, preds, plan.roi_targets);

  const TaskVectors& meta_in = cfg.meta_per_support ? att.per_support : att.per_class;
  const std::span<const int> meta_ids = cfg.meta_per_support ? std::span<const int>(att.support_classes)
                                                             : std::span<const int>(episode.class_list);
  Tensor meta_cls = cfg.meta_cls ? meta_loss(meta_in.cls, meta_ids, model.meta.cls) : Tensor();
  Tensor meta_reg = cfg.meta_reg ? meta_loss(meta_in.reg, meta_ids, model.meta.reg) : Tensor();
  return total_loss(det, meta_cls, meta_reg);
}

AttentiveVectors encode_supports(const Model& model, std::span<const std::vector<SupportImage>> clusters) {
  return dag_encode(model.dag, model.backbone, clusters, model.lambdas, model.config.paths, model.config.pool);
}

DetectionSet detect(const Model& model, const Tensor& image, const AttentiveVectors& attentive,
                    std::span<const int> class_list, const InferenceOptions& options, std::uint64_t scene_id) {
  NoGradGuard no_grad;
  const double W = double(image.dim(2)), H = double(image.dim(1));
  const FeatureMap fm = backbone_forward(model.backbone, query_input(image));
  const RpnOutput rpn = model.rpn.forward(fm);
  const ProposalSet props = rpn_propose(rpn, W, H, false, model.config.test_top_n);
  if (props.boxes.empty()) return {};
  const Tensor patches = roi_align(fm, props.boxes, model.config.pool);
  const TaskVectors rois = dqe_encode(model.dqe, patches, model.lambdas, model.config.paths);
  const PairPredictions preds = model.heads.forward(aggregate(rois, attentive.per_class));
  return nms(decode_detections(preds, props.boxes, class_list, options.score_thresh, W, H, scene_id), options.nms_iou);
}

}  // namespace afd
