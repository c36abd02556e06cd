#include "afd/dualheads.hpp"

#include <stdexcept>

#include "afd/ops.hpp"

namespace afd {

const char* task_name(Task t) { return t == Task::cls ? "cls" : "reg"; }

FusionWeights FusionWeights::init() {
  return {constant_param({1}, 1.0), constant_param({1}, 1.0), constant_param({1}, 1.0), constant_param({1}, 1.0)};
}

void FusionWeights::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".cls_conv", conv_cls});
  out.push_back({prefix + ".cls_fc", fc_cls});
  out.push_back({prefix + ".reg_conv", conv_reg});
  out.push_back({prefix + ".reg_fc", fc_reg});
}

void PathFlags::validate() const {
  if (!cls_conv && !cls_fc) throw std::invalid_argument("classification branch needs the conv or the fc path");
  if (!reg_conv && !reg_fc) throw std::invalid_argument("regression branch needs the conv or the fc path");
}

std::size_t PathFlags::fused_dim(Task t) const { return (conv(t) ? kConvDim : 0) + (fc(t) ? kFcDim : 0); }

Tensor afm_fuse(const Tensor& conv_feat, const Tensor& fc_feat, Task task, const FusionWeights& weights) {
  std::vector<std::pair<Tensor, Tensor>> parts;
  if (conv_feat.defined()) parts.emplace_back(conv_feat, weights.conv(task));
  if (fc_feat.defined()) parts.emplace_back(fc_feat, weights.fc(task));
  if (parts.empty()) throw std::invalid_argument("afm_fuse: both paths are missing");
  return ops::weighted_concat(parts, parts.front().first.rank() - 1);
}

ConvEncoder ConvEncoder::init(Rng& rng, std::size_t channels) {
  return {Conv2d::init(rng, channels, kConvDim, 3, 1, 1)};
}

Tensor ConvEncoder::forward(const Tensor& patches) const { return ops::global_avg_pool(ops::relu(conv.forward(patches))); }

void ConvEncoder::collect(const std::string& prefix, ParamList& out) const { conv.collect(prefix + ".conv", out); }

FcEncoder FcEncoder::init(Rng& rng, std::size_t in) {
  return {Linear::init(rng, in, kFcHidden), Linear::init(rng, kFcHidden, kFcDim)};
}

Tensor FcEncoder::forward(const Tensor& patches) const {
  const std::size_t n = patches.dim(0);
  Tensor flat = ops::reshape(patches, {n, patches.numel() / n});
  return fc2.forward(ops::relu(fc1.forward(flat)));
}

void FcEncoder::collect(const std::string& prefix, ParamList& out) const {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

DualEncoder DualEncoder::init(Rng& rng, std::size_t channels, int pool) {
  const std::size_t flat = channels * pool * pool;
  DualEncoder e;
  e.conv_cls = ConvEncoder::init(rng, channels);
  e.fc_cls = FcEncoder::init(rng, flat);
  e.conv_reg = ConvEncoder::init(rng, channels);
  e.fc_reg = FcEncoder::init(rng, flat);
  return e;
}

TaskVectors DualEncoder::encode(const Tensor& patches, const FusionWeights& weights, const PathFlags& paths) const {
  if (patches.rank() != 4) throw ShapeError("encoder: expected [N,C,P,P] patches, got " + shape_str(patches.shape()));
  auto one = [&](Task t, const ConvEncoder& ce, const FcEncoder& fe) {
    Tensor c = paths.conv(t) ? ce.forward(patches) : Tensor();
    Tensor f = paths.fc(t) ? fe.forward(patches) : Tensor();
    return afm_fuse(c, f, t, weights);
  };
  return {one(Task::cls, conv_cls, fc_cls), one(Task::reg, conv_reg, fc_reg)};
}

void DualEncoder::collect(const std::string& prefix, ParamList& out) const {
  conv_cls.collect(prefix + ".cls_conv", out);
  fc_cls.collect(prefix + ".cls_fc", out);
  conv_reg.collect(prefix + ".reg_conv", out);
  fc_reg.collect(prefix + ".reg_fc", out);
}

void DualEncoder::collect_path(const std::string& prefix, Task task, bool conv, ParamList& out) const {
  const std::string p = prefix + "." + task_name(task) + (conv ? "_conv" : "_fc");
  if (conv) {
    (task == Task::cls ? conv_cls : conv_reg).collect(p, out);
  } else {
    (task == Task::cls ? fc_cls : fc_reg).collect(p, out);
  }
}

std::vector<Shape> DualEncoder::layer_shapes() const {
  return {conv_cls.conv.layer_shape(), fc_cls.fc1.layer_shape(), fc_cls.fc2.layer_shape(),
          conv_reg.conv.layer_shape(), fc_reg.fc1.layer_shape(), fc_reg.fc2.layer_shape()};
}

TaskVectors dqe_encode(const DualEncoder& dqe, const Tensor& patches, const FusionWeights& weights,
                       const PathFlags& paths) {
  if (patches.rank() != 4 || patches.dim(0) == 0) throw std::invalid_argument("dqe_encode: no RoI patches");
  return dqe.encode(patches, weights, paths);
}

AttentiveVectors dag_encode(const DualEncoder& dag, const Backbone& backbone,
                            std::span<const std::vector<SupportImage>> clusters, const FusionWeights& weights,
                            const PathFlags& paths, int pool) {
  if (clusters.empty()) throw std::invalid_argument("dag_encode: no support classes");
  const std::size_t K = clusters.front().size();
  std::vector<const SupportImage*> flat;
  AttentiveVectors out;
  for (std::size_t j = 0; j < clusters.size(); ++j) {
    if (clusters[j].empty()) throw std::invalid_argument("dag_encode: support cluster " + std::to_string(j) + " is empty");
    if (clusters[j].size() != K) {
      throw std::invalid_argument("dag_encode: clusters must share one shot count, got " + std::to_string(K) +
                                  " and " + std::to_string(clusters[j].size()));
    }
    for (const auto& s : clusters[j]) {
      flat.push_back(&s);
      out.support_classes.push_back(s.class_id);
    }
  }
  Tensor feats = backbone.forward_batch(stack_supports(flat));
  if (feats.dim(2) != static_cast<std::size_t>(pool) || feats.dim(3) != static_cast<std::size_t>(pool)) {
    throw ShapeError("dag_encode: support feature map " + shape_str(feats.shape()) + " does not match pool size " +
                     std::to_string(pool));
  }
  out.per_support = dag.encode(feats, weights, paths);
  out.per_class = {ops::group_mean_rows(out.per_support.cls, K), ops::group_mean_rows(out.per_support.reg, K)};
  return out;
}

}  // namespace afd
