#pragma once

#include <span>
#include <string>
#include <vector>

#include "afd/layers.hpp"
#include "afd/perception.hpp"

namespace afd {

enum class Task { cls, reg };
const char* task_name(Task t);

/// The four learnable fusion scalars. DQE and DAG hold no copies; both read
/// the tensors stored here, so their gradients accumulate in one place.
struct FusionWeights {
  Tensor conv_cls;
  Tensor fc_cls;
  Tensor conv_reg;
  Tensor fc_reg;

  static FusionWeights init();
  const Tensor& conv(Task t) const { return t == Task::cls ? conv_cls : conv_reg; }
  const Tensor& fc(Task t) const { return t == Task::cls ? fc_cls : fc_reg; }
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Which encoder paths feed each task's fused vector.
struct PathFlags {
  bool cls_conv = true;
  bool cls_fc = true;
  bool reg_conv = true;
  bool reg_fc = true;

  bool conv(Task t) const { return t == Task::cls ? cls_conv : reg_conv; }
  bool fc(Task t) const { return t == Task::cls ? cls_fc : reg_fc; }
  /// Throws std::invalid_argument when a task has no path left.
  void validate() const;
  std::size_t fused_dim(Task t) const;
  bool operator==(const PathFlags&) const = default;
};

inline constexpr std::size_t kConvDim = 64;
inline constexpr std::size_t kFcHidden = 128;
inline constexpr std::size_t kFcDim = 64;

/// [lambda_conv * conv_feat, lambda_fc * fc_feat] along the last axis. Either
/// feature may be undefined when its path is disabled.
Tensor afm_fuse(const Tensor& conv_feat, const Tensor& fc_feat, Task task, const FusionWeights& weights);

/// Conv path: 3x3 conv + ReLU + global average pool.
struct ConvEncoder {
  Conv2d conv;
  static ConvEncoder init(Rng& rng, std::size_t channels);
  Tensor forward(const Tensor& patches) const;  // [N,C,P,P] -> [N,64]
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Fc path: flatten + fc + ReLU + fc.
struct FcEncoder {
  Linear fc1;
  Linear fc2;
  static FcEncoder init(Rng& rng, std::size_t in);
  Tensor forward(const Tensor& patches) const;  // [N,C,P,P] -> [N,64]
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Per-task vectors stacked as rows: cls [n, d_cls], reg [n, d_reg].
struct TaskVectors {
  Tensor cls;
  Tensor reg;

  const Tensor& get(Task t) const { return t == Task::cls ? cls : reg; }
  std::size_t size() const { return cls.dim(0); }
};

/// Four independent sub-encoders, one conv and one fc path per task. The
/// query-side DQE and the support-side DAG are two instances of this.
struct DualEncoder {
  ConvEncoder conv_cls, conv_reg;
  FcEncoder fc_cls, fc_reg;

  static DualEncoder init(Rng& rng, std::size_t channels, int pool);
  TaskVectors encode(const Tensor& patches, const FusionWeights& weights, const PathFlags& paths) const;
  void collect(const std::string& prefix, ParamList& out) const;
  /// Parameters of one path, used to exclude disabled paths from training.
  void collect_path(const std::string& prefix, Task task, bool conv, ParamList& out) const;
  std::vector<Shape> layer_shapes() const;
};

/// RoI vectors from pooled query patches [n, C, P, P].
TaskVectors dqe_encode(const DualEncoder& dqe, const Tensor& patches, const FusionWeights& weights,
                       const PathFlags& paths);

struct AttentiveVectors {
  TaskVectors per_support;  // m*K rows, cluster-major
  TaskVectors per_class;    // m rows, the mean of each cluster
  std::vector<int> support_classes;
};

/// Class-attentive vectors: every support image passes the shared backbone,
/// then the DAG encoders, and each cluster of K vectors is averaged.
AttentiveVectors dag_encode(const DualEncoder& dag, const Backbone& backbone,
                            std::span<const std::vector<SupportImage>> clusters, const FusionWeights& weights,
                            const PathFlags& paths, int pool);

}  // namespace afd
