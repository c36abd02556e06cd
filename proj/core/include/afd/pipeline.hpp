#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "afd/eval.hpp"
#include "afd/model.hpp"

namespace afd {

/// Invalid configuration; the message names the offending field.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values during training. Carries the episode that triggered it.
class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, long iteration, std::uint64_t episode_seed)
      : std::runtime_error(what), iteration(iteration), episode_seed(episode_seed) {}
  long iteration;
  std::uint64_t episode_seed;
};

struct TrainConfig {
  std::uint64_t seed = 1;
  int num_classes = 5;
  int num_novel = 2;

  int base_episodes = 2000;
  int finetune_episodes = 400;
  int base_shots = 5;
  int finetune_shots = 5;
  int base_m = 3;
  int finetune_m = 5;

  double lr = 0.01;
  double finetune_lr = 0.001;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double lr_decay_factor = 0.1;
  int base_decay_interval = 500;
  int finetune_decay_interval = 150;
  int accumulate = 1;  // episodes per optimizer step
  int log_interval = 1;

  ModelConfig model;
  FreezeFlags freeze;

  int eval_scenes = 100;
  int eval_repeats = 10;
  int eval_shots = 5;
  double score_thresh = 0.05;
  double nms_iou = 0.5;

  double ablation_fraction = 0.25;
  int threads = 0;  // episode prefetch workers; 0 builds episodes inline

  WorldConfig world;

  /// Throws ConfigError naming the first invalid field.
  void validate() const;
  ClassSplit split() const { return make_split(num_classes, num_novel, seed); }
  EvalOptions eval_options(Subset subset) const;
};

/// Keys missing from the JSON take their defaults; unknown keys are an error.
TrainConfig config_from_json(const std::string& text);
TrainConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const TrainConfig& config);

/// Momentum buffers keyed by parameter name.
struct SgdState {
  std::map<std::string, std::vector<double>> velocity;
};

/// v = momentum * v + grad + weight_decay * p; p -= lr * v; grads are cleared.
/// A trainable parameter without a gradient is an error.
void sgd_step(const ParamList& params, SgdState& state, double lr, double momentum, double weight_decay);

struct LogRow {
  long iteration = 0;
  double lr = 0.0;
  double rpn_cls = 0, rpn_reg = 0, rcnn_cls = 0, rcnn_reg = 0, meta_cls = 0, meta_reg = 0, total = 0;
  double lambda_cls_conv = 0, lambda_cls_fc = 0, lambda_reg_conv = 0, lambda_reg_fc = 0;
};

inline constexpr const char* kTrainLogHeader =
    "iteration,lr,rpn_cls,rpn_reg,rcnn_cls,rcnn_reg,meta_cls,meta_reg,total,"
    "lambda_cls_conv,lambda_cls_fc,lambda_reg_conv,lambda_reg_fc";
std::string format_log_row(const LogRow& row);

using LogSink = std::function<void(const LogRow&)>;

struct Checkpoint {
  std::vector<NamedTensor> parameters;
  std::vector<NamedTensor> momentum;
  long iteration = 0;
  std::string config_json;
};

Checkpoint make_checkpoint(const Model& model, const SgdState& state, long iteration, const TrainConfig& config);
/// Fresh model built from `config` with the checkpoint's parameters.
Model model_from_checkpoint(const Checkpoint& ckpt, const TrainConfig& config);
/// As above using the config stored in the checkpoint.
Model model_from_checkpoint(const Checkpoint& ckpt);
TrainConfig checkpoint_config(const Checkpoint& ckpt);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Seed of episode `index` in a phase; also used in abort diagnostics.
std::uint64_t episode_seed(std::uint64_t master_seed, Phase phase, long index);

/// The untrained model a base run with this config starts from.
Model initial_model(const TrainConfig& config);

/// Base phase: episodes over base classes only.
Checkpoint train_base(const TrainConfig& config, const LogSink& log = {});

/// Fine-tuning on balanced base and novel classes with a K-shot support pool
/// sampled once and reused by every episode.
Checkpoint finetune(const Checkpoint& base, int shots, const TrainConfig& config, const LogSink& log = {});

/// The fixed pool a fine-tuning run with this config and K uses.
SupportPool finetune_support_pool(const TrainConfig& config, int shots);

/// Default fine-tuning shot counts; others are allowed with a warning.
bool is_standard_shot_count(int shots);

struct AblationCell {
  std::string name;
  PathFlags paths;
  bool meta_cls = true;
  bool meta_reg = true;
};

/// The eight fusion combinations: four single-path rows, three rows with one
/// task using both paths, and the full model.
std::vector<AblationCell> table4_cells();
/// The four meta-loss combinations.
std::vector<AblationCell> table5_cells();

/// Config for one ablation cell with episode counts scaled by
/// `ablation_fraction`.
TrainConfig ablation_config(const TrainConfig& base, const AblationCell& cell);

}  // namespace afd
