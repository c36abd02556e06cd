#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "afd/episodes.hpp"
#include "afd/fusion.hpp"

namespace afd {

struct Model;
struct InferenceOptions;

/// Per-class greedy suppression. Candidates are visited by descending score,
/// ties broken by the lexicographically smaller box; a candidate is dropped
/// when its IoU with a kept box of the same class exceeds `iou_thresh`. The
/// result is ordered the same way.
DetectionSet nms(const DetectionSet& dets, double iou_thresh);

/// All-point interpolated AP for one class. Detections are matched by
/// descending score to the unmatched ground-truth box of that class (same
/// scene) with the highest IoU, provided it reaches `iou_thresh`. Returns
/// nullopt when the class has no ground truth.
std::optional<double> average_precision(const DetectionSet& dets, std::span<const Scene> scenes, int class_id,
                                        double iou_thresh = 0.5);

struct MapResult {
  std::vector<std::pair<int, std::optional<double>>> per_class;
  double map = 0.0;  // mean over classes with ground truth
};

MapResult mean_average_precision(const DetectionSet& dets, std::span<const Scene> scenes,
                                 std::span<const int> classes, double iou_thresh = 0.5);

enum class Subset { base, novel, all };
const char* subset_name(Subset s);
Subset parse_subset(const std::string& s);

struct EvalOptions {
  Subset subset = Subset::novel;
  int num_scenes = 100;
  int repeats = 10;
  int shots = 5;
  std::uint64_t master_seed = 1;
  double score_thresh = 0.05;
  double nms_iou = 0.5;
  WorldConfig world;
};

struct ClassAp {
  int class_id = 0;
  std::vector<double> per_repeat;
  double mean = 0.0;
  double std = 0.0;
};

struct EvalReport {
  Subset subset = Subset::novel;
  std::vector<ClassAp> classes;
  std::vector<double> map_per_repeat;
  double map_mean = 0.0;
  double map_std = 0.0;
  std::vector<std::string> warnings;
};

/// The scene stream seed for evaluation, disjoint from the training streams.
inline std::uint64_t eval_seed(std::uint64_t master_seed) { return master_seed ^ 0x5EEDull; }

/// Each repeat draws fresh K-shot supports for every class and `num_scenes`
/// held-out scenes containing only the subset's classes, detects against all
/// classes and scores AP50 on the subset's classes. Mean and population
/// standard deviation are taken over repeats.
EvalReport evaluate(const Model& model, const ClassSplit& split, const EvalOptions& options);

void write_eval_csv(const std::filesystem::path& path, const EvalReport& report);
std::string format_eval_table(const EvalReport& report);

}  // namespace afd
