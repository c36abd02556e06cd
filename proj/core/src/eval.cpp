#include "afd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "afd/model.hpp"

namespace afd {

namespace {

bool ranks_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.box < b.box;
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / double(v.size()))};
}

}  // namespace

DetectionSet nms(const DetectionSet& dets, double iou_thresh) {
  if (!(iou_thresh > 0.0 && iou_thresh < 1.0)) throw std::invalid_argument("nms: iou_thresh must be in (0,1)");
  DetectionSet sorted(dets);
  std::stable_sort(sorted.begin(), sorted.end(), ranks_before);
  DetectionSet kept;
  for (const auto& d : sorted) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (k.class_id == d.class_id && k.scene_id == d.scene_id && iou(k.box, d.box) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

std::optional<double> average_precision(const DetectionSet& dets, std::span<const Scene> scenes, int class_id,
                                        double iou_thresh) {
  std::map<std::uint64_t, std::vector<Box>> gt;
  std::map<std::uint64_t, std::vector<bool>> used;
  std::size_t total = 0;
  for (const auto& s : scenes) {
    for (const auto& o : s.objects) {
      if (o.class_id != class_id) continue;
      gt[s.id].push_back(o.box);
      ++total;
    }
  }
  if (total == 0) return std::nullopt;
  for (auto& [id, boxes] : gt) used[id].assign(boxes.size(), false);

  DetectionSet cls;
  for (const auto& d : dets)
    if (d.class_id == class_id) cls.push_back(d);
  std::stable_sort(cls.begin(), cls.end(), ranks_before);

  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < cls.size(); ++k) {
    const Detection& d = cls[k];
    auto it = gt.find(d.scene_id);
    if (it != gt.end()) {
      double best = -1.0;
      std::size_t best_g = 0;
      for (std::size_t g = 0; g < it->second.size(); ++g) {
        if (used[d.scene_id][g]) continue;
        const double o = iou(d.box, it->second[g]);
        if (o > best) best = o, best_g = g;
      }
      if (best >= iou_thresh) {
        used[d.scene_id][best_g] = true;
        ++tp;
      }
    }
    precision.push_back(double(tp) / double(k + 1));
    recall.push_back(double(tp) / double(total));
  }
  // Precision envelope from the right, then sum over recall steps.
  for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t k = 0; k < precision.size(); ++k) {
    ap += (recall[k] - prev_recall) * precision[k];
    prev_recall = recall[k];
  }
  return ap;
}

MapResult mean_average_precision(const DetectionSet& dets, std::span<const Scene> scenes, std::span<const int> classes,
                                 double iou_thresh) {
  MapResult r;
  double sum = 0.0;
  int counted = 0;
  for (int c : classes) {
    auto ap = average_precision(dets, scenes, c, iou_thresh);
    r.per_class.emplace_back(c, ap);
    if (ap) sum += *ap, ++counted;
  }
  r.map = counted ? sum / counted : 0.0;
  return r;
}

const char* subset_name(Subset s) {
  switch (s) {
    case Subset::base: return "base";
    case Subset::novel: return "novel";
    case Subset::all: return "all";
  }
  return "?";
}

Subset parse_subset(const std::string& s) {
  if (s == "base") return Subset::base;
  if (s == "novel") return Subset::novel;
  if (s == "all") return Subset::all;
  throw std::invalid_argument("unknown subset '" + s + "' (expected base, novel or all)");
}

EvalReport evaluate(const Model& model, const ClassSplit& split, const EvalOptions& options) {
  if (options.num_scenes < 1 || options.repeats < 1 || options.shots < 1) {
    throw std::invalid_argument("evaluate: num_scenes, repeats and shots must be >= 1");
  }
  const std::vector<int> all = split.all_classes();
  const std::vector<int> subset = options.subset == Subset::base    ? split.base_classes
                                  : options.subset == Subset::novel ? split.novel_classes
                                                                    : all;
  const WorldConfig& w = options.world;
  const InferenceOptions inference{options.score_thresh, options.nms_iou};

  EvalReport report;
  report.subset = options.subset;
  std::map<int, std::vector<double>> per_class;
  for (int r = 0; r < options.repeats; ++r) {
    Rng rng(derive_seed(eval_seed(options.master_seed), static_cast<std::uint64_t>(r)));
    const SupportPool pool = sample_support_pool(all, options.shots, rng, w);
    std::vector<std::vector<SupportImage>> clusters;
    for (int c : all) clusters.push_back(pool.at(c));
    const AttentiveVectors att = encode_supports(model, clusters);

    std::vector<Scene> scenes;
    DetectionSet dets;
    for (int i = 0; i < options.num_scenes; ++i) {
      scenes.push_back(gen_scene(rng, subset, w.max_objects, w.height, w.width, w));
      const Scene& s = scenes.back();
      auto d = detect(model, s.image, att, all, inference, s.id);
      dets.insert(dets.end(), d.begin(), d.end());
    }
    const MapResult m = mean_average_precision(dets, scenes, subset);
    for (const auto& [c, ap] : m.per_class) {
      if (ap) {
        per_class[c].push_back(*ap);
      } else {
        report.warnings.push_back("repeat " + std::to_string(r) + ": class " + std::to_string(c) +
                                  " has no ground truth; excluded from mAP");
      }
    }
    report.map_per_repeat.push_back(m.map);
  }
  for (int c : subset) {
    ClassAp ca;
    ca.class_id = c;
    ca.per_repeat = per_class[c];
    std::tie(ca.mean, ca.std) = mean_std(ca.per_repeat);
    report.classes.push_back(std::move(ca));
  }
  std::tie(report.map_mean, report.map_std) = mean_std(report.map_per_repeat);
  return report;
}

void write_eval_csv(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "subset,class_id,ap50_mean,ap50_std,map_mean,map_std\n";
  os << std::setprecision(17);
  for (const auto& c : report.classes) {
    os << subset_name(report.subset) << ',' << c.class_id << ',' << c.mean << ',' << c.std << ',' << report.map_mean
       << ',' << report.map_std << '\n';
  }
}

std::string format_eval_table(const EvalReport& report) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "subset " << subset_name(report.subset) << ", " << report.map_per_repeat.size() << " repeats\n";
  os << "class  shape      AP50 mean  AP50 std\n";
  for (const auto& c : report.classes) {
    os << std::setw(5) << c.class_id << "  " << std::left << std::setw(9) << shape_name(shape_of(c.class_id))
       << std::right << "  " << std::setw(9) << c.mean << "  " << std::setw(8) << c.std << '\n';
  }
  os << "mAP50  " << report.map_mean << " +/- " << report.map_std << '\n';
  return os.str();
}

}  // namespace afd
