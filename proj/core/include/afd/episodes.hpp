#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <vector>

#include "afd/box.hpp"
#include "afd/rng.hpp"
#include "afd/tensor.hpp"

namespace afd {

/// Disjoint base / novel class sets over ids 0..num_classes-1.
struct ClassSplit {
  std::vector<int> base_classes;
  std::vector<int> novel_classes;

  int num_classes() const { return static_cast<int>(base_classes.size() + novel_classes.size()); }
  bool is_novel(int class_id) const;
  std::vector<int> all_classes() const;
};

ClassSplit make_split(int num_classes, int num_novel, std::uint64_t seed);

struct GtObject {
  int class_id = 0;
  Box box{};
};

/// Synthetic RGB image [3,H,W] in [0,1] with its ground-truth objects.
struct Scene {
  std::uint64_t id = 0;
  Tensor image;
  std::vector<GtObject> objects;

  std::size_t height() const { return image.dim(1); }
  std::size_t width() const { return image.dim(2); }
};

/// Support image: RGB plus a binary mask channel over one object, [4,Hs,Ws].
struct SupportImage {
  Tensor image_with_mask;
  int class_id = 0;
  std::uint64_t source_scene = 0;
  Box box{};  // region covered by the mask, in support-image pixels
};

/// One task: a query scene and m class clusters of K support images.
struct Episode {
  Scene query;
  std::vector<int> class_list;
  std::vector<std::vector<SupportImage>> support;  // support[j] has class class_list[j]

  std::size_t shots() const { return support.empty() ? 0 : support.front().size(); }
};

enum class Phase { base, finetune };
enum class QueryPool { any, base, novel };

struct WorldConfig {
  int height = 64;
  int width = 64;
  int support_height = 32;
  int support_width = 32;
  int max_objects = 3;
  int min_side = 14;
  int max_side = 30;
  double noise_amplitude = 0.1;
};

enum class ShapeKind { circle, square, triangle, cross, star };
ShapeKind shape_of(int class_id);
const char* shape_name(ShapeKind kind);

/// Renders 1..max_objects non-overlapping shapes drawn from `class_pool` on a
/// noise background. Boxes are measured from the rendered pixels.
Scene gen_scene(Rng& rng, std::span<const int> class_pool, int max_objects, int height, int width,
                const WorldConfig& world = {});

/// As gen_scene, but the first object is forced to `required_class`.
Scene gen_scene_with(Rng& rng, int required_class, std::span<const int> class_pool, int max_objects, int height,
                     int width, const WorldConfig& world = {});

/// Resizes the scene to the target size and appends a mask channel that is 1
/// exactly on pixels whose centers lie inside the chosen object's resized box.
SupportImage render_support(const Scene& scene, std::size_t object_index, int target_height, int target_width);

/// Fixed K-shot support images per class, sampled once per fine-tuning run.
using SupportPool = std::map<int, std::vector<SupportImage>>;

SupportPool sample_support_pool(std::span<const int> classes, int shots, Rng& rng, const WorldConfig& world = {});

struct EpisodeRequest {
  Phase phase = Phase::base;
  int m = 3;
  int shots = 1;
  QueryPool query_pool = QueryPool::any;
  const SupportPool* fixed_support = nullptr;  // finetune: reuse these shots
};

/// Assembles one episode. Base phase draws classes from the base set only;
/// fine-tuning draws from base and novel classes.
Episode build_episode(const EpisodeRequest& req, const ClassSplit& split, Rng& rng, const WorldConfig& world = {});

/// Writes scenes as a named-tensor archive plus a comma-separated index:
/// scene_id,num_objects,class,x1,y1,x2,y2[,class,x1,y1,x2,y2...]
void save_scene_cache(const std::filesystem::path& dir, std::span<const Scene> scenes);
std::vector<Scene> load_scene_cache(const std::filesystem::path& dir);

}  // namespace afd
