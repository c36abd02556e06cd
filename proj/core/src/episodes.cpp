#include "afd/episodes.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "afd/archive.hpp"

namespace afd {

namespace {

constexpr double kPi = 3.14159265358979323846;

constexpr std::array<std::array<double, 3>, 5> kPalette = {{
    {0.85, 0.15, 0.15},  // red
    {0.15, 0.80, 0.20},  // green
    {0.20, 0.30, 0.90},  // blue
    {0.90, 0.85, 0.10},  // yellow
    {0.85, 0.20, 0.85},  // magenta
}};

constexpr double kColorJitter = 0.08;

std::array<double, 3> base_color(int class_id) { return kPalette[(class_id + class_id / 5) % 5]; }

bool point_in_polygon(double x, double y, std::span<const std::array<double, 2>> poly) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto& a = poly[i];
    const auto& b = poly[j];
    if ((a[1] > y) != (b[1] > y) && x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0]) inside = !inside;
  }
  return inside;
}

// Whether pixel center (px, py) is covered by a shape occupying the square
// [x0, x0+s) x [y0, y0+s).
bool covers(ShapeKind kind, double px, double py, double x0, double y0, double s) {
  const double cx = x0 + 0.5 * s, cy = y0 + 0.5 * s, r = 0.5 * s;
  if (px < x0 || px >= x0 + s || py < y0 || py >= y0 + s) return false;
  switch (kind) {
    case ShapeKind::circle:
      return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
    case ShapeKind::square:
      return true;
    case ShapeKind::triangle:
      return std::abs(px - cx) <= 0.5 * (py - y0);
    case ShapeKind::cross: {
      const double arm = s / 6.0;
      return std::abs(px - cx) <= arm || std::abs(py - cy) <= arm;
    }
    case ShapeKind::star: {
      std::array<std::array<double, 2>, 10> poly{};
      for (int k = 0; k < 10; ++k) {
        const double rad = (k % 2 == 0) ? r : 0.45 * r;
        const double ang = -kPi / 2 + k * kPi / 5;
        poly[k] = {cx + rad * std::cos(ang), cy + r * 0.1 + rad * std::sin(ang)};
      }
      return point_in_polygon(px, py, poly);
    }
  }
  return false;
}

bool overlaps(const Box& a, const Box& b, double margin) {
  return a[0] < b[2] + margin && b[0] < a[2] + margin && a[1] < b[3] + margin && b[1] < a[3] + margin;
}

void check_size(int height, int width, const WorldConfig& world) {
  if (height < world.min_side || width < world.min_side || world.min_side < 8) {
    throw std::invalid_argument("gen_scene: size " + std::to_string(height) + "x" + std::to_string(width) +
                                " too small to place a shape of side " + std::to_string(world.min_side));
  }
}

// Draws one object of `class_id` if it fits; returns false when placement failed.
bool place_object(Rng& rng, int class_id, Tensor& image, std::vector<GtObject>& objects, std::vector<Box>& squares,
                  const WorldConfig& world) {
  const int H = static_cast<int>(image.dim(1)), W = static_cast<int>(image.dim(2));
  const int max_side = std::min({world.max_side, H, W});
  const ShapeKind kind = shape_of(class_id);
  for (int attempt = 0; attempt < 50; ++attempt) {
    const int s = rng.uniform_int(world.min_side, std::max(world.min_side, max_side));
    const int x0 = rng.uniform_int(0, W - s), y0 = rng.uniform_int(0, H - s);
    const Box square{double(x0), double(y0), double(x0 + s), double(y0 + s)};
    bool clash = false;
    for (const auto& other : squares) clash = clash || overlaps(square, other, 1.0);
    if (clash) continue;

    auto color = base_color(class_id);
    for (auto& c : color) c = std::clamp(c + rng.uniform(-kColorJitter, kColorJitter), 0.0, 1.0);

    int minx = W, miny = H, maxx = -1, maxy = -1;
    auto px = image.mutable_values();
    for (int y = y0; y < y0 + s; ++y)
      for (int x = x0; x < x0 + s; ++x) {
        if (!covers(kind, x + 0.5, y + 0.5, x0, y0, s)) continue;
        for (int ch = 0; ch < 3; ++ch) px[(static_cast<std::size_t>(ch) * H + y) * W + x] = color[ch];
        minx = std::min(minx, x), maxx = std::max(maxx, x);
        miny = std::min(miny, y), maxy = std::max(maxy, y);
      }
    if (maxx < 0) continue;
    objects.push_back({class_id, {double(minx), double(miny), double(maxx + 1), double(maxy + 1)}});
    squares.push_back(square);
    return true;
  }
  return false;
}

Tensor noise_image(Rng& rng, int height, int width, double amplitude) {
  std::vector<double> v(3 * static_cast<std::size_t>(height) * width);
  for (auto& x : v) x = rng.uniform(0.0, amplitude);
  return Tensor::from({3, static_cast<std::size_t>(height), static_cast<std::size_t>(width)}, std::move(v));
}

}  // namespace

bool ClassSplit::is_novel(int class_id) const {
  return std::find(novel_classes.begin(), novel_classes.end(), class_id) != novel_classes.end();
}

std::vector<int> ClassSplit::all_classes() const {
  std::vector<int> all(base_classes);
  all.insert(all.end(), novel_classes.begin(), novel_classes.end());
  std::sort(all.begin(), all.end());
  return all;
}

ClassSplit make_split(int num_classes, int num_novel, std::uint64_t seed) {
  if (num_novel < 1 || num_novel >= num_classes) {
    throw std::invalid_argument("make_split: need 1 <= num_novel < num_classes, got num_novel=" +
                                std::to_string(num_novel) + ", num_classes=" + std::to_string(num_classes));
  }
  std::vector<int> ids(num_classes);
  for (int i = 0; i < num_classes; ++i) ids[i] = i;
  Rng rng(derive_seed(seed, 0x5B117));
  rng.shuffle(ids);
  ClassSplit split;
  split.novel_classes.assign(ids.begin(), ids.begin() + num_novel);
  split.base_classes.assign(ids.begin() + num_novel, ids.end());
  std::sort(split.novel_classes.begin(), split.novel_classes.end());
  std::sort(split.base_classes.begin(), split.base_classes.end());
  return split;
}

ShapeKind shape_of(int class_id) { return static_cast<ShapeKind>(class_id % 5); }

const char* shape_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
    case ShapeKind::cross: return "cross";
    case ShapeKind::star: return "star";
  }
  return "?";
}

Scene gen_scene_with(Rng& rng, int required_class, std::span<const int> class_pool, int max_objects, int height,
                     int width, const WorldConfig& world) {
  if (class_pool.empty()) throw std::invalid_argument("gen_scene: empty class pool");
  if (max_objects < 1) throw std::invalid_argument("gen_scene: max_objects must be >= 1");
  check_size(height, width, world);

  Scene scene;
  scene.id = rng.next_u64();
  scene.image = noise_image(rng, height, width, world.noise_amplitude);
  std::vector<Box> squares;
  const int count = rng.uniform_int(1, max_objects);
  for (int k = 0; k < count; ++k) {
    const int cls = k == 0 ? required_class : class_pool[rng.below(class_pool.size())];
    const bool placed = place_object(rng, cls, scene.image, scene.objects, squares, world);
    if (!placed && k == 0) throw std::invalid_argument("gen_scene: could not place a shape in the image");
    if (!placed) break;
  }
  return scene;
}

Scene gen_scene(Rng& rng, std::span<const int> class_pool, int max_objects, int height, int width,
                const WorldConfig& world) {
  if (class_pool.empty()) throw std::invalid_argument("gen_scene: empty class pool");
  const int first = class_pool[rng.below(class_pool.size())];
  return gen_scene_with(rng, first, class_pool, max_objects, height, width, world);
}

SupportImage render_support(const Scene& scene, std::size_t object_index, int target_height, int target_width) {
  if (object_index >= scene.objects.size()) {
    throw std::out_of_range("render_support: object index " + std::to_string(object_index) + " out of range (" +
                            std::to_string(scene.objects.size()) + " objects)");
  }
  if (target_height < 1 || target_width < 1) throw std::invalid_argument("render_support: empty target size");
  const std::size_t H = scene.height(), W = scene.width();
  const std::size_t th = target_height, tw = target_width;
  const double sy = double(H) / th, sx = double(W) / tw;
  const auto src = scene.image.values();
  std::vector<double> out(4 * th * tw, 0.0);

  // Bilinear resampling with half-pixel centers.
  for (std::size_t y = 0; y < th; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(H - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, H - 1);
    const double wy = fy - y0;
    for (std::size_t x = 0; x < tw; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(W - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, W - 1);
      const double wx = fx - x0;
      for (std::size_t c = 0; c < 3; ++c) {
        const double* p = src.data() + c * H * W;
        out[(c * th + y) * tw + x] = (1 - wy) * ((1 - wx) * p[y0 * W + x0] + wx * p[y0 * W + x1]) +
                                     wy * ((1 - wx) * p[y1 * W + x0] + wx * p[y1 * W + x1]);
      }
    }
  }

  const GtObject& obj = scene.objects[object_index];
  const Box scaled{obj.box[0] / sx, obj.box[1] / sy, obj.box[2] / sx, obj.box[3] / sy};
  // Pixels whose centers fall inside the scaled box; at least one pixel per axis.
  auto snap = [](double lo, double hi, std::size_t limit) {
    auto a = static_cast<std::size_t>(std::clamp(std::ceil(lo - 0.5), 0.0, double(limit - 1)));
    auto b = static_cast<std::size_t>(std::clamp(std::ceil(hi - 0.5), 0.0, double(limit)));
    return std::pair{a, std::max(b, a + 1)};
  };
  const auto [mx0, mx1] = snap(scaled[0], scaled[2], tw);
  const auto [my0, my1] = snap(scaled[1], scaled[3], th);
  for (std::size_t y = my0; y < my1; ++y)
    for (std::size_t x = mx0; x < mx1; ++x) out[(3 * th + y) * tw + x] = 1.0;
  const Box box{double(mx0), double(my0), double(mx1), double(my1)};

  SupportImage s;
  s.image_with_mask = Tensor::from({4, th, tw}, std::move(out));
  s.class_id = obj.class_id;
  s.source_scene = scene.id;
  s.box = box;
  return s;
}

namespace {

SupportImage fresh_support(Rng& rng, int class_id, std::span<const int> pool, const WorldConfig& world,
                           std::uint64_t avoid_scene) {
  for (;;) {
    Scene scene = gen_scene_with(rng, class_id, pool, world.max_objects, world.height, world.width, world);
    if (scene.id == avoid_scene) continue;
    std::vector<std::size_t> matches;
    for (std::size_t i = 0; i < scene.objects.size(); ++i) {
      if (scene.objects[i].class_id == class_id) matches.push_back(i);
    }
    const std::size_t pick = matches[rng.below(matches.size())];
    return render_support(scene, pick, world.support_height, world.support_width);
  }
}

}  // namespace

SupportPool sample_support_pool(std::span<const int> classes, int shots, Rng& rng, const WorldConfig& world) {
  if (shots < 1) throw std::invalid_argument("sample_support_pool: shots must be >= 1");
  SupportPool pool;
  for (int c : classes) {
    auto& shots_for_class = pool[c];
    for (int k = 0; k < shots; ++k) shots_for_class.push_back(fresh_support(rng, c, classes, world, 0));
  }
  return pool;
}

Episode build_episode(const EpisodeRequest& req, const ClassSplit& split, Rng& rng, const WorldConfig& world) {
  if (req.m < 1 || req.shots < 1) throw std::invalid_argument("build_episode: m and K must be >= 1");
  const std::vector<int> candidates = req.phase == Phase::base ? split.base_classes : split.all_classes();
  if (static_cast<std::size_t>(req.m) > candidates.size()) {
    throw std::invalid_argument("build_episode: m=" + std::to_string(req.m) + " exceeds the " +
                                std::to_string(candidates.size()) + " classes available in this phase");
  }

  Episode ep;
  ep.class_list = candidates;
  if (static_cast<std::size_t>(req.m) < candidates.size()) {
    rng.shuffle(ep.class_list);
    ep.class_list.resize(req.m);
  }
  std::sort(ep.class_list.begin(), ep.class_list.end());

  std::vector<int> query_pool;
  if (req.phase == Phase::finetune && req.query_pool != QueryPool::any) {
    for (int c : ep.class_list) {
      if (split.is_novel(c) == (req.query_pool == QueryPool::novel)) query_pool.push_back(c);
    }
  }
  if (query_pool.empty()) query_pool = ep.class_list;
  ep.query = gen_scene(rng, query_pool, world.max_objects, world.height, world.width, world);

  for (int c : ep.class_list) {
    if (req.fixed_support) {
      auto it = req.fixed_support->find(c);
      if (it != req.fixed_support->end()) {
        if (it->second.size() != static_cast<std::size_t>(req.shots)) {
          throw std::invalid_argument("build_episode: fixed support pool for class " + std::to_string(c) + " has " +
                                      std::to_string(it->second.size()) + " shots, expected " +
                                      std::to_string(req.shots));
        }
        ep.support.push_back(it->second);
        continue;
      }
    }
    std::vector<SupportImage> cluster;
    for (int k = 0; k < req.shots; ++k) cluster.push_back(fresh_support(rng, c, candidates, world, ep.query.id));
    ep.support.push_back(std::move(cluster));
  }
  return ep;
}

// --- scene cache ------------------------------------------------------------------

void save_scene_cache(const std::filesystem::path& dir, std::span<const Scene> scenes) {
  std::filesystem::create_directories(dir);
  std::vector<NamedTensor> tensors;
  std::ofstream index(dir / "index.csv");
  if (!index) throw std::runtime_error("cannot write " + (dir / "index.csv").string());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Scene& s = scenes[i];
    tensors.push_back({"scene/" + std::to_string(i) + "/image", s.image});
    index << s.id << ',' << s.objects.size();
    for (const auto& o : s.objects) {
      index << ',' << o.class_id;
      for (double v : o.box) index << ',' << static_cast<long>(std::lround(v));
    }
    index << '\n';
  }
  write_archive(dir / "scenes.afdn", tensors);
}

std::vector<Scene> load_scene_cache(const std::filesystem::path& dir) {
  auto tensors = read_archive(dir / "scenes.afdn");
  std::ifstream index(dir / "index.csv");
  if (!index) throw std::runtime_error("cannot read " + (dir / "index.csv").string());
  std::vector<Scene> scenes;
  std::string line;
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() < 2) throw std::runtime_error("scene index: malformed line '" + line + "'");
    Scene s;
    s.id = std::stoull(fields[0]);
    const std::size_t n = std::stoul(fields[1]);
    if (fields.size() != 2 + 5 * n) throw std::runtime_error("scene index: wrong field count in '" + line + "'");
    for (std::size_t k = 0; k < n; ++k) {
      GtObject o;
      o.class_id = std::stoi(fields[2 + 5 * k]);
      for (int j = 0; j < 4; ++j) o.box[j] = std::stod(fields[3 + 5 * k + j]);
      s.objects.push_back(o);
    }
    const std::size_t i = scenes.size();
    if (i >= tensors.size()) throw std::runtime_error("scene index lists more scenes than the archive holds");
    s.image = tensors[i].tensor;
    scenes.push_back(std::move(s));
  }
  if (scenes.size() != tensors.size()) throw std::runtime_error("scene index and archive disagree on scene count");
  return scenes;
}

}  // namespace afd
