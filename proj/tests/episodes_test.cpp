#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "afd/episodes.hpp"

namespace afd {
namespace {

// Measures a single object's box straight from the pixels: anything clearly
// brighter than the noise floor in some channel belongs to the shape.
Box measure_box(const Scene& s, double noise_amplitude) {
  const std::size_t H = s.height(), W = s.width();
  long minx = W, miny = H, maxx = -1, maxy = -1;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      double peak = 0.0;
      for (std::size_t c = 0; c < 3; ++c) peak = std::max(peak, s.image.at((c * H + y) * W + x));
      if (peak > noise_amplitude + 0.3) {
        minx = std::min<long>(minx, x), maxx = std::max<long>(maxx, x);
        miny = std::min<long>(miny, y), maxy = std::max<long>(maxy, y);
      }
    }
  return {double(minx), double(miny), double(maxx + 1), double(maxy + 1)};
}

TEST(Split, SizesAndDisjointness) {
  const auto split = make_split(5, 2, 7);
  EXPECT_EQ(split.base_classes.size(), 3u);
  EXPECT_EQ(split.novel_classes.size(), 2u);
  std::set<int> all(split.base_classes.begin(), split.base_classes.end());
  for (int c : split.novel_classes) EXPECT_TRUE(all.insert(c).second) << "class " << c << " in both sets";
  EXPECT_EQ(all.size(), 5u);
}

TEST(Split, DeterministicPerSeed) {
  const auto a = make_split(5, 2, 7), b = make_split(5, 2, 7);
  EXPECT_EQ(a.base_classes, b.base_classes);
  EXPECT_EQ(a.novel_classes, b.novel_classes);
}

TEST(Split, RejectsTooManyNovel) {
  EXPECT_THROW(make_split(5, 5, 1), std::invalid_argument);
  EXPECT_THROW(make_split(5, 0, 1), std::invalid_argument);
}

TEST(Split, DisjointForManySeeds) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto s = make_split(8, 3, seed);
    for (int c : s.novel_classes) {
      EXPECT_EQ(std::count(s.base_classes.begin(), s.base_classes.end(), c), 0);
    }
  }
}

TEST(Scene, SingleClassSingleObject) {
  Rng rng(1);
  const std::vector<int> pool{0};
  const Scene s = gen_scene(rng, pool, 1, 64, 64);
  ASSERT_EQ(s.objects.size(), 1u);
  EXPECT_EQ(s.objects[0].class_id, 0);
  EXPECT_EQ(s.image.shape(), (Shape{3, 64, 64}));
}

TEST(Scene, StoredBoxMatchesRenderedPixels) {
  const WorldConfig world;
  Rng rng(2);
  for (int cls = 0; cls < 5; ++cls) {
    for (int trial = 0; trial < 20; ++trial) {
      const std::vector<int> pool{cls};
      const Scene s = gen_scene(rng, pool, 1, 64, 64);
      const Box measured = measure_box(s, world.noise_amplitude);
      for (int k = 0; k < 4; ++k) EXPECT_NEAR(measured[k], s.objects[0].box[k], 1.0) << "class " << cls;
    }
  }
}

TEST(Scene, InvariantsHoldOverManyScenes) {
  Rng rng(3);
  const std::vector<int> pool{0, 1, 2, 3, 4};
  for (int i = 0; i < 300; ++i) {
    const Scene s = gen_scene(rng, pool, 3, 64, 64);
    ASSERT_GE(s.objects.size(), 1u);
    ASSERT_LE(s.objects.size(), 3u);
    for (const auto& o : s.objects) {
      EXPECT_GE(o.box[0], 0);
      EXPECT_GE(o.box[1], 0);
      EXPECT_LE(o.box[2], 64);
      EXPECT_LE(o.box[3], 64);
      EXPECT_GE(box_width(o.box), 8);
      EXPECT_GE(box_height(o.box), 8);
    }
    for (double v : s.image.values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Scene, SameRngStateSameScene) {
  Rng a(4), b(4);
  const std::vector<int> pool{0, 1, 2};
  const Scene s1 = gen_scene(a, pool, 3, 64, 64), s2 = gen_scene(b, pool, 3, 64, 64);
  EXPECT_EQ(s1.id, s2.id);
  ASSERT_EQ(s1.objects.size(), s2.objects.size());
  EXPECT_TRUE(std::equal(s1.image.values().begin(), s1.image.values().end(), s2.image.values().begin()));
}

TEST(Scene, TooSmallIsError) {
  Rng rng(5);
  const std::vector<int> pool{0};
  EXPECT_THROW(gen_scene(rng, pool, 1, 6, 6), std::invalid_argument);
  EXPECT_THROW(gen_scene(rng, {}, 1, 64, 64), std::invalid_argument);
}

TEST(Support, FullFrameObjectMasksEverything) {
  Scene s;
  s.image = Tensor::full({3, 64, 64}, 0.5);
  s.objects.push_back({2, {0, 0, 64, 64}});
  const auto sup = render_support(s, 0, 32, 32);
  for (std::size_t i = 3 * 32 * 32; i < 4 * 32 * 32; ++i) EXPECT_EQ(sup.image_with_mask.at(i), 1.0);
  EXPECT_EQ(sup.class_id, 2);
}

TEST(Support, MaskAreaMatchesResizedBox) {
  Rng rng(6);
  const std::vector<int> pool{0, 1, 2, 3, 4};
  for (int i = 0; i < 100; ++i) {
    const Scene s = gen_scene(rng, pool, 3, 64, 64);
    const std::size_t pick = rng.below(s.objects.size());
    const auto sup = render_support(s, pick, 32, 32);
    EXPECT_EQ(sup.class_id, s.objects[pick].class_id);
    double mask_sum = 0.0;
    long minx = 32, miny = 32, maxx = -1, maxy = -1;
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x) {
        const double m = sup.image_with_mask.at((3 * 32 + y) * 32 + x);
        ASSERT_TRUE(m == 0.0 || m == 1.0);
        if (m == 1.0) {
          mask_sum += 1;
          minx = std::min<long>(minx, x), maxx = std::max<long>(maxx, x);
          miny = std::min<long>(miny, y), maxy = std::max<long>(maxy, y);
        }
      }
    const Box& b = s.objects[pick].box;
    const double w = box_width(b) / 2, h = box_height(b) / 2;
    // area within a one-pixel boundary band
    EXPECT_LE(mask_sum, (w + 1) * (h + 1));
    EXPECT_GE(mask_sum, std::max(0.0, w - 1) * std::max(0.0, h - 1));
    const Box mask_box{double(minx), double(miny), double(maxx + 1), double(maxy + 1)};
    const Box resized{b[0] / 2, b[1] / 2, b[2] / 2, b[3] / 2};
    for (int k = 0; k < 4; ++k) EXPECT_NEAR(mask_box[k], resized[k], 1.0);
    EXPECT_GE(iou(mask_box, sup.box), 0.95);
  }
}

TEST(Support, MaskBoxIouAtLeast95PercentForEvenBoxes) {
  // Boxes on the 2-px lattice resize to whole pixels, so the mask box is exact.
  Scene s;
  s.image = Tensor::full({3, 64, 64}, 0.0);
  s.objects.push_back({0, {10, 12, 40, 38}});
  const auto sup = render_support(s, 0, 32, 32);
  long minx = 32, miny = 32, maxx = -1, maxy = -1;
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x)
      if (sup.image_with_mask.at((3 * 32 + y) * 32 + x) == 1.0) {
        minx = std::min<long>(minx, x), maxx = std::max<long>(maxx, x);
        miny = std::min<long>(miny, y), maxy = std::max<long>(maxy, y);
      }
  EXPECT_GE(iou({double(minx), double(miny), double(maxx + 1), double(maxy + 1)}, sup.box), 0.95);
}

TEST(Support, InvalidIndexThrows) {
  Rng rng(7);
  const std::vector<int> pool{0};
  const Scene s = gen_scene(rng, pool, 1, 64, 64);
  EXPECT_THROW(render_support(s, 5, 32, 32), std::out_of_range);
}

TEST(EpisodeBuild, BasePhaseWithPaperShotCount) {
  const auto split = make_split(5, 2, 11);
  Rng rng(8);
  const auto ep = build_episode({.phase = Phase::base, .m = 3, .shots = 200}, split, rng);
  ASSERT_EQ(ep.support.size(), 3u);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(ep.support[j].size(), 200u);
    for (const auto& s : ep.support[j]) {
      EXPECT_EQ(s.class_id, ep.class_list[j]);
      EXPECT_NE(s.source_scene, ep.query.id);
      EXPECT_FALSE(split.is_novel(s.class_id));
    }
  }
}

TEST(EpisodeBuild, FinetuneFiveWayOneShot) {
  const auto split = make_split(5, 2, 11);
  Rng rng(9);
  const auto ep = build_episode({.phase = Phase::finetune, .m = 5, .shots = 1}, split, rng);
  EXPECT_EQ(ep.support.size(), 5u);
  for (const auto& c : ep.support) EXPECT_EQ(c.size(), 1u);
}

TEST(EpisodeBuild, TooManyClassesIsError) {
  const auto split = make_split(5, 2, 11);
  Rng rng(10);
  EXPECT_THROW(build_episode({.phase = Phase::base, .m = 4, .shots = 1}, split, rng), std::invalid_argument);
}

TEST(EpisodeBuild, QueryClassesAlwaysInClassList) {
  const auto split = make_split(5, 2, 3);
  Rng rng(11);
  for (int i = 0; i < 1000; ++i) {
    const Phase phase = i % 2 ? Phase::base : Phase::finetune;
    const int m = phase == Phase::base ? 1 + static_cast<int>(rng.below(3)) : 1 + static_cast<int>(rng.below(5));
    const auto pool = static_cast<QueryPool>(rng.below(3));
    const auto ep = build_episode({.phase = phase, .m = m, .shots = 1, .query_pool = pool}, split, rng);
    for (const auto& o : ep.query.objects) {
      ASSERT_NE(std::find(ep.class_list.begin(), ep.class_list.end(), o.class_id), ep.class_list.end());
    }
    for (std::size_t j = 0; j < ep.support.size(); ++j) {
      ASSERT_EQ(ep.support[j].size(), 1u);
      ASSERT_EQ(ep.support[j][0].class_id, ep.class_list[j]);
    }
  }
}

TEST(EpisodeBuild, FixedSupportPoolIsReused) {
  const auto split = make_split(5, 2, 3);
  Rng rng(12);
  const auto classes = split.all_classes();
  const SupportPool pool = sample_support_pool(classes, 3, rng);
  std::set<std::uint64_t> allowed;
  for (const auto& [c, shots] : pool)
    for (const auto& s : shots) allowed.insert(s.source_scene);
  for (int i = 0; i < 20; ++i) {
    const auto ep = build_episode(
        {.phase = Phase::finetune, .m = 5, .shots = 3, .query_pool = QueryPool::novel, .fixed_support = &pool}, split,
        rng);
    for (const auto& cluster : ep.support)
      for (const auto& s : cluster) EXPECT_TRUE(allowed.count(s.source_scene));
    for (const auto& o : ep.query.objects) EXPECT_TRUE(split.is_novel(o.class_id));
  }
}

TEST(EpisodeBuild, SameSeedSameStream) {
  const auto split = make_split(5, 2, 3);
  Rng a(13), b(13);
  for (int i = 0; i < 5; ++i) {
    const auto e1 = build_episode({.phase = Phase::base, .m = 3, .shots = 2}, split, a);
    const auto e2 = build_episode({.phase = Phase::base, .m = 3, .shots = 2}, split, b);
    EXPECT_EQ(e1.query.id, e2.query.id);
    EXPECT_TRUE(std::equal(e1.query.image.values().begin(), e1.query.image.values().end(),
                           e2.query.image.values().begin()));
    EXPECT_TRUE(std::equal(e1.support[2][1].image_with_mask.values().begin(),
                           e1.support[2][1].image_with_mask.values().end(),
                           e2.support[2][1].image_with_mask.values().begin()));
  }
}

TEST(SceneCache, RoundTrip) {
  Rng rng(14);
  const std::vector<int> pool{0, 1, 2, 3, 4};
  std::vector<Scene> scenes;
  for (int i = 0; i < 4; ++i) scenes.push_back(gen_scene(rng, pool, 3, 64, 64));
  const auto dir = std::filesystem::temp_directory_path() / "afd_scene_cache_test";
  std::filesystem::remove_all(dir);
  save_scene_cache(dir, scenes);
  const auto loaded = load_scene_cache(dir);
  ASSERT_EQ(loaded.size(), scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    EXPECT_EQ(loaded[i].id, scenes[i].id);
    ASSERT_EQ(loaded[i].objects.size(), scenes[i].objects.size());
    for (std::size_t k = 0; k < scenes[i].objects.size(); ++k) {
      EXPECT_EQ(loaded[i].objects[k].class_id, scenes[i].objects[k].class_id);
      EXPECT_EQ(loaded[i].objects[k].box, scenes[i].objects[k].box);
    }
    EXPECT_TRUE(std::equal(loaded[i].image.values().begin(), loaded[i].image.values().end(),
                           scenes[i].image.values().begin()));
  }
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace afd
