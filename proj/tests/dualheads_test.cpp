#include <gtest/gtest.h>

#include <cmath>

#include "afd/dualheads.hpp"
#include "afd/gradcheck.hpp"
#include "afd/ops.hpp"
#include "test_util.hpp"

namespace afd {
namespace {

using testing::random_tensor;

TEST(FusionWeights, InitializedToExactlyOne) {
  const FusionWeights w = FusionWeights::init();
  for (const Tensor* t : {&w.conv_cls, &w.fc_cls, &w.conv_reg, &w.fc_reg}) {
    EXPECT_EQ(t->item(), 1.0);
    EXPECT_TRUE(t->requires_grad());
  }
}

TEST(AfmFuse, InitialWeightsGivePlainConcatenation) {
  Rng rng(1);
  const FusionWeights w = FusionWeights::init();
  const Tensor c = random_tensor(rng, {3, 64}), f = random_tensor(rng, {3, 64});
  for (Task t : {Task::cls, Task::reg}) {
    const Tensor out = afm_fuse(c, f, t, w);
    ASSERT_EQ(out.shape(), (Shape{3, 128}));
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 64; ++j) {
        EXPECT_EQ(out.values()[i * 128 + j], c.values()[i * 64 + j]);
        EXPECT_EQ(out.values()[i * 128 + 64 + j], f.values()[i * 64 + j]);
      }
  }
}

TEST(AfmFuse, ZeroConvWeightAnnihilatesConvChannels) {
  Rng rng(2);
  FusionWeights w = FusionWeights::init();
  w.conv_reg.mutable_values()[0] = 0.0;
  const Tensor c = random_tensor(rng, {64}), f = random_tensor(rng, {64});
  const Tensor out = afm_fuse(c, f, Task::reg, w);
  for (std::size_t j = 0; j < 64; ++j) {
    EXPECT_EQ(out.values()[j], 0.0);
    EXPECT_EQ(out.values()[64 + j], f.values()[j]);
  }
  // The cls pair is untouched.
  const Tensor cls = afm_fuse(c, f, Task::cls, w);
  EXPECT_EQ(cls.values()[0], c.values()[0]);
}

TEST(AfmFuse, GradientOfSumWithRespectToFcWeightIsSumOfFcFeatures) {
  Rng rng(3);
  FusionWeights w = FusionWeights::init();
  w.fc_cls.mutable_values()[0] = 0.7;
  const Tensor c = random_tensor(rng, {64}), f = random_tensor(rng, {64});
  double sum_f = 0.0;
  for (double v : f.values()) sum_f += v;
  backward(ops::sum(afm_fuse(c, f, Task::cls, w)));
  EXPECT_NEAR(w.fc_cls.grad()[0], sum_f, 1e-12);
  w.fc_cls.clear_grad();
  w.conv_cls.clear_grad();
  auto loss = [&] { return ops::sum(afm_fuse(c, f, Task::cls, w)); };
  const auto r = finite_diff_check(loss, w.fc_cls);
  EXPECT_LE(r.max_rel_error, 1e-6);
  EXPECT_NEAR(r.worst_numeric, sum_f, 1e-6);
}

TEST(PathFlags, RejectsTaskWithoutPaths) {
  EXPECT_THROW((PathFlags{false, false, true, true}.validate()), std::invalid_argument);
  EXPECT_THROW((PathFlags{true, true, false, false}.validate()), std::invalid_argument);
  EXPECT_NO_THROW((PathFlags{true, false, false, true}.validate()));
  EXPECT_EQ((PathFlags{true, false, true, true}.fused_dim(Task::cls)), 64u);
  EXPECT_EQ((PathFlags{true, false, true, true}.fused_dim(Task::reg)), 128u);
}

struct Encoders {
  Rng rng{4};
  DualEncoder dqe = DualEncoder::init(rng, 64, 4);
  DualEncoder dag = DualEncoder::init(rng, 64, 4);
  Backbone backbone = Backbone::init(rng);
  FusionWeights w = FusionWeights::init();
};

TEST(Dqe, OneVectorPairPerPatch) {
  Encoders e;
  const Tensor patches = random_tensor(e.rng, {5, 64, 4, 4});
  const TaskVectors v = dqe_encode(e.dqe, patches, e.w, {});
  EXPECT_EQ(v.cls.shape(), (Shape{5, 128}));
  EXPECT_EQ(v.reg.shape(), (Shape{5, 128}));
  EXPECT_EQ(v.size(), 5u);
}

TEST(Dqe, DisabledPathLeavesOnlyTheOtherChannels) {
  Encoders e;
  const Tensor patches = random_tensor(e.rng, {2, 64, 4, 4});
  const TaskVectors full = dqe_encode(e.dqe, patches, e.w, {});
  const TaskVectors fc_only = dqe_encode(e.dqe, patches, e.w, {false, true, true, false});
  ASSERT_EQ(fc_only.cls.shape(), (Shape{2, 64}));
  ASSERT_EQ(fc_only.reg.shape(), (Shape{2, 64}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 64; ++j) {
      EXPECT_EQ(fc_only.cls.values()[i * 64 + j], full.cls.values()[i * 128 + 64 + j]);
      EXPECT_EQ(fc_only.reg.values()[i * 64 + j], full.reg.values()[i * 128 + j]);
    }
}

TEST(Dqe, ZeroPatchGivesBiasResponseDeterministically) {
  Encoders e;
  for (auto* l : {&e.dqe.fc_cls.fc2, &e.dqe.fc_reg.fc2})
    std::fill(l->bias.mutable_values().begin(), l->bias.mutable_values().end(), 0.3);
  const Tensor zero = Tensor::zeros({1, 64, 4, 4});
  const TaskVectors a = dqe_encode(e.dqe, zero, e.w, {}), b = dqe_encode(e.dqe, zero, e.w, {});
  for (std::size_t j = 0; j < 128; ++j) EXPECT_EQ(a.cls.values()[j], b.cls.values()[j]);
  // Conv path: ReLU of zero bias is zero; fc path: fc2 bias.
  for (std::size_t j = 0; j < 64; ++j) EXPECT_EQ(a.cls.values()[j], 0.0);
  for (std::size_t j = 64; j < 128; ++j) EXPECT_EQ(a.cls.values()[j], 0.3);
}

std::vector<std::vector<SupportImage>> random_clusters(Rng& rng, std::size_t m, std::size_t K) {
  std::vector<std::vector<SupportImage>> clusters(m);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t k = 0; k < K; ++k) {
      SupportImage s;
      s.image_with_mask = random_tensor(rng, {4, 32, 32}, 0, 1);
      s.class_id = static_cast<int>(j);
      clusters[j].push_back(s);
    }
  return clusters;
}

TEST(Dag, OneVectorPairPerClass) {
  Encoders e;
  const auto clusters = random_clusters(e.rng, 3, 2);
  const AttentiveVectors a = dag_encode(e.dag, e.backbone, clusters, e.w, {}, 4);
  EXPECT_EQ(a.per_class.cls.shape(), (Shape{3, 128}));
  EXPECT_EQ(a.per_class.reg.shape(), (Shape{3, 128}));
  EXPECT_EQ(a.per_support.cls.shape(), (Shape{6, 128}));
  EXPECT_EQ(a.support_classes, (std::vector<int>{0, 0, 1, 1, 2, 2}));
}

TEST(Dag, IdenticalShotsAverageToTheSingleShotVector) {
  Encoders e;
  auto one = random_clusters(e.rng, 1, 1);
  std::vector<std::vector<SupportImage>> many{std::vector<SupportImage>(4, one[0][0])};
  const AttentiveVectors a1 = dag_encode(e.dag, e.backbone, one, e.w, {}, 4);
  const AttentiveVectors a4 = dag_encode(e.dag, e.backbone, many, e.w, {}, 4);
  for (std::size_t j = 0; j < 128; ++j) {
    EXPECT_NEAR(a4.per_class.cls.values()[j], a1.per_class.cls.values()[j], 1e-12);
    EXPECT_NEAR(a4.per_class.reg.values()[j], a1.per_class.reg.values()[j], 1e-12);
  }
}

TEST(Dag, EmptyClusterIsError) {
  Encoders e;
  std::vector<std::vector<SupportImage>> clusters(2);
  clusters[0] = random_clusters(e.rng, 1, 1)[0];
  EXPECT_THROW(dag_encode(e.dag, e.backbone, clusters, e.w, {}, 4), std::invalid_argument);
}

TEST(Sharing, LambdaGradientAccumulatesFromBothBranches) {
  Encoders e;
  const Tensor patches = random_tensor(e.rng, {3, 64, 4, 4});
  const auto clusters = random_clusters(e.rng, 2, 2);
  auto dqe_part = [&] { return ops::sum(dqe_encode(e.dqe, patches, e.w, {}).cls); };
  auto dag_part = [&] { return ops::sum(dag_encode(e.dag, e.backbone, clusters, e.w, {}, 4).per_class.cls); };

  auto grad_of = [&](auto&& loss) {
    backward(loss());
    const double g = e.w.conv_cls.grad()[0];
    for (auto& t : {e.w.conv_cls, e.w.fc_cls, e.w.conv_reg, e.w.fc_reg}) Tensor(t).clear_grad();
    for (auto& p : [&] {
           ParamList l;
           e.dqe.collect("dqe", l);
           e.dag.collect("dag", l);
           e.backbone.collect("backbone", l);
           return l;
         }())
      p.tensor.clear_grad();
    return g;
  };
  const double g_dqe = grad_of(dqe_part);
  const double g_dag = grad_of(dag_part);
  const double g_both = grad_of([&] { return ops::add(dqe_part(), dag_part()); });
  EXPECT_NE(g_dqe, 0.0);
  EXPECT_NE(g_dag, 0.0);
  EXPECT_NEAR(g_both, g_dqe + g_dag, 1e-9 * (std::abs(g_dqe) + std::abs(g_dag)));
  EXPECT_NE(g_both, g_dqe);
  EXPECT_NE(g_both, g_dag);
}

TEST(Sharing, EncodersHaveEqualStructureAndDistinctParameters) {
  Encoders e;
  EXPECT_EQ(e.dqe.layer_shapes(), e.dag.layer_shapes());
  ParamList a, b;
  e.dqe.collect("x", a);
  e.dag.collect("x", b);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_FALSE(a[i].tensor.same_storage(b[i].tensor));
  }
  // The four sub-encoders of one instance are independent too.
  EXPECT_FALSE(e.dqe.conv_cls.conv.weight.same_storage(e.dqe.conv_reg.conv.weight));
  EXPECT_FALSE(e.dqe.fc_cls.fc1.weight.same_storage(e.dqe.fc_reg.fc1.weight));
}

TEST(Sharing, EncoderGradientsPassFiniteDifferenceCheck) {
  Encoders e;
  const Tensor patches = random_tensor(e.rng, {2, 64, 4, 4});
  const Tensor wc = random_tensor(e.rng, {2, 128}), wr = random_tensor(e.rng, {2, 128});
  auto loss = [&] {
    const TaskVectors v = dqe_encode(e.dqe, patches, e.w, {});
    return ops::add(ops::sum(ops::mul(v.cls, wc)), ops::sum(ops::mul(v.reg, wr)));
  };
  std::vector<Tensor> params{e.w.conv_cls, e.w.fc_cls, e.w.conv_reg, e.w.fc_reg, e.dqe.conv_cls.conv.weight,
                             e.dqe.fc_reg.fc1.weight, e.dqe.fc_reg.fc2.bias};
  GradCheckOptions opt;
  opt.max_coords = 20;
  const auto r = finite_diff_check(loss, params, opt);
  EXPECT_LE(r.max_rel_error, 1e-4);
}

}  // namespace
}  // namespace afd
