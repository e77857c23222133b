#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "ccd/trainer.hpp"
#include "tiny.hpp"

using namespace ccd;

TEST(Schedule, Endpoints) {
  const Schedule s{1.0, 0.2, 100, 10};
  EXPECT_EQ(s.value(0), 0.0);
  EXPECT_EQ(s.value(10), 1.0);
  EXPECT_EQ(s.value(100), 0.2);
  EXPECT_NEAR(s.value(55), 0.6, 1e-12);
  EXPECT_THROW(s.value(-1), ValidationError);
  EXPECT_THROW(s.value(101), ValidationError);
}

TEST(Schedule, NonIncreasingAfterWarmup) {
  const Schedule s{5e-4, 1e-6, 1999, 200};
  for (long t = 1; t <= 200; ++t) EXPECT_GT(s.value(t), s.value(t - 1));
  for (long t = 201; t <= 1999; ++t) EXPECT_LE(s.value(t), s.value(t - 1));
}

TEST(Schedule, TrainingSchedulesHitEndpoints) {
  TrainConfig cfg;
  cfg.steps = 2000;
  EXPECT_EQ(cfg.lambda_schedule().value(0), 0.996);
  EXPECT_EQ(cfg.lambda_schedule().value(1999), 1.0);
  EXPECT_EQ(cfg.wd_schedule().value(0), 0.04);
  EXPECT_EQ(cfg.wd_schedule().value(1999), 0.4);
  EXPECT_EQ(cfg.lr_schedule().value(200), 5e-4);
  EXPECT_EQ(cfg.lr_schedule().value(1999), 1e-6);
}

TEST(AdamW, DecayOnlyScales) {
  ParamStore<float> p, g;
  p.add({"w", {2, 2}}, {1, 2, 3, 4});
  p.add({"b", {2}, ParamRole::encoder, true, false}, {1, 1});
  g = p.zeros_like();
  OptState opt = OptState::for_store(p);
  adamw_step(p, g, opt, 0.1, 0.1);
  EXPECT_FLOAT_EQ(p.values(0)[0], 0.99f);
  EXPECT_FLOAT_EQ(p.values(0)[3], 3.96f);
  EXPECT_EQ(p.values(1), (TensorData<float>{1, 1}));
}

TEST(AdamW, HandEvaluatedFirstStep) {
  ParamStore<float> p, g;
  p.add({"w", {1}, ParamRole::encoder, true, false}, {1.0f});
  g.add({"w", {1}, ParamRole::encoder, true, false}, {1.0f});
  OptState opt = OptState::for_store(p);
  adamw_step(p, g, opt, 0.1, 0.0);
  // m_hat = v_hat = 1, so the step is lr * 1 / (1 + eps).
  EXPECT_NEAR(p.values(0)[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-6);
}

TEST(AdamW, NonFiniteGradientNamesTensor) {
  ParamStore<float> p;
  p.add({"encoder.x", {2}}, {1, 1});
  p.add({"proj.y", {2}}, {1, 1});
  ParamStore<float> g = p.zeros_like();
  g.values(1)[1] = std::numeric_limits<float>::infinity();
  OptState opt = OptState::for_store(p);
  const auto before = p;
  try {
    adamw_step(p, g, opt, 0.1, 0.0);
    FAIL();
  } catch (const RuntimeError& e) {
    EXPECT_NE(std::string(e.what()).find("proj.y"), std::string::npos);
  }
  EXPECT_TRUE(p == before);
}

TEST(AdamW, FrozenTensorsUntouchedAndUnitRowsKept) {
  ParamStore<float> p;
  p.add({"stat", {3}, ParamRole::seg_head, false, false}, {1, 2, 3});
  p.add({"dir", {2, 3}, ParamRole::projection, true, false, true}, {1, 0, 0, 0, 1, 0});
  ParamStore<float> g = p.zeros_like();
  Rng rng(1);
  for (auto& v : g.values(0)) v = float(rng.normal());
  for (auto& v : g.values(1)) v = float(rng.normal());
  OptState opt = OptState::for_store(p);
  for (int k = 0; k < 10; ++k) adamw_step(p, g, opt, 0.05, 0.1);
  EXPECT_EQ(p.values(0), (TensorData<float>{1, 2, 3}));
  const auto dir = p.mat(1);
  for (int r = 0; r < 2; ++r) EXPECT_NEAR(dir.row(r).norm(), 1.0f, 1e-6f);
}

TEST(AdamW, RepeatedRunsBitwiseEqual) {
  auto run = [] {
    ParamStore<float> p;
    Rng rng(5);
    std::vector<float> v(64);
    for (auto& x : v) x = float(rng.normal());
    p.add({"w", {8, 8}}, v);
    OptState opt = OptState::for_store(p);
    for (int k = 0; k < 100; ++k) {
      ParamStore<float> g = p.zeros_like();
      for (auto& x : g.values(0)) x = float(rng.normal());
      adamw_step(p, g, opt, 1e-3, 0.05);
    }
    return p;
  };
  EXPECT_TRUE(run() == run());
}

TEST(OutputStd, HandValue) {
  Mat<double> x(2, 2);
  x << 0, 1, 2, 1;
  EXPECT_DOUBLE_EQ(output_std(x), 0.5);
}

namespace {

std::vector<BatchItem> tiny_batch(const TrainConfig& cfg, std::size_t n) {
  std::vector<BatchItem> items;
  const auto imgs = tiny::images(n, 3);
  for (std::size_t i = 0; i < n; ++i) items.push_back(make_batch_item(imgs[i], 100 + i, cfg.augment));
  return items;
}

MaskProvider pl_provider(const std::vector<BatchItem>& items, const ClusterConfig& cc) {
  return [&items, cc](std::size_t s, const BinaryMask&) { return char_masks_from_seg(items[s].m_pl, cc); };
}

}  // namespace

TEST(ComputeLoss, TeacherGradientIsZero) {
  const TrainConfig cfg = tiny::train_config();
  const TrainState st = TrainState::init(cfg);
  const auto items = tiny_batch(cfg, 3);
  ParamStore<float> g = st.student.zeros_like(), tg;
  compute_loss<float>(cfg.model, cfg.distill, st.student, st.teacher, st.center, items,
                      pl_provider(items, cfg.cluster), &g, nullptr, 1, &tg);
  ASSERT_TRUE(tg.same_layout(st.teacher));
  for (std::size_t i = 0; i < tg.size(); ++i)
    for (float v : tg.values(i)) ASSERT_EQ(v, 0.0f);
}

TEST(ComputeLoss, WorkerCountDoesNotChangeGradients) {
  const TrainConfig cfg = tiny::train_config();
  const TrainState st = TrainState::init(cfg);
  const auto items = tiny_batch(cfg, 5);
  ParamStore<float> g1 = st.student.zeros_like(), g3 = st.student.zeros_like();
  const auto a = compute_loss<float>(cfg.model, cfg.distill, st.student, st.teacher, st.center, items,
                                     pl_provider(items, cfg.cluster), &g1, nullptr, 1);
  const auto b = compute_loss<float>(cfg.model, cfg.distill, st.student, st.teacher, st.center, items,
                                     pl_provider(items, cfg.cluster), &g3, nullptr, 3);
  EXPECT_EQ(a.l_total, b.l_total);
  EXPECT_TRUE(g1 == g3);
}

TEST(ComputeLoss, IdenticalBranchesGiveEntropy) {
  TrainConfig cfg = tiny::train_config();
  cfg.augment.geometry = GeometryRanges::none();
  cfg.augment.color = ColorJitterConfig::none();
  const TrainState st = TrainState::init(cfg);
  const auto items = tiny_batch(cfg, 3);
  const auto out = compute_loss<float>(cfg.model, cfg.distill, st.student, st.teacher, st.center, items,
                                       pl_provider(items, cfg.cluster), nullptr);
  ASSERT_GT(out.chars, 0u);
  EXPECT_TRUE(std::isfinite(out.l_dis));
  EXPECT_GE(out.l_dis, 0.0);
  // With both views and both networks identical the two xi terms coincide.
  const Mat<double> t = out.teacher_logits.cast<double>();
  const auto l = static_cast<Eigen::Index>(out.chars);
  EXPECT_EQ(t.topRows(l), t.bottomRows(l));
}

TEST(PretrainStep, TeacherIsExactEmaOfUpdatedStudent) {
  const TrainConfig cfg = tiny::train_config();
  TrainState st = TrainState::init(cfg);
  const auto teacher0 = st.teacher;
  const auto m = pretrain_step(tiny::images(4), st);
  const double lambda = cfg.lambda_schedule().value(0);
  for (std::size_t i = 0; i < st.teacher.size(); ++i) {
    const auto& s = st.student.values(st.student.index(st.teacher.spec(i).name));
    for (std::size_t k = 0; k < s.size(); ++k) {
      const float expect =
          static_cast<float>(lambda * double(teacher0.values(i)[k]) + (1.0 - lambda) * double(s[k]));
      ASSERT_EQ(st.teacher.values(i)[k], expect);
      ASSERT_GE(st.teacher.values(i)[k], std::min(teacher0.values(i)[k], s[k]));
      ASSERT_LE(st.teacher.values(i)[k], std::max(teacher0.values(i)[k], s[k]));
    }
  }
  EXPECT_EQ(st.step, 1);
  EXPECT_EQ(m.lambda, 0.996);
}

TEST(Pretrain, ZeroStepsReturnsInitialization) {
  TrainConfig cfg = tiny::train_config();
  cfg.steps = 0;
  const TrainState st = pretrain(tiny::images(10), cfg);
  EXPECT_TRUE(st.student == TrainState::init(cfg).student);
}

TEST(Pretrain, MetricsLogReproducible) {
  const TrainConfig cfg = tiny::train_config();
  const auto imgs = tiny::images(20);
  std::ostringstream a, b;
  const TrainState sa = pretrain(imgs, cfg, &a);
  const TrainState sb = pretrain(imgs, cfg, &b);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_TRUE(sa.student == sb.student);
  EXPECT_TRUE(sa.teacher == sb.teacher);
  EXPECT_EQ(a.str().substr(0, a.str().find('\n')), kMetricsHeader);
  std::size_t rows = 0;
  for (char c : a.str()) rows += c == '\n';
  EXPECT_EQ(rows, 1u + std::size_t(cfg.steps));
}

TEST(Pretrain, SegOnlyRunHasNoCharacters) {
  TrainConfig cfg = tiny::train_config();
  cfg.distill.distill_weight = 0.0;
  cfg.steps = 2;
  TrainState st = TrainState::init(cfg);
  const auto m = pretrain_step(tiny::images(4), st);
  EXPECT_EQ(m.l_dis, 0.0);
  EXPECT_GT(m.l_seg, 0.0);
}
