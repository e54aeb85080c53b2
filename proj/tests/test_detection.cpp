#include <gtest/gtest.h>

#include <cmath>

#include "gvs/detection.hpp"
#include "gvs/random.hpp"

using namespace gvs;
namespace ad = gvs::ad;

namespace {

Box3D rand_box(Rng& rng) {
  Box3D b;
  b.center = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0, 1)};
  b.l = rng.uniform(0.4, 1.6);
  b.w = rng.uniform(0.4, 1.6);
  b.h = rng.uniform(0.4, 1.6);
  b.yaw = rng.uniform(-M_PI, M_PI);
  return b;
}

bool point_in_box(const Box3D& b, const Vec3& p) {
  double c = std::cos(b.yaw), s = std::sin(b.yaw);
  double rx = p.x - b.center.x, ry = p.y - b.center.y;
  double qx = c * rx + s * ry, qy = -s * rx + c * ry, qz = p.z - b.center.z;
  return std::abs(qx) <= 0.5 * b.l && std::abs(qy) <= 0.5 * b.w && std::abs(qz) <= 0.5 * b.h;
}

// Monte-Carlo intersection volume: sample inside box a, count hits in b.
double mc_iou(const Box3D& a, const Box3D& b, Rng& rng, int samples) {
  double ca = std::cos(a.yaw), sa = std::sin(a.yaw);
  int hits = 0;
  for (int i = 0; i < samples; ++i) {
    double qx = rng.uniform(-0.5, 0.5) * a.l;
    double qy = rng.uniform(-0.5, 0.5) * a.w;
    double qz = rng.uniform(-0.5, 0.5) * a.h;
    Vec3 p{a.center.x + ca * qx - sa * qy, a.center.y + sa * qx + ca * qy, a.center.z + qz};
    if (point_in_box(b, p)) ++hits;
  }
  double inter = a.volume() * hits / samples;
  return inter / (a.volume() + b.volume() - inter);
}

}  // namespace

TEST(RotatedIou, IdenticalBoxesGiveOne) {
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    Box3D b = rand_box(rng);
    EXPECT_NEAR(rotated_iou_3d(b, b), 1.0, 1e-12);
  }
}

TEST(RotatedIou, HalfOffsetUnitCubes) {
  Box3D a{{0, 0, 0}, 1, 1, 1, 0, 0, 1};
  Box3D b{{0.5, 0, 0}, 1, 1, 1, 0, 0, 1};
  EXPECT_NEAR(rotated_iou_3d(a, b), 1.0 / 3.0, 1e-12);
}

TEST(RotatedIou, DisjointAndDegenerate) {
  Box3D a{{0, 0, 0}, 1, 1, 1, 0.3, 0, 1};
  Box3D b{{5, 0, 0}, 1, 1, 1, -0.7, 0, 1};
  EXPECT_DOUBLE_EQ(rotated_iou_3d(a, b), 0.0);
  Box3D z{{0, 0, 0}, 0, 1, 1, 0, 0, 1};
  EXPECT_THROW(rotated_iou_3d(a, z), std::invalid_argument);
}

TEST(RotatedIou, NinetyDegreeRotationOfSquareIsIdentity) {
  Box3D a{{0, 0, 0}, 1, 1, 1, 0, 0, 1};
  Box3D b{{0, 0, 0}, 1, 1, 1, M_PI / 2, 0, 1};
  EXPECT_NEAR(rotated_iou_3d(a, b), 1.0, 1e-9);
}

TEST(RotatedIou, MatchesMonteCarloOracle) {
  Rng rng(2);
  for (int i = 0; i < 40; ++i) {
    Box3D a = rand_box(rng);
    Box3D b = rand_box(rng);
    // bias toward overlap
    b.center = {a.center.x + rng.uniform(-0.8, 0.8), a.center.y + rng.uniform(-0.8, 0.8),
                a.center.z + rng.uniform(-0.8, 0.8)};
    double want = mc_iou(a, b, rng, 200000);
    EXPECT_NEAR(rotated_iou_3d(a, b), want, 0.01) << "pair " << i;
  }
}

TEST(RotatedIou, SymmetricTranslationAndJointRotationInvariant) {
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    Box3D a = rand_box(rng);
    Box3D b = rand_box(rng);
    b.center = {a.center.x + rng.uniform(-0.5, 0.5), a.center.y + rng.uniform(-0.5, 0.5),
                a.center.z + rng.uniform(-0.5, 0.5)};
    double iou = rotated_iou_3d(a, b);
    ASSERT_GE(iou, 0.0);
    ASSERT_LE(iou, 1.0);
    EXPECT_NEAR(iou, rotated_iou_3d(b, a), 1e-12);
    Vec3 t{rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)};
    Box3D at = a, bt = b;
    at.center = at.center + t;
    bt.center = bt.center + t;
    EXPECT_NEAR(rotated_iou_3d(at, bt), iou, 1e-9);
    // joint yaw rotation about the origin
    double phi = rng.uniform(-M_PI, M_PI);
    double c = std::cos(phi), s = std::sin(phi);
    auto rot = [&](Box3D x) {
      x.yaw = wrap_angle(x.yaw + phi);
      x.center = {c * x.center.x - s * x.center.y, s * x.center.x + c * x.center.y, x.center.z};
      return x;
    };
    EXPECT_NEAR(rotated_iou_3d(rot(a), rot(b)), iou, 1e-9);
  }
}

TEST(Assignment, NoBoxesNoPositives) {
  VoxelGridSpec grid = make_grid({0, 0, 0}, 0.0, 0.25, {4, 4, 2});
  LevelTargets t = assign_targets({}, grid);
  EXPECT_TRUE(t.positive.empty());
}

TEST(Assignment, LargeBoxCoversAllVoxels) {
  VoxelGridSpec grid = make_grid({0, 0, 0}, 0.0, 0.25, {4, 4, 2});
  Box3D big{{0, 0, 0.25}, 10, 10, 10, 0.2, 1, 1};
  LevelTargets t = assign_targets({big}, grid);
  EXPECT_EQ(t.positive.size(), grid.num_voxels());
  for (int cls : t.class_of) EXPECT_EQ(cls, 1);
}

TEST(Assignment, CenterVoxelHasCenternessOne) {
  VoxelGridSpec grid = make_grid({0, 0, 0}, 0.0, 0.5, {3, 3, 3});
  Vec3 center = grid.voxel_center(1, 1, 1);
  Box3D box{{center.x, center.y, center.z}, 1.0, 1.0, 1.0, 0.7, 0, 1};
  LevelTargets t = assign_targets({box}, grid);
  bool found = false;
  std::size_t center_linear = (1 * 3 + 1) * 3 + 1;
  for (std::size_t i = 0; i < t.positive.size(); ++i)
    if (t.positive[i] == center_linear) {
      found = true;
      EXPECT_NEAR(t.centerness[i], 1.0, 1e-12);
    }
  EXPECT_TRUE(found);
}

TEST(Assignment, SmallestVolumeWins) {
  VoxelGridSpec grid = make_grid({0, 0, 0}, 0.0, 0.5, {2, 2, 1});
  Vec3 p = grid.voxel_center(0, 0, 0);
  Box3D big{{p.x, p.y, p.z}, 4, 4, 4, 0, 0, 1};
  Box3D small{{p.x, p.y, p.z}, 1, 1, 1, 0, 2, 1};
  LevelTargets t = assign_targets({big, small}, grid);
  for (std::size_t i = 0; i < t.positive.size(); ++i)
    if (t.positive[i] == 0) EXPECT_EQ(t.class_of[i], 2);
}

TEST(Decode, SymmetricDistancesGiveCenteredBox) {
  VoxelGridSpec grid = make_grid({0, 0, 0}, 0.0, 1.0, {1, 1, 1});
  Tensor cent({1, 1, 1, 1}, {10.0});
  Tensor reg({7, 1, 1, 1});
  for (int j = 0; j < 6; ++j) reg[j] = 1.0;
  reg[6] = 0.0;
  Tensor cls = Tensor::full({2, 1, 1, 1}, 10.0);
  auto boxes = decode_level(cent, reg, cls, grid, 0.05);
  ASSERT_EQ(boxes.size(), 1u);
  Vec3 c = grid.voxel_center(0);
  EXPECT_NEAR(boxes[0].center.x, c.x, 1e-12);
  EXPECT_NEAR(boxes[0].center.y, c.y, 1e-12);
  EXPECT_NEAR(boxes[0].center.z, c.z, 1e-12);
  EXPECT_NEAR(boxes[0].l, 2.0, 1e-12);
  EXPECT_NEAR(boxes[0].w, 2.0, 1e-12);
  EXPECT_NEAR(boxes[0].h, 2.0, 1e-12);
}

TEST(Decode, AssignedTargetsRoundTripToGroundTruth) {
  Rng rng(5);
  VoxelGridSpec grid = make_grid({0, 0, 0}, 0.0, 0.25, {8, 8, 4});
  for (int rep = 0; rep < 20; ++rep) {
    Box3D gt = rand_box(rng);
    gt.center.z = std::max(gt.center.z, 0.3);
    LevelTargets t = assign_targets({gt}, grid);
    if (t.positive.empty()) continue;
    for (std::size_t i = 0; i < t.positive.size(); ++i) {
      std::array<double, 7> r = t.box[i];
      DecodedBox<double> d = decode_regression(r, grid.voxel_center(t.positive[i]));
      EXPECT_NEAR(d.cx, gt.center.x, 1e-9);
      EXPECT_NEAR(d.cy, gt.center.y, 1e-9);
      EXPECT_NEAR(d.cz, gt.center.z, 1e-9);
      EXPECT_NEAR(d.l, gt.l, 1e-9);
      EXPECT_NEAR(d.w, gt.w, 1e-9);
      EXPECT_NEAR(d.h, gt.h, 1e-9);
      EXPECT_NEAR(d.yaw, gt.yaw, 1e-12);
    }
  }
}

TEST(Nms, IdenticalBoxesKeepOne) {
  Box3D b{{0, 0, 0}, 1, 1, 1, 0.4, 0, 0.9};
  Box3D b2 = b;
  b2.score = 0.8;
  auto kept = nms({b, b2}, 0.25);
  EXPECT_EQ(kept.size(), 1u);
  EXPECT_DOUBLE_EQ(kept[0].score, 0.9);
}

TEST(LossCenter, SaturatedAndAnalyticValues) {
  {
    ad::Graph g;
    Tensor logits = Tensor::full({4}, 20.0);
    auto l = loss_center(g, g.constant(logits), {0, 1, 2, 3}, {1, 1, 1, 1});
    EXPECT_LT(g.value(l)[0], 1e-8);
  }
  {
    ad::Graph g;
    Tensor logits({1});
    auto l = loss_center(g, g.constant(logits), {0}, {0.5});
    EXPECT_NEAR(g.value(l)[0], std::log(2.0), 1e-12);
  }
  {
    ad::Graph g;
    auto l = loss_center(g, g.constant(Tensor({4})), {}, {});
    EXPECT_DOUBLE_EQ(g.value(l)[0], 0.0);
  }
}

TEST(LossCls, SaturatedAndAnalyticValues) {
  {
    // perfectly confident correct logits
    ad::Graph g;
    Tensor logits = Tensor::full({2, 1, 1, 1}, -20.0);
    logits[0] = 20.0;
    Tensor one_hot({2, 1, 1, 1});
    one_hot[0] = 1.0;
    auto l = loss_cls(g, g.constant(logits), one_hot, 1);
    EXPECT_LT(g.value(l)[0], 1e-6);
  }
  {
    // single logit 0 with positive target: alpha * 0.25 * ln 2
    ad::Graph g;
    Tensor logits({1, 1, 1, 1});
    Tensor one_hot = Tensor::full({1, 1, 1, 1}, 1.0);
    auto l = loss_cls(g, g.constant(logits), one_hot, 1);
    EXPECT_NEAR(g.value(l)[0], 0.25 * 0.25 * std::log(2.0), 1e-12);
  }
}

TEST(LossBbox, PerfectAndDisjointCases) {
  VoxelGridSpec grid = make_grid({0, 0, 0}, 0.0, 0.5, {2, 2, 1});
  Box3D gt{{0.1, -0.2, 0.3}, 1.0, 0.8, 0.6, 0.5, 0, 1};
  LevelTargets t = assign_targets({gt}, grid);
  ASSERT_FALSE(t.positive.empty());
  {
    ad::Graph g;
    Tensor rows({t.positive.size(), 7});
    std::vector<Vec3> centers;
    std::vector<Box3D> targets;
    for (std::size_t i = 0; i < t.positive.size(); ++i) {
      for (int j = 0; j < 7; ++j) rows[i * 7 + j] = t.box[i][j];
      centers.push_back(grid.voxel_center(t.positive[i]));
      targets.push_back(gt);
    }
    auto l = loss_bbox(g, g.constant(rows), centers, targets);
    EXPECT_NEAR(g.value(l)[0], 0.0, 1e-9);
  }
  {
    ad::Graph g;
    Tensor rows({1, 7});
    for (int j = 0; j < 6; ++j) rows[j] = 0.05;  // tiny box at the voxel center
    auto l = loss_bbox(g, g.constant(rows), {{5, 5, 5}}, {gt});  // far away target
    EXPECT_DOUBLE_EQ(g.value(l)[0], 1.0);
  }
}

TEST(TotalLoss, LinearInLambda) {
  ad::Graph g;
  auto c = g.constant(Tensor::scalar(0.3));
  auto b = g.constant(Tensor::scalar(0.5));
  auto k = g.constant(Tensor::scalar(0.2));
  auto r = g.constant(Tensor::scalar(0.7));
  double base = g.value(total_loss(g, c, b, k, std::nullopt, 0.0))[0];
  EXPECT_DOUBLE_EQ(base, 1.0);
  double l1 = g.value(total_loss(g, c, b, k, r, 1.0))[0];
  double l2 = g.value(total_loss(g, c, b, k, r, 2.0))[0];
  EXPECT_DOUBLE_EQ(l1 - base, 0.7);
  EXPECT_DOUBLE_EQ(l2 - base, 1.4);
  EXPECT_THROW(total_loss(g, c, b, k, r, -1.0), std::invalid_argument);
}

TEST(EvalMap, PerfectPredictionsGiveOne) {
  Rng rng(6);
  std::vector<std::vector<Box3D>> gts(3), preds(3);
  for (int s = 0; s < 3; ++s)
    for (int i = 0; i < 4; ++i) {
      Box3D b = rand_box(rng);
      b.class_id = i % 3;
      gts[s].push_back(b);
      Box3D p = b;
      p.score = 1.0;
      preds[s].push_back(p);
    }
  EXPECT_DOUBLE_EQ(eval_map(preds, gts, 0.25).map, 1.0);
}

TEST(EvalMap, NoPredictionsGiveZero) {
  Rng rng(7);
  std::vector<std::vector<Box3D>> gts(1), preds(1);
  gts[0].push_back(rand_box(rng));
  EXPECT_DOUBLE_EQ(eval_map(preds, gts, 0.25).map, 0.0);
}

TEST(EvalMap, HandComputedThreePredictionCase) {
  // one class, 2 gt; predictions: TP@0.9, FP@0.8, TP@0.7
  Box3D g1{{0, 0, 0}, 1, 1, 1, 0, 0, 1};
  Box3D g2{{3, 0, 0}, 1, 1, 1, 0, 0, 1};
  std::vector<std::vector<Box3D>> gts = {{g1, g2}};
  Box3D tp1 = g1;
  tp1.score = 0.9;
  Box3D fp{{10, 10, 0}, 1, 1, 1, 0, 0, 0.8};
  Box3D tp2 = g2;
  tp2.score = 0.7;
  std::vector<std::vector<Box3D>> preds = {{tp1, fp, tp2}};
  EXPECT_NEAR(eval_map(preds, gts, 0.25).map, 1.0 * 0.5 + (2.0 / 3.0) * 0.5, 1e-9);
}

TEST(EvalMap, MonotoneUnderAddedTruePositiveAndZeroScoreFp) {
  Rng rng(8);
  std::vector<std::vector<Box3D>> gts(1), preds(1);
  for (int i = 0; i < 3; ++i) {
    Box3D b = rand_box(rng);
    b.class_id = 0;
    b.center.x += i * 5.0;
    gts[0].push_back(b);
  }
  Box3D p0 = gts[0][0];
  p0.score = 0.9;
  preds[0].push_back(p0);
  double before = eval_map(preds, gts, 0.25).map;
  // a zero-score false positive sorts last and must not change AP
  Box3D fp{{99, 99, 0}, 1, 1, 1, 0, 0, 0.0};
  auto preds_fp = preds;
  preds_fp[0].push_back(fp);
  EXPECT_DOUBLE_EQ(eval_map(preds_fp, gts, 0.25).map, before);
  // an added true positive never decreases AP
  Box3D p1 = gts[0][1];
  p1.score = 0.5;
  auto preds_tp = preds;
  preds_tp[0].push_back(p1);
  EXPECT_GE(eval_map(preds_tp, gts, 0.25).map, before);
}

TEST(EvalMap, RejectsBadThreshold) {
  std::vector<std::vector<Box3D>> e(1);
  EXPECT_THROW(eval_map(e, e, 0.0), std::invalid_argument);
  EXPECT_THROW(eval_map(e, e, 1.0), std::invalid_argument);
}

TEST(Fpn, ShapesAndZeroParams) {
  ad::Graph g;
  Rng rng(9);
  std::size_t C = 4;
  Tensor x({C, 6, 6, 5});  // odd z: level 1 floors to 2
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform(-1, 1);
  FpnParams zero;
  zero.lateral = {Tensor({C, C, 1, 1, 1}), Tensor({C}), 1};
  zero.down = {Tensor({C, C, 3, 3, 3}), Tensor({C}), 2};
  zero.smooth0 = {Tensor({C, C, 3, 3, 3}), Tensor({C}), 1};
  zero.smooth1 = {Tensor({C, C, 3, 3, 3}), Tensor({C}), 1};
  auto levels = fpn_forward(g, g.constant(x), insert_fpn(g, zero));
  ASSERT_EQ(levels.size(), 2u);
  EXPECT_EQ(g.value(levels[0]).shape(), (std::vector<std::size_t>{C, 6, 6, 5}));
  EXPECT_EQ(g.value(levels[1]).shape(), (std::vector<std::size_t>{C, 3, 3, 2}));
  for (auto lvl : levels) {
    const Tensor& t = g.value(lvl);
    for (std::size_t i = 0; i < t.numel(); ++i) ASSERT_EQ(t[i], 0.0);
  }
}

TEST(Head, ZeroParamsGiveUnitDistancesAndZeroYaw) {
  ad::Graph g;
  std::size_t C = 4;
  Tensor x({C, 3, 3, 2});
  HeadParams zero;
  zero.center = {Tensor({1, C, 3, 3, 3}), Tensor({1}), 1};
  zero.reg = {Tensor({7, C, 3, 3, 3}), Tensor({7}), 1};
  zero.cls = {Tensor({3, C, 3, 3, 3}), Tensor({3}), 1};
  HeadOutput out = head_forward(g, g.constant(x), insert_head(g, zero));
  const Tensor& reg = g.value(out.regression);
  std::size_t n = 3 * 3 * 2;
  for (int ch = 0; ch < 6; ++ch)
    for (std::size_t v = 0; v < n; ++v) EXPECT_DOUBLE_EQ(reg[ch * n + v], 1.0);
  for (std::size_t v = 0; v < n; ++v) EXPECT_DOUBLE_EQ(reg[6 * n + v], 0.0);
}
