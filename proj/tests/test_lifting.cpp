#include <gtest/gtest.h>

#include <cmath>

#include "gvs/lifting.hpp"
#include "gvs/parallel.hpp"
#include "gvs/random.hpp"

using namespace gvs;
namespace ad = gvs::ad;

namespace {

Tensor rand_map(Rng& rng, std::size_t c, std::size_t h, std::size_t w) {
  Tensor t({c, h, w});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-1, 1);
  return t;
}

Camera orbit_camera(double ang, double radius = 2.6, double height = 1.8,
                    double scale = 0.5, int w = 16, int h = 16) {
  Vec3 eye{radius * std::cos(ang), radius * std::sin(ang), height};
  return Camera(make_intrinsics(0.9 * w, 0.9 * w, w / 2.0, h / 2.0),
                look_at_extrinsics(eye, {0, 0, 0.6}, {0, 0, 1}), scale, scale, w, h);
}

// independent per-voxel loop: project, test, 4-tap sample, average
std::vector<double> oracle_lift_voxel(const std::vector<Tensor>& maps,
                                      const std::vector<Camera>& cams, const Vec3& p) {
  std::size_t C = maps[0].dim(0);
  std::vector<double> acc(C, 0.0);
  int count = 0;
  for (std::size_t i = 0; i < cams.size(); ++i) {
    auto px = cams[i].project_point(p);
    if (!px || !cams[i].in_bounds(px->u, px->v)) continue;
    ++count;
    std::size_t W = maps[i].dim(2), H = maps[i].dim(1);
    double u = px->u, v = px->v;
    std::size_t x0 = static_cast<std::size_t>(std::floor(u));
    std::size_t y0 = static_cast<std::size_t>(std::floor(v));
    std::size_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
    double fx = u - std::floor(u), fy = v - std::floor(v);
    for (std::size_t c = 0; c < C; ++c) {
      double t00 = maps[i].at({c, y0, x0}), t10 = maps[i].at({c, y0, x1});
      double t01 = maps[i].at({c, y1, x0}), t11 = maps[i].at({c, y1, x1});
      acc[c] += (1 - fy) * ((1 - fx) * t00 + fx * t10) + fy * ((1 - fx) * t01 + fx * t11);
    }
  }
  if (count)
    for (double& v : acc) v /= count;
  return acc;
}

}  // namespace

TEST(Bilinear, IntegerCoordinatesAreExact) {
  Rng rng(1);
  Tensor map = rand_map(rng, 3, 5, 7);
  for (int rep = 0; rep < 20; ++rep) {
    std::size_t x = rng.below(7), y = rng.below(5);
    auto v = bilinear_sample(map, static_cast<double>(x), static_cast<double>(y));
    for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(v[c], map.at({c, y, x}));
  }
}

TEST(Bilinear, MidpointIsAverage) {
  Tensor map({1, 1, 2}, {3.0, 5.0});
  auto v = bilinear_sample(map, 0.5, 0.0);
  EXPECT_DOUBLE_EQ(v[0], 4.0);
}

TEST(Bilinear, MatchesFourTapOracleExactly) {
  Rng rng(2);
  Tensor map = rand_map(rng, 4, 9, 11);
  for (int rep = 0; rep < 200; ++rep) {
    double u = rng.uniform(0.0, 11.0 - 1e-9), v = rng.uniform(0.0, 9.0 - 1e-9);
    auto got = bilinear_sample(map, u, v);
    std::size_t x0 = std::min<std::size_t>(static_cast<std::size_t>(u), 10);
    std::size_t y0 = std::min<std::size_t>(static_cast<std::size_t>(v), 8);
    std::size_t x1 = std::min(x0 + 1, std::size_t(10)), y1 = std::min(y0 + 1, std::size_t(8));
    double fx = u - std::floor(u), fy = v - std::floor(v);
    for (std::size_t c = 0; c < 4; ++c) {
      double want = (1 - fx) * (1 - fy) * map.at({c, y0, x0}) +
                    fx * (1 - fy) * map.at({c, y0, x1}) +
                    (1 - fx) * fy * map.at({c, y1, x0}) + fx * fy * map.at({c, y1, x1});
      EXPECT_DOUBLE_EQ(got[c], want);
    }
  }
}

TEST(Bilinear, ClampsInLastCell) {
  Rng rng(3);
  Tensor map = rand_map(rng, 1, 4, 4);
  auto v = bilinear_sample(map, 3.5, 3.5);  // inside [size-1, size)
  EXPECT_DOUBLE_EQ(v[0], map.at({0, 3, 3}));
}

TEST(Bilinear, OutOfBoundsThrows) {
  Tensor map({1, 4, 4});
  EXPECT_THROW(bilinear_sample(map, -0.1, 0.0), std::invalid_argument);
  EXPECT_THROW(bilinear_sample(map, 0.0, 4.0), std::invalid_argument);
}

TEST(ClassToken, ZeroTokenPassThrough) {
  // projection selecting the patch half: W = [0; I], so the output is
  // ReLU(patch tokens)
  ad::Graph g;
  Rng rng(5);
  std::size_t n = 6, d = 4;
  Tensor tokens({n, d});
  for (std::size_t i = 0; i < tokens.numel(); ++i) tokens[i] = rng.uniform(-1, 1);
  Tensor w({2 * d, d});
  for (std::size_t i = 0; i < d; ++i) w[(d + i) * d + i] = 1.0;
  auto out = fuse_class_token(g, g.constant(tokens), g.constant(Tensor({1, d})),
                              g.constant(w), g.constant(Tensor({d})));
  const Tensor& y = g.value(out);
  ASSERT_EQ(y.shape(), (std::vector<std::size_t>{n, d}));
  for (std::size_t i = 0; i < y.numel(); ++i)
    EXPECT_DOUBLE_EQ(y[i], std::max(tokens[i], 0.0));
}

TEST(ClassToken, SingleTokenShape) {
  ad::Graph g;
  Rng rng(6);
  Tensor tokens({1, 4}), cls({1, 4}), w({8, 5}), b({5});
  for (auto* t : {&tokens, &cls, &w, &b})
    for (std::size_t i = 0; i < t->numel(); ++i) (*t)[i] = rng.uniform(-1, 1);
  auto out = fuse_class_token(g, g.constant(tokens), g.constant(cls), g.constant(w),
                              g.constant(b));
  EXPECT_EQ(g.value(out).shape(), (std::vector<std::size_t>{1, 5}));
}

TEST(Lift, SingleViewEqualsBilinearSample) {
  Rng rng(7);
  std::vector<Camera> cams = {orbit_camera(0.3)};
  std::vector<Tensor> maps = {rand_map(rng, 3, 16 / 2, 16 / 2)};
  VoxelGridSpec grid = make_grid({0, 0, 0}, 0.0, 0.4, {4, 4, 3});
  Tensor vol = lift_features(maps, cams, grid);
  std::size_t n = grid.num_voxels();
  for (std::size_t v = 0; v < n; ++v) {
    Vec3 p = grid.voxel_center(v);
    auto px = cams[0].project_point(p);
    if (!px || !cams[0].in_bounds(px->u, px->v)) continue;
    auto want = bilinear_sample(maps[0], px->u, px->v);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(vol[c * n + v], want[c]);
  }
}

TEST(Lift, UnseenVoxelIsZero) {
  Rng rng(8);
  std::vector<Camera> cams = {orbit_camera(0.0)};
  std::vector<Tensor> maps = {rand_map(rng, 2, 8, 8)};
  // grid behind the camera
  VoxelGridSpec grid = make_grid({6.0, 0.0, 0.0}, 0.0, 0.2, {2, 2, 2});
  Tensor vol = lift_features(maps, cams, grid);
  std::size_t n = grid.num_voxels();
  bool any_zero_voxel = false;
  for (std::size_t v = 0; v < n; ++v) {
    Vec3 p = grid.voxel_center(v);
    auto px = cams[0].project_point(p);
    if (px && cams[0].in_bounds(px->u, px->v)) continue;
    any_zero_voxel = true;
    for (std::size_t c = 0; c < 2; ++c) EXPECT_DOUBLE_EQ(vol[c * n + v], 0.0);
  }
  EXPECT_TRUE(any_zero_voxel);
}

TEST(Lift, MatchesPerVoxelOracle) {
  Rng rng(9);
  std::vector<Camera> cams = {orbit_camera(0.1), orbit_camera(2.2), orbit_camera(4.4)};
  std::vector<Tensor> maps;
  for (int i = 0; i < 3; ++i) maps.push_back(rand_map(rng, 5, 8, 8));
  VoxelGridSpec grid = make_grid({0, 0, 0}, 0.0, 0.25, {8, 8, 4});
  Tensor vol = lift_features(maps, cams, grid);
  std::size_t n = grid.num_voxels();
  for (std::size_t v = 0; v < n; ++v) {
    auto want = oracle_lift_voxel(maps, cams, grid.voxel_center(v));
    for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(vol[c * n + v], want[c], 1e-12);
  }
}

TEST(Lift, ViewPermutationInvariance) {
  Rng rng(10);
  std::vector<Camera> cams = {orbit_camera(0.5), orbit_camera(2.0), orbit_camera(3.9)};
  std::vector<Tensor> maps;
  for (int i = 0; i < 3; ++i) maps.push_back(rand_map(rng, 4, 8, 8));
  VoxelGridSpec grid = make_grid({0, 0, 0}, 0.0, 0.3, {6, 6, 3});
  Tensor a = lift_features(maps, cams, grid);
  std::vector<Camera> cams2 = {cams[2], cams[0], cams[1]};
  std::vector<Tensor> maps2 = {maps[2], maps[0], maps[1]};
  Tensor b = lift_features(maps2, cams2, grid);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Lift, DuplicateViewInvariance) {
  Rng rng(11);
  std::vector<Camera> cams = {orbit_camera(0.5), orbit_camera(2.0)};
  std::vector<Tensor> maps = {rand_map(rng, 4, 8, 8), rand_map(rng, 4, 8, 8)};
  VoxelGridSpec grid = make_grid({0, 0, 0}, 0.0, 0.3, {6, 6, 3});
  Tensor a = lift_features(maps, cams, grid);
  std::vector<Camera> cams2 = {cams[0], cams[1], cams[1]};
  std::vector<Tensor> maps2 = {maps[0], maps[1], maps[1]};
  Tensor b = lift_features(maps2, cams2, grid);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Lift, ConstantMapsGiveConstantVoxels) {
  std::vector<Camera> cams = {orbit_camera(1.0), orbit_camera(3.0)};
  const double c_val = 0.73;
  std::vector<Tensor> maps = {Tensor::full({2, 8, 8}, c_val), Tensor::full({2, 8, 8}, c_val)};
  VoxelGridSpec grid = make_grid({0, 0, 0}, 0.0, 0.3, {6, 6, 3});
  Tensor vol = lift_features(maps, cams, grid);
  LiftTable table = build_lift_table(cams, grid);
  std::size_t n = grid.num_voxels();
  for (std::size_t v = 0; v < n; ++v) {
    if (table.offsets[v + 1] == table.offsets[v]) continue;
    for (std::size_t c = 0; c < 2; ++c) EXPECT_DOUBLE_EQ(vol[c * n + v], c_val);
  }
}

TEST(Lift, ParallelBitIdenticalToSerial) {
  Rng rng(12);
  std::vector<Camera> cams;
  std::vector<Tensor> maps;
  for (int i = 0; i < 4; ++i) {
    cams.push_back(orbit_camera(i * 1.5));
    maps.push_back(rand_map(rng, 8, 8, 8));
  }
  VoxelGridSpec grid = make_grid({0, 0, 0}, 0.0, 0.25, {16, 16, 8});
  int keep = thread_count();
  thread_count() = 1;
  Tensor serial = lift_features(maps, cams, grid);
  thread_count() = 4;
  Tensor parallel = lift_features(maps, cams, grid);
  thread_count() = keep;
  for (std::size_t i = 0; i < serial.numel(); ++i) {
    std::uint64_t a, b;
    std::memcpy(&a, &serial[i], 8);
    std::memcpy(&b, &parallel[i], 8);
    ASSERT_EQ(a, b) << "at " << i;
  }
}

TEST(Lift, EmptyViewListRejected) {
  VoxelGridSpec grid = make_grid({0, 0, 0}, 0.0, 0.3, {2, 2, 2});
  EXPECT_THROW(lift_features({}, {}, grid), std::invalid_argument);
}
