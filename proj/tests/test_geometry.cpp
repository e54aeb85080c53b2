#include <gtest/gtest.h>

#include <cmath>

#include "gvs/geometry.hpp"
#include "gvs/random.hpp"

using namespace gvs;

namespace {

// random orbit camera with arbitrary principal point and feature scale
Camera random_camera(Rng& rng, double s = 1.0) {
  double ang = rng.uniform(0, 2 * M_PI);
  double radius = rng.uniform(2.0, 4.0);
  Vec3 eye{radius * std::cos(ang), radius * std::sin(ang), rng.uniform(0.5, 2.5)};
  Mat4 P = look_at_extrinsics(eye, {rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 0.8},
                              {0, 0, 1});
  double f = rng.uniform(40.0, 80.0);
  return Camera(make_intrinsics(f, f * rng.uniform(0.9, 1.1), rng.uniform(28, 36),
                                rng.uniform(28, 36)),
                P, s, s, 64, 64);
}

}  // namespace

TEST(Camera, PrincipalPointRay) {
  Camera cam(make_intrinsics(50, 50, 32, 24), identity_extrinsics(), 1.0, 1.0, 64, 48);
  auto px = cam.project_point({0, 0, 1});
  ASSERT_TRUE(px.has_value());
  EXPECT_NEAR(px->u, 32.0, 1e-12);
  EXPECT_NEAR(px->v, 24.0, 1e-12);
  EXPECT_NEAR(px->depth, 1.0, 1e-12);
}

TEST(Camera, BehindCameraIsInvalid) {
  Camera cam(make_intrinsics(50, 50, 32, 24), identity_extrinsics(), 1.0, 1.0, 64, 48);
  EXPECT_FALSE(cam.project_point({0, 0, -1.0}).has_value());
  EXPECT_FALSE(cam.project_point({0, 0, 0.0}).has_value());
}

TEST(Camera, UnprojectPrincipalPoint) {
  Camera cam(make_intrinsics(50, 50, 32, 24), identity_extrinsics(), 1.0, 1.0, 64, 48);
  Vec3 p = cam.unproject_pixel(32, 24, 2.5);
  EXPECT_NEAR(p.x, 0.0, 1e-12);
  EXPECT_NEAR(p.y, 0.0, 1e-12);
  EXPECT_NEAR(p.z, 2.5, 1e-12);
  EXPECT_THROW(cam.unproject_pixel(32, 24, 0.0), std::invalid_argument);
  EXPECT_THROW(cam.unproject_pixel(32, 24, -1.0), std::invalid_argument);
}

TEST(Camera, RoundTripsCloseWithin1em9) {
  Rng rng(41);
  int tested = 0;
  for (int i = 0; i < 1000; ++i) {
    Camera cam = random_camera(rng, rng.uniform() < 0.5 ? 1.0 : 0.5);
    Vec3 p{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0, 2.5)};
    auto px = cam.project_point(p);
    if (!px) continue;
    ++tested;
    Vec3 back = cam.unproject_pixel(px->u, px->v, px->depth);
    EXPECT_NEAR(back.x, p.x, 1e-9);
    EXPECT_NEAR(back.y, p.y, 1e-9);
    EXPECT_NEAR(back.z, p.z, 1e-9);
    // and the reverse composition
    double u = rng.uniform(0, cam.feature_width());
    double v = rng.uniform(0, cam.feature_height());
    double d = rng.uniform(0.5, 6.0);
    Vec3 w = cam.unproject_pixel(u, v, d);
    auto px2 = cam.project_point(w);
    ASSERT_TRUE(px2.has_value());
    EXPECT_NEAR(px2->u, u, 1e-9);
    EXPECT_NEAR(px2->v, v, 1e-9);
    EXPECT_NEAR(px2->depth, d, 1e-9);
  }
  EXPECT_GT(tested, 800);
}

TEST(Camera, ScaledFeatureCoordinatesMatchFullResolution) {
  Rng rng(43);
  for (int i = 0; i < 50; ++i) {
    double ang = rng.uniform(0, 2 * M_PI);
    Vec3 eye{3 * std::cos(ang), 3 * std::sin(ang), 1.5};
    Mat4 P = look_at_extrinsics(eye, {0, 0, 0.8}, {0, 0, 1});
    Mat34 K = make_intrinsics(60, 60, 32, 32);
    Camera full(K, P, 1.0, 1.0, 64, 64);
    Camera feat(K, P, 0.5, 0.5, 64, 64);
    double uf = rng.uniform(0, 32), vf = rng.uniform(0, 32), d = rng.uniform(1.0, 4.0);
    Vec3 a = feat.unproject_pixel(uf, vf, d);
    Vec3 b = full.unproject_pixel(uf / 0.5, vf / 0.5, d);
    EXPECT_NEAR(a.x, b.x, 1e-9);
    EXPECT_NEAR(a.y, b.y, 1e-9);
    EXPECT_NEAR(a.z, b.z, 1e-9);
  }
}

TEST(Camera, InBoundsHalfOpen) {
  Camera cam(make_intrinsics(50, 50, 32, 24), identity_extrinsics(), 0.25, 0.25, 64, 48);
  // feature bounds: 16 x 12, valid domain [0, W_feat) x [0, H_feat)
  EXPECT_FALSE(cam.in_bounds(-0.1, 5));
  EXPECT_TRUE(cam.in_bounds(0, 0));
  EXPECT_TRUE(cam.in_bounds(16.0 - 1e-9, 11.999999));
  EXPECT_FALSE(cam.in_bounds(16.0, 0));
  EXPECT_FALSE(cam.in_bounds(16.0 + 1e-9, 0));
  EXPECT_FALSE(cam.in_bounds(0, 12.0));
}

TEST(Camera, ValidityMonotoneUnderImageGrowth) {
  Rng rng(47);
  for (int i = 0; i < 200; ++i) {
    double f = rng.uniform(30, 60);
    Mat34 K = make_intrinsics(f, f, 32, 24);
    Mat4 P = identity_extrinsics();
    Camera small(K, P, 1.0, 1.0, 64, 48);
    Camera large(K, P, 1.0, 1.0, 96, 72);
    double u = rng.uniform(-10, 80), v = rng.uniform(-10, 60);
    if (small.in_bounds(u, v)) EXPECT_TRUE(large.in_bounds(u, v));
  }
}

TEST(Camera, RejectsNonRotationExtrinsics) {
  Mat4 P = identity_extrinsics();
  P[0][0] = 2.0;  // not orthonormal
  EXPECT_THROW(Camera(make_intrinsics(50, 50, 32, 24), P, 1, 1, 64, 48), std::invalid_argument);
  Mat4 R = identity_extrinsics();
  R[0][0] = -1.0;  // reflection, det = -1
  EXPECT_THROW(Camera(make_intrinsics(50, 50, 32, 24), R, 1, 1, 64, 48), std::invalid_argument);
  EXPECT_THROW(Camera(make_intrinsics(-50, 50, 32, 24), identity_extrinsics(), 1, 1, 64, 48),
               std::invalid_argument);
  EXPECT_THROW(Camera(make_intrinsics(50, 50, 32, 24), identity_extrinsics(), 0.0, 1, 64, 48),
               std::invalid_argument);
}
