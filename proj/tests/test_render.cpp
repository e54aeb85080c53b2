#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "gvs/random.hpp"
#include "gvs/render.hpp"

using namespace gvs;
namespace ad = gvs::ad;

namespace {

Camera frontal_camera(int w, int h, double f = 40.0) {
  return Camera(make_intrinsics(f, f, w / 2.0, h / 2.0), identity_extrinsics(), 1.0, 1.0, w, h);
}

GaussianPrimitive make_prim(const Vec3& pos, double alpha, double dc_r, double dc_g,
                            double dc_b, double scale = 0.3) {
  GaussianPrimitive p;
  p.position = pos;
  p.opacity = alpha;
  p.sh = {};
  p.sh[0] = dc_r / kSh0;
  p.sh[4] = dc_g / kSh0;
  p.sh[8] = dc_b / kSh0;
  p.rotation = {1, 0, 0, 0};
  p.scale = {scale, scale, scale};
  return p;
}

}  // namespace

TEST(Render, EmptySetGivesBackground) {
  Camera cam = frontal_camera(8, 8);
  GaussianSet set;
  Tensor img = render(set, cam, 8, 8, {0.2, 0.4, 0.6});
  for (std::size_t p = 0; p < 64; ++p) {
    EXPECT_DOUBLE_EQ(img[p], 0.2);
    EXPECT_DOUBLE_EQ(img[64 + p], 0.4);
    EXPECT_DOUBLE_EQ(img[128 + p], 0.6);
  }
}

TEST(Render, SingleOpaqueCenteredGaussianGivesDcColorExactly) {
  // center pixel of an odd-sized image: its center is the principal point
  Camera cam = frontal_camera(9, 9);
  Vec3 pos = cam.unproject_pixel(4.5, 4.5, 2.0);
  GaussianSet set;
  set.primitives.push_back(make_prim(pos, 1.0, 0.7, 0.3, 0.9, 2.0));  // large scale
  set.source_view.push_back(0);
  Tensor img = render(set, cam, 9, 9, {0, 0, 0});
  std::size_t center = 4 * 9 + 4;
  EXPECT_DOUBLE_EQ(img[center], 0.7);
  EXPECT_DOUBLE_EQ(img[81 + center], 0.3);
  EXPECT_DOUBLE_EQ(img[162 + center], 0.9);
}

TEST(Render, SwappingTwoGaussiansLeavesImageUnchanged) {
  Camera cam = frontal_camera(16, 16);
  GaussianSet a;
  a.primitives.push_back(make_prim(cam.unproject_pixel(8.2, 8.1, 2.0), 0.6, 0.9, 0.1, 0.1));
  a.primitives.push_back(make_prim(cam.unproject_pixel(8.6, 8.3, 3.0), 0.7, 0.1, 0.9, 0.1));
  a.source_view = {0, 0};
  GaussianSet b;
  b.primitives = {a.primitives[1], a.primitives[0]};
  b.source_view = {0, 0};
  Tensor ia = render(a, cam, 16, 16, {0, 0, 0});
  Tensor ib = render(b, cam, 16, 16, {0, 0, 0});
  EXPECT_EQ(0, std::memcmp(ia.data(), ib.data(), ia.numel() * 8));
}

TEST(Render, RandomPermutationBitIdentical) {
  Rng rng(3);
  Camera cam = frontal_camera(16, 16);
  GaussianSet a;
  for (int i = 0; i < 40; ++i) {
    a.primitives.push_back(make_prim(
        {rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(1.5, 4.0)},
        rng.uniform(0.1, 0.9), rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1), 0.15));
    a.source_view.push_back(0);
  }
  GaussianSet b = a;
  // deterministic shuffle
  for (std::size_t i = b.primitives.size(); i > 1; --i)
    std::swap(b.primitives[i - 1], b.primitives[rng.below(i)]);
  Tensor ia = render(a, cam, 16, 16, {0.1, 0.1, 0.1});
  Tensor ib = render(b, cam, 16, 16, {0.1, 0.1, 0.1});
  EXPECT_EQ(0, std::memcmp(ia.data(), ib.data(), ia.numel() * 8));
}

TEST(Render, CompositeIsConvexCombination) {
  Rng rng(4);
  Camera cam = frontal_camera(12, 12);
  GaussianSet set;
  double lo = 1e30, hi = -1e30;
  for (int i = 0; i < 25; ++i) {
    double r = rng.uniform(0, 1), g2 = rng.uniform(0, 1), b = rng.uniform(0, 1);
    lo = std::min({lo, r, g2, b});
    hi = std::max({hi, r, g2, b});
    set.primitives.push_back(make_prim(
        {rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(1.0, 3.0)},
        rng.uniform(0.05, 1.0), r, g2, b, 0.2));
    set.source_view.push_back(0);
  }
  double bg = 0.5;
  lo = std::min(lo, bg);
  hi = std::max(hi, bg);
  Tensor img = render(set, cam, 12, 12, {bg, bg, bg});
  for (std::size_t i = 0; i < img.numel(); ++i) {
    ASSERT_GE(img[i], lo - 1e-9);
    ASSERT_LE(img[i], hi + 1e-9);
  }
}

TEST(Render, TransmittanceStaysInUnitInterval) {
  Rng rng(5);
  Camera cam = frontal_camera(10, 10);
  std::vector<Vec3> pos;
  std::vector<std::array<double, 4>> rot;
  std::vector<std::array<double, 3>> scl;
  Tensor alphas({30}), sh({30, kShDim});
  for (int i = 0; i < 30; ++i) {
    pos.push_back({rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(1.0, 3.0)});
    rot.push_back({1, 0, 0, 0});
    scl.push_back({0.2, 0.2, 0.2});
    alphas[i] = rng.uniform(0.0, 1.0);
  }
  SplatScene scene = prepare_splats(pos, rot, scl, cam, 10, 10, {0, 0, 0});
  // zero-color gaussians over a unit background: the image is exactly the
  // per-pixel final transmittance
  Tensor white = render_forward(
      SplatScene(scene), alphas, sh);  // colors zero => only T*bg term
  SplatScene scene_white = prepare_splats(pos, rot, scl, cam, 10, 10, {1, 1, 1});
  Tensor img = render_forward(scene_white, alphas, sh);
  for (std::size_t i = 0; i < img.numel(); ++i) {
    ASSERT_GE(img[i], 0.0);
    ASSERT_LE(img[i], 1.0);
  }
  (void)white;
}

TEST(Render, BehindCameraAndSingularSkipsCounted) {
  Camera cam = frontal_camera(8, 8);
  std::vector<Vec3> pos = {{0, 0, -1.0}, {0, 0, 2.0}};
  std::vector<std::array<double, 4>> rot = {{1, 0, 0, 0}, {1, 0, 0, 0}};
  std::vector<std::array<double, 3>> scl = {{0.2, 0.2, 0.2}, {1e-12, 1e-12, 1e-12}};
  SplatScene scene = prepare_splats(pos, rot, scl, cam, 8, 8, {0, 0, 0});
  EXPECT_EQ(scene.stats.skipped_behind, 1u);
  EXPECT_EQ(scene.stats.skipped_singular, 1u);
  EXPECT_TRUE(scene.splats.empty());
}

TEST(RenderLoss, IdenticalImagesGiveZero) {
  Rng rng(6);
  Tensor a({3, 4, 4});
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] = rng.uniform(0, 1);
  EXPECT_DOUBLE_EQ(render_loss(a, a), 0.0);
}

TEST(RenderLoss, ZerosVsOnesIsOne) {
  Tensor a({3, 4, 4});
  Tensor b = Tensor::full({3, 4, 4}, 1.0);
  EXPECT_DOUBLE_EQ(render_loss(a, b), 1.0);
  EXPECT_THROW(render_loss(a, Tensor({3, 4, 5})), std::invalid_argument);
}

TEST(Metrics, PsnrAnalyticCases) {
  Tensor a({3, 4, 4});
  EXPECT_DOUBLE_EQ(psnr(a, a), 99.0);
  Tensor b = Tensor::full({3, 4, 4}, 0.1);  // mse = 0.01
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-12);
}

TEST(Metrics, SsimIdenticalIsOneAndSymmetric) {
  Rng rng(7);
  Tensor a({3, 16, 16}), b({3, 16, 16});
  for (std::size_t i = 0; i < a.numel(); ++i) {
    a[i] = rng.uniform(0, 1);
    b[i] = rng.uniform(0, 1);
  }
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-12);
  EXPECT_LT(ssim(a, b), 1.0);
}

TEST(Metrics, SsimRejectsTinyImages) {
  Tensor a({3, 8, 8});
  EXPECT_THROW(ssim(a, a), std::invalid_argument);
}

TEST(Ppm, RoundTripWithinQuantization) {
  namespace fs = std::filesystem;
  Rng rng(8);
  Tensor img({3, 6, 5});
  for (std::size_t i = 0; i < img.numel(); ++i) img[i] = rng.uniform(0, 1);
  fs::path dir = fs::temp_directory_path() / "gvs_render_test";
  fs::create_directories(dir);
  std::string path = (dir / "img.ppm").string();
  write_ppm(path, img);
  Tensor back = read_ppm(path);
  ASSERT_TRUE(back.same_shape(img));
  for (std::size_t i = 0; i < img.numel(); ++i) EXPECT_NEAR(back[i], img[i], 0.5 / 255.0 + 1e-12);
}

TEST(RenderOp, GradMatchesFiniteDifferences) {
  Rng rng(9);
  Camera cam = frontal_camera(12, 12);
  std::vector<Vec3> pos;
  std::vector<std::array<double, 4>> rot;
  std::vector<std::array<double, 3>> scl;
  Tensor alphas({5}), sh({5, kShDim}), target({3, 12, 12});
  for (int i = 0; i < 5; ++i) {
    pos.push_back({rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(1.5, 3.0)});
    rot.push_back({1, 0, 0, 0});
    scl.push_back({0.25, 0.3, 0.2});
    alphas[i] = rng.uniform(0.1, 0.9);
    for (std::size_t j = 0; j < kShDim; ++j) sh[i * kShDim + j] = rng.uniform(-1, 1);
  }
  for (std::size_t i = 0; i < target.numel(); ++i) target[i] = rng.uniform(0, 1);
  auto scene = std::make_shared<SplatScene>(prepare_splats(pos, rot, scl, cam, 12, 12, {0, 0, 0}));
  double err = ad::grad_check(
      [scene, target](ad::Graph& g, const std::vector<ad::ValueId>& v) {
        return render_loss(g, render_op(g, v[0], v[1], scene), g.constant(target));
      },
      {alphas, sh}, 1e-6);
  EXPECT_LT(err, 1e-4);
}
