#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "gvs/scenegen.hpp"

using namespace gvs;
namespace ad = gvs::ad;
namespace fs = std::filesystem;

namespace {

SceneGenConfig small_cfg() {
  SceneGenConfig cfg;
  cfg.n_objects = 3;
  cfg.n_views = 4;
  cfg.image_width = 32;
  cfg.image_height = 32;
  return cfg;
}

bool tensors_bit_equal(const Tensor& a, const Tensor& b) {
  return a.same_shape(b) && std::memcmp(a.data(), b.data(), a.numel() * 8) == 0;
}

}  // namespace

TEST(SceneGen, SameSeedBitIdentical) {
  SyntheticScene a = generate_scene(7, small_cfg());
  SyntheticScene b = generate_scene(7, small_cfg());
  ASSERT_EQ(a.objects.size(), b.objects.size());
  for (std::size_t i = 0; i < a.objects.size(); ++i) {
    EXPECT_EQ(a.objects[i].box.center.x, b.objects[i].box.center.x);
    EXPECT_EQ(a.objects[i].box.yaw, b.objects[i].box.yaw);
  }
  for (std::size_t v = 0; v < a.images.size(); ++v) {
    EXPECT_TRUE(tensors_bit_equal(a.images[v], b.images[v]));
    EXPECT_TRUE(tensors_bit_equal(a.depths[v], b.depths[v]));
  }
  SyntheticScene c = generate_scene(8, small_cfg());
  EXPECT_FALSE(tensors_bit_equal(a.images[0], c.images[0]));
}

TEST(SceneGen, EmptyRoomDepthEqualsWallDistance) {
  SceneGenConfig cfg = small_cfg();
  cfg.n_objects = 0;
  SyntheticScene s = generate_scene(3, cfg);
  // re-cast the first view against walls only and compare
  const Camera& cam = s.cameras[0];
  Tensor img, depth;
  raycast_view(s, cam, img, depth);
  EXPECT_TRUE(tensors_bit_equal(depth, s.depths[0]));
  double diag = s.room.diagonal();
  for (std::size_t i = 0; i < depth.numel(); ++i) {
    ASSERT_GT(depth[i], 0.0);
    ASSERT_LE(depth[i], diag);
  }
}

TEST(SceneGen, ObjectsInsideRoomAndOnFloor) {
  SyntheticScene s = generate_scene(11, small_cfg());
  for (const SceneObject& o : s.objects) {
    EXPECT_NEAR(o.box.center.z, 0.5 * o.box.h, 1e-12);
    auto corners = detail::bev_corners(o.box);
    for (const auto& c : corners) {
      EXPECT_GT(c.x, s.room.min.x);
      EXPECT_LT(c.x, s.room.max.x);
      EXPECT_GT(c.y, s.room.min.y);
      EXPECT_LT(c.y, s.room.max.y);
    }
  }
}

namespace {

// independent ray/box intersector: test each of the 6 face planes in the
// box frame and keep the nearest hit whose point lies on the face
double oracle_box_hit(const Vec3& origin, const Vec3& dir, const Box3D& b) {
  double c = std::cos(b.yaw), s = std::sin(b.yaw);
  Vec3 ro = origin - b.center;
  double o[3] = {c * ro.x + s * ro.y, -s * ro.x + c * ro.y, ro.z};
  double d[3] = {c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z};
  double half[3] = {0.5 * b.l, 0.5 * b.w, 0.5 * b.h};
  double best = 1e30;
  for (int axis = 0; axis < 3; ++axis)
    for (double side : {-1.0, 1.0}) {
      if (std::abs(d[axis]) < 1e-12) continue;
      double t = (side * half[axis] - o[axis]) / d[axis];
      if (t <= 1e-9 || t >= best) continue;
      bool on_face = true;
      for (int a2 = 0; a2 < 3; ++a2) {
        if (a2 == axis) continue;
        double coord = o[a2] + t * d[a2];
        on_face = on_face && std::abs(coord) <= half[a2] + 1e-12;
      }
      if (on_face) best = t;
    }
  return best;
}

}  // namespace

TEST(SceneGen, DepthMatchesIndependentRayOracle) {
  SyntheticScene s = generate_scene(19, small_cfg());
  int hits_checked = 0;
  for (std::size_t v = 0; v < s.cameras.size(); ++v) {
    const Camera& cam = s.cameras[v];
    const Mat34& K = cam.intrinsics();
    Vec3 origin = cam.center();
    std::size_t W = s.depths[v].dim(1), H = s.depths[v].dim(0);
    // every 5th pixel: nearest of independent box hits vs stored depth
    for (std::size_t y = 0; y < H; y += 5)
      for (std::size_t x = 0; x < W; x += 5) {
        Vec3 dc{(x + 0.5 - K[0][2]) / K[0][0], (y + 0.5 - K[1][2]) / K[1][1], 1.0};
        Vec3 dir = cam.rotate_to_world(dc);
        double nearest_box = 1e30;
        for (const SceneObject& o : s.objects)
          nearest_box = std::min(nearest_box, oracle_box_hit(origin, dir, o.box));
        double stored = s.depths[v][y * W + x];
        if (nearest_box < 1e29) {
          // a box is hit: stored depth equals the hit unless a wall is in
          // front, and a wall cannot be in front of an interior object here
          EXPECT_NEAR(stored, nearest_box, 1e-9) << "view " << v << " px " << x << "," << y;
          ++hits_checked;
        } else {
          // pure wall pixel: positive, bounded by the room diagonal
          EXPECT_GT(stored, 0.0);
          EXPECT_LE(stored, s.room.diagonal());
        }
      }
  }
  EXPECT_GT(hits_checked, 10);
}

TEST(SceneGen, EveryObjectVisibleInAtLeastTwoViews) {
  for (std::uint64_t seed : {0ull, 1ull, 2ull, 3ull}) {
    SyntheticScene s = generate_scene(seed, small_cfg());
    for (const SceneObject& o : s.objects) {
      int views_seeing = 0;
      for (const Camera& cam : s.cameras) {
        auto corners = detail::bev_corners(o.box);
        int in = 0;
        for (const auto& c2 : corners)
          for (double z : {o.box.center.z - 0.5 * o.box.h, o.box.center.z + 0.5 * o.box.h}) {
            auto px = cam.project_point({c2.x, c2.y, z});
            if (px && cam.in_bounds(px->u, px->v)) ++in;
          }
        if (in >= 1) ++views_seeing;
      }
      EXPECT_GE(views_seeing, 2);
    }
  }
}

TEST(SceneGen, PlacementFailureNamesAttemptLimit) {
  SceneGenConfig cfg = small_cfg();
  cfg.n_objects = 500;
  try {
    generate_scene(0, cfg);
    FAIL() << "expected placement error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("1000"), std::string::npos) << e.what();
  }
}

TEST(Container, WriteReadRoundTrip) {
  SyntheticScene s = generate_scene(23, small_cfg());
  fs::path dir = fs::temp_directory_path() / "gvs_scene_rt";
  fs::remove_all(dir);
  write_scene(s, dir.string());
  SyntheticScene back = read_scene(dir.string());
  ASSERT_EQ(back.objects.size(), s.objects.size());
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    EXPECT_EQ(back.objects[i].box.center.x, s.objects[i].box.center.x);
    EXPECT_EQ(back.objects[i].box.yaw, s.objects[i].box.yaw);
    EXPECT_EQ(back.objects[i].box.class_id, s.objects[i].box.class_id);
  }
  ASSERT_EQ(back.cameras.size(), s.cameras.size());
  for (std::size_t v = 0; v < s.cameras.size(); ++v) {
    EXPECT_EQ(back.cameras[v].extrinsics(), s.cameras[v].extrinsics());
    EXPECT_EQ(back.cameras[v].intrinsics(), s.cameras[v].intrinsics());
    // depth is bit-identical; images only up to 8-bit quantization
    EXPECT_TRUE(tensors_bit_equal(back.depths[v], s.depths[v]));
    for (std::size_t i = 0; i < s.images[v].numel(); ++i)
      ASSERT_NEAR(back.images[v][i], s.images[v][i], 0.5 / 255.0 + 1e-12);
  }
}

TEST(Container, TruncatedDepthFileNamesFile) {
  SyntheticScene s = generate_scene(29, small_cfg());
  fs::path dir = fs::temp_directory_path() / "gvs_scene_trunc";
  fs::remove_all(dir);
  write_scene(s, dir.string());
  fs::resize_file(dir / "depth" / "view_001.gvt", 10);
  try {
    read_scene(dir.string());
    FAIL() << "expected error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("view_001.gvt"), std::string::npos) << e.what();
  }
}

TEST(Container, UnknownKeysAccepted) {
  SyntheticScene s = generate_scene(31, small_cfg());
  fs::path dir = fs::temp_directory_path() / "gvs_scene_fwd";
  fs::remove_all(dir);
  write_scene(s, dir.string());
  // inject an unknown key
  nlohmann::json j;
  {
    std::ifstream is(dir / "scene.json");
    is >> j;
  }
  j["future_extension"] = {{"foo", 1}};
  {
    std::ofstream os(dir / "scene.json");
    os << j.dump(1);
  }
  EXPECT_NO_THROW(read_scene(dir.string()));
}

TEST(Container, VersionMismatchRejected) {
  SyntheticScene s = generate_scene(37, small_cfg());
  fs::path dir = fs::temp_directory_path() / "gvs_scene_ver";
  fs::remove_all(dir);
  write_scene(s, dir.string());
  nlohmann::json j;
  {
    std::ifstream is(dir / "scene.json");
    is >> j;
  }
  j["format_version"] = 99;
  {
    std::ofstream os(dir / "scene.json");
    os << j.dump(1);
  }
  try {
    read_scene(dir.string());
    FAIL() << "expected version error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("99"), std::string::npos);
  }
}

TEST(Container, MissingSceneJson) {
  EXPECT_THROW(read_scene("/nonexistent/dir"), std::runtime_error);
}

TEST(Encoder, ZeroParamsGiveZeroFeatures) {
  ad::Graph g;
  ImageEncoderParams p;
  p.c1 = {Tensor({16, 3, 3, 3}), Tensor({16}), 2};
  p.c2 = {Tensor({8, 16, 3, 3}), Tensor({8}), 2};
  p.c3 = {Tensor({8, 8, 3, 3}), Tensor({8}), 1};
  p.proj = {Tensor({16, 8}), Tensor({8})};
  auto f = encode_image(g, g.constant(Tensor::full({3, 16, 16}, 0.5)), insert_image_encoder(g, p));
  const Tensor& t = g.value(f);
  EXPECT_EQ(t.shape(), (std::vector<std::size_t>{8, 4, 4}));
  for (std::size_t i = 0; i < t.numel(); ++i) EXPECT_EQ(t[i], 0.0);
}

TEST(Encoder, OutputShapeQuarterResolution) {
  ad::Graph g;
  Rng rng(3);
  ImageEncoderParams p = make_image_encoder(rng, 8);
  auto f = encode_image(g, g.constant(Tensor::full({3, 64, 64}, 0.3)), insert_image_encoder(g, p));
  EXPECT_EQ(g.value(f).shape(), (std::vector<std::size_t>{8, 16, 16}));
  DepthFeatureParams dfp = make_depth_features(rng, 8);
  auto df = depth_features(g, f, insert_depth_features(g, dfp));
  EXPECT_EQ(g.value(df).shape(), (std::vector<std::size_t>{8, 16, 16}));
}

TEST(Encoder, RejectsIndivisibleImageSize) {
  ad::Graph g;
  Rng rng(4);
  ImageEncoderParams p = make_image_encoder(rng, 8);
  EXPECT_THROW(encode_image(g, g.constant(Tensor::full({3, 30, 32}, 0.1)),
                            insert_image_encoder(g, p)),
               std::invalid_argument);
}
