#pragma once

// Deterministic synthetic scenes: colored yaw-rotated boxes in a room,
// ray-cast RGB with flat Lambertian shading and exact per-pixel depth from
// an inward-looking camera orbit. Also holds the scene container format and
// the small trainable image encoder feeding the pipeline.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gvs/detection.hpp"
#include "gvs/gaussians.hpp"
#include "gvs/geometry.hpp"
#include "gvs/lifting.hpp"
#include "gvs/parallel.hpp"
#include "gvs/params.hpp"
#include "gvs/random.hpp"
#include "gvs/render.hpp"
#include "gvs/tensor.hpp"

namespace gvs {

inline constexpr int kSceneFormatVersion = 1;
inline constexpr std::size_t kNumClasses = 3;

struct RoomBounds {
  Vec3 min{-3.2, -3.2, 0.0};
  Vec3 max{3.2, 3.2, 2.56};

  double diagonal() const { return (max - min).norm(); }
};

struct SceneObject {
  Box3D box;
  std::array<double, 3> color{0.5, 0.5, 0.5};
};

struct SyntheticScene {
  RoomBounds room;
  std::vector<SceneObject> objects;
  std::vector<Camera> cameras;
  std::vector<Tensor> images;  // [3, H, W] in [0,1]
  std::vector<Tensor> depths;  // [H, W], camera-frame z in meters

  std::vector<Box3D> gt_boxes() const {
    std::vector<Box3D> out;
    out.reserve(objects.size());
    for (const auto& o : objects) out.push_back(o.box);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Ray casting.

namespace detail {

struct Hit {
  double t = 0.0;  // camera-frame depth (z), rays use dir with unit z
  Vec3 normal;     // world-space
  std::array<double, 3> albedo{};
};

// Slab test against a yaw-rotated box; the ray is transformed into the box
// frame. Returns entry depth and face normal.
inline std::optional<Hit> ray_box(const Vec3& origin, const Vec3& dir, const SceneObject& obj) {
  const Box3D& b = obj.box;
  double c = std::cos(b.yaw), s = std::sin(b.yaw);
  Vec3 ro = origin - b.center;
  Vec3 o{c * ro.x + s * ro.y, -s * ro.x + c * ro.y, ro.z};
  Vec3 d{c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z};
  double half[3] = {0.5 * b.l, 0.5 * b.w, 0.5 * b.h};
  double ov[3] = {o.x, o.y, o.z}, dv[3] = {d.x, d.y, d.z};
  double tmin = 0.0, tmax = 1e30;
  int axis_min = -1;
  double sign_min = 0.0;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(dv[a]) < 1e-12) {
      if (ov[a] < -half[a] || ov[a] > half[a]) return std::nullopt;
      continue;
    }
    double inv = 1.0 / dv[a];
    double t1 = (-half[a] - ov[a]) * inv;
    double t2 = (half[a] - ov[a]) * inv;
    double sgn = -1.0;
    if (t1 > t2) {
      std::swap(t1, t2);
      sgn = 1.0;
    }
    if (t1 > tmin) {
      tmin = t1;
      axis_min = a;
      sign_min = sgn;
    }
    tmax = std::min(tmax, t2);
    if (tmin > tmax) return std::nullopt;
  }
  if (axis_min < 0 || tmin <= 1e-9) return std::nullopt;  // origin inside or degenerate
  Hit h;
  h.t = tmin;
  Vec3 nl{0, 0, 0};
  if (axis_min == 0) nl.x = sign_min;
  if (axis_min == 1) nl.y = sign_min;
  if (axis_min == 2) nl.z = sign_min;
  h.normal = {c * nl.x - s * nl.y, s * nl.x + c * nl.y, nl.z};  // rotate back
  h.albedo = obj.color;
  return h;
}

// Exit intersection with the room interior (the camera is inside).
inline Hit ray_room(const Vec3& origin, const Vec3& dir, const RoomBounds& room) {
  double best_t = 1e30;
  Vec3 normal{0, 0, 1};
  std::array<double, 3> albedo{0.75, 0.75, 0.75};
  struct Face {
    int axis;
    double plane;
    double n_sign;
    std::array<double, 3> color;
  };
  const Face faces[6] = {
      {0, room.min.x, 1.0, {0.70, 0.70, 0.72}}, {0, room.max.x, -1.0, {0.72, 0.70, 0.68}},
      {1, room.min.y, 1.0, {0.68, 0.72, 0.70}}, {1, room.max.y, -1.0, {0.74, 0.74, 0.70}},
      {2, room.min.z, 1.0, {0.42, 0.38, 0.34}},  // floor
      {2, room.max.z, -1.0, {0.88, 0.88, 0.90}}  // ceiling
  };
  double ov[3] = {origin.x, origin.y, origin.z}, dv[3] = {dir.x, dir.y, dir.z};
  for (const Face& f : faces) {
    if (std::abs(dv[f.axis]) < 1e-12) continue;
    double t = (f.plane - ov[f.axis]) / dv[f.axis];
    if (t <= 1e-9 || t >= best_t) continue;
    // must leave through this face (ray pointing against the inward normal)
    if (dv[f.axis] * f.n_sign >= 0.0) continue;
    best_t = t;
    normal = {0, 0, 0};
    if (f.axis == 0) normal.x = f.n_sign;
    if (f.axis == 1) normal.y = f.n_sign;
    if (f.axis == 2) normal.z = f.n_sign;
    albedo = f.color;
  }
  return {best_t, normal, albedo};
}

inline std::array<double, 3> shade(const Hit& h) {
  static const Vec3 light = Vec3{0.3, 0.5, 0.8}.normalized();
  double diffuse = std::max(0.0, h.normal.dot(light));
  double k = 0.3 + 0.7 * diffuse;
  return {h.albedo[0] * k, h.albedo[1] * k, h.albedo[2] * k};
}

}  // namespace detail

// Renders RGB and exact depth for one camera; depth is the camera-frame z of
// the first box-or-wall intersection.
inline void raycast_view(const SyntheticScene& scene, const Camera& cam, Tensor& image,
                         Tensor& depth) {
  std::size_t W = static_cast<std::size_t>(cam.width());
  std::size_t H = static_cast<std::size_t>(cam.height());
  image = Tensor({3, H, W});
  depth = Tensor({H, W});
  const Mat34& K = cam.intrinsics();
  double fx = K[0][0], fy = K[1][1], cx = K[0][2], cy = K[1][2];
  Vec3 origin = cam.center();
  std::size_t npix = W * H;
  parallel_for(H, [&](std::size_t y) {
    for (std::size_t x = 0; x < W; ++x) {
      // unit-z camera direction so the ray parameter is camera depth
      Vec3 dc{(static_cast<double>(x) + 0.5 - cx) / fx,
              (static_cast<double>(y) + 0.5 - cy) / fy, 1.0};
      Vec3 dir = cam.rotate_to_world(dc);
      detail::Hit best = detail::ray_room(origin, dir, scene.room);
      for (const SceneObject& obj : scene.objects) {
        auto h = detail::ray_box(origin, dir, obj);
        if (h && h->t < best.t) best = *h;
      }
      auto rgb = detail::shade(best);
      for (int ch = 0; ch < 3; ++ch) image[ch * npix + y * W + x] = rgb[ch];
      depth[y * W + x] = best.t;
    }
  });
}

// ---------------------------------------------------------------------------
// Generation.

struct SceneGenConfig {
  std::size_t n_objects = 4;
  std::size_t n_views = 8;
  std::size_t image_width = 64;
  std::size_t image_height = 64;
  double feature_scale = 0.25;  // S = diag(1/4, 1/4, 1)

  std::size_t image_size = 0;  // convenience: overrides width and height when set
};

// Class priors: 0 table-like, 1 chair-like, 2 cabinet-like.
inline Box3D sample_object_box(Rng& rng, int class_id) {
  static const double priors[kNumClasses][3] = {
      {1.2, 0.8, 0.75}, {0.5, 0.5, 0.9}, {0.8, 0.45, 1.6}};
  Box3D b;
  b.class_id = class_id;
  b.l = priors[class_id][0] * rng.uniform(0.8, 1.2);
  b.w = priors[class_id][1] * rng.uniform(0.8, 1.2);
  b.h = priors[class_id][2] * rng.uniform(0.8, 1.2);
  b.yaw = wrap_angle(rng.uniform(-M_PI, M_PI));
  return b;
}

inline std::array<double, 3> class_color(Rng& rng, int class_id) {
  static const double palette[kNumClasses][3] = {
      {0.65, 0.45, 0.28}, {0.75, 0.18, 0.16}, {0.22, 0.36, 0.70}};
  std::array<double, 3> c;
  for (int i = 0; i < 3; ++i)
    c[i] = std::clamp(palette[class_id][i] + rng.uniform(-0.08, 0.08), 0.05, 0.95);
  return c;
}

inline SyntheticScene generate_scene(std::uint64_t seed, const SceneGenConfig& cfg_in) {
  SceneGenConfig cfg = cfg_in;
  if (cfg.image_size) cfg.image_width = cfg.image_height = cfg.image_size;
  if (cfg.n_views < 1) throw std::invalid_argument("generate_scene: n_views must be >= 1");
  SyntheticScene scene;
  Rng rng(seed ^ 0x5ce5e5ce5e5ce5ull);

  // Objects sit on the floor inside the central placement zone so the
  // detection grid covers them; BEV circumscribed circles must not overlap.
  const double place_half = 1.9;
  constexpr int kMaxAttempts = 1000;
  for (std::size_t i = 0; i < cfg.n_objects; ++i) {
    int cls = static_cast<int>(rng.below(kNumClasses));
    bool placed = false;
    for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
      Box3D b = sample_object_box(rng, cls);
      double r = 0.5 * std::hypot(b.l, b.w);
      double range = place_half - r;
      b.center = {rng.uniform(-range, range), rng.uniform(-range, range), 0.5 * b.h};
      bool ok = true;
      for (const SceneObject& o : scene.objects) {
        double ro = 0.5 * std::hypot(o.box.l, o.box.w);
        double dx = b.center.x - o.box.center.x, dy = b.center.y - o.box.center.y;
        if (std::hypot(dx, dy) < r + ro + 0.05) {
          ok = false;
          break;
        }
      }
      if (ok) {
        scene.objects.push_back({b, class_color(rng, cls)});
        placed = true;
      }
    }
    if (!placed)
      throw std::runtime_error("generate_scene: could not place object " + std::to_string(i) +
                               " without overlap after " + std::to_string(kMaxAttempts) +
                               " attempts");
  }

  // Inward-looking orbit; poses are resampled until every box has corner
  // visibility in at least two views.
  std::size_t W = cfg.image_width, H = cfg.image_height;
  double f = 0.9 * static_cast<double>(W);
  Mat34 K = make_intrinsics(f, f, 0.5 * static_cast<double>(W), 0.5 * static_cast<double>(H));
  constexpr int kPoseAttempts = 50;
  for (int attempt = 0;; ++attempt) {
    scene.cameras.clear();
    double phase = rng.uniform(0.0, 2.0 * M_PI);
    for (std::size_t v = 0; v < cfg.n_views; ++v) {
      double ang = phase + 2.0 * M_PI * static_cast<double>(v) / static_cast<double>(cfg.n_views) +
                   rng.uniform(-0.08, 0.08);
      double radius = rng.uniform(2.55, 2.85);
      double height = rng.uniform(1.7, 2.1);
      Vec3 eye{radius * std::cos(ang), radius * std::sin(ang), height};
      Mat4 P = look_at_extrinsics(eye, {0.0, 0.0, 0.7}, {0.0, 0.0, 1.0});
      scene.cameras.emplace_back(K, P, cfg.feature_scale, cfg.feature_scale,
                                 static_cast<int>(W), static_cast<int>(H));
    }
    bool all_visible = true;
    for (const SceneObject& obj : scene.objects) {
      auto corners = detail::bev_corners(obj.box);
      int views_seeing = 0;
      for (const Camera& cam : scene.cameras) {
        int in_view = 0;
        for (const auto& c2 : corners)
          for (double z : {obj.box.center.z - 0.5 * obj.box.h, obj.box.center.z + 0.5 * obj.box.h}) {
            auto px = cam.project_point({c2.x, c2.y, z});
            if (px && cam.in_bounds(px->u, px->v)) ++in_view;
          }
        if (in_view >= 1) ++views_seeing;  // >= 10% of the 8 corners
      }
      if (views_seeing < 2) {
        all_visible = false;
        break;
      }
    }
    if (all_visible) break;
    if (attempt >= kPoseAttempts)
      throw std::runtime_error("generate_scene: no camera orbit sees every object twice");
  }

  scene.images.resize(cfg.n_views);
  scene.depths.resize(cfg.n_views);
  for (std::size_t v = 0; v < cfg.n_views; ++v)
    raycast_view(scene, scene.cameras[v], scene.images[v], scene.depths[v]);
  return scene;
}

// ---------------------------------------------------------------------------
// Scene container: scene.json + images/view_%03d.ppm + depth/view_%03d.gvt.

namespace detail {

inline std::string view_name(const char* prefix, std::size_t v, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%03zu.%s", prefix, v, ext);
  return buf;
}

}  // namespace detail

inline void write_scene(const SyntheticScene& scene, const std::string& path) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(path) / "images");
  fs::create_directories(fs::path(path) / "depth");

  nlohmann::json j;
  j["format_version"] = kSceneFormatVersion;
  j["room"] = {{"min", {scene.room.min.x, scene.room.min.y, scene.room.min.z}},
               {"max", {scene.room.max.x, scene.room.max.y, scene.room.max.z}}};
  j["objects"] = nlohmann::json::array();
  for (const SceneObject& o : scene.objects) {
    j["objects"].push_back(
        {{"class_id", o.box.class_id},
         {"center", {o.box.center.x, o.box.center.y, o.box.center.z}},
         {"dims", {o.box.l, o.box.w, o.box.h}},
         {"yaw", o.box.yaw},
         {"color", {o.color[0], o.color[1], o.color[2]}}});
  }
  j["cameras"] = nlohmann::json::array();
  for (const Camera& cam : scene.cameras) {
    std::vector<double> K, P, S;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) K.push_back(cam.intrinsics()[r][c]);
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) P.push_back(cam.extrinsics()[r][c]);
    S = {cam.scale_x(), 0, 0, 0, cam.scale_y(), 0, 0, 0, 1};
    j["cameras"].push_back({{"K", K}, {"P", P}, {"S", S},
                            {"width", cam.width()}, {"height", cam.height()}});
  }
  std::ofstream os(fs::path(path) / "scene.json");
  if (!os) throw std::runtime_error("write_scene: cannot open " + path + "/scene.json");
  os << j.dump(1) << "\n";

  for (std::size_t v = 0; v < scene.images.size(); ++v)
    write_ppm((fs::path(path) / "images" / detail::view_name("view", v, "ppm")).string(),
              scene.images[v]);
  for (std::size_t v = 0; v < scene.depths.size(); ++v)
    save_gvt((fs::path(path) / "depth" / detail::view_name("view", v, "gvt")).string(),
             scene.depths[v]);
}

inline SyntheticScene read_scene(const std::string& path) {
  namespace fs = std::filesystem;
  fs::path root(path);
  std::ifstream is(root / "scene.json");
  if (!is) throw std::runtime_error("read_scene: missing " + (root / "scene.json").string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("read_scene: malformed scene.json in " + path + ": " + e.what());
  }
  int version = j.at("format_version").get<int>();
  if (version != kSceneFormatVersion)
    throw std::runtime_error("read_scene: unsupported format_version " +
                             std::to_string(version) + " in " + path);
  SyntheticScene scene;
  auto rmin = j.at("room").at("min");
  auto rmax = j.at("room").at("max");
  scene.room.min = {rmin[0], rmin[1], rmin[2]};
  scene.room.max = {rmax[0], rmax[1], rmax[2]};
  for (const auto& jo : j.at("objects")) {
    SceneObject o;
    o.box.class_id = jo.at("class_id").get<int>();
    auto c = jo.at("center");
    o.box.center = {c[0], c[1], c[2]};
    auto d = jo.at("dims");
    o.box.l = d[0];
    o.box.w = d[1];
    o.box.h = d[2];
    o.box.yaw = jo.at("yaw").get<double>();
    auto col = jo.at("color");
    o.color = {col[0], col[1], col[2]};
    scene.objects.push_back(o);
  }
  for (const auto& jc : j.at("cameras")) {
    auto K = jc.at("K");
    auto P = jc.at("P");
    auto S = jc.at("S");
    Mat34 Km;
    Mat4 Pm;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) Km[r][c] = K[r * 4 + c];
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) Pm[r][c] = P[r * 4 + c];
    scene.cameras.emplace_back(Km, Pm, S[0].get<double>(), S[4].get<double>(),
                               jc.at("width").get<int>(), jc.at("height").get<int>());
  }
  std::size_t n_views = scene.cameras.size();
  for (std::size_t v = 0; v < n_views; ++v) {
    scene.images.push_back(
        read_ppm((root / "images" / detail::view_name("view", v, "ppm")).string()));
    scene.depths.push_back(
        load_gvt((root / "depth" / detail::view_name("view", v, "gvt")).string()));
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Image encoder: three strided convolutions to 1/4 resolution, class-token
// fusion for global context, and a two-layer head for the depth features.

struct ImageEncoderParams {
  Conv2d c1;  // 3 -> 16, stride 2
  Conv2d c2;  // 16 -> C_f, stride 2
  Conv2d c3;  // C_f -> C_f
  Linear proj;  // 2*C_f -> C_f (class-token fusion)
};

struct DepthFeatureParams {
  Conv2d c1;  // C_f -> C_f
  Conv2d c2;  // C_f -> C_f
};

inline ImageEncoderParams make_image_encoder(Rng& rng, std::size_t c_f) {
  return {make_conv2d(rng, 3, 16, 3, 2), make_conv2d(rng, 16, c_f, 3, 2),
          make_conv2d(rng, c_f, c_f, 3), make_linear(rng, 2 * c_f, c_f)};
}

inline DepthFeatureParams make_depth_features(Rng& rng, std::size_t c_f) {
  return {make_conv2d(rng, c_f, c_f, 3), make_conv2d(rng, c_f, c_f, 3)};
}

struct ImageEncoderIds {
  ConvIds c1, c2, c3, proj;
};

struct DepthFeatureIds {
  ConvIds c1, c2;
};

inline ImageEncoderIds insert_image_encoder(ad::Graph& g, const ImageEncoderParams& p) {
  return {insert_conv(g, p.c1), insert_conv(g, p.c2), insert_conv(g, p.c3),
          insert_linear(g, p.proj)};
}

inline DepthFeatureIds insert_depth_features(ad::Graph& g, const DepthFeatureParams& p) {
  return {insert_conv(g, p.c1), insert_conv(g, p.c2)};
}

// f_i for one view: conv features as patch tokens, the spatial mean as the
// class token, fused per Eq-style concat+projection, back to [C_f, H/4, W/4].
inline ad::ValueId encode_image(ad::Graph& g, ad::ValueId image, const ImageEncoderIds& enc) {
  const Tensor& img = g.value(image);
  if (img.dim(1) % 4 != 0 || img.dim(2) % 4 != 0)
    throw std::invalid_argument("encode_image: image size must be divisible by 4, got " +
                                img.shape_str());
  ad::ValueId h1 = g.relu(g.conv2d(image, enc.c1.w, enc.c1.b, 2));
  ad::ValueId h2 = g.relu(g.conv2d(h1, enc.c2.w, enc.c2.b, 2));
  ad::ValueId h3 = g.relu(g.conv2d(h2, enc.c3.w, enc.c3.b));
  const Tensor& t = g.value(h3);
  std::size_t C = t.dim(0), Hf = t.dim(1), Wf = t.dim(2), N = Hf * Wf;
  ad::ValueId tokens = g.transpose(g.reshape(h3, {C, N}));  // [N, C]
  ad::ValueId cls = g.mean_axis(tokens, 0);                 // [1, C]
  ad::ValueId fused = fuse_class_token(g, tokens, cls, enc.proj.w, enc.proj.b);
  return g.reshape(g.transpose(fused), {C, Hf, Wf});
}

inline ad::ValueId depth_features(ad::Graph& g, ad::ValueId f_i, const DepthFeatureIds& df) {
  return g.conv2d(g.relu(g.conv2d(f_i, df.c1.w, df.c1.b)), df.c2.w, df.c2.b);
}

}  // namespace gvs
