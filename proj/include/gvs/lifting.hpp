#pragma once

// 2D-to-3D feature lifting: class-token fusion, bilinear sampling, and
// masked multi-view averaging of per-view feature maps into a voxel volume.
//
// Feature maps are tensors shaped [C, H_feat, W_feat]; volumes are
// [C, N_x, N_y, N_z] over a VoxelGridSpec. A texel's center sits at integer
// coordinates, so sampling at (ix, iy) returns the texel exactly.

#include <array>
#include <vector>

#include "gvs/autodiff.hpp"
#include "gvs/geometry.hpp"
#include "gvs/parallel.hpp"
#include "gvs/tensor.hpp"

namespace gvs {

struct VoxelGridSpec {
  Vec3 origin;
  double voxel_size = 0.16;
  std::array<std::size_t, 3> dims{1, 1, 1};

  std::size_t num_voxels() const { return dims[0] * dims[1] * dims[2]; }

  // Centers at o + (idx + 0.5) * s_v, so floor-binning maps a point at a
  // voxel center back to the same index.
  Vec3 voxel_center(std::size_t ix, std::size_t iy, std::size_t iz) const {
    return {origin.x + (static_cast<double>(ix) + 0.5) * voxel_size,
            origin.y + (static_cast<double>(iy) + 0.5) * voxel_size,
            origin.z + (static_cast<double>(iz) + 0.5) * voxel_size};
  }

  Vec3 voxel_center(std::size_t linear) const {
    std::size_t iz = linear % dims[2];
    std::size_t iy = (linear / dims[2]) % dims[1];
    std::size_t ix = linear / (dims[1] * dims[2]);
    return voxel_center(ix, iy, iz);
  }

  bool operator==(const VoxelGridSpec& o) const {
    return origin.x == o.origin.x && origin.y == o.origin.y && origin.z == o.origin.z &&
           voxel_size == o.voxel_size && dims == o.dims;
  }
};

// Grid centered above `center` in x/y with its floor at z = z0.
inline VoxelGridSpec make_grid(const Vec3& center, double z0, double voxel_size,
                               std::array<std::size_t, 3> dims) {
  VoxelGridSpec g;
  g.voxel_size = voxel_size;
  g.dims = dims;
  g.origin = {center.x - 0.5 * voxel_size * static_cast<double>(dims[0]),
              center.y - 0.5 * voxel_size * static_cast<double>(dims[1]), z0};
  return g;
}

// ---------------------------------------------------------------------------
// Bilinear sampling with the 4-tap neighborhood clamped at the last
// row/column, so the whole half-open validity domain is addressable.

struct BilinearTaps {
  std::size_t i00, i10, i01, i11;  // linear offsets into an [H,W] plane
  double w00, w10, w01, w11;
};

inline BilinearTaps bilinear_taps(double u, double v, std::size_t W, std::size_t H) {
  double fu = std::floor(u), fv = std::floor(v);
  std::size_t x0 = static_cast<std::size_t>(fu), y0 = static_cast<std::size_t>(fv);
  std::size_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
  double ax = u - fu, ay = v - fv;
  BilinearTaps t;
  t.i00 = y0 * W + x0;
  t.i10 = y0 * W + x1;
  t.i01 = y1 * W + x0;
  t.i11 = y1 * W + x1;
  t.w00 = (1.0 - ax) * (1.0 - ay);
  t.w10 = ax * (1.0 - ay);
  t.w01 = (1.0 - ax) * ay;
  t.w11 = ax * ay;
  return t;
}

// map: [C, H, W]; (u, v) must satisfy in_bounds for the map's extent.
inline std::vector<double> bilinear_sample(const Tensor& map, double u, double v) {
  if (map.rank() != 3)
    throw std::invalid_argument("bilinear_sample: expected [C,H,W], got " + map.shape_str());
  std::size_t C = map.dim(0), H = map.dim(1), W = map.dim(2);
  if (u < 0.0 || u >= static_cast<double>(W) || v < 0.0 || v >= static_cast<double>(H))
    throw std::invalid_argument("bilinear_sample: coordinates out of bounds");
  BilinearTaps t = bilinear_taps(u, v, W, H);
  std::vector<double> out(C);
  const std::size_t plane = H * W;
  for (std::size_t c = 0; c < C; ++c) {
    const double* p = map.data() + c * plane;
    out[c] = t.w00 * p[t.i00] + t.w10 * p[t.i10] + t.w01 * p[t.i01] + t.w11 * p[t.i11];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Lift table: the projection geometry of a (grid, cameras) pair is fixed, so
// the taps are resolved once and both the plain and the differentiable lift
// evaluate the same table.

struct LiftSample {
  std::uint32_t view;
  BilinearTaps taps;
};

struct LiftTable {
  std::array<std::size_t, 3> dims{};
  std::size_t n_views = 0;
  std::vector<std::uint32_t> offsets;  // per voxel, into samples (size num_voxels+1)
  std::vector<LiftSample> samples;     // valid view samples, ordered by view index
};

inline LiftTable build_lift_table(const std::vector<Camera>& cameras,
                                  const VoxelGridSpec& grid) {
  if (cameras.empty()) throw std::invalid_argument("lift: empty view list");
  LiftTable table;
  table.dims = grid.dims;
  table.n_views = cameras.size();
  std::size_t n = grid.num_voxels();
  table.offsets.resize(n + 1, 0);
  table.samples.reserve(n);
  for (std::size_t v = 0; v < n; ++v) {
    Vec3 p = grid.voxel_center(v);
    for (std::size_t i = 0; i < cameras.size(); ++i) {
      auto px = cameras[i].project_point(p);
      if (!px || !cameras[i].in_bounds(px->u, px->v)) continue;
      LiftSample s;
      s.view = static_cast<std::uint32_t>(i);
      s.taps = bilinear_taps(px->u, px->v,
                             static_cast<std::size_t>(cameras[i].feature_width()),
                             static_cast<std::size_t>(cameras[i].feature_height()));
      table.samples.push_back(s);
    }
    table.offsets[v + 1] = static_cast<std::uint32_t>(table.samples.size());
  }
  return table;
}

namespace detail {

// V[c, voxel] = mean over valid views of the bilinear sample; zero when no
// view sees the voxel. One worker owns each voxel.
inline Tensor lift_eval(const std::vector<const Tensor*>& maps, const LiftTable& table) {
  std::size_t C = maps[0]->dim(0);
  std::size_t n = table.dims[0] * table.dims[1] * table.dims[2];
  Tensor out({C, table.dims[0], table.dims[1], table.dims[2]});
  parallel_for(n, [&](std::size_t v) {
    std::uint32_t lo = table.offsets[v], hi = table.offsets[v + 1];
    if (lo == hi) return;
    double inv = 1.0 / static_cast<double>(hi - lo);
    for (std::uint32_t s = lo; s < hi; ++s) {
      const LiftSample& smp = table.samples[s];
      const Tensor& m = *maps[smp.view];
      const std::size_t plane = m.dim(1) * m.dim(2);
      const BilinearTaps& t = smp.taps;
      for (std::size_t c = 0; c < C; ++c) {
        const double* p = m.data() + c * plane;
        out[c * n + v] += inv * (t.w00 * p[t.i00] + t.w10 * p[t.i10] +
                                 t.w01 * p[t.i01] + t.w11 * p[t.i11]);
      }
    }
  });
  return out;
}

}  // namespace detail

inline bool same_camera(const Camera& a, const Camera& b) {
  return a.intrinsics() == b.intrinsics() && a.extrinsics() == b.extrinsics() &&
         a.scale_x() == b.scale_x() && a.scale_y() == b.scale_y() && a.width() == b.width() &&
         a.height() == b.height();
}

namespace detail {

// A duplicated observation (same camera, bit-identical features) counts
// once in the masked average, so redundant views do not bias Eq.-style
// weighting.
inline std::vector<std::size_t> unique_views(const std::vector<Camera>& cameras,
                                             const std::vector<const Tensor*>& maps) {
  std::vector<std::size_t> keep;
  for (std::size_t j = 0; j < cameras.size(); ++j) {
    bool dup = false;
    for (std::size_t i : keep) {
      if (!same_camera(cameras[i], cameras[j])) continue;
      if (!maps[i]->same_shape(*maps[j])) continue;
      if (std::memcmp(maps[i]->data(), maps[j]->data(), maps[i]->numel() * 8) == 0) {
        dup = true;
        break;
      }
    }
    if (!dup) keep.push_back(j);
  }
  return keep;
}

}  // namespace detail

// Plain (non-differentiable) lift of per-view feature maps into the grid.
inline Tensor lift_features(const std::vector<Tensor>& maps, const std::vector<Camera>& cameras,
                            const VoxelGridSpec& grid) {
  if (maps.empty()) throw std::invalid_argument("lift_features: empty view list");
  if (maps.size() != cameras.size())
    throw std::invalid_argument("lift_features: views and cameras differ in length");
  std::size_t C = maps[0].dim(0);
  for (const Tensor& m : maps)
    if (m.rank() != 3 || m.dim(0) != C)
      throw std::invalid_argument("lift_features: inconsistent map shapes");
  std::vector<const Tensor*> ptrs;
  ptrs.reserve(maps.size());
  for (const Tensor& m : maps) ptrs.push_back(&m);
  std::vector<std::size_t> keep = detail::unique_views(cameras, ptrs);
  std::vector<Camera> ucams;
  std::vector<const Tensor*> umaps;
  for (std::size_t i : keep) {
    ucams.push_back(cameras[i]);
    umaps.push_back(ptrs[i]);
  }
  LiftTable table = build_lift_table(ucams, grid);
  return detail::lift_eval(umaps, table);
}

// Differentiable lift over graph-resident feature maps (one id per view).
inline ad::ValueId lift_op(ad::Graph& g, const std::vector<ad::ValueId>& maps_in,
                           const std::vector<Camera>& cameras, const VoxelGridSpec& grid) {
  if (maps_in.empty()) throw std::invalid_argument("lift_op: empty view list");
  if (maps_in.size() != cameras.size())
    throw std::invalid_argument("lift_op: views and cameras differ in length");
  std::vector<const Tensor*> all;
  all.reserve(maps_in.size());
  for (ad::ValueId m : maps_in) all.push_back(&g.value(m));
  std::vector<std::size_t> keep = detail::unique_views(cameras, all);
  std::vector<Camera> ucams;
  std::vector<ad::ValueId> maps;
  for (std::size_t i : keep) {
    ucams.push_back(cameras[i]);
    maps.push_back(maps_in[i]);
  }
  auto table = std::make_shared<const LiftTable>(build_lift_table(ucams, grid));
  std::vector<const Tensor*> ptrs;
  ptrs.reserve(maps.size());
  for (ad::ValueId m : maps) ptrs.push_back(&g.value(m));
  Tensor value = detail::lift_eval(ptrs, *table);
  return g.custom(std::move(value), maps, [maps, table](ad::Graph& g, ad::ValueId self) {
    const Tensor& gy = *g.out_grad(self);
    std::size_t C = g.value(maps[0]).dim(0);
    std::size_t n = table->dims[0] * table->dims[1] * table->dims[2];
    std::vector<Tensor*> grads(maps.size());
    for (std::size_t i = 0; i < maps.size(); ++i) grads[i] = g.grad_buffer(maps[i]);
    // One worker per view: a view's gradient plane is touched by exactly one
    // thread, voxels visited in fixed order.
    parallel_for(maps.size(), [&](std::size_t view) {
      Tensor* gm = grads[view];
      if (!gm) return;
      const std::size_t plane = gm->dim(1) * gm->dim(2);
      for (std::size_t v = 0; v < n; ++v) {
        std::uint32_t lo = table->offsets[v], hi = table->offsets[v + 1];
        if (lo == hi) continue;
        double inv = 1.0 / static_cast<double>(hi - lo);
        for (std::uint32_t s = lo; s < hi; ++s) {
          const LiftSample& smp = table->samples[s];
          if (smp.view != view) continue;
          const BilinearTaps& t = smp.taps;
          for (std::size_t c = 0; c < C; ++c) {
            double gv = gy[c * n + v] * inv;
            double* p = gm->data() + c * plane;
            p[t.i00] += gv * t.w00;
            p[t.i10] += gv * t.w10;
            p[t.i01] += gv * t.w01;
            p[t.i11] += gv * t.w11;
          }
        }
      }
    });
  });
}

// ---------------------------------------------------------------------------
// Class-token fusion: concatenate the class token (repeated per patch) with
// the patch tokens, then a learned linear projection and ReLU.

struct ClassTokenProj {
  Tensor weight;  // [2D, D']
  Tensor bias;    // [D']
};

inline ad::ValueId fuse_class_token(ad::Graph& g, ad::ValueId patch_tokens,
                                    ad::ValueId class_token, ad::ValueId proj_weight,
                                    ad::ValueId proj_bias) {
  const Tensor& tokens = g.value(patch_tokens);
  const Tensor& cls = g.value(class_token);
  if (tokens.rank() != 2 || cls.rank() != 2 || cls.dim(0) != 1 || cls.dim(1) != tokens.dim(1))
    throw std::invalid_argument("fuse_class_token: tokens " + tokens.shape_str() +
                                " vs class token " + cls.shape_str());
  std::size_t n = tokens.dim(0);
  ad::ValueId repeated = g.repeat_rows(class_token, n);
  ad::ValueId cat = g.concat({repeated, patch_tokens}, 1);
  ad::ValueId projected = g.add_bias_rows(g.matmul(cat, proj_weight), proj_bias);
  return g.relu(projected);
}

}  // namespace gvs
