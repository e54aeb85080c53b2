#pragma once

// Gaussian voxelization with occupancy guidance and the adaptive
// cross-representation enhancement that fuses the lifted voxel volume with
// the voxelized Gaussian features.

#include <memory>
#include <vector>

#include "gvs/autodiff.hpp"
#include "gvs/lifting.hpp"
#include "gvs/params.hpp"

namespace gvs {

// Fixed voxel membership of a Gaussian set: CSR over voxels, members sorted
// by linear voxel index then original index.
struct VoxelBinning {
  std::array<std::size_t, 3> dims{};
  std::vector<std::uint32_t> offsets;   // per voxel into members
  std::vector<std::uint32_t> members;   // gaussian indices
  std::vector<std::int32_t> voxel_of;   // per gaussian: linear voxel or -1 (dropped)
  std::size_t dropped = 0;
  std::size_t binned = 0;

  std::size_t num_voxels() const { return dims[0] * dims[1] * dims[2]; }
};

inline VoxelBinning bin_gaussians(const std::vector<Vec3>& positions,
                                  const VoxelGridSpec& grid) {
  VoxelBinning bin;
  bin.dims = grid.dims;
  std::size_t n = positions.size();
  bin.voxel_of.assign(n, -1);
  const double inv = 1.0 / grid.voxel_size;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3& m = positions[i];
    double fx = std::floor((m.x - grid.origin.x) * inv);
    double fy = std::floor((m.y - grid.origin.y) * inv);
    double fz = std::floor((m.z - grid.origin.z) * inv);
    if (fx < 0 || fy < 0 || fz < 0 || fx >= static_cast<double>(grid.dims[0]) ||
        fy >= static_cast<double>(grid.dims[1]) || fz >= static_cast<double>(grid.dims[2])) {
      ++bin.dropped;
      continue;
    }
    std::size_t v = (static_cast<std::size_t>(fx) * grid.dims[1] +
                     static_cast<std::size_t>(fy)) * grid.dims[2] + static_cast<std::size_t>(fz);
    bin.voxel_of[i] = static_cast<std::int32_t>(v);
    ++bin.binned;
  }
  // counting sort by voxel keeps members ordered by (voxel, original index)
  std::size_t nv = bin.num_voxels();
  std::vector<std::uint32_t> counts(nv + 1, 0);
  for (std::size_t i = 0; i < n; ++i)
    if (bin.voxel_of[i] >= 0) ++counts[static_cast<std::size_t>(bin.voxel_of[i]) + 1];
  for (std::size_t v = 0; v < nv; ++v) counts[v + 1] += counts[v];
  bin.offsets = counts;
  bin.members.resize(bin.binned);
  std::vector<std::uint32_t> cursor(bin.offsets.begin(), bin.offsets.end() - 1);
  for (std::size_t i = 0; i < n; ++i)
    if (bin.voxel_of[i] >= 0) bin.members[cursor[bin.voxel_of[i]]++] = static_cast<std::uint32_t>(i);
  return bin;
}

inline Tensor occupancy_from_binning(const VoxelBinning& bin) {
  Tensor occ({bin.dims[0], bin.dims[1], bin.dims[2]});
  for (std::size_t v = 0; v < bin.num_voxels(); ++v)
    occ[v] = bin.offsets[v + 1] > bin.offsets[v] ? 1.0 : 0.0;
  return occ;
}

struct VoxelizeResult {
  Tensor volume;     // [C_g, N_x, N_y, N_z], mean latent per voxel
  Tensor occupancy;  // [N_x, N_y, N_z], strictly 0/1
  std::size_t dropped = 0;
};

namespace detail {

// volume[c, v] = mean over members of latents[m, c]; empty voxels stay zero.
inline Tensor scatter_mean_eval(const Tensor& latents, const VoxelBinning& bin) {
  std::size_t C = latents.dim(1);
  std::size_t nv = bin.num_voxels();
  Tensor vol({C, bin.dims[0], bin.dims[1], bin.dims[2]});
  parallel_for(nv, [&](std::size_t v) {
    std::uint32_t lo = bin.offsets[v], hi = bin.offsets[v + 1];
    if (lo == hi) return;
    double invn = 1.0 / static_cast<double>(hi - lo);
    for (std::uint32_t s = lo; s < hi; ++s) {
      const double* row = latents.data() + bin.members[s] * C;
      for (std::size_t c = 0; c < C; ++c) vol[c * nv + v] += row[c];
    }
    for (std::size_t c = 0; c < C; ++c) vol[c * nv + v] *= invn;
  });
  return vol;
}

}  // namespace detail

// Plain voxelization of a latent matrix [N, C_g] at the given positions.
inline VoxelizeResult voxelize(const std::vector<Vec3>& positions, const Tensor& latents,
                               const VoxelGridSpec& grid) {
  if (latents.rank() != 2 || latents.dim(0) != positions.size())
    throw std::invalid_argument("voxelize: latents " + latents.shape_str() +
                                " do not match " + std::to_string(positions.size()) +
                                " positions");
  VoxelBinning bin = bin_gaussians(positions, grid);
  VoxelizeResult r{detail::scatter_mean_eval(latents, bin), occupancy_from_binning(bin),
                   bin.dropped};
  return r;
}

// Differentiable scatter-mean over a frozen binning.
inline ad::ValueId scatter_mean_op(ad::Graph& g, ad::ValueId latents,
                                   std::shared_ptr<const VoxelBinning> bin) {
  Tensor value = detail::scatter_mean_eval(g.value(latents), *bin);
  return g.custom(std::move(value), {latents}, [latents, bin](ad::Graph& g, ad::ValueId self) {
    const Tensor& gy = *g.out_grad(self);
    Tensor* gl = g.grad_buffer(latents);
    if (!gl) return;
    std::size_t C = gl->dim(1);
    std::size_t nv = bin->num_voxels();
    std::size_t n = gl->dim(0);
    parallel_for(n, [&](std::size_t i) {
      std::int32_t v = bin->voxel_of[i];
      if (v < 0) return;
      double invn = 1.0 / static_cast<double>(bin->offsets[v + 1] - bin->offsets[v]);
      double* row = gl->data() + i * C;
      for (std::size_t c = 0; c < C; ++c) row[c] += gy[c * nv + static_cast<std::size_t>(v)] * invn;
    });
  });
}

// ---------------------------------------------------------------------------
// Learned blocks of the enhancement path.

struct GaussianEncoderParams {
  Conv3d c1;  // C_g -> C_f
  Conv3d c2;  // C_f -> C_f
};

inline GaussianEncoderParams make_gaussian_encoder(Rng& rng, std::size_t c_g, std::size_t c_f) {
  return {make_conv3d(rng, c_g, c_f, 3), make_conv3d(rng, c_f, c_f, 3)};
}

inline ad::ValueId encode_gaussian_volume(ad::Graph& g, ad::ValueId v_g, ConvIds c1,
                                          ConvIds c2) {
  return g.conv3d(g.relu(g.conv3d(v_g, c1.w, c1.b)), c2.w, c2.b);
}

// Occupancy modulation: per-voxel broadcast multiply across channels.
inline ad::ValueId apply_occupancy(ad::Graph& g, ad::ValueId encoded, ad::ValueId occupancy) {
  return g.broadcast_mul(encoded, occupancy);
}

inline Tensor apply_occupancy(const Tensor& encoded, const Tensor& occupancy) {
  ad::Graph g;
  return g.value(g.broadcast_mul(g.constant(encoded), g.constant(occupancy)));
}

struct WeightNetParams {
  Conv3d c;  // 2*C_f -> 2, 1x1x1
};

inline WeightNetParams make_weight_net(Rng& rng, std::size_t c_f) {
  return {make_conv3d(rng, 2 * c_f, 2, 1)};
}

struct AdaptiveWeights {
  ad::ValueId alpha_v;  // [1, N_x, N_y, N_z]
  ad::ValueId alpha_g;
};

// Softmax over two learned logit channels per voxel.
inline AdaptiveWeights adaptive_weights(ad::Graph& g, ad::ValueId v, ad::ValueId v_g_masked,
                                        ConvIds wnet) {
  ad::ValueId cat = g.concat({v, v_g_masked}, 0);
  ad::ValueId logits = g.conv3d(cat, wnet.w, wnet.b);
  ad::ValueId w = g.softmax(logits, 0);
  const auto& s = g.value(w).shape();
  std::vector<std::size_t> ext = {1, s[1], s[2], s[3]};
  return {g.slice(w, {0, 0, 0, 0}, ext), g.slice(w, {1, 0, 0, 0}, ext)};
}

struct FusionNetParams {
  Conv3d c1;  // 2*C_f -> C_f
  Conv3d c2;  // C_f -> C_f
};

// Identity warm start: at initialization the fusion net reproduces V
// exactly (center tap of 2 undoes the 0.5 weight on the voxel half; the
// Gaussian half starts at zero), so the enhanced pipeline begins where the
// plain voxel detector does and learns the Gaussian contribution on top.
inline FusionNetParams make_fusion_net(Rng& rng, std::size_t c_f) {
  (void)rng;
  FusionNetParams p;
  p.c1 = {Tensor({c_f, 2 * c_f, 3, 3, 3}), Tensor({c_f}), 1};
  p.c2 = {Tensor({c_f, c_f, 3, 3, 3}), Tensor({c_f}), 1};
  for (std::size_t c = 0; c < c_f; ++c) {
    p.c1.w[((c * 2 * c_f + c) * 27) + 13] = 2.0;  // center tap of kernel 3x3x3
    p.c2.w[((c * c_f + c) * 27) + 13] = 1.0;
  }
  return p;
}

// V_e = F([alpha_v * V, alpha_g * V_g_masked])
inline ad::ValueId cross_enhance(ad::Graph& g, ad::ValueId v, ad::ValueId v_g_masked,
                                 ad::ValueId alpha_v, ad::ValueId alpha_g, ConvIds f1,
                                 ConvIds f2) {
  ad::ValueId wv = g.broadcast_mul(v, alpha_v);
  ad::ValueId wg = g.broadcast_mul(v_g_masked, alpha_g);
  ad::ValueId cat = g.concat({wv, wg}, 0);
  return g.conv3d(g.relu(g.conv3d(cat, f1.w, f1.b)), f2.w, f2.b);
}

}  // namespace gvs
