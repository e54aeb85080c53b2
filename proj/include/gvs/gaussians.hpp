#pragma once

// Pixel-aligned Gaussian generation and multi-view fusion. One primitive per
// feature-grid pixel; a 66-channel regressor supplies opacity, a fusion
// weight and a 64-d latent; the latent decodes into degree-1 spherical
// harmonics, a rotation and per-axis scales. Successive views are merged
// into a global set by a depth-gated GRU update.

#include <array>
#include <optional>
#include <vector>

#include "gvs/autodiff.hpp"
#include "gvs/geometry.hpp"
#include "gvs/params.hpp"

namespace gvs {

inline constexpr std::size_t kLatentDim = 64;
inline constexpr std::size_t kShDim = 12;      // 4 coefficients x 3 channels
inline constexpr std::size_t kDecodedDim = 19; // 12 SH + 4 quaternion + 3 scale
inline constexpr double kMinScale = 0.01;      // meters

struct GaussianPrimitive {
  Vec3 position;
  double opacity = 0.5;
  double fusion_weight = 0.5;
  std::array<double, kLatentDim> latent{};
  std::array<double, kShDim> sh{};              // [channel*4 + coeff]
  std::array<double, 4> rotation{1, 0, 0, 0};   // unit quaternion (w,x,y,z)
  std::array<double, 3> scale{0.1, 0.1, 0.1};
};

struct GaussianSet {
  std::vector<GaussianPrimitive> primitives;
  std::vector<int> source_view;

  std::size_t size() const { return primitives.size(); }
};

// Graph-resident batch: geometry is frozen, appearance lives on the tape.
struct GaussianBatch {
  std::vector<Vec3> positions;
  std::vector<int> source_view;
  ad::ValueId alpha = -1;   // [N], sigmoid-activated
  ad::ValueId weight = -1;  // [N], sigmoid-activated
  ad::ValueId latent = -1;  // [N, 64]

  std::size_t size() const { return positions.size(); }
};

// ---------------------------------------------------------------------------
// Depth estimation head: two convolutions, sigmoid squashed into [d_min, d_max].

struct DepthHeadParams {
  Conv2d c1;
  Conv2d c2;  // -> 1 channel
};

inline DepthHeadParams make_depth_head(Rng& rng, std::size_t c_in) {
  std::size_t mid = std::max<std::size_t>(c_in / 2, 4);
  return {make_conv2d(rng, c_in, mid, 3), make_conv2d(rng, mid, 1, 3)};
}

inline ad::ValueId predict_depth(ad::Graph& g, ad::ValueId depth_features, ConvIds c1,
                                 ConvIds c2, double d_min, double d_max) {
  ad::ValueId h = g.relu(g.conv2d(depth_features, c1.w, c1.b));
  ad::ValueId logits = g.conv2d(h, c2.w, c2.b);
  return g.scale_add(g.sigmoid(logits), d_max - d_min, d_min);  // [1,H,W]
}

// ---------------------------------------------------------------------------
// Gaussian regressor: 66 channels per pixel = 1 opacity + 1 fusion weight
// + 64 latent. Positions come from unprojecting pixel centers at the
// predicted depth; primitives are ordered row-major (index = v*W + u).

struct RegressorParams {
  Conv2d c1;
  Conv2d c2;  // -> 66 channels
};

inline RegressorParams make_regressor(Rng& rng, std::size_t c_in) {
  return {make_conv2d(rng, c_in, c_in, 3), make_conv2d(rng, c_in, 2 + kLatentDim, 3)};
}

inline GaussianBatch regress_gaussians(ad::Graph& g, ad::ValueId depth_features,
                                       ad::ValueId depth_map, const Camera& camera,
                                       ConvIds c1, ConvIds c2, int view_index) {
  const Tensor& f = g.value(depth_features);
  std::size_t H = f.dim(1), W = f.dim(2), N = H * W;
  ad::ValueId h = g.relu(g.conv2d(depth_features, c1.w, c1.b));
  ad::ValueId raw = g.conv2d(h, c2.w, c2.b);  // [66, H, W]

  GaussianBatch batch;
  batch.alpha = g.sigmoid(g.reshape(g.slice(raw, {0, 0, 0}, {1, H, W}), {N}));
  batch.weight = g.sigmoid(g.reshape(g.slice(raw, {1, 0, 0}, {1, H, W}), {N}));
  ad::ValueId lat = g.reshape(g.slice(raw, {2, 0, 0}, {kLatentDim, H, W}), {kLatentDim, N});
  batch.latent = g.transpose(lat);  // [N, 64]

  const Tensor& depth = g.value(depth_map);
  batch.positions.resize(N);
  for (std::size_t v = 0; v < H; ++v)
    for (std::size_t u = 0; u < W; ++u)
      batch.positions[v * W + u] = camera.unproject_pixel(
          static_cast<double>(u) + 0.5, static_cast<double>(v) + 0.5, depth[v * W + u]);
  batch.source_view.assign(N, view_index);
  return batch;
}

// ---------------------------------------------------------------------------
// Latent decoding: one linear map 64 -> 19. SH coefficients stay on the
// tape (the render loss trains them); rotation and scale parameterize the
// frozen splat footprints only.

struct DecoderParams {
  Linear proj;  // 64 -> 19
};

inline DecoderParams make_decoder(Rng& rng) {
  DecoderParams p{make_linear(rng, kLatentDim, kDecodedDim)};
  // start with compact splats: softplus(-2) ~ 0.13 m
  for (int a = 0; a < 3; ++a) p.proj.b[16 + a] = -2.0;
  return p;
}

struct DecodedLatents {
  ad::ValueId sh = -1;  // [N, 12]
  std::vector<std::array<double, 4>> rotations;
  std::vector<std::array<double, 3>> scales;
  std::size_t quaternion_fallbacks = 0;  // raw norm < 1e-12, replaced by identity
};

inline DecodedLatents decode_latents(ad::Graph& g, ad::ValueId latent, ConvIds proj) {
  ad::ValueId dec = linear(g, latent, proj.w, proj.b);  // [N, 19]
  const Tensor& d = g.value(dec);
  std::size_t n = d.dim(0);
  DecodedLatents out;
  out.sh = g.slice(dec, {0, 0}, {n, kShDim});
  out.rotations.resize(n);
  out.scales.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = d.data() + i * kDecodedDim;
    double qw = row[12], qx = row[13], qy = row[14], qz = row[15];
    double norm = std::sqrt(qw * qw + qx * qx + qy * qy + qz * qz);
    if (norm < 1e-12) {
      out.rotations[i] = {1, 0, 0, 0};
      ++out.quaternion_fallbacks;
    } else {
      out.rotations[i] = {qw / norm, qx / norm, qy / norm, qz / norm};
    }
    for (int a = 0; a < 3; ++a)
      out.scales[i][a] = kMinScale + ad::detail::stable_softplus(row[16 + a]);
  }
  return out;
}

// Single-primitive convenience used by callers outside a training step.
struct DecodedLatent {
  std::array<double, kShDim> sh{};
  std::array<double, 4> rotation{1, 0, 0, 0};
  std::array<double, 3> scale{};
  bool quaternion_fallback = false;
};

inline DecodedLatent decode_latent(const std::array<double, kLatentDim>& h,
                                   const DecoderParams& params) {
  DecodedLatent out;
  double dec[kDecodedDim];
  for (std::size_t j = 0; j < kDecodedDim; ++j) {
    double acc = params.proj.b[j];
    for (std::size_t k = 0; k < kLatentDim; ++k) acc += h[k] * params.proj.w[k * kDecodedDim + j];
    dec[j] = acc;
  }
  for (std::size_t j = 0; j < kShDim; ++j) out.sh[j] = dec[j];
  double qw = dec[12], qx = dec[13], qy = dec[14], qz = dec[15];
  double norm = std::sqrt(qw * qw + qx * qx + qy * qy + qz * qz);
  if (norm < 1e-12) {
    out.rotation = {1, 0, 0, 0};
    out.quaternion_fallback = true;
  } else {
    out.rotation = {qw / norm, qx / norm, qy / norm, qz / norm};
  }
  for (int a = 0; a < 3; ++a) out.scale[a] = kMinScale + ad::detail::stable_softplus(dec[16 + a]);
  return out;
}

// ---------------------------------------------------------------------------
// Multi-view fusion. Global primitives are projected into the incoming view;
// a global that lands in the feature-grid cell of an incoming primitive with
// |d_g - d_in| < tau_rel * d_in is matched to it. Every incoming primitive
// is matched at most once (smallest depth difference wins, then lowest
// global index); unmatched incoming primitives are appended.

struct GruParams {
  Linear z;  // [128 -> 64]
  Linear r;
  Linear h;
};

inline GruParams make_gru(Rng& rng) {
  return {make_linear(rng, 2 * kLatentDim, kLatentDim),
          make_linear(rng, 2 * kLatentDim, kLatentDim),
          make_linear(rng, 2 * kLatentDim, kLatentDim)};
}

struct GruIds {
  ConvIds z, r, h;
};

inline GruIds insert_gru(ad::Graph& g, const GruParams& p) {
  return {insert_linear(g, p.z), insert_linear(g, p.r), insert_linear(g, p.h)};
}

struct MatchResult {
  std::vector<std::size_t> global_idx;    // matched pairs, ascending global index
  std::vector<std::size_t> incoming_idx;
  std::vector<std::size_t> unmatched_incoming;  // ascending
};

inline MatchResult match_gaussians(const std::vector<Vec3>& global_pos,
                                   const std::vector<Vec3>& incoming_pos,
                                   const Camera& camera, std::size_t feat_w,
                                   std::size_t feat_h, double tau_rel) {
  if (tau_rel <= 0.0) throw std::invalid_argument("fuse_multiview: tau_rel must be positive");
  std::size_t n_in = incoming_pos.size();
  // best candidate per incoming cell: (depth difference, global index)
  std::vector<double> best_diff(n_in, 0.0);
  std::vector<std::int64_t> best_global(n_in, -1);
  for (std::size_t i = 0; i < global_pos.size(); ++i) {
    auto px = camera.project_point(global_pos[i]);
    if (!px || !camera.in_bounds(px->u, px->v)) continue;
    std::size_t cu = static_cast<std::size_t>(std::floor(px->u));
    std::size_t cv = static_cast<std::size_t>(std::floor(px->v));
    if (cu >= feat_w || cv >= feat_h) continue;
    std::size_t j = cv * feat_w + cu;
    if (j >= n_in) continue;
    double d_in = camera.world_to_camera(incoming_pos[j]).z;
    if (d_in <= 0.0) continue;
    double diff = std::abs(px->depth - d_in);
    if (diff >= tau_rel * d_in) continue;
    if (best_global[j] < 0 || diff < best_diff[j] ||
        (diff == best_diff[j] && static_cast<std::int64_t>(i) < best_global[j])) {
      best_diff[j] = diff;
      best_global[j] = static_cast<std::int64_t>(i);
    }
  }
  MatchResult m;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t j = 0; j < n_in; ++j) {
    if (best_global[j] >= 0)
      pairs.emplace_back(static_cast<std::size_t>(best_global[j]), j);
    else
      m.unmatched_incoming.push_back(j);
  }
  std::sort(pairs.begin(), pairs.end());
  for (auto& [gi, ij] : pairs) {
    m.global_idx.push_back(gi);
    m.incoming_idx.push_back(ij);
  }
  return m;
}

// GRU update on matched rows: h' = (1 - z*w_new) . h_old + (z*w_new) . h~
// with z = sig(Uz [h_old; h_new]), r = sig(Ur [h_old; h_new]),
// h~ = tanh(Uh [r.h_old; h_new]). w_new = 0 leaves the latent unchanged.
inline ad::ValueId gru_update(ad::Graph& g, ad::ValueId h_old, ad::ValueId h_new,
                              ad::ValueId w_new, const GruIds& gru) {
  ad::ValueId cat = g.concat({h_old, h_new}, 1);
  ad::ValueId z = g.sigmoid(linear(g, cat, gru.z.w, gru.z.b));
  ad::ValueId r = g.sigmoid(linear(g, cat, gru.r.w, gru.r.b));
  ad::ValueId rh = g.mul(r, h_old);
  ad::ValueId h_tilde = g.tanh_(linear(g, g.concat({rh, h_new}, 1), gru.h.w, gru.h.b));
  ad::ValueId zw = g.mul_rows(z, w_new);
  ad::ValueId keep = g.scale_add(zw, -1.0, 1.0);
  return g.add(g.mul(keep, h_old), g.mul(zw, h_tilde));
}

inline GaussianBatch fuse_multiview(ad::Graph& g, const GaussianBatch& global,
                                    const GaussianBatch& incoming, const Camera& cam_incoming,
                                    std::size_t feat_w, std::size_t feat_h, double tau_rel,
                                    const GruIds& gru) {
  if (incoming.size() == 0) return global;
  if (global.size() == 0) return incoming;
  MatchResult m = match_gaussians(global.positions, incoming.positions, cam_incoming, feat_w,
                                  feat_h, tau_rel);
  GaussianBatch out;
  ad::ValueId lat = global.latent, alpha = global.alpha, weight = global.weight;
  std::vector<Vec3> positions = global.positions;
  std::vector<int> source_view = global.source_view;

  if (!m.global_idx.empty()) {
    ad::ValueId h_old = g.gather_rows(global.latent, m.global_idx);
    ad::ValueId h_new = g.gather_rows(incoming.latent, m.incoming_idx);
    ad::ValueId w_new = g.gather_rows(incoming.weight, m.incoming_idx);
    ad::ValueId h_fused = gru_update(g, h_old, h_new, w_new, gru);
    lat = g.scatter_rows(lat, m.global_idx, h_fused);

    // opacity and fusion weight: w-weighted average of the pair
    ad::ValueId w_old = g.gather_rows(global.weight, m.global_idx);
    ad::ValueId a_old = g.gather_rows(global.alpha, m.global_idx);
    ad::ValueId a_new = g.gather_rows(incoming.alpha, m.incoming_idx);
    ad::ValueId denom = g.scale_add(g.add(w_old, w_new), 1.0, 1e-12);
    ad::ValueId a_avg = g.div(g.add(g.mul(w_old, a_old), g.mul(w_new, a_new)), denom);
    ad::ValueId w_avg = g.div(g.add(g.mul(w_old, w_old), g.mul(w_new, w_new)), denom);
    alpha = g.scatter_rows(alpha, m.global_idx, a_avg);
    weight = g.scatter_rows(weight, m.global_idx, w_avg);

    const Tensor& wo = g.value(w_old);
    const Tensor& wn = g.value(w_new);
    for (std::size_t k = 0; k < m.global_idx.size(); ++k) {
      double a = wo[k], b = wn[k], d = a + b + 1e-12;
      const Vec3& pg = global.positions[m.global_idx[k]];
      const Vec3& pn = incoming.positions[m.incoming_idx[k]];
      positions[m.global_idx[k]] = {(a * pg.x + b * pn.x) / d, (a * pg.y + b * pn.y) / d,
                                    (a * pg.z + b * pn.z) / d};
    }
  }

  if (!m.unmatched_incoming.empty()) {
    out.latent = g.concat({lat, g.gather_rows(incoming.latent, m.unmatched_incoming)}, 0);
    out.alpha = g.concat({alpha, g.gather_rows(incoming.alpha, m.unmatched_incoming)}, 0);
    out.weight = g.concat({weight, g.gather_rows(incoming.weight, m.unmatched_incoming)}, 0);
    for (std::size_t j : m.unmatched_incoming) {
      positions.push_back(incoming.positions[j]);
      source_view.push_back(incoming.source_view[j]);
    }
  } else {
    out.latent = lat;
    out.alpha = alpha;
    out.weight = weight;
  }
  out.positions = std::move(positions);
  out.source_view = std::move(source_view);
  return out;
}

// Plain-set surface: runs the batched fusion on a throwaway graph.
inline GaussianSet fuse_multiview(const GaussianSet& global, const GaussianSet& incoming,
                                  const Camera& cam_incoming, std::size_t feat_w,
                                  std::size_t feat_h, double tau_rel, const GruParams& params,
                                  const DecoderParams& decoder) {
  ad::Graph g;
  auto to_batch = [&](const GaussianSet& s) {
    GaussianBatch b;
    std::size_t n = s.size();
    Tensor lat({std::max<std::size_t>(n, 1), kLatentDim});
    Tensor a({std::max<std::size_t>(n, 1)});
    Tensor w({std::max<std::size_t>(n, 1)});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < kLatentDim; ++c) lat[i * kLatentDim + c] = s.primitives[i].latent[c];
      a[i] = s.primitives[i].opacity;
      w[i] = s.primitives[i].fusion_weight;
      b.positions.push_back(s.primitives[i].position);
      b.source_view.push_back(s.source_view.empty() ? 0 : s.source_view[i]);
    }
    b.latent = g.constant(lat);
    b.alpha = g.constant(a);
    b.weight = g.constant(w);
    return b;
  };
  if (incoming.size() == 0) return global;
  GaussianBatch gb = to_batch(global), ib = to_batch(incoming);
  GruIds gids = insert_gru(g, params);
  GaussianBatch fused = fuse_multiview(g, gb, ib, cam_incoming, feat_w, feat_h, tau_rel, gids);
  GaussianSet out;
  const Tensor& lat = g.value(fused.latent);
  const Tensor& a = g.value(fused.alpha);
  const Tensor& w = g.value(fused.weight);
  for (std::size_t i = 0; i < fused.size(); ++i) {
    GaussianPrimitive p;
    p.position = fused.positions[i];
    p.opacity = a[i];
    p.fusion_weight = w[i];
    for (std::size_t c = 0; c < kLatentDim; ++c) p.latent[c] = lat[i * kLatentDim + c];
    DecodedLatent dec = decode_latent(p.latent, decoder);
    p.sh = dec.sh;
    p.rotation = dec.rotation;
    p.scale = dec.scale;
    out.primitives.push_back(p);
    out.source_view.push_back(fused.source_view[i]);
  }
  return out;
}

}  // namespace gvs
