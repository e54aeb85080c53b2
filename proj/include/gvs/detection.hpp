#pragma once

// Anchor-free 3D detection: FPN-lite neck, three-branch head over voxel
// features, target assignment, the loss suite (centerness BCE, sigmoid focal
// classification, rotated-IoU regression) and mAP evaluation.
//
// Boxes are yaw-rotated around z. BEV intersection uses Sutherland-Hodgman
// clipping of the two rotated rectangles; the volume IoU multiplies the BEV
// polygon area by the z-extent overlap.

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "gvs/autodiff.hpp"
#include "gvs/lifting.hpp"
#include "gvs/params.hpp"

namespace gvs {

inline double wrap_angle(double a) {
  // normalize to (-pi, pi]
  a = std::fmod(a, 2.0 * M_PI);
  if (a <= -M_PI) a += 2.0 * M_PI;
  if (a > M_PI) a -= 2.0 * M_PI;
  return a;
}

struct Box3D {
  Vec3 center;
  double l = 1.0, w = 1.0, h = 1.0;  // extents along the box's yaw-rotated axes
  double yaw = 0.0;                  // radians in (-pi, pi]
  int class_id = 0;
  double score = 1.0;

  double volume() const { return l * w * h; }
};

// ---------------------------------------------------------------------------
// Rotated 3D IoU via BEV polygon clipping.

namespace detail {

struct P2 {
  double x, y;
};

inline std::array<P2, 4> bev_corners(const Box3D& b) {
  double c = std::cos(b.yaw), s = std::sin(b.yaw);
  double hx = 0.5 * b.l, hy = 0.5 * b.w;
  // counter-clockwise
  std::array<P2, 4> local = {P2{hx, hy}, P2{-hx, hy}, P2{-hx, -hy}, P2{hx, -hy}};
  std::array<P2, 4> out;
  for (int i = 0; i < 4; ++i)
    out[i] = {b.center.x + c * local[i].x - s * local[i].y,
              b.center.y + s * local[i].x + c * local[i].y};
  return out;
}

inline double polygon_area(const std::vector<P2>& poly) {
  double acc = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const P2& p = poly[i];
    const P2& q = poly[(i + 1) % poly.size()];
    acc += p.x * q.y - q.x * p.y;
  }
  return 0.5 * std::abs(acc);
}

// Clip a convex subject polygon against the half-plane left of a->b.
inline void clip_edge(const std::vector<P2>& in, const P2& a, const P2& b,
                      std::vector<P2>& out) {
  out.clear();
  auto side = [&](const P2& p) {
    return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
  };
  std::size_t n = in.size();
  for (std::size_t i = 0; i < n; ++i) {
    const P2& cur = in[i];
    const P2& nxt = in[(i + 1) % n];
    double sc = side(cur), sn = side(nxt);
    if (sc >= 0.0) out.push_back(cur);
    if ((sc > 0.0 && sn < 0.0) || (sc < 0.0 && sn > 0.0)) {
      double t = sc / (sc - sn);
      out.push_back({cur.x + t * (nxt.x - cur.x), cur.y + t * (nxt.y - cur.y)});
    }
  }
}

inline double bev_intersection_area(const Box3D& a, const Box3D& b) {
  auto ca = bev_corners(a);
  auto cb = bev_corners(b);
  std::vector<P2> poly(ca.begin(), ca.end()), tmp;
  for (int e = 0; e < 4 && !poly.empty(); ++e) {
    clip_edge(poly, cb[e], cb[(e + 1) % 4], tmp);
    poly.swap(tmp);
  }
  if (poly.size() < 3) return 0.0;
  return polygon_area(poly);
}

}  // namespace detail

inline double rotated_iou_3d(const Box3D& a, const Box3D& b) {
  if (a.volume() <= 0.0 || b.volume() <= 0.0)
    throw std::invalid_argument("rotated_iou_3d: degenerate box");
  double zlo = std::max(a.center.z - 0.5 * a.h, b.center.z - 0.5 * b.h);
  double zhi = std::min(a.center.z + 0.5 * a.h, b.center.z + 0.5 * b.h);
  double zover = std::max(0.0, zhi - zlo);
  if (zover == 0.0) return 0.0;
  double inter = detail::bev_intersection_area(a, b) * zover;
  double uni = a.volume() + b.volume() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Forward-mode dual numbers over N seeds; carries the derivative of the
// axis-aligned IoU surrogate w.r.t. the 7 regression channels.

template <int N>
struct Dual {
  double v = 0.0;
  std::array<double, N> d{};

  Dual() = default;
  Dual(double value) : v(value) {}
  static Dual seed(double value, int i) {
    Dual r(value);
    r.d[i] = 1.0;
    return r;
  }

  Dual operator+(const Dual& o) const {
    Dual r(v + o.v);
    for (int i = 0; i < N; ++i) r.d[i] = d[i] + o.d[i];
    return r;
  }
  Dual operator-(const Dual& o) const {
    Dual r(v - o.v);
    for (int i = 0; i < N; ++i) r.d[i] = d[i] - o.d[i];
    return r;
  }
  Dual operator*(const Dual& o) const {
    Dual r(v * o.v);
    for (int i = 0; i < N; ++i) r.d[i] = d[i] * o.v + v * o.d[i];
    return r;
  }
  Dual operator/(const Dual& o) const {
    Dual r(v / o.v);
    for (int i = 0; i < N; ++i) r.d[i] = (d[i] * o.v - v * o.d[i]) / (o.v * o.v);
    return r;
  }
  friend Dual dmax(const Dual& a, const Dual& b) { return a.v >= b.v ? a : b; }
  friend Dual dmin(const Dual& a, const Dual& b) { return a.v <= b.v ? a : b; }
  friend Dual dsin(const Dual& a) {
    Dual r(std::sin(a.v));
    double c = std::cos(a.v);
    for (int i = 0; i < N; ++i) r.d[i] = c * a.d[i];
    return r;
  }
  friend Dual dcos(const Dual& a) {
    Dual r(std::cos(a.v));
    double s = std::sin(a.v);
    for (int i = 0; i < N; ++i) r.d[i] = -s * a.d[i];
    return r;
  }
};

inline double dcos(double x) { return std::cos(x); }
inline double dsin(double x) { return std::sin(x); }
inline double dmax(double a, double b) { return std::max(a, b); }
inline double dmin(double a, double b) { return std::min(a, b); }

// Decode of the 7 regression channels (face distances -x,+x,-y,+y,-z,+z and
// yaw) at a voxel center into a box, generic over double/Dual.
template <class T>
struct DecodedBox {
  T cx, cy, cz, l, w, h, yaw;
};

template <class T>
DecodedBox<T> decode_regression(const std::array<T, 7>& r, const Vec3& voxel_center) {
  DecodedBox<T> b;
  b.l = r[0] + r[1];
  b.w = r[2] + r[3];
  b.h = r[4] + r[5];
  b.yaw = r[6];
  T qx = (r[0] - r[1]) * T(0.5);
  T qy = (r[2] - r[3]) * T(0.5);
  T qz = (r[4] - r[5]) * T(0.5);
  T c = dcos(b.yaw), s = dsin(b.yaw);
  b.cx = T(voxel_center.x) - (c * qx - s * qy);
  b.cy = T(voxel_center.y) - (s * qx + c * qy);
  b.cz = T(voxel_center.z) - qz;
  return b;
}

// Axis-aligned IoU surrogate: the predicted box is rotated into the target's
// yaw frame and treated as axis-aligned there. Exact when the yaws agree.
template <class T>
T surrogate_iou(const DecodedBox<T>& p, const Box3D& gt) {
  double cg = std::cos(gt.yaw), sg = std::sin(gt.yaw);
  T dx = p.cx - T(gt.center.x);
  T dy = p.cy - T(gt.center.y);
  T ex = dx * T(cg) + dy * T(sg);   // R(-yaw_gt) * (c_p - c_gt)
  T ey = dx * T(-sg) + dy * T(cg);
  T ez = p.cz - T(gt.center.z);
  T ox = dmax(T(0.0), dmin(ex + p.l * T(0.5), T(gt.l * 0.5)) - dmax(ex - p.l * T(0.5), T(-gt.l * 0.5)));
  T oy = dmax(T(0.0), dmin(ey + p.w * T(0.5), T(gt.w * 0.5)) - dmax(ey - p.w * T(0.5), T(-gt.w * 0.5)));
  T oz = dmax(T(0.0), dmin(ez + p.h * T(0.5), T(gt.h * 0.5)) - dmax(ez - p.h * T(0.5), T(-gt.h * 0.5)));
  T inter = ox * oy * oz;
  T uni = p.l * p.w * p.h + T(gt.volume()) - inter;
  return inter / uni;
}

// ---------------------------------------------------------------------------
// Neck and head.

struct FpnParams {
  Conv3d lateral;  // 1x1x1, C -> C
  Conv3d down;     // 3x3x3 stride 2, C -> C
  Conv3d smooth0;  // 3x3x3
  Conv3d smooth1;  // 3x3x3
};

inline FpnParams make_fpn(Rng& rng, std::size_t c_f) {
  return {make_conv3d(rng, c_f, c_f, 1), make_conv3d(rng, c_f, c_f, 3, 2),
          make_conv3d(rng, c_f, c_f, 3), make_conv3d(rng, c_f, c_f, 3)};
}

struct FpnIds {
  ConvIds lateral, down, smooth0, smooth1;
};

inline FpnIds insert_fpn(ad::Graph& g, const FpnParams& p) {
  return {insert_conv(g, p.lateral), insert_conv(g, p.down), insert_conv(g, p.smooth0),
          insert_conv(g, p.smooth1)};
}

// Nearest-neighbor upsample of [C, x, y, z] to the given spatial dims
// (source index = min(dst/2, src-1)).
inline ad::ValueId upsample3d_nearest(ad::Graph& g, ad::ValueId x,
                                      std::array<std::size_t, 3> out_dims) {
  const Tensor& tx = g.value(x);
  if (tx.rank() != 4)
    throw std::invalid_argument("upsample3d: expected [C,x,y,z], got " + tx.shape_str());
  std::size_t C = tx.dim(0);
  std::array<std::size_t, 3> in_dims = {tx.dim(1), tx.dim(2), tx.dim(3)};
  Tensor y({C, out_dims[0], out_dims[1], out_dims[2]});
  std::size_t n_in = in_dims[0] * in_dims[1] * in_dims[2];
  std::size_t n_out = out_dims[0] * out_dims[1] * out_dims[2];
  auto src_of = [in_dims](std::size_t ox, std::size_t oy, std::size_t oz) {
    std::size_t ix = std::min(ox / 2, in_dims[0] - 1);
    std::size_t iy = std::min(oy / 2, in_dims[1] - 1);
    std::size_t iz = std::min(oz / 2, in_dims[2] - 1);
    return (ix * in_dims[1] + iy) * in_dims[2] + iz;
  };
  for (std::size_t ox = 0; ox < out_dims[0]; ++ox)
    for (std::size_t oy = 0; oy < out_dims[1]; ++oy)
      for (std::size_t oz = 0; oz < out_dims[2]; ++oz) {
        std::size_t so = src_of(ox, oy, oz);
        std::size_t dof = (ox * out_dims[1] + oy) * out_dims[2] + oz;
        for (std::size_t c = 0; c < C; ++c) y[c * n_out + dof] = tx[c * n_in + so];
      }
  return g.custom(std::move(y), {x},
                  [x, in_dims, out_dims, C, n_in, n_out, src_of](ad::Graph& g, ad::ValueId self) {
                    const Tensor& gy = *g.out_grad(self);
                    Tensor* gx = g.grad_buffer(x);
                    if (!gx) return;
                    for (std::size_t ox = 0; ox < out_dims[0]; ++ox)
                      for (std::size_t oy = 0; oy < out_dims[1]; ++oy)
                        for (std::size_t oz = 0; oz < out_dims[2]; ++oz) {
                          std::size_t so = src_of(ox, oy, oz);
                          std::size_t dof = (ox * out_dims[1] + oy) * out_dims[2] + oz;
                          for (std::size_t c = 0; c < C; ++c)
                            (*gx)[c * n_in + so] += gy[c * n_out + dof];
                        }
                  });
}

// Two-level neck: level 0 at grid resolution, level 1 at a stride-2
// downsample (odd extents floor), top-down addition and smoothing convs.
inline std::vector<ad::ValueId> fpn_forward(ad::Graph& g, ad::ValueId v_e, const FpnIds& fpn) {
  const Tensor& t = g.value(v_e);
  std::array<std::size_t, 3> dims = {t.dim(1), t.dim(2), t.dim(3)};
  ad::ValueId l0 = g.conv3d(v_e, fpn.lateral.w, fpn.lateral.b);
  ad::ValueId d = g.relu(g.conv3d(v_e, fpn.down.w, fpn.down.b, 2));
  const Tensor& td = g.value(d);
  std::array<std::size_t, 3> want = {std::max<std::size_t>(dims[0] / 2, 1),
                                     std::max<std::size_t>(dims[1] / 2, 1),
                                     std::max<std::size_t>(dims[2] / 2, 1)};
  if (td.dim(1) != want[0] || td.dim(2) != want[1] || td.dim(3) != want[2])
    d = g.slice(d, {0, 0, 0, 0}, {td.dim(0), want[0], want[1], want[2]});
  ad::ValueId l1 = g.conv3d(d, fpn.smooth1.w, fpn.smooth1.b);
  ad::ValueId up = upsample3d_nearest(g, l1, dims);
  ad::ValueId l0s = g.conv3d(g.add(l0, up), fpn.smooth0.w, fpn.smooth0.b);
  return {l0s, l1};
}

struct HeadParams {
  Conv3d center;  // C -> 1
  Conv3d reg;     // C -> 7
  Conv3d cls;     // C -> K
};

inline HeadParams make_head(Rng& rng, std::size_t c_f, std::size_t num_classes) {
  return {make_conv3d(rng, c_f, 1, 3), make_conv3d(rng, c_f, 7, 3),
          make_conv3d(rng, c_f, num_classes, 3)};
}

struct HeadIds {
  ConvIds center, reg, cls;
};

inline HeadIds insert_head(ad::Graph& g, const HeadParams& p) {
  return {insert_conv(g, p.center), insert_conv(g, p.reg), insert_conv(g, p.cls)};
}

struct HeadOutput {
  ad::ValueId centerness = -1;  // [1, x, y, z] logits
  ad::ValueId regression = -1;  // [7, x, y, z]; channels 0-5 exp'd, 6 raw yaw
  ad::ValueId class_logits = -1;
};

inline HeadOutput head_forward(ad::Graph& g, ad::ValueId feat, const HeadIds& head) {
  HeadOutput out;
  out.centerness = g.conv3d(feat, head.center.w, head.center.b);
  ad::ValueId raw = g.conv3d(feat, head.reg.w, head.reg.b);
  const Tensor& t = g.value(raw);
  std::size_t X = t.dim(1), Y = t.dim(2), Z = t.dim(3);
  ad::ValueId dist = g.exp_(g.slice(raw, {0, 0, 0, 0}, {6, X, Y, Z}));
  ad::ValueId yaw = g.slice(raw, {6, 0, 0, 0}, {1, X, Y, Z});
  out.regression = g.concat({dist, yaw}, 0);
  out.class_logits = g.conv3d(feat, head.cls.w, head.cls.b);
  return out;
}

// ---------------------------------------------------------------------------
// Target assignment. A voxel is positive when its center lies inside a
// ground-truth box (smallest volume wins overlaps). The centerness target is
// the geometric mean of the per-axis min/max face-distance ratios.

inline VoxelGridSpec level_grid(const VoxelGridSpec& grid, std::size_t level) {
  VoxelGridSpec l = grid;
  for (std::size_t i = 0; i < level; ++i) {
    l.voxel_size *= 2.0;
    for (auto& d : l.dims) d = std::max<std::size_t>(d / 2, 1);
  }
  return l;
}

struct LevelTargets {
  std::vector<std::size_t> positive;       // linear voxel indices, ascending
  std::vector<double> centerness;          // per positive
  std::vector<std::array<double, 7>> box;  // per positive: 6 distances + yaw
  std::vector<int> gt_index;               // per positive
  std::vector<int> class_of;               // per positive
  std::size_t num_voxels = 0;
};

inline LevelTargets assign_targets(const std::vector<Box3D>& gt_boxes,
                                   const VoxelGridSpec& grid) {
  LevelTargets t;
  t.num_voxels = grid.num_voxels();
  for (std::size_t v = 0; v < t.num_voxels; ++v) {
    Vec3 p = grid.voxel_center(v);
    int best = -1;
    double best_vol = 0.0;
    std::array<double, 6> best_d{};
    for (std::size_t b = 0; b < gt_boxes.size(); ++b) {
      const Box3D& box = gt_boxes[b];
      double c = std::cos(box.yaw), s = std::sin(box.yaw);
      double rx = p.x - box.center.x, ry = p.y - box.center.y;
      double qx = c * rx + s * ry;
      double qy = -s * rx + c * ry;
      double qz = p.z - box.center.z;
      std::array<double, 6> d = {0.5 * box.l + qx, 0.5 * box.l - qx, 0.5 * box.w + qy,
                                 0.5 * box.w - qy, 0.5 * box.h + qz, 0.5 * box.h - qz};
      bool inside = true;
      for (double dd : d) inside = inside && dd >= 0.0;
      if (!inside) continue;
      if (best < 0 || box.volume() < best_vol) {
        best = static_cast<int>(b);
        best_vol = box.volume();
        best_d = d;
      }
    }
    if (best < 0) continue;
    t.positive.push_back(v);
    double ratio = 1.0;
    for (int axis = 0; axis < 3; ++axis) {
      double lo = best_d[2 * axis], hi = best_d[2 * axis + 1];
      ratio *= std::min(lo, hi) / std::max(lo, hi);
    }
    t.centerness.push_back(std::cbrt(ratio));
    t.box.push_back({best_d[0], best_d[1], best_d[2], best_d[3], best_d[4], best_d[5],
                     gt_boxes[best].yaw});
    t.gt_index.push_back(best);
    t.class_of.push_back(gt_boxes[best].class_id);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Losses.

// BCE with logits, averaged over the selected voxels; empty selection
// contributes nothing.
inline ad::ValueId loss_center(ad::Graph& g, ad::ValueId logits_flat,
                               const std::vector<std::size_t>& positive,
                               const std::vector<double>& targets) {
  if (positive.empty()) return g.constant(Tensor::scalar(0.0));
  ad::ValueId x = g.gather_rows(logits_flat, positive);  // [P]
  Tensor t({positive.size()});
  for (std::size_t i = 0; i < positive.size(); ++i) t[i] = targets[i];
  ad::ValueId tc = g.constant(t);
  ad::ValueId one_minus_t = g.scale_add(tc, -1.0, 1.0);
  ad::ValueId sp_pos = g.softplus(x);
  ad::ValueId sp_neg = g.softplus(g.scale_add(x, -1.0, 0.0));
  return g.mean_all(g.add(g.mul(tc, sp_neg), g.mul(one_minus_t, sp_pos)));
}

// Sigmoid focal loss, gamma = 2, alpha = 0.25, summed over every voxel and
// class then normalized by the positive count (at least 1).
inline ad::ValueId loss_cls(ad::Graph& g, ad::ValueId class_logits_flat, const Tensor& one_hot,
                            std::size_t positive_count, double alpha_bal = 0.25) {
  // the squared modulating factors below fix gamma = 2
  ad::ValueId t = g.constant(one_hot);
  ad::ValueId one_minus_t = g.scale_add(t, -1.0, 1.0);
  ad::ValueId p = g.sigmoid(class_logits_flat);
  ad::ValueId one_minus_p = g.scale_add(p, -1.0, 1.0);
  ad::ValueId sp_pos = g.softplus(class_logits_flat);                       // -log(1-p)
  ad::ValueId sp_neg = g.softplus(g.scale_add(class_logits_flat, -1.0, 0.0));  // -log p
  ad::ValueId pos_term = g.mul(t, g.mul(g.mul(one_minus_p, one_minus_p), sp_neg));
  ad::ValueId neg_term = g.mul(one_minus_t, g.mul(g.mul(p, p), sp_pos));
  ad::ValueId total = g.add(g.scale_add(pos_term, alpha_bal), g.scale_add(neg_term, 1.0 - alpha_bal));
  double norm = 1.0 / static_cast<double>(std::max<std::size_t>(positive_count, 1));
  return g.scale_add(g.sum_all(total), norm);
}

// Rotated-IoU regression loss: mean over positives of (1 - IoU). The forward
// value is the exact polygon IoU; gradients come from the axis-aligned
// surrogate (which is the forward value too in the near-aligned branch,
// |yaw difference| < 1e-5, chosen wider than the 1e-6 finite-difference
// step so the branch is checkable). surrogate_forward forces the surrogate
// value everywhere; the gradient checker uses it to verify the implemented
// backward, which is the surrogate's derivative in either mode.
inline constexpr double kAlignedYawBranch = 1e-5;

inline ad::ValueId loss_bbox(ad::Graph& g, ad::ValueId reg_rows,
                             const std::vector<Vec3>& voxel_centers,
                             const std::vector<Box3D>& targets,
                             bool surrogate_forward = false) {
  const Tensor& rows = g.value(reg_rows);
  std::size_t P = targets.size();
  if (P == 0) return g.constant(Tensor::scalar(0.0));
  if (rows.rank() != 2 || rows.dim(0) != P || rows.dim(1) != 7)
    throw std::invalid_argument("loss_bbox: expected [P,7] regression rows, got " +
                                rows.shape_str());
  auto decodable = [](const DecodedBox<double>& d) {
    return std::isfinite(d.cx) && std::isfinite(d.cy) && std::isfinite(d.cz) &&
           std::isfinite(d.yaw) && std::isfinite(d.l) && d.l > 0.0 && std::isfinite(d.w) &&
           d.w > 0.0 && std::isfinite(d.h) && d.h > 0.0;
  };
  double acc = 0.0;
  for (std::size_t i = 0; i < P; ++i) {
    std::array<double, 7> r;
    for (int j = 0; j < 7; ++j) r[j] = rows[i * 7 + j];
    DecodedBox<double> d = decode_regression(r, voxel_centers[i]);
    if (!decodable(d)) {
      // blown-up regression (exp overflow/underflow): worst loss, no gradient
      acc += 1.0;
      continue;
    }
    double dyaw = wrap_angle(d.yaw - targets[i].yaw);
    double iou;
    if (surrogate_forward || std::abs(dyaw) < kAlignedYawBranch) {
      iou = surrogate_iou(d, targets[i]);
    } else {
      Box3D pb{{d.cx, d.cy, d.cz}, d.l, d.w, d.h, wrap_angle(d.yaw), 0, 1.0};
      iou = rotated_iou_3d(pb, targets[i]);
    }
    acc += 1.0 - iou;
  }
  Tensor value = Tensor::scalar(acc / static_cast<double>(P));
  return g.custom(std::move(value), {reg_rows},
                  [reg_rows, voxel_centers, targets, P, decodable](ad::Graph& g,
                                                                   ad::ValueId self) {
                    double gy = (*g.out_grad(self))[0];
                    Tensor* gr = g.grad_buffer(reg_rows);
                    if (!gr) return;
                    const Tensor& rows = g.value(reg_rows);
                    double inv = gy / static_cast<double>(P);
                    for (std::size_t i = 0; i < P; ++i) {
                      std::array<Dual<7>, 7> r;
                      std::array<double, 7> rv;
                      for (int j = 0; j < 7; ++j) {
                        rv[j] = rows[i * 7 + j];
                        r[j] = Dual<7>::seed(rv[j], j);
                      }
                      if (!decodable(decode_regression(rv, voxel_centers[i]))) continue;
                      DecodedBox<Dual<7>> d = decode_regression(r, voxel_centers[i]);
                      Dual<7> iou = surrogate_iou(d, targets[i]);
                      for (int j = 0; j < 7; ++j) (*gr)[i * 7 + j] -= inv * iou.d[j];
                    }
                  });
}

inline ad::ValueId total_loss(ad::Graph& g, ad::ValueId center, ad::ValueId bbox,
                              ad::ValueId cls, std::optional<ad::ValueId> render,
                              double lambda_render) {
  if (lambda_render < 0.0) throw std::invalid_argument("total_loss: lambda_render < 0");
  ad::ValueId det = g.add(g.add(center, bbox), cls);
  if (!render) return det;
  return g.add(det, g.scale_add(*render, lambda_render));
}

// ---------------------------------------------------------------------------
// Decoding and NMS.

struct DecodeParams {
  double score_threshold = 0.05;
  double nms_iou = 0.25;
};

// Greedy rotated NMS by descending score; ties broken by (level, voxel) order.
inline std::vector<Box3D> nms(std::vector<Box3D> boxes, double iou_threshold) {
  // boxes arrive in (level, voxel) order; stable sort keeps that as tiebreak
  std::stable_sort(boxes.begin(), boxes.end(),
                   [](const Box3D& a, const Box3D& b) { return a.score > b.score; });
  std::vector<Box3D> kept;
  for (const Box3D& b : boxes) {
    bool keep = true;
    for (const Box3D& k : kept)
      if (k.class_id == b.class_id && rotated_iou_3d(k, b) > iou_threshold) {
        keep = false;
        break;
      }
    if (keep) kept.push_back(b);
  }
  return kept;
}

// Decode one level's head output (plain tensors) into scored boxes.
inline std::vector<Box3D> decode_level(const Tensor& centerness, const Tensor& regression,
                                       const Tensor& class_logits, const VoxelGridSpec& grid,
                                       double score_threshold) {
  std::size_t n = grid.num_voxels();
  std::size_t K = class_logits.dim(0);
  std::vector<Box3D> out;
  for (std::size_t v = 0; v < n; ++v) {
    double cent = ad::detail::stable_sigmoid(centerness[v]);
    double best_p = 0.0;
    int best_k = 0;
    for (std::size_t k = 0; k < K; ++k) {
      double p = ad::detail::stable_sigmoid(class_logits[k * n + v]);
      if (p > best_p) {
        best_p = p;
        best_k = static_cast<int>(k);
      }
    }
    double score = cent * best_p;
    if (score < score_threshold) continue;
    std::array<double, 7> r;
    for (int j = 0; j < 7; ++j) r[j] = regression[j * n + v];
    DecodedBox<double> d = decode_regression(r, grid.voxel_center(v));
    if (d.l <= 1e-6 || d.w <= 1e-6 || d.h <= 1e-6) continue;
    if (!std::isfinite(d.cx) || !std::isfinite(d.cy) || !std::isfinite(d.cz) ||
        !std::isfinite(d.l) || !std::isfinite(d.w) || !std::isfinite(d.h) ||
        !std::isfinite(d.yaw) || !std::isfinite(score))
      continue;
    out.push_back({{d.cx, d.cy, d.cz}, d.l, d.w, d.h, wrap_angle(d.yaw), best_k, score});
  }
  return out;
}

inline std::vector<Box3D> decode_boxes(const std::vector<Tensor>& centerness,
                                       const std::vector<Tensor>& regression,
                                       const std::vector<Tensor>& class_logits,
                                       const VoxelGridSpec& grid, const DecodeParams& params) {
  std::vector<Box3D> all;
  for (std::size_t lvl = 0; lvl < centerness.size(); ++lvl) {
    auto boxes = decode_level(centerness[lvl], regression[lvl], class_logits[lvl],
                              level_grid(grid, lvl), params.score_threshold);
    all.insert(all.end(), boxes.begin(), boxes.end());
  }
  return nms(std::move(all), params.nms_iou);
}

// ---------------------------------------------------------------------------
// mAP evaluation: per class, predictions sorted by score (stable), greedy
// one-to-one matching at IoU >= threshold, exact AP as the area under the
// precision envelope; mAP averages classes with at least one ground truth.

struct EvalResult {
  std::vector<std::pair<int, double>> per_class_ap;  // (class_id, AP)
  double map = 0.0;
};

inline EvalResult eval_map(const std::vector<std::vector<Box3D>>& predictions,
                           const std::vector<std::vector<Box3D>>& ground_truth,
                           double iou_threshold) {
  if (iou_threshold <= 0.0 || iou_threshold >= 1.0)
    throw std::invalid_argument("eval_map: iou_threshold must lie in (0,1)");
  if (predictions.size() != ground_truth.size())
    throw std::invalid_argument("eval_map: scene count mismatch");
  int max_class = -1;
  for (const auto& scene : ground_truth)
    for (const Box3D& b : scene) max_class = std::max(max_class, b.class_id);
  for (const auto& scene : predictions)
    for (const Box3D& b : scene) max_class = std::max(max_class, b.class_id);

  EvalResult result;
  double ap_sum = 0.0;
  std::size_t classes_with_gt = 0;
  for (int cls = 0; cls <= max_class; ++cls) {
    std::size_t n_gt = 0;
    for (const auto& scene : ground_truth)
      for (const Box3D& b : scene)
        if (b.class_id == cls) ++n_gt;
    if (n_gt == 0) continue;
    ++classes_with_gt;

    struct Pred {
      double score;
      std::size_t scene;
      std::size_t index;  // insertion order within scene
      const Box3D* box;
    };
    std::vector<Pred> preds;
    for (std::size_t s = 0; s < predictions.size(); ++s)
      for (std::size_t i = 0; i < predictions[s].size(); ++i)
        if (predictions[s][i].class_id == cls)
          preds.push_back({predictions[s][i].score, s, i, &predictions[s][i]});
    std::stable_sort(preds.begin(), preds.end(),
                     [](const Pred& a, const Pred& b) { return a.score > b.score; });

    std::vector<std::vector<bool>> gt_used(ground_truth.size());
    for (std::size_t s = 0; s < ground_truth.size(); ++s)
      gt_used[s].assign(ground_truth[s].size(), false);

    std::vector<bool> is_tp(preds.size(), false);
    for (std::size_t pi = 0; pi < preds.size(); ++pi) {
      const auto& scene_gt = ground_truth[preds[pi].scene];
      double best_iou = 0.0;
      int best_gt = -1;
      for (std::size_t gi = 0; gi < scene_gt.size(); ++gi) {
        if (scene_gt[gi].class_id != cls || gt_used[preds[pi].scene][gi]) continue;
        double iou = rotated_iou_3d(*preds[pi].box, scene_gt[gi]);
        if (iou >= iou_threshold && iou > best_iou) {
          best_iou = iou;
          best_gt = static_cast<int>(gi);
        }
      }
      if (best_gt >= 0) {
        is_tp[pi] = true;
        gt_used[preds[pi].scene][best_gt] = true;
      }
    }

    std::vector<double> precision(preds.size()), recall(preds.size());
    std::size_t tp = 0;
    for (std::size_t pi = 0; pi < preds.size(); ++pi) {
      if (is_tp[pi]) ++tp;
      precision[pi] = static_cast<double>(tp) / static_cast<double>(pi + 1);
      recall[pi] = static_cast<double>(tp) / static_cast<double>(n_gt);
    }
    // precision envelope from the right, integrated at recall increments
    double ap = 0.0, env = 0.0, prev_recall = 0.0;
    std::vector<double> envelope(preds.size());
    for (std::size_t pi = preds.size(); pi-- > 0;) {
      env = std::max(env, precision[pi]);
      envelope[pi] = env;
    }
    for (std::size_t pi = 0; pi < preds.size(); ++pi) {
      if (recall[pi] > prev_recall) {
        ap += (recall[pi] - prev_recall) * envelope[pi];
        prev_recall = recall[pi];
      }
    }
    result.per_class_ap.emplace_back(cls, ap);
    ap_sum += ap;
  }
  result.map = classes_with_gt ? ap_sum / static_cast<double>(classes_with_gt) : 0.0;
  return result;
}

}  // namespace gvs
