#pragma once

// CPU splat renderer for the render-supervision path. Each Gaussian's 3D
// covariance is pushed through the local affine (EWA) approximation to a 2D
// covariance, footprints are truncated at 3 sigma, and pixels composite
// front-to-back with alpha weights alpha' = alpha * exp(-0.5 d^T Sigma^-1 d).
// Color is degree-1 spherical harmonics evaluated in the view direction.
//
// Gradients flow to opacity and SH coefficients over frozen footprints;
// position/scale/rotation stay out of the training graph.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <numeric>
#include <vector>

#include "gvs/autodiff.hpp"
#include "gvs/gaussians.hpp"
#include "gvs/geometry.hpp"
#include "gvs/parallel.hpp"
#include "gvs/tensor.hpp"

namespace gvs {

inline constexpr double kSh0 = 0.28209479177387814;  // Y_0^0
inline constexpr double kSh1 = 0.4886025119029199;   // |Y_1^m| prefactor

inline Mat3 quat_to_rotation(const std::array<double, 4>& q) {
  double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 r;
  r[0][0] = 1 - 2 * (y * y + z * z);
  r[0][1] = 2 * (x * y - w * z);
  r[0][2] = 2 * (x * z + w * y);
  r[1][0] = 2 * (x * y + w * z);
  r[1][1] = 1 - 2 * (x * x + z * z);
  r[1][2] = 2 * (y * z - w * x);
  r[2][0] = 2 * (x * z - w * y);
  r[2][1] = 2 * (y * z + w * x);
  r[2][2] = 1 - 2 * (x * x + y * y);
  return r;
}

struct RenderStats {
  std::size_t skipped_behind = 0;
  std::size_t skipped_singular = 0;  // 2D covariance conditioning < 1e-12
};

// Frozen per-view rasterization geometry: projected footprints sorted
// front-to-back plus per-pixel fragment lists. Independent of opacity/SH,
// so forward and backward share one prepared scene.
struct SplatScene {
  struct Splat {
    double u0, v0;                 // projected center, pixel units
    double inv_a, inv_b, inv_c;    // inverse 2D covariance
    double depth;
    int x0, x1, y0, y1;            // inclusive pixel bbox
    std::array<double, 4> basis;   // SH basis at the view direction
    std::uint32_t index;           // original gaussian index
  };
  std::size_t width = 0, height = 0;
  std::array<double, 3> background{};
  std::vector<Splat> splats;             // front-to-back
  std::vector<std::uint32_t> offsets;    // per pixel into fragments
  std::vector<std::uint32_t> fragments;  // splat list indices, front-to-back
  RenderStats stats;
};

inline SplatScene prepare_splats(const std::vector<Vec3>& positions,
                                 const std::vector<std::array<double, 4>>& rotations,
                                 const std::vector<std::array<double, 3>>& scales,
                                 const Camera& cam, std::size_t width, std::size_t height,
                                 const std::array<double, 3>& background) {
  if (width < 1 || height < 1) throw std::invalid_argument("render: empty image");
  SplatScene scene;
  scene.width = width;
  scene.height = height;
  scene.background = background;

  const Mat34& K = cam.intrinsics();
  const double fx = K[0][0], fy = K[1][1], cx = K[0][2], cy = K[1][2];
  const Mat4& P = cam.extrinsics();
  Vec3 cam_center = cam.center();

  for (std::size_t i = 0; i < positions.size(); ++i) {
    Vec3 t = cam.world_to_camera(positions[i]);
    if (t.z <= 1e-9) {
      ++scene.stats.skipped_behind;
      continue;
    }
    Mat3 R = quat_to_rotation(rotations[i]);
    // Sigma_world = R diag(s^2) R^T, then rotate into the camera frame.
    double s2[3] = {scales[i][0] * scales[i][0], scales[i][1] * scales[i][1],
                    scales[i][2] * scales[i][2]};
    Mat3 Sw;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        Sw[r][c] = R[r][0] * s2[0] * R[c][0] + R[r][1] * s2[1] * R[c][1] +
                   R[r][2] * s2[2] * R[c][2];
    Mat3 Sc;  // W Sw W^T with W = rotation block of P
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int k = 0; k < 3; ++k) {
          double wk = P[r][0] * Sw[0][k] + P[r][1] * Sw[1][k] + P[r][2] * Sw[2][k];
          acc += wk * P[c][k];
        }
        Sc[r][c] = acc;
      }
    // J: Jacobian of (fx X/Z + cx, fy Y/Z + cy) at t
    const double iz = 1.0 / t.z, iz2 = iz * iz;
    const double J[2][3] = {{fx * iz, 0.0, -fx * t.x * iz2},
                            {0.0, fy * iz, -fy * t.y * iz2}};
    double a = 0, b = 0, c2 = 0;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) {
        a += J[0][r] * Sc[r][c] * J[0][c];
        b += J[0][r] * Sc[r][c] * J[1][c];
        c2 += J[1][r] * Sc[r][c] * J[1][c];
      }
    double det = a * c2 - b * b;
    if (det < 1e-12) {
      ++scene.stats.skipped_singular;
      continue;
    }
    SplatScene::Splat s;
    s.u0 = fx * t.x * iz + cx;
    s.v0 = fy * t.y * iz + cy;
    s.inv_a = c2 / det;
    s.inv_b = -b / det;
    s.inv_c = a / det;
    s.depth = t.z;
    double rx = 3.0 * std::sqrt(a), ry = 3.0 * std::sqrt(c2);
    s.x0 = std::max(0, static_cast<int>(std::ceil(s.u0 - rx - 0.5)));
    s.x1 = std::min(static_cast<int>(width) - 1, static_cast<int>(std::floor(s.u0 + rx - 0.5)));
    s.y0 = std::max(0, static_cast<int>(std::ceil(s.v0 - ry - 0.5)));
    s.y1 = std::min(static_cast<int>(height) - 1, static_cast<int>(std::floor(s.v0 + ry - 0.5)));
    if (s.x0 > s.x1 || s.y0 > s.y1) continue;  // off-screen footprint
    Vec3 dir = (positions[i] - cam_center).normalized();
    s.basis = {kSh0, -kSh1 * dir.y, kSh1 * dir.z, -kSh1 * dir.x};
    s.index = static_cast<std::uint32_t>(i);
    scene.splats.push_back(s);
  }

  // front-to-back, ties broken by original index for a deterministic order
  std::stable_sort(scene.splats.begin(), scene.splats.end(),
                   [](const auto& l, const auto& r) {
                     return l.depth < r.depth || (l.depth == r.depth && l.index < r.index);
                   });

  // per-pixel fragment lists (CSR); rows are built independently, and each
  // row appends splats in sorted order so pixel lists stay front-to-back
  std::size_t npix = width * height;
  scene.offsets.assign(npix + 1, 0);
  parallel_for(height, [&](std::size_t y) {
    for (std::size_t k = 0; k < scene.splats.size(); ++k) {
      const auto& s = scene.splats[k];
      if (static_cast<int>(y) < s.y0 || static_cast<int>(y) > s.y1) continue;
      for (int x = s.x0; x <= s.x1; ++x) ++scene.offsets[y * width + x + 1];
    }
  });
  for (std::size_t p = 0; p < npix; ++p) scene.offsets[p + 1] += scene.offsets[p];
  scene.fragments.resize(scene.offsets[npix]);
  parallel_for(height, [&](std::size_t y) {
    std::vector<std::uint32_t> cursor(width);
    for (std::size_t x = 0; x < width; ++x) cursor[x] = scene.offsets[y * width + x];
    for (std::size_t k = 0; k < scene.splats.size(); ++k) {
      const auto& s = scene.splats[k];
      if (static_cast<int>(y) < s.y0 || static_cast<int>(y) > s.y1) continue;
      for (int x = s.x0; x <= s.x1; ++x)
        scene.fragments[cursor[x]++] = static_cast<std::uint32_t>(k);
    }
  });
  return scene;
}

namespace detail {

inline double splat_gaussian(const SplatScene::Splat& s, double px, double py) {
  double dx = px - s.u0, dy = py - s.v0;
  double e = -0.5 * (s.inv_a * dx * dx + 2.0 * s.inv_b * dx * dy + s.inv_c * dy * dy);
  return std::exp(e);
}

inline void splat_color(const SplatScene::Splat& s, const double* sh, double* col) {
  for (int ch = 0; ch < 3; ++ch)
    col[ch] = sh[ch * 4 + 0] * s.basis[0] + sh[ch * 4 + 1] * s.basis[1] +
              sh[ch * 4 + 2] * s.basis[2] + sh[ch * 4 + 3] * s.basis[3];
}

}  // namespace detail

// Forward compositing. alphas: [N], sh: [N,12] (row-major per gaussian).
inline Tensor render_forward(const SplatScene& scene, const Tensor& alphas, const Tensor& sh) {
  std::size_t W = scene.width, H = scene.height, npix = W * H;
  Tensor img({3, H, W});
  parallel_for(npix, [&](std::size_t p) {
    std::size_t y = p / W, x = p % W;
    double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
    double T = 1.0, acc[3] = {0, 0, 0};
    for (std::uint32_t f = scene.offsets[p]; f < scene.offsets[p + 1]; ++f) {
      const auto& s = scene.splats[scene.fragments[f]];
      double g = detail::splat_gaussian(s, px, py);
      double aprime = alphas[s.index] * g;
      if (aprime <= 1e-14) continue;
      double col[3];
      detail::splat_color(s, sh.data() + s.index * kShDim, col);
      for (int ch = 0; ch < 3; ++ch) acc[ch] += T * aprime * col[ch];
      T *= 1.0 - aprime;
      if (T < 1e-12) break;
    }
    for (int ch = 0; ch < 3; ++ch) img[ch * npix + p] = acc[ch] + T * scene.background[ch];
  });
  return img;
}

// Backward: dL/d(alpha), dL/d(sh) given dL/d(image). Per pixel the suffix
// composite B_k (everything behind fragment k) gives
//   dC/dalpha'_k = T_k (col_k - B_k),  dC/dcol_k = T_k alpha'_k.
inline void render_backward(const SplatScene& scene, const Tensor& alphas, const Tensor& sh,
                            const Tensor& d_img, Tensor* d_alpha, Tensor* d_sh) {
  std::size_t W = scene.width, H = scene.height, npix = W * H;
  struct Frag {
    std::uint32_t splat;
    double g, aprime, T;
    double col[3];
  };
  std::vector<Frag> stack;
  for (std::size_t p = 0; p < npix; ++p) {
    std::size_t y = p / W, x = p % W;
    double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
    stack.clear();
    double T = 1.0;
    for (std::uint32_t f = scene.offsets[p]; f < scene.offsets[p + 1]; ++f) {
      const auto& s = scene.splats[scene.fragments[f]];
      double g = detail::splat_gaussian(s, px, py);
      double aprime = alphas[s.index] * g;
      if (aprime <= 1e-14) continue;
      Frag fr;
      fr.splat = scene.fragments[f];
      fr.g = g;
      fr.aprime = aprime;
      fr.T = T;
      detail::splat_color(s, sh.data() + s.index * kShDim, fr.col);
      stack.push_back(fr);
      T *= 1.0 - aprime;
      if (T < 1e-12) break;
    }
    double dc[3] = {d_img[0 * npix + p], d_img[1 * npix + p], d_img[2 * npix + p]};
    double B[3] = {scene.background[0], scene.background[1], scene.background[2]};
    for (std::size_t k = stack.size(); k-- > 0;) {
      const Frag& fr = stack[k];
      const auto& s = scene.splats[fr.splat];
      double da = 0.0;
      for (int ch = 0; ch < 3; ++ch) da += dc[ch] * fr.T * (fr.col[ch] - B[ch]);
      if (d_alpha) (*d_alpha)[s.index] += da * fr.g;
      if (d_sh) {
        double* row = d_sh->data() + s.index * kShDim;
        for (int ch = 0; ch < 3; ++ch) {
          double dcol = dc[ch] * fr.T * fr.aprime;
          for (int j = 0; j < 4; ++j) row[ch * 4 + j] += dcol * s.basis[j];
        }
      }
      for (int ch = 0; ch < 3; ++ch) B[ch] = fr.aprime * fr.col[ch] + (1.0 - fr.aprime) * B[ch];
    }
  }
}

// Differentiable render node over a frozen scene.
inline ad::ValueId render_op(ad::Graph& g, ad::ValueId alphas, ad::ValueId sh,
                             std::shared_ptr<const SplatScene> scene) {
  Tensor img = render_forward(*scene, g.value(alphas), g.value(sh));
  return g.custom(std::move(img), {alphas, sh},
                  [alphas, sh, scene](ad::Graph& g, ad::ValueId self) {
                    const Tensor& gy = *g.out_grad(self);
                    render_backward(*scene, g.value(alphas), g.value(sh), gy,
                                    g.grad_buffer(alphas), g.grad_buffer(sh));
                  });
}

// Plain render of a decoded GaussianSet.
inline Tensor render(const GaussianSet& set, const Camera& cam, std::size_t width,
                     std::size_t height, const std::array<double, 3>& background,
                     RenderStats* stats = nullptr) {
  std::vector<Vec3> pos;
  std::vector<std::array<double, 4>> rot;
  std::vector<std::array<double, 3>> scl;
  Tensor alphas({std::max<std::size_t>(set.size(), 1)});
  Tensor sh({std::max<std::size_t>(set.size(), 1), kShDim});
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& p = set.primitives[i];
    pos.push_back(p.position);
    rot.push_back(p.rotation);
    scl.push_back(p.scale);
    alphas[i] = p.opacity;
    for (std::size_t j = 0; j < kShDim; ++j) sh[i * kShDim + j] = p.sh[j];
  }
  if (set.size() == 0) {
    pos.clear();
    rot.clear();
    scl.clear();
  }
  SplatScene scene = prepare_splats(pos, rot, scl, cam, width, height, background);
  if (stats) *stats = scene.stats;
  if (set.size() == 0) {
    Tensor img({3, height, width});
    std::size_t npix = width * height;
    for (int ch = 0; ch < 3; ++ch)
      for (std::size_t p = 0; p < npix; ++p) img[ch * npix + p] = background[ch];
    return img;
  }
  return render_forward(scene, alphas, sh);
}

// ---------------------------------------------------------------------------
// Image metrics and PPM I/O.

inline double mse(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument("mse: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    double d = a[i] - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.numel());
}

inline double render_loss(const Tensor& rendered, const Tensor& target) {
  return mse(rendered, target);
}

inline ad::ValueId render_loss(ad::Graph& g, ad::ValueId rendered, ad::ValueId target) {
  ad::ValueId d = g.sub(rendered, target);
  return g.mean_all(g.mul(d, d));
}

// PSNR in dB for images in [0,1]; identical images report the 99.0 cap.
inline double psnr(const Tensor& a, const Tensor& b) {
  double m = mse(a, b);
  if (m <= 0.0) return 99.0;
  return std::min(99.0, 10.0 * std::log10(1.0 / m));
}

// SSIM with the standard constants (C1=0.01^2, C2=0.03^2) and an 11x11
// Gaussian window, sigma 1.5, evaluated on fully covered windows and
// averaged over channels.
inline double ssim(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument("ssim: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  if (a.rank() != 3 || a.dim(0) != 3)
    throw std::invalid_argument("ssim: expected [3,H,W], got " + a.shape_str());
  constexpr int kWin = 11;
  std::size_t H = a.dim(1), W = a.dim(2);
  if (H < kWin || W < kWin)
    throw std::invalid_argument("ssim: image smaller than the 11x11 window");
  constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  double kernel[kWin];
  double sum = 0.0;
  for (int i = 0; i < kWin; ++i) {
    double d = i - (kWin - 1) / 2.0;
    kernel[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    sum += kernel[i];
  }
  for (double& k : kernel) k /= sum;

  auto window = [&](const double* img, std::size_t y, std::size_t x) {
    double acc = 0.0;
    for (int i = 0; i < kWin; ++i) {
      double row = 0.0;
      const double* base = img + (y + i) * W + x;
      for (int j = 0; j < kWin; ++j) row += kernel[j] * base[j];
      acc += kernel[i] * row;
    }
    return acc;
  };

  double total = 0.0;
  for (int ch = 0; ch < 3; ++ch) {
    const double* pa = a.data() + ch * H * W;
    const double* pb = b.data() + ch * H * W;
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t y = 0; y + kWin <= H; ++y)
      for (std::size_t x = 0; x + kWin <= W; ++x) {
        double mu1 = window(pa, y, x), mu2 = window(pb, y, x);
        double s11 = 0.0, s22 = 0.0, s12 = 0.0;
        for (int i = 0; i < kWin; ++i)
          for (int j = 0; j < kWin; ++j) {
            double w = kernel[i] * kernel[j];
            double va = pa[(y + i) * W + x + j], vb = pb[(y + i) * W + x + j];
            s11 += w * va * va;
            s22 += w * vb * vb;
            s12 += w * va * vb;
          }
        double var1 = s11 - mu1 * mu1, var2 = s22 - mu2 * mu2, cov = s12 - mu1 * mu2;
        acc += ((2 * mu1 * mu2 + C1) * (2 * cov + C2)) /
               ((mu1 * mu1 + mu2 * mu2 + C1) * (var1 + var2 + C2));
        ++count;
      }
    total += acc / static_cast<double>(count);
  }
  return total / 3.0;
}

// Binary PPM (P6, 8-bit), values clamped to [0,1].
inline void write_ppm(const std::string& path, const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3)
    throw std::invalid_argument("write_ppm: expected [3,H,W], got " + img.shape_str());
  std::size_t H = img.dim(1), W = img.dim(2), npix = H * W;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_ppm: cannot open " + path);
  os << "P6\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> row(3 * W);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x)
      for (int ch = 0; ch < 3; ++ch) {
        double v = std::clamp(img[ch * npix + y * W + x], 0.0, 1.0);
        row[x * 3 + ch] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
}

inline Tensor read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_ppm: cannot open " + path);
  std::string magic;
  is >> magic;
  if (magic != "P6") throw std::runtime_error("read_ppm: bad magic in " + path);
  std::size_t W = 0, H = 0;
  int maxval = 0;
  is >> W >> H >> maxval;
  if (!is || maxval != 255) throw std::runtime_error("read_ppm: unsupported header in " + path);
  is.get();  // single whitespace after header
  std::vector<unsigned char> buf(3 * W * H);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!is) throw std::runtime_error("read_ppm: truncated payload in " + path);
  Tensor img({3, H, W});
  std::size_t npix = W * H;
  for (std::size_t p = 0; p < npix; ++p)
    for (int ch = 0; ch < 3; ++ch)
      img[ch * npix + p] = static_cast<double>(buf[p * 3 + ch]) / 255.0;
  return img;
}

}  // namespace gvs
