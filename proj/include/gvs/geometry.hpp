#pragma once

// Calibrated pinhole camera: world -> pixel projection through S*K*P,
// unprojection by camera-frame depth, and feature-grid validity tests.

#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>

namespace gvs {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const {
    double n = norm();
    return n > 0.0 ? Vec3{x / n, y / n, z / n} : Vec3{};
  }
};

using Mat3 = std::array<std::array<double, 3>, 3>;  // row-major
using Mat34 = std::array<std::array<double, 4>, 3>;
using Mat4 = std::array<std::array<double, 4>, 4>;

inline Mat3 mat3_identity() {
  return {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
}

inline Vec3 mat3_apply(const Mat3& m, const Vec3& v) {
  return {m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
          m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
          m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z};
}

inline Mat3 mat3_inverse(const Mat3& m) {
  double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
               m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
               m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  if (std::abs(det) < 1e-300) throw std::domain_error("mat3_inverse: singular matrix");
  double inv = 1.0 / det;
  Mat3 r;
  r[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv;
  r[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv;
  r[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv;
  r[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv;
  r[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv;
  r[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv;
  r[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv;
  r[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv;
  r[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv;
  return r;
}

// Pixel position in feature-grid coordinates plus camera-frame depth.
struct PixelCoord {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;
};

class Camera {
 public:
  // K: 3x4 intrinsics, P: 4x4 world-to-camera, S = diag(s_x, s_y, 1) maps
  // image pixels to feature-grid coordinates.
  Camera(const Mat34& K, const Mat4& P, double s_x, double s_y, int width, int height)
      : K_(K), P_(P), sx_(s_x), sy_(s_y), width_(width), height_(height) {
    if (s_x <= 0.0 || s_y <= 0.0)
      throw std::invalid_argument("Camera: feature scale must be positive");
    if (K[0][0] <= 0.0 || K[1][1] <= 0.0)
      throw std::invalid_argument("Camera: focal lengths must be positive");
    check_rotation_();
    // A = S*K*P, the full world -> scaled-homogeneous map; cache it and the
    // inverse of its 3x3 part for unprojection.
    Mat34 KP{};
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) {
        double acc = 0.0;
        for (int k = 0; k < 4; ++k) acc += K_[r][k] * P_[k][c];
        KP[r][c] = acc;
      }
    double s[3] = {sx_, sy_, 1.0};
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) A_[r][c] = s[r] * KP[r][c];
    Mat3 m;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) m[r][c] = A_[r][c];
    Ainv_ = mat3_inverse(m);
  }

  static constexpr double kMinDepth = 1e-9;

  const Mat34& intrinsics() const { return K_; }
  const Mat4& extrinsics() const { return P_; }
  double scale_x() const { return sx_; }
  double scale_y() const { return sy_; }
  int width() const { return width_; }
  int height() const { return height_; }
  int feature_width() const { return static_cast<int>(std::lround(width_ * sx_)); }
  int feature_height() const { return static_cast<int>(std::lround(height_ * sy_)); }

  // S*K*P*[p;1] with homogeneous division; nullopt when the point is at or
  // behind the camera plane.
  std::optional<PixelCoord> project_point(const Vec3& p) const {
    double hx = A_[0][0] * p.x + A_[0][1] * p.y + A_[0][2] * p.z + A_[0][3];
    double hy = A_[1][0] * p.x + A_[1][1] * p.y + A_[1][2] * p.z + A_[1][3];
    double hz = A_[2][0] * p.x + A_[2][1] * p.y + A_[2][2] * p.z + A_[2][3];
    if (hz <= kMinDepth) return std::nullopt;
    return PixelCoord{hx / hz, hy / hz, hz};
  }

  // World point whose projection is (u, v) at camera-frame depth `depth`,
  // coordinates in the feature grid (the same frame project_point returns).
  Vec3 unproject_pixel(double u, double v, double depth) const {
    if (depth <= 0.0) throw std::invalid_argument("unproject_pixel: depth must be positive");
    // A*[p;1] = depth * (u, v, 1)  =>  p = Ainv * (depth*u - a3)
    Vec3 rhs{depth * u - A_[0][3], depth * v - A_[1][3], depth - A_[2][3]};
    return mat3_apply(Ainv_, rhs);
  }

  // Validity at feature-map resolution, half-open bounds.
  bool in_bounds(double u, double v) const {
    return u >= 0.0 && u < static_cast<double>(feature_width()) && v >= 0.0 &&
           v < static_cast<double>(feature_height());
  }

  // Camera center in world coordinates (P^-1 applied to the origin).
  Vec3 center() const {
    // P = [R t; 0 1]  =>  center = -R^T t
    Vec3 t{P_[0][3], P_[1][3], P_[2][3]};
    return {-(P_[0][0] * t.x + P_[1][0] * t.y + P_[2][0] * t.z),
            -(P_[0][1] * t.x + P_[1][1] * t.y + P_[2][1] * t.z),
            -(P_[0][2] * t.x + P_[1][2] * t.y + P_[2][2] * t.z)};
  }

  // World-space direction of the camera-frame vector d (rotation only).
  Vec3 rotate_to_world(const Vec3& d) const {
    return {P_[0][0] * d.x + P_[1][0] * d.y + P_[2][0] * d.z,
            P_[0][1] * d.x + P_[1][1] * d.y + P_[2][1] * d.z,
            P_[0][2] * d.x + P_[1][2] * d.y + P_[2][2] * d.z};
  }

  Vec3 rotate_to_camera(const Vec3& d) const {
    return {P_[0][0] * d.x + P_[0][1] * d.y + P_[0][2] * d.z,
            P_[1][0] * d.x + P_[1][1] * d.y + P_[1][2] * d.z,
            P_[2][0] * d.x + P_[2][1] * d.y + P_[2][2] * d.z};
  }

  Vec3 world_to_camera(const Vec3& p) const {
    return {P_[0][0] * p.x + P_[0][1] * p.y + P_[0][2] * p.z + P_[0][3],
            P_[1][0] * p.x + P_[1][1] * p.y + P_[1][2] * p.z + P_[1][3],
            P_[2][0] * p.x + P_[2][1] * p.y + P_[2][2] * p.z + P_[2][3]};
  }

 private:
  void check_rotation_() const {
    // Upper-left 3x3 of P must be a rotation: R*R^T = I, det = +1.
    double rr[3][3];
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int k = 0; k < 3; ++k) acc += P_[r][k] * P_[c][k];
        rr[r][c] = acc;
      }
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) {
        double want = r == c ? 1.0 : 0.0;
        if (std::abs(rr[r][c] - want) > 1e-9)
          throw std::invalid_argument("Camera: extrinsic rotation is not orthonormal");
      }
    double det = P_[0][0] * (P_[1][1] * P_[2][2] - P_[1][2] * P_[2][1]) -
                 P_[0][1] * (P_[1][0] * P_[2][2] - P_[1][2] * P_[2][0]) +
                 P_[0][2] * (P_[1][0] * P_[2][1] - P_[1][1] * P_[2][0]);
    if (std::abs(det - 1.0) > 1e-9)
      throw std::invalid_argument("Camera: extrinsic rotation has det != +1");
  }

  Mat34 K_;
  Mat4 P_;
  double sx_, sy_;
  int width_, height_;
  Mat34 A_;   // S*K*P
  Mat3 Ainv_; // inverse of A's 3x3 block
};

// Standard intrinsics from focal length and principal point.
inline Mat34 make_intrinsics(double fx, double fy, double cx, double cy) {
  return {{{fx, 0, cx, 0}, {0, fy, cy, 0}, {0, 0, 1, 0}}};
}

inline Mat4 identity_extrinsics() {
  return {{{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}}};
}

// World-to-camera transform for a camera at `eye` looking at `target`,
// `up` approximately up. Camera frame: +z forward, +x right, +y down.
inline Mat4 look_at_extrinsics(const Vec3& eye, const Vec3& target, const Vec3& up) {
  Vec3 fwd = (target - eye).normalized();
  Vec3 right = fwd.cross(up);
  if (right.norm() < 1e-12) throw std::invalid_argument("look_at: up parallel to view");
  right = right.normalized();
  Vec3 down = fwd.cross(right).normalized();
  Mat4 P{};
  double r[3][3] = {{right.x, right.y, right.z},
                    {down.x, down.y, down.z},
                    {fwd.x, fwd.y, fwd.z}};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) P[i][j] = r[i][j];
    P[i][3] = -(r[i][0] * eye.x + r[i][1] * eye.y + r[i][2] * eye.z);
  }
  P[3][3] = 1.0;
  return P;
}

}  // namespace gvs
