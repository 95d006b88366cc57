// Copyright 2026 The Lightsphere Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>

#include "lightsphere/random.hpp"

namespace nls {

enum class GeometryErrorKind {
  kInvalidIntrinsics,
  kOriginOutsideSphere,
  kDegenerateRadius,
  kDegenerateDirection,
};

class GeometryError : public std::runtime_error {
 public:
  GeometryError(GeometryErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  GeometryErrorKind kind() const noexcept { return kind_; }

 private:
  GeometryErrorKind kind_;
};

template <typename T>
struct Vec3 {
  T x{0}, y{0}, z{0};

  constexpr T& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
  constexpr const T& operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }

  template <typename U>
  constexpr Vec3<U> cast() const {
    return {static_cast<U>(x), static_cast<U>(y), static_cast<U>(z)};
  }

  constexpr Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
  constexpr Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
  constexpr Vec3& operator*=(T s) { x *= s; y *= s; z *= s; return *this; }
  friend constexpr bool operator==(const Vec3&, const Vec3&) = default;
};

template <typename T> constexpr Vec3<T> operator+(Vec3<T> a, const Vec3<T>& b) { return a += b; }
template <typename T> constexpr Vec3<T> operator-(Vec3<T> a, const Vec3<T>& b) { return a -= b; }
template <typename T> constexpr Vec3<T> operator-(const Vec3<T>& a) { return {-a.x, -a.y, -a.z}; }
template <typename T> constexpr Vec3<T> operator*(Vec3<T> a, T s) { return a *= s; }
template <typename T> constexpr Vec3<T> operator*(T s, Vec3<T> a) { return a *= s; }

template <typename T>
constexpr T dot(const Vec3<T>& a, const Vec3<T>& b) {
  return a.x * b.x + a.y * b.y + a.z * b.z;
}

template <typename T>
constexpr Vec3<T> cross(const Vec3<T>& a, const Vec3<T>& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

template <typename T>
constexpr Vec3<T> hadamard(const Vec3<T>& a, const Vec3<T>& b) {
  return {a.x * b.x, a.y * b.y, a.z * b.z};
}

template <typename T> T squared_norm(const Vec3<T>& a) { return dot(a, a); }
template <typename T> T norm(const Vec3<T>& a) { return std::sqrt(dot(a, a)); }

template <typename T>
Vec3<T> normalized(const Vec3<T>& a) {
  return a * (T(1) / norm(a));
}

// Row-major 3x3.
template <typename T>
struct Mat3 {
  std::array<T, 9> m{};

  static constexpr Mat3 identity() { return {{T(1), 0, 0, 0, T(1), 0, 0, 0, T(1)}}; }

  constexpr T& operator()(int r, int c) { return m[r * 3 + c]; }
  constexpr const T& operator()(int r, int c) const { return m[r * 3 + c]; }

  template <typename U>
  constexpr Mat3<U> cast() const {
    Mat3<U> out;
    for (int i = 0; i < 9; ++i) out.m[i] = static_cast<U>(m[i]);
    return out;
  }

  constexpr Vec3<T> row(int r) const { return {m[r * 3], m[r * 3 + 1], m[r * 3 + 2]}; }
  friend constexpr bool operator==(const Mat3&, const Mat3&) = default;
};

template <typename T>
constexpr Vec3<T> operator*(const Mat3<T>& a, const Vec3<T>& v) {
  return {a(0, 0) * v.x + a(0, 1) * v.y + a(0, 2) * v.z,
          a(1, 0) * v.x + a(1, 1) * v.y + a(1, 2) * v.z,
          a(2, 0) * v.x + a(2, 1) * v.y + a(2, 2) * v.z};
}

template <typename T>
constexpr Mat3<T> operator*(const Mat3<T>& a, const Mat3<T>& b) {
  Mat3<T> out;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      out(r, c) = a(r, 0) * b(0, c) + a(r, 1) * b(1, c) + a(r, 2) * b(2, c);
  return out;
}

template <typename T>
constexpr Mat3<T> operator+(const Mat3<T>& a, const Mat3<T>& b) {
  Mat3<T> out;
  for (int i = 0; i < 9; ++i) out.m[i] = a.m[i] + b.m[i];
  return out;
}

template <typename T>
constexpr Mat3<T> operator*(T s, const Mat3<T>& a) {
  Mat3<T> out;
  for (int i = 0; i < 9; ++i) out.m[i] = s * a.m[i];
  return out;
}

template <typename T>
constexpr Mat3<T> transpose(const Mat3<T>& a) {
  Mat3<T> out;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out(r, c) = a(c, r);
  return out;
}

template <typename T>
constexpr Vec3<T> transpose_mul(const Mat3<T>& a, const Vec3<T>& v) {
  return {a(0, 0) * v.x + a(1, 0) * v.y + a(2, 0) * v.z,
          a(0, 1) * v.x + a(1, 1) * v.y + a(2, 1) * v.z,
          a(0, 2) * v.x + a(1, 2) * v.y + a(2, 2) * v.z};
}

template <typename T>
T max_abs_entry(const Mat3<T>& a) {
  T out = 0;
  for (T v : a.m) out = std::max(out, std::abs(v));
  return out;
}

// Proper rotation about a unit axis (Rodrigues); used for ground-truth
// camera paths and gyro corruption, never inside the model.
template <typename T>
Mat3<T> axis_angle_rotation(const Vec3<T>& axis, T angle) {
  const Vec3<T> k = normalized(axis);
  const T c = std::cos(angle), s = std::sin(angle), C = T(1) - c;
  return {{c + k.x * k.x * C, k.x * k.y * C - k.z * s, k.x * k.z * C + k.y * s,
           k.y * k.x * C + k.z * s, c + k.y * k.y * C, k.y * k.z * C - k.x * s,
           k.z * k.x * C - k.y * s, k.z * k.y * C + k.x * s, c + k.z * k.z * C}};
}

// Yaw about +y, then pitch about +x, then roll about +z (camera looks down +z).
template <typename T>
Mat3<T> yaw_pitch_roll(T yaw, T pitch, T roll) {
  return axis_angle_rotation(Vec3<T>{0, 1, 0}, yaw) *
         axis_angle_rotation(Vec3<T>{1, 0, 0}, pitch) *
         axis_angle_rotation(Vec3<T>{0, 0, 1}, roll);
}

// Angle of the relative rotation a * b^T, in radians.
template <typename T>
T rotation_angle_between(const Mat3<T>& a, const Mat3<T>& b) {
  const Mat3<T> rel = a * transpose(b);
  const T c = (rel(0, 0) + rel(1, 1) + rel(2, 2) - T(1)) / T(2);
  return std::acos(std::clamp(c, T(-1), T(1)));
}

template <typename T>
struct ImageCoord {
  T u{0}, v{0};
  friend constexpr bool operator==(const ImageCoord&, const ImageCoord&) = default;
};

// Normalized-image intrinsics: u, v in [0,1] map through K^{-1}[u,v,1].
template <typename T>
struct CameraIntrinsics {
  T fx{1}, fy{1}, cx{0.5}, cy{0.5};

  void validate() const {
    if (!(fx > 0) || !(fy > 0) || !std::isfinite(fx) || !std::isfinite(fy)) {
      throw GeometryError(GeometryErrorKind::kInvalidIntrinsics,
                          "invalid intrinsics: focal lengths must be positive and finite");
    }
  }

  Vec3<T> unproject(const ImageCoord<T>& x) const {
    return {(x.u - cx) / fx, (x.v - cy) / fy, T(1)};
  }

  template <typename U>
  CameraIntrinsics<U> cast() const {
    return {static_cast<U>(fx), static_cast<U>(fy), static_cast<U>(cx), static_cast<U>(cy)};
  }
};

template <typename T>
struct LensDistortion {
  std::array<T, 5> kappa{};

  bool is_identity() const {
    for (T k : kappa)
      if (k != T(0)) return false;
    return true;
  }
};

template <typename T>
struct FramePose {
  Mat3<T> gyro = Mat3<T>::identity();
  Vec3<T> t_offset{};
  Vec3<T> r_offset{};
  T eta_r{static_cast<T>(1e-3)};
};

template <typename T>
struct Ray {
  Vec3<T> origin{};
  Vec3<T> dir{0, 0, 1};
  ImageCoord<T> image_xy{};
  T frame{0};
};

template <typename T>
struct SphereHit {
  T t{0};
  Vec3<T> point{};
};

// I + skew(r), laid out exactly as the linearized rotation matrix.
template <typename T>
constexpr Mat3<T> small_angle_rot(const Vec3<T>& r) {
  return {{T(1), -r.z, r.y,
           r.z, T(1), -r.x,
           -r.y, r.x, T(1)}};
}

template <typename T>
Mat3<T> frame_rotation(const FramePose<T>& pose) {
  return small_angle_rot(pose.r_offset * pose.eta_r) * pose.gyro;
}

template <typename T>
Ray<T> backproject(const ImageCoord<T>& x, const CameraIntrinsics<T>& k, const FramePose<T>& pose) {
  k.validate();
  Ray<T> ray;
  ray.origin = pose.t_offset;
  ray.dir = normalized(frame_rotation(pose) * k.unproject(x));
  ray.image_xy = x;
  return ray;
}

// Far root of |O + tD|^2 = radius^2 for a unit direction; nullopt when the
// origin is not strictly inside the sphere.
template <typename T>
std::optional<SphereHit<T>> try_intersect_sphere(const Vec3<T>& origin, const Vec3<T>& dir, T radius) {
  const T b = dot(origin, dir);
  const T c = squared_norm(origin) - radius * radius;
  if (!(c < T(0))) return std::nullopt;
  const T t = -b + std::sqrt(b * b - c);
  return SphereHit<T>{t, normalized(origin + dir * t)};
}

template <typename T>
SphereHit<T> intersect_unit_sphere(const Ray<T>& ray) {
  auto hit = try_intersect_sphere(ray.origin, ray.dir, T(1));
  if (!hit) {
    throw GeometryError(GeometryErrorKind::kOriginOutsideSphere,
                        "ray origin is not inside the unit sphere (pose clamp failure)");
  }
  return *hit;
}

template <typename T>
Vec3<T> apply_offset_rotation(const Vec3<T>& dir, const Vec3<T>& off) {
  if (off == Vec3<T>{}) return dir;
  return normalized(small_angle_rot(off) * dir);
}

// Hit on the sphere of radius 1 + delta; the point is projected back onto
// the unit sphere before it is used as an encoding input.
template <typename T>
SphereHit<T> apply_offset_depth(const Ray<T>& ray, T delta) {
  auto hit = try_intersect_sphere(ray.origin, ray.dir, T(1) + delta);
  if (!hit) {
    throw GeometryError(GeometryErrorKind::kDegenerateRadius,
                        "offset sphere radius does not enclose the ray origin");
  }
  return *hit;
}

template <typename T>
std::optional<Vec3<T>> try_apply_offset_multiplicative(const Vec3<T>& dir, const Vec3<T>& m) {
  if (m == Vec3<T>{}) return dir;
  const Vec3<T> scaled{(T(1) + m.x) * dir.x, (T(1) + m.y) * dir.y, (T(1) + m.z) * dir.z};
  const T n = norm(scaled);
  if (!(n > T(0)) || !std::isfinite(n)) return std::nullopt;
  return scaled * (T(1) / n);
}

template <typename T>
Vec3<T> apply_offset_multiplicative(const Vec3<T>& dir, const Vec3<T>& m) {
  auto out = try_apply_offset_multiplicative(dir, m);
  if (!out) {
    throw GeometryError(GeometryErrorKind::kDegenerateDirection,
                        "multiplicative offset collapsed the ray direction");
  }
  return *out;
}

// Polynomial radial distortion in normalized camera coordinates,
// (u - cx) / fx and (v - cy) / fy; returns pixel coordinates.
template <typename T>
ImageCoord<T> distort(const ImageCoord<T>& xy, const LensDistortion<T>& d, const CameraIntrinsics<T>& k) {
  const T x = (xy.u - k.cx) / k.fx, y = (xy.v - k.cy) / k.fy;
  const T r2 = x * x + y * y;
  const auto& c = d.kappa;
  const T factor = T(1) + r2 * (c[0] + r2 * (c[1] + r2 * (c[2] + r2 * (c[3] + r2 * c[4]))));
  return {k.cx + k.fx * x * factor, k.cy + k.fy * y * factor};
}

// Fractional frame index at which a given sensor row was exposed.
inline double rolling_shutter_frame(int n, int row, double skew_s, int height, double frame_dt_s) {
  return static_cast<double>(n) + (static_cast<double>(row) * skew_s / height) / frame_dt_s;
}

template <typename T>
Vec3<T> perturb_origin(const Vec3<T>& origin, T eta_p, RandomSource& rng) {
  if (eta_p == T(0)) return origin;
  Vec3<T> out = origin;
  for (int i = 0; i < 3; ++i) out[i] += eta_p * static_cast<T>(rng.normal());
  return out;
}

// Vector-Jacobian products for the reverse pass through the ray geometry.
namespace vjp {

// y = x / |x|: returns dL/dx given dL/dy.
template <typename T>
Vec3<T> normalize(const Vec3<T>& x, const Vec3<T>& dy) {
  const T inv = T(1) / norm(x);
  const Vec3<T> y = x * inv;
  return (dy - y * dot(y, dy)) * inv;
}

template <typename T>
struct SphereGrad {
  Vec3<T> origin;
  Vec3<T> dir;
  T radius_sq{0};
};

// point = normalize(O + t D), t the far root for radius^2 = radius_sq.
template <typename T>
SphereGrad<T> sphere_point(const Vec3<T>& origin, const Vec3<T>& dir, T radius_sq, const Vec3<T>& dpoint) {
  const T b = dot(origin, dir);
  const T s = std::sqrt(b * b - (squared_norm(origin) - radius_sq));
  const T t = -b + s;
  const Vec3<T> p = origin + dir * t;
  const Vec3<T> dp = normalize(p, dpoint);
  const T dt = dot(dp, dir);
  // dt/dO = -D + (b D - O)/s, dt/dD = -O + b O / s, dt/d(radius_sq) = 1/(2s)
  SphereGrad<T> g;
  g.origin = dp + (dir * (-T(1)) + (dir * b - origin) * (T(1) / s)) * dt;
  g.dir = dp * t + (origin * (-T(1)) + origin * (b / s)) * dt;
  g.radius_sq = dt / (T(2) * s);
  return g;
}

// y = (I + skew(r)) x.
template <typename T>
void small_angle_apply(const Vec3<T>& r, const Vec3<T>& x, const Vec3<T>& dy, Vec3<T>& dr, Vec3<T>& dx) {
  dr = cross(x, dy);
  dx = dy - cross(r, dy);
}

}  // namespace vjp

}  // namespace nls
