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
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lightsphere/encoding.hpp"
#include "lightsphere/geometry.hpp"
#include "lightsphere/nn.hpp"
#include "lightsphere/random.hpp"

namespace nls {

enum class OffsetVariant { kRotation, kDepth, kMultiplicative, kNone };

inline std::string to_string(OffsetVariant v) {
  switch (v) {
    case OffsetVariant::kRotation: return "rotation";
    case OffsetVariant::kDepth: return "depth";
    case OffsetVariant::kMultiplicative: return "multiplicative";
    case OffsetVariant::kNone: return "none";
  }
  return "none";
}

inline OffsetVariant offset_variant_from_string(const std::string& s) {
  if (s == "rotation") return OffsetVariant::kRotation;
  if (s == "depth") return OffsetVariant::kDepth;
  if (s == "multiplicative") return OffsetVariant::kMultiplicative;
  if (s == "none") return OffsetVariant::kNone;
  throw std::invalid_argument("unknown offset variant: " + s);
}

struct ModelConfig {
  HashGridConfig gamma1_pos{3, 8, 4, 1.61, 17, 2};
  HashGridConfig gamma1_view{2, 8, 4, 1.61, 17, 2};
  HashGridConfig gamma2{3, 15, 4, 1.61, 19, 2};
  int hidden_dim = 128;
  int num_layers = 5;
  int feature_dim = 32;
  double max_offset = 0.2;
  double eta_r = 1e-3;
  OffsetVariant offset_variant = OffsetVariant::kRotation;

  // 15-level 2^19 gamma2, 8-level gamma1, 5x128 MLPs.
  static ModelConfig full() { return {}; }

  // Sized for <= 256x256 inputs on a CPU.
  static ModelConfig desk() {
    ModelConfig c;
    c.gamma1_pos.table_size_log2 = 14;
    c.gamma1_view.table_size_log2 = 14;
    c.gamma2.levels = 11;
    c.gamma2.table_size_log2 = 18;
    return c;
  }

  // Small grids and narrow MLPs for unit tests and smoke runs.
  static ModelConfig tiny() {
    ModelConfig c;
    c.gamma1_pos = {3, 6, 4, 1.61, 12, 2};
    c.gamma1_view = {2, 6, 4, 1.61, 12, 2};
    c.gamma2 = {3, 8, 4, 1.61, 14, 2};
    c.hidden_dim = 32;
    c.num_layers = 3;
    return c;
  }

  static ModelConfig preset(const std::string& name) {
    if (name == "full") return full();
    if (name == "desk") return desk();
    if (name == "tiny") return tiny();
    throw std::invalid_argument("unknown model preset: " + name);
  }

  void validate() const {
    gamma1_pos.validate();
    gamma1_view.validate();
    gamma2.validate();
    if (gamma1_pos.dims != 3 || gamma2.dims != 3 || gamma1_view.dims != 2)
      throw std::invalid_argument("grid dims must be 3 (positions) and 2 (image coordinates)");
    if (gamma1_pos.levels != gamma1_view.levels)
      throw std::invalid_argument("gamma1 position and view grids share one level mask");
    if (!(max_offset > 0)) throw std::invalid_argument("max_offset must be positive");
  }

  int offset_dim() const { return offset_variant == OffsetVariant::kDepth ? 1 : 3; }

  MLPConfig h_r() const {
    return {gamma1_pos.output_dim() + gamma1_view.output_dim(), offset_dim(), hidden_dim, num_layers,
            Activation::kRelu, max_offset};
  }
  MLPConfig h_p() const {
    return {gamma2.output_dim(), feature_dim, hidden_dim, num_layers, Activation::kRelu, 0.0};
  }
  MLPConfig h_d() const {
    return {gamma1_view.output_dim(), feature_dim, hidden_dim, num_layers, Activation::kRelu, 0.0};
  }
  MLPConfig h_c() const { return {feature_dim, 3, feature_dim, 1, Activation::kNone, 0.0}; }
};

struct AblationFlags {
  bool zero_ray_offset = false;
  bool zero_view_color = false;
};

template <typename T>
struct FrameCalib {
  CameraIntrinsics<T> intrinsics;
  LensDistortion<T> distortion;
  Mat3<T> gyro = Mat3<T>::identity();
  int width = 0;
  int height = 0;
  T rs_skew_s{0};

  template <typename U>
  FrameCalib<U> cast() const {
    FrameCalib<U> out;
    out.intrinsics = intrinsics.template cast<U>();
    for (int i = 0; i < 5; ++i) out.distortion.kappa[i] = static_cast<U>(distortion.kappa[i]);
    out.gyro = gyro.template cast<U>();
    out.width = width;
    out.height = height;
    out.rs_skew_s = static_cast<U>(rs_skew_s);
    return out;
  }
};

// Interpolated camera pose at a (possibly fractional) frame index.
template <typename T>
struct PoseSample {
  int n0 = 0, n1 = 0;
  T w{0};  // weight of n1
  Vec3<T> origin;
  Mat3<T> rotation;
};

template <typename T>
class LightSphereModel {
 public:
  struct Blocks {
    std::size_t gamma1_pos, gamma1_view, gamma2, h_r, h_p, h_d, h_c, pose_t, pose_r;
  };

  ModelConfig cfg;
  std::vector<FrameCalib<T>> frames;
  ParamStore<T> params;
  Blocks blk{};
  LevelMask mask1{1};  // gamma1 (both grids)
  LevelMask mask2{1};  // gamma2

  LightSphereModel() = default;

  static LightSphereModel create(const ModelConfig& cfg, std::vector<FrameCalib<T>> frames, std::uint64_t seed) {
    cfg.validate();
    if (frames.empty()) throw std::invalid_argument("model needs at least one frame");
    LightSphereModel m;
    m.cfg = cfg;
    m.frames = std::move(frames);
    m.allocate();
    RandomSource rng(seed);
    for (std::size_t b : {m.blk.gamma1_pos, m.blk.gamma1_view, m.blk.gamma2})
      for (T& v : m.params[b].value) v = static_cast<T>(rng.uniform(-1e-4, 1e-4));
    mlp_init<T>(cfg.h_r(), m.params[m.blk.h_r].value, rng, FinalLayerInit::kZero);
    mlp_init<T>(cfg.h_p(), m.params[m.blk.h_p].value, rng);
    mlp_init<T>(cfg.h_d(), m.params[m.blk.h_d].value, rng, FinalLayerInit::kZero);
    mlp_init<T>(cfg.h_c(), m.params[m.blk.h_c].value, rng);
    return m;
  }

  // Parameter blocks in their declared (serialization) order.
  void allocate() {
    params = ParamStore<T>();
    blk.gamma1_pos = params.add("gamma1_pos", cfg.gamma1_pos.param_count());
    blk.gamma1_view = params.add("gamma1_view", cfg.gamma1_view.param_count());
    blk.gamma2 = params.add("gamma2", cfg.gamma2.param_count());
    blk.h_r = params.add("h_R", cfg.h_r().param_count());
    blk.h_p = params.add("h_P", cfg.h_p().param_count());
    blk.h_d = params.add("h_D", cfg.h_d().param_count());
    blk.h_c = params.add("h_C", cfg.h_c().param_count());
    blk.pose_t = params.add("pose_t", 3 * frames.size());
    blk.pose_r = params.add("pose_r", 3 * frames.size());
    mask1.active_levels = cfg.gamma1_pos.levels;
    mask2.active_levels = cfg.gamma2.levels;
  }

  int num_frames() const { return static_cast<int>(frames.size()); }

  Vec3<T> translation(int n) const {
    const auto& t = params[blk.pose_t].value;
    return {t[3 * n], t[3 * n + 1], t[3 * n + 2]};
  }
  Vec3<T> rotation_offset(int n) const {
    const auto& r = params[blk.pose_r].value;
    return {r[3 * n], r[3 * n + 1], r[3 * n + 2]};
  }
  void set_translation(int n, const Vec3<T>& v) {
    auto& t = params[blk.pose_t].value;
    t[3 * n] = v.x; t[3 * n + 1] = v.y; t[3 * n + 2] = v.z;
  }
  void set_rotation_offset(int n, const Vec3<T>& v) {
    auto& r = params[blk.pose_r].value;
    r[3 * n] = v.x; r[3 * n + 1] = v.y; r[3 * n + 2] = v.z;
  }

  FramePose<T> pose(int n) const {
    return {frames[n].gyro, translation(n), rotation_offset(n), static_cast<T>(cfg.eta_r)};
  }

  // Linear interpolation of T(n) and R(n) between integer frames, clamped
  // at the ends of the sequence.
  PoseSample<T> pose_at(T frame) const {
    PoseSample<T> s;
    const int last = num_frames() - 1;
    T f = std::clamp(frame, T(0), static_cast<T>(last));
    s.n0 = std::min(static_cast<int>(std::floor(f)), last);
    s.n1 = std::min(s.n0 + 1, last);
    s.w = s.n1 == s.n0 ? T(0) : f - static_cast<T>(s.n0);
    const Vec3<T> t0 = translation(s.n0);
    const Mat3<T> r0 = frame_rotation(pose(s.n0));
    if (s.w == T(0)) {
      s.origin = t0;
      s.rotation = r0;
      return s;
    }
    const Vec3<T> t1 = translation(s.n1);
    const Mat3<T> r1 = frame_rotation(pose(s.n1));
    s.origin = t0 * (T(1) - s.w) + t1 * s.w;
    s.rotation = (T(1) - s.w) * r0 + s.w * r1;
    return s;
  }

  void clamp_translations(T max_norm = T(0.99)) {
    for (int n = 0; n < num_frames(); ++n) {
      Vec3<T> t = translation(n);
      const T len = norm(t);
      if (len > max_norm) set_translation(n, t * (max_norm / len));
    }
  }

  std::span<const T> table(std::size_t block) const { return params[block].value; }

  template <typename U>
  LightSphereModel<U> cast() const {
    LightSphereModel<U> out;
    out.cfg = cfg;
    for (const auto& f : frames) out.frames.push_back(f.template cast<U>());
    out.params = params.template cast<U>();
    out.blk = {blk.gamma1_pos, blk.gamma1_view, blk.gamma2, blk.h_r, blk.h_p, blk.h_d, blk.h_c, blk.pose_t, blk.pose_r};
    out.mask1 = mask1;
    out.mask2 = mask2;
    return out;
  }
};

template <typename T>
struct RayBatch {
  std::vector<Vec3<T>> origin;
  std::vector<Vec3<T>> dir;
  std::vector<ImageCoord<T>> image_xy;
  std::vector<T> frame;
  std::vector<Vec3<T>> target;
  // Camera-frame direction K^{-1}[u,v,1] of each sample; when `posed`, the
  // forward pass rebuilds origin/dir from the model's pose track so that
  // gradients reach T_n and R_n.
  std::vector<Vec3<T>> cam_dir;
  bool posed = false;

  std::size_t size() const { return image_xy.size(); }

  void reserve(std::size_t n) {
    origin.reserve(n); dir.reserve(n); image_xy.reserve(n); frame.reserve(n);
    target.reserve(n); cam_dir.reserve(n);
  }
};

template <typename T>
struct RayState {
  PoseSample<T> pose;
  Vec3<T> D;       // unnormalized world direction (posed rays)
  Vec3<T> dir;     // unit direction D^
  Vec3<T> origin;  // perturbed origin
  Vec3<T> p_hat;   // first intersection
  Vec3<T> offset;  // f_R output (x only for the depth variant)
  Vec3<T> d_star;  // unnormalized corrected direction
  Vec3<T> dir_star;
  Vec3<T> p_star;  // corrected intersection on the unit sphere
  bool valid = false;
};

template <typename T>
struct ForwardTape {
  std::vector<RayState<T>> rays;
  MlpTape<T> h_r, h_p, h_d, h_c;
  bool offset_active = false;
  bool view_active = false;
  bool posed = false;
  bool recorded = false;
};

template <typename T>
struct ForwardResult {
  Matrix<T> color;  // 3 x B
  std::vector<std::uint8_t> valid;
  std::size_t dropped = 0;
};

namespace detail {

template <typename T>
void encode_column(const HashGridConfig& g, const GridLevels& gl, std::span<const T> table, const LevelMask& mask,
                   std::span<const T> p, Matrix<T>& out, Eigen::Index col, Eigen::Index row0) {
  encode<T>(g, gl, table, mask, p, std::span<T>(out.data() + col * out.rows() + row0, g.output_dim()));
}

template <typename T>
void encode_column(const HashGridConfig& g, std::span<const T> table, const LevelMask& mask,
                   std::span<const T> p, Matrix<T>& out, Eigen::Index col, Eigen::Index row0) {
  encode_column<T>(g, GridLevels(g), table, mask, p, out, col, row0);
}

template <typename T>
std::span<const T> as_span(const Vec3<T>& v) {
  return std::span<const T>(&v.x, 3);
}

template <typename T>
std::span<const T> as_span(const ImageCoord<T>& v) {
  return std::span<const T>(&v.u, 2);
}

}  // namespace detail

template <typename T>
bool offset_active(const LightSphereModel<T>& m, const AblationFlags& flags) {
  return m.cfg.offset_variant != OffsetVariant::kNone && !flags.zero_ray_offset;
}

// f_R(P^, X) for one point.
template <typename T>
Vec3<T> eval_ray_offset(const Vec3<T>& p_hat, const ImageCoord<T>& x, const LightSphereModel<T>& m,
                        const AblationFlags& flags = {}) {
  if (flags.zero_ray_offset || m.cfg.offset_variant == OffsetVariant::kNone) return {};
  const auto& g1 = m.cfg.gamma1_pos;
  const auto& gv = m.cfg.gamma1_view;
  Matrix<T> in(g1.output_dim() + gv.output_dim(), 1);
  detail::encode_column(g1, m.table(m.blk.gamma1_pos), m.mask1, detail::as_span(p_hat), in, 0, 0);
  detail::encode_column(gv, m.table(m.blk.gamma1_view), m.mask1, detail::as_span(x), in, 0, g1.output_dim());
  Matrix<T> out = mlp_forward<T>(m.cfg.h_r(), m.params[m.blk.h_r].value, in);
  if (m.cfg.offset_dim() == 1) return {out(0, 0), T(0), T(0)};
  return {out(0, 0), out(1, 0), out(2, 0)};
}

// f_C(P^*, X) for one point.
template <typename T>
Vec3<T> eval_color(const Vec3<T>& p_star, const ImageCoord<T>& x, const LightSphereModel<T>& m,
                   const AblationFlags& flags = {}) {
  Matrix<T> enc2(m.cfg.gamma2.output_dim(), 1);
  detail::encode_column(m.cfg.gamma2, m.table(m.blk.gamma2), m.mask2, detail::as_span(p_star), enc2, 0, 0);
  Matrix<T> feat = mlp_forward<T>(m.cfg.h_p(), m.params[m.blk.h_p].value, enc2);
  if (!flags.zero_view_color) {
    Matrix<T> encv(m.cfg.gamma1_view.output_dim(), 1);
    detail::encode_column(m.cfg.gamma1_view, m.table(m.blk.gamma1_view), m.mask1, detail::as_span(x), encv, 0, 0);
    feat += mlp_forward<T>(m.cfg.h_d(), m.params[m.blk.h_d].value, encv);
  }
  Matrix<T> c = mlp_forward<T>(m.cfg.h_c(), m.params[m.blk.h_c].value, feat);
  return {c(0, 0), c(1, 0), c(2, 0)};
}

// Rays -> corrected sphere points -> colors. eta_p > 0 (with an rng)
// perturbs ray origins. Pass a tape to enable backward().
template <typename T>
ForwardResult<T> forward(const RayBatch<T>& batch, const LightSphereModel<T>& m, const AblationFlags& flags,
                         T eta_p = T(0), RandomSource* rng = nullptr, ForwardTape<T>* tape = nullptr) {
  const std::size_t B = batch.size();
  const ModelConfig& cfg = m.cfg;
  const GridLevels gl_pos(cfg.gamma1_pos), gl_view(cfg.gamma1_view), gl2(cfg.gamma2);
  std::vector<RayState<T>> local;
  std::vector<RayState<T>>& rays = tape ? tape->rays : local;
  rays.assign(B, RayState<T>{});
  if (tape) tape->recorded = false;

  for (std::size_t i = 0; i < B; ++i) {
    RayState<T>& s = rays[i];
    if (batch.posed) {
      s.pose = m.pose_at(batch.frame[i]);
      s.D = s.pose.rotation * batch.cam_dir[i];
      s.dir = normalized(s.D);
      s.origin = s.pose.origin;
    } else {
      s.dir = batch.dir[i];
      s.origin = batch.origin[i];
    }
    if (eta_p > T(0) && rng) s.origin = perturb_origin(s.origin, eta_p, *rng);
    auto hit = try_intersect_sphere(s.origin, s.dir, T(1));
    if (!hit) continue;
    s.p_hat = hit->point;
    s.valid = true;
  }

  const bool use_offset = offset_active(m, flags);
  if (use_offset) {
    const auto& g1 = cfg.gamma1_pos;
    const auto& gv = cfg.gamma1_view;
    Matrix<T> in(g1.output_dim() + gv.output_dim(), static_cast<Eigen::Index>(B));
    for (std::size_t i = 0; i < B; ++i) {
      detail::encode_column(g1, gl_pos, m.table(m.blk.gamma1_pos), m.mask1, detail::as_span(rays[i].p_hat), in,
                            static_cast<Eigen::Index>(i), 0);
      detail::encode_column(gv, gl_view, m.table(m.blk.gamma1_view), m.mask1, detail::as_span(batch.image_xy[i]), in,
                            static_cast<Eigen::Index>(i), g1.output_dim());
    }
    Matrix<T> off = mlp_forward<T>(cfg.h_r(), m.params[m.blk.h_r].value, in, tape ? &tape->h_r : nullptr);
    for (std::size_t i = 0; i < B; ++i) {
      RayState<T>& s = rays[i];
      const Eigen::Index c = static_cast<Eigen::Index>(i);
      s.offset = cfg.offset_dim() == 1 ? Vec3<T>{off(0, c), T(0), T(0)} : Vec3<T>{off(0, c), off(1, c), off(2, c)};
      if (!s.valid) continue;
      switch (cfg.offset_variant) {
        case OffsetVariant::kRotation: {
          s.d_star = small_angle_rot(s.offset) * s.dir;
          s.dir_star = apply_offset_rotation(s.dir, s.offset);
          auto hit = try_intersect_sphere(s.origin, s.dir_star, T(1));
          if (!hit) { s.valid = false; break; }
          s.p_star = hit->point;
          break;
        }
        case OffsetVariant::kMultiplicative: {
          auto d = try_apply_offset_multiplicative(s.dir, s.offset);
          if (!d) { s.valid = false; break; }
          s.d_star = hadamard(Vec3<T>{T(1) + s.offset.x, T(1) + s.offset.y, T(1) + s.offset.z}, s.dir);
          s.dir_star = *d;
          auto hit = try_intersect_sphere(s.origin, s.dir_star, T(1));
          if (!hit) { s.valid = false; break; }
          s.p_star = hit->point;
          break;
        }
        case OffsetVariant::kDepth: {
          auto hit = try_intersect_sphere(s.origin, s.dir, T(1) + s.offset.x);
          if (!hit) { s.valid = false; break; }
          s.dir_star = s.dir;
          s.p_star = hit->point;
          break;
        }
        case OffsetVariant::kNone:
          break;
      }
    }
  } else {
    for (auto& s : rays) {
      s.offset = {};
      s.dir_star = s.dir;
      s.p_star = s.p_hat;
    }
  }

  Matrix<T> enc2(cfg.gamma2.output_dim(), static_cast<Eigen::Index>(B));
  for (std::size_t i = 0; i < B; ++i)
    detail::encode_column(cfg.gamma2, gl2, m.table(m.blk.gamma2), m.mask2, detail::as_span(rays[i].p_star), enc2,
                          static_cast<Eigen::Index>(i), 0);
  Matrix<T> feat = mlp_forward<T>(cfg.h_p(), m.params[m.blk.h_p].value, enc2, tape ? &tape->h_p : nullptr);
  const bool use_view = !flags.zero_view_color;
  if (use_view) {
    Matrix<T> encv(cfg.gamma1_view.output_dim(), static_cast<Eigen::Index>(B));
    for (std::size_t i = 0; i < B; ++i)
      detail::encode_column(cfg.gamma1_view, gl_view, m.table(m.blk.gamma1_view), m.mask1,
                            detail::as_span(batch.image_xy[i]), encv, static_cast<Eigen::Index>(i), 0);
    feat += mlp_forward<T>(cfg.h_d(), m.params[m.blk.h_d].value, encv, tape ? &tape->h_d : nullptr);
  }
  ForwardResult<T> result;
  result.color = mlp_forward<T>(cfg.h_c(), m.params[m.blk.h_c].value, feat, tape ? &tape->h_c : nullptr);
  result.valid.resize(B);
  for (std::size_t i = 0; i < B; ++i) {
    result.valid[i] = rays[i].valid ? 1 : 0;
    if (!rays[i].valid) {
      ++result.dropped;
      result.color.col(static_cast<Eigen::Index>(i)).setZero();
    }
  }
  if (tape) {
    tape->offset_active = use_offset;
    tape->view_active = use_view;
    tape->posed = batch.posed;
    tape->recorded = true;
  }
  return result;
}

// Reverse pass of forward(): accumulates dL/dtheta for every trainable
// block into `grads` given dL/dcolor (3 x B). Frozen blocks receive nothing.
template <typename T>
void backward(const RayBatch<T>& batch, const LightSphereModel<T>& m, const ForwardTape<T>& tape,
              const Matrix<T>& dcolor, GradBuffers<T>& grads) {
  if (!tape.recorded) throw TapeError("backward called before a recorded forward pass");
  const std::size_t B = batch.size();
  if (tape.rays.size() != B || dcolor.cols() != static_cast<Eigen::Index>(B) || dcolor.rows() != 3)
    throw DimensionError("backward: gradient shape does not match the recorded batch");
  const ModelConfig& cfg = m.cfg;
  const GridLevels gl_pos(cfg.gamma1_pos), gl_view(cfg.gamma1_view), gl2(cfg.gamma2);
  auto grad_of = [&](std::size_t block) -> std::span<T> {
    if (!m.params[block].trainable) return {};
    return grads[block];
  };

  Matrix<T> dc = dcolor;
  for (std::size_t i = 0; i < B; ++i)
    if (!tape.rays[i].valid) dc.col(static_cast<Eigen::Index>(i)).setZero();

  Matrix<T> dfeat = mlp_backward<T>(cfg.h_c(), m.params[m.blk.h_c].value, tape.h_c, dc, grad_of(m.blk.h_c));
  Matrix<T> denc2 = mlp_backward<T>(cfg.h_p(), m.params[m.blk.h_p].value, tape.h_p, dfeat, grad_of(m.blk.h_p));
  if (tape.view_active) {
    const bool need_table = m.params[m.blk.gamma1_view].trainable;
    Matrix<T> dencv = mlp_backward<T>(cfg.h_d(), m.params[m.blk.h_d].value, tape.h_d, dfeat, grad_of(m.blk.h_d),
                                      need_table);
    if (need_table) {
      for (std::size_t i = 0; i < B; ++i) {
        const Eigen::Index c = static_cast<Eigen::Index>(i);
        encode_backward<T>(cfg.gamma1_view, gl_view, m.table(m.blk.gamma1_view), m.mask1,
                           detail::as_span(batch.image_xy[i]),
                           std::span<const T>(dencv.data() + c * dencv.rows(), dencv.rows()),
                           grads[m.blk.gamma1_view]);
      }
    }
  }

  std::vector<Vec3<T>> d_origin(B), d_dir(B), d_offset(B), d_phat(B);
  for (std::size_t i = 0; i < B; ++i) {
    const RayState<T>& s = tape.rays[i];
    if (!s.valid) continue;
    const Eigen::Index c = static_cast<Eigen::Index>(i);
    Vec3<T> dp_star{};
    encode_backward<T>(cfg.gamma2, gl2, m.table(m.blk.gamma2), m.mask2, detail::as_span(s.p_star),
                       std::span<const T>(denc2.data() + c * denc2.rows(), denc2.rows()),
                       grad_of(m.blk.gamma2), std::span<T>(&dp_star.x, 3));
    if (!tape.offset_active) {
      d_phat[i] = dp_star;
      continue;
    }
    switch (cfg.offset_variant) {
      case OffsetVariant::kRotation:
      case OffsetVariant::kMultiplicative: {
        const auto sg = vjp::sphere_point(s.origin, s.dir_star, T(1), dp_star);
        d_origin[i] += sg.origin;
        const Vec3<T> dd_star = vjp::normalize(s.d_star, sg.dir);
        if (cfg.offset_variant == OffsetVariant::kRotation) {
          Vec3<T> doff, ddir;
          vjp::small_angle_apply(s.offset, s.dir, dd_star, doff, ddir);
          d_offset[i] = doff;
          d_dir[i] += ddir;
        } else {
          d_offset[i] = hadamard(s.dir, dd_star);
          d_dir[i] += hadamard(Vec3<T>{T(1) + s.offset.x, T(1) + s.offset.y, T(1) + s.offset.z}, dd_star);
        }
        break;
      }
      case OffsetVariant::kDepth: {
        const T radius = T(1) + s.offset.x;
        const auto sg = vjp::sphere_point(s.origin, s.dir, radius * radius, dp_star);
        d_origin[i] += sg.origin;
        d_dir[i] += sg.dir;
        d_offset[i] = {sg.radius_sq * T(2) * radius, T(0), T(0)};
        break;
      }
      case OffsetVariant::kNone:
        break;
    }
  }

  if (tape.offset_active) {
    const MLPConfig hr = cfg.h_r();
    Matrix<T> doff(hr.out_dim, static_cast<Eigen::Index>(B));
    for (std::size_t i = 0; i < B; ++i)
      for (int k = 0; k < hr.out_dim; ++k) doff(k, static_cast<Eigen::Index>(i)) = d_offset[i][k];
    Matrix<T> din = mlp_backward<T>(hr, m.params[m.blk.h_r].value, tape.h_r, doff, grad_of(m.blk.h_r));
    const int e1 = cfg.gamma1_pos.output_dim();
    const int ev = cfg.gamma1_view.output_dim();
    for (std::size_t i = 0; i < B; ++i) {
      const RayState<T>& s = tape.rays[i];
      if (!s.valid) continue;
      const Eigen::Index c = static_cast<Eigen::Index>(i);
      const T* col = din.data() + c * din.rows();
      Vec3<T> dp{};
      encode_backward<T>(cfg.gamma1_pos, gl_pos, m.table(m.blk.gamma1_pos), m.mask1, detail::as_span(s.p_hat),
                         std::span<const T>(col, e1), grad_of(m.blk.gamma1_pos), std::span<T>(&dp.x, 3));
      d_phat[i] += dp;
      if (m.params[m.blk.gamma1_view].trainable)
        encode_backward<T>(cfg.gamma1_view, gl_view, m.table(m.blk.gamma1_view), m.mask1,
                           detail::as_span(batch.image_xy[i]), std::span<const T>(col + e1, ev),
                           grads[m.blk.gamma1_view]);
    }
  }

  if (!tape.posed) return;
  const bool t_trainable = m.params[m.blk.pose_t].trainable;
  const bool r_trainable = m.params[m.blk.pose_r].trainable;
  if (!t_trainable && !r_trainable) return;
  const T eta_r = static_cast<T>(cfg.eta_r);
  for (std::size_t i = 0; i < B; ++i) {
    const RayState<T>& s = tape.rays[i];
    if (!s.valid) continue;
    const auto sg = vjp::sphere_point(s.origin, s.dir, T(1), d_phat[i]);
    const Vec3<T> dO = d_origin[i] + sg.origin;
    const Vec3<T> dD = vjp::normalize(s.D, d_dir[i] + sg.dir);
    const int ns[2] = {s.pose.n0, s.pose.n1};
    const T ws[2] = {T(1) - s.pose.w, s.pose.w};
    for (int k = 0; k < 2; ++k) {
      if (ws[k] == T(0)) continue;
      const int n = ns[k];
      if (t_trainable) {
        T* gt = grads[m.blk.pose_t].data() + 3 * n;
        gt[0] += ws[k] * dO.x; gt[1] += ws[k] * dO.y; gt[2] += ws[k] * dO.z;
      }
      if (r_trainable) {
        // D = sum_k w_k (g_k + eta r_k x g_k), g_k = G_k c
        const Vec3<T> g = m.frames[n].gyro * batch.cam_dir[i];
        const Vec3<T> dr = cross(g, dD) * (ws[k] * eta_r);
        T* gr = grads[m.blk.pose_r].data() + 3 * n;
        gr[0] += dr.x; gr[1] += dr.y; gr[2] += dr.z;
      }
    }
  }
}

// Sets unobserved frames' learned offsets by interpolating the nearest
// trained neighbours, so held-out frames render at a consistent pose.
template <typename T>
void interpolate_untrained_poses(LightSphereModel<T>& m, const std::vector<bool>& trained) {
  const int N = m.num_frames();
  for (int n = 0; n < N; ++n) {
    if (trained[n]) continue;
    int lo = n - 1, hi = n + 1;
    while (lo >= 0 && !trained[lo]) --lo;
    while (hi < N && !trained[hi]) ++hi;
    if (lo < 0 && hi >= N) continue;
    if (lo < 0) lo = hi;
    if (hi >= N) hi = lo;
    const T w = hi == lo ? T(0) : static_cast<T>(n - lo) / static_cast<T>(hi - lo);
    m.set_translation(n, m.translation(lo) * (T(1) - w) + m.translation(hi) * w);
    m.set_rotation_offset(n, m.rotation_offset(lo) * (T(1) - w) + m.rotation_offset(hi) * w);
  }
}

}  // namespace nls
