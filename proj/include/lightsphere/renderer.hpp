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
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "lightsphere/dataio.hpp"
#include "lightsphere/image.hpp"
#include "lightsphere/lightsphere.hpp"

namespace nls {

class CameraError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class RenderError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Pinhole camera inside the sphere. `intrinsics` are the fov_scale = 1
// intrinsics; the effective focal lengths are divided by fov_scale about
// the principal point while the resolution stays fixed.
struct VirtualCamera {
  CameraIntrinsics<double> intrinsics{1, 1, 0.5, 0.5};
  Mat3<double> rotation = Mat3<double>::identity();  // camera-to-world
  Vec3<double> translation{};
  int width = 1;
  int height = 1;
  double fov_scale = 1.0;

  static constexpr double kMaxTranslation = 0.99;

  void validate() const {
    if (width < 1 || height < 1) throw CameraError("camera resolution must be at least 1x1");
    if (!(intrinsics.fx > 0) || !(intrinsics.fy > 0) || !std::isfinite(intrinsics.fx) ||
        !std::isfinite(intrinsics.fy) || !std::isfinite(intrinsics.cx) || !std::isfinite(intrinsics.cy))
      throw CameraError("camera intrinsics must be finite with positive focal lengths");
    if (!(fov_scale >= 1.0) || !std::isfinite(fov_scale)) throw CameraError("fov_scale must be >= 1");
    const double t = norm(translation);
    if (!(t <= kMaxTranslation)) throw CameraError("camera translation must satisfy |T| <= 0.99");
    for (double v : rotation.m)
      if (!std::isfinite(v)) throw CameraError("camera rotation must be finite");
  }

  CameraIntrinsics<double> effective_intrinsics() const {
    return {intrinsics.fx / fov_scale, intrinsics.fy / fov_scale, intrinsics.cx, intrinsics.cy};
  }

  // Resized copy with intrinsics scaled to the new resolution.
  VirtualCamera resized(int w, int h) const {
    VirtualCamera c = *this;
    const double sx = static_cast<double>(w) / width, sy = static_cast<double>(h) / height;
    c.intrinsics = {intrinsics.fx * sx, intrinsics.fy * sy, intrinsics.cx * sx, intrinsics.cy * sy};
    c.width = w;
    c.height = h;
    return c;
  }
};

// The camera of a training frame at its refined pose.
inline VirtualCamera camera_for_frame(const LightSphereModel<float>& m, int n, double fov_scale = 1.0) {
  if (n < 0 || n >= m.num_frames()) throw CameraError("frame index out of range");
  const auto& f = m.frames[n];
  const PoseSample<float> p = m.pose_at(static_cast<float>(n));
  VirtualCamera c;
  c.intrinsics = f.intrinsics.template cast<double>();
  c.rotation = p.rotation.template cast<double>();
  c.translation = p.origin.template cast<double>();
  c.width = f.width;
  c.height = f.height;
  c.fov_scale = fov_scale;
  return c;
}

// Default viewpoint of a capture: the middle frame.
inline VirtualCamera reference_camera(const LightSphereModel<float>& m, double fov_scale = 1.0) {
  return camera_for_frame(m, m.num_frames() / 2, fov_scale);
}

// Camera looking along +z after yaw (about y), pitch (about x), roll
// (about z); field of view given for fov_scale = 1.
inline VirtualCamera look_camera(double yaw, double pitch, double roll, const Vec3<double>& t, int w, int h,
                                 double hfov_rad, double fov_scale = 1.0) {
  VirtualCamera c;
  const double f = 0.5 * w / std::tan(0.5 * hfov_rad);
  c.intrinsics = {f, f, 0.5 * w, 0.5 * h};
  c.rotation = yaw_pitch_roll(yaw, pitch, roll);
  c.translation = t;
  c.width = w;
  c.height = h;
  c.fov_scale = fov_scale;
  return c;
}

// Camera-matrix, tonemap, clamp. Disabled (or identity) leaves values
// unchanged before the final clamp.
struct ColorPipeline {
  std::array<double, 9> ccm{1, 0, 0, 0, 1, 0, 0, 0, 1};
  TonemapCurve tonemap = TonemapCurve::identity();
  bool enabled = false;

  void validate() const {
    if (!tonemap.monotone()) throw std::invalid_argument("tonemap curve must be nondecreasing");
  }

  void apply(float* rgb) const {
    if (enabled) {
      const double r = rgb[0], g = rgb[1], b = rgb[2];
      for (int k = 0; k < 3; ++k) {
        const double v = ccm[3 * k] * r + ccm[3 * k + 1] * g + ccm[3 * k + 2] * b;
        rgb[k] = static_cast<float>(tonemap(v));
      }
    }
    for (int k = 0; k < 3; ++k) rgb[k] = std::clamp(rgb[k], 0.0f, 1.0f);
  }

  nlohmann::json to_json() const { return {{"ccm", ccm}, {"tonemap", tonemap.points}, {"enabled", enabled}}; }

  static ColorPipeline from_json(const nlohmann::json& j) {
    ColorPipeline p;
    if (j.contains("ccm")) p.ccm = j.at("ccm").get<std::array<double, 9>>();
    if (j.contains("tonemap")) p.tonemap.points = j.at("tonemap").get<std::vector<std::array<double, 2>>>();
    p.enabled = j.value("enabled", true);
    p.validate();
    return p;
  }

  static ColorPipeline from_frame(const FrameMeta& f, bool enabled = true) {
    ColorPipeline p;
    p.ccm = f.ccm;
    p.tonemap = f.tonemap;
    p.enabled = enabled;
    return p;
  }
};

struct RenderOptions {
  AblationFlags flags{};
  ColorPipeline pipeline{};
  int threads = 0;  // 0 = hardware concurrency
};

namespace detail {

inline int render_threads(int requested) {
  if (requested > 0) return requested;
  return std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
}

// Runs fn(first_row, rows) over fixed strips; strip boundaries do not
// depend on the thread count, so output is identical for any count.
inline void for_each_strip(int height, int strip_rows, int threads, const std::function<void(int, int)>& fn) {
  const int strips = (height + strip_rows - 1) / strip_rows;
  threads = std::min(threads, strips);
  auto run = [&](int worker) {
    for (int s = worker; s < strips; s += threads) {
      const int y0 = s * strip_rows;
      fn(y0, std::min(strip_rows, height - y0));
    }
  };
  if (threads <= 1) {
    run(0);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (int w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      try {
        run(w);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline int strip_rows_for(int width) { return std::max(1, (1 << 14) / std::max(1, width)); }

}  // namespace detail

inline Image render_view(const LightSphereModel<float>& m, const VirtualCamera& cam, const RenderOptions& opt = {}) {
  cam.validate();
  opt.pipeline.validate();
  const CameraIntrinsics<double> k = cam.effective_intrinsics();
  const Mat3<float> rot = cam.rotation.template cast<float>();
  const Vec3<float> origin = cam.translation.template cast<float>();
  const int W = cam.width, H = cam.height;
  Image img(W, H, 3);
  detail::for_each_strip(H, detail::strip_rows_for(W), detail::render_threads(opt.threads), [&](int y0, int rows) {
    RayBatch<float> b;
    const std::size_t n = static_cast<std::size_t>(rows) * W;
    b.reserve(n);
    for (int y = y0; y < y0 + rows; ++y)
      for (int x = 0; x < W; ++x) {
        const Vec3<float> cam_dir = k.unproject({x + 0.5, y + 0.5}).template cast<float>();
        b.origin.push_back(origin);
        b.dir.push_back(normalized(rot * cam_dir));
        b.image_xy.push_back({static_cast<float>((x + 0.5) / W), static_cast<float>((y + 0.5) / H)});
        b.frame.push_back(0.0f);
        b.target.push_back({});
      }
    const ForwardResult<float> r = forward<float>(b, m, opt.flags);
    float* out = img.data.data() + static_cast<std::size_t>(y0) * W * 3;
    for (std::size_t i = 0; i < n; ++i) {
      float rgb[3] = {r.color(0, i), r.color(1, i), r.color(2, i)};
      opt.pipeline.apply(rgb);
      std::copy(rgb, rgb + 3, out + 3 * i);
    }
  });
  return img;
}

struct EquirectOptions {
  int width = 1024;
  int height = 512;
  // Static stitch by default; clear the flags and set reference_x to
  // include the offset and view-dependent branches for one image point.
  AblationFlags flags{true, true};
  ImageCoord<float> reference_x{0.5f, 0.5f};
  ColorPipeline pipeline{};
  int threads = 0;
};

// Longitude/latitude panorama of f_C seen from the sphere center, using
// the same convention as equirect_coord / equirect_direction.
inline Image render_equirect(const LightSphereModel<float>& m, const EquirectOptions& opt = {}) {
  if (opt.width < 1 || opt.height < 1) throw std::invalid_argument("panorama size must be positive");
  opt.pipeline.validate();
  const int W = opt.width, H = opt.height;
  Image img(W, H, 3);
  detail::for_each_strip(H, detail::strip_rows_for(W), detail::render_threads(opt.threads), [&](int y0, int rows) {
    RayBatch<float> b;
    const std::size_t n = static_cast<std::size_t>(rows) * W;
    b.reserve(n);
    for (int y = y0; y < y0 + rows; ++y)
      for (int x = 0; x < W; ++x) {
        b.origin.push_back({});
        b.dir.push_back(equirect_direction(x + 0.5, y + 0.5, W, H).template cast<float>());
        b.image_xy.push_back(opt.reference_x);
        b.frame.push_back(0.0f);
        b.target.push_back({});
      }
    const ForwardResult<float> r = forward<float>(b, m, opt.flags);
    float* out = img.data.data() + static_cast<std::size_t>(y0) * W * 3;
    for (std::size_t i = 0; i < n; ++i) {
      float rgb[3] = {r.color(0, i), r.color(1, i), r.color(2, i)};
      opt.pipeline.apply(rgb);
      std::copy(rgb, rgb + 3, out + 3 * i);
    }
  });
  return img;
}

// Count of training rays whose sphere crossing P^ lands in each panorama
// texel. `stride` subsamples the pixel grid of every frame.
struct CoverageMap {
  int width = 0, height = 0;
  std::vector<std::uint32_t> count;

  bool observed(int x, int y) const { return count[static_cast<std::size_t>(y) * width + x] >= 1; }
  double fraction() const {
    if (count.empty()) return 0;
    return static_cast<double>(std::count_if(count.begin(), count.end(), [](auto c) { return c >= 1; })) /
           count.size();
  }
  // Single-channel 0/1 image.
  Image mask() const {
    Image img(width, height, 1);
    for (std::size_t i = 0; i < count.size(); ++i) img.data[i] = count[i] >= 1 ? 1.0f : 0.0f;
    return img;
  }
};

inline CoverageMap coverage_map(const LightSphereModel<float>& m, int width, int height,
                                const std::vector<int>& frames = {}, int stride = 1) {
  if (width < 1 || height < 1 || stride < 1) throw std::invalid_argument("coverage_map: bad size or stride");
  CoverageMap c{width, height, std::vector<std::uint32_t>(static_cast<std::size_t>(width) * height, 0)};
  std::vector<int> use = frames;
  if (use.empty())
    for (int n = 0; n < m.num_frames(); ++n) use.push_back(n);
  for (int n : use) {
    const auto& f = m.frames[n];
    const auto k = f.intrinsics.template cast<double>();
    LensDistortion<double> dist;
    for (int i = 0; i < 5; ++i) dist.kappa[i] = f.distortion.kappa[i];
    const PoseSample<float> pose = m.pose_at(static_cast<float>(n));
    const Mat3<double> rot = pose.rotation.template cast<double>();
    const Vec3<double> o = pose.origin.template cast<double>();
    for (int y = stride / 2; y < f.height; y += stride)
      for (int x = stride / 2; x < f.width; x += stride) {
        ImageCoord<double> px{x + 0.5, y + 0.5};
        if (!dist.is_identity()) px = distort(px, dist, k);
        const auto hit = try_intersect_sphere(o, normalized(rot * k.unproject(px)), 1.0);
        if (!hit) continue;
        const auto uv = equirect_coord(hit->point, width, height);
        const int tx = std::clamp(static_cast<int>(std::floor(uv.u)), 0, width - 1);
        const int ty = std::clamp(static_cast<int>(std::floor(uv.v)), 0, height - 1);
        ++c.count[static_cast<std::size_t>(ty) * width + tx];
      }
  }
  return c;
}

// Camera path around the sphere center: translations on a horizontal
// circle of `radius`, yaw sweeping `yaw_span` radians about `base`.
inline std::vector<VirtualCamera> orbit_path(const VirtualCamera& base, int frames, double radius = 0.1,
                                             double yaw_span = 2 * M_PI) {
  if (frames < 1) throw std::invalid_argument("orbit needs at least one frame");
  std::vector<VirtualCamera> path;
  for (int i = 0; i < frames; ++i) {
    const double a = frames == 1 ? 0.0 : yaw_span * i / frames;
    VirtualCamera c = base;
    c.rotation = yaw_pitch_roll(a, 0.0, 0.0) * base.rotation;
    c.translation = base.translation + Vec3<double>{radius * std::sin(a), 0.0, radius * std::cos(a) - radius};
    path.push_back(c);
  }
  return path;
}

struct PathStats {
  std::vector<double> frame_ms;
  double total_s = 0;
  double fps() const { return total_s > 0 ? frame_ms.size() / total_s : 0.0; }
};

using FrameSink = std::function<void(int index, const Image& frame)>;

// Renders cameras in order and hands each frame to the sink. Sink
// failures surface as RenderError.
inline PathStats render_path(const LightSphereModel<float>& m, const std::vector<VirtualCamera>& path,
                             const FrameSink& sink, const RenderOptions& opt = {}) {
  if (path.empty()) throw std::invalid_argument("render_path: empty path");
  PathStats st;
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < path.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Image frame = render_view(m, path[i], opt);
    st.frame_ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    try {
      sink(static_cast<int>(i), frame);
    } catch (const std::exception& e) {
      throw RenderError("frame sink failed at frame " + std::to_string(i) + ": " + e.what());
    }
  }
  st.total_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return st;
}

// Frame-directory sink: frame_0000.png ... plus manifest.json written by
// finish(). 8- or 16-bit PNG.
class FrameDirectorySink {
 public:
  FrameDirectorySink(std::filesystem::path dir, int bit_depth = 8) : dir_(std::move(dir)), depth_(bit_depth) {
    std::filesystem::create_directories(dir_);
  }

  void operator()(int index, const Image& frame) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%04d.png", index);
    write_png((dir_ / name).string(), frame, depth_);
    files_.push_back(name);
    width_ = frame.width;
    height_ = frame.height;
  }

  void finish(const PathStats& st) const {
    nlohmann::json j{{"frames", files_},
                     {"width", width_},
                     {"height", height_},
                     {"bit_depth", depth_},
                     {"frame_ms", st.frame_ms},
                     {"fps", st.fps()}};
    std::ofstream f(dir_ / "manifest.json");
    if (!f) throw RenderError("cannot write " + (dir_ / "manifest.json").string());
    f << j.dump(1) << "\n";
  }

 private:
  std::filesystem::path dir_;
  int depth_;
  std::vector<std::string> files_;
  int width_ = 0, height_ = 0;
};

}  // namespace nls
