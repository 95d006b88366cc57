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

// Capture bundles: RAW development, on-disk layout, synthetic scenes and
// epoch-ordered ray sampling.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "lightsphere/geometry.hpp"
#include "lightsphere/image.hpp"
#include "lightsphere/lightsphere.hpp"
#include "lightsphere/random.hpp"

namespace nls {

using Json = nlohmann::json;

class IngestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Cfa { kBGGR, kRGGB, kGRBG, kGBRG };

inline std::string to_string(Cfa c) {
  switch (c) {
    case Cfa::kBGGR: return "BGGR";
    case Cfa::kRGGB: return "RGGB";
    case Cfa::kGRBG: return "GRBG";
    case Cfa::kGBRG: return "GBRG";
  }
  return "BGGR";
}

inline std::optional<Cfa> cfa_from_string(const std::string& s) {
  if (s == "BGGR") return Cfa::kBGGR;
  if (s == "RGGB") return Cfa::kRGGB;
  if (s == "GRBG") return Cfa::kGRBG;
  if (s == "GBRG") return Cfa::kGBRG;
  return std::nullopt;
}

// Calibration channel at a sensor site: 0 = R, 1 = G on even rows,
// 2 = G on odd rows, 3 = B.
inline int cfa_channel(Cfa cfa, int x, int y) {
  const std::string p = to_string(cfa);
  const char c = p[(y & 1) * 2 + (x & 1)];
  if (c == 'R') return 0;
  if (c == 'B') return 3;
  return (y & 1) ? 2 : 1;
}

// Low-resolution lens shading gains, four channels per node.
struct ShadeMap {
  int w = 0, h = 0;
  std::vector<float> data;  // (y * w + x) * 4 + channel

  static ShadeMap unit() { return {1, 1, {1, 1, 1, 1}}; }

  // Bilinear, node centers aligned with the centers of an out_w x out_h grid.
  float gain(int x, int y, int channel, int out_w, int out_h) const {
    const double sx = std::clamp((x + 0.5) * w / out_w - 0.5, 0.0, w - 1.0);
    const double sy = std::clamp((y + 0.5) * h / out_h - 0.5, 0.0, h - 1.0);
    const int x0 = static_cast<int>(sx), y0 = static_cast<int>(sy);
    const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    const double ax = sx - x0, ay = sy - y0;
    auto at = [&](int i, int j) { return static_cast<double>(data[(static_cast<std::size_t>(j) * w + i) * 4 + channel]); };
    const double v = (at(x0, y0) * (1 - ax) + at(x1, y0) * ax) * (1 - ay) + (at(x0, y1) * (1 - ax) + at(x1, y1) * ax) * ay;
    return static_cast<float>(v);
  }
};

struct TonemapCurve {
  std::vector<std::array<double, 2>> points;  // (in, out), sorted by in

  static TonemapCurve identity(int n = 256) {
    TonemapCurve t;
    for (int i = 0; i < n; ++i) t.points.push_back({i / (n - 1.0), i / (n - 1.0)});
    return t;
  }
  bool monotone() const {
    for (std::size_t i = 1; i < points.size(); ++i)
      if (points[i][0] < points[i - 1][0] || points[i][1] < points[i - 1][1]) return false;
    return true;
  }
  double operator()(double v) const {
    if (points.empty()) return v;
    if (v <= points.front()[0]) return points.front()[1];
    if (v >= points.back()[0]) return points.back()[1];
    auto it = std::upper_bound(points.begin(), points.end(), v,
                               [](double x, const std::array<double, 2>& p) { return x < p[0]; });
    const auto& b = *it;
    const auto& a = *(it - 1);
    const double span = b[0] - a[0];
    return span <= 0 ? b[1] : a[1] + (b[1] - a[1]) * (v - a[0]) / span;
  }
};

struct FrameMeta {
  std::string file;
  double timestamp_s = 0;
  CameraIntrinsics<double> intrinsics;
  Mat3<double> gyro = Mat3<double>::identity();
  std::optional<double> black_level;
  std::optional<double> white_level;
  std::optional<Cfa> cfa;
  std::optional<std::array<double, 4>> gains;
  std::optional<ShadeMap> shade_map;
  std::array<double, 9> ccm{1, 0, 0, 0, 1, 0, 0, 0, 1};
  TonemapCurve tonemap = TonemapCurve::identity();
  LensDistortion<double> distortion;
  double rs_skew_s = 0;
  double iso = 100;
  double exposure_s = 0.01;
};

struct FrameRecord {
  FrameMeta meta;
  Image linear;                      // 3 channels, linear RGB
  std::vector<std::uint16_t> mosaic;  // raw sensor samples (if undeveloped)
  int raw_w = 0, raw_h = 0;

  bool has_mosaic() const { return !mosaic.empty(); }
  int width() const { return linear.empty() ? raw_w : linear.width; }
  int height() const { return linear.empty() ? raw_h : linear.height; }
};

struct CameraInfo {
  std::string id = "synthetic";
  int sensor_w = 0;
  int sensor_h = 0;
  double frame_dt_s = 1.0 / 30.0;
};

struct CaptureBundle {
  CameraInfo camera;
  std::vector<FrameRecord> frames;

  std::size_t size() const { return frames.size(); }
  int width() const { return frames.empty() ? 0 : frames[0].width(); }
  int height() const { return frames.empty() ? 0 : frames[0].height(); }
};

// Black/white normalization, channel gains, inverse shading and bilinear
// demosaic, in that order.
inline Image raw_to_linear(const FrameRecord& f, const std::string& name = "frame") {
  const FrameMeta& m = f.meta;
  auto missing = [&](const char* field) {
    return IngestError(name + ": missing calibration field '" + field + "'");
  };
  if (!f.has_mosaic()) throw missing("mosaic");
  if (!m.black_level) throw missing("black_level");
  if (!m.white_level) throw missing("white_level");
  if (!m.cfa) throw missing("cfa");
  if (!m.gains) throw missing("gains");
  if (!m.shade_map) throw missing("shade_map");
  const double black = *m.black_level, white = *m.white_level;
  if (!(white > black)) throw IngestError(name + ": white_level must exceed black_level");
  const ShadeMap& shade = *m.shade_map;
  if (shade.w < 1 || shade.h < 1 || shade.data.size() != static_cast<std::size_t>(shade.w) * shade.h * 4)
    throw IngestError(name + ": shade_map data size does not match w*h*4");
  const int W = f.raw_w, H = f.raw_h;
  if (W < 2 || H < 2 || f.mosaic.size() != static_cast<std::size_t>(W) * H)
    throw IngestError(name + ": mosaic dimensions invalid");

  std::vector<float> v(static_cast<std::size_t>(W) * H);
  std::vector<std::uint8_t> color(v.size());  // 0 R, 1 G, 2 B
  const double range = white - black;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * W + x;
      const int ch = cfa_channel(*m.cfa, x, y);
      double s = std::clamp((static_cast<double>(f.mosaic[i]) - black) / range, 0.0, 1.0);
      s *= (*m.gains)[ch];
      s /= shade.gain(x, y, ch, W, H);
      v[i] = static_cast<float>(s);
      color[i] = static_cast<std::uint8_t>(ch == 0 ? 0 : (ch == 3 ? 2 : 1));
    }

  auto reflect = [](int i, int n) { return i < 0 ? -i : (i >= n ? 2 * n - 2 - i : i); };
  Image out(W, H, 3);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * W + x;
      double sum[3] = {0, 0, 0};
      int cnt[3] = {0, 0, 0};
      sum[color[i]] = v[i];
      cnt[color[i]] = 1;
      if (color[i] == 1) {
        // Green site: the two horizontal and two vertical neighbours carry
        // red and blue.
        for (auto [dx, dy] : {std::pair{-1, 0}, {1, 0}, {0, -1}, {0, 1}}) {
          const std::size_t j = static_cast<std::size_t>(reflect(y + dy, H)) * W + reflect(x + dx, W);
          sum[color[j]] += v[j];
          ++cnt[color[j]];
        }
      } else {
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            if (dx == 0 && dy == 0) continue;
            const std::size_t j = static_cast<std::size_t>(reflect(y + dy, H)) * W + reflect(x + dx, W);
            if (color[j] == color[i]) continue;
            sum[color[j]] += v[j];
            ++cnt[color[j]];
          }
      }
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = static_cast<float>(sum[c] / cnt[c]);
    }
  return out;
}

namespace detail {

inline const Json& require(const Json& j, const char* key, const std::string& ctx) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) throw IngestError(ctx + ": missing field '" + key + "'");
  return *it;
}

template <typename T>
T get_as(const Json& j, const char* key, const std::string& ctx) {
  try {
    return require(j, key, ctx).get<T>();
  } catch (const Json::exception&) {
    throw IngestError(ctx + ": field '" + key + "' has the wrong type");
  }
}

template <std::size_t N>
std::array<double, N> get_array(const Json& j, const char* key, const std::string& ctx) {
  const Json& a = require(j, key, ctx);
  if (!a.is_array() || a.size() != N)
    throw IngestError(ctx + ": field '" + key + "' must be an array of " + std::to_string(N) + " numbers");
  std::array<double, N> out{};
  for (std::size_t i = 0; i < N; ++i) {
    if (!a[i].is_number()) throw IngestError(ctx + ": field '" + key + "' must contain numbers");
    out[i] = a[i].get<double>();
  }
  return out;
}

// Nearest rotation (SVD polar factor).
inline Mat3<double> orthonormalize(const Mat3<double>& m) {
  Eigen::Matrix3d a;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) a(r, c) = m(r, c);
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d u = svd.matrixU();
  if ((u * svd.matrixV().transpose()).determinant() < 0) u.col(2) *= -1;
  const Eigen::Matrix3d r = u * svd.matrixV().transpose();
  Mat3<double> out;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out(i, j) = r(i, j);
  return out;
}

}  // namespace detail

inline double orthonormality_defect(const Mat3<double>& m) {
  return max_abs_entry(transpose(m) * m + (-1.0) * Mat3<double>::identity());
}

inline FrameMeta frame_meta_from_json(const Json& j, const std::string& ctx) {
  if (!j.is_object()) throw IngestError(ctx + ": metadata must be an object");
  FrameMeta m;
  m.file = detail::get_as<std::string>(j, "file", ctx);
  m.timestamp_s = detail::get_as<double>(j, "timestamp_s", ctx);
  const Json& k = detail::require(j, "intrinsics", ctx);
  m.intrinsics = {detail::get_as<double>(k, "fx", ctx + ".intrinsics"), detail::get_as<double>(k, "fy", ctx + ".intrinsics"),
                  detail::get_as<double>(k, "cx", ctx + ".intrinsics"), detail::get_as<double>(k, "cy", ctx + ".intrinsics")};
  try {
    m.intrinsics.validate();
  } catch (const GeometryError& e) {
    throw IngestError(ctx + ": " + e.what());
  }
  const auto g = detail::get_array<9>(j, "gyro", ctx);
  for (int i = 0; i < 9; ++i) m.gyro(i / 3, i % 3) = g[i];
  const double defect = orthonormality_defect(m.gyro);
  if (!(defect <= 1e-3))
    throw IngestError(ctx + ": gyro matrix is not orthonormal (defect " + std::to_string(defect) + ")");
  if (defect > 1e-12) m.gyro = detail::orthonormalize(m.gyro);
  if (j.contains("black_level")) m.black_level = detail::get_as<double>(j, "black_level", ctx);
  if (j.contains("white_level")) m.white_level = detail::get_as<double>(j, "white_level", ctx);
  if (j.contains("cfa")) {
    const auto s = detail::get_as<std::string>(j, "cfa", ctx);
    m.cfa = cfa_from_string(s);
    if (!m.cfa) throw IngestError(ctx + ": unknown cfa '" + s + "'");
  }
  if (j.contains("gains")) m.gains = detail::get_array<4>(j, "gains", ctx);
  if (j.contains("shade_map")) {
    const Json& s = j["shade_map"];
    ShadeMap sm;
    sm.w = detail::get_as<int>(s, "w", ctx + ".shade_map");
    sm.h = detail::get_as<int>(s, "h", ctx + ".shade_map");
    sm.data = detail::get_as<std::vector<float>>(s, "data", ctx + ".shade_map");
    if (sm.w < 1 || sm.h < 1 || sm.data.size() != static_cast<std::size_t>(sm.w) * sm.h * 4)
      throw IngestError(ctx + ": shade_map data size does not match w*h*4");
    m.shade_map = std::move(sm);
  }
  if (j.contains("ccm")) m.ccm = detail::get_array<9>(j, "ccm", ctx);
  if (j.contains("tonemap")) {
    const Json& t = j["tonemap"];
    if (!t.is_array() || t.size() < 2) throw IngestError(ctx + ": tonemap must be a list of [in,out] pairs");
    m.tonemap.points.clear();
    for (const auto& p : t) {
      if (!p.is_array() || p.size() != 2) throw IngestError(ctx + ": tonemap must be a list of [in,out] pairs");
      m.tonemap.points.push_back({p[0].get<double>(), p[1].get<double>()});
    }
    if (!m.tonemap.monotone()) throw IngestError(ctx + ": tonemap curve must be nondecreasing");
  }
  if (j.contains("distortion")) {
    const auto d = detail::get_array<5>(j, "distortion", ctx);
    for (int i = 0; i < 5; ++i) m.distortion.kappa[i] = d[i];
  }
  if (j.contains("rs_skew_s")) m.rs_skew_s = detail::get_as<double>(j, "rs_skew_s", ctx);
  if (j.contains("iso")) m.iso = detail::get_as<double>(j, "iso", ctx);
  if (j.contains("exposure_s")) m.exposure_s = detail::get_as<double>(j, "exposure_s", ctx);
  return m;
}

inline Json frame_meta_to_json(const FrameMeta& m) {
  Json j;
  j["file"] = m.file;
  j["timestamp_s"] = m.timestamp_s;
  j["intrinsics"] = {{"fx", m.intrinsics.fx}, {"fy", m.intrinsics.fy}, {"cx", m.intrinsics.cx}, {"cy", m.intrinsics.cy}};
  std::vector<double> g(9);
  for (int i = 0; i < 9; ++i) g[i] = m.gyro(i / 3, i % 3);
  j["gyro"] = g;
  if (m.black_level) j["black_level"] = *m.black_level;
  if (m.white_level) j["white_level"] = *m.white_level;
  if (m.cfa) j["cfa"] = to_string(*m.cfa);
  if (m.gains) j["gains"] = *m.gains;
  if (m.shade_map) j["shade_map"] = {{"w", m.shade_map->w}, {"h", m.shade_map->h}, {"data", m.shade_map->data}};
  j["ccm"] = m.ccm;
  j["tonemap"] = m.tonemap.points;
  j["distortion"] = m.distortion.kappa;
  j["rs_skew_s"] = m.rs_skew_s;
  j["iso"] = m.iso;
  j["exposure_s"] = m.exposure_s;
  return j;
}

namespace detail {

inline Json read_json(const std::filesystem::path& p) {
  std::ifstream f(p);
  if (!f) throw IngestError("cannot open " + p.string());
  try {
    return Json::parse(f);
  } catch (const Json::exception& e) {
    throw IngestError(p.filename().string() + ": invalid JSON (" + e.what() + ")");
  }
}

// Reads one frame's pixels: 3-channel files are linear RGB, 1-channel files
// are raw mosaics that get developed here.
inline void load_frame_pixels(FrameRecord& rec, const std::filesystem::path& dir, const std::string& ctx) {
  const auto path = dir / rec.meta.file;
  if (!std::filesystem::exists(path)) throw IngestError(ctx + ": missing image file '" + rec.meta.file + "'");
  DecodedPng png;
  try {
    png = read_png(path.string());
  } catch (const ImageError& e) {
    throw IngestError(ctx + ": " + e.what());
  }
  if (png.image.channels == 1) {
    rec.raw_w = png.image.width;
    rec.raw_h = png.image.height;
    rec.mosaic = std::move(png.raw);
    rec.linear = raw_to_linear(rec, ctx);
  } else if (png.image.channels == 3) {
    rec.linear = std::move(png.image);
  } else {
    throw IngestError(ctx + ": image must have 1 (mosaic) or 3 (linear RGB) channels");
  }
}

inline CameraInfo camera_from_json(const Json& c, const std::string& ctx) {
  CameraInfo cam;
  if (c.contains("id")) cam.id = c["id"].get<std::string>();
  cam.sensor_w = get_as<int>(c, "sensor_w", ctx);
  cam.sensor_h = get_as<int>(c, "sensor_h", ctx);
  cam.frame_dt_s = get_as<double>(c, "frame_dt_s", ctx);
  if (!(cam.frame_dt_s > 0)) throw IngestError(ctx + ": frame_dt_s must be positive");
  return cam;
}

inline void finalize_bundle(CaptureBundle& b) {
  if (b.frames.size() < 2) throw IngestError("bundle needs at least 2 frames, found " + std::to_string(b.frames.size()));
  std::stable_sort(b.frames.begin(), b.frames.end(),
                   [](const FrameRecord& a, const FrameRecord& c) { return a.meta.timestamp_s < c.meta.timestamp_s; });
  for (std::size_t i = 1; i < b.frames.size(); ++i)
    if (!(b.frames[i].meta.timestamp_s > b.frames[i - 1].meta.timestamp_s))
      throw IngestError(b.frames[i].meta.file + ": timestamps must be strictly increasing");
  for (const auto& f : b.frames)
    if (f.width() != b.width() || f.height() != b.height())
      throw IngestError(f.meta.file + ": frame size differs from the first frame");
}

}  // namespace detail

// Two layouts are accepted: a bundle directory with manifest.json, or a
// capture directory holding camera.json plus <stem>.json / <stem>.png pairs.
inline CaptureBundle load_bundle(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IngestError("not a directory: " + dir.string());
  CaptureBundle b;
  if (fs::exists(dir / "manifest.json")) {
    const Json j = detail::read_json(dir / "manifest.json");
    b.camera = detail::camera_from_json(detail::require(j, "camera", "manifest"), "manifest.camera");
    const Json& frames = detail::require(j, "frames", "manifest");
    if (!frames.is_array()) throw IngestError("manifest: 'frames' must be an array");
    for (std::size_t i = 0; i < frames.size(); ++i) {
      const std::string ctx = "frame " + std::to_string(i);
      FrameRecord rec;
      rec.meta = frame_meta_from_json(frames[i], ctx);
      detail::load_frame_pixels(rec, dir, ctx + " (" + rec.meta.file + ")");
      b.frames.push_back(std::move(rec));
    }
  } else if (fs::exists(dir / "camera.json")) {
    b.camera = detail::camera_from_json(detail::read_json(dir / "camera.json"), "camera.json");
    std::map<std::string, std::pair<bool, bool>> stems;  // stem -> (json, png)
    for (const auto& e : fs::directory_iterator(dir)) {
      if (!e.is_regular_file()) continue;
      const auto name = e.path().filename().string();
      if (name == "camera.json") continue;
      if (e.path().extension() == ".json") stems[e.path().stem().string()].first = true;
      if (e.path().extension() == ".png") stems[e.path().stem().string()].second = true;
    }
    for (const auto& [stem, has] : stems) {
      if (!has.first) throw IngestError(stem + ": missing metadata file " + stem + ".json");
      if (!has.second) throw IngestError(stem + ": missing image file " + stem + ".png");
    }
    for (const auto& [stem, has] : stems) {
      Json j = detail::read_json(dir / (stem + ".json"));
      if (j.is_object() && !j.contains("file")) j["file"] = stem + ".png";
      FrameRecord rec;
      rec.meta = frame_meta_from_json(j, stem);
      detail::load_frame_pixels(rec, dir, stem);
      b.frames.push_back(std::move(rec));
    }
  } else {
    throw IngestError(dir.string() + ": neither manifest.json nor camera.json found");
  }
  detail::finalize_bundle(b);
  if (b.camera.sensor_w <= 0) b.camera.sensor_w = b.width();
  if (b.camera.sensor_h <= 0) b.camera.sensor_h = b.height();
  return b;
}

// Writes frame_NNNN.png (16-bit linear RGB, clamped to [0,1]) and
// manifest.json. Output bytes depend only on the bundle contents.
inline void save_bundle(const CaptureBundle& b, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  Json frames = Json::array();
  for (std::size_t i = 0; i < b.frames.size(); ++i) {
    const FrameRecord& f = b.frames[i];
    if (f.linear.empty() || f.linear.channels != 3) throw IngestError("save_bundle: frame has no linear RGB image");
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%04zu.png", i);
    write_png((dir / name).string(), f.linear, 16);
    FrameMeta m = f.meta;
    m.file = name;
    frames.push_back(frame_meta_to_json(m));
  }
  Json j;
  j["version"] = 1;
  j["camera"] = {{"id", b.camera.id}, {"sensor_w", b.camera.sensor_w}, {"sensor_h", b.camera.sensor_h},
                 {"frame_dt_s", b.camera.frame_dt_s}};
  j["frames"] = std::move(frames);
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << j.dump(1) << "\n";
  if (!out) throw IngestError("cannot write manifest in " + dir.string());
}

// Box-filtered copy with intrinsics rescaled (pixel centers at +0.5).
inline CaptureBundle downsample_bundle(const CaptureBundle& b, int factor) {
  CaptureBundle out;
  out.camera = b.camera;
  for (const auto& f : b.frames) {
    FrameRecord r;
    r.meta = f.meta;
    r.linear = box_downsample(f.linear, factor);
    r.meta.intrinsics = {f.meta.intrinsics.fx / factor, f.meta.intrinsics.fy / factor, f.meta.intrinsics.cx / factor,
                         f.meta.intrinsics.cy / factor};
    out.frames.push_back(std::move(r));
  }
  return out;
}

inline std::vector<FrameCalib<float>> frame_calibration(const CaptureBundle& b) {
  std::vector<FrameCalib<float>> out;
  for (const auto& f : b.frames) {
    FrameCalib<double> c;
    c.intrinsics = f.meta.intrinsics;
    c.distortion = f.meta.distortion;
    c.gyro = f.meta.gyro;
    c.width = f.width();
    c.height = f.height();
    c.rs_skew_s = f.meta.rs_skew_s;
    out.push_back(c.cast<float>());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

// Equirectangular lookup: longitude atan2(x, z) across the width, latitude
// asin(y) down the height (y points down, as in image space).
inline ImageCoord<double> equirect_coord(const Vec3<double>& p, int w, int h) {
  const double lon = std::atan2(p.x, p.z);
  const double lat = std::asin(std::clamp(p.y / norm(p), -1.0, 1.0));
  return {(lon / (2 * M_PI) + 0.5) * w, (lat / M_PI + 0.5) * h};
}

inline Vec3<double> equirect_direction(double u, double v, int w, int h) {
  const double lon = (u / w - 0.5) * 2 * M_PI;
  const double lat = (v / h - 0.5) * M_PI;
  return {std::cos(lat) * std::sin(lon), std::sin(lat), std::cos(lat) * std::cos(lon)};
}

// Bilinear with horizontal wrap-around.
inline float sample_equirect(const Image& tex, const Vec3<double>& dir, int c) {
  const auto uv = equirect_coord(dir, tex.width, tex.height);
  double fx = uv.u - 0.5;
  fx -= std::floor(fx / tex.width) * tex.width;
  const double fy = std::clamp(uv.v - 0.5, 0.0, tex.height - 1.0);
  const int x0 = static_cast<int>(fx) % tex.width, x1 = (x0 + 1) % tex.width;
  const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, tex.height - 1);
  const double ax = fx - std::floor(fx), ay = fy - y0;
  const double top = tex.at(x0, y0, c) * (1 - ax) + tex.at(x1, y0, c) * ax;
  const double bot = tex.at(x0, y1, c) * (1 - ax) + tex.at(x1, y1, c) * ax;
  return static_cast<float>(top * (1 - ay) + bot * ay);
}

// Band-limited pattern: sinusoidal checkerboard plus smoothed value noise, values
// kept inside [0.08, 0.92] and quantized to 8 bits.
inline Image procedural_texture(int w, int h, std::uint64_t seed, double checker_cycles = 24, double noise_cells = 48) {
  std::mt19937_64 g(seed);
  std::uniform_real_distribution<double> u(0, 1);
  const int gw = static_cast<int>(noise_cells), gh = std::max(2, static_cast<int>(noise_cells / 2));
  std::vector<double> lattice(static_cast<std::size_t>(gw) * (gh + 1) * 3);
  for (auto& v : lattice) v = u(g);
  double phase[3];
  for (double& p : phase) p = u(g) * 2 * M_PI;
  auto noise = [&](double x, double y, int c) {
    // x wraps, smoothstep interpolation
    const double fx = x * gw, fy = y * gh;
    const int x0 = static_cast<int>(std::floor(fx)), y0 = std::min(static_cast<int>(std::floor(fy)), gh - 1);
    const double ax = fx - x0, ay = fy - y0;
    const double sx = ax * ax * (3 - 2 * ax), sy = ay * ay * (3 - 2 * ay);
    auto at = [&](int i, int j) { return lattice[((static_cast<std::size_t>(j) * gw) + ((i % gw + gw) % gw)) * 3 + c]; };
    return (at(x0, y0) * (1 - sx) + at(x0 + 1, y0) * sx) * (1 - sy) + (at(x0, y0 + 1) * (1 - sx) + at(x0 + 1, y0 + 1) * sx) * sy;
  };
  Image img(w, h, 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double fx = (x + 0.5) / w, fy = (y + 0.5) / h;
      const double soft = std::sin(2 * M_PI * checker_cycles * fx) * std::sin(M_PI * checker_cycles * fy);
      for (int c = 0; c < 3; ++c) {
        const double n = noise(fx, fy, c);
        const double stripe = 0.5 + 0.5 * std::sin(2 * M_PI * 3 * fx + phase[c] + 4 * fy);
        const double v = 0.5 + 0.18 * soft + 0.22 * (n - 0.5) * 2 + 0.08 * (stripe - 0.5);
        img.at(x, y, c) = std::round(std::clamp(v, 0.08, 0.92) * 255.0) / 255.0f;
      }
    }
  return img;
}

// Opaque textured rectangle: center + two orthogonal half-extent axes.
struct InnerPatch {
  Vec3<double> center;
  Vec3<double> axis_u;  // half-extent vector
  Vec3<double> axis_v;
  Image texture;

  // Ray parameter and texture coordinate in [0,1]^2, or nullopt on a miss.
  std::optional<std::pair<double, ImageCoord<double>>> intersect(const Vec3<double>& o, const Vec3<double>& d) const {
    const Vec3<double> n = cross(axis_u, axis_v);
    const double denom = dot(n, d);
    if (std::abs(denom) < 1e-12) return std::nullopt;
    const double t = dot(n, center - o) / denom;
    if (!(t > 0)) return std::nullopt;
    const Vec3<double> q = o + d * t - center;
    const double a = dot(q, axis_u) / squared_norm(axis_u);
    const double b = dot(q, axis_v) / squared_norm(axis_v);
    if (std::abs(a) > 1 || std::abs(b) > 1) return std::nullopt;
    return std::pair{t, ImageCoord<double>{(a + 1) / 2, (b + 1) / 2}};
  }
};

struct SyntheticSceneSpec {
  Image environment;  // equirectangular
  std::vector<InnerPatch> patches;
  std::vector<Mat3<double>> rotations;  // camera-to-world, one per frame
  std::vector<Vec3<double>> translations;
  int width = 128, height = 128;
  CameraIntrinsics<double> intrinsics{110, 110, 64, 64};
  double noise_sigma = 0;
  double gyro_noise_deg = 0;  // random-axis corruption of the recorded gyro
  std::uint64_t seed = 1;
  double frame_dt_s = 1.0 / 30.0;
};

struct SyntheticScene {
  CaptureBundle bundle;           // possibly noisy / corrupted
  std::vector<Image> clean;       // noiseless frames
  std::vector<Mat3<double>> true_rotation;
  std::vector<Vec3<double>> true_translation;
};

// Color seen along one world ray.
inline Vec3<double> trace_synthetic(const SyntheticSceneSpec& s, const Vec3<double>& o, const Vec3<double>& d) {
  double best = std::numeric_limits<double>::infinity();
  const InnerPatch* hit_patch = nullptr;
  ImageCoord<double> tc{};
  for (const auto& p : s.patches) {
    if (auto h = p.intersect(o, d); h && h->first < best) {
      best = h->first;
      hit_patch = &p;
      tc = h->second;
    }
  }
  Vec3<double> c;
  if (hit_patch) {
    for (int k = 0; k < 3; ++k)
      c[k] = sample_bilinear(hit_patch->texture, tc.u * hit_patch->texture.width, tc.v * hit_patch->texture.height, k);
    return c;
  }
  const auto hit = intersect_unit_sphere(Ray<double>{o, d});
  for (int k = 0; k < 3; ++k) c[k] = sample_equirect(s.environment, hit.point, k);
  return c;
}

inline SyntheticScene render_synthetic(const SyntheticSceneSpec& s) {
  if (s.rotations.size() != s.translations.size() || s.rotations.size() < 2)
    throw std::invalid_argument("synthetic scene needs >= 2 frames with matching rotations and translations");
  for (const auto& t : s.translations)
    if (norm(t) >= 1.0) throw std::invalid_argument("synthetic camera path leaves the unit sphere");
  std::mt19937_64 g(s.seed);
  std::normal_distribution<double> n01;
  SyntheticScene out;
  out.bundle.camera = {"synthetic", s.width, s.height, s.frame_dt_s};
  for (std::size_t n = 0; n < s.rotations.size(); ++n) {
    Image clean(s.width, s.height, 3);
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x) {
        const Vec3<double> cam = s.intrinsics.unproject(ImageCoord<double>{x + 0.5, y + 0.5});
        const Vec3<double> d = normalized(s.rotations[n] * cam);
        const Vec3<double> c = trace_synthetic(s, s.translations[n], d);
        for (int k = 0; k < 3; ++k) clean.at(x, y, k) = static_cast<float>(c[k]);
      }
    FrameRecord rec;
    rec.linear = clean;
    if (s.noise_sigma > 0)
      for (float& v : rec.linear.data) v = static_cast<float>(std::clamp(v + s.noise_sigma * n01(g), 0.0, 1.0));
    rec.meta.timestamp_s = n * s.frame_dt_s;
    rec.meta.intrinsics = s.intrinsics;
    rec.meta.gyro = s.rotations[n];
    if (s.gyro_noise_deg > 0) {
      const Vec3<double> axis{n01(g), n01(g), n01(g)};
      rec.meta.gyro = axis_angle_rotation(axis, s.gyro_noise_deg * M_PI / 180.0) * s.rotations[n];
    }
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%04zu.png", n);
    rec.meta.file = name;
    out.bundle.frames.push_back(std::move(rec));
    out.clean.push_back(std::move(clean));
    out.true_rotation.push_back(s.rotations[n]);
    out.true_translation.push_back(s.translations[n]);
  }
  return out;
}

// Yaw sweep (about +y) with a gentle pitch oscillation.
inline std::vector<Mat3<double>> sweep_rotations(int frames, double yaw_span_rad, double pitch_amp_rad = 0) {
  std::vector<Mat3<double>> out;
  for (int i = 0; i < frames; ++i) {
    const double a = frames == 1 ? 0.0 : static_cast<double>(i) / (frames - 1);
    out.push_back(yaw_pitch_roll((a - 0.5) * yaw_span_rad, pitch_amp_rad * std::sin(2 * M_PI * a), 0.0));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ray sampling

struct SamplerOptions {
  bool distortion = true;
  bool rolling_shutter = false;
};

// Walks successive random permutations of all (frame, pixel) samples of the
// selected frames; each permutation covers every pixel exactly once.
class BatchSampler {
 public:
  BatchSampler(const CaptureBundle& bundle, std::vector<int> frames, std::uint64_t seed, SamplerOptions opt = {})
      : bundle_(&bundle), frames_(std::move(frames)), rng_(seed), opt_(opt) {
    if (frames_.empty()) throw std::invalid_argument("sampler needs at least one frame");
    pixels_ = static_cast<std::size_t>(bundle.width()) * bundle.height();
    order_.resize(frames_.size() * pixels_);
    reshuffle();
  }

  std::size_t epoch_size() const { return order_.size(); }
  std::size_t remaining() const { return order_.size() - cursor_; }

  // At most batch_size rays; the last batch of a permutation may be short.
  RayBatch<float> next(std::size_t batch_size) {
    if (cursor_ == order_.size()) reshuffle();
    const std::size_t n = std::min(batch_size, remaining());
    RayBatch<float> b;
    b.posed = true;
    b.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
      const std::uint64_t id = order_[cursor_++];
      append_ray(b, static_cast<int>(id / pixels_), static_cast<int>(id % pixels_));
    }
    return b;
  }

  // Ray for one pixel of the bundle frame `frame`.
  static void make_ray(const CaptureBundle& bundle, int frame, int x, int y, const SamplerOptions& opt,
                       RayBatch<float>& b) {
    const FrameRecord& f = bundle.frames[frame];
    const int W = f.width(), H = f.height();
    ImageCoord<double> px{x + 0.5, y + 0.5};
    if (opt.distortion) px = distort(px, f.meta.distortion, f.meta.intrinsics);
    const Vec3<double> cam = f.meta.intrinsics.unproject(px);
    double fr = frame;
    if (opt.rolling_shutter && f.meta.rs_skew_s != 0)
      fr = rolling_shutter_frame(frame, y, f.meta.rs_skew_s, H, bundle.camera.frame_dt_s);
    b.image_xy.push_back({static_cast<float>((x + 0.5) / W), static_cast<float>((y + 0.5) / H)});
    b.frame.push_back(static_cast<float>(fr));
    b.cam_dir.push_back(cam.cast<float>());
    b.origin.push_back({});
    b.dir.push_back({});
    b.target.push_back({f.linear.at(x, y, 0), f.linear.at(x, y, 1), f.linear.at(x, y, 2)});
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::uint64_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }

  void append_ray(RayBatch<float>& b, int slot, int pixel) {
    const int W = bundle_->width();
    make_ray(*bundle_, frames_[slot], pixel % W, pixel / W, opt_, b);
  }

  const CaptureBundle* bundle_;
  std::vector<int> frames_;
  std::mt19937_64 rng_;
  SamplerOptions opt_;
  std::size_t pixels_ = 0;
  std::vector<std::uint64_t> order_;
  std::size_t cursor_ = 0;
};

inline RayBatch<float> sample_batch(BatchSampler& sampler, std::size_t batch_size) { return sampler.next(batch_size); }

// Every row/column of one frame, in scan order.
inline RayBatch<float> frame_rays(const CaptureBundle& bundle, int frame, const SamplerOptions& opt = {}) {
  RayBatch<float> b;
  b.posed = true;
  b.reserve(static_cast<std::size_t>(bundle.width()) * bundle.height());
  for (int y = 0; y < bundle.height(); ++y)
    for (int x = 0; x < bundle.width(); ++x) BatchSampler::make_ray(bundle, frame, x, y, opt, b);
  return b;
}

}  // namespace nls
