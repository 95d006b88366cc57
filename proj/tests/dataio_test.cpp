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

#include "lightsphere/dataio.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

namespace nls {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("nls_dataio_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

FrameRecord raw_frame(int w, int h, std::uint16_t value, Cfa cfa = Cfa::kBGGR) {
  FrameRecord f;
  f.raw_w = w;
  f.raw_h = h;
  f.mosaic.assign(static_cast<std::size_t>(w) * h, value);
  f.meta.black_level = 64;
  f.meta.white_level = 1023;
  f.meta.cfa = cfa;
  f.meta.gains = {1, 1, 1, 1};
  f.meta.shade_map = ShadeMap::unit();
  return f;
}

TEST(RawToLinear, BlackLevelGivesZero) {
  const Image img = raw_to_linear(raw_frame(8, 6, 64));
  for (float v : img.data) EXPECT_EQ(v, 0.0f);
}

TEST(RawToLinear, WhiteLevelGivesOne) {
  for (Cfa c : {Cfa::kBGGR, Cfa::kRGGB, Cfa::kGRBG, Cfa::kGBRG}) {
    const Image img = raw_to_linear(raw_frame(8, 6, 1023, c));
    for (float v : img.data) EXPECT_EQ(v, 1.0f);
  }
}

TEST(RawToLinear, KnownGainConstantMosaic) {
  auto f = raw_frame(10, 8, 500);
  f.meta.gains = {2, 1, 1, 1};
  const Image img = raw_to_linear(f);
  const double base = (500.0 - 64.0) / (1023.0 - 64.0);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 10; ++x) {
      EXPECT_EQ(img.at(x, y, 0), static_cast<float>(2 * base));
      EXPECT_EQ(img.at(x, y, 1), static_cast<float>(base));
      EXPECT_EQ(img.at(x, y, 2), static_cast<float>(base));
    }
}

TEST(RawToLinear, InverseShadeMapDivides) {
  auto f = raw_frame(6, 6, 1023);
  f.meta.shade_map = ShadeMap{1, 1, {2, 4, 4, 8}};
  const Image img = raw_to_linear(f);
  EXPECT_EQ(img.at(3, 3, 0), 0.5f);
  EXPECT_EQ(img.at(3, 3, 1), 0.25f);
  EXPECT_EQ(img.at(3, 3, 2), 0.125f);
}

TEST(RawToLinear, ConstantMosaicDemosaicsToConstant) {
  std::mt19937 g(1);
  for (Cfa c : {Cfa::kBGGR, Cfa::kRGGB, Cfa::kGRBG, Cfa::kGBRG})
    for (int trial = 0; trial < 5; ++trial) {
      const auto v = static_cast<std::uint16_t>(64 + g() % 960);
      const Image img = raw_to_linear(raw_frame(9, 7, v, c));
      for (float x : img.data) EXPECT_EQ(x, img.data[0]);
    }
}

TEST(RawToLinear, CfaPhaseAndBilinearDemosaic) {
  // RGGB: red sites at (even x, even y).
  auto f = raw_frame(8, 8, 64, Cfa::kRGGB);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      if (x % 2 == 0 && y % 2 == 0) f.mosaic[y * 8 + x] = 1023;
  const Image img = raw_to_linear(f);
  EXPECT_EQ(img.at(2, 2, 0), 1.0f);  // red site
  EXPECT_EQ(img.at(3, 2, 0), 1.0f);  // green site: 2 red neighbours, both 1
  EXPECT_EQ(img.at(3, 3, 0), 1.0f);  // blue site: 4 diagonal reds
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      EXPECT_EQ(img.at(x, y, 1), 0.0f);
      EXPECT_EQ(img.at(x, y, 2), 0.0f);
    }
  // Green sites on even/odd rows map to the two green calibration slots.
  EXPECT_EQ(cfa_channel(Cfa::kRGGB, 1, 0), 1);
  EXPECT_EQ(cfa_channel(Cfa::kRGGB, 0, 1), 2);
  EXPECT_EQ(cfa_channel(Cfa::kBGGR, 0, 0), 3);
  EXPECT_EQ(cfa_channel(Cfa::kBGGR, 1, 1), 0);
}

TEST(RawToLinear, MonotoneAndBoundedByMaxGain) {
  std::mt19937 g(7);
  auto f = raw_frame(12, 10, 0);
  f.meta.gains = {1.8, 1.0, 1.1, 2.3};
  f.meta.shade_map = ShadeMap{2, 2, {1, 1, 1, 1, 1.2f, 1.1f, 1.1f, 1.3f, 1.5f, 1.2f, 1.2f, 1.4f, 1, 1, 1, 1}};
  for (auto& v : f.mosaic) v = static_cast<std::uint16_t>(g() % 1100);
  const Image a = raw_to_linear(f);
  for (float v : a.data) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 2.3f);
  }
  for (auto& v : f.mosaic) v = static_cast<std::uint16_t>(std::min(1100, v + 17));
  const Image b = raw_to_linear(f);
  for (std::size_t i = 0; i < a.data.size(); ++i) EXPECT_GE(b.data[i], a.data[i]);
}

TEST(RawToLinear, MissingCalibrationNamesField) {
  auto f = raw_frame(4, 4, 100);
  f.meta.white_level.reset();
  try {
    raw_to_linear(f, "frame_0003");
    FAIL();
  } catch (const IngestError& e) {
    EXPECT_NE(std::string(e.what()).find("white_level"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("frame_0003"), std::string::npos);
  }
}

Json meta_json(const std::string& file, double t) {
  FrameMeta m;
  m.file = file;
  m.timestamp_s = t;
  m.intrinsics = {100, 100, 4, 3};
  m.black_level = 64;
  m.white_level = 1023;
  m.cfa = Cfa::kBGGR;
  m.gains = {1, 1, 1, 1};
  m.shade_map = ShadeMap::unit();
  return frame_meta_to_json(m);
}

void write_raw_capture(const fs::path& dir, int frames, int w, int h) {
  std::ofstream(dir / "camera.json") << Json{{"sensor_w", 4032}, {"sensor_h", 3024}, {"frame_dt_s", 1.0 / 30}}.dump();
  for (int n = 0; n < frames; ++n) {
    char stem[32];
    std::snprintf(stem, sizeof(stem), "raw_%02d", n);
    std::vector<std::uint16_t> mosaic(static_cast<std::size_t>(w) * h);
    for (std::size_t i = 0; i < mosaic.size(); ++i) mosaic[i] = static_cast<std::uint16_t>(64 + (i * 37 + n * 11) % 960);
    detail::write_file((dir / (std::string(stem) + ".png")).string(), encode_png_samples(mosaic, w, h, 1, 16));
    Json j = meta_json(std::string(stem) + ".png", 0.5 - 0.1 * n);  // reverse time order on disk
    std::ofstream(dir / (std::string(stem) + ".json")) << j.dump();
  }
}

TEST(LoadBundle, RealCaptureShapedFixtureNormalizes) {
  const auto dir = scratch_dir("capture");
  write_raw_capture(dir, 3, 8, 6);
  const CaptureBundle b = load_bundle(dir);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b.camera.sensor_w, 4032);
  EXPECT_EQ(b.camera.sensor_h, 3024);
  // Sorted by timestamp: raw_02 comes first.
  EXPECT_EQ(b.frames[0].meta.file, "raw_02.png");
  const auto& f = b.frames[0];
  ASSERT_EQ(f.raw_w, 8);
  // Blue site (0,0) in BGGR keeps its own sample in the blue channel.
  const double hand = (static_cast<double>(64 + (0 * 37 + 2 * 11) % 960) - 64.0) / 959.0;
  EXPECT_EQ(f.linear.at(0, 0, 2), static_cast<float>(hand));
  for (float v : f.linear.data) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(LoadBundle, MissingMetadataNamesFrame) {
  const auto dir = scratch_dir("missing_meta");
  write_raw_capture(dir, 3, 8, 6);
  fs::remove(dir / "raw_01.json");
  try {
    load_bundle(dir);
    FAIL();
  } catch (const IngestError& e) {
    EXPECT_NE(std::string(e.what()).find("raw_01"), std::string::npos) << e.what();
  }
}

TEST(LoadBundle, MissingRequiredFieldNamed) {
  const auto dir = scratch_dir("missing_field");
  write_raw_capture(dir, 2, 8, 6);
  Json j = detail::read_json(dir / "raw_01.json");
  j.erase("black_level");
  std::ofstream(dir / "raw_01.json", std::ios::trunc) << j.dump();
  try {
    load_bundle(dir);
    FAIL();
  } catch (const IngestError& e) {
    EXPECT_NE(std::string(e.what()).find("black_level"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("raw_01"), std::string::npos) << e.what();
  }
}

TEST(LoadBundle, GyroToleranceAndOrthonormalization) {
  const auto dir = scratch_dir("gyro");
  write_raw_capture(dir, 2, 8, 6);
  Json j = detail::read_json(dir / "raw_00.json");
  j["gyro"] = {1.0004, 0, 0, 0, 1, 0, 0, 0, 1};
  std::ofstream(dir / "raw_00.json", std::ios::trunc) << j.dump();
  const auto b = load_bundle(dir);
  EXPECT_LT(orthonormality_defect(b.frames[1].meta.gyro), 1e-12);
  j["gyro"] = {1.01, 0, 0, 0, 1, 0, 0, 0, 1};
  std::ofstream(dir / "raw_00.json", std::ios::trunc) << j.dump();
  EXPECT_THROW(load_bundle(dir), IngestError);
}

SyntheticSceneSpec small_spec(int frames, int size = 32) {
  SyntheticSceneSpec s;
  s.environment = procedural_texture(512, 256, 3);
  s.rotations = sweep_rotations(frames, 0.6);
  s.translations.assign(frames, Vec3<double>{});
  s.width = s.height = size;
  s.intrinsics = {size * 0.9, size * 0.9, size / 2.0, size / 2.0};
  return s;
}

TEST(Bundle, SaveLoadRoundTripAndDeterminism) {
  const auto scene = render_synthetic(small_spec(2));
  const auto d1 = scratch_dir("save1"), d2 = scratch_dir("save2");
  save_bundle(scene.bundle, d1);
  save_bundle(scene.bundle, d2);
  EXPECT_EQ(read_bytes(d1 / "manifest.json"), read_bytes(d2 / "manifest.json"));
  EXPECT_EQ(read_bytes(d1 / "frame_0001.png"), read_bytes(d2 / "frame_0001.png"));
  const auto b = load_bundle(d1);
  ASSERT_EQ(b.size(), 2u);
  for (std::size_t i = 0; i < b.frames[1].linear.data.size(); ++i)
    EXPECT_NEAR(b.frames[1].linear.data[i], scene.bundle.frames[1].linear.data[i], 0.5 / 65535 + 1e-7);
  // Re-saving the loaded bundle is byte-identical.
  const auto d3 = scratch_dir("save3");
  save_bundle(b, d3);
  EXPECT_EQ(read_bytes(d1 / "manifest.json"), read_bytes(d3 / "manifest.json"));
  EXPECT_EQ(read_bytes(d1 / "frame_0000.png"), read_bytes(d3 / "frame_0000.png"));
}

TEST(Bundle, ManifestMissingImageNamesFrame) {
  const auto scene = render_synthetic(small_spec(3));
  const auto dir = scratch_dir("manifest_missing");
  save_bundle(scene.bundle, dir);
  fs::remove(dir / "frame_0002.png");
  try {
    load_bundle(dir);
    FAIL();
  } catch (const IngestError& e) {
    EXPECT_NE(std::string(e.what()).find("frame_0002"), std::string::npos) << e.what();
  }
}

TEST(Bundle, TooFewFramesRejected) {
  auto scene = render_synthetic(small_spec(2));
  scene.bundle.frames.pop_back();
  const auto dir = scratch_dir("one_frame");
  save_bundle(scene.bundle, dir);
  EXPECT_THROW(load_bundle(dir), IngestError);
}

TEST(Bundle, DownsampleScalesIntrinsics) {
  const auto scene = render_synthetic(small_spec(2));
  const auto d = downsample_bundle(scene.bundle, 2);
  EXPECT_EQ(d.width(), 16);
  EXPECT_DOUBLE_EQ(d.frames[0].meta.intrinsics.fx, scene.bundle.frames[0].meta.intrinsics.fx / 2);
  EXPECT_DOUBLE_EQ(d.frames[0].meta.intrinsics.cx, 8.0);
  EXPECT_FLOAT_EQ(d.frames[0].linear.at(0, 0, 1),
                  (scene.bundle.frames[0].linear.at(0, 0, 1) + scene.bundle.frames[0].linear.at(1, 0, 1) +
                   scene.bundle.frames[0].linear.at(0, 1, 1) + scene.bundle.frames[0].linear.at(1, 1, 1)) / 4);
}

TEST(Synthetic, EquirectMappingInverts) {
  std::mt19937_64 g(1);
  std::normal_distribution<double> n;
  for (int i = 0; i < 100; ++i) {
    const auto d = normalized(Vec3<double>{n(g), n(g), n(g)});
    const auto uv = equirect_coord(d, 400, 200);
    const auto back = equirect_direction(uv.u, uv.v, 400, 200);
    EXPECT_LT(norm(back - d), 1e-12);
  }
}

TEST(Synthetic, IdentityPathFramesIdentical) {
  auto s = small_spec(3);
  s.rotations.assign(3, Mat3<double>::identity());
  const auto scene = render_synthetic(s);
  EXPECT_EQ(scene.bundle.frames[0].linear, scene.bundle.frames[1].linear);
  EXPECT_EQ(scene.bundle.frames[0].linear, scene.bundle.frames[2].linear);
}

TEST(Synthetic, PureRotationIsPhotometricallyConsistent) {
  auto s = small_spec(2, 96);
  s.rotations = {yaw_pitch_roll(0.0, 0.0, 0.0), yaw_pitch_roll(0.15, 0.05, 0.02)};
  const auto scene = render_synthetic(s);
  const Image& a = scene.bundle.frames[0].linear;
  const Image& b = scene.bundle.frames[1].linear;
  double worst = 0;
  int compared = 0;
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x) {
      const Vec3<double> d = s.rotations[0] * s.intrinsics.unproject(ImageCoord<double>{x + 0.5, y + 0.5});
      const Vec3<double> c = transpose(s.rotations[1]) * d;
      if (c.z <= 0) continue;
      const double u = s.intrinsics.fx * c.x / c.z + s.intrinsics.cx;
      const double v = s.intrinsics.fy * c.y / c.z + s.intrinsics.cy;
      if (u < 1 || v < 1 || u > s.width - 1 || v > s.height - 1) continue;
      for (int k = 0; k < 3; ++k) worst = std::max(worst, std::abs(double(sample_bilinear(b, u, v, k)) - a.at(x, y, k)));
      ++compared;
    }
  EXPECT_GT(compared, s.width * s.height / 2);
  EXPECT_LE(worst, 2.0 / 255.0);
}

TEST(Synthetic, PatchParallaxMatchesTriangulation) {
  SyntheticSceneSpec s;
  s.environment = Image(64, 32, 3, 0.1f);
  // White patch with a bright 3x3-texel blob at its center.
  InnerPatch p;
  p.center = {0.05, -0.02, 0.5};
  p.axis_u = {0.1, 0, 0};
  p.axis_v = {0, 0.1, 0};
  p.texture = Image(33, 33, 3, 0.3f);
  for (int y = 15; y <= 17; ++y)
    for (int x = 15; x <= 17; ++x)
      for (int c = 0; c < 3; ++c) p.texture.at(x, y, c) = 1.0f;
  s.patches.push_back(p);
  s.width = s.height = 128;
  s.intrinsics = {120, 120, 64, 64};
  s.rotations.assign(2, Mat3<double>::identity());
  s.translations = {{0, 0, 0}, {0.12, 0.03, 0}};
  const auto scene = render_synthetic(s);
  for (int n = 0; n < 2; ++n) {
    const Image& img = scene.bundle.frames[n].linear;
    double sx = 0, sy = 0, sw = 0;
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        const double w = std::max(0.0, img.at(x, y, 0) - 0.5);
        sx += w * (x + 0.5);
        sy += w * (y + 0.5);
        sw += w;
      }
    ASSERT_GT(sw, 0);
    const Vec3<double> rel = p.center - s.translations[n];
    const double u = s.intrinsics.fx * rel.x / rel.z + s.intrinsics.cx;
    const double v = s.intrinsics.fy * rel.y / rel.z + s.intrinsics.cy;
    EXPECT_NEAR(sx / sw, u, 0.5) << n;
    EXPECT_NEAR(sy / sw, v, 0.5) << n;
  }
}

TEST(Synthetic, NoiseAndGyroCorruption) {
  auto s = small_spec(3);
  s.noise_sigma = 0.05;
  s.gyro_noise_deg = 0.5;
  const auto scene = render_synthetic(s);
  double sum = 0, sq = 0;
  std::size_t n = 0;
  for (std::size_t f = 0; f < 3; ++f)
    for (std::size_t i = 0; i < scene.clean[f].data.size(); ++i) {
      const double d = scene.bundle.frames[f].linear.data[i] - scene.clean[f].data[i];
      sum += d;
      sq += d * d;
      ++n;
    }
  EXPECT_NEAR(sum / n, 0.0, 0.005);
  EXPECT_NEAR(std::sqrt(sq / n), 0.05, 0.005);
  for (int f = 0; f < 3; ++f)
    EXPECT_NEAR(rotation_angle_between(scene.bundle.frames[f].meta.gyro, scene.true_rotation[f]), 0.5 * M_PI / 180,
                1e-9);
}

CaptureBundle grid_bundle(int frames, int size) {
  CaptureBundle b;
  for (int n = 0; n < frames; ++n) {
    FrameRecord r;
    r.linear = Image(size, size, 3);
    for (std::size_t i = 0; i < r.linear.data.size(); ++i) r.linear.data[i] = static_cast<float>((i * 7 + n) % 101) / 100;
    r.meta.intrinsics = {50, 50, size / 2.0, size / 2.0};
    r.meta.timestamp_s = n;
    b.frames.push_back(std::move(r));
  }
  return b;
}

TEST(Sampler, EpochCoversEveryPixelOnce) {
  const auto b = grid_bundle(4, 64);
  BatchSampler s(b, {0, 1, 2, 3}, 5);
  std::set<std::tuple<int, float, float>> seen;
  for (int k = 0; k < 4; ++k) {
    const auto batch = s.next(1 << 12);
    ASSERT_EQ(batch.size(), 4096u);
    for (std::size_t i = 0; i < batch.size(); ++i)
      seen.insert({static_cast<int>(batch.frame[i]), batch.image_xy[i].u, batch.image_xy[i].v});
  }
  EXPECT_EQ(seen.size(), 4u * 64 * 64);
  EXPECT_EQ(s.remaining(), 0u);
}

TEST(Sampler, ShortFinalBatchThenNewPermutation) {
  const auto b = grid_bundle(2, 10);
  BatchSampler s(b, {0, 1}, 5);
  EXPECT_EQ(s.next(150).size(), 150u);
  EXPECT_EQ(s.next(150).size(), 50u);
  EXPECT_EQ(s.next(150).size(), 150u);
}

TEST(Sampler, DeterministicForSeed) {
  const auto b = grid_bundle(3, 16);
  BatchSampler s1(b, {0, 1, 2}, 9), s2(b, {0, 1, 2}, 9), s3(b, {0, 1, 2}, 10);
  for (int k = 0; k < 5; ++k) {
    const auto a = s1.next(100), c = s2.next(100), d = s3.next(100);
    EXPECT_EQ(a.frame, c.frame);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.cam_dir[i], c.cam_dir[i]);
    if (k == 0) EXPECT_NE(a.frame, d.frame);
  }
}

TEST(Sampler, TargetsAreSourcePixelsBitExact) {
  const auto b = grid_bundle(2, 16);
  BatchSampler s(b, {1}, 2);
  const auto batch = s.next(256);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const int x = static_cast<int>(batch.image_xy[i].u * 16);
    const int y = static_cast<int>(batch.image_xy[i].v * 16);
    EXPECT_EQ(batch.frame[i], 1.0f);
    for (int k = 0; k < 3; ++k) EXPECT_EQ(batch.target[i][k], b.frames[1].linear.at(x, y, k));
    const auto expect = b.frames[1].meta.intrinsics.unproject(ImageCoord<double>{x + 0.5, y + 0.5}).cast<float>();
    EXPECT_EQ(batch.cam_dir[i], expect);
  }
}

TEST(Sampler, DistortionAndRollingShutter) {
  auto b = grid_bundle(2, 16);
  b.camera.frame_dt_s = 0.1;
  for (auto& f : b.frames) {
    f.meta.distortion.kappa = {0.2, 0, 0, 0, 0};
    f.meta.rs_skew_s = 0.05;
  }
  const auto plain = frame_rays(b, 0, {false, false});
  const auto corrected = frame_rays(b, 0, {true, true});
  // Corner pixel: radius grows, center row unaffected in y.
  const auto& k = b.frames[0].meta.intrinsics;
  const auto d = distort(ImageCoord<double>{0.5, 0.5}, b.frames[0].meta.distortion, k);
  EXPECT_EQ(corrected.cam_dir[0], k.unproject(d).cast<float>());
  EXPECT_GT(std::abs(corrected.cam_dir[0].x), std::abs(plain.cam_dir[0].x));
  EXPECT_EQ(corrected.frame[0], 0.0f);
  EXPECT_FLOAT_EQ(corrected.frame[8 * 16], static_cast<float>(8 * 0.05 / 16 / 0.1));
  EXPECT_EQ(plain.frame[8 * 16], 0.0f);
}

}  // namespace
}  // namespace nls
