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

#include "lightsphere/trainer.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

namespace nls {
namespace {

SyntheticScene rotation_scene(int frames = 6, int size = 32, double noise = 0) {
  SyntheticSceneSpec s;
  s.environment = procedural_texture(512, 256, 11, 8, 16);
  s.rotations = sweep_rotations(frames, 0.5, 0.05);
  s.translations.assign(frames, Vec3<double>{});
  s.width = s.height = size;
  s.intrinsics = {size * 1.0, size * 1.0, size / 2.0, size / 2.0};
  s.noise_sigma = noise;
  return render_synthetic(s);
}

TrainConfig tiny_train() {
  TrainConfig c = TrainConfig::desk();
  c.model = "tiny";
  c.epochs = 8;
  c.batches_per_epoch = 10;
  c.batch_size = 1024;
  c.seed = 3;
  return c;
}

TEST(StageSchedule, Endpoints) {
  TrainConfig c;  // 100 epochs, stage 1 = 25
  const ModelConfig m = ModelConfig::full();
  const auto s0 = stage_schedule(0, c, m);
  EXPECT_TRUE(s0.freeze_r);
  EXPECT_TRUE(s0.freeze_d);
  EXPECT_EQ(s0.eta_p, c.eta_p0);
  EXPECT_EQ(s0.levels1, 4);
  EXPECT_EQ(s0.levels2, 4);
  const auto s1 = stage_schedule(25, c, m);
  EXPECT_EQ(s1.eta_p, 0.0);
  EXPECT_FALSE(s1.freeze_r);
  EXPECT_EQ(s1.levels2, 15);
  const auto last = stage_schedule(99, c, m);
  EXPECT_FALSE(last.freeze_r);
  EXPECT_FALSE(last.freeze_d);
  EXPECT_EQ(last.levels1, 8);
  EXPECT_EQ(last.levels2, 15);
  EXPECT_EQ(last.stage, 2);
}

TEST(StageSchedule, MonotoneRamps) {
  for (int epochs : {2, 3, 10, 37, 100}) {
    TrainConfig c;
    c.epochs = epochs;
    const ModelConfig m = ModelConfig::full();
    double prev_eta = 1e9;
    int prev_levels = 0;
    bool hit_zero = false;
    for (int e = 0; e < epochs; ++e) {
      const auto s = stage_schedule(e, c, m);
      EXPECT_LE(s.eta_p, prev_eta);
      EXPECT_GE(s.levels2, prev_levels);
      EXPECT_LE(s.levels2, 15);
      if (s.stage == 2) {
        EXPECT_EQ(s.eta_p, 0.0);
        hit_zero = true;
      } else {
        EXPECT_GT(s.eta_p, 0.0);
      }
      prev_eta = s.eta_p;
      prev_levels = s.levels2;
    }
    EXPECT_TRUE(hit_zero) << epochs;
  }
}

TEST(L1Loss, Examples) {
  Matrix<double> c(3, 1);
  c << 0.5, 0.5, 0.5;
  EXPECT_EQ(l1_loss<double>(c, {{0.5, 0.5, 0.5}}), 0.0);
  EXPECT_NEAR(l1_loss<double>(c, {{0.3, 0.3, 0.3}}), 0.2, 1e-15);
}

TEST(L1Loss, MatchesScalarLoopAndGradientSign) {
  std::mt19937 g(4);
  std::uniform_real_distribution<double> u(0, 1);
  Matrix<double> p(3, 50);
  std::vector<Vec3<double>> t(50);
  std::vector<std::uint8_t> valid(50, 1);
  valid[7] = 0;
  for (int i = 0; i < 50; ++i) {
    for (int k = 0; k < 3; ++k) p(k, i) = u(g);
    t[i] = {u(g), u(g), u(g)};
  }
  double naive = 0;
  int n = 0;
  for (int i = 0; i < 50; ++i) {
    if (i == 7) continue;
    for (int k = 0; k < 3; ++k, ++n) naive += std::abs(p(k, i) - t[i][k]);
  }
  Matrix<double> grad;
  EXPECT_NEAR(l1_loss<double>(p, t, &valid, &grad), naive / n, 1e-14);
  EXPECT_EQ(grad.col(7).norm(), 0.0);
  EXPECT_DOUBLE_EQ(grad(0, 0), (p(0, 0) > t[0][0] ? 1.0 : -1.0) / n);
}

TEST(Evaluate, PsnrDefinition) {
  EXPECT_NEAR(psnr_from_mse(1e-4), 40.0, 1e-12);
  Image a(4, 4, 3, 0.5f), b(4, 4, 3, 0.51f);
  EXPECT_NEAR(psnr(a, b), 40.0, 1e-3);
}

TEST(Evaluate, SelfConsistentModelScoresAbove50dB) {
  auto scene = rotation_scene(3, 24);
  auto m = LightSphereModel<float>::create(ModelConfig::tiny(), frame_calibration(scene.bundle), 5);
  RandomSource rng(1);
  for (float& v : m.params[m.blk.gamma2].value) v = static_cast<float>(rng.uniform(-0.3, 0.3));
  mlp_init<float>(m.cfg.h_c(), m.params[m.blk.h_c].value, rng);
  for (float& v : m.params[m.blk.h_c].value) v += 0.3f;
  // Frames rendered by the model itself are the ground truth.
  for (int f = 0; f < 3; ++f) scene.bundle.frames[f].linear = render_frame(m, scene.bundle, f);
  EXPECT_GE(evaluate(m, scene.bundle, {0, 1, 2}).psnr, 50.0);
}

TEST(Fit, PureRotationLossDropsTenfold) {
  const auto scene = rotation_scene();
  TrainConfig c = tiny_train();
  c.epochs = 16;
  c.ablate_offset = c.ablate_viewcolor = true;
  const auto r = fit(scene.bundle, c);
  ASSERT_FALSE(r.aborted) << r.abort_reason;
  ASSERT_EQ(r.step_loss.size(), 160u);
  EXPECT_LT(r.step_loss.back(), 0.1 * r.step_loss.front());
  for (double l : r.step_loss) EXPECT_TRUE(std::isfinite(l));
}

TEST(Fit, TrainedBeatsUntrainedOnHeldOutFrames) {
  const auto scene = rotation_scene(9);
  TrainConfig c = tiny_train();
  c.holdout_every = 8;
  const auto r = fit(scene.bundle, c);
  ASSERT_EQ(r.holdout, (std::vector<int>{4}));
  const auto untrained = LightSphereModel<float>::create(c.model_config(), frame_calibration(scene.bundle), 3);
  const double before = evaluate(untrained, scene.bundle, r.holdout).psnr;
  const double after = evaluate(r.model, scene.bundle, r.holdout).psnr;
  EXPECT_GT(after, before);
  ASSERT_TRUE(r.log.back().psnr.has_value());
  EXPECT_NEAR(*r.log.back().psnr, after, 1e-9);
}

TEST(Fit, StageOneFreezesBranchesBitExactly) {
  const auto scene = rotation_scene(4, 24);
  TrainConfig c = tiny_train();
  const auto init = LightSphereModel<float>::create(c.model_config(), frame_calibration(scene.bundle), c.seed);
  const auto h_r0 = init.params["h_R"].value, h_d0 = init.params["h_D"].value;
  int stage1_steps = 0;
  bool boundary_zero = false;
  FitHooks hooks;
  hooks.after_step = [&](long long, const StageState& st, const LightSphereModel<float>& m) {
    if (st.stage == 1) {
      ++stage1_steps;
      EXPECT_EQ(m.params["h_R"].value, h_r0);
      EXPECT_EQ(m.params["h_D"].value, h_d0);
    } else if (st.eta_p == 0.0) {
      boundary_zero = true;
    }
  };
  const auto r = fit(scene.bundle, c, hooks);
  EXPECT_EQ(stage1_steps, stage1_epochs(c) * c.batches_per_epoch);
  EXPECT_TRUE(boundary_zero);
  EXPECT_NE(r.model.params["h_R"].value, h_r0);  // unlocked in stage 2
  EXPECT_NE(r.model.params["h_D"].value, h_d0);
}

TEST(Fit, SeedFixedRunsAreBitReproducible) {
  const auto scene = rotation_scene(4, 24);
  TrainConfig c = tiny_train();
  c.epochs = 4;
  const auto a = fit(scene.bundle, c), b = fit(scene.bundle, c);
  for (std::size_t i = 0; i < a.model.params.size(); ++i)
    EXPECT_EQ(a.model.params[i].value, b.model.params[i].value) << a.model.params[i].name;
  c.seed = 4;
  const auto d = fit(scene.bundle, c);
  EXPECT_NE(a.model.params["gamma2"].value, d.model.params["gamma2"].value);
}

TEST(Fit, ShardedWorkersMatchSingleWorker) {
  const auto scene = rotation_scene(4, 24);
  TrainConfig c = tiny_train();
  c.epochs = 3;
  c.batches_per_epoch = 4;
  c.eta_p0 = 0;  // jitter streams are per shard
  const auto one = fit(scene.bundle, c);
  c.workers = 3;
  const auto three = fit(scene.bundle, c);
  for (std::size_t s = 0; s < one.step_loss.size(); ++s) EXPECT_NEAR(one.step_loss[s], three.step_loss[s], 1e-5);
}

TEST(Fit, NonFiniteLossAbortsWithLastGoodParameters) {
  auto scene = rotation_scene(4, 24);
  scene.bundle.frames[2].linear.data[5] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig c = tiny_train();
  const auto r = fit(scene.bundle, c);
  EXPECT_TRUE(r.aborted);
  EXPECT_NE(r.abort_reason.find("non-finite"), std::string::npos);
  for (const auto& b : r.model.params)
    for (float v : b.value) ASSERT_TRUE(std::isfinite(v));
}

TEST(Fit, PreviewCutsEpochsAndResolution) {
  const auto scene = rotation_scene(4, 32);
  TrainConfig c = tiny_train();
  c.epochs = 20;
  c.preview = true;
  std::ostringstream log;
  FitHooks hooks;
  hooks.log = &log;
  const auto r = fit(scene.bundle, c, hooks);
  EXPECT_EQ(r.epochs_run, 2);
  EXPECT_EQ(r.model.frames[0].width, 16);
  EXPECT_FLOAT_EQ(r.model.frames[0].intrinsics.fx, 16.0f);
  std::istringstream lines(log.str());
  std::string line;
  ASSERT_TRUE(std::getline(lines, line));
  const Json start = Json::parse(line);
  EXPECT_EQ(start["event"], "start");
  EXPECT_EQ(start["preview"], true);
  EXPECT_EQ(start["epochs_requested"], 20);
  EXPECT_EQ(start["epochs"], 2);
  EXPECT_EQ(start["train_size"][0], 16);
  int n = 0;
  while (std::getline(lines, line)) {
    const Json j = Json::parse(line);
    EXPECT_TRUE(j.contains("loss") && j.contains("eta_p") && j.contains("active_levels") && j.contains("step"));
    ++n;
  }
  EXPECT_EQ(n, 2);
}

TEST(Fit, TranslationsStayInsideSphere) {
  auto scene = rotation_scene(4, 24);
  TrainConfig c = tiny_train();
  c.lr = 0.3;  // aggressive steps push translations outward
  c.epochs = 2;
  FitHooks hooks;
  hooks.after_step = [&](long long, const StageState&, const LightSphereModel<float>& m) {
    for (int n = 0; n < m.num_frames(); ++n) EXPECT_LE(norm(m.translation(n)), 0.99f + 1e-6f);
  };
  fit(scene.bundle, c, hooks);
}

TEST(TrainConfig, JsonFileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "nls_train_config.json";
  {
    std::ofstream f(path);
    f << R"({"model": "desk", "epochs": 7, "seed": 12, "offset_variant": "depth"})";
  }
  const TrainConfig c = load_train_config(path.string());
  EXPECT_EQ(c.epochs, 7);
  EXPECT_EQ(c.seed, 12u);
  EXPECT_EQ(c.batch_size, 1 << 14);  // desk default retained
  EXPECT_EQ(c.model_config().offset_variant, OffsetVariant::kDepth);
  {
    std::ofstream f(path, std::ios::trunc);
    f << R"({"epochz": 7})";
  }
  EXPECT_THROW(load_train_config(path.string()), std::runtime_error);
  {
    std::ofstream f(path, std::ios::trunc);
    f << R"({"stage1_fraction": 1.5})";
  }
  EXPECT_THROW(load_train_config(path.string()), std::invalid_argument);
}

}  // namespace
}  // namespace nls
