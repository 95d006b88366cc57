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

// Two-stage test-time fitting, evaluation and preview mode.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "lightsphere/dataio.hpp"
#include "lightsphere/lightsphere.hpp"
#include "lightsphere/nn.hpp"

namespace nls {

struct TrainConfig {
  int epochs = 100;
  int batches_per_epoch = 200;
  int batch_size = 1 << 18;
  double stage1_fraction = 0.25;
  double eta_p0 = 0.05;
  double eta_r = 1e-3;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-9;
  double weight_decay = 1e-5;
  int mask_start_levels = 4;
  bool preview = false;
  std::uint64_t seed = 0;
  std::string model = "full";  // "full" | "desk" | "tiny"
  std::string offset_variant = "rotation";
  bool ablate_offset = false;  // train-time ablations (component studies)
  bool ablate_viewcolor = false;
  int holdout_every = 0;       // 0 = train on every frame
  int workers = 1;
  bool distortion = true;
  bool rolling_shutter = false;

  static TrainConfig full() { return {}; }
  static TrainConfig desk() {
    TrainConfig c;
    c.model = "desk";
    c.batch_size = 1 << 14;
    c.batches_per_epoch = 50;
    c.epochs = 30;
    return c;
  }

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (batches_per_epoch < 1 || batch_size < 1) throw std::invalid_argument("batch counts must be >= 1");
    if (!(stage1_fraction > 0 && stage1_fraction < 1)) throw std::invalid_argument("stage1_fraction must be in (0, 1)");
    if (!(eta_p0 >= 0)) throw std::invalid_argument("eta_p0 must be >= 0");
    if (mask_start_levels < 1) throw std::invalid_argument("mask_start_levels must be >= 1");
    if (workers < 1) throw std::invalid_argument("workers must be >= 1");
    ModelConfig::preset(model);
    offset_variant_from_string(offset_variant);
  }

  ModelConfig model_config() const {
    ModelConfig m = ModelConfig::preset(model);
    m.offset_variant = offset_variant_from_string(offset_variant);
    m.eta_r = eta_r;
    return m;
  }

  AdamConfig adam() const { return {lr, beta1, beta2, eps, weight_decay}; }
  AblationFlags train_flags() const { return {ablate_offset, ablate_viewcolor}; }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, epochs, batches_per_epoch, batch_size, stage1_fraction,
                                                eta_p0, eta_r, lr, beta1, beta2, eps, weight_decay, mask_start_levels,
                                                preview, seed, model, offset_variant, ablate_offset, ablate_viewcolor,
                                                holdout_every, workers, distortion, rolling_shutter)

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config " + path);
  Json j;
  try {
    j = Json::parse(f);
  } catch (const Json::exception& e) {
    throw std::runtime_error(path + ": invalid JSON (" + e.what() + ")");
  }
  const Json known = TrainConfig{};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.contains(it.key())) throw std::runtime_error(path + ": unknown config field '" + it.key() + "'");
  TrainConfig c = j.value("model", std::string("full")) == "full" ? TrainConfig::full() : TrainConfig::desk();
  Json merged = c;
  merged.update(j);
  c = merged.get<TrainConfig>();
  c.validate();
  return c;
}

struct StageState {
  int stage = 1;
  bool freeze_r = true;
  bool freeze_d = true;
  double eta_p = 0;
  int levels1 = 0;  // active gamma1 levels
  int levels2 = 0;  // active gamma2 levels
};

inline int stage1_epochs(const TrainConfig& c) {
  if (c.epochs < 2) return c.epochs;
  return std::clamp(static_cast<int>(std::lround(c.stage1_fraction * c.epochs)), 1, c.epochs - 1);
}

// Stage 1 freezes the offset and view branches, decays the origin jitter
// to zero and unmasks grid levels linearly; stage 2 trains everything.
inline StageState stage_schedule(int epoch, const TrainConfig& c, const ModelConfig& m) {
  const int s1 = stage1_epochs(c);
  StageState s;
  auto ramp = [&](int levels) {
    const int start = std::min(c.mask_start_levels, levels);
    return start + ((levels - start) * epoch) / s1;
  };
  if (epoch < s1) {
    s.stage = 1;
    s.freeze_r = s.freeze_d = true;
    s.eta_p = c.eta_p0 * (1.0 - static_cast<double>(epoch) / s1);
    s.levels1 = ramp(m.gamma1_pos.levels);
    s.levels2 = ramp(m.gamma2.levels);
  } else {
    s.stage = 2;
    s.freeze_r = s.freeze_d = false;
    s.eta_p = 0;
    s.levels1 = m.gamma1_pos.levels;
    s.levels2 = m.gamma2.levels;
  }
  return s;
}

// Mean absolute error over all components of the valid rays; writes
// dL/dc~ into `grad` (3 x B) when given.
template <typename T>
double l1_loss(const Matrix<T>& predicted, const std::vector<Vec3<T>>& target,
               const std::vector<std::uint8_t>* valid = nullptr, Matrix<T>* grad = nullptr) {
  const Eigen::Index B = predicted.cols();
  if (predicted.rows() != 3 || static_cast<std::size_t>(B) != target.size())
    throw DimensionError("l1_loss: prediction and target batches differ");
  double sum = 0;
  std::size_t count = 0;
  if (grad) grad->setZero(3, B);
  for (Eigen::Index i = 0; i < B; ++i) {
    if (valid && !(*valid)[i]) continue;
    for (int k = 0; k < 3; ++k) {
      const double d = static_cast<double>(predicted(k, i)) - static_cast<double>(target[i][k]);
      sum += std::abs(d);
      if (grad) (*grad)(k, i) = d > 0 ? T(1) : (d < 0 ? T(-1) : T(0));
    }
    count += 3;
  }
  if (count == 0) return 0.0;
  if (grad) *grad *= static_cast<T>(1.0 / count);
  return sum / count;
}

inline std::vector<int> holdout_frames(int n, int every) {
  std::vector<int> out;
  if (every <= 1) return out;
  for (int i = every / 2; i < n; i += every) out.push_back(i);
  return out;
}

struct EpochRecord {
  int epoch = 0;
  long long step = 0;
  double loss = 0;
  double eta_p = 0;
  int levels1 = 0, levels2 = 0;
  int stage = 1;
  double seconds = 0;
  std::optional<double> psnr;

  Json to_json() const {
    Json j{{"epoch", epoch}, {"step", step}, {"loss", loss}, {"eta_p", eta_p},
           {"active_levels", {levels1, levels2}}, {"stage", stage}, {"seconds", seconds}};
    if (psnr) j["psnr"] = *psnr;
    return j;
  }
};

struct FitResult {
  LightSphereModel<float> model;
  AdamState<float> optimizer;
  std::vector<EpochRecord> log;
  std::vector<double> step_loss;
  std::vector<int> train_frames;
  std::vector<int> holdout;
  int epochs_run = 0;
  bool aborted = false;
  std::string abort_reason;
  double seconds = 0;
};

struct EvalResult {
  double psnr = 0;
  std::vector<double> frame_l1;
  std::vector<double> frame_psnr;
};

// Observer hooks for tests and progress reporting.
struct FitHooks {
  std::function<void(long long step, const StageState&, const LightSphereModel<float>&)> after_step;
  std::function<void(const EpochRecord&)> after_epoch;
  std::ostream* log = nullptr;  // JSONL sink
};

// Renders frames at their recorded poses and compares with the bundle.
inline Image render_frame(const LightSphereModel<float>& m, const CaptureBundle& b, int frame,
                          const AblationFlags& flags = {}, const SamplerOptions& opt = {}) {
  const int W = b.width(), H = b.height();
  Image img(W, H, 3);
  const RayBatch<float> all = frame_rays(b, frame, opt);
  constexpr std::size_t kChunk = 1 << 14;
  for (std::size_t start = 0; start < all.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, all.size() - start);
    RayBatch<float> part;
    part.posed = true;
    part.image_xy.assign(all.image_xy.begin() + start, all.image_xy.begin() + start + n);
    part.frame.assign(all.frame.begin() + start, all.frame.begin() + start + n);
    part.cam_dir.assign(all.cam_dir.begin() + start, all.cam_dir.begin() + start + n);
    part.origin.resize(n);
    part.dir.resize(n);
    part.target.resize(n);
    const auto r = forward<float>(part, m, flags);
    for (std::size_t i = 0; i < n; ++i)
      for (int k = 0; k < 3; ++k)
        img.data[(start + i) * 3 + k] = std::clamp(r.color(k, static_cast<Eigen::Index>(i)), 0.0f, 1.0f);
  }
  return img;
}

inline EvalResult evaluate(const LightSphereModel<float>& m, const CaptureBundle& b, const std::vector<int>& frames,
                           const AblationFlags& flags = {}, const SamplerOptions& opt = {},
                           const std::vector<Image>* reference = nullptr) {
  EvalResult r;
  double total_se = 0;
  std::size_t total_n = 0;
  for (int f : frames) {
    const Image pred = render_frame(m, b, f, flags, opt);
    const Image& ref = reference ? (*reference)[f] : b.frames[f].linear;
    double l1 = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) l1 += std::abs(double(pred.data[i]) - ref.data[i]);
    const double e = mse(pred, ref);
    r.frame_l1.push_back(l1 / pred.data.size());
    r.frame_psnr.push_back(psnr_from_mse(e));
    total_se += e * pred.data.size();
    total_n += pred.data.size();
  }
  r.psnr = psnr_from_mse(total_n ? total_se / total_n : 0.0);
  return r;
}

namespace detail {

inline bool all_finite(const GradBuffers<float>& g) {
  for (const auto& b : g)
    for (float v : b)
      if (!std::isfinite(v)) return false;
  return true;
}

// True if the last layer of an MLP block is identically zero, i.e. the
// branch contributes nothing and can be skipped exactly.
inline bool final_layer_zero(const MLPConfig& c, std::span<const float> p) {
  const std::size_t off = c.layer_offset(c.num_layers - 1);
  return std::all_of(p.begin() + off, p.end(), [](float v) { return v == 0.0f; });
}

struct Shard {
  RayBatch<float> batch;
  ForwardTape<float> tape;
  GradBuffers<float> grads;
  double loss_sum = 0;
  std::size_t count = 0;
};

inline RayBatch<float> slice(const RayBatch<float>& b, std::size_t start, std::size_t n) {
  RayBatch<float> out;
  out.posed = b.posed;
  auto cut = [&](const auto& v, auto& dst) { dst.assign(v.begin() + start, v.begin() + start + n); };
  cut(b.origin, out.origin);
  cut(b.dir, out.dir);
  cut(b.image_xy, out.image_xy);
  cut(b.frame, out.frame);
  cut(b.target, out.target);
  cut(b.cam_dir, out.cam_dir);
  return out;
}

}  // namespace detail

// Full fitting procedure. The bundle is used as given; preview mode
// downsamples it 2x2 (1/4 of the pixels) and divides the epochs by 10.
inline FitResult fit(const CaptureBundle& input, TrainConfig cfg, const FitHooks& hooks = {}) {
  cfg.validate();
  const CaptureBundle* bundle = &input;
  CaptureBundle reduced;
  const int requested_epochs = cfg.epochs;
  if (cfg.preview) {
    reduced = downsample_bundle(input, 2);
    bundle = &reduced;
    cfg.epochs = std::max(1, cfg.epochs / 10);
  }
  if (hooks.log) {
    const Json start{{"event", "start"},
                     {"preview", cfg.preview},
                     {"epochs_requested", requested_epochs},
                     {"epochs", cfg.epochs},
                     {"input_size", {input.width(), input.height()}},
                     {"train_size", {bundle->width(), bundle->height()}},
                     {"frames", bundle->size()},
                     {"seed", cfg.seed}};
    *hooks.log << start.dump() << "\n" << std::flush;
  }
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  FitResult res;
  const ModelConfig mc = cfg.model_config();
  res.model = LightSphereModel<float>::create(mc, frame_calibration(*bundle), cfg.seed);
  LightSphereModel<float>& model = res.model;
  res.optimizer = AdamState<float>(model.params, cfg.adam());
  const int N = static_cast<int>(bundle->size());
  res.holdout = holdout_frames(N, cfg.holdout_every);
  std::vector<bool> trained(N, true);
  for (int f : res.holdout) trained[f] = false;
  for (int f = 0; f < N; ++f)
    if (trained[f]) res.train_frames.push_back(f);

  const SamplerOptions sopt{cfg.distortion, cfg.rolling_shutter};
  BatchSampler sampler(*bundle, res.train_frames, cfg.seed ^ 0x5DEECE66Dull, sopt);
  RandomSource jitter(cfg.seed + 0x9E3779B9ull);
  const int W = cfg.workers;
  std::vector<detail::Shard> shards(W);
  for (auto& s : shards) s.grads = make_grad_buffers(model.params);
  const AblationFlags base_flags = cfg.train_flags();
  ParamStore<float> last_good = model.params;
  long long step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const StageState st = stage_schedule(epoch, cfg, mc);
    model.mask1.active_levels = st.levels1;
    model.mask2.active_levels = st.levels2;
    model.params[model.blk.h_r].trainable = !st.freeze_r;
    model.params[model.blk.gamma1_pos].trainable = !st.freeze_r;
    model.params[model.blk.h_d].trainable = !st.freeze_d;
    model.params[model.blk.gamma1_view].trainable = !(st.freeze_r && st.freeze_d);
    double epoch_loss = 0;
    std::size_t epoch_count = 0;

    for (int bi = 0; bi < cfg.batches_per_epoch; ++bi) {
      // Frozen branches whose output layer is still zero are skipped: the
      // result is bit-identical and the step is cheaper.
      AblationFlags flags = base_flags;
      if (st.freeze_r && detail::final_layer_zero(mc.h_r(), model.params[model.blk.h_r].value))
        flags.zero_ray_offset = true;
      if (st.freeze_d && detail::final_layer_zero(mc.h_d(), model.params[model.blk.h_d].value))
        flags.zero_view_color = true;

      const RayBatch<float> batch = sampler.next(static_cast<std::size_t>(cfg.batch_size));
      const std::size_t B = batch.size();
      const float eta_p = static_cast<float>(st.eta_p);
      // Per-shard jitter streams, drawn in a fixed order.
      std::vector<std::uint64_t> shard_seeds(W);
      for (auto& s : shard_seeds) s = jitter.next_u64();

      std::size_t total_valid = 0;
      auto run_shard = [&](int w) {
        detail::Shard& s = shards[w];
        const std::size_t lo = B * w / W, hi = B * (w + 1) / W;
        s.batch = detail::slice(batch, lo, hi - lo);
        RandomSource rng(shard_seeds[w]);
        const auto out = forward<float>(s.batch, model, flags, eta_p, &rng, &s.tape);
        Matrix<float> dcolor;
        s.loss_sum = l1_loss<float>(out.color, s.batch.target, &out.valid, &dcolor);
        s.count = 0;
        for (auto v : out.valid) s.count += v ? 3 : 0;
        s.loss_sum *= static_cast<double>(s.count);
        // Gradient of the shard-local mean; rescaled to the batch mean below.
        dcolor *= static_cast<float>(s.count);
        for (auto& g : s.grads) std::fill(g.begin(), g.end(), 0.0f);
        backward<float>(s.batch, model, s.tape, dcolor, s.grads);
      };
      if (W == 1) {
        run_shard(0);
      } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < W; ++w) pool.emplace_back(run_shard, w);
        for (auto& t : pool) t.join();
      }
      double loss_sum = 0;
      for (const auto& s : shards) {
        loss_sum += s.loss_sum;
        total_valid += s.count;
      }
      const double loss = total_valid ? loss_sum / total_valid : 0.0;
      const float inv = total_valid ? 1.0f / static_cast<float>(total_valid) : 0.0f;
      for (std::size_t b = 0; b < model.params.size(); ++b) {
        auto& g = model.params[b].grad;
        std::fill(g.begin(), g.end(), 0.0f);
        if (!model.params[b].trainable) continue;
        for (const auto& s : shards)
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += s.grads[b][i];
        for (float& v : g) v *= inv;
      }
      bool finite = std::isfinite(loss);
      if (finite)
        for (const auto& b : model.params)
          for (float v : b.grad)
            if (!std::isfinite(v)) { finite = false; break; }
      if (!finite) {
        res.aborted = true;
        res.abort_reason = "non-finite loss or gradient at step " + std::to_string(step);
        model.params = last_good;
        res.seconds = elapsed();
        return res;
      }
      adam_step<float>(res.optimizer, model.params, [&](ParamStore<float>&) { model.clamp_translations(0.99f); });
      ++step;
      res.step_loss.push_back(loss);
      epoch_loss += loss;
      ++epoch_count;
      if (hooks.after_step) hooks.after_step(step, st, model);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.step = step;
    rec.loss = epoch_count ? epoch_loss / epoch_count : 0.0;
    rec.eta_p = st.eta_p;
    rec.levels1 = st.levels1;
    rec.levels2 = st.levels2;
    rec.stage = st.stage;
    rec.seconds = elapsed();
    res.epochs_run = epoch + 1;
    bool params_finite = true;
    for (const auto& b : model.params)
      for (float v : b.value)
        if (!std::isfinite(v)) { params_finite = false; break; }
    if (!params_finite) {
      res.aborted = true;
      res.abort_reason = "non-finite parameters after epoch " + std::to_string(epoch);
      model.params = last_good;
      res.seconds = elapsed();
      return res;
    }
    last_good = model.params;
    if (!res.holdout.empty() && (epoch == cfg.epochs - 1)) {
      LightSphereModel<float> snapshot = model;
      interpolate_untrained_poses(snapshot, trained);
      rec.psnr = evaluate(snapshot, *bundle, res.holdout, base_flags, sopt).psnr;
    }
    res.log.push_back(rec);
    if (hooks.log) *hooks.log << rec.to_json().dump() << "\n" << std::flush;
    if (hooks.after_epoch) hooks.after_epoch(rec);
  }
  interpolate_untrained_poses(model, trained);
  for (auto& b : model.params) b.trainable = true;
  res.seconds = elapsed();
  return res;
}

}  // namespace nls
