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

// lightsphere: ingest captures, fit models, render views, serve a viewer.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lightsphere/checkpoint.hpp"
#include "lightsphere/dataio.hpp"
#include "lightsphere/renderer.hpp"
#include "lightsphere/scenes.hpp"
#include "lightsphere/service.hpp"
#include "lightsphere/trainer.hpp"

namespace fs = std::filesystem;
using namespace nls;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void print_summary(const CaptureBundle& b) {
  std::cout << b.size() << " frames, " << b.width() << "x" << b.height() << ", camera "
            << (b.camera.id.empty() ? "(unnamed)" : b.camera.id) << "\n";
}

std::pair<int, int> parse_size(const std::string& s) {
  int w = 0, h = 0;
  char x = 0;
  std::istringstream in(s);
  if (!(in >> w >> x >> h) || (x != 'x' && x != 'X') || w < 1 || h < 1)
    throw UsageError("--size must look like 256x256");
  return {w, h};
}

Vec3<double> parse_vec3(const std::string& s) {
  std::vector<double> v;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) v.push_back(std::stod(item));
  if (v.size() != 3) throw UsageError("--t must be three comma-separated numbers");
  return {v[0], v[1], v[2]};
}

bool has_extension(const fs::path& p, std::initializer_list<const char*> exts) {
  std::string e = p.extension().string();
  for (auto& c : e) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  for (const char* x : exts)
    if (e == x) return true;
  return false;
}

void write_image(const fs::path& path, const Image& img, int bit_depth) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  if (has_extension(path, {".jpg", ".jpeg"})) {
    detail::write_file(path.string(), encode_jpeg(img, 92));
  } else {
    write_png(path.string(), img, bit_depth);
  }
}

ColorPipeline pipeline_from(const Checkpoint& ck, bool disable) {
  if (disable || !ck.meta.contains("color")) return {};
  return ColorPipeline::from_json(ck.meta["color"]);
}

std::atomic<bool> g_stop{false};
void on_signal(int) { g_stop = true; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spherical neural light-field stitching"};
  app.require_subcommand(1);

  // ingest
  std::string ingest_src, ingest_out;
  auto* ingest = app.add_subcommand("ingest", "Validate a capture directory and write a normalized bundle");
  ingest->add_option("src", ingest_src, "capture directory or bundle")->required();
  ingest->add_option("--out", ingest_out, "output bundle directory")->required();

  // synth
  std::string synth_scene = "rotation", synth_out;
  int synth_frames = 24, synth_size = 128;
  double synth_noise = 0, synth_gyro = 0;
  std::uint64_t synth_seed = 7;
  auto* synth = app.add_subcommand("synth", "Write a synthetic capture bundle");
  synth->add_option("--scene", synth_scene, "rotation | parallax")->capture_default_str();
  synth->add_option("--frames", synth_frames)->capture_default_str();
  synth->add_option("--size", synth_size, "square frame size in pixels")->capture_default_str();
  synth->add_option("--noise", synth_noise, "additive Gaussian sigma")->capture_default_str();
  synth->add_option("--gyro-noise-deg", synth_gyro, "per-frame gyro corruption")->capture_default_str();
  synth->add_option("--seed", synth_seed)->capture_default_str();
  synth->add_option("--out", synth_out)->required();

  // fit
  std::string fit_bundle, fit_config, fit_out, fit_variant, fit_log;
  bool fit_preview = false, fit_ablate_offset = false, fit_ablate_view = false, fit_save_opt = false;
  std::uint64_t fit_seed = 0;
  int fit_epochs = 0, fit_workers = 0, fit_holdout = -1;
  auto* fitc = app.add_subcommand("fit", "Fit a model to a bundle");
  fitc->add_option("bundle", fit_bundle)->required();
  fitc->add_option("--config", fit_config, "JSON file with TrainConfig fields (default: desk preset)");
  fitc->add_option("--out", fit_out, "checkpoint path")->required();
  fitc->add_flag("--preview", fit_preview, "1/4 of the pixels and 1/10 of the epochs");
  fitc->add_option("--offset-variant", fit_variant, "rotation | depth | multiplicative | none");
  fitc->add_flag("--ablate-offset", fit_ablate_offset, "train without the ray offset branch");
  fitc->add_flag("--ablate-viewcolor", fit_ablate_view, "train without the view-dependent branch");
  auto* seed_opt = fitc->add_option("--seed", fit_seed);
  fitc->add_option("--epochs", fit_epochs);
  fitc->add_option("--workers", fit_workers);
  fitc->add_option("--holdout-every", fit_holdout);
  fitc->add_option("--log", fit_log, "JSONL training log (default: <out>.log.jsonl)");
  fitc->add_flag("--save-optimizer", fit_save_opt, "store Adam state in the checkpoint");

  // render
  std::string render_ckpt, render_out, render_t = "0,0,0", render_size;
  double yaw = 0, pitch = 0, roll = 0, fov_scale = 1;
  bool render_equirect_flag = false, render_no_color = false;
  int orbit = 0, render_frame_index = -1, bit_depth = 8;
  double orbit_radius = 0.05;
  auto* render = app.add_subcommand("render", "Render views from a checkpoint");
  render->add_option("ckpt", render_ckpt)->required();
  render->add_option("--yaw", yaw, "radians, relative to the middle capture frame");
  render->add_option("--pitch", pitch, "radians");
  render->add_option("--roll", roll, "radians");
  render->add_option("--t", render_t, "camera position x,y,z in sphere radii");
  render->add_option("--fov-scale", fov_scale, ">= 1; 3 renders three times the captured field of view");
  render->add_option("--size", render_size, "WxH");
  render->add_flag("--equirect", render_equirect_flag, "longitude/latitude panorama plus coverage mask");
  render->add_option("--orbit", orbit, "render an N-frame orbit into the --out directory");
  render->add_option("--orbit-radius", orbit_radius)->capture_default_str();
  render->add_option("--frame", render_frame_index, "use the refined camera of a capture frame");
  render->add_option("--bit-depth", bit_depth, "PNG bit depth (8 or 16)")->check(CLI::IsMember({8, 16}));
  render->add_flag("--no-color", render_no_color, "skip the color correction matrix and tonemap");
  render->add_option("--out", render_out)->required();

  // serve
  std::string serve_ckpt, serve_bind = "127.0.0.1";
  int serve_port = 8765, serve_workers = 1;
  bool serve_no_color = false;
  auto* serve = app.add_subcommand("serve", "Interactive render service");
  serve->add_option("ckpt", serve_ckpt)->required();
  serve->add_option("--port", serve_port)->capture_default_str();
  serve->add_option("--bind", serve_bind)->capture_default_str();
  serve->add_option("--workers", serve_workers, "concurrent renders")->capture_default_str();
  serve->add_flag("--no-color", serve_no_color);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ingest) {
      const CaptureBundle b = load_bundle(ingest_src);
      save_bundle(b, ingest_out);
      print_summary(b);
      std::cout << "wrote " << (fs::path(ingest_out) / "manifest.json").string() << "\n";
      return 0;
    }

    if (*synth) {
      SyntheticSceneSpec s = synthetic_spec(synth_scene, synth_frames, synth_size, synth_seed);
      s.noise_sigma = synth_noise;
      s.gyro_noise_deg = synth_gyro;
      const SyntheticScene scene = render_synthetic(s);
      save_bundle(scene.bundle, synth_out);
      print_summary(scene.bundle);
      return 0;
    }

    if (*fitc) {
      TrainConfig cfg = fit_config.empty() ? TrainConfig::desk() : load_train_config(fit_config);
      if (fit_preview) cfg.preview = true;
      if (!fit_variant.empty()) cfg.offset_variant = fit_variant;
      if (fit_ablate_offset) cfg.ablate_offset = true;
      if (fit_ablate_view) cfg.ablate_viewcolor = true;
      if (seed_opt->count()) cfg.seed = fit_seed;
      if (fit_epochs > 0) cfg.epochs = fit_epochs;
      if (fit_workers > 0) cfg.workers = fit_workers;
      if (fit_holdout >= 0) cfg.holdout_every = fit_holdout;
      cfg.validate();
      const CaptureBundle b = load_bundle(fit_bundle);
      print_summary(b);
      if (cfg.preview)
        std::cout << "preview: epochs " << cfg.epochs << " -> " << std::max(1, cfg.epochs / 10) << ", resolution "
                  << b.width() << "x" << b.height() << " -> " << b.width() / 2 << "x" << b.height() / 2 << "\n";
      const std::string log_path = fit_log.empty() ? fit_out + ".log.jsonl" : fit_log;
      std::ofstream log(log_path);
      if (!log) throw std::runtime_error("cannot write log " + log_path);
      FitHooks hooks;
      hooks.log = &log;
      hooks.after_epoch = [](const EpochRecord& r) {
        std::printf("epoch %3d  stage %d  loss %.5f  levels %d/%d  %.1fs%s\n", r.epoch, r.stage, r.loss, r.levels1,
                    r.levels2, r.seconds, r.psnr ? (" held-out " + std::to_string(*r.psnr) + " dB").c_str() : "");
        std::fflush(stdout);
      };
      const FitResult r = fit(b, cfg, hooks);
      nlohmann::json meta;
      meta["color"] = ColorPipeline::from_frame(b.frames[0].meta).to_json();
      meta["train"] = {{"config", nlohmann::json(cfg)},
                       {"epochs_run", r.epochs_run},
                       {"holdout", r.holdout},
                       {"aborted", r.aborted},
                       {"final_loss", r.log.empty() ? 0.0 : r.log.back().loss}};
      save_checkpoint(fit_out, r.model, fit_save_opt ? &r.optimizer : nullptr, meta);
      if (r.aborted) {
        std::cerr << "error: training aborted (" << r.abort_reason << "); wrote last finite state to " << fit_out
                  << "\n";
        return 3;
      }
      std::cout << "wrote " << fit_out << " (" << r.epochs_run << " epochs, " << r.seconds << " s)\n";
      return 0;
    }

    if (*render) {
      const Checkpoint ck = load_checkpoint(render_ckpt);
      const LightSphereModel<float>& m = ck.model;
      const ColorPipeline pipe = pipeline_from(ck, render_no_color);
      if (render_equirect_flag) {
        EquirectOptions eo;
        if (!render_size.empty()) std::tie(eo.width, eo.height) = parse_size(render_size);
        eo.pipeline = pipe;
        write_image(render_out, render_equirect(m, eo), bit_depth);
        const CoverageMap cov = coverage_map(m, eo.width, eo.height);
        fs::path mask = fs::path(render_out);
        mask.replace_filename(mask.stem().string() + "_coverage.png");
        write_png(mask.string(), cov.mask(), 8);
        std::printf("panorama %dx%d, %.1f%% observed\n", eo.width, eo.height, 100 * cov.fraction());
        return 0;
      }
      VirtualCamera cam;
      if (render_frame_index >= 0) {
        cam = camera_for_frame(m, render_frame_index, fov_scale);
      } else {
        PoseMessage p;
        const Vec3<double> t = parse_vec3(render_t);
        p.yaw = yaw;
        p.pitch = pitch;
        p.roll = roll;
        p.tx = t.x;
        p.ty = t.y;
        p.tz = t.z;
        p.fov_scale = fov_scale;
        const VirtualCamera ref = reference_camera(m);
        p.width = ref.width;
        p.height = ref.height;
        cam = camera_for_pose(p, ref);
      }
      if (!render_size.empty()) {
        const auto [w, h] = parse_size(render_size);
        cam = cam.resized(w, h);
      }
      RenderOptions ro;
      ro.pipeline = pipe;
      if (orbit > 0) {
        FrameDirectorySink sink(render_out, bit_depth);
        const PathStats st =
            render_path(m, orbit_path(cam, orbit, orbit_radius), [&](int i, const Image& f) { sink(i, f); }, ro);
        sink.finish(st);
        std::printf("%d frames at %dx%d, %.2f FPS\n", orbit, cam.width, cam.height, st.fps());
        return 0;
      }
      write_image(render_out, render_view(m, cam, ro), bit_depth);
      return 0;
    }

    if (*serve) {
      Checkpoint ck = load_checkpoint(serve_ckpt);
      ServiceOptions opt;
      opt.port = serve_port;
      opt.bind = serve_bind;
      opt.render_workers = serve_workers;
      opt.render.pipeline = pipeline_from(ck, serve_no_color);
      auto model = std::make_shared<const LightSphereModel<float>>(std::move(ck.model));
      RenderService svc(model, reference_camera(*model), opt);
      svc.start();
      std::printf("listening on %s:%d\n", serve_bind.c_str(), svc.port());
      std::fflush(stdout);
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
      svc.stop();
      std::printf("served %llu frames\n", static_cast<unsigned long long>(svc.stats().frames.load()));
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
