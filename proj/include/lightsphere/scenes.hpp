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

#include <string>
#include <vector>

#include "lightsphere/dataio.hpp"

// Canned synthetic captures used by the acceptance run, the CLI `synth`
// command and the README walkthrough.

namespace nls {

// Pure rotation sweep over a textured environment: 24 frames, 128x128,
// about 60 degrees field of view, 1.6 rad of yaw.
inline SyntheticSceneSpec rotation_sweep_spec(int frames = 24, int size = 128, std::uint64_t seed = 7) {
  SyntheticSceneSpec s;
  s.environment = procedural_texture(2048, 1024, seed, 24, 48);
  s.rotations = sweep_rotations(frames, 1.6, 0.15);
  s.translations.assign(frames, Vec3<double>{});
  s.width = s.height = size;
  const double f = 110.0 * size / 128.0;
  s.intrinsics = {f, f, size / 2.0, size / 2.0};
  s.seed = seed;
  return s;
}

// Translating sweep with a textured card halfway to the sphere, so that
// near and far content move against each other.
inline SyntheticSceneSpec parallax_sweep_spec(int frames = 24, int size = 128, std::uint64_t seed = 7,
                                              double translation = 0.05, double patch_distance = 0.5) {
  SyntheticSceneSpec s = rotation_sweep_spec(frames, size, seed);
  s.rotations = sweep_rotations(frames, 1.0, 0.1);
  s.translations.clear();
  for (int i = 0; i < frames; ++i) {
    const double a = frames == 1 ? 0.0 : -1.0 + 2.0 * i / (frames - 1);
    s.translations.push_back({translation * a, 0.4 * translation * a * a, 0.0});
  }
  InnerPatch p;
  const double half = 0.3 * patch_distance;
  p.center = {0.0, 0.0, patch_distance};
  p.axis_u = {half, 0.0, 0.0};
  p.axis_v = {0.0, half, 0.0};
  p.texture = procedural_texture(256, 256, seed ^ 4, 6, 12);
  s.patches.push_back(p);
  return s;
}

inline SyntheticSceneSpec synthetic_spec(const std::string& name, int frames, int size, std::uint64_t seed) {
  if (name == "rotation") return rotation_sweep_spec(frames, size, seed);
  if (name == "parallax") return parallax_sweep_spec(frames, size, seed);
  throw std::invalid_argument("unknown synthetic scene '" + name + "' (rotation | parallax)");
}

}  // namespace nls
