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
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace nls {

struct HashGridConfig {
  int dims = 3;
  int levels = 8;
  int base_res = 4;
  double growth = 1.61;
  int table_size_log2 = 19;
  int features_per_level = 2;

  void validate() const {
    if (dims != 2 && dims != 3) throw std::invalid_argument("hash grid dims must be 2 or 3");
    if (levels < 1 || levels > 32) throw std::invalid_argument("hash grid levels must be in [1, 32]");
    if (base_res < 1) throw std::invalid_argument("hash grid base_res must be >= 1");
    if (!(growth > 1.0)) throw std::invalid_argument("hash grid growth must exceed 1");
    if (table_size_log2 < 1 || table_size_log2 > 30)
      throw std::invalid_argument("hash grid table_size_log2 out of range");
    if (features_per_level < 1) throw std::invalid_argument("features_per_level must be >= 1");
  }

  // Vertices per axis at a level.
  int resolution(int level) const {
    return static_cast<int>(std::lround(base_res * std::pow(growth, level)));
  }
  std::uint32_t table_size() const { return std::uint32_t{1} << table_size_log2; }
  bool is_dense(int level) const {
    const std::uint64_t r = static_cast<std::uint64_t>(resolution(level));
    std::uint64_t cells = r * r;
    if (dims == 3) cells *= r;
    return cells <= table_size();
  }
  int output_dim() const { return levels * features_per_level; }
  std::size_t param_count() const {
    return static_cast<std::size_t>(levels) * table_size() * features_per_level;
  }
};

// Count of coarse levels that produce output; the rest emit zeros.
struct LevelMask {
  int active_levels = 1;
};

inline constexpr std::array<std::uint32_t, 3> kHashPrimes{1u, 2654435761u, 805459861u};

// Per-level constants, computed once per batch.
struct GridLevels {
  std::array<std::uint32_t, 32> res{};
  std::array<bool, 32> dense{};

  GridLevels() = default;
  explicit GridLevels(const HashGridConfig& cfg) {
    for (int l = 0; l < cfg.levels; ++l) {
      res[l] = static_cast<std::uint32_t>(cfg.resolution(l));
      dense[l] = cfg.is_dense(l);
    }
  }
};

namespace detail {

inline std::uint32_t slot_index(const std::uint32_t* cell, int dims, std::uint32_t res, bool dense,
                                std::uint32_t mask) {
  if (dense) {
    std::uint32_t idx = 0, stride = 1;
    for (int d = 0; d < dims; ++d) {
      idx += cell[d] * stride;
      stride *= res;
    }
    return idx;
  }
  std::uint32_t h = 0;
  for (int d = 0; d < dims; ++d) h ^= cell[d] * kHashPrimes[d];
  return h & mask;
}

}  // namespace detail

inline std::uint32_t hash_index(std::span<const std::uint32_t> cell, int level, const HashGridConfig& cfg) {
  return detail::slot_index(cell.data(), cfg.dims, static_cast<std::uint32_t>(cfg.resolution(level)),
                            cfg.is_dense(level), cfg.table_size() - 1);
}

namespace detail {

// Per-level lattice lookup shared by forward and backward.
template <typename T>
struct LevelLookup {
  std::array<std::uint32_t, 3> base{};
  std::array<T, 3> frac{};
  std::array<T, 3> scale{};  // d(lattice coordinate)/d(input), zero where clamped
  std::array<std::uint32_t, 8> slot{};
  std::array<T, 8> weight{};
  int corners = 0;
};

template <typename T>
void lookup_level(const HashGridConfig& cfg, const GridLevels& gl, int level, std::span<const T> p,
                  LevelLookup<T>& out) {
  const int res = static_cast<int>(gl.res[level]);
  const T span_scale = static_cast<T>(res - 1);
  for (int d = 0; d < cfg.dims; ++d) {
    // 3D inputs live in [-1,1]^3, 2D inputs in [0,1]^2.
    T q = cfg.dims == 3 ? (p[d] + T(1)) * T(0.5) : p[d];
    T dq = cfg.dims == 3 ? T(0.5) : T(1);
    if (q < T(0)) { q = T(0); dq = T(0); }
    if (q > T(1)) { q = T(1); dq = T(0); }
    const T x = q * span_scale;
    T cell = std::floor(x);
    if (res > 1 && cell > span_scale - T(1)) cell = span_scale - T(1);
    if (res == 1) cell = T(0);
    out.base[d] = static_cast<std::uint32_t>(cell);
    out.frac[d] = x - cell;
    out.scale[d] = dq * span_scale;
  }
  out.corners = 1 << cfg.dims;
  const std::uint32_t max_coord = static_cast<std::uint32_t>(res - 1);
  const std::uint32_t hash_mask = cfg.table_size() - 1;
  for (int c = 0; c < out.corners; ++c) {
    std::array<std::uint32_t, 3> coord{};
    T w = T(1);
    for (int d = 0; d < cfg.dims; ++d) {
      const bool hi = (c >> d) & 1;
      coord[d] = std::min(out.base[d] + (hi ? 1u : 0u), max_coord);
      w *= hi ? out.frac[d] : (T(1) - out.frac[d]);
    }
    out.slot[c] = slot_index(coord.data(), cfg.dims, gl.res[level], gl.dense[level], hash_mask);
    out.weight[c] = w;
  }
}

}  // namespace detail

// Multilinear hash-grid features for one point; `out` has output_dim() entries.
template <typename T>
void encode(const HashGridConfig& cfg, const GridLevels& gl, std::span<const T> table, const LevelMask& mask,
            std::span<const T> p, std::span<T> out) {
  const int F = cfg.features_per_level;
  const std::size_t T_size = cfg.table_size();
  detail::LevelLookup<T> lk;
  for (int level = 0; level < cfg.levels; ++level) {
    T* dst = out.data() + level * F;
    for (int f = 0; f < F; ++f) dst[f] = T(0);
    if (level >= mask.active_levels) continue;
    detail::lookup_level(cfg, gl, level, p, lk);
    const T* level_table = table.data() + level * T_size * F;
    for (int c = 0; c < lk.corners; ++c) {
      const T* entry = level_table + static_cast<std::size_t>(lk.slot[c]) * F;
      for (int f = 0; f < F; ++f) dst[f] += lk.weight[c] * entry[f];
    }
  }
}

// Scatter-adds upstream * weight into table_grad. If point_grad is non-empty
// the gradient with respect to the input point is accumulated there as well.
template <typename T>
void encode_backward(const HashGridConfig& cfg, const GridLevels& gl, std::span<const T> table,
                     const LevelMask& mask, std::span<const T> p, std::span<const T> upstream,
                     std::span<T> table_grad, std::span<T> point_grad = {}) {
  const int F = cfg.features_per_level;
  const std::size_t T_size = cfg.table_size();
  const bool want_point = !point_grad.empty();
  detail::LevelLookup<T> lk;
  const int active = std::min(mask.active_levels, cfg.levels);
  for (int level = 0; level < active; ++level) {
    const T* up = upstream.data() + level * F;
    bool any = false;
    for (int f = 0; f < F; ++f) any |= up[f] != T(0);
    if (!any) continue;
    detail::lookup_level(cfg, gl, level, p, lk);
    const std::size_t level_offset = level * T_size * F;
    if (!table_grad.empty()) {
      T* level_grad = table_grad.data() + level_offset;
      for (int c = 0; c < lk.corners; ++c) {
        T* entry = level_grad + static_cast<std::size_t>(lk.slot[c]) * F;
        for (int f = 0; f < F; ++f) entry[f] += lk.weight[c] * up[f];
      }
    }
    if (!want_point) continue;
    const T* level_table = table.data() + level_offset;
    for (int c = 0; c < lk.corners; ++c) {
      const T* entry = level_table + static_cast<std::size_t>(lk.slot[c]) * F;
      T contrib = T(0);
      for (int f = 0; f < F; ++f) contrib += entry[f] * up[f];
      if (contrib == T(0)) continue;
      for (int d = 0; d < cfg.dims; ++d) {
        if (lk.scale[d] == T(0)) continue;
        const bool hi = (c >> d) & 1;
        T w = hi ? T(1) : T(-1);
        for (int e = 0; e < cfg.dims; ++e) {
          if (e == d) continue;
          const bool he = (c >> e) & 1;
          w *= he ? lk.frac[e] : (T(1) - lk.frac[e]);
        }
        point_grad[d] += contrib * w * lk.scale[d];
      }
    }
  }
}

template <typename T>
void encode(const HashGridConfig& cfg, std::span<const T> table, const LevelMask& mask, std::span<const T> p,
            std::span<T> out) {
  encode<T>(cfg, GridLevels(cfg), table, mask, p, out);
}

template <typename T>
void encode_backward(const HashGridConfig& cfg, std::span<const T> table, const LevelMask& mask,
                     std::span<const T> p, std::span<const T> upstream, std::span<T> table_grad,
                     std::span<T> point_grad = {}) {
  encode_backward<T>(cfg, GridLevels(cfg), table, mask, p, upstream, table_grad, point_grad);
}

// Number of cells of a res^3 partition of [-1,1]^3 whose closed extent
// meets the unit sphere surface.
inline std::int64_t sphere_occupancy(int res) {
  if (res < 1) throw std::invalid_argument("sphere_occupancy: res must be >= 1");
  const double h = 2.0 / res;
  std::int64_t count = 0;
  auto axis_range = [&](int i, double& lo2, double& hi2) {
    const double a = -1.0 + i * h, b = a + h;
    const double near = (a <= 0.0 && b >= 0.0) ? 0.0 : std::min(std::abs(a), std::abs(b));
    const double far = std::max(std::abs(a), std::abs(b));
    lo2 = near * near;
    hi2 = far * far;
  };
  std::vector<double> lo(res), hi(res);
  for (int i = 0; i < res; ++i) axis_range(i, lo[i], hi[i]);
  for (int i = 0; i < res; ++i)
    for (int j = 0; j < res; ++j)
      for (int k = 0; k < res; ++k) {
        const double dmin = lo[i] + lo[j] + lo[k];
        const double dmax = hi[i] + hi[j] + hi[k];
        if (dmin <= 1.0 && dmax >= 1.0) ++count;
      }
  return count;
}

}  // namespace nls
