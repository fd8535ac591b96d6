// Copyright 2026 The msda-cpu Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "msda/optimized.hpp"

#include <algorithm>
#include <limits>
#include <string>
#include <thread>

#include "msda/error.hpp"

namespace msda {

std::size_t default_workers() noexcept {
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

namespace {

// Per sampling point: corner offsets, four corner weights plus the attention
// weight, one accumulator, and in Train mode the channel vector of samples.
std::size_t bytes_per_point(const MsdaConfig& cfg, const OptFlags& flags) {
  const std::size_t offsets = (flags.gather_fusion ? 2 : 4) * sizeof(std::uint32_t);
  const std::size_t weights = 5 * sizeof(float);
  const std::size_t accum = sizeof(float);
  const std::size_t saved = cfg.mode == Mode::Train ? cfg.channels * dtype_size(flags.saved_dtype) : 0;
  return offsets + weights + accum + saved;
}

std::size_t largest_pow2_at_most(std::size_t n) {
  std::size_t p = 1;
  while (p <= n / 2) p *= 2;
  return p;
}

}  // namespace

KernelPlan plan(const MsdaConfig& cfg, const OptFlags& flags) {
  cfg.validate();
  if (flags.workers == 0) {
    throw InputError("plan: workers must be >= 1");
  }
  if (cfg.sampling_points() > std::numeric_limits<std::uint32_t>::max()) {
    throw PlanError("plan: more than 2^32 sampling points");
  }

  KernelPlan kp;
  kp.value_layout = flags.gather_fusion ? Layout::PixelLastPadded : Layout::PixelLast;
  kp.grad_layout = flags.scatter_fusion ? Layout::PixelLastPadded : Layout::PixelLast;
  const std::size_t axis = flags.gather_fusion || flags.scatter_fusion
                               ? total_padded_pixels(cfg.levels)
                               : total_pixels(cfg.levels);
  if (axis >= static_cast<std::size_t>(std::numeric_limits<std::int32_t>::max())) {
    throw PlanError("plan: pixel axis does not fit 32-bit offsets");
  }

  const std::size_t per_point = bytes_per_point(cfg, flags);
  const std::size_t budget = flags.tile_budget_bytes;

  std::size_t widest = 0;
  for (const auto& lv : cfg.levels) widest = std::max(widest, lv.width + 1);
  const std::size_t min_need = widest * sizeof(float) + kMinChunkPoints * per_point;
  if (budget < min_need) {
    throw PlanError("plan: tile budget of " + std::to_string(budget) + " bytes is below the " +
                    std::to_string(min_need) + " needed for one row plus the smallest chunk");
  }

  for (const auto& lv : cfg.levels) {
    const std::size_t stride = flags.gather_fusion ? lv.width + 1 : lv.width;
    LevelPlan lp;
    lp.point_bytes = per_point;
    lp.row_bytes = stride * sizeof(float);
    const std::size_t fit = (budget - lp.row_bytes) / per_point;
    lp.chunk_points = std::clamp(largest_pow2_at_most(fit), kMinChunkPoints, kMaxChunkPoints);
    kp.levels.push_back(lp);
  }
  if (!flags.adaptive_veclen) {
    std::size_t fixed = kMaxChunkPoints;
    for (const auto& lp : kp.levels) fixed = std::min(fixed, lp.chunk_points);
    for (auto& lp : kp.levels) lp.chunk_points = fixed;
  }
  for (auto& lp : kp.levels) {
    lp.chunk_queries = std::max<std::size_t>(1, lp.chunk_points / cfg.points);
  }

  const std::size_t rows_bq = cfg.batch * cfg.queries;
  const std::size_t n = flags.workers;
  for (std::size_t w = 0; w < n; ++w) {
    kp.partition.push_back({rows_bq * w / n, rows_bq * (w + 1) / n});
  }

  kp.scatter.staggered = flags.staggered_write;
  kp.scatter.fused = flags.scatter_fusion;
  kp.scatter.shards = flags.staggered_write ? n : 1;
  // balance shards by pixel count, cutting only at row boundaries
  std::vector<std::size_t> row_start_pixel;
  std::size_t acc = 0;
  for (const auto& lv : cfg.levels) {
    for (std::size_t r = 0; r < lv.height; ++r) {
      row_start_pixel.push_back(acc);
      acc += lv.width + 1;
    }
  }
  const std::size_t rows = row_start_pixel.size();
  const std::size_t shards = kp.scatter.shards;
  kp.scatter.shard_row_begin.assign(shards + 1, rows);
  kp.scatter.shard_row_begin[0] = 0;
  std::size_t row = 0;
  for (std::size_t s = 1; s < shards; ++s) {
    const std::size_t target = acc * s / shards;
    while (row < rows && row_start_pixel[row] < target) ++row;
    kp.scatter.shard_row_begin[s] = row;
  }
  return kp;
}

}  // namespace msda
