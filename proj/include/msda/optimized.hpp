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

#pragma once

// Tiled, multi-threaded MSDA kernels.
//
// The value pyramid is repacked pixel-last, so each (batch, head, channel)
// is one contiguous single-channel map per level, and sampling proceeds one
// channel plane at a time over a chunk of precomputed corner indices and
// weights. Each optimization sits behind its own flag:
//
//   adaptive_veclen  per-level chunk length sized to the tile budget
//   gather_fusion    fetch the (x0, x1) corner pair as one 2-element read from
//                    a padded layout (row stride width + 1, zero pad column)
//   staggered_write  backward scatter through a shard rotation instead of
//                    atomic adds
//   scatter_fusion   combine the two same-row corner updates into one
//                    2-element read-modify-write
//
// Every flag combination computes the same values as the reference kernels
// up to float rounding; the flags only change speed.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "msda/config.hpp"
#include "msda/pyramid.hpp"
#include "msda/reference.hpp"
#include "msda/tensor.hpp"

namespace msda {

// On-chip buffer size of the accelerator this design targets (192 KiB).
inline constexpr std::size_t kDefaultTileBudget = 196608;
inline constexpr std::size_t kMinChunkPoints = 8;
inline constexpr std::size_t kMaxChunkPoints = 4096;

std::size_t default_workers() noexcept;

struct OptFlags {
  bool adaptive_veclen = true;
  bool gather_fusion = true;
  bool staggered_write = true;
  bool scatter_fusion = true;
  std::size_t tile_budget_bytes = kDefaultTileBudget;
  std::size_t workers = default_workers();
  // Element type of the per-point samples kept in Train mode.
  Dtype saved_dtype = Dtype::F32;
  // Test hook: perturbs one forward output element so checkers can be
  // shown to fail. Never set outside tests.
  bool inject_fault = false;
};

struct LevelPlan {
  std::size_t chunk_points = 0;   // sampling points per inner pass (power of two)
  std::size_t chunk_queries = 0;  // max(1, chunk_points / points)
  std::size_t point_bytes = 0;    // buffer bytes per sampling point
  std::size_t row_bytes = 0;      // one F32 row of the level
};

struct WorkRange {
  std::size_t begin = 0;  // flat (batch * queries + query)
  std::size_t end = 0;
};

struct ScatterPlan {
  bool staggered = false;
  bool fused = false;
  std::size_t shards = 1;
  // shard s covers global rows [shard_row_begin[s], shard_row_begin[s + 1]);
  // rows are numbered level by level.
  std::vector<std::size_t> shard_row_begin;
};

struct KernelPlan {
  Layout value_layout = Layout::PixelLastPadded;
  Layout grad_layout = Layout::PixelLastPadded;
  std::vector<LevelPlan> levels;
  std::vector<WorkRange> partition;  // one entry per worker
  ScatterPlan scatter;
};

// Deterministic. Throws PlanError when the budget cannot hold the smallest
// chunk, InputError for zero workers.
KernelPlan plan(const MsdaConfig& cfg, const OptFlags& flags);

// value may be in any layout; it is repacked internally as needed.
ForwardResult msda_forward_opt(const FeaturePyramid& value, const SamplingTensors& sampling,
                               const MsdaConfig& cfg, const OptFlags& flags);

// When `saved` is present (a Train-mode forward result) the per-point samples
// are taken from it instead of being re-blended from gathered corners.
MsdaGrads msda_backward_opt(const FeaturePyramid& value, const SamplingTensors& sampling,
                            const MsdaConfig& cfg, const OptFlags& flags,
                            const Tensor& grad_output,
                            const std::optional<SavedForward>& saved = std::nullopt);

namespace detail {

// Backward result with grad_value left in the kernel's internal layout
// (PixelLast or PixelLastPadded), for inspecting pad columns.
struct NativeGrads {
  FeaturePyramid grad_value;
  Tensor grad_locations;
  Tensor grad_weights;
};

NativeGrads backward_opt_native(const FeaturePyramid& value, const SamplingTensors& sampling,
                                const MsdaConfig& cfg, const OptFlags& flags,
                                const Tensor& grad_output,
                                const std::optional<SavedForward>& saved);

}  // namespace detail

}  // namespace msda
