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

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "msda/tensor.hpp"

namespace msda {

// One resolution of the pyramid. offset is the index of the level's first
// pixel in the flattened (unpadded) pixel axis.
struct LevelSpec {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t offset = 0;

  std::size_t pixels() const noexcept { return height * width; }
  // Row stride in the PixelLastPadded layout.
  std::size_t padded_width() const noexcept { return width + 1; }
  std::size_t padded_pixels() const noexcept { return height * (width + 1); }

  friend bool operator==(const LevelSpec&, const LevelSpec&) = default;
};

// Builds cumulative offsets for a list of (height, width) pairs.
std::vector<LevelSpec> make_levels(std::span<const std::pair<std::size_t, std::size_t>> shapes);
std::vector<LevelSpec> make_levels(std::initializer_list<std::pair<std::size_t, std::size_t>> shapes);

std::size_t total_pixels(std::span<const LevelSpec> levels) noexcept;
std::size_t total_padded_pixels(std::span<const LevelSpec> levels) noexcept;
// Offset of level l inside a padded pixel axis.
std::size_t padded_offset(std::span<const LevelSpec> levels, std::size_t level) noexcept;

// ChannelLast:      (batch, total_pixels, heads, channels)
// PixelLast:        (batch, heads, channels, total_pixels)
// PixelLastPadded:  (batch, heads, channels, total_padded_pixels); every level
//                   row is stored at stride width + 1 with a zero pad column.
enum class Layout { ChannelLast, PixelLast, PixelLastPadded };

std::string_view layout_name(Layout layout) noexcept;

struct FeaturePyramid {
  std::vector<LevelSpec> levels;
  std::size_t batch = 0;
  std::size_t heads = 0;
  std::size_t channels = 0;
  Layout layout = Layout::ChannelLast;
  Tensor storage;

  std::size_t total_pixels() const noexcept { return msda::total_pixels(levels); }
  // Length of the pixel axis in the current layout.
  std::size_t pixel_axis() const noexcept;
  Dtype dtype() const noexcept { return storage.dtype(); }

  // Expected storage dims for this geometry and layout.
  std::vector<std::size_t> expected_dims() const;
  // Throws ShapeError/SizeError if the fields disagree with each other.
  void validate() const;
};

// Sampling positions and attention weights.
//   locations: (batch, queries, heads, levels, points, 2), last axis (x, y),
//              x along the width axis, normalized to [0, 1]
//   weights:   (batch, queries, heads, levels, points)
struct SamplingTensors {
  Tensor locations;
  Tensor weights;
};

struct Fill {
  enum class Kind { Zeros, Sequential, RandomSeeded };
  Kind kind = Kind::Zeros;
  std::uint64_t seed = 0;

  static Fill zeros() { return {Kind::Zeros, 0}; }
  static Fill sequential() { return {Kind::Sequential, 0}; }
  static Fill random(std::uint64_t seed) { return {Kind::RandomSeeded, seed}; }
};

// ChannelLast pyramid. Sequential fill stores the flat storage index;
// RandomSeeded draws uniform values in [-1, 1) from mt19937_64.
FeaturePyramid make_pyramid(std::size_t batch, std::size_t heads, std::size_t channels,
                            std::span<const std::pair<std::size_t, std::size_t>> level_shapes,
                            Dtype dtype, Fill fill);

// Converts between any two layouts. Content-preserving and bit-exact.
FeaturePyramid relayout(const FeaturePyramid& p, Layout target);

// Requires p.layout == ChannelLast.
FeaturePyramid to_pixel_last(const FeaturePyramid& p, bool padded);
FeaturePyramid to_channel_last(const FeaturePyramid& p);

// Number of non-zero elements in the pad column of a PixelLastPadded
// pyramid (0 for other layouts).
std::size_t count_nonzero_padding(const FeaturePyramid& p);

}  // namespace msda
