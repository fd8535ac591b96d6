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

#include "msda/pyramid.hpp"

#include <bit>
#include <limits>
#include <random>
#include <string>

#include "msda/error.hpp"
#include "msda/half.hpp"

namespace msda {

namespace {

std::size_t checked_mul(std::size_t a, std::size_t b, const char* what) {
  if (b != 0 && a > std::numeric_limits<std::size_t>::max() / b) {
    throw SizeError(std::string(what) + " overflows");
  }
  return a * b;
}

// Position of (level, row, col) along the pixel axis of a layout.
struct PixelIndexer {
  std::span<const LevelSpec> levels;
  std::vector<std::size_t> padded_base;

  explicit PixelIndexer(std::span<const LevelSpec> lv) : levels(lv) {
    padded_base.reserve(lv.size());
    std::size_t acc = 0;
    for (const auto& l : lv) {
      padded_base.push_back(acc);
      acc += l.padded_pixels();
    }
  }

  std::size_t at(Layout layout, std::size_t level, std::size_t row, std::size_t col) const {
    const auto& l = levels[level];
    if (layout == Layout::PixelLastPadded) {
      return padded_base[level] + row * l.padded_width() + col;
    }
    return l.offset + row * l.width + col;
  }
};

std::size_t element_index(const FeaturePyramid& p, std::size_t axis_len, Layout layout,
                          std::size_t b, std::size_t pix, std::size_t h, std::size_t c) {
  if (layout == Layout::ChannelLast) {
    return ((b * axis_len + pix) * p.heads + h) * p.channels + c;
  }
  return ((b * p.heads + h) * p.channels + c) * axis_len + pix;
}

}  // namespace

std::vector<LevelSpec> make_levels(std::span<const std::pair<std::size_t, std::size_t>> shapes) {
  std::vector<LevelSpec> levels;
  levels.reserve(shapes.size());
  std::size_t offset = 0;
  for (const auto& [h, w] : shapes) {
    if (h == 0 || w == 0) {
      throw SizeError("level " + std::to_string(levels.size()) + " has a zero extent");
    }
    levels.push_back({h, w, offset});
    offset += checked_mul(h, w, "level pixel count");
    if (offset < h * w) {
      throw SizeError("total pixel count overflows");
    }
  }
  return levels;
}

std::vector<LevelSpec> make_levels(std::initializer_list<std::pair<std::size_t, std::size_t>> shapes) {
  return make_levels(std::span(shapes.begin(), shapes.size()));
}

std::size_t total_pixels(std::span<const LevelSpec> levels) noexcept {
  std::size_t n = 0;
  for (const auto& l : levels) n += l.pixels();
  return n;
}

std::size_t total_padded_pixels(std::span<const LevelSpec> levels) noexcept {
  std::size_t n = 0;
  for (const auto& l : levels) n += l.padded_pixels();
  return n;
}

std::size_t padded_offset(std::span<const LevelSpec> levels, std::size_t level) noexcept {
  std::size_t n = 0;
  for (std::size_t i = 0; i < level; ++i) n += levels[i].padded_pixels();
  return n;
}

std::string_view layout_name(Layout layout) noexcept {
  switch (layout) {
    case Layout::ChannelLast:
      return "channel_last";
    case Layout::PixelLast:
      return "pixel_last";
    case Layout::PixelLastPadded:
      return "pixel_last_padded";
  }
  return "?";
}

std::size_t FeaturePyramid::pixel_axis() const noexcept {
  return layout == Layout::PixelLastPadded ? total_padded_pixels(levels) : total_pixels();
}

std::vector<std::size_t> FeaturePyramid::expected_dims() const {
  if (layout == Layout::ChannelLast) {
    return {batch, total_pixels(), heads, channels};
  }
  return {batch, heads, channels, pixel_axis()};
}

void FeaturePyramid::validate() const {
  if (levels.empty()) throw ShapeError("pyramid has no levels");
  if (batch == 0) throw ShapeError("pyramid batch is zero");
  if (heads == 0) throw ShapeError("pyramid heads is zero");
  if (channels == 0) throw ShapeError("pyramid channels is zero");
  std::size_t offset = 0;
  for (std::size_t l = 0; l < levels.size(); ++l) {
    if (levels[l].height == 0 || levels[l].width == 0) {
      throw ShapeError("level " + std::to_string(l) + " has a zero extent");
    }
    if (levels[l].offset != offset) {
      throw ShapeError("level " + std::to_string(l) + " offset is not cumulative");
    }
    offset += levels[l].pixels();
  }
  const auto want = expected_dims();
  if (storage.dims() != want) {
    static constexpr const char* kCl[] = {"batch", "pixels", "heads", "channels"};
    static constexpr const char* kPl[] = {"batch", "heads", "channels", "pixels"};
    if (storage.rank() != 4) {
      throw ShapeError("pyramid storage must have rank 4, got " + std::to_string(storage.rank()));
    }
    for (std::size_t i = 0; i < 4; ++i) {
      if (storage.dim(i) != want[i]) {
        const char* axis = layout == Layout::ChannelLast ? kCl[i] : kPl[i];
        throw ShapeError("pyramid storage axis '" + std::string(axis) + "' is " +
                         std::to_string(storage.dim(i)) + ", expected " + std::to_string(want[i]));
      }
    }
  }
}

FeaturePyramid make_pyramid(std::size_t batch, std::size_t heads, std::size_t channels,
                            std::span<const std::pair<std::size_t, std::size_t>> level_shapes,
                            Dtype dtype, Fill fill) {
  if (batch == 0 || heads == 0 || channels == 0) {
    throw SizeError("batch, heads and channels must be positive");
  }
  if (level_shapes.empty()) {
    throw SizeError("a pyramid needs at least one level");
  }
  FeaturePyramid p;
  p.levels = make_levels(level_shapes);
  p.batch = batch;
  p.heads = heads;
  p.channels = channels;
  p.layout = Layout::ChannelLast;
  p.storage = Tensor(p.expected_dims(), dtype);

  switch (fill.kind) {
    case Fill::Kind::Zeros:
      break;
    case Fill::Kind::Sequential:
      for (std::size_t i = 0; i < p.storage.size(); ++i) {
        p.storage.set(i, static_cast<float>(i));
      }
      break;
    case Fill::Kind::RandomSeeded: {
      std::mt19937_64 rng(fill.seed);
      for (std::size_t i = 0; i < p.storage.size(); ++i) {
        // top 24 bits -> [0, 1), then to [-1, 1)
        const float u = static_cast<float>(rng() >> 40) * 0x1.0p-24f;
        p.storage.set(i, 2.0f * u - 1.0f);
      }
      break;
    }
  }
  return p;
}

FeaturePyramid relayout(const FeaturePyramid& p, Layout target) {
  p.validate();
  if (p.layout == target) return p;

  FeaturePyramid out;
  out.levels = p.levels;
  out.batch = p.batch;
  out.heads = p.heads;
  out.channels = p.channels;
  out.layout = target;
  out.storage = Tensor(out.expected_dims(), p.dtype());

  const PixelIndexer idx(p.levels);
  const std::size_t src_axis = p.pixel_axis();
  const std::size_t dst_axis = out.pixel_axis();

  auto copy_all = [&](auto src, auto dst) {
    for (std::size_t b = 0; b < p.batch; ++b) {
      for (std::size_t l = 0; l < p.levels.size(); ++l) {
        const auto& lv = p.levels[l];
        for (std::size_t row = 0; row < lv.height; ++row) {
          for (std::size_t col = 0; col < lv.width; ++col) {
            const std::size_t sp = idx.at(p.layout, l, row, col);
            const std::size_t dp = idx.at(target, l, row, col);
            for (std::size_t h = 0; h < p.heads; ++h) {
              for (std::size_t c = 0; c < p.channels; ++c) {
                dst[element_index(out, dst_axis, target, b, dp, h, c)] =
                    src[element_index(p, src_axis, p.layout, b, sp, h, c)];
              }
            }
          }
        }
      }
    }
  };
  // pad columns of a padded target stay at the zero fill from construction
  if (p.dtype() == Dtype::F32) {
    copy_all(p.storage.f32(), out.storage.f32());
  } else {
    copy_all(p.storage.f16(), out.storage.f16());
  }
  return out;
}

FeaturePyramid to_pixel_last(const FeaturePyramid& p, bool padded) {
  if (p.layout != Layout::ChannelLast) {
    throw InputError("to_pixel_last expects a channel_last pyramid, got " +
                     std::string(layout_name(p.layout)));
  }
  return relayout(p, padded ? Layout::PixelLastPadded : Layout::PixelLast);
}

FeaturePyramid to_channel_last(const FeaturePyramid& p) { return relayout(p, Layout::ChannelLast); }

std::size_t count_nonzero_padding(const FeaturePyramid& p) {
  if (p.layout != Layout::PixelLastPadded) return 0;
  const std::size_t axis = p.pixel_axis();
  std::size_t nonzero = 0;
  const std::size_t planes = p.batch * p.heads * p.channels;
  for (std::size_t plane = 0; plane < planes; ++plane) {
    std::size_t base = plane * axis;
    for (const auto& lv : p.levels) {
      for (std::size_t row = 0; row < lv.height; ++row) {
        const std::size_t at = base + row * lv.padded_width() + lv.width;
        // compare bit patterns so a -0.0 pad also counts as dirty
        const bool dirty = p.dtype() == Dtype::F32
                               ? std::bit_cast<std::uint32_t>(p.storage.f32()[at]) != 0
                               : p.storage.f16()[at] != 0;
        nonzero += dirty ? 1 : 0;
      }
      base += lv.padded_pixels();
    }
  }
  return nonzero;
}

}  // namespace msda
