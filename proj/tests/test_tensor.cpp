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


#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "msda/error.hpp"
#include "msda/fixtures.hpp"
#include "msda/pyramid.hpp"
#include "msda/tensor.hpp"

namespace msda {
namespace {

using Shapes = std::vector<std::pair<std::size_t, std::size_t>>;

// binary16 decoded from its fields, independent of the library code.
double decode_half(std::uint16_t h) {
  const int sign = (h >> 15) ? -1 : 1;
  const int exp = (h >> 10) & 0x1f;
  const int mant = h & 0x3ff;
  if (exp == 0) return sign * std::ldexp(mant, -24);
  if (exp == 31) return mant ? std::numeric_limits<double>::quiet_NaN()
                             : sign * std::numeric_limits<double>::infinity();
  return sign * std::ldexp(1024 + mant, exp - 25);
}

float f16_to_f32(std::uint16_t bits) { return Tensor::from_f16_bits({1}, {bits}).get(0); }

std::uint16_t f32_to_f16(float v) {
  return Tensor::from_f32({1}, {v}).cast(Dtype::F16).f16()[0];
}

TEST(Half, DecodesEveryBitPattern) {
  for (std::uint32_t bits = 0; bits <= 0xffff; ++bits) {
    const double want = decode_half(static_cast<std::uint16_t>(bits));
    const float got = f16_to_f32(static_cast<std::uint16_t>(bits));
    if (std::isnan(want)) {
      ASSERT_TRUE(std::isnan(got)) << bits;
    } else {
      ASSERT_EQ(static_cast<double>(got), want) << bits;
    }
  }
}

TEST(Half, EncodeIsExactInverseOnHalfValues) {
  for (std::uint32_t bits = 0; bits <= 0xffff; ++bits) {
    const auto h = static_cast<std::uint16_t>(bits);
    if (std::isnan(decode_half(h))) continue;
    ASSERT_EQ(f32_to_f16(static_cast<float>(decode_half(h))), h) << bits;
  }
}

TEST(Half, TiesRoundToEven) {
  // Midpoints between adjacent finite positive halves are exact in f32.
  for (std::uint32_t bits = 0; bits < 0x7bff; ++bits) {
    const double lo = decode_half(static_cast<std::uint16_t>(bits));
    const double hi = decode_half(static_cast<std::uint16_t>(bits + 1));
    const float mid = static_cast<float>(0.5 * (lo + hi));
    ASSERT_EQ(static_cast<double>(mid), 0.5 * (lo + hi));
    const std::uint16_t even = (bits % 2 == 0) ? bits : bits + 1;
    ASSERT_EQ(f32_to_f16(mid), even) << bits;
    ASSERT_EQ(f32_to_f16(std::nextafter(mid, 0.0f)), bits) << bits;
    ASSERT_EQ(f32_to_f16(std::nextafter(mid, 1e9f)), bits + 1) << bits;
    ASSERT_EQ(f32_to_f16(-mid), static_cast<std::uint16_t>(0x8000u | even)) << bits;
  }
}

TEST(Half, OverflowGoesToInfinity) {
  EXPECT_EQ(f32_to_f16(65504.0f), 0x7bff);
  EXPECT_EQ(f32_to_f16(65520.0f), 0x7c00);
  EXPECT_EQ(f32_to_f16(-1e10f), 0xfc00);
}

TEST(Tensor, ZeroExtentIsSizeError) {
  EXPECT_THROW(Tensor({0}, Dtype::F32), SizeError);
  EXPECT_THROW(Tensor({}, Dtype::F32), SizeError);
  const std::size_t big = std::numeric_limits<std::size_t>::max() / 2;
  EXPECT_THROW(Tensor({big, 4}, Dtype::F32), SizeError);
}

TEST(Tensor, FromF32ChecksSize) {
  EXPECT_THROW(Tensor::from_f32({3}, {1.0f, 2.0f}), SizeError);
  const Tensor t = Tensor::from_f32({2}, {1.0f, 2.0f});
  EXPECT_EQ(t.get(1), 2.0f);
  EXPECT_THROW(t.f16(), InputError);
}

TEST(Tensor, DataIsCacheLineAligned) {
  const Tensor small({3}, Dtype::F32);
  const Tensor large({3u << 20}, Dtype::F16);
  EXPECT_EQ(reinterpret_cast<std::uintptr_t>(small.f32().data()) % 64, 0u);
  EXPECT_EQ(reinterpret_cast<std::uintptr_t>(large.f16().data()) % 64, 0u);
  EXPECT_EQ(large.get(12345), 0.0f);
}

TEST(MakePyramid, SequentialSingleLevel) {
  const Shapes shapes{{2, 2}};
  const auto p = make_pyramid(1, 1, 1, shapes, Dtype::F32, Fill::sequential());
  EXPECT_EQ(p.total_pixels(), 4u);
  EXPECT_EQ(p.layout, Layout::ChannelLast);
  EXPECT_EQ(p.storage.to_f32_vector(), (std::vector<float>{0, 1, 2, 3}));
}

TEST(MakePyramid, PaperGeometry) {
  const Shapes shapes{{256, 256}, {128, 128}, {64, 64}, {32, 32}, {16, 16}};
  const auto p = make_pyramid(1, 8, 32, shapes, Dtype::F16, Fill::random(1));
  EXPECT_EQ(p.total_pixels(), 87296u);
  EXPECT_EQ(p.storage.dims(), (std::vector<std::size_t>{1, 87296, 8, 32}));
  EXPECT_EQ(p.levels[4].offset, 87296u - 256u);
}

TEST(MakePyramid, SingleZeroPixel) {
  const Shapes shapes{{1, 1}};
  const auto p = make_pyramid(1, 1, 1, shapes, Dtype::F32, Fill::zeros());
  EXPECT_EQ(p.storage.to_f32_vector(), (std::vector<float>{0.0f}));
}

TEST(MakePyramid, RejectsBadExtents) {
  const Shapes ok{{2, 2}};
  const Shapes zero{{0, 2}};
  EXPECT_THROW(make_pyramid(0, 1, 1, ok, Dtype::F32, Fill::zeros()), SizeError);
  EXPECT_THROW(make_pyramid(1, 1, 1, zero, Dtype::F32, Fill::zeros()), SizeError);
  const std::size_t huge = std::size_t{1} << 40;
  const Shapes big{{huge, huge}};
  EXPECT_THROW(make_pyramid(1, 1, 1, big, Dtype::F32, Fill::zeros()), SizeError);
}

TEST(MakePyramid, SeededFillIsReproducible) {
  const Shapes shapes{{3, 5}, {2, 2}};
  const auto a = make_pyramid(2, 2, 3, shapes, Dtype::F32, Fill::random(9));
  const auto b = make_pyramid(2, 2, 3, shapes, Dtype::F32, Fill::random(9));
  const auto c = make_pyramid(2, 2, 3, shapes, Dtype::F32, Fill::random(10));
  EXPECT_TRUE(a.storage == b.storage);
  EXPECT_FALSE(a.storage == c.storage);
}

TEST(Layout, SingleChannelIsLayoutInvariant) {
  const Shapes shapes{{2, 2}};
  const auto p = make_pyramid(1, 1, 1, shapes, Dtype::F32, Fill::sequential());
  EXPECT_EQ(to_pixel_last(p, false).storage.to_f32_vector(), (std::vector<float>{0, 1, 2, 3}));
}

TEST(Layout, PaddedStrideByHand) {
  const Shapes shapes{{2, 2}};
  const auto p = make_pyramid(1, 1, 1, shapes, Dtype::F32, Fill::sequential());
  const auto q = to_pixel_last(p, true);
  EXPECT_EQ(q.layout, Layout::PixelLastPadded);
  EXPECT_EQ(q.storage.to_f32_vector(), (std::vector<float>{0, 1, 0, 2, 3, 0}));
}

TEST(Layout, PixelLastIndexing) {
  const Shapes shapes{{3, 4}, {2, 3}};
  const std::size_t B = 2, H = 3, C = 2;
  const auto p = make_pyramid(B, H, C, shapes, Dtype::F32, Fill::random(4));
  const auto q = to_pixel_last(p, false);
  const auto r = to_pixel_last(p, true);
  const std::size_t T = p.total_pixels();
  const std::size_t Tp = total_padded_pixels(p.levels);
  const auto src = p.storage.to_f32_vector();
  const auto pl = q.storage.to_f32_vector();
  const auto pp = r.storage.to_f32_vector();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t c = 0; c < C; ++c) {
        std::size_t padded = 0;
        for (const auto& lv : p.levels) {
          for (std::size_t y = 0; y < lv.height; ++y) {
            for (std::size_t x = 0; x < lv.width; ++x) {
              const std::size_t pix = lv.offset + y * lv.width + x;
              const float v = src[((b * T + pix) * H + h) * C + c];
              ASSERT_EQ(pl[((b * H + h) * C + c) * T + pix], v);
              ASSERT_EQ(pp[((b * H + h) * C + c) * Tp + padded + y * (lv.width + 1) + x], v);
            }
            ASSERT_EQ(pp[((b * H + h) * C + c) * Tp + padded + y * (lv.width + 1) + lv.width], 0.0f);
          }
          padded += lv.height * (lv.width + 1);
        }
      }
    }
  }
}

TEST(Layout, RoundTripIsBitExact) {
  const Shapes shapes{{4, 3}, {2, 5}, {1, 1}};
  for (Dtype dt : {Dtype::F32, Dtype::F16}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto p = make_pyramid(2, 4, 3, shapes, dt, Fill::random(seed));
      for (bool padded : {false, true}) {
        const auto q = to_pixel_last(p, padded);
        EXPECT_EQ(count_nonzero_padding(q), 0u);
        EXPECT_TRUE(to_channel_last(q).storage == p.storage);
        EXPECT_TRUE(relayout(q, Layout::ChannelLast).storage == p.storage);
      }
    }
  }
}

TEST(Layout, ValidateRejectsInconsistentStorage) {
  const Shapes shapes{{2, 2}};
  auto p = make_pyramid(1, 1, 2, shapes, Dtype::F32, Fill::zeros());
  p.channels = 3;
  EXPECT_ANY_THROW(p.validate());
}

std::string bytes_of(const Tensor& t) {
  std::ostringstream os;
  write_tensor(t, os);
  return os.str();
}

TEST(Xmsd, HeaderLayoutByHand) {
  const std::string got = bytes_of(Tensor::from_f32({2}, {1.0f, 2.0f}));
  const unsigned char want[] = {
      'X', 'M', 'S', 'D',                              // magic
      1, 0, 0, 0,                                      // version
      0, 0, 0, 0,                                      // dtype f32
      1, 0, 0, 0,                                      // rank
      2, 0, 0, 0, 0, 0, 0, 0,                          // dims[0]
      0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0x40,  // 1.0f, 2.0f
  };
  ASSERT_EQ(got.size(), sizeof want);
  EXPECT_EQ(std::memcmp(got.data(), want, sizeof want), 0);
  EXPECT_EQ(xmsd_header_bytes(1), 24u);
}

TEST(Xmsd, RoundTripRanksOneToSix) {
  for (Dtype dt : {Dtype::F32, Dtype::F16}) {
    std::vector<std::size_t> dims;
    for (std::size_t rank = 1; rank <= 6; ++rank) {
      dims.push_back(rank % 3 + 1);
      const Tensor t = random_tensor(dims, dt, rank);
      std::stringstream ss;
      write_tensor(t, ss);
      const Tensor u = read_tensor(ss);
      EXPECT_TRUE(u == t) << "rank " << rank;
      EXPECT_EQ(bytes_of(u), bytes_of(t));
    }
  }
}

TEST(Xmsd, ErrorsCarryByteOffsets) {
  std::string good = bytes_of(Tensor::from_f32({2}, {1.0f, 2.0f}));
  {
    std::string bad = good;
    bad[0] = 'Y';
    std::istringstream in(bad);
    try {
      read_tensor(in);
      FAIL() << "bad magic accepted";
    } catch (const FormatError& e) {
      EXPECT_EQ(e.offset(), 0u);
    }
  }
  {
    std::string bad = good;
    bad[8] = 7;  // dtype code
    std::istringstream in(bad);
    try {
      read_tensor(in);
      FAIL() << "unknown dtype accepted";
    } catch (const FormatError& e) {
      EXPECT_EQ(e.offset(), 8u);
    }
  }
  {
    std::istringstream in(good.substr(0, good.size() - 3));
    try {
      read_tensor(in);
      FAIL() << "truncated payload accepted";
    } catch (const FormatError& e) {
      EXPECT_EQ(e.offset(), 29u);  // first missing payload byte
    }
  }
  {
    std::string bad = good;
    std::memset(bad.data() + 16, 0, 8);  // dims[0] = 0
    std::istringstream in(bad);
    EXPECT_THROW(read_tensor(in), Error);
  }
}

}  // namespace
}  // namespace msda
