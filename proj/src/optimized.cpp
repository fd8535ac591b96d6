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
#include <atomic>
#include <barrier>
#include <cmath>
#include <cstring>
#include <exception>
#include <string>
#include <thread>
#include <type_traits>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

#include "msda/error.hpp"
#include "msda/half.hpp"

namespace msda {

namespace {

// ---------------------------------------------------------------------------
// threads

template <class Fn>
void run_parallel(std::size_t n, Fn&& fn) {
  if (n <= 1) {
    fn(std::size_t{0});
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  {
    std::vector<std::jthread> threads;
    threads.reserve(n - 1);
    for (std::size_t w = 1; w < n; ++w) {
      threads.emplace_back([&, w] {
        try {
          fn(w);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    try {
      fn(std::size_t{0});
    } catch (...) {
      errors[0] = std::current_exception();
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ---------------------------------------------------------------------------
// element access

inline float load1(const float* p) { return *p; }
inline float load1(const std::uint16_t* p) { return half_to_float(*p); }

struct Pair {
  float x0;
  float x1;
};

// One contiguous two-element fetch.
inline Pair load2(const float* p) {
  Pair r;
  std::memcpy(&r, p, sizeof(r));
  return r;
}

inline Pair load2(const std::uint16_t* p) {
  std::uint16_t h[2];
  std::memcpy(h, p, sizeof(h));
  return {half_to_float(h[0]), half_to_float(h[1])};
}

// grad_value is accumulated in double and rounded once at the end, so the
// result does not depend on the order in which workers add into a pixel.
using GradAcc = double;

struct AccPair {
  GradAcc x0, x1;
};

inline void rmw2(GradAcc* p, float a, float b) {
  AccPair v;
  std::memcpy(&v, p, sizeof(v));
  v.x0 += a;
  v.x1 += b;
  std::memcpy(p, &v, sizeof(v));
}

inline void atomic_add(GradAcc* p, float v) {
  std::atomic_ref<GradAcc>(*p).fetch_add(v, std::memory_order_relaxed);
}

// Pair update with a single 128-bit compare-exchange when the pair is
// 16-byte aligned; two scalar atomics otherwise.
inline void atomic_add2(GradAcc* p, float a, float b) {
#if defined(__GCC_HAVE_SYNC_COMPARE_AND_SWAP_16)
  if ((reinterpret_cast<std::uintptr_t>(p) & 15u) == 0) {
    auto* word = reinterpret_cast<unsigned __int128*>(p);
    unsigned __int128 expected = *reinterpret_cast<volatile unsigned __int128*>(word);
    for (;;) {
      AccPair v;
      std::memcpy(&v, &expected, sizeof(v));
      v.x0 += a;
      v.x1 += b;
      unsigned __int128 desired;
      std::memcpy(&desired, &v, sizeof(desired));
      const unsigned __int128 seen = __sync_val_compare_and_swap(word, expected, desired);
      if (seen == expected) return;
      expected = seen;
    }
  }
#endif
  atomic_add(p, a);
  atomic_add(p + 1, b);
}

// ---------------------------------------------------------------------------
// geometry

struct LevelGeom {
  std::int32_t height = 0;
  std::int32_t width = 0;
  std::int32_t vbase = 0;    // level start in the value pixel axis
  std::int32_t vstride = 0;  // value row stride
  std::int32_t gbase = 0;    // level start in the grad pixel axis
  std::int32_t gstride = 0;
  std::size_t row_begin = 0;  // global row number of row 0
};

std::vector<LevelGeom> level_geometry(const MsdaConfig& cfg, bool vpad, bool gpad) {
  std::vector<LevelGeom> g;
  std::size_t upad = 0;
  std::size_t pad = 0;
  std::size_t rows = 0;
  for (const auto& lv : cfg.levels) {
    LevelGeom e;
    e.height = static_cast<std::int32_t>(lv.height);
    e.width = static_cast<std::int32_t>(lv.width);
    e.vbase = static_cast<std::int32_t>(vpad ? pad : upad);
    e.vstride = static_cast<std::int32_t>(vpad ? lv.width + 1 : lv.width);
    e.gbase = static_cast<std::int32_t>(gpad ? pad : upad);
    e.gstride = static_cast<std::int32_t>(gpad ? lv.width + 1 : lv.width);
    e.row_begin = rows;
    g.push_back(e);
    upad += lv.pixels();
    pad += lv.padded_pixels();
    rows += lv.height;
  }
  return g;
}

// Bilinear cell of one sampling point; same arithmetic as the reference.
struct Cell {
  std::int32_t h0;
  std::int32_t w0;
  float lh;
  float lw;
  float w[4];  // tl, tr, bl, br, zeroed where the corner is outside the map
  float m[4];  // 1 where the corner is inside the map
  bool top_ok;
  bool bot_ok;
};

inline Cell locate(float x, float y, std::int32_t height, std::int32_t width) {
  const float h_im = y * static_cast<float>(height) - 0.5f;
  const float w_im = x * static_cast<float>(width) - 0.5f;
  const float hf = std::floor(h_im);
  const float wf = std::floor(w_im);
  Cell c;
  c.lh = h_im - hf;
  c.lw = w_im - wf;
  const float hh = 1.0f - c.lh;
  const float hw = 1.0f - c.lw;
  c.h0 = static_cast<std::int32_t>(std::clamp(hf, -2.0f, static_cast<float>(height) + 1.0f));
  c.w0 = static_cast<std::int32_t>(std::clamp(wf, -2.0f, static_cast<float>(width) + 1.0f));
  c.top_ok = c.h0 >= 0 && c.h0 < height;
  c.bot_ok = c.h0 + 1 >= 0 && c.h0 + 1 < height;
  const bool left = c.w0 >= 0 && c.w0 < width;
  const bool right = c.w0 + 1 >= 0 && c.w0 + 1 < width;
  c.m[0] = c.top_ok && left ? 1.0f : 0.0f;
  c.m[1] = c.top_ok && right ? 1.0f : 0.0f;
  c.m[2] = c.bot_ok && left ? 1.0f : 0.0f;
  c.m[3] = c.bot_ok && right ? 1.0f : 0.0f;
  c.w[0] = c.m[0] != 0.0f ? hh * hw : 0.0f;
  c.w[1] = c.m[1] != 0.0f ? hh * c.lw : 0.0f;
  c.w[2] = c.m[2] != 0.0f ? c.lh * hw : 0.0f;
  c.w[3] = c.m[3] != 0.0f ? c.lh * c.lw : 0.0f;
  return c;
}

// Start of the (x0, x1) pair of a row for gathers from a padded layout. The
// column is clamped to [-1, W-1]: at -1 the pair starts on the previous row's
// pad (or the leading guard element), at W-1 it ends on this row's pad.
inline std::int32_t pair_read_offset(const LevelGeom& g, std::int32_t row, bool row_ok,
                                     std::int32_t w0) {
  if (!row_ok) return g.vbase;
  return g.vbase + row * g.vstride + std::clamp(w0, -1, g.width - 1);
}

inline std::int32_t corner_offset(std::int32_t base, std::int32_t stride, std::int32_t row,
                                  std::int32_t col, float mask) {
  return mask != 0.0f ? base + row * stride + col : base;
}

// Pair target for scatters into a padded layout. Unlike reads, writes never
// start left of column 0: at w0 = -1 the pair shifts right by one so that no
// other row's pad is touched.
struct ScatterPair {
  std::int32_t offset;
  float a;
  float b;
  bool active;
};

inline ScatterPair scatter_pair(const LevelGeom& g, std::int32_t row, bool row_ok,
                                std::int32_t w0, float wl, float wr) {
  if (!row_ok || w0 < -1 || w0 > g.width - 1) return {g.gbase, 0.0f, 0.0f, false};
  const std::int32_t start = g.gbase + row * g.gstride;
  if (w0 == -1) return {start, wr, 0.0f, true};
  return {start + w0, wl, wr, true};
}

// ---------------------------------------------------------------------------
// packing

// Pixel-last planes with one zero guard element at each end.
template <class S>
struct Planes {
  std::vector<S> data;
  std::size_t axis = 0;
  const S* base() const { return data.data() + 1; }
  S* base() { return data.data() + 1; }
};

template <class S>
std::span<const S> storage_span(const Tensor& t) {
  if constexpr (std::is_same_v<S, float>) {
    return t.f32();
  } else {
    return t.f16();
  }
}

std::vector<std::int32_t> pixel_positions(const MsdaConfig& cfg, bool padded) {
  std::vector<std::int32_t> pos;
  pos.reserve(total_pixels(cfg.levels));
  std::size_t base = 0;
  for (const auto& lv : cfg.levels) {
    const std::size_t stride = padded ? lv.width + 1 : lv.width;
    for (std::size_t r = 0; r < lv.height; ++r) {
      for (std::size_t c = 0; c < lv.width; ++c) {
        pos.push_back(static_cast<std::int32_t>(base + r * stride + c));
      }
    }
    base += lv.height * stride;
  }
  return pos;
}

template <class S>
Planes<S> pack_value(const FeaturePyramid& value, const MsdaConfig& cfg, bool padded) {
  const FeaturePyramid& cl_ref = value;
  FeaturePyramid converted;
  const FeaturePyramid* cl = &cl_ref;
  if (value.layout != Layout::ChannelLast) {
    converted = to_channel_last(value);
    cl = &converted;
  }
  Planes<S> planes;
  planes.axis = padded ? total_padded_pixels(cfg.levels) : total_pixels(cfg.levels);
  const std::size_t E = cfg.embed_dim();
  const std::size_t np = total_pixels(cfg.levels);
  planes.data.assign(2 + cfg.batch * E * planes.axis, S{0});
  const auto pos = pixel_positions(cfg, padded);
  const auto src = storage_span<S>(cl->storage);
  constexpr std::size_t kBlock = 16;
  for (std::size_t b = 0; b < cfg.batch; ++b) {
    S* dst = planes.base() + b * E * planes.axis;
    const S* in = src.data() + b * np * E;
    for (std::size_t p0 = 0; p0 < np; p0 += kBlock) {
      const std::size_t p1 = std::min(np, p0 + kBlock);
      for (std::size_t e = 0; e < E; ++e) {
        S* plane = dst + e * planes.axis;
        for (std::size_t p = p0; p < p1; ++p) plane[pos[p]] = in[p * E + e];
      }
    }
  }
  return planes;
}

Tensor unpack_grad(const GradAcc* base, std::size_t axis, const MsdaConfig& cfg, bool padded) {
  const std::size_t E = cfg.embed_dim();
  const std::size_t np = total_pixels(cfg.levels);
  std::vector<float> out(cfg.batch * np * E);
  const auto pos = pixel_positions(cfg, padded);
  constexpr std::size_t kBlock = 16;
  for (std::size_t b = 0; b < cfg.batch; ++b) {
    const GradAcc* src = base + b * E * axis;
    float* dst = out.data() + b * np * E;
    for (std::size_t p0 = 0; p0 < np; p0 += kBlock) {
      const std::size_t p1 = std::min(np, p0 + kBlock);
      for (std::size_t e = 0; e < E; ++e) {
        const GradAcc* plane = src + e * axis;
        for (std::size_t p = p0; p < p1; ++p) dst[p * E + e] = static_cast<float>(plane[pos[p]]);
      }
    }
  }
  return Tensor::from_f32({cfg.batch, np, cfg.heads, cfg.channels}, std::move(out)).cast(cfg.dtype);
}

// F32 contents of a tensor; only F16 storage is copied.
class F32View {
 public:
  F32View(const F32View&) = delete;
  F32View& operator=(const F32View&) = delete;
  explicit F32View(const Tensor& t) {
    if (t.dtype() == Dtype::F32) {
      view_ = t.f32();
    } else {
      owned_ = t.to_f32_vector();
      view_ = owned_;
    }
  }
  const float* data() const noexcept { return view_.data(); }
  std::size_t size() const noexcept { return view_.size(); }
  operator std::span<const float>() const noexcept { return view_; }

 private:
  std::vector<float> owned_;
  std::span<const float> view_;
};

void require_finite(std::span<const float> v, const char* what) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw InputError(std::string(what) + " has a non-finite entry at flat index " +
                       std::to_string(i));
    }
  }
}

// Visits every (batch, query range) segment of a worker's flat range.
template <class Fn>
void for_each_segment(const MsdaConfig& cfg, WorkRange range, Fn&& fn) {
  std::size_t i = range.begin;
  while (i < range.end) {
    const std::size_t b = i / cfg.queries;
    const std::size_t q0 = i % cfg.queries;
    const std::size_t q1 = std::min(cfg.queries, q0 + (range.end - i));
    fn(b, q0, q1);
    i += q1 - q0;
  }
}

// ---------------------------------------------------------------------------
// corner fetch
//
// fetch_corners writes the corner values (tl, tr, bl, br) of n points into
// c[0..3], unmasked; n is a multiple of kLanes. Fused: off[0] and off[1] are
// the starts of the top and bottom (x0, x1) pairs, each fetched as one
// element of a wider gather. Unfused: off[k] addresses corner k.

#if defined(__AVX512F__)
inline constexpr std::size_t kLanes = 16;
#else
inline constexpr std::size_t kLanes = 1;
#endif

// Points per fetch pass; keeps the corner buffers in L1.
inline constexpr std::size_t kFetchBlock = 256;
// Channel planes processed together per fetch block.
inline constexpr std::size_t kChannelGroup = 4;

inline std::size_t round_up(std::size_t n, std::size_t q) { return (n + q - 1) / q * q; }

template <class S, bool Fused>
void fetch_corners(const S* plane, const std::int32_t* const off[4], std::size_t n,
                   float* const c[4]) {
#if defined(__AVX512F__)
  constexpr bool kF32 = std::is_same_v<S, float>;
  if constexpr (Fused && kF32) {
    const __m512i even = _mm512_setr_epi32(0, 2, 4, 6, 8, 10, 12, 14, 16, 18, 20, 22, 24, 26, 28, 30);
    const __m512i odd = _mm512_setr_epi32(1, 3, 5, 7, 9, 11, 13, 15, 17, 19, 21, 23, 25, 27, 29, 31);
    for (std::size_t i = 0; i < n; i += kLanes) {
      for (int r = 0; r < 2; ++r) {
        const __m512i idx = _mm512_loadu_si512(off[r] + i);
        const __m512 lo =
            _mm512_castpd_ps(_mm512_i32gather_pd(_mm512_castsi512_si256(idx), plane, 4));
        const __m512 hi =
            _mm512_castpd_ps(_mm512_i32gather_pd(_mm512_extracti64x4_epi64(idx, 1), plane, 4));
        _mm512_storeu_ps(c[2 * r] + i, _mm512_permutex2var_ps(lo, even, hi));
        _mm512_storeu_ps(c[2 * r + 1] + i, _mm512_permutex2var_ps(lo, odd, hi));
      }
    }
  } else if constexpr (Fused) {
    for (std::size_t i = 0; i < n; i += kLanes) {
      for (int r = 0; r < 2; ++r) {
        const __m512i idx = _mm512_loadu_si512(off[r] + i);
        const __m512i pair = _mm512_i32gather_epi32(idx, plane, 2);
        _mm512_storeu_ps(c[2 * r] + i, _mm512_cvtph_ps(_mm512_cvtepi32_epi16(pair)));
        _mm512_storeu_ps(c[2 * r + 1] + i,
                         _mm512_cvtph_ps(_mm512_cvtepi32_epi16(_mm512_srli_epi32(pair, 16))));
      }
    }
  } else if constexpr (kF32) {
    for (std::size_t i = 0; i < n; i += kLanes) {
      for (int k = 0; k < 4; ++k) {
        const __m512i idx = _mm512_loadu_si512(off[k] + i);
        _mm512_storeu_ps(c[k] + i, _mm512_i32gather_ps(idx, plane, 4));
      }
    }
  } else {
    // 32-bit lanes at 2-byte granularity; the upper half is discarded. The
    // trailing guard element keeps the last plane's final read in bounds.
    for (std::size_t i = 0; i < n; i += kLanes) {
      for (int k = 0; k < 4; ++k) {
        const __m512i idx = _mm512_loadu_si512(off[k] + i);
        const __m512i word = _mm512_i32gather_epi32(idx, plane, 2);
        _mm512_storeu_ps(c[k] + i, _mm512_cvtph_ps(_mm512_cvtepi32_epi16(word)));
      }
    }
  }
#else
  for (std::size_t i = 0; i < n; ++i) {
    if constexpr (Fused) {
      const Pair t = load2(plane + off[0][i]);
      const Pair u = load2(plane + off[1][i]);
      c[0][i] = t.x0;
      c[1][i] = t.x1;
      c[2][i] = u.x0;
      c[3][i] = u.x1;
    } else {
      for (int k = 0; k < 4; ++k) c[k][i] = load1(plane + off[k][i]);
    }
  }
#endif
}

// ---------------------------------------------------------------------------
// saved rows
//
// Inside a chunk, samples are channel-major: cm[ch * n_pad + i] with
// i = p * nq + qi. The saved tensor holds one C-vector per sampling point.

struct ChunkRows {
  std::size_t pt0;
  std::size_t nq;
  std::size_t query_stride;

  std::size_t point(std::size_t i) const {
    const std::size_t p = i / nq;
    return pt0 + (i - p * nq) * query_stride + p;
  }
};

#if defined(__AVX512F__)
// In: r[k] is row k of a 16x16 block. Out: r[j] is column j.
inline void transpose16(__m512 r[16]) {
  __m512 t[16];
  for (int i = 0; i < 8; ++i) {
    t[2 * i] = _mm512_unpacklo_ps(r[2 * i], r[2 * i + 1]);
    t[2 * i + 1] = _mm512_unpackhi_ps(r[2 * i], r[2 * i + 1]);
  }
  __m512 u[16];
  for (int g = 0; g < 4; ++g) {
    u[4 * g + 0] = _mm512_shuffle_ps(t[4 * g], t[4 * g + 2], _MM_SHUFFLE(1, 0, 1, 0));
    u[4 * g + 1] = _mm512_shuffle_ps(t[4 * g], t[4 * g + 2], _MM_SHUFFLE(3, 2, 3, 2));
    u[4 * g + 2] = _mm512_shuffle_ps(t[4 * g + 1], t[4 * g + 3], _MM_SHUFFLE(1, 0, 1, 0));
    u[4 * g + 3] = _mm512_shuffle_ps(t[4 * g + 1], t[4 * g + 3], _MM_SHUFFLE(3, 2, 3, 2));
  }
  // u[4g + m], 128-bit lane L: rows 4g..4g+3 of column 4L + m
  for (int m = 0; m < 4; ++m) {
    const __m512 x0 = _mm512_shuffle_f32x4(u[m], u[4 + m], _MM_SHUFFLE(1, 0, 1, 0));
    const __m512 x1 = _mm512_shuffle_f32x4(u[m], u[4 + m], _MM_SHUFFLE(3, 2, 3, 2));
    const __m512 y0 = _mm512_shuffle_f32x4(u[8 + m], u[12 + m], _MM_SHUFFLE(1, 0, 1, 0));
    const __m512 y1 = _mm512_shuffle_f32x4(u[8 + m], u[12 + m], _MM_SHUFFLE(3, 2, 3, 2));
    r[m] = _mm512_shuffle_f32x4(x0, y0, _MM_SHUFFLE(2, 0, 2, 0));
    r[4 + m] = _mm512_shuffle_f32x4(x0, y0, _MM_SHUFFLE(3, 1, 3, 1));
    r[8 + m] = _mm512_shuffle_f32x4(x1, y1, _MM_SHUFFLE(2, 0, 2, 0));
    r[12 + m] = _mm512_shuffle_f32x4(x1, y1, _MM_SHUFFLE(3, 1, 3, 1));
  }
}

inline __m512 load16(const float* p) { return _mm512_loadu_ps(p); }
inline __m512 load16(const std::uint16_t* p) {
  return _mm512_cvtph_ps(_mm256_loadu_si256(reinterpret_cast<const __m256i*>(p)));
}

// Saved rows are not read again until backward: bypass the cache when the
// destination allows it.
inline void stream16(float* p, __m512 v) {
  if ((reinterpret_cast<std::uintptr_t>(p) & 63u) == 0) {
    _mm512_stream_ps(p, v);
  } else {
    _mm512_storeu_ps(p, v);
  }
}
inline void stream16(std::uint16_t* p, __m512 v) {
  const __m256i h = _mm512_cvtps_ph(v, _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
  if ((reinterpret_cast<std::uintptr_t>(p) & 31u) == 0) {
    _mm256_stream_si256(reinterpret_cast<__m256i*>(p), h);
  } else {
    _mm256_storeu_si256(reinterpret_cast<__m256i*>(p), h);
  }
}
#endif

inline void store1(float* p, float v) { *p = v; }
inline void store1(std::uint16_t* p, float v) { *p = float_to_half(v); }

// Points [0, n) of the chunk to their saved rows.
template <class T>
void store_saved(const float* cm, std::size_t n_pad, std::size_t n, std::size_t C,
                 const ChunkRows& rows, T* saved) {
#if defined(__AVX512F__)
  if (C % 16 == 0) {
    __m512 r[16];
    for (std::size_t i0 = 0; i0 < n; i0 += 16) {
      const std::size_t m = std::min<std::size_t>(16, n - i0);
      for (std::size_t c0 = 0; c0 < C; c0 += 16) {
        for (int k = 0; k < 16; ++k) r[k] = _mm512_loadu_ps(cm + (c0 + k) * n_pad + i0);
        transpose16(r);
        for (std::size_t j = 0; j < m; ++j) stream16(saved + rows.point(i0 + j) * C + c0, r[j]);
      }
    }
    return;
  }
#endif
  for (std::size_t i = 0; i < n; ++i) {
    T* dst = saved + rows.point(i) * C;
    for (std::size_t ch = 0; ch < C; ++ch) store1(dst + ch, cm[ch * n_pad + i]);
  }
}

// Saved rows of points [0, n) into cm; columns [n, n_pad) are zeroed.
template <class T>
void load_saved(const T* saved, const ChunkRows& rows, std::size_t n, std::size_t n_pad,
                std::size_t C, float* cm) {
#if defined(__AVX512F__)
  if (C % 16 == 0) {
    __m512 r[16];
    for (std::size_t i0 = 0; i0 < n_pad; i0 += 16) {
      const std::size_t m = i0 < n ? std::min<std::size_t>(16, n - i0) : 0;
      for (std::size_t c0 = 0; c0 < C; c0 += 16) {
        for (std::size_t j = 0; j < 16; ++j) {
          r[j] = j < m ? load16(saved + rows.point(i0 + j) * C + c0) : _mm512_setzero_ps();
        }
        transpose16(r);
        for (int k = 0; k < 16; ++k) _mm512_storeu_ps(cm + (c0 + k) * n_pad + i0, r[k]);
      }
    }
    return;
  }
#endif
  for (std::size_t i = 0; i < n_pad; ++i) {
    const T* src = i < n ? saved + rows.point(i) * C : nullptr;
    for (std::size_t ch = 0; ch < C; ++ch) cm[ch * n_pad + i] = src ? load1(src + ch) : 0.0f;
  }
}

inline void store_fence() {
#if defined(__AVX512F__)
  _mm_sfence();
#endif
}

// ---------------------------------------------------------------------------
// forward

inline std::size_t point_index(const MsdaConfig& cfg, std::size_t b, std::size_t q, std::size_t h,
                               std::size_t l, std::size_t p) {
  return (((b * cfg.queries + q) * cfg.heads + h) * cfg.num_levels() + l) * cfg.points + p;
}

struct ForwardScratch {
  std::vector<std::int32_t> off[4];
  std::vector<float> w[4];
  std::vector<float> aw;
  std::vector<float> samp;
  std::vector<float> corner[4];  // one fetch block
  std::vector<float> tile;       // Train: channel-major chunk samples

  void reserve(std::size_t n, std::size_t channels, bool train) {
    for (auto& v : off) v.resize(n);
    for (auto& v : w) v.resize(n);
    aw.resize(n);
    samp.resize(kFetchBlock);
    for (auto& v : corner) v.resize(kFetchBlock);
    if (train) tile.resize(round_up(n, kLanes) * channels);
  }
};

struct ForwardArgs {
  const MsdaConfig* cfg;
  const KernelPlan* plan;
  const std::vector<LevelGeom>* geom;
  const float* loc;
  const float* wts;
  float* out;
  float* saved_f32;
  std::uint16_t* saved_f16;
  std::size_t axis;
};

void blend(const float* __restrict w0, const float* __restrict w1, const float* __restrict w2,
           const float* __restrict w3, const float* __restrict c0, const float* __restrict c1,
           const float* __restrict c2, const float* __restrict c3, float* __restrict out,
           std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = w0[j] * c0[j] + w1[j] * c1[j] + w2[j] * c2[j] + w3[j] * c3[j];
  }
}

void accumulate(float* __restrict out, const float* __restrict aw, const float* __restrict samp,
                std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) out[j] += aw[j] * samp[j];
}

std::size_t max_chunk_queries(const KernelPlan& kp) {
  std::size_t m = 1;
  for (const auto& lp : kp.levels) m = std::max(m, lp.chunk_queries);
  return m;
}

std::size_t max_chunk_points(const KernelPlan& kp, std::size_t points) {
  return round_up(max_chunk_queries(kp) * points, kLanes);
}

// Visits a worker's range in blocks of at most `block` queries that never
// straddle a batch boundary.
template <class Fn>
void for_each_block(const MsdaConfig& cfg, WorkRange range, std::size_t block, Fn&& fn) {
  for_each_segment(cfg, range, [&](std::size_t b, std::size_t qb, std::size_t qe) {
    for (std::size_t q = qb; q < qe; q += block) fn(b, q, std::min(block, qe - q));
  });
}

// Prefetch distance for location rows, in queries.
inline constexpr std::size_t kPrefetchQueries = 8;

template <class S, bool Fused, bool Train>
void forward_worker(const ForwardArgs& a, const S* values, WorkRange range) {
  const MsdaConfig& cfg = *a.cfg;
  const std::size_t L = cfg.num_levels();
  const std::size_t P = cfg.points;
  const std::size_t C = cfg.channels;
  const std::size_t E = cfg.embed_dim();
  const std::size_t query_stride = cfg.heads * L * P;  // points per query
  const std::size_t block = max_chunk_queries(*a.plan);
  ForwardScratch s;
  s.reserve(max_chunk_points(*a.plan, P), C, Train);
  std::vector<float> acc(C * block);  // channel-major output tile
  const std::int32_t* const offs[4] = {s.off[0].data(), s.off[1].data(), s.off[2].data(),
                                       s.off[3].data()};
  float* const corner[4] = {s.corner[0].data(), s.corner[1].data(), s.corner[2].data(),
                            s.corner[3].data()};

  for_each_block(cfg, range, block, [&](std::size_t b, std::size_t qblk, std::size_t nb) {
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      std::fill(acc.begin(), acc.end(), 0.0f);
      for (std::size_t l = 0; l < L; ++l) {
        const LevelGeom& g = (*a.geom)[l];
        const std::size_t cq = a.plan->levels[l].chunk_queries;
        for (std::size_t q0 = qblk; q0 < qblk + nb; q0 += cq) {
          const std::size_t nq = std::min(cq, qblk + nb - q0);
          const std::size_t n = nq * P;
          const std::size_t n_pad = round_up(n, kLanes);
          // corner indices and weights for the whole chunk
          const std::size_t pt0 = point_index(cfg, b, q0, h, l, 0);
          // point-major: i = p * nq + qi
          for (std::size_t qi = 0; qi < nq; ++qi) {
            const std::size_t base = pt0 + qi * query_stride;
            if (qi + kPrefetchQueries < nq) {
              __builtin_prefetch(a.loc + 2 * (base + kPrefetchQueries * query_stride));
              __builtin_prefetch(a.wts + base + kPrefetchQueries * query_stride);
            }
            for (std::size_t p = 0; p < P; ++p) {
              const std::size_t i = p * nq + qi;
              const std::size_t pt = base + p;
              const Cell c = locate(a.loc[2 * pt], a.loc[2 * pt + 1], g.height, g.width);
              if constexpr (Fused) {
                s.off[0][i] = pair_read_offset(g, c.h0, c.top_ok, c.w0);
                s.off[1][i] = pair_read_offset(g, c.h0 + 1, c.bot_ok, c.w0);
              } else {
                for (int k = 0; k < 4; ++k) {
                  s.off[k][i] = corner_offset(g.vbase, g.vstride, c.h0 + (k >> 1), c.w0 + (k & 1), c.m[k]);
                }
              }
              for (int k = 0; k < 4; ++k) s.w[k][i] = c.w[k];
              s.aw[i] = a.wts[pt];
            }
          }
          for (std::size_t i = n; i < n_pad; ++i) {
            for (int k = 0; k < 4; ++k) {
              s.off[k][i] = g.vbase;
              s.w[k][i] = 0.0f;
            }
            s.aw[i] = 0.0f;
          }

          // A group of channels shares each fetch block's offsets and
          // weights while they are in L1; the group's planes stay in L2.
          const S* head_planes = values + (b * cfg.heads + h) * C * a.axis;
          for (std::size_t cg = 0; cg < C; cg += kChannelGroup) {
            const std::size_t cg_end = std::min(C, cg + kChannelGroup);
            for (std::size_t blk = 0; blk < n_pad; blk += kFetchBlock) {
              const std::size_t m = std::min(kFetchBlock, n_pad - blk);
              const std::size_t live = std::min(blk + m, n);
              const std::int32_t* const bo[4] = {offs[0] + blk, offs[1] + blk, offs[2] + blk,
                                                 offs[3] + blk};
              for (std::size_t ch = cg; ch < cg_end; ++ch) {
                float* samp = Train ? s.tile.data() + ch * n_pad + blk : s.samp.data();
                fetch_corners<S, Fused>(head_planes + ch * a.axis, bo, m, corner);
                blend(s.w[0].data() + blk, s.w[1].data() + blk, s.w[2].data() + blk,
                      s.w[3].data() + blk, corner[0], corner[1], corner[2], corner[3], samp, m);
                // i = p * nq + qi; a block may straddle points
                float* out = acc.data() + ch * block + (q0 - qblk);
                for (std::size_t i = blk; i < live;) {
                  const std::size_t p = i / nq;
                  const std::size_t qi = i - p * nq;
                  const std::size_t run = std::min(live, (p + 1) * nq) - i;
                  accumulate(out + qi, s.aw.data() + i, samp + (i - blk), run);
                  i += run;
                }
              }
            }
          }
          if constexpr (Train) {
            const ChunkRows rows{pt0, nq, query_stride};
            if (a.saved_f32 != nullptr) {
              store_saved(s.tile.data(), n_pad, n, C, rows, a.saved_f32);
            } else {
              store_saved(s.tile.data(), n_pad, n, C, rows, a.saved_f16);
            }
          }
        }
      }
      for (std::size_t qi = 0; qi < nb; ++qi) {
        float* row = a.out + (b * cfg.queries + qblk + qi) * E + h * C;
        for (std::size_t ch = 0; ch < C; ++ch) row[ch] = acc[ch * block + qi];
      }
    }
  });
  if constexpr (Train) store_fence();
}

template <class S>
ForwardResult forward_typed(const FeaturePyramid& value, const SamplingTensors& sampling,
                            const MsdaConfig& cfg, const OptFlags& flags) {
  const KernelPlan kp = plan(cfg, flags);
  const bool fused = flags.gather_fusion;
  const Planes<S> planes = pack_value<S>(value, cfg, fused);
  const auto geom = level_geometry(cfg, fused, flags.scatter_fusion);
  const F32View loc(sampling.locations);
  const F32View wts(sampling.weights);
  require_finite(loc, "locations");

  const bool train = cfg.mode == Mode::Train;
  std::vector<float> out(checked_element_count(cfg.output_dims()), 0.0f);
  Tensor saved;
  // every element is written by exactly one worker
  if (train) saved = Tensor::uninitialized(cfg.saved_dims(), flags.saved_dtype);

  ForwardArgs args{&cfg, &kp, &geom, loc.data(), wts.data(), out.data(), nullptr, nullptr, planes.axis};
  if (train) {
    if (flags.saved_dtype == Dtype::F32) {
      args.saved_f32 = saved.f32().data();
    } else {
      args.saved_f16 = saved.f16().data();
    }
  }
  const S* vals = planes.base();
  run_parallel(kp.partition.size(), [&](std::size_t w) {
    const WorkRange r = kp.partition[w];
    if (fused && train) forward_worker<S, true, true>(args, vals, r);
    else if (fused) forward_worker<S, true, false>(args, vals, r);
    else if (train) forward_worker<S, false, true>(args, vals, r);
    else forward_worker<S, false, false>(args, vals, r);
  });

  if (flags.inject_fault) out[0] += 1.0f;

  ForwardResult res;
  res.output = Tensor::from_f32(cfg.output_dims(), std::move(out)).cast(cfg.dtype);
  if (train) res.saved = SavedForward{std::move(saved)};
  return res;
}

// ---------------------------------------------------------------------------
// backward

struct BackwardScratch {
  std::vector<std::int32_t> voff[4];
  std::vector<std::int32_t> goff[4];
  std::vector<float> w[4];   // bilinear weights (masked)
  std::vector<float> m[4];   // corner inside-map masks
  std::vector<float> gw[4];  // scatter weights in grad-layout order
  std::vector<std::uint8_t> gact[4];
  std::vector<float> lh, lw, aw, gout;
  std::vector<float> acc_w, acc_x, acc_y;
  std::vector<float> corner[4];
  std::vector<float> tile;  // saved samples, channel-major

  void reserve(std::size_t n, std::size_t channels, bool use_saved) {
    for (int k = 0; k < 4; ++k) {
      voff[k].resize(n);
      goff[k].resize(n);
      w[k].resize(n);
      m[k].resize(n);
      gw[k].resize(n);
      gact[k].resize(n);
      corner[k].resize(kFetchBlock);
    }
    for (auto* v : {&lh, &lw, &aw, &gout, &acc_w, &acc_x, &acc_y}) v->resize(n);
    if (use_saved) tile.resize(n * channels);
  }
};

struct BackwardArgs {
  const MsdaConfig* cfg;
  const KernelPlan* plan;
  const std::vector<LevelGeom>* geom;
  const float* loc;
  const float* wts;
  const float* gout;
  const float* saved_f32;
  const std::uint16_t* saved_f16;
  GradAcc* grad;  // grad planes, no guard element (scatters never start left of col 0)
  float* grad_loc;
  float* grad_w;
  std::size_t vaxis;
  std::size_t gaxis;
  std::vector<std::uint32_t> row_shard;  // global row -> shard
};

// Grad-layout targets of one point: two pairs (fused) or four corners.
template <bool GFused>
void scatter_targets(const LevelGeom& g, const Cell& c, std::int32_t off[4], float wt[4],
                     std::uint8_t act[4]) {
  if constexpr (GFused) {
    const ScatterPair t = scatter_pair(g, c.h0, c.top_ok, c.w0, c.w[0], c.w[1]);
    const ScatterPair u = scatter_pair(g, c.h0 + 1, c.bot_ok, c.w0, c.w[2], c.w[3]);
    off[0] = t.offset;
    wt[0] = t.a;
    wt[1] = t.b;
    act[0] = t.active;
    off[1] = u.offset;
    wt[2] = u.a;
    wt[3] = u.b;
    act[1] = u.active;
    off[2] = off[3] = 0;
    act[2] = act[3] = 0;
  } else {
    for (int k = 0; k < 4; ++k) {
      off[k] = corner_offset(g.gbase, g.gstride, c.h0 + (k >> 1), c.w0 + (k & 1), c.m[k]);
      wt[k] = c.w[k];
      act[k] = c.m[k] != 0.0f;
    }
  }
}

// Row (0 = top, 1 = bottom) of scatter target k.
template <bool GFused>
constexpr int target_row(int k) {
  return GFused ? k : (k >> 1);
}

template <bool GFused, bool Atomic>
inline void scatter_point(GradAcc* plane, const std::int32_t off[4], const float wt[4],
                          const std::uint8_t act[4], float t) {
  if constexpr (GFused) {
    for (int r = 0; r < 2; ++r) {
      if (!act[r]) continue;
      if constexpr (Atomic) {
        atomic_add2(plane + off[r], t * wt[2 * r], t * wt[2 * r + 1]);
      } else {
        rmw2(plane + off[r], t * wt[2 * r], t * wt[2 * r + 1]);
      }
    }
  } else {
    for (int k = 0; k < 4; ++k) {
      if (!act[k]) continue;
      if constexpr (Atomic) {
        atomic_add(plane + off[k], t * wt[k]);
      } else {
        plane[off[k]] += static_cast<GradAcc>(t * wt[k]);
      }
    }
  }
}


// Per-point partial sums for one channel over a fetch block. With
// SavedSample the blended sample is read from `sample_in` instead of being
// recomputed from the corners.
template <bool SavedSample>
void accumulate_block(const float* __restrict w0, const float* __restrict w1,
                      const float* __restrict w2, const float* __restrict w3,
                      const float* __restrict m0, const float* __restrict m1,
                      const float* __restrict m2, const float* __restrict m3,
                      const float* __restrict c0, const float* __restrict c1,
                      const float* __restrict c2, const float* __restrict c3,
                      const float* __restrict lh, const float* __restrict lw,
                      const float* __restrict g, const float* __restrict sample_in,
                      float* __restrict acc_w, float* __restrict acc_x, float* __restrict acc_y,
                      std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    const float v0 = m0[j] * c0[j];
    const float v1 = m1[j] * c1[j];
    const float v2 = m2[j] * c2[j];
    const float v3 = m3[j] * c3[j];
    float sample;
    if constexpr (SavedSample) {
      sample = sample_in[j];
    } else {
      sample = w0[j] * v0 + w1[j] * v1 + w2[j] * v2 + w3[j] * v3;
    }
    const float gc = g[j];
    acc_w[j] += gc * sample;
    acc_x[j] += gc * ((1.0f - lh[j]) * (v1 - v0) + lh[j] * (v3 - v2));
    acc_y[j] += gc * ((1.0f - lw[j]) * (v2 - v0) + lw[j] * (v3 - v1));
  }
}

// Round 0 of the backward pass for one worker. With Staggered, only targets in
// shard `own` are written; points with targets elsewhere are appended to
// overflow[shard] for the drain rounds. Without it, every target is written
// with atomic adds.
template <class S, bool VFused, bool GFused, bool Staggered>
void backward_worker(const BackwardArgs& a, const S* values, WorkRange range, std::size_t own,
                     std::vector<std::vector<std::uint32_t>>* overflow) {
  const MsdaConfig& cfg = *a.cfg;
  const std::size_t L = cfg.num_levels();
  const std::size_t P = cfg.points;
  const std::size_t C = cfg.channels;
  const std::size_t E = cfg.embed_dim();
  const std::size_t query_stride = cfg.heads * L * P;
  const std::size_t block = max_chunk_queries(*a.plan);
  const bool use_saved = a.saved_f32 != nullptr || a.saved_f16 != nullptr;
  constexpr int kTargets = GFused ? 2 : 4;
  BackwardScratch s;
  s.reserve(max_chunk_points(*a.plan, P), C, use_saved);
  std::vector<float> gt(C * block);  // channel-major grad_output tile
  float* const corner[4] = {s.corner[0].data(), s.corner[1].data(), s.corner[2].data(),
                            s.corner[3].data()};

  for_each_block(cfg, range, block, [&](std::size_t b, std::size_t qblk, std::size_t nb) {
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      for (std::size_t qi = 0; qi < nb; ++qi) {
        const float* row = a.gout + (b * cfg.queries + qblk + qi) * E + h * C;
        for (std::size_t ch = 0; ch < C; ++ch) gt[ch * block + qi] = row[ch];
      }
      for (std::size_t l = 0; l < L; ++l) {
        const LevelGeom& g = (*a.geom)[l];
        const std::size_t cq = a.plan->levels[l].chunk_queries;
        for (std::size_t q0 = qblk; q0 < qblk + nb; q0 += cq) {
          const std::size_t nq = std::min(cq, qblk + nb - q0);
          const std::size_t n = nq * P;
          const std::size_t n_pad = round_up(n, kLanes);
          const std::size_t pt0 = point_index(cfg, b, q0, h, l, 0);
          // point-major: i = p * nq + qi
          for (std::size_t qi = 0; qi < nq; ++qi) {
            const std::size_t base = pt0 + qi * query_stride;
            if (qi + kPrefetchQueries < nq) {
              const std::size_t ahead = base + kPrefetchQueries * query_stride;
              __builtin_prefetch(a.loc + 2 * ahead);
              __builtin_prefetch(a.wts + ahead);
              if (use_saved) {
                const char* row = a.saved_f32 != nullptr
                                      ? reinterpret_cast<const char*>(a.saved_f32 + ahead * C)
                                      : reinterpret_cast<const char*>(a.saved_f16 + ahead * C);
                const std::size_t bytes = P * C * (a.saved_f32 != nullptr ? 4 : 2);
                for (std::size_t o = 0; o < bytes; o += 64) __builtin_prefetch(row + o);
              }
            }
            for (std::size_t p = 0; p < P; ++p) {
              const std::size_t i = p * nq + qi;
              const std::size_t pt = base + p;
              const Cell c = locate(a.loc[2 * pt], a.loc[2 * pt + 1], g.height, g.width);
              if constexpr (VFused) {
                s.voff[0][i] = pair_read_offset(g, c.h0, c.top_ok, c.w0);
                s.voff[1][i] = pair_read_offset(g, c.h0 + 1, c.bot_ok, c.w0);
              } else {
                for (int k = 0; k < 4; ++k) {
                  s.voff[k][i] = corner_offset(g.vbase, g.vstride, c.h0 + (k >> 1), c.w0 + (k & 1), c.m[k]);
                }
              }
              std::int32_t off[4];
              float wt[4];
              std::uint8_t act[4];
              scatter_targets<GFused>(g, c, off, wt, act);
              for (int k = 0; k < 4; ++k) {
                s.w[k][i] = c.w[k];
                s.m[k][i] = c.m[k];
                s.goff[k][i] = off[k];
                s.gw[k][i] = wt[k];
                if constexpr (Staggered) {
                  if (k < kTargets && act[k]) {
                    const std::int32_t row = c.h0 + target_row<GFused>(k);
                    const std::uint32_t shard = a.row_shard[g.row_begin + static_cast<std::size_t>(row)];
                    if (shard != own) {
                      act[k] = 0;
                      auto& list = (*overflow)[shard];
                      // a point lands in a foreign shard list at most once
                      if (list.empty() || list.back() != pt) list.push_back(static_cast<std::uint32_t>(pt));
                    }
                  }
                }
                s.gact[k][i] = act[k];
              }
              s.lh[i] = c.lh;
              s.lw[i] = c.lw;
              s.aw[i] = a.wts[pt];
            }
          }
          if (use_saved) {
            const ChunkRows rows{pt0, nq, query_stride};
            if (a.saved_f32 != nullptr) {
              load_saved(a.saved_f32, rows, n, n_pad, C, s.tile.data());
            } else {
              load_saved(a.saved_f16, rows, n, n_pad, C, s.tile.data());
            }
          }
          for (std::size_t i = n; i < n_pad; ++i) {
            for (int k = 0; k < 4; ++k) {
              s.voff[k][i] = g.vbase;
              s.w[k][i] = 0.0f;
              s.m[k][i] = 0.0f;
              s.gact[k][i] = 0;
            }
            s.lh[i] = s.lw[i] = s.aw[i] = 0.0f;
            s.gout[i] = 0.0f;
          }
          std::fill_n(s.acc_w.begin(), n_pad, 0.0f);
          std::fill_n(s.acc_x.begin(), n_pad, 0.0f);
          std::fill_n(s.acc_y.begin(), n_pad, 0.0f);

          for (std::size_t ch = 0; ch < C; ++ch) {
            const std::size_t plane_idx = (b * cfg.heads + h) * C + ch;
            const S* vplane = values + plane_idx * a.vaxis;
            GradAcc* gplane = a.grad + plane_idx * a.gaxis;
            const float* gsrc = gt.data() + ch * block + (q0 - qblk);
            for (std::size_t p = 0; p < P; ++p) {
              std::memcpy(s.gout.data() + p * nq, gsrc, nq * sizeof(float));
            }
            for (std::size_t blk = 0; blk < n_pad; blk += kFetchBlock) {
              const std::size_t mlen = std::min(kFetchBlock, n_pad - blk);
              const std::int32_t* const bo[4] = {s.voff[0].data() + blk, s.voff[1].data() + blk,
                                                 s.voff[2].data() + blk, s.voff[3].data() + blk};
              fetch_corners<S, VFused>(vplane, bo, mlen, corner);
              auto* fn = use_saved ? &accumulate_block<true> : &accumulate_block<false>;
              fn(s.w[0].data() + blk, s.w[1].data() + blk, s.w[2].data() + blk,
                 s.w[3].data() + blk, s.m[0].data() + blk, s.m[1].data() + blk,
                 s.m[2].data() + blk, s.m[3].data() + blk, corner[0], corner[1], corner[2],
                 corner[3], s.lh.data() + blk, s.lw.data() + blk, s.gout.data() + blk,
                 use_saved ? s.tile.data() + ch * n_pad + blk : nullptr, s.acc_w.data() + blk,
                 s.acc_x.data() + blk, s.acc_y.data() + blk, mlen);
              const std::size_t end = std::min(n, blk + mlen);
              for (std::size_t i = blk; i < end; ++i) {
                const std::int32_t off[4] = {s.goff[0][i], s.goff[1][i], s.goff[2][i], s.goff[3][i]};
                const float wt[4] = {s.gw[0][i], s.gw[1][i], s.gw[2][i], s.gw[3][i]};
                const std::uint8_t act[4] = {s.gact[0][i], s.gact[1][i], s.gact[2][i], s.gact[3][i]};
                scatter_point<GFused, !Staggered>(gplane, off, wt, act, s.aw[i] * s.gout[i]);
              }
            }
          }

          for (std::size_t qi = 0; qi < nq; ++qi) {
            for (std::size_t p = 0; p < P; ++p) {
              const std::size_t i = p * nq + qi;
              const std::size_t pt = pt0 + qi * query_stride + p;
              a.grad_w[pt] = s.acc_w[i];
              a.grad_loc[2 * pt] = s.aw[i] * s.acc_x[i] * static_cast<float>(g.width);
              a.grad_loc[2 * pt + 1] = s.aw[i] * s.acc_y[i] * static_cast<float>(g.height);
            }
          }
        }
      }
    }
  });
}

// Applies the deferred contributions of `points` that fall into shard `shard`.
template <bool GFused>
void drain_overflow(const BackwardArgs& a, const std::vector<std::uint32_t>& points,
                    std::uint32_t shard) {
  const MsdaConfig& cfg = *a.cfg;
  const std::size_t L = cfg.num_levels();
  const std::size_t P = cfg.points;
  const std::size_t C = cfg.channels;
  const std::size_t E = cfg.embed_dim();
  constexpr int kTargets = GFused ? 2 : 4;
  for (const std::uint32_t pt : points) {
    const std::size_t p = pt % P;
    const std::size_t l = (pt / P) % L;
    const std::size_t h = (pt / (P * L)) % cfg.heads;
    const std::size_t bq = pt / (P * L * cfg.heads);
    (void)p;
    const LevelGeom& g = (*a.geom)[l];
    const Cell c = locate(a.loc[2 * pt], a.loc[2 * pt + 1], g.height, g.width);
    std::int32_t off[4];
    float wt[4];
    std::uint8_t act[4];
    scatter_targets<GFused>(g, c, off, wt, act);
    for (int k = 0; k < kTargets; ++k) {
      if (act[k]) {
        const std::int32_t row = c.h0 + target_row<GFused>(k);
        act[k] = a.row_shard[g.row_begin + static_cast<std::size_t>(row)] == shard;
      }
    }
    const float aw = a.wts[pt];
    const float* grow = a.gout + bq * E + h * C;
    const std::size_t b = bq / cfg.queries;
    for (std::size_t ch = 0; ch < C; ++ch) {
      GradAcc* gplane = a.grad + ((b * cfg.heads + h) * C + ch) * a.gaxis;
      scatter_point<GFused, false>(gplane, off, wt, act, aw * grow[ch]);
    }
  }
}

template <class S, bool VFused, bool GFused>
void backward_dispatch(const BackwardArgs& a, const S* values, const KernelPlan& kp) {
  const std::size_t workers = kp.partition.size();
  if (!kp.scatter.staggered) {
    run_parallel(workers, [&](std::size_t w) {
      backward_worker<S, VFused, GFused, false>(a, values, kp.partition[w], 0, nullptr);
    });
    return;
  }
  // Shard rotation: in round r worker i owns shard (i + r) mod S. Round 0
  // computes and writes its own shard directly; rounds 1..S-1 drain the
  // per-worker overflow lists of the shard owned in that round.
  const std::size_t shards = kp.scatter.shards;
  std::vector<std::vector<std::vector<std::uint32_t>>> overflow(
      workers, std::vector<std::vector<std::uint32_t>>(shards));
  std::barrier sync(static_cast<std::ptrdiff_t>(workers));
  std::vector<std::exception_ptr> errors(workers);
  run_parallel(workers, [&](std::size_t w) {
    try {
      backward_worker<S, VFused, GFused, true>(a, values, kp.partition[w], w % shards, &overflow[w]);
    } catch (...) {
      errors[w] = std::current_exception();
    }
    for (std::size_t r = 1; r < shards; ++r) {
      sync.arrive_and_wait();
      if (errors[w]) continue;
      const std::size_t shard = (w + r) % shards;
      try {
        drain_overflow<GFused>(a, overflow[w][shard], static_cast<std::uint32_t>(shard));
      } catch (...) {
        errors[w] = std::current_exception();
      }
    }
  });
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// Backward result with grad_value still in the kernel's accumulator.
struct RawGrads {
  Buffer<GradAcc> grad;
  std::size_t axis = 0;
  Layout layout = Layout::PixelLastPadded;
  Tensor grad_locations;
  Tensor grad_weights;
};

template <class S>
RawGrads backward_typed(const FeaturePyramid& value, const SamplingTensors& sampling,
                                   const MsdaConfig& cfg, const OptFlags& flags,
                                   const Tensor& grad_output,
                                   const std::optional<SavedForward>& saved) {
  const KernelPlan kp = plan(cfg, flags);
  const bool vpad = flags.gather_fusion;
  const bool gpad = flags.scatter_fusion;
  const Planes<S> planes = pack_value<S>(value, cfg, vpad);
  const auto geom = level_geometry(cfg, vpad, gpad);
  const F32View loc(sampling.locations);
  const F32View wts(sampling.weights);
  const F32View gout(grad_output);
  require_finite(loc, "locations");

  const std::size_t gaxis = gpad ? total_padded_pixels(cfg.levels) : total_pixels(cfg.levels);
  Buffer<GradAcc> grad(cfg.batch * cfg.embed_dim() * gaxis, GradAcc{0});
  std::vector<float> grad_loc(loc.size(), 0.0f);
  std::vector<float> grad_w(wts.size(), 0.0f);

  BackwardArgs args{};
  args.cfg = &cfg;
  args.plan = &kp;
  args.geom = &geom;
  args.loc = loc.data();
  args.wts = wts.data();
  args.gout = gout.data();
  if (saved) {
    if (saved->sampled.dtype() == Dtype::F32) {
      args.saved_f32 = saved->sampled.f32().data();
    } else {
      args.saved_f16 = saved->sampled.f16().data();
    }
  }
  args.grad = grad.data();
  args.grad_loc = grad_loc.data();
  args.grad_w = grad_w.data();
  args.vaxis = planes.axis;
  args.gaxis = gaxis;
  for (std::size_t s = 0; s + 1 < kp.scatter.shard_row_begin.size(); ++s) {
    for (std::size_t r = kp.scatter.shard_row_begin[s]; r < kp.scatter.shard_row_begin[s + 1]; ++r) {
      args.row_shard.push_back(static_cast<std::uint32_t>(s));
    }
  }

  const S* vals = planes.base();
  if (vpad && gpad) backward_dispatch<S, true, true>(args, vals, kp);
  else if (vpad) backward_dispatch<S, true, false>(args, vals, kp);
  else if (gpad) backward_dispatch<S, false, true>(args, vals, kp);
  else backward_dispatch<S, false, false>(args, vals, kp);

  RawGrads res;
  res.grad = std::move(grad);
  res.axis = gaxis;
  res.layout = kp.grad_layout;
  res.grad_locations =
      Tensor::from_f32(sampling.locations.dims(), std::move(grad_loc)).cast(sampling.locations.dtype());
  res.grad_weights =
      Tensor::from_f32(sampling.weights.dims(), std::move(grad_w)).cast(sampling.weights.dtype());
  return res;
}

void check_saved(const std::optional<SavedForward>& saved, const MsdaConfig& cfg) {
  if (!saved) return;
  if (saved->sampled.dims() != cfg.saved_dims()) {
    throw InputError("saved forward samples do not match the config shape");
  }
}

}  // namespace

ForwardResult msda_forward_opt(const FeaturePyramid& value, const SamplingTensors& sampling,
                               const MsdaConfig& cfg, const OptFlags& flags) {
  check_forward_inputs(value, sampling, cfg);
  if (cfg.dtype == Dtype::F32) return forward_typed<float>(value, sampling, cfg, flags);
  return forward_typed<std::uint16_t>(value, sampling, cfg, flags);
}

namespace {

RawGrads backward_raw(const FeaturePyramid& value, const SamplingTensors& sampling,
                      const MsdaConfig& cfg, const OptFlags& flags, const Tensor& grad_output,
                      const std::optional<SavedForward>& saved) {
  check_forward_inputs(value, sampling, cfg);
  check_grad_output(grad_output, cfg);
  check_saved(saved, cfg);
  if (cfg.dtype == Dtype::F32) {
    return backward_typed<float>(value, sampling, cfg, flags, grad_output, saved);
  }
  return backward_typed<std::uint16_t>(value, sampling, cfg, flags, grad_output, saved);
}

}  // namespace

namespace detail {

NativeGrads backward_opt_native(const FeaturePyramid& value, const SamplingTensors& sampling,
                                const MsdaConfig& cfg, const OptFlags& flags,
                                const Tensor& grad_output,
                                const std::optional<SavedForward>& saved) {
  RawGrads raw = backward_raw(value, sampling, cfg, flags, grad_output, saved);
  NativeGrads res;
  res.grad_value.levels = cfg.levels;
  res.grad_value.batch = cfg.batch;
  res.grad_value.heads = cfg.heads;
  res.grad_value.channels = cfg.channels;
  res.grad_value.layout = raw.layout;
  std::vector<float> g(raw.grad.begin(), raw.grad.end());
  res.grad_value.storage = Tensor::from_f32(res.grad_value.expected_dims(), std::move(g));
  res.grad_locations = std::move(raw.grad_locations);
  res.grad_weights = std::move(raw.grad_weights);
  return res;
}

}  // namespace detail

MsdaGrads msda_backward_opt(const FeaturePyramid& value, const SamplingTensors& sampling,
                            const MsdaConfig& cfg, const OptFlags& flags,
                            const Tensor& grad_output, const std::optional<SavedForward>& saved) {
  RawGrads raw = backward_raw(value, sampling, cfg, flags, grad_output, saved);
  MsdaGrads g;
  g.grad_value = unpack_grad(raw.grad.data(), raw.axis, cfg, raw.layout == Layout::PixelLastPadded);
  g.grad_locations = std::move(raw.grad_locations);
  g.grad_weights = std::move(raw.grad_weights);
  return g;
}

}  // namespace msda
