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

#include "msda/tensor.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <string>

#include "msda/error.hpp"
#include "msda/half.hpp"

#include <new>
#include <sys/mman.h>

namespace msda {

namespace detail {

void* allocate_buffer(std::size_t bytes) {
  constexpr std::size_t kLine = 64;
  constexpr std::size_t kHuge = std::size_t{2} << 20;
  const std::size_t align = bytes >= 2 * kHuge ? kHuge : kLine;
  if (bytes > std::numeric_limits<std::size_t>::max() - align) throw std::bad_alloc();
  const std::size_t rounded = (std::max<std::size_t>(bytes, 1) + align - 1) / align * align;
  void* p = std::aligned_alloc(align, rounded);
  if (p == nullptr) throw std::bad_alloc();
#ifdef MADV_HUGEPAGE
  if (align == kHuge) ::madvise(p, rounded, MADV_HUGEPAGE);
#endif
  return p;
}

void release_buffer(void* p) noexcept { std::free(p); }

}  // namespace detail

namespace {

constexpr std::array<char, 4> kMagic = {'X', 'M', 'S', 'D'};

template <class T>
T byteswap_if_big_endian(T value) noexcept {
  if constexpr (std::endian::native == std::endian::big) {
    auto raw = std::bit_cast<std::array<std::byte, sizeof(T)>>(value);
    std::reverse(raw.begin(), raw.end());
    return std::bit_cast<T>(raw);
  } else {
    return value;
  }
}

template <class T>
void put(std::ostream& out, T value) {
  value = byteswap_if_big_endian(value);
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  template <class T>
  T get(const char* what) {
    T value{};
    read_raw(&value, sizeof(T), what);
    return byteswap_if_big_endian(value);
  }

  void read_raw(void* dst, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    const auto got = static_cast<std::uint64_t>(in_.gcount());
    if (got != n) {
      throw FormatError(std::string("truncated ") + what, offset_ + got);
    }
    offset_ += n;
  }

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::istream& in_;
  std::uint64_t offset_ = 0;
};

}  // namespace

std::size_t dtype_size(Dtype dtype) noexcept { return dtype == Dtype::F16 ? 2 : 4; }

std::string_view dtype_name(Dtype dtype) noexcept { return dtype == Dtype::F16 ? "f16" : "f32"; }

std::size_t checked_element_count(std::span<const std::size_t> dims) {
  if (dims.empty()) {
    throw SizeError("tensor rank must be at least 1");
  }
  std::size_t count = 1;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (dims[i] == 0) {
      throw SizeError("extent of axis " + std::to_string(i) + " is zero");
    }
    if (count > std::numeric_limits<std::size_t>::max() / dims[i]) {
      throw SizeError("element count overflows at axis " + std::to_string(i));
    }
    count *= dims[i];
  }
  return count;
}

Tensor::Tensor(std::vector<std::size_t> dims, Dtype dtype)
    : dims_(std::move(dims)), dtype_(dtype), size_(checked_element_count(dims_)) {
  if (dtype_ == Dtype::F32) {
    f32_.assign(size_, 0.0f);
  } else {
    f16_.assign(size_, 0);
  }
}

Tensor Tensor::uninitialized(std::vector<std::size_t> dims, Dtype dtype) {
  Tensor t;
  t.size_ = checked_element_count(dims);
  t.dims_ = std::move(dims);
  t.dtype_ = dtype;
  if (dtype == Dtype::F32) {
    t.f32_.resize(t.size_);
  } else {
    t.f16_.resize(t.size_);
  }
  return t;
}

Tensor Tensor::from_f32(std::vector<std::size_t> dims, std::vector<float> data) {
  Tensor t;
  t.size_ = checked_element_count(dims);
  if (data.size() != t.size_) {
    throw SizeError("data holds " + std::to_string(data.size()) + " elements, dims need " +
                    std::to_string(t.size_));
  }
  t.dims_ = std::move(dims);
  t.dtype_ = Dtype::F32;
  t.f32_.assign(data.begin(), data.end());
  return t;
}

Tensor Tensor::from_f16_bits(std::vector<std::size_t> dims, std::vector<std::uint16_t> data) {
  Tensor t;
  t.size_ = checked_element_count(dims);
  if (data.size() != t.size_) {
    throw SizeError("data holds " + std::to_string(data.size()) + " elements, dims need " +
                    std::to_string(t.size_));
  }
  t.dims_ = std::move(dims);
  t.dtype_ = Dtype::F16;
  t.f16_.assign(data.begin(), data.end());
  return t;
}

std::span<float> Tensor::f32() {
  if (dtype_ != Dtype::F32) throw InputError("tensor is not f32");
  return f32_;
}

std::span<const float> Tensor::f32() const {
  if (dtype_ != Dtype::F32) throw InputError("tensor is not f32");
  return f32_;
}

std::span<std::uint16_t> Tensor::f16() {
  if (dtype_ != Dtype::F16) throw InputError("tensor is not f16");
  return f16_;
}

std::span<const std::uint16_t> Tensor::f16() const {
  if (dtype_ != Dtype::F16) throw InputError("tensor is not f16");
  return f16_;
}

float Tensor::get(std::size_t index) const {
  return dtype_ == Dtype::F32 ? f32_.at(index) : half_to_float(f16_.at(index));
}

void Tensor::set(std::size_t index, float value) {
  if (dtype_ == Dtype::F32) {
    f32_.at(index) = value;
  } else {
    f16_.at(index) = float_to_half(value);
  }
}

std::vector<float> Tensor::to_f32_vector() const {
  if (dtype_ == Dtype::F32) return std::vector<float>(f32_.begin(), f32_.end());
  std::vector<float> out(size_);
  std::transform(f16_.begin(), f16_.end(), out.begin(), half_to_float);
  return out;
}

Tensor Tensor::cast(Dtype dtype) const {
  if (dtype == dtype_) return *this;
  if (dtype == Dtype::F32) return from_f32(dims_, to_f32_vector());
  std::vector<std::uint16_t> out(size_);
  std::transform(f32_.begin(), f32_.end(), out.begin(), float_to_half);
  return from_f16_bits(dims_, std::move(out));
}

std::span<const std::byte> Tensor::bytes() const noexcept {
  if (dtype_ == Dtype::F32) return std::as_bytes(std::span(f32_));
  return std::as_bytes(std::span(f16_));
}

bool operator==(const Tensor& a, const Tensor& b) {
  if (a.dims_ != b.dims_ || a.dtype_ != b.dtype_) return false;
  const auto x = a.bytes();
  const auto y = b.bytes();
  return x.size() == y.size() && std::memcmp(x.data(), y.data(), x.size()) == 0;
}

std::size_t xmsd_header_bytes(std::size_t rank) noexcept { return 4 + 4 + 4 + 4 + 8 * rank; }

void write_tensor(const Tensor& tensor, std::ostream& sink) {
  if (tensor.empty()) {
    throw SizeError("cannot serialize an empty tensor");
  }
  sink.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(sink, kXmsdVersion);
  put<std::uint32_t>(sink, static_cast<std::uint32_t>(tensor.dtype()));
  put<std::uint32_t>(sink, static_cast<std::uint32_t>(tensor.rank()));
  for (std::size_t d : tensor.dims()) {
    put<std::uint64_t>(sink, d);
  }
  if constexpr (std::endian::native == std::endian::little) {
    const auto payload = tensor.bytes();
    sink.write(reinterpret_cast<const char*>(payload.data()),
               static_cast<std::streamsize>(payload.size()));
  } else {
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      if (tensor.dtype() == Dtype::F32) {
        put<std::uint32_t>(sink, std::bit_cast<std::uint32_t>(tensor.f32()[i]));
      } else {
        put<std::uint16_t>(sink, tensor.f16()[i]);
      }
    }
  }
  if (!sink) {
    throw Error("write_tensor: stream error");
  }
}

Tensor read_tensor(std::istream& source) {
  Reader r(source);
  std::array<char, 4> magic{};
  r.read_raw(magic.data(), magic.size(), "magic");
  if (magic != kMagic) {
    throw FormatError("bad magic", 0);
  }
  const std::uint64_t version_at = r.offset();
  const auto version = r.get<std::uint32_t>("version");
  if (version != kXmsdVersion) {
    throw FormatError("unsupported format version " + std::to_string(version), version_at);
  }
  const std::uint64_t dtype_at = r.offset();
  const auto code = r.get<std::uint32_t>("dtype");
  if (code != static_cast<std::uint32_t>(Dtype::F32) &&
      code != static_cast<std::uint32_t>(Dtype::F16)) {
    throw FormatError("unknown dtype code " + std::to_string(code), dtype_at);
  }
  const auto dtype = static_cast<Dtype>(code);
  const std::uint64_t rank_at = r.offset();
  const auto rank = r.get<std::uint32_t>("rank");
  if (rank == 0 || rank > kXmsdMaxRank) {
    throw FormatError("invalid rank " + std::to_string(rank), rank_at);
  }
  std::vector<std::size_t> dims(rank);
  for (auto& d : dims) {
    const auto v = r.get<std::uint64_t>("dims");
    if (v > std::numeric_limits<std::size_t>::max()) {
      throw FormatError("extent does not fit in memory", r.offset() - 8);
    }
    d = static_cast<std::size_t>(v);
  }
  const std::size_t count = checked_element_count(dims);
  if (dtype == Dtype::F32) {
    std::vector<float> data(count);
    r.read_raw(data.data(), count * sizeof(float), "payload");
    if constexpr (std::endian::native == std::endian::big) {
      for (auto& v : data) v = byteswap_if_big_endian(v);
    }
    return Tensor::from_f32(std::move(dims), std::move(data));
  }
  std::vector<std::uint16_t> data(count);
  r.read_raw(data.data(), count * sizeof(std::uint16_t), "payload");
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& v : data) v = byteswap_if_big_endian(v);
  }
  return Tensor::from_f16_bits(std::move(dims), std::move(data));
}

void save_tensor(const Tensor& tensor, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error("cannot open " + path.string() + " for writing");
  }
  write_tensor(tensor, out);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error("cannot open " + path.string());
  }
  return read_tensor(in);
}

}  // namespace msda
