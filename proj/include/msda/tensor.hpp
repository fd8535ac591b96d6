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
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

namespace msda {

// Storage element type. F16 is storage-only; all arithmetic is done in F32.
enum class Dtype : std::uint32_t { F32 = 0, F16 = 1 };

std::size_t dtype_size(Dtype dtype) noexcept;
std::string_view dtype_name(Dtype dtype) noexcept;

// Product of extents. Throws SizeError on an empty shape, a zero extent or
// overflow of size_t.
std::size_t checked_element_count(std::span<const std::size_t> dims);

namespace detail {

// 64-byte aligned; buffers of 4 MiB and up are 2 MiB aligned and advised
// for transparent huge pages.
void* allocate_buffer(std::size_t bytes);
void release_buffer(void* p) noexcept;

// Default-initializes on resize, so trivial elements are left unwritten.
template <class T>
struct BufferAllocator {
  using value_type = T;

  BufferAllocator() = default;
  template <class U>
  BufferAllocator(const BufferAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(allocate_buffer(n * sizeof(T))); }
  void deallocate(T* p, std::size_t) noexcept { release_buffer(p); }

  template <class U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }

  template <class U>
  friend bool operator==(const BufferAllocator&, const BufferAllocator<U>&) noexcept {
    return true;
  }
};

}  // namespace detail

template <class T>
using Buffer = std::vector<T, detail::BufferAllocator<T>>;

// Dense row-major tensor (last dimension contiguous).
class Tensor {
 public:
  Tensor() = default;
  // Zero-filled tensor.
  Tensor(std::vector<std::size_t> dims, Dtype dtype);

  static Tensor from_f32(std::vector<std::size_t> dims, std::vector<float> data);
  static Tensor from_f16_bits(std::vector<std::size_t> dims, std::vector<std::uint16_t> data);
  // Contents unspecified; the caller writes every element.
  static Tensor uninitialized(std::vector<std::size_t> dims, Dtype dtype);

  const std::vector<std::size_t>& dims() const noexcept { return dims_; }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t size() const noexcept { return size_; }
  Dtype dtype() const noexcept { return dtype_; }
  bool empty() const noexcept { return size_ == 0; }

  // Typed views. Throw InputError on a dtype mismatch.
  std::span<float> f32();
  std::span<const float> f32() const;
  std::span<std::uint16_t> f16();
  std::span<const std::uint16_t> f16() const;

  // Element access through F32, converting F16 on the fly.
  float get(std::size_t index) const;
  void set(std::size_t index, float value);

  std::vector<float> to_f32_vector() const;
  Tensor cast(Dtype dtype) const;

  // Raw payload in host byte order.
  std::span<const std::byte> bytes() const noexcept;

  // Bitwise equality of shape, dtype and payload.
  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  std::vector<std::size_t> dims_;
  Dtype dtype_ = Dtype::F32;
  std::size_t size_ = 0;
  Buffer<float> f32_;
  Buffer<std::uint16_t> f16_;
};

// XMSD binary format, little-endian:
//   "XMSD" | version u32 | dtype u32 | rank u32 | dims u64 x rank | payload
inline constexpr std::uint32_t kXmsdVersion = 1;
inline constexpr std::uint32_t kXmsdMaxRank = 16;

std::size_t xmsd_header_bytes(std::size_t rank) noexcept;

void write_tensor(const Tensor& tensor, std::ostream& sink);
Tensor read_tensor(std::istream& source);

void save_tensor(const Tensor& tensor, const std::filesystem::path& path);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace msda
