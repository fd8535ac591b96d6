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

// Straightforward multi-scale deformable attention, forward and backward.
// This is the oracle the optimized kernels are checked against: plain loops,
// channel-last layout, one bilinear sample per (point, channel).
//
// Sampling convention (align_corners = false, zero padding): for a level of
// H x W pixels and a normalized location (x, y),
//
//   w_im = x * W - 0.5,   h_im = y * H - 0.5
//
// and the value is the bilinear blend of the 2x2 pixels around (h_im, w_im).
// Corners outside the map read as 0. x runs along the width axis.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "msda/compare.hpp"
#include "msda/config.hpp"
#include "msda/pyramid.hpp"
#include "msda/tensor.hpp"

namespace msda {

// Single-channel H x W view into a larger buffer.
template <class Real>
struct BasicPlaneView {
  const Real* data = nullptr;
  std::size_t height = 0;
  std::size_t width = 0;
  std::ptrdiff_t row_stride = 0;
  std::ptrdiff_t col_stride = 1;

  Real at(std::ptrdiff_t row, std::ptrdiff_t col) const {
    return data[row * row_stride + col * col_stride];
  }
};

using PlaneView = BasicPlaneView<float>;

// Throws InputError if x or y is not finite.
float bilinear_sample(const PlaneView& plane, float x, float y);

// Per-point bilinear samples kept by a training forward pass for backward.
// sampled: (batch, queries, heads, levels, points, channels).
struct SavedForward {
  Tensor sampled;
};

struct ForwardResult {
  Tensor output;  // (batch, queries, heads * channels), value dtype
  std::optional<SavedForward> saved;  // set iff cfg.mode == Train
};

struct MsdaGrads {
  Tensor grad_value;      // channel-last, same dims as the value storage
  Tensor grad_locations;  // same dims as locations
  Tensor grad_weights;    // same dims as weights
};

ForwardResult msda_forward_ref(const FeaturePyramid& value, const SamplingTensors& sampling,
                               const MsdaConfig& cfg);

MsdaGrads msda_backward_ref(const FeaturePyramid& value, const SamplingTensors& sampling,
                            const MsdaConfig& cfg, const Tensor& grad_output);

// Forward evaluated entirely in double on channel-last data; used for
// finite differences. value/locations/weights are flat row-major arrays.
std::vector<double> msda_forward_ref_f64(const MsdaConfig& cfg, const std::vector<double>& value,
                                         const std::vector<double>& locations,
                                         const std::vector<double>& weights);

using BackwardFn = std::function<MsdaGrads(const FeaturePyramid&, const SamplingTensors&,
                                           const MsdaConfig&, const Tensor&)>;

struct TensorCheck {
  std::string name;
  CompareResult result;
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;  // grad_value, grad_locations, grad_weights
  bool pass() const;
};

// Compares `backward` against central finite differences of the reference
// forward on a seeded random instance of `cfg`. Locations are drawn clear of
// pixel-lattice lines by more than the step, so every difference stays inside
// one bilinear cell. Throws InputError for a non-positive or non-finite step.
GradCheckReport grad_check(const MsdaConfig& cfg, std::uint64_t seed, double step, Tolerance tol,
                           const BackwardFn& backward = msda_backward_ref);

}  // namespace msda
