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

// Seeded problem generators shared by tests, the CLI and the bindings.
// All draws come from std::mt19937_64 with explicit bit-to-float mapping, so a
// seed reproduces the same instance on every run of the same build.

#include <cstdint>
#include <vector>

#include "msda/config.hpp"
#include "msda/pyramid.hpp"
#include "msda/tensor.hpp"

namespace msda {

struct SamplingOptions {
  // Locations are drawn uniformly in [lo, hi] on both axes.
  double lo = 0.0;
  double hi = 1.0;
  // Fraction of points snapped exactly onto a pixel-center lattice line.
  double lattice_fraction = 0.0;
  // When > 0, the fractional part of x*W-0.5 and y*H-0.5 is kept inside
  // [margin, 1-margin], i.e. points stay clear of lattice lines.
  double lattice_margin = 0.0;
  // Divide weights by their sum over levels*points.
  bool normalize_weights = false;
  Dtype dtype = Dtype::F32;
};

SamplingTensors random_sampling(const MsdaConfig& cfg, std::uint64_t seed,
                                const SamplingOptions& opts = {});

// Uniform values in [lo, hi).
Tensor random_tensor(std::vector<std::size_t> dims, Dtype dtype, std::uint64_t seed,
                     float lo = -1.0f, float hi = 1.0f);

struct Instance {
  MsdaConfig cfg;
  FeaturePyramid value;
  SamplingTensors sampling;
  Tensor grad_output;
};

Instance random_instance(const MsdaConfig& cfg, std::uint64_t seed,
                         const SamplingOptions& opts = {});

// Random geometry: batch 1-2, 1-5 levels of 1..9 x 1..9, heads 1-3,
// channels 1-5, queries 1-6, points 1-3.
MsdaConfig random_config(std::uint64_t seed, Dtype dtype = Dtype::F32);

}  // namespace msda
