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
#include <string_view>
#include <vector>

#include "msda/pyramid.hpp"
#include "msda/tensor.hpp"

namespace msda {

enum class Mode { Inference, Train };

std::string_view mode_name(Mode mode) noexcept;

// Problem geometry. heads * channels is the embedding width of the output.
struct MsdaConfig {
  std::size_t batch = 1;
  std::size_t queries = 1;
  std::size_t heads = 1;
  std::size_t channels = 1;
  std::vector<LevelSpec> levels;
  std::size_t points = 1;
  Mode mode = Mode::Inference;
  Dtype dtype = Dtype::F32;  // storage type of the value pyramid

  std::size_t embed_dim() const noexcept { return heads * channels; }
  std::size_t num_levels() const noexcept { return levels.size(); }
  // batch * queries * heads * levels * points
  std::size_t sampling_points() const noexcept;

  void validate() const;

  std::vector<std::size_t> location_dims() const;
  std::vector<std::size_t> weight_dims() const;
  std::vector<std::size_t> output_dims() const;
  std::vector<std::size_t> saved_dims() const;
};

// Five Swin levels of a 1024x1024 image, 8 heads of 32 channels, 4 points.
// queries defaults to the total pixel count (87296), i.e. encoder self-attention.
MsdaConfig paper_config(std::size_t queries = 87296, Mode mode = Mode::Inference,
                        Dtype dtype = Dtype::F16);

// b=1, q=4, h=2, c=4, levels [(5,7),(3,3)], p=3: the gradient-check instance.
MsdaConfig small_grad_config();

// Throws ShapeError naming the first inconsistent axis.
void check_forward_inputs(const FeaturePyramid& value, const SamplingTensors& sampling,
                          const MsdaConfig& cfg);
void check_grad_output(const Tensor& grad_output, const MsdaConfig& cfg);

}  // namespace msda
