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

#include "msda/config.hpp"

#include <string>

#include "msda/error.hpp"

namespace msda {

namespace {

void check_dims(const Tensor& t, const std::vector<std::size_t>& want, const char* tensor,
                std::initializer_list<const char*> axes) {
  if (t.rank() != want.size()) {
    throw ShapeError(std::string(tensor) + " must have rank " + std::to_string(want.size()) +
                     ", got " + std::to_string(t.rank()));
  }
  std::size_t i = 0;
  for (const char* axis : axes) {
    if (t.dim(i) != want[i]) {
      throw ShapeError(std::string(tensor) + " axis '" + axis + "' is " + std::to_string(t.dim(i)) +
                       ", expected " + std::to_string(want[i]));
    }
    ++i;
  }
}

}  // namespace

std::string_view mode_name(Mode mode) noexcept {
  return mode == Mode::Train ? "train" : "inference";
}

std::size_t MsdaConfig::sampling_points() const noexcept {
  return batch * queries * heads * levels.size() * points;
}

void MsdaConfig::validate() const {
  if (batch == 0) throw ShapeError("config batch must be >= 1");
  if (queries == 0) throw ShapeError("config queries must be >= 1");
  if (heads == 0) throw ShapeError("config heads must be >= 1");
  if (channels == 0) throw ShapeError("config channels must be >= 1");
  if (points == 0) throw ShapeError("config points must be >= 1");
  if (levels.empty()) throw ShapeError("config needs at least one level");
  std::size_t offset = 0;
  for (std::size_t l = 0; l < levels.size(); ++l) {
    if (levels[l].height == 0 || levels[l].width == 0) {
      throw ShapeError("config level " + std::to_string(l) + " has a zero extent");
    }
    if (levels[l].offset != offset) {
      throw ShapeError("config level " + std::to_string(l) + " offset is not cumulative");
    }
    offset += levels[l].pixels();
  }
}

std::vector<std::size_t> MsdaConfig::location_dims() const {
  return {batch, queries, heads, levels.size(), points, 2};
}

std::vector<std::size_t> MsdaConfig::weight_dims() const {
  return {batch, queries, heads, levels.size(), points};
}

std::vector<std::size_t> MsdaConfig::output_dims() const { return {batch, queries, embed_dim()}; }

std::vector<std::size_t> MsdaConfig::saved_dims() const {
  return {batch, queries, heads, levels.size(), points, channels};
}

MsdaConfig paper_config(std::size_t queries, Mode mode, Dtype dtype) {
  MsdaConfig cfg;
  cfg.batch = 1;
  cfg.queries = queries;
  cfg.heads = 8;
  cfg.channels = 32;
  cfg.levels = make_levels({{256, 256}, {128, 128}, {64, 64}, {32, 32}, {16, 16}});
  cfg.points = 4;
  cfg.mode = mode;
  cfg.dtype = dtype;
  return cfg;
}

MsdaConfig small_grad_config() {
  MsdaConfig cfg;
  cfg.batch = 1;
  cfg.queries = 4;
  cfg.heads = 2;
  cfg.channels = 4;
  cfg.levels = make_levels({{5, 7}, {3, 3}});
  cfg.points = 3;
  return cfg;
}

void check_forward_inputs(const FeaturePyramid& value, const SamplingTensors& sampling,
                          const MsdaConfig& cfg) {
  cfg.validate();
  value.validate();
  if (value.batch != cfg.batch) {
    throw ShapeError("value axis 'batch' is " + std::to_string(value.batch) + ", config says " +
                     std::to_string(cfg.batch));
  }
  if (value.heads != cfg.heads) {
    throw ShapeError("value axis 'heads' is " + std::to_string(value.heads) + ", config says " +
                     std::to_string(cfg.heads));
  }
  if (value.channels != cfg.channels) {
    throw ShapeError("value axis 'channels' is " + std::to_string(value.channels) +
                     ", config says " + std::to_string(cfg.channels));
  }
  if (value.levels != cfg.levels) {
    throw ShapeError("value axis 'levels' does not match the config level geometry");
  }
  if (value.dtype() != cfg.dtype) {
    throw ShapeError("value dtype is " + std::string(dtype_name(value.dtype())) +
                     ", config says " + std::string(dtype_name(cfg.dtype)));
  }
  check_dims(sampling.locations, cfg.location_dims(), "locations",
             {"batch", "queries", "heads", "levels", "points", "xy"});
  check_dims(sampling.weights, cfg.weight_dims(), "weights",
             {"batch", "queries", "heads", "levels", "points"});
}

void check_grad_output(const Tensor& grad_output, const MsdaConfig& cfg) {
  check_dims(grad_output, cfg.output_dims(), "grad_output", {"batch", "queries", "embed"});
}

}  // namespace msda
