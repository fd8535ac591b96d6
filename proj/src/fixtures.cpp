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

#include "msda/fixtures.hpp"

#include <cmath>
#include <random>
#include <utility>

namespace msda {

namespace {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }

 private:
  std::mt19937_64 engine_;
};

// Normalized coordinate along an axis of `extent` pixels.
double draw_coordinate(Rng& rng, std::size_t extent, const SamplingOptions& opts) {
  const double n = static_cast<double>(extent);
  if (opts.lattice_fraction > 0.0 && rng.uniform() < opts.lattice_fraction) {
    // pixel centers in image space: x*n - 0.5 is an integer
    const double lo = std::ceil(opts.lo * n - 0.5);
    const double hi = std::floor(opts.hi * n - 0.5);
    if (hi >= lo) {
      const double k = lo + static_cast<double>(rng.below(static_cast<std::size_t>(hi - lo) + 1));
      return (k + 0.5) / n;
    }
  }
  if (opts.lattice_margin > 0.0) {
    const double lo = std::floor(opts.lo * n - 0.5);
    const double hi = std::floor(opts.hi * n - 0.5);
    const double cell = lo + static_cast<double>(rng.below(static_cast<std::size_t>(hi - lo) + 1));
    const double frac = rng.uniform(opts.lattice_margin, 1.0 - opts.lattice_margin);
    return (cell + frac + 0.5) / n;
  }
  return rng.uniform(opts.lo, opts.hi);
}

}  // namespace

SamplingTensors random_sampling(const MsdaConfig& cfg, std::uint64_t seed,
                                const SamplingOptions& opts) {
  cfg.validate();
  Rng rng(seed ^ 0x5a17c0ffee000000ULL);
  SamplingTensors s{Tensor(cfg.location_dims(), opts.dtype), Tensor(cfg.weight_dims(), opts.dtype)};
  const std::size_t lp = cfg.num_levels() * cfg.points;
  std::vector<double> w(lp);
  for (std::size_t row = 0; row < cfg.batch * cfg.queries * cfg.heads; ++row) {
    double sum = 0.0;
    for (std::size_t i = 0; i < lp; ++i) {
      const auto& lv = cfg.levels[i / cfg.points];
      const std::size_t at = row * lp + i;
      s.locations.set(2 * at, static_cast<float>(draw_coordinate(rng, lv.width, opts)));
      s.locations.set(2 * at + 1, static_cast<float>(draw_coordinate(rng, lv.height, opts)));
      w[i] = rng.uniform();
      sum += w[i];
    }
    for (std::size_t i = 0; i < lp; ++i) {
      const double v = opts.normalize_weights ? w[i] / sum : w[i];
      s.weights.set(row * lp + i, static_cast<float>(v));
    }
  }
  return s;
}

Tensor random_tensor(std::vector<std::size_t> dims, Dtype dtype, std::uint64_t seed, float lo,
                     float hi) {
  Tensor t(std::move(dims), dtype);
  Rng rng(seed);
  for (std::size_t i = 0; i < t.size(); ++i) {
    t.set(i, static_cast<float>(rng.uniform(lo, hi)));
  }
  return t;
}

Instance random_instance(const MsdaConfig& cfg, std::uint64_t seed, const SamplingOptions& opts) {
  cfg.validate();
  std::vector<std::pair<std::size_t, std::size_t>> shapes;
  for (const auto& lv : cfg.levels) shapes.emplace_back(lv.height, lv.width);
  Instance inst;
  inst.cfg = cfg;
  inst.value = make_pyramid(cfg.batch, cfg.heads, cfg.channels, shapes, cfg.dtype,
                            Fill::random(seed * 4 + 1));
  inst.sampling = random_sampling(cfg, seed * 4 + 2, opts);
  inst.grad_output = random_tensor(cfg.output_dims(), Dtype::F32, seed * 4 + 3);
  return inst;
}

MsdaConfig random_config(std::uint64_t seed, Dtype dtype) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  MsdaConfig cfg;
  cfg.batch = 1 + rng.below(2);
  cfg.queries = 1 + rng.below(6);
  cfg.heads = 1 + rng.below(3);
  cfg.channels = 1 + rng.below(5);
  cfg.points = 1 + rng.below(3);
  const std::size_t nlevels = 1 + rng.below(5);
  std::vector<std::pair<std::size_t, std::size_t>> shapes;
  for (std::size_t l = 0; l < nlevels; ++l) {
    shapes.emplace_back(1 + rng.below(9), 1 + rng.below(9));
  }
  cfg.levels = make_levels(shapes);
  cfg.dtype = dtype;
  return cfg;
}

}  // namespace msda
