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

#include <chrono>
#include <cstddef>
#include <span>
#include <vector>

namespace msda {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Median of the samples (mean of the middle two for even counts). Throws
// InputError on an empty span.
double median(std::span<const double> xs);
// Median absolute deviation around the median.
double median_abs_deviation(std::span<const double> xs);

// Runs fn `warmup` times untimed, then `repeats` times timed; returns the
// wall time of each timed run in seconds.
template <class Fn>
std::vector<double> time_runs(std::size_t warmup, std::size_t repeats, Fn&& fn) {
  for (std::size_t i = 0; i < warmup; ++i) fn();
  std::vector<double> out;
  out.reserve(repeats);
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto t0 = Clock::now();
    fn();
    out.push_back(seconds_since(t0));
  }
  return out;
}

}  // namespace msda
