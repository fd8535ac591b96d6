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
#include <span>

#include "msda/tensor.hpp"

namespace msda {

// An element passes when |actual - expected| <= max(rel * |expected|, abs_floor).
struct Tolerance {
  double rel = 1e-5;
  double abs_floor = 1e-6;
};

struct CompareResult {
  double max_abs = 0.0;
  // max over elements of |actual - expected| / max(|expected|, abs_floor / rel)
  double max_rel = 0.0;
  std::size_t worst_index = 0;
  std::size_t failures = 0;
  bool pass = true;
};

// Relative tolerance whose absolute floor is rel * max|expected|: elements far
// below the tensor's scale are judged on absolute error, so sums that cancel
// are not held to an elementwise bound their own rounding cannot meet.
Tolerance scaled_tolerance(const Tensor& expected, double rel);

CompareResult compare(std::span<const double> actual, std::span<const double> expected,
                      Tolerance tol);
// Shapes must match exactly (ShapeError otherwise); dtypes may differ.
CompareResult compare(const Tensor& actual, const Tensor& expected, Tolerance tol);

}  // namespace msda
