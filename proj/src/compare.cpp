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

#include "msda/compare.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "msda/error.hpp"

namespace msda {

CompareResult compare(std::span<const double> actual, std::span<const double> expected,
                      Tolerance tol) {
  if (actual.size() != expected.size()) {
    throw ShapeError("compare: element counts differ");
  }
  CompareResult r;
  const double denom_floor = tol.rel > 0.0 ? tol.abs_floor / tol.rel : tol.abs_floor;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    const double diff = std::abs(actual[i] - expected[i]);
    double rel = 0.0;
    bool ok = true;
    if (std::isfinite(actual[i]) && std::isfinite(expected[i])) {
      rel = diff / std::max({std::abs(expected[i]), denom_floor, 1e-300});
      ok = diff <= std::max(tol.rel * std::abs(expected[i]), tol.abs_floor);
      r.max_abs = std::max(r.max_abs, diff);
    } else {
      ok = actual[i] == expected[i] || (std::isnan(actual[i]) && std::isnan(expected[i]));
      rel = ok ? 0.0 : INFINITY;
      if (!ok) r.max_abs = INFINITY;
    }
    if (!ok) ++r.failures;
    if (rel > r.max_rel) {
      r.max_rel = rel;
      r.worst_index = i;
    }
  }
  r.pass = r.failures == 0;
  return r;
}

Tolerance scaled_tolerance(const Tensor& expected, double rel) {
  double scale = 0.0;
  for (float v : expected.to_f32_vector()) scale = std::max(scale, static_cast<double>(std::fabs(v)));
  return Tolerance{rel, std::max(rel * scale, std::numeric_limits<double>::min())};
}

CompareResult compare(const Tensor& actual, const Tensor& expected, Tolerance tol) {
  if (actual.dims() != expected.dims()) {
    throw ShapeError("compare: shapes differ");
  }
  const auto a = actual.to_f32_vector();
  const auto e = expected.to_f32_vector();
  std::vector<double> ad(a.begin(), a.end());
  std::vector<double> ed(e.begin(), e.end());
  return compare(ad, ed, tol);
}

}  // namespace msda
