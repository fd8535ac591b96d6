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

// Random-access gather and scatter-add microbenchmarks.
//
// Index streams are drawn before the clock starts. Every run is
// self-validating: the touched data is reduced to a checksum
// that is compared against a single-threaded replay of the same index
// streams.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace msda {

enum class BenchKind { GatherCacheResident, GatherMemResident, ScatterAdd };

std::string_view bench_kind_name(BenchKind kind) noexcept;
// Accepts the names produced by bench_kind_name plus the short forms
// "gather", "gather_mem" and "scatter". Throws InputError otherwise.
BenchKind parse_bench_kind(std::string_view name);

inline constexpr std::size_t kMinAccesses = 100000;

struct BenchSpec {
  BenchKind kind = BenchKind::GatherCacheResident;
  std::size_t element_bytes = 4;
  std::size_t group = 1;  // contiguous elements per access: 1 or 2
  std::size_t working_set_bytes = 64 * 64 * 4;
  std::size_t accesses = 1u << 21;  // per worker
  std::size_t workers = 1;
  std::uint64_t seed = 0;
  // Gather only: inner batch length; each batch is reduced into its own
  // partial sum. 0 runs the whole stream as one batch.
  std::size_t vec_len = 0;
  // ScatterAdd only: add 1.0f to float cells instead of 1 to uint32 cells.
  bool float_scatter = false;
};

// Throws InputError on group not in {1, 2}, element_bytes != 4,
// accesses < kMinAccesses, zero workers, or a working set smaller than
// one group.
void validate(const BenchSpec& spec);

struct WorkerStat {
  std::size_t bytes = 0;
  double seconds = 0.0;
};

struct BenchReport {
  BenchSpec spec;
  double elapsed = 0.0;  // wall seconds, all workers
  std::size_t bytes_moved = 0;
  double bandwidth = 0.0;             // bytes_moved / elapsed
  double per_worker_bandwidth = 0.0;  // bandwidth / workers
  std::vector<WorkerStat> per_worker;
  std::uint64_t checksum = 0;
  std::uint64_t expected_checksum = 0;
  bool checksum_ok = false;
};

BenchReport run_gather(const BenchSpec& spec);
BenchReport run_scatter_add(const BenchSpec& spec);
BenchReport run_bench(const BenchSpec& spec);

struct SweepOptions {
  std::size_t warmup = 3;
  std::size_t timed = 10;
};

struct SweepRow {
  BenchSpec spec;
  double median_seconds = 0.0;
  double bandwidth_bps = 0.0;  // bytes per run / median_seconds
  double per_worker_bandwidth_bps = 0.0;
  bool checksum_ok = false;
  std::string error;  // non-empty when the cell failed
};

// Runs every cell; a failing cell yields a row with `error` set and the
// sweep continues.
std::vector<SweepRow> sweep(std::span<const BenchSpec> grid, const SweepOptions& opts = {});

inline constexpr std::string_view kSweepCsvHeader =
    "kind,group,working_set_bytes,workers,median_seconds,bandwidth_bps,checksum_ok";

std::string sweep_csv(std::span<const SweepRow> rows);

// Cartesian grid, kinds outermost, then groups, sizes, worker counts.
std::vector<BenchSpec> make_grid(std::span<const BenchKind> kinds,
                                 std::span<const std::size_t> groups,
                                 std::span<const std::size_t> working_sets,
                                 std::span<const std::size_t> worker_counts,
                                 const BenchSpec& base);

// Cache-resident gather over groups {1, 2} x {64^2, 128^2, 256^2} x 4 B maps
// x workers {1, 4, 16}: 18 cells.
std::vector<BenchSpec> codesign_grid(std::uint64_t seed = 0);

}  // namespace msda
