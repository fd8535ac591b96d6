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

#include "msda/membench.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <exception>
#include <latch>
#include <limits>
#include <sstream>
#include <thread>

#include "msda/error.hpp"
#include "msda/timing.hpp"

namespace msda {

namespace {

volatile std::uint64_t g_warm_sink = 0;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Cheap per-access index source: a 64-bit LCG mapped onto [0, range) with a
// multiply-shift, so no division sits in the timed loop.
class IndexStream {
 public:
  IndexStream(std::uint64_t seed, std::size_t worker, std::size_t range)
      : state_(splitmix64(seed ^ splitmix64(worker + 1))), range_(range) {}

  std::size_t next() {
    state_ = state_ * 6364136223846793005ull + 1442695040888963407ull;
    return static_cast<std::size_t>(((state_ >> 32) * range_) >> 32);
  }

 private:
  std::uint64_t state_;
  std::uint64_t range_;
};

// Number of `group`-aligned slots in the working set.
std::size_t slot_count(const BenchSpec& spec) {
  return spec.working_set_bytes / (spec.element_bytes * spec.group);
}

std::size_t element_count(const BenchSpec& spec) { return slot_count(spec) * spec.group; }

// Starts all workers together and measures wall time until the last one
// finishes.
template <class Fn>
double run_workers(std::size_t workers, std::vector<WorkerStat>& stats, Fn&& fn) {
  stats.assign(workers, {});
  std::vector<std::exception_ptr> errors(workers);
  std::latch ready(static_cast<std::ptrdiff_t>(workers));
  std::latch go(1);
  std::vector<std::jthread> threads;
  threads.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      ready.count_down();
      go.wait();
      const auto t0 = Clock::now();
      try {
        stats[w].bytes = fn(w);
      } catch (...) {
        errors[w] = std::current_exception();
      }
      stats[w].seconds = seconds_since(t0);
    });
  }
  ready.wait();
  const auto t0 = Clock::now();
  go.count_down();
  for (auto& t : threads) t.join();
  const double elapsed = seconds_since(t0);
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return elapsed;
}

void finish(BenchReport& r) {
  r.bytes_moved = 0;
  for (const auto& w : r.per_worker) r.bytes_moved += w.bytes;
  r.bandwidth = r.elapsed > 0.0 ? static_cast<double>(r.bytes_moved) / r.elapsed : 0.0;
  r.per_worker_bandwidth = r.bandwidth / static_cast<double>(r.spec.workers);
}

// Slot indices of one worker, drawn before timing starts.
std::vector<std::uint32_t> worker_indices(const BenchSpec& spec, std::size_t worker) {
  IndexStream idx(spec.seed, worker, slot_count(spec));
  std::vector<std::uint32_t> out(spec.accesses);
  for (auto& v : out) v = static_cast<std::uint32_t>(idx.next());
  return out;
}

std::vector<std::vector<std::uint32_t>> all_indices(const BenchSpec& spec) {
  std::vector<std::vector<std::uint32_t>> out;
  out.reserve(spec.workers);
  for (std::size_t w = 0; w < spec.workers; ++w) out.push_back(worker_indices(spec, w));
  return out;
}

template <std::size_t Group>
std::uint64_t gather_range(const std::uint32_t* buf, const std::uint32_t* slots, std::size_t n) {
  std::uint64_t sink = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if constexpr (Group == 2) {
      std::uint64_t v;
      std::memcpy(&v, buf + 2 * std::size_t{slots[i]}, sizeof(v));
      sink += v;
    } else {
      sink += buf[slots[i]];
    }
  }
  return sink;
}

// One worker's gather stream; returns the wrapping sum of everything read.
std::uint64_t gather_stream(const std::uint32_t* buf, const BenchSpec& spec,
                            const std::vector<std::uint32_t>& slots) {
  const std::size_t step = spec.vec_len == 0 ? slots.size() : spec.vec_len;
  std::uint64_t sink = 0;
  for (std::size_t i = 0; i < slots.size(); i += step) {
    const std::size_t n = std::min(step, slots.size() - i);
    sink += spec.group == 2 ? gather_range<2>(buf, slots.data() + i, n)
                            : gather_range<1>(buf, slots.data() + i, n);
  }
  return sink;
}

void scatter_stream(std::uint64_t* words, const BenchSpec& spec,
                    const std::vector<std::uint32_t>& slots, bool atomic) {
  if (spec.float_scatter) {
    auto* cells = reinterpret_cast<float*>(words);
    for (std::size_t i = 0; i < spec.accesses; ++i) {
      const std::size_t slot = slots[i];
      if (spec.group == 1) {
        if (atomic) {
          std::atomic_ref<float>(cells[slot]).fetch_add(1.0f, std::memory_order_relaxed);
        } else {
          cells[slot] += 1.0f;
        }
        continue;
      }
      std::uint64_t* word = words + slot;
      std::uint64_t expected = __atomic_load_n(word, __ATOMIC_RELAXED);
      for (;;) {
        float pair[2];
        std::memcpy(pair, &expected, sizeof(pair));
        pair[0] += 1.0f;
        pair[1] += 1.0f;
        std::uint64_t desired;
        std::memcpy(&desired, pair, sizeof(desired));
        if (!atomic) {
          *word = desired;
          break;
        }
        if (__atomic_compare_exchange_n(word, &expected, desired, true, __ATOMIC_RELAXED,
                                        __ATOMIC_RELAXED)) {
          break;
        }
      }
    }
    return;
  }
  auto* cells = reinterpret_cast<std::uint32_t*>(words);
  constexpr std::uint64_t kPairOne = (std::uint64_t{1} << 32) | 1u;
  for (std::size_t i = 0; i < spec.accesses; ++i) {
    const std::size_t slot = slots[i];
    if (spec.group == 1) {
      if (atomic) {
        __atomic_fetch_add(cells + slot, 1u, __ATOMIC_RELAXED);
      } else {
        cells[slot] += 1u;
      }
    } else if (atomic) {
      __atomic_fetch_add(words + slot, kPairOne, __ATOMIC_RELAXED);
    } else {
      words[slot] += kPairOne;
    }
  }
}

// Position-weighted sum of cell counts; float cells hold exact integers.
std::uint64_t scatter_checksum(const std::vector<std::uint64_t>& words, const BenchSpec& spec,
                               double* total) {
  const std::size_t n = element_count(spec);
  std::uint64_t sum = 0;
  double t = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t count;
    if (spec.float_scatter) {
      float f;
      std::memcpy(&f, reinterpret_cast<const char*>(words.data()) + 4 * i, sizeof(f));
      count = static_cast<std::uint64_t>(f);
      t += f;
    } else {
      std::uint32_t c;
      std::memcpy(&c, reinterpret_cast<const char*>(words.data()) + 4 * i, sizeof(c));
      count = c;
      t += c;
    }
    sum += (i + 1) * count;
  }
  *total = t;
  return sum;
}

}  // namespace

std::string_view bench_kind_name(BenchKind kind) noexcept {
  switch (kind) {
    case BenchKind::GatherCacheResident: return "gather_cache_resident";
    case BenchKind::GatherMemResident: return "gather_mem_resident";
    case BenchKind::ScatterAdd: return "scatter_add";
  }
  return "?";
}

BenchKind parse_bench_kind(std::string_view name) {
  if (name == "gather_cache_resident" || name == "gather") return BenchKind::GatherCacheResident;
  if (name == "gather_mem_resident" || name == "gather_mem") return BenchKind::GatherMemResident;
  if (name == "scatter_add" || name == "scatter") return BenchKind::ScatterAdd;
  throw InputError("unknown benchmark kind '" + std::string(name) + "'");
}

void validate(const BenchSpec& spec) {
  if (spec.group != 1 && spec.group != 2) throw InputError("group must be 1 or 2");
  if (spec.element_bytes != 4) throw InputError("element_bytes must be 4");
  if (spec.accesses < kMinAccesses) {
    throw InputError("accesses must be >= " + std::to_string(kMinAccesses) + ", got " +
                     std::to_string(spec.accesses));
  }
  if (spec.workers == 0) throw InputError("workers must be >= 1");
  if (slot_count(spec) == 0) throw InputError("working set smaller than one access group");
  if (spec.kind == BenchKind::ScatterAdd) {
    // uint32 cells must not wrap and float cells must stay exact
    const double total = static_cast<double>(spec.accesses) * static_cast<double>(spec.workers);
    if (total >= (spec.float_scatter ? 16777216.0 : 4294967295.0)) {
      throw InputError("workers * accesses too large for exact scatter counts");
    }
  }
}

BenchReport run_gather(const BenchSpec& spec) {
  validate(spec);
  if (spec.kind == BenchKind::ScatterAdd) throw InputError("run_gather: spec kind is scatter_add");
  const std::size_t n = element_count(spec);
  std::vector<std::uint32_t> buf(n);
  for (std::size_t i = 0; i < n; ++i) {
    buf[i] = static_cast<std::uint32_t>(splitmix64(spec.seed + i));
  }
  std::uint64_t warm = 0;
  if (spec.kind == BenchKind::GatherCacheResident) {
    for (std::size_t i = 0; i < n; ++i) warm += buf[i];
  }
  g_warm_sink = warm;
  std::vector<std::uint64_t> sinks(spec.workers, 0);
  const auto slots = all_indices(spec);

  BenchReport r;
  r.spec = spec;
  r.elapsed = run_workers(spec.workers, r.per_worker, [&](std::size_t w) {
    sinks[w] = gather_stream(buf.data(), spec, slots[w]);
    return spec.accesses * spec.group * spec.element_bytes;
  });
  for (auto s : sinks) r.checksum += s;

  for (std::size_t w = 0; w < spec.workers; ++w) {
    r.expected_checksum += gather_stream(buf.data(), spec, slots[w]);
  }
  r.checksum_ok = r.checksum == r.expected_checksum;
  finish(r);
  return r;
}

BenchReport run_scatter_add(const BenchSpec& spec) {
  validate(spec);
  if (spec.kind != BenchKind::ScatterAdd) throw InputError("run_scatter_add: spec kind is a gather");
  const std::size_t words = (element_count(spec) + 1) / 2;
  std::vector<std::uint64_t> dest(words, 0);
  const auto slots = all_indices(spec);

  BenchReport r;
  r.spec = spec;
  r.elapsed = run_workers(spec.workers, r.per_worker, [&](std::size_t w) {
    scatter_stream(dest.data(), spec, slots[w], true);
    return spec.accesses * spec.group * spec.element_bytes;
  });

  std::vector<std::uint64_t> replay(words, 0);
  for (std::size_t w = 0; w < spec.workers; ++w) scatter_stream(replay.data(), spec, slots[w], false);

  double total = 0.0;
  double replay_total = 0.0;
  r.checksum = scatter_checksum(dest, spec, &total);
  r.expected_checksum = scatter_checksum(replay, spec, &replay_total);
  const double expected_total = static_cast<double>(spec.workers) *
                                static_cast<double>(spec.accesses) *
                                static_cast<double>(spec.group);
  if (spec.float_scatter) {
    r.checksum_ok = std::fabs(total - expected_total) <= 1e-3 * expected_total;
  } else {
    r.checksum_ok = r.checksum == r.expected_checksum && total == expected_total;
  }
  finish(r);
  return r;
}

BenchReport run_bench(const BenchSpec& spec) {
  return spec.kind == BenchKind::ScatterAdd ? run_scatter_add(spec) : run_gather(spec);
}

std::vector<SweepRow> sweep(std::span<const BenchSpec> grid, const SweepOptions& opts) {
  std::vector<SweepRow> rows;
  rows.reserve(grid.size());
  for (const auto& spec : grid) {
    SweepRow row;
    row.spec = spec;
    try {
      if (opts.timed == 0) throw InputError("sweep needs at least one timed run");
      for (std::size_t i = 0; i < opts.warmup; ++i) run_bench(spec);
      std::vector<double> times;
      bool ok = true;
      std::size_t bytes = 0;
      for (std::size_t i = 0; i < opts.timed; ++i) {
        const BenchReport r = run_bench(spec);
        times.push_back(r.elapsed);
        ok = ok && r.checksum_ok;
        bytes = r.bytes_moved;
      }
      row.median_seconds = median(times);
      row.bandwidth_bps = row.median_seconds > 0.0 ? static_cast<double>(bytes) / row.median_seconds : 0.0;
      row.per_worker_bandwidth_bps = row.bandwidth_bps / static_cast<double>(spec.workers);
      row.checksum_ok = ok;
    } catch (const std::exception& e) {
      row.median_seconds = std::numeric_limits<double>::quiet_NaN();
      row.bandwidth_bps = std::numeric_limits<double>::quiet_NaN();
      row.per_worker_bandwidth_bps = std::numeric_limits<double>::quiet_NaN();
      row.checksum_ok = false;
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string sweep_csv(std::span<const SweepRow> rows) {
  std::ostringstream os;
  os << kSweepCsvHeader << '\n';
  os.precision(9);
  for (const auto& r : rows) {
    os << bench_kind_name(r.spec.kind) << ',' << r.spec.group << ',' << r.spec.working_set_bytes
       << ',' << r.spec.workers << ',' << r.median_seconds << ',' << r.bandwidth_bps << ','
       << (r.checksum_ok ? "true" : "false") << '\n';
  }
  return os.str();
}

std::vector<BenchSpec> make_grid(std::span<const BenchKind> kinds,
                                 std::span<const std::size_t> groups,
                                 std::span<const std::size_t> working_sets,
                                 std::span<const std::size_t> worker_counts,
                                 const BenchSpec& base) {
  std::vector<BenchSpec> grid;
  for (auto k : kinds) {
    for (auto g : groups) {
      for (auto ws : working_sets) {
        for (auto w : worker_counts) {
          BenchSpec s = base;
          s.kind = k;
          s.group = g;
          s.working_set_bytes = ws;
          s.workers = w;
          grid.push_back(s);
        }
      }
    }
  }
  return grid;
}

std::vector<BenchSpec> codesign_grid(std::uint64_t seed) {
  const BenchKind kinds[] = {BenchKind::GatherCacheResident};
  const std::size_t groups[] = {1, 2};
  const std::size_t sizes[] = {64 * 64 * 4, 128 * 128 * 4, 256 * 256 * 4};
  const std::size_t workers[] = {1, 4, 16};
  BenchSpec base;
  base.seed = seed;
  return make_grid(kinds, groups, sizes, workers, base);
}

}  // namespace msda
