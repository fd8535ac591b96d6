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


// Subcommands behind the msda_bench tool. Each returns a process exit code:
// 0 success, 1 a check failed, 2 usage or config error.

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "msda/config.hpp"
#include "msda/optimized.hpp"
#include "msda/tensor.hpp"

namespace msda {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitUsage = 2;

struct RunConfig {
  std::string command;
  std::uint64_t seed = 0;
  std::size_t workers = 0;  // 0 resolves to default_workers()
  std::string preset;       // empty resolves per command
  std::size_t repeats = 10;
  std::optional<std::size_t> warmup;  // per command default when unset
  Mode mode = Mode::Inference;
  std::string out;
  std::string config_path;

  // Kernel knobs.
  std::size_t tile_budget_bytes = kDefaultTileBudget;
  Dtype saved_dtype = Dtype::F32;
  std::size_t queries = 0;  // 0 keeps the preset's query count
  bool inject_fault = false;

  // verify
  std::size_t instances = 200;
  std::size_t grad_seeds = 100;

  // membench. Any non-empty grid list replaces the preset grid.
  std::vector<std::string> kinds;
  std::vector<std::size_t> groups;
  std::vector<std::size_t> working_sets;
  std::vector<std::size_t> worker_counts;
  std::size_t accesses = 0;  // 0 keeps the preset's count
  std::size_t vec_len = 0;
  bool float_scatter = false;
};

using Settings = std::vector<std::pair<std::string, std::string>>;

// Throws UsageError for an unknown key or a malformed value.
void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value);

// Flat "key = value" lines; '#' starts a comment.
Settings parse_config_text(std::string_view text);
Settings read_config_file(const std::string& path);

// Defaults, then the config file, then flags. Fills every per-command
// default so describe() shows what actually runs.
RunConfig resolve_config(std::string_view command, const std::string& config_path,
                         const Settings& flags);
RunConfig finalize(RunConfig cfg);

// One "key=value" line per setting.
std::string describe(const RunConfig& cfg);

int cmd_verify(const RunConfig& cfg, std::ostream& out);
int cmd_bench(const RunConfig& cfg, std::ostream& out);
int cmd_ablate(const RunConfig& cfg, std::ostream& out);
int cmd_membench(const RunConfig& cfg, std::ostream& out);

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

// Problem geometry for the bench/ablate presets ("paper" or "small").
MsdaConfig preset_problem(std::string_view preset, Mode mode, std::size_t queries = 0);

struct TimingRow {
  std::string table;
  std::string variant;
  OptFlags flags;
  std::vector<double> seconds;
  double median_s = 0.0;
  double mad_s = 0.0;
  double ratio = 1.0;  // median / the table's first row
};

struct TimingOptions {
  std::size_t workers = 1;
  std::size_t warmup = 1;
  std::size_t repeats = 10;
  // Timed runs for the forward ablation tables; 0 means `repeats`.
  std::size_t forward_repeats = 0;
  std::uint64_t seed = 0;
  std::size_t tile_budget_bytes = kDefaultTileBudget;
  Dtype saved_dtype = Dtype::F32;
};

// Reference vs optimized wall times for one problem: forward rows, plus
// backward rows in Train mode. Table names are "forward" and "backward".
std::vector<TimingRow> time_ref_vs_opt(const MsdaConfig& problem, const TimingOptions& opts);

// The three ablation tables, runs interleaved across the variants of each
// table: forward_inference, forward_train, backward.
std::vector<TimingRow> time_ablation(const MsdaConfig& problem, const TimingOptions& opts);

inline constexpr std::string_view kVerifyCsvHeader = "check,cases,failures,max_rel,worst";
inline constexpr std::string_view kBenchCsvHeader =
    "preset,mode,pass,impl,workers,repeats,median_us,mad_us";
inline constexpr std::string_view kAblateCsvHeader =
    "table,variant,adaptive_veclen,gather_fusion,staggered_write,scatter_fusion,median_us,mad_us,"
    "ratio_vs_default";

}  // namespace msda
