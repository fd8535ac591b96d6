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


#include "msda/commands.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "msda/compare.hpp"
#include "msda/error.hpp"
#include "msda/fixtures.hpp"
#include "msda/membench.hpp"
#include "msda/reference.hpp"
#include "msda/timing.hpp"

namespace msda {
namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view want) {
  throw UsageError("bad value '" + std::string(value) + "' for " + std::string(key) + " (expected " +
                   std::string(want) + ")");
}

std::uint64_t parse_u64(std::string_view key, std::string_view value) {
  std::uint64_t x = 0;
  const char* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, x);
  if (value.empty() || ec != std::errc() || ptr != end) bad_value(key, value, "unsigned integer");
  return x;
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "1" || value == "true" || value == "on" || value == "yes") return true;
  if (value == "0" || value == "false" || value == "off" || value == "no") return false;
  bad_value(key, value, "true|false");
}

Mode parse_mode(std::string_view key, std::string_view value) {
  if (value == "inference") return Mode::Inference;
  if (value == "train") return Mode::Train;
  bad_value(key, value, "inference|train");
}

Dtype parse_dtype(std::string_view key, std::string_view value) {
  if (value == "f32") return Dtype::F32;
  if (value == "f16") return Dtype::F16;
  bad_value(key, value, "f32|f16");
}

std::vector<std::string_view> split_list(std::string_view value) {
  std::vector<std::string_view> parts;
  while (!value.empty()) {
    const auto comma = value.find(',');
    const auto part = trim(value.substr(0, comma));
    if (!part.empty()) parts.push_back(part);
    if (comma == std::string_view::npos) break;
    value.remove_prefix(comma + 1);
  }
  return parts;
}

std::vector<std::size_t> parse_size_list(std::string_view key, std::string_view value) {
  std::vector<std::size_t> out;
  for (auto part : split_list(value)) out.push_back(parse_u64(key, part));
  return out;
}

template <class T>
std::string join(const std::vector<T>& xs) {
  std::ostringstream os;
  for (std::size_t i = 0; i < xs.size(); ++i) os << (i ? "," : "") << xs[i];
  return os.str();
}

std::string lower_dtype(Dtype d) { return d == Dtype::F16 ? "f16" : "f32"; }
std::string b2s(bool b) { return b ? "true" : "false"; }

struct Key {
  std::string_view name;
  void (*set)(RunConfig&, std::string_view key, std::string_view value);
  std::string (*get)(const RunConfig&);
};

// clang-format off
const Key kKeys[] = {
  {"seed", [](RunConfig& c, auto k, auto v) { c.seed = parse_u64(k, v); },
           [](const RunConfig& c) { return std::to_string(c.seed); }},
  {"workers", [](RunConfig& c, auto k, auto v) { c.workers = parse_u64(k, v); },
              [](const RunConfig& c) { return std::to_string(c.workers); }},
  {"preset", [](RunConfig& c, auto, auto v) { c.preset = std::string(v); },
             [](const RunConfig& c) { return c.preset; }},
  {"repeats", [](RunConfig& c, auto k, auto v) { c.repeats = parse_u64(k, v); },
              [](const RunConfig& c) { return std::to_string(c.repeats); }},
  {"warmup", [](RunConfig& c, auto k, auto v) { c.warmup = parse_u64(k, v); },
             [](const RunConfig& c) { return c.warmup ? std::to_string(*c.warmup) : "default"; }},
  {"mode", [](RunConfig& c, auto k, auto v) { c.mode = parse_mode(k, v); },
           [](const RunConfig& c) { return std::string(mode_name(c.mode)); }},
  {"out", [](RunConfig& c, auto, auto v) { c.out = std::string(v); },
          [](const RunConfig& c) { return c.out; }},
  {"tile_budget_bytes", [](RunConfig& c, auto k, auto v) { c.tile_budget_bytes = parse_u64(k, v); },
                        [](const RunConfig& c) { return std::to_string(c.tile_budget_bytes); }},
  {"saved_dtype", [](RunConfig& c, auto k, auto v) { c.saved_dtype = parse_dtype(k, v); },
                  [](const RunConfig& c) { return lower_dtype(c.saved_dtype); }},
  {"queries", [](RunConfig& c, auto k, auto v) { c.queries = parse_u64(k, v); },
              [](const RunConfig& c) { return std::to_string(c.queries); }},
  {"inject_fault", [](RunConfig& c, auto k, auto v) { c.inject_fault = parse_bool(k, v); },
                   [](const RunConfig& c) { return b2s(c.inject_fault); }},
  {"instances", [](RunConfig& c, auto k, auto v) { c.instances = parse_u64(k, v); },
                [](const RunConfig& c) { return std::to_string(c.instances); }},
  {"grad_seeds", [](RunConfig& c, auto k, auto v) { c.grad_seeds = parse_u64(k, v); },
                 [](const RunConfig& c) { return std::to_string(c.grad_seeds); }},
  {"kinds", [](RunConfig& c, auto, auto v) {
              c.kinds.clear();
              for (auto part : split_list(v)) c.kinds.emplace_back(part);
            },
            [](const RunConfig& c) { return join(c.kinds); }},
  {"groups", [](RunConfig& c, auto k, auto v) { c.groups = parse_size_list(k, v); },
             [](const RunConfig& c) { return join(c.groups); }},
  {"working_sets", [](RunConfig& c, auto k, auto v) { c.working_sets = parse_size_list(k, v); },
                   [](const RunConfig& c) { return join(c.working_sets); }},
  {"worker_counts", [](RunConfig& c, auto k, auto v) { c.worker_counts = parse_size_list(k, v); },
                    [](const RunConfig& c) { return join(c.worker_counts); }},
  {"accesses", [](RunConfig& c, auto k, auto v) { c.accesses = parse_u64(k, v); },
               [](const RunConfig& c) { return std::to_string(c.accesses); }},
  {"vec_len", [](RunConfig& c, auto k, auto v) { c.vec_len = parse_u64(k, v); },
              [](const RunConfig& c) { return std::to_string(c.vec_len); }},
  {"float_scatter", [](RunConfig& c, auto k, auto v) { c.float_scatter = parse_bool(k, v); },
                    [](const RunConfig& c) { return b2s(c.float_scatter); }},
};
// clang-format on

bool is_one_of(std::string_view s, std::initializer_list<std::string_view> options) {
  return std::find(options.begin(), options.end(), s) != options.end();
}

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

std::string markdown_table(const std::vector<std::string>& head,
                           const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(head.size());
  for (std::size_t i = 0; i < head.size(); ++i) width[i] = std::max<std::size_t>(3, head[i].size());
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  }
  std::string s;
  auto line = [&](const std::vector<std::string>& cells) {
    s += '|';
    for (std::size_t i = 0; i < width.size(); ++i) {
      const std::string& cell = i < cells.size() ? cells[i] : std::string();
      s += ' ' + cell + std::string(width[i] - cell.size(), ' ') + " |";
    }
    s += '\n';
  };
  line(head);
  s += '|';
  for (auto w : width) s += ' ' + std::string(w, '-') + " |";
  s += '\n';
  for (const auto& r : rows) line(r);
  return s;
}

void emit_header(const RunConfig& cfg, std::ostream& out) {
  out << "resolved config:\n";
  std::istringstream lines(describe(cfg));
  for (std::string l; std::getline(lines, l);) out << "  " << l << '\n';
  out << '\n';
}

void emit_csv(const RunConfig& cfg, const std::string& csv, std::ostream& out) {
  if (cfg.out.empty()) {
    out << "\ncsv:\n" << csv;
    return;
  }
  std::ofstream f(cfg.out, std::ios::binary);
  if (!f) throw UsageError("cannot open output file '" + cfg.out + "'");
  f << csv;
  if (!f) throw UsageError("failed writing output file '" + cfg.out + "'");
  out << "\ncsv written to " << cfg.out << '\n';
}

std::string flag_bits(const OptFlags& f) {
  std::string s;
  s += f.adaptive_veclen ? '1' : '0';
  s += f.gather_fusion ? '1' : '0';
  s += f.staggered_write ? '1' : '0';
  s += f.scatter_fusion ? '1' : '0';
  return s;
}

OptFlags flags_from_bits(unsigned bits) {
  OptFlags f;
  f.adaptive_veclen = bits & 1u;
  f.gather_fusion = bits & 2u;
  f.staggered_write = bits & 4u;
  f.scatter_fusion = bits & 8u;
  return f;
}

// ---------------------------------------------------------------- verify

struct Check {
  std::string name;
  std::size_t cases = 0;
  std::size_t failures = 0;
  double max_rel = 0.0;
  double score = -1.0;  // max_rel / tolerance of the worst case
  std::string worst;

  void add(const CompareResult& r, const Tolerance& tol, const std::string& where) {
    ++cases;
    if (!r.pass) ++failures;
    const double s = r.max_rel / tol.rel;
    if (s > score) {
      score = s;
      max_rel = r.max_rel;
      worst = where + " index=" + std::to_string(r.worst_index);
    }
  }
};

class Checks {
 public:
  Check& operator[](const std::string& name) {
    auto it = index_.find(name);
    if (it != index_.end()) return rows_[it->second];
    index_.emplace(name, rows_.size());
    rows_.emplace_back().name = name;
    return rows_.back();
  }
  const std::vector<Check>& rows() const { return rows_; }

 private:
  std::map<std::string, std::size_t> index_;
  std::vector<Check> rows_;
};

constexpr std::size_t kExactGradChannels = 8;

Tolerance value_tolerance(Dtype d) { return d == Dtype::F16 ? Tolerance{2e-3, 1e-6} : Tolerance{}; }

void verify_instance(const Instance& in, const RunConfig& cfg, const std::string& label,
                     Checks& checks) {
  const MsdaConfig& mc = in.cfg;
  const auto ref = msda_forward_ref(in.value, in.sampling, mc);
  const auto ref_grads = msda_backward_ref(in.value, in.sampling, mc, in.grad_output);
  const Tolerance tv = value_tolerance(mc.dtype);
  const Tolerance ts = value_tolerance(cfg.saved_dtype);
  // Location and weight gradients are channel sums of mixed-sign terms. Past
  // a few channels their elementwise relative error is set by cancellation,
  // so wide instances are judged against the tensor's own scale.
  const bool wide = mc.channels > kExactGradChannels;
  const Tolerance tl =
      wide ? scaled_tolerance(ref_grads.grad_locations, Tolerance{}.rel) : Tolerance{};
  // grad_weights is a dot product with the saved samples and inherits their rounding.
  const double rw = cfg.saved_dtype == Dtype::F16 ? ts.rel : Tolerance{}.rel;
  const Tolerance tw = wide || cfg.saved_dtype == Dtype::F16
                           ? scaled_tolerance(ref_grads.grad_weights, rw)
                           : Tolerance{};
  for (unsigned bits = 0; bits < 16; ++bits) {
    OptFlags flags = flags_from_bits(bits);
    // Odd combinations also run multi-threaded even on a single-core host.
    flags.workers = bits % 2 ? std::max<std::size_t>(cfg.workers, 3) : 1;
    flags.tile_budget_bytes = cfg.tile_budget_bytes;
    flags.saved_dtype = cfg.saved_dtype;
    flags.inject_fault = cfg.inject_fault;
    const std::string where =
        label + " flags=" + flag_bits(flags) + " workers=" + std::to_string(flags.workers);

    const auto fwd = msda_forward_opt(in.value, in.sampling, mc, flags);
    checks["forward"].add(compare(fwd.output, ref.output, tv), tv, where);
    if (mc.mode == Mode::Train) {
      if (!fwd.saved || !ref.saved) throw Error("train-mode forward returned no saved samples");
      checks["saved"].add(compare(fwd.saved->sampled, ref.saved->sampled, ts), ts, where);
    }
    const auto g = msda_backward_opt(in.value, in.sampling, mc, flags, in.grad_output, fwd.saved);
    checks["grad_value"].add(compare(g.grad_value, ref_grads.grad_value, tv), tv, where);
    checks["grad_locations"].add(compare(g.grad_locations, ref_grads.grad_locations, tl), tl, where);
    checks["grad_weights"].add(compare(g.grad_weights, ref_grads.grad_weights, tw), tw, where);
  }
}

void verify_gradients(const RunConfig& cfg, Checks& checks) {
  const MsdaConfig small = small_grad_config();
  const Tolerance tol{1e-3, 1e-5};
  OptFlags flags;
  flags.workers = 1;
  flags.tile_budget_bytes = cfg.tile_budget_bytes;
  const BackwardFn opt_backward = [&](const FeaturePyramid& v, const SamplingTensors& s,
                                      const MsdaConfig& c, const Tensor& g) {
    return msda_backward_opt(v, s, c, flags, g);
  };
  for (std::size_t i = 0; i < cfg.grad_seeds; ++i) {
    const std::uint64_t seed = cfg.seed + i;
    const std::string where = "seed=" + std::to_string(seed);
    for (const auto& t : grad_check(small, seed, 1e-3, tol).tensors) {
      checks["fd " + t.name + " (ref)"].add(t.result, tol, where);
    }
    for (const auto& t : grad_check(small, seed, 1e-3, tol, opt_backward).tensors) {
      checks["fd " + t.name + " (opt)"].add(t.result, tol, where);
    }
  }
}

// ------------------------------------------------------------- timing

TimingRow make_row(std::string table, std::string variant, const OptFlags& flags) {
  TimingRow row;
  row.table = std::move(table);
  row.variant = std::move(variant);
  row.flags = flags;
  return row;
}

template <class Fn>
TimingRow timed_row(std::string table, std::string variant, const OptFlags& flags,
                    const TimingOptions& opts, Fn&& fn) {
  TimingRow row = make_row(std::move(table), std::move(variant), flags);
  row.seconds = time_runs(opts.warmup, opts.repeats, fn);
  return row;
}

void finish_rows(std::vector<TimingRow>& rows) {
  for (auto& r : rows) {
    r.median_s = median(r.seconds);
    r.mad_s = median_abs_deviation(r.seconds);
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const TimingRow* first = nullptr;
    for (auto& r : rows) {
      if (r.table == rows[i].table) {
        first = &r;
        break;
      }
    }
    rows[i].ratio = first->median_s > 0 ? rows[i].median_s / first->median_s : 1.0;
  }
}

OptFlags base_flags(const TimingOptions& opts) {
  OptFlags f;
  f.workers = opts.workers;
  f.tile_budget_bytes = opts.tile_budget_bytes;
  f.saved_dtype = opts.saved_dtype;
  return f;
}

struct Variant {
  const char* name;
  unsigned bits;  // adaptive | gather << 1 | staggered << 2 | scatter << 3
};

constexpr Variant kForwardVariants[] = {
    {"Default", 15u}, {"-Adaptive VecLen", 14u}, {"-Gather Fusion", 13u}, {"-All", 0u}};
constexpr Variant kBackwardVariants[] = {
    {"Default", 15u}, {"-Staggered Write", 11u}, {"-Scatter Fusion", 7u}, {"-All", 0u}};

// Round-robin over the variants so slow drift on the host hits all of them.
template <class Fn>
void interleaved_table(const std::string& table, std::span<const Variant> variants,
                       const TimingOptions& opts, std::size_t repeats, Fn&& run,
                       std::vector<TimingRow>& rows) {
  const std::size_t first = rows.size();
  for (const auto& v : variants) {
    OptFlags f = flags_from_bits(v.bits);
    f.workers = opts.workers;
    f.tile_budget_bytes = opts.tile_budget_bytes;
    f.saved_dtype = opts.saved_dtype;
    rows.push_back(make_row(table, v.name, f));
  }
  for (std::size_t round = 0; round < opts.warmup + repeats; ++round) {
    // rotate the starting variant so no row always runs first
    for (std::size_t k = 0; k < variants.size(); ++k) {
      TimingRow& row = rows[first + (round + k) % variants.size()];
      const auto t0 = Clock::now();
      run(row.flags);
      const double s = seconds_since(t0);
      if (round >= opts.warmup) row.seconds.push_back(s);
    }
  }
}

std::string us(double seconds) { return fmt("%.1f", seconds * 1e6); }

}  // namespace

// ------------------------------------------------------------- config

void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value) {
  key = trim(key);
  value = trim(value);
  for (const auto& k : kKeys) {
    if (k.name == key) {
      k.set(cfg, key, value);
      return;
    }
  }
  throw UsageError("unknown config key '" + std::string(key) + "'");
}

Settings parse_config_text(std::string_view text) {
  Settings out;
  std::size_t lineno = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text.remove_prefix(nl == std::string_view::npos ? text.size() : nl + 1);
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos || trim(line.substr(0, eq)).empty()) {
      throw UsageError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    out.emplace_back(std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))));
  }
  return out;
}

Settings read_config_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

RunConfig finalize(RunConfig cfg) {
  if (cfg.workers == 0) cfg.workers = default_workers();
  if (cfg.repeats == 0) throw UsageError("repeats must be >= 1");
  const bool custom_grid = !cfg.kinds.empty() || !cfg.groups.empty() ||
                           !cfg.working_sets.empty() || !cfg.worker_counts.empty();
  if (cfg.command == "verify") {
    if (cfg.preset.empty()) cfg.preset = "small";
    if (!is_one_of(cfg.preset, {"small", "paper"})) {
      throw UsageError("unknown verify preset '" + cfg.preset + "' (small|paper)");
    }
    if (!cfg.warmup) cfg.warmup = 0;
  } else if (cfg.command == "bench" || cfg.command == "ablate") {
    if (cfg.preset.empty()) cfg.preset = "paper";
    if (!is_one_of(cfg.preset, {"small", "paper"})) {
      throw UsageError("unknown " + cfg.command + " preset '" + cfg.preset + "' (small|paper)");
    }
    if (!cfg.warmup) cfg.warmup = 1;
  } else if (cfg.command == "membench") {
    if (cfg.preset.empty()) cfg.preset = custom_grid ? "custom" : "codesign";
    if (!is_one_of(cfg.preset, {"codesign", "contention", "small", "custom"})) {
      throw UsageError("unknown membench preset '" + cfg.preset +
                       "' (codesign|contention|small|custom)");
    }
    if (custom_grid && cfg.preset != "custom") {
      throw UsageError("grid keys (kinds/groups/working_sets/worker_counts) need preset=custom");
    }
    for (const auto& k : cfg.kinds) {
      try {
        parse_bench_kind(k);
      } catch (const InputError& e) {
        throw UsageError(e.what());
      }
    }
    if (!cfg.warmup) cfg.warmup = 3;
    if (cfg.accesses == 0) cfg.accesses = cfg.preset == "small" ? kMinAccesses : (1u << 21);
    if (cfg.accesses < kMinAccesses) {
      throw UsageError("accesses must be >= " + std::to_string(kMinAccesses));
    }
  }
  return cfg;
}

RunConfig resolve_config(std::string_view command, const std::string& config_path,
                         const Settings& flags) {
  RunConfig cfg;
  cfg.command = std::string(command);
  if (!config_path.empty()) {
    for (const auto& [k, v] : read_config_file(config_path)) apply_setting(cfg, k, v);
    cfg.config_path = config_path;
  }
  for (const auto& [k, v] : flags) apply_setting(cfg, k, v);
  return finalize(std::move(cfg));
}

std::string describe(const RunConfig& cfg) {
  std::string s = "command=" + cfg.command + '\n';
  s += "config=" + cfg.config_path + '\n';
  for (const auto& k : kKeys) s += std::string(k.name) + '=' + k.get(cfg) + '\n';
  return s;
}

MsdaConfig preset_problem(std::string_view preset, Mode mode, std::size_t queries) {
  if (preset == "paper") return paper_config(queries ? queries : 87296, mode, Dtype::F16);
  if (preset == "small") return paper_config(queries ? queries : 64, mode, Dtype::F16);
  throw UsageError("unknown preset '" + std::string(preset) + "' (small|paper)");
}

// ------------------------------------------------------------- timing

std::vector<TimingRow> time_ref_vs_opt(const MsdaConfig& problem, const TimingOptions& opts) {
  SamplingOptions so;
  so.normalize_weights = true;
  const Instance in = random_instance(problem, opts.seed, so);
  const OptFlags flags = base_flags(opts);
  OptFlags ref_flags = flags;
  ref_flags.workers = 1;

  std::vector<TimingRow> rows;
  rows.push_back(timed_row("forward", "ref", ref_flags, opts, [&] {
    (void)msda_forward_ref(in.value, in.sampling, problem);
  }));
  rows.push_back(timed_row("forward", "opt", flags, opts, [&] {
    (void)msda_forward_opt(in.value, in.sampling, problem, flags);
  }));
  if (problem.mode == Mode::Train) {
    rows.push_back(timed_row("backward", "ref", ref_flags, opts, [&] {
      (void)msda_backward_ref(in.value, in.sampling, problem, in.grad_output);
    }));
    const auto saved = msda_forward_opt(in.value, in.sampling, problem, flags).saved;
    rows.push_back(timed_row("backward", "opt", flags, opts, [&] {
      (void)msda_backward_opt(in.value, in.sampling, problem, flags, in.grad_output, saved);
    }));
  }
  finish_rows(rows);
  return rows;
}

std::vector<TimingRow> time_ablation(const MsdaConfig& problem, const TimingOptions& opts) {
  SamplingOptions so;
  so.normalize_weights = true;
  MsdaConfig inference = problem;
  inference.mode = Mode::Inference;
  MsdaConfig train = problem;
  train.mode = Mode::Train;
  const Instance in = random_instance(inference, opts.seed, so);

  const std::size_t fwd_repeats = opts.forward_repeats ? opts.forward_repeats : opts.repeats;
  std::vector<TimingRow> rows;
  interleaved_table("forward_inference", kForwardVariants, opts, fwd_repeats, [&](const OptFlags& f) {
    (void)msda_forward_opt(in.value, in.sampling, inference, f);
  }, rows);
  interleaved_table("forward_train", kForwardVariants, opts, fwd_repeats, [&](const OptFlags& f) {
    (void)msda_forward_opt(in.value, in.sampling, train, f);
  }, rows);
  {
    const auto saved = msda_forward_opt(in.value, in.sampling, train, base_flags(opts)).saved;
    interleaved_table("backward", kBackwardVariants, opts, opts.repeats, [&](const OptFlags& f) {
      (void)msda_backward_opt(in.value, in.sampling, train, f, in.grad_output, saved);
    }, rows);
  }
  finish_rows(rows);
  return rows;
}

// ------------------------------------------------------------- commands

int cmd_verify(const RunConfig& raw, std::ostream& out) {
  const RunConfig cfg = finalize(raw);
  emit_header(cfg, out);
  Checks checks;
  if (cfg.preset == "small") {
    SamplingOptions so;
    so.lo = -0.25;
    so.hi = 1.25;
    so.lattice_fraction = 0.25;
    for (std::size_t i = 0; i < cfg.instances; ++i) {
      const std::uint64_t seed = cfg.seed + i;
      MsdaConfig mc = random_config(seed, i % 2 ? Dtype::F16 : Dtype::F32);
      mc.mode = (i / 2) % 2 ? Mode::Train : Mode::Inference;
      so.dtype = Dtype::F32;
      const Instance in = random_instance(mc, seed, so);
      verify_instance(in, cfg, "seed=" + std::to_string(seed), checks);
    }
  } else {
    SamplingOptions so;
    so.lo = -0.1;
    so.hi = 1.1;
    so.lattice_fraction = 0.1;
    so.normalize_weights = true;
    const MsdaConfig mc = paper_config(cfg.queries ? cfg.queries : 2048, Mode::Train, Dtype::F16);
    const Instance in = random_instance(mc, cfg.seed, so);
    verify_instance(in, cfg, "paper seed=" + std::to_string(cfg.seed), checks);
  }
  verify_gradients(cfg, checks);

  std::vector<std::vector<std::string>> table;
  std::string csv = std::string(kVerifyCsvHeader) + '\n';
  std::size_t failed = 0;
  for (const auto& c : checks.rows()) {
    if (c.failures) ++failed;
    table.push_back({c.name, std::to_string(c.cases), std::to_string(c.failures),
                     fmt("%.3e", c.max_rel), c.failures ? "FAIL" : "ok", c.worst});
    csv += c.name + ',' + std::to_string(c.cases) + ',' + std::to_string(c.failures) + ',' +
           fmt("%.6e", c.max_rel) + ",\"" + c.worst + "\"\n";
  }
  out << markdown_table({"check", "cases", "failures", "max_rel", "status", "worst"}, table);
  emit_csv(cfg, csv, out);
  out << (failed ? "\nverify: FAIL (" + std::to_string(failed) + " checks failed)\n"
                 : std::string("\nverify: PASS\n"));
  return failed ? kExitCheckFailed : kExitOk;
}

int cmd_bench(const RunConfig& raw, std::ostream& out) {
  const RunConfig cfg = finalize(raw);
  emit_header(cfg, out);
  const MsdaConfig problem = preset_problem(cfg.preset, cfg.mode, cfg.queries);
  TimingOptions opts;
  opts.workers = cfg.workers;
  opts.warmup = *cfg.warmup;
  opts.repeats = cfg.repeats;
  opts.seed = cfg.seed;
  opts.tile_budget_bytes = cfg.tile_budget_bytes;
  opts.saved_dtype = cfg.saved_dtype;
  const auto rows = time_ref_vs_opt(problem, opts);

  std::vector<std::vector<std::string>> table;
  std::string csv = std::string(kBenchCsvHeader) + '\n';
  for (const auto& r : rows) {
    const double speedup = r.variant == "opt" && r.ratio > 0 ? 1.0 / r.ratio : 1.0;
    table.push_back({r.table, r.variant, std::to_string(r.flags.workers), us(r.median_s),
                     us(r.mad_s), fmt("%.2fx", speedup)});
    csv += cfg.preset + ',' + std::string(mode_name(cfg.mode)) + ',' + r.table + ',' + r.variant +
           ',' + std::to_string(r.flags.workers) + ',' + std::to_string(cfg.repeats) + ',' +
           us(r.median_s) + ',' + us(r.mad_s) + '\n';
  }
  out << "queries=" << problem.queries << " levels=" << problem.num_levels()
      << " heads=" << problem.heads << " channels=" << problem.channels
      << " points=" << problem.points << " dtype=" << dtype_name(problem.dtype) << "\n\n";
  out << markdown_table({"pass", "impl", "workers", "median_us", "mad_us", "speedup"}, table);
  emit_csv(cfg, csv, out);
  return kExitOk;
}

int cmd_ablate(const RunConfig& raw, std::ostream& out) {
  const RunConfig cfg = finalize(raw);
  emit_header(cfg, out);
  const MsdaConfig problem = preset_problem(cfg.preset, Mode::Inference, cfg.queries);
  TimingOptions opts;
  opts.workers = cfg.workers;
  opts.warmup = *cfg.warmup;
  opts.repeats = cfg.repeats;
  opts.seed = cfg.seed;
  opts.tile_budget_bytes = cfg.tile_budget_bytes;
  opts.saved_dtype = cfg.saved_dtype;
  const auto rows = time_ablation(problem, opts);

  std::string csv = std::string(kAblateCsvHeader) + '\n';
  std::vector<std::string> flagged;
  std::string current;
  std::vector<std::vector<std::string>> table;
  auto flush = [&] {
    if (table.empty()) return;
    out << "### " << current << "\n\n"
        << markdown_table({"variant", "median_us", "mad_us", "ratio", "note"}, table) << '\n';
    table.clear();
  };
  for (const auto& r : rows) {
    if (r.table != current) {
      flush();
      current = r.table;
    }
    const bool beats_default = r.variant != "Default" && r.ratio < 1.0;
    if (beats_default) flagged.push_back(r.table + "/" + r.variant);
    table.push_back({r.variant, us(r.median_s), us(r.mad_s), fmt("%.2f", r.ratio),
                     beats_default ? "faster than Default" : ""});
    csv += r.table + ',' + r.variant + ',' + (r.flags.adaptive_veclen ? "1" : "0") + ',' +
           (r.flags.gather_fusion ? "1" : "0") + ',' + (r.flags.staggered_write ? "1" : "0") +
           ',' + (r.flags.scatter_fusion ? "1" : "0") + ',' + us(r.median_s) + ',' +
           us(r.mad_s) + ',' + fmt("%.4f", r.ratio) + '\n';
  }
  flush();
  if (flagged.empty()) {
    out << "Default is the fastest row of every table.\n";
  } else {
    out << "Default is not fastest in: ";
    for (std::size_t i = 0; i < flagged.size(); ++i) out << (i ? ", " : "") << flagged[i];
    out << '\n';
  }
  emit_csv(cfg, csv, out);
  return kExitOk;
}

int cmd_membench(const RunConfig& raw, std::ostream& out) {
  const RunConfig cfg = finalize(raw);
  emit_header(cfg, out);
  BenchSpec base;
  base.seed = cfg.seed;
  base.accesses = cfg.accesses;
  base.vec_len = cfg.vec_len;
  base.float_scatter = cfg.float_scatter;

  std::vector<BenchSpec> grid;
  const std::size_t small_ws = 64 * 64 * 4;
  if (cfg.preset == "codesign") {
    grid = codesign_grid(cfg.seed);
    for (auto& s : grid) {
      s.accesses = base.accesses;
      s.vec_len = base.vec_len;
    }
  } else if (cfg.preset == "contention") {
    const BenchKind kinds[] = {BenchKind::ScatterAdd};
    const std::size_t groups[] = {1, 2};
    const std::size_t sets[] = {small_ws};
    const std::size_t workers[] = {1, 4, 16};
    grid = make_grid(kinds, groups, sets, workers, base);
  } else if (cfg.preset == "small") {
    const BenchKind kinds[] = {BenchKind::GatherCacheResident, BenchKind::ScatterAdd};
    const std::size_t groups[] = {1, 2};
    const std::size_t sets[] = {small_ws};
    const std::size_t workers[] = {1, 2};
    grid = make_grid(kinds, groups, sets, workers, base);
  } else {
    std::vector<BenchKind> kinds;
    for (const auto& k : cfg.kinds) kinds.push_back(parse_bench_kind(k));
    if (kinds.empty()) kinds.push_back(BenchKind::GatherCacheResident);
    const auto groups = cfg.groups.empty() ? std::vector<std::size_t>{1} : cfg.groups;
    const auto sets = cfg.working_sets.empty() ? std::vector<std::size_t>{small_ws} : cfg.working_sets;
    const auto workers = cfg.worker_counts.empty() ? std::vector<std::size_t>{1} : cfg.worker_counts;
    grid = make_grid(kinds, groups, sets, workers, base);
  }

  const auto rows = sweep(grid, SweepOptions{*cfg.warmup, cfg.repeats});
  std::vector<std::vector<std::string>> table;
  std::size_t bad = 0;
  for (const auto& r : rows) {
    if (!r.checksum_ok) ++bad;
    table.push_back({std::string(bench_kind_name(r.spec.kind)), std::to_string(r.spec.group),
                     std::to_string(r.spec.working_set_bytes), std::to_string(r.spec.workers),
                     fmt("%.6f", r.median_seconds), fmt("%.3f", r.bandwidth_bps / 1e9),
                     fmt("%.3f", r.per_worker_bandwidth_bps / 1e9), r.checksum_ok ? "yes" : "NO",
                     r.error});
  }
  out << markdown_table({"kind", "group", "working_set_bytes", "workers", "median_s", "GB/s",
                         "GB/s/worker", "checksum_ok", "error"},
                        table);
  emit_csv(cfg, sweep_csv(rows), out);
  if (bad) out << '\n' << bad << " cell(s) failed validation\n";
  return bad ? kExitCheckFailed : kExitOk;
}

// ------------------------------------------------------------------ cli

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-scale deformable attention kernels: checks, timing and microbenchmarks",
               "msda_bench"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  struct FlagSpec {
    const char* flag;
    const char* key;
    const char* help;
  };
  static constexpr FlagSpec kFlags[] = {
      {"--seed", "seed", "RNG seed (u64)"},
      {"--workers", "workers", "worker threads (default: hardware concurrency)"},
      {"--preset", "preset", "verify/bench/ablate: small|paper; membench: codesign|contention|small|custom"},
      {"--repeats", "repeats", "timed runs per row (median reported)"},
      {"--warmup", "warmup", "untimed runs before timing"},
      {"--mode", "mode", "inference|train"},
      {"--out", "out", "CSV output path"},
      {"--queries", "queries", "override the preset's query count"},
      {"--tile-budget", "tile_budget_bytes", "per-worker tile budget in bytes"},
      {"--saved-dtype", "saved_dtype", "f32|f16 storage of train-mode samples"},
      {"--instances", "instances", "verify: random instances"},
      {"--grad-seeds", "grad_seeds", "verify: finite-difference seeds"},
      {"--kinds", "kinds", "membench: comma list of gather|gather_mem|scatter"},
      {"--groups", "groups", "membench: comma list of 1|2"},
      {"--working-sets", "working_sets", "membench: comma list of bytes"},
      {"--worker-counts", "worker_counts", "membench: comma list"},
      {"--accesses", "accesses", "membench: accesses per worker"},
      {"--vec-len", "vec_len", "membench: gather inner batch length"},
  };
  std::map<std::string, std::string> values;
  std::vector<std::pair<std::string, CLI::Option*>> options;
  for (const auto& f : kFlags) options.emplace_back(f.key, app.add_option(f.flag, values[f.key], f.help));
  bool float_scatter = false;
  auto* float_opt = app.add_flag("--float-scatter", float_scatter, "membench: float scatter-add");
  bool inject = false;
  auto* inject_opt = app.add_flag("--inject-fault", inject)->group("");
  std::string config_path;
  app.add_option("--config", config_path, "flat key=value config file (flags win)");

  app.add_subcommand("verify", "oracle equivalence over all flag combinations plus gradient checks");
  app.add_subcommand("bench", "reference vs optimized forward/backward wall time");
  app.add_subcommand("ablate", "ablation tables: each optimization toggled off");
  app.add_subcommand("membench", "gather/scatter bandwidth sweeps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  Settings flags;
  for (const auto& [key, opt] : options) {
    if (opt->count() > 0) flags.emplace_back(key, values[key]);
  }
  if (float_opt->count() > 0) flags.emplace_back("float_scatter", b2s(float_scatter));
  if (inject_opt->count() > 0) flags.emplace_back("inject_fault", b2s(inject));
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    const RunConfig cfg = resolve_config(command, config_path, flags);
    if (command == "verify") return cmd_verify(cfg, out);
    if (command == "bench") return cmd_bench(cfg, out);
    if (command == "ablate") return cmd_ablate(cfg, out);
    return cmd_membench(cfg, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const PlanError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitCheckFailed;
  }
}

}  // namespace msda
