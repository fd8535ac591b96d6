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


#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "msda/commands.hpp"
#include "msda/error.hpp"

namespace msda {
namespace {

struct CliResult {
  int code = 0;
  std::string out;
  std::string err;
};

CliResult cli(std::vector<std::string> args) {
  args.insert(args.begin(), "msda_bench");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliResult r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("msda_test_" + name)).string();
}

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

TEST(Config, ParsesKeyValueLines) {
  const Settings s = parse_config_text("# comment\nseed = 7\n\n  workers=3  # trailing\nmode= train\n");
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s[0], (std::pair<std::string, std::string>{"seed", "7"}));
  EXPECT_EQ(s[1], (std::pair<std::string, std::string>{"workers", "3"}));
  EXPECT_EQ(s[2], (std::pair<std::string, std::string>{"mode", "train"}));
  EXPECT_THROW(parse_config_text("seed 7\n"), UsageError);
  EXPECT_THROW(parse_config_text("= 7\n"), UsageError);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  RunConfig c;
  EXPECT_THROW(apply_setting(c, "not_a_key", "1"), UsageError);
  EXPECT_THROW(apply_setting(c, "seed", "-1"), UsageError);
  EXPECT_THROW(apply_setting(c, "seed", "12x"), UsageError);
  EXPECT_THROW(apply_setting(c, "mode", "eval"), UsageError);
  EXPECT_THROW(apply_setting(c, "saved_dtype", "f64"), UsageError);
  EXPECT_THROW(apply_setting(c, "groups", "1,x"), UsageError);
  apply_setting(c, "groups", "1, 2");
  EXPECT_EQ(c.groups, (std::vector<std::size_t>{1, 2}));
  apply_setting(c, "saved_dtype", "f16");
  EXPECT_EQ(c.saved_dtype, Dtype::F16);
}

TEST(Config, FlagsOverrideFile) {
  const std::string path = temp_path("override.cfg");
  {
    std::ofstream f(path);
    f << "seed = 5\nrepeats = 4\npreset = small\n";
  }
  const RunConfig c = resolve_config("bench", path, {{"seed", "9"}});
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.repeats, 4u);
  EXPECT_EQ(c.preset, "small");
  EXPECT_EQ(c.config_path, path);
  std::remove(path.c_str());
  EXPECT_THROW(resolve_config("bench", temp_path("missing.cfg"), {}), UsageError);
}

TEST(Config, PerCommandDefaults) {
  const RunConfig v = resolve_config("verify", "", {});
  EXPECT_EQ(v.preset, "small");
  EXPECT_EQ(*v.warmup, 0u);
  EXPECT_GE(v.workers, 1u);
  const RunConfig b = resolve_config("ablate", "", {});
  EXPECT_EQ(b.preset, "paper");
  EXPECT_EQ(*b.warmup, 1u);
  const RunConfig m = resolve_config("membench", "", {});
  EXPECT_EQ(m.preset, "codesign");
  EXPECT_EQ(*m.warmup, 3u);
  EXPECT_EQ(m.accesses, std::size_t{1} << 21);
  const RunConfig g = resolve_config("membench", "", {{"groups", "2"}});
  EXPECT_EQ(g.preset, "custom");
  EXPECT_THROW(resolve_config("membench", "", {{"preset", "small"}, {"groups", "2"}}), UsageError);
  EXPECT_THROW(resolve_config("membench", "", {{"preset", "custom"}, {"kinds", "copy"}}), UsageError);
  EXPECT_THROW(resolve_config("verify", "", {{"preset", "huge"}}), UsageError);
  EXPECT_THROW(resolve_config("bench", "", {{"repeats", "0"}}), UsageError);
}

TEST(Config, DescribeRoundTrips) {
  const RunConfig a = resolve_config(
      "membench", "", {{"seed", "11"}, {"kinds", "gather,scatter"}, {"groups", "1,2"},
                       {"float_scatter", "true"}, {"saved_dtype", "f16"}, {"mode", "train"}});
  RunConfig b;
  b.command = "membench";
  for (const auto& [k, v] : parse_config_text(describe(a))) {
    if (k != "command" && k != "config") apply_setting(b, k, v);
  }
  EXPECT_EQ(describe(finalize(b)), describe(a));
}

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(cli({"--help"}).code, kExitOk);
  EXPECT_EQ(cli({}).code, kExitUsage);
  EXPECT_EQ(cli({"frobnicate"}).code, kExitUsage);
  EXPECT_EQ(cli({"verify", "--no-such-flag"}).code, kExitUsage);
  EXPECT_EQ(cli({"verify", "--workers", "abc"}).code, kExitUsage);
  const CliResult r = cli({"bench", "--tile-budget", "1", "--preset", "small", "--repeats", "1"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("budget"), std::string::npos) << r.err;
}

TEST(Cli, VerifyWritesPureCsv) {
  const std::string path = temp_path("verify.csv");
  const CliResult r = cli({"verify", "--instances", "4", "--grad-seeds", "2", "--workers", "2",
                           "--out", path});
  EXPECT_EQ(r.code, kExitOk) << r.out << r.err;
  EXPECT_NE(r.out.find("resolved config:"), std::string::npos);
  EXPECT_NE(r.out.find("verify: PASS"), std::string::npos);
  const auto csv = lines(slurp(path));
  ASSERT_GE(csv.size(), 2u);
  EXPECT_EQ(csv[0], kVerifyCsvHeader);
  for (std::size_t i = 1; i < csv.size(); ++i) EXPECT_NE(csv[i].find(",0,"), std::string::npos) << csv[i];
  std::remove(path.c_str());
}

TEST(Cli, VerifyCatchesInjectedFault) {
  const CliResult r = cli({"verify", "--instances", "2", "--grad-seeds", "1", "--inject-fault"});
  EXPECT_EQ(r.code, kExitCheckFailed);
  EXPECT_NE(r.out.find("verify: FAIL"), std::string::npos);
}

TEST(Cli, BenchAndAblateSmall) {
  const CliResult b = cli({"bench", "--preset", "small", "--repeats", "2", "--mode", "train",
                           "--workers", "2"});
  ASSERT_EQ(b.code, kExitOk) << b.err;
  const auto at = b.out.find("csv:\n");
  ASSERT_NE(at, std::string::npos);
  const auto csv = lines(b.out.substr(at + 5));
  ASSERT_EQ(csv.size(), 5u);  // header + forward/backward x ref/opt
  EXPECT_EQ(csv[0], kBenchCsvHeader);
  // The reference kernel is single-threaded and says so.
  EXPECT_EQ(csv[1].rfind("small,train,forward,ref,1,2,", 0), 0u) << csv[1];
  EXPECT_EQ(csv[2].rfind("small,train,forward,opt,2,2,", 0), 0u) << csv[2];

  const std::string path = temp_path("ablate.csv");
  const CliResult a = cli({"ablate", "--preset", "small", "--repeats", "1", "--out", path});
  ASSERT_EQ(a.code, kExitOk) << a.err;
  const auto rows = lines(slurp(path));
  ASSERT_EQ(rows.size(), 13u);
  EXPECT_EQ(rows[0], kAblateCsvHeader);
  EXPECT_EQ(rows[1].rfind("forward_inference,Default,1,1,1,1,", 0), 0u) << rows[1];
  EXPECT_EQ(rows[4].rfind("forward_inference,-All,0,0,0,0,", 0), 0u) << rows[4];
  EXPECT_EQ(rows[10].rfind("backward,-Staggered Write,1,1,0,1,", 0), 0u) << rows[10];
  std::remove(path.c_str());
}

TEST(Cli, MembenchCustomGrid) {
  const std::string cfg = temp_path("membench.cfg");
  {
    std::ofstream f(cfg);
    f << "preset = custom\nkinds = gather,scatter\ngroups = 1,2\nworking_sets = 16384\n"
         "worker_counts = 1\naccesses = 100000\nrepeats = 2\nwarmup = 0\n";
  }
  const std::string path = temp_path("membench.csv");
  const CliResult r = cli({"membench", "--config", cfg, "--out", path});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto rows = lines(slurp(path));
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0], "kind,group,working_set_bytes,workers,median_seconds,bandwidth_bps,checksum_ok");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].substr(rows[i].size() - 5), ",true") << rows[i];
  }
  EXPECT_EQ(cli({"membench", "--accesses", "10"}).code, kExitUsage);
  std::remove(cfg.c_str());
  std::remove(path.c_str());
}

}  // namespace
}  // namespace msda
