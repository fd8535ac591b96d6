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

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "msda/compare.hpp"
#include "msda/config.hpp"
#include "msda/error.hpp"
#include "msda/fixtures.hpp"
#include "msda/pyramid.hpp"
#include "msda/reference.hpp"
#include "msda/tensor.hpp"

namespace msda {
namespace {

// The 2x2 map [[1,2],[3,4]] used by the worked examples.
const float kMap[4] = {1.0f, 2.0f, 3.0f, 4.0f};

PlaneView map_view() { return PlaneView{kMap, 2, 2, 2, 1}; }

// One level 2x2, one head, one channel, holding [[1,2],[3,4]].
Instance tiny_instance(std::size_t points, Mode mode = Mode::Inference) {
  Instance in;
  in.cfg.levels = make_levels({{2, 2}});
  in.cfg.points = points;
  in.cfg.mode = mode;
  const std::pair<std::size_t, std::size_t> shape{2, 2};
  in.value = make_pyramid(1, 1, 1, {&shape, 1}, Dtype::F32, Fill::zeros());
  for (std::size_t i = 0; i < 4; ++i) in.value.storage.set(i, kMap[i]);
  in.sampling.locations = Tensor(in.cfg.location_dims(), Dtype::F32);
  in.sampling.weights = Tensor(in.cfg.weight_dims(), Dtype::F32);
  in.grad_output = Tensor(in.cfg.output_dims(), Dtype::F32);
  return in;
}

void put_point(Instance& in, std::size_t p, float x, float y, float w) {
  in.sampling.locations.set(2 * p, x);
  in.sampling.locations.set(2 * p + 1, y);
  in.sampling.weights.set(p, w);
}

// Scalar loop over (b, q, h, l, p, corner, c) in double, written from the
// sampling formula alone.
std::vector<double> oracle_forward(const Instance& in) {
  const MsdaConfig& cfg = in.cfg;
  const std::size_t T = total_pixels(cfg.levels);
  const std::size_t L = cfg.num_levels();
  std::vector<double> out(cfg.batch * cfg.queries * cfg.heads * cfg.channels, 0.0);
  for (std::size_t b = 0; b < cfg.batch; ++b)
    for (std::size_t q = 0; q < cfg.queries; ++q)
      for (std::size_t h = 0; h < cfg.heads; ++h)
        for (std::size_t l = 0; l < L; ++l)
          for (std::size_t p = 0; p < cfg.points; ++p) {
            const std::size_t pt = (((b * cfg.queries + q) * cfg.heads + h) * L + l) * cfg.points + p;
            const LevelSpec& lv = cfg.levels[l];
            const double x = in.sampling.locations.get(2 * pt);
            const double y = in.sampling.locations.get(2 * pt + 1);
            const double w = in.sampling.weights.get(pt);
            const double wi = x * static_cast<double>(lv.width) - 0.5;
            const double hi = y * static_cast<double>(lv.height) - 0.5;
            const double x0 = std::floor(wi), y0 = std::floor(hi);
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const double xx = x0 + dx, yy = y0 + dy;
                if (xx < 0 || yy < 0 || xx >= static_cast<double>(lv.width) ||
                    yy >= static_cast<double>(lv.height))
                  continue;
                const double cw = (dy ? hi - y0 : 1 - (hi - y0)) * (dx ? wi - x0 : 1 - (wi - x0));
                const std::size_t pix = lv.offset + static_cast<std::size_t>(yy) * lv.width +
                                        static_cast<std::size_t>(xx);
                for (std::size_t c = 0; c < cfg.channels; ++c) {
                  const double v =
                      in.value.storage.get(((b * T + pix) * cfg.heads + h) * cfg.channels + c);
                  out[(b * cfg.queries + q) * cfg.heads * cfg.channels + h * cfg.channels + c] +=
                      w * cw * v;
                }
              }
          }
  return out;
}

std::vector<double> as_double(const Tensor& t) {
  std::vector<double> v(t.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = t.get(i);
  return v;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a.get(i)) * b.get(i);
  return s;
}

MsdaConfig oracle_config() {
  MsdaConfig cfg;
  cfg.batch = 2;
  cfg.queries = 3;
  cfg.heads = 2;
  cfg.channels = 4;
  cfg.levels = make_levels({{4, 4}, {2, 2}});
  cfg.points = 2;
  return cfg;
}

TEST(Bilinear, WorkedExamples) {
  const PlaneView v = map_view();
  EXPECT_EQ(bilinear_sample(v, 0.25f, 0.25f), 1.0f);
  EXPECT_EQ(bilinear_sample(v, 0.5f, 0.5f), 2.5f);
  EXPECT_EQ(bilinear_sample(v, -0.5f, -0.5f), 0.0f);
  EXPECT_EQ(bilinear_sample(v, 0.75f, 0.25f), 2.0f);
  EXPECT_EQ(bilinear_sample(v, 0.5f, 0.25f), 1.5f);
}

TEST(Bilinear, ZeroPaddingAtEdges) {
  const PlaneView v = map_view();
  // Half a pixel past the right edge of row 0: half of pixel (0,1).
  EXPECT_FLOAT_EQ(bilinear_sample(v, 1.0f, 0.25f), 1.0f);
  // Below the bottom row at the center column of row 1: half of (3+4)/2.
  EXPECT_FLOAT_EQ(bilinear_sample(v, 0.5f, 1.0f), 1.75f);
  EXPECT_EQ(bilinear_sample(v, 2.0f, 0.5f), 0.0f);
}

TEST(Bilinear, NonFiniteLocationThrows) {
  const PlaneView v = map_view();
  EXPECT_THROW(bilinear_sample(v, std::nanf(""), 0.5f), InputError);
  EXPECT_THROW(bilinear_sample(v, 0.5f, INFINITY), InputError);
}

TEST(ForwardRef, SinglePoint) {
  Instance in = tiny_instance(1);
  put_point(in, 0, 0.25f, 0.25f, 1.0f);
  const ForwardResult r = msda_forward_ref(in.value, in.sampling, in.cfg);
  ASSERT_EQ(r.output.size(), 1u);
  EXPECT_EQ(r.output.get(0), 1.0f);
  EXPECT_FALSE(r.saved.has_value());
}

TEST(ForwardRef, ZeroWeightsGiveZeros) {
  const MsdaConfig cfg = oracle_config();
  Instance in = random_instance(cfg, 5);
  for (std::size_t i = 0; i < in.sampling.weights.size(); ++i) in.sampling.weights.set(i, 0.0f);
  const Tensor out = msda_forward_ref(in.value, in.sampling, cfg).output;
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out.get(i), 0.0f);
}

TEST(ForwardRef, TwoPointWeightedSum) {
  Instance in = tiny_instance(2);
  put_point(in, 0, 0.25f, 0.25f, 0.5f);
  put_point(in, 1, 0.75f, 0.75f, 0.5f);
  EXPECT_FLOAT_EQ(msda_forward_ref(in.value, in.sampling, in.cfg).output.get(0), 2.5f);
}

TEST(ForwardRef, MatchesScalarOracle) {
  const MsdaConfig cfg = oracle_config();
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    SamplingOptions opts;
    opts.lo = -0.2;
    opts.hi = 1.2;
    const Instance in = random_instance(cfg, seed, opts);
    const std::vector<double> want = oracle_forward(in);
    const std::vector<double> got = as_double(msda_forward_ref(in.value, in.sampling, cfg).output);
    const CompareResult r = compare(got, want, Tolerance{1e-6, 1e-6});
    EXPECT_TRUE(r.pass) << "seed " << seed << " max_rel " << r.max_rel;
  }
}

TEST(ForwardRef, TrainModeSavesBilinearSamples) {
  MsdaConfig cfg = oracle_config();
  cfg.mode = Mode::Train;
  SamplingOptions opts;
  opts.lo = -0.2;
  opts.hi = 1.2;
  const Instance in = random_instance(cfg, 11, opts);
  const ForwardResult r = msda_forward_ref(in.value, in.sampling, cfg);
  ASSERT_TRUE(r.saved.has_value());
  ASSERT_EQ(r.saved->sampled.dims(), cfg.saved_dims());
  const std::size_t T = total_pixels(cfg.levels);
  const std::size_t L = cfg.num_levels();
  std::vector<float> plane;
  std::size_t pt = 0;
  for (std::size_t b = 0; b < cfg.batch; ++b)
    for (std::size_t q = 0; q < cfg.queries; ++q)
      for (std::size_t h = 0; h < cfg.heads; ++h)
        for (std::size_t l = 0; l < L; ++l)
          for (std::size_t p = 0; p < cfg.points; ++p, ++pt) {
            const LevelSpec& lv = cfg.levels[l];
            for (std::size_t c = 0; c < cfg.channels; ++c) {
              plane.assign(lv.pixels(), 0.0f);
              for (std::size_t i = 0; i < lv.pixels(); ++i)
                plane[i] = in.value.storage.get(((b * T + lv.offset + i) * cfg.heads + h) *
                                                    cfg.channels + c);
              const float want =
                  bilinear_sample(PlaneView{plane.data(), lv.height, lv.width,
                                            static_cast<std::ptrdiff_t>(lv.width), 1},
                                  in.sampling.locations.get(2 * pt),
                                  in.sampling.locations.get(2 * pt + 1));
              EXPECT_NEAR(r.saved->sampled.get(pt * cfg.channels + c), want,
                          1e-6 * std::max(1.0f, std::fabs(want)));
            }
          }
}

TEST(ForwardRef, ShapeErrorNamesAxis) {
  const MsdaConfig cfg = oracle_config();
  Instance in = random_instance(cfg, 1);
  MsdaConfig wrong = cfg;
  wrong.queries = 4;
  try {
    msda_forward_ref(in.value, in.sampling, wrong);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("queries"), std::string::npos) << e.what();
  }
  wrong = cfg;
  wrong.channels = 3;
  try {
    msda_forward_ref(in.value, in.sampling, wrong);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("channels"), std::string::npos) << e.what();
  }
}

TEST(ForwardRef, LinearInValue) {
  const MsdaConfig cfg = oracle_config();
  const Instance a = random_instance(cfg, 21);
  const Instance b = random_instance(cfg, 22);
  const Tensor fa = msda_forward_ref(a.value, a.sampling, cfg).output;
  const Tensor fb = msda_forward_ref(b.value, a.sampling, cfg).output;

  FeaturePyramid sum = a.value;
  FeaturePyramid scaled = a.value;
  for (std::size_t i = 0; i < sum.storage.size(); ++i) {
    sum.storage.set(i, a.value.storage.get(i) + b.value.storage.get(i));
    scaled.storage.set(i, 2.5f * a.value.storage.get(i));
  }
  const Tensor fsum = msda_forward_ref(sum, a.sampling, cfg).output;
  const Tensor fscaled = msda_forward_ref(scaled, a.sampling, cfg).output;
  std::vector<double> want_sum(fa.size()), want_scaled(fa.size());
  for (std::size_t i = 0; i < fa.size(); ++i) {
    want_sum[i] = static_cast<double>(fa.get(i)) + fb.get(i);
    want_scaled[i] = 2.5 * fa.get(i);
  }
  EXPECT_TRUE(compare(as_double(fsum), want_sum, Tolerance{1e-6, 1e-6}).pass);
  EXPECT_TRUE(compare(as_double(fscaled), want_scaled, Tolerance{1e-6, 1e-6}).pass);
}

TEST(ForwardRef, LinearInWeights) {
  const MsdaConfig cfg = oracle_config();
  const Instance a = random_instance(cfg, 31);
  SamplingTensors other = a.sampling;
  SamplingTensors sum = a.sampling;
  const Tensor w2 = random_tensor(cfg.weight_dims(), Dtype::F32, 32);
  for (std::size_t i = 0; i < w2.size(); ++i) {
    other.weights.set(i, w2.get(i));
    sum.weights.set(i, a.sampling.weights.get(i) + w2.get(i));
  }
  const Tensor f1 = msda_forward_ref(a.value, a.sampling, cfg).output;
  const Tensor f2 = msda_forward_ref(a.value, other, cfg).output;
  const Tensor fs = msda_forward_ref(a.value, sum, cfg).output;
  std::vector<double> want(f1.size());
  for (std::size_t i = 0; i < f1.size(); ++i) want[i] = static_cast<double>(f1.get(i)) + f2.get(i);
  EXPECT_TRUE(compare(as_double(fs), want, Tolerance{1e-6, 1e-6}).pass);
}

// Perturbs one pixel of one (batch, head, channel) and checks that every
// output outside the pixel's sampling footprint is bit-identical.
TEST(ForwardRef, PerturbationIsLocal) {
  const MsdaConfig cfg = oracle_config();
  SamplingOptions opts;
  opts.lattice_margin = 0.05;
  const Instance in = random_instance(cfg, 41, opts);
  const Tensor base = msda_forward_ref(in.value, in.sampling, cfg).output;
  const std::size_t T = total_pixels(cfg.levels);
  const std::size_t L = cfg.num_levels();
  const std::size_t b0 = 1, h0 = 1, c0 = 2;
  for (std::size_t pix = 0; pix < T; ++pix) {
    FeaturePyramid v = in.value;
    const std::size_t at = ((b0 * T + pix) * cfg.heads + h0) * cfg.channels + c0;
    v.storage.set(at, v.storage.get(at) + 1.0f);
    const Tensor out = msda_forward_ref(v, in.sampling, cfg).output;
    std::size_t l_pix = 0;
    while (l_pix + 1 < L && cfg.levels[l_pix + 1].offset <= pix) ++l_pix;
    const LevelSpec& lv = cfg.levels[l_pix];
    const long py = static_cast<long>((pix - lv.offset) / lv.width);
    const long px = static_cast<long>((pix - lv.offset) % lv.width);
    for (std::size_t b = 0; b < cfg.batch; ++b)
      for (std::size_t q = 0; q < cfg.queries; ++q)
        for (std::size_t h = 0; h < cfg.heads; ++h)
          for (std::size_t c = 0; c < cfg.channels; ++c) {
            bool covered = false;
            if (b == b0 && h == h0 && c == c0) {
              for (std::size_t p = 0; p < cfg.points; ++p) {
                const std::size_t pt =
                    (((b * cfg.queries + q) * cfg.heads + h) * L + l_pix) * cfg.points + p;
                const long x0 = static_cast<long>(
                    std::floor(in.sampling.locations.get(2 * pt) * double(lv.width) - 0.5));
                const long y0 = static_cast<long>(
                    std::floor(in.sampling.locations.get(2 * pt + 1) * double(lv.height) - 0.5));
                covered = covered || ((px == x0 || px == x0 + 1) && (py == y0 || py == y0 + 1));
              }
            }
            const std::size_t o = (b * cfg.queries + q) * cfg.embed_dim() + h * cfg.channels + c;
            if (!covered) {
              EXPECT_EQ(out.get(o), base.get(o)) << "pixel " << pix << " output " << o;
            }
          }
  }
}

TEST(BackwardRef, ZeroGradOutputGivesZeros) {
  const MsdaConfig cfg = oracle_config();
  Instance in = random_instance(cfg, 51);
  const Tensor zero(cfg.output_dims(), Dtype::F32);
  const MsdaGrads g = msda_backward_ref(in.value, in.sampling, cfg, zero);
  EXPECT_EQ(g.grad_value.dims(), in.value.storage.dims());
  EXPECT_EQ(g.grad_locations.dims(), cfg.location_dims());
  EXPECT_EQ(g.grad_weights.dims(), cfg.weight_dims());
  for (const Tensor* t : {&g.grad_value, &g.grad_locations, &g.grad_weights})
    for (std::size_t i = 0; i < t->size(); ++i) EXPECT_EQ(t->get(i), 0.0f);
}

TEST(BackwardRef, PixelCenterScatter) {
  Instance in = tiny_instance(1);
  put_point(in, 0, 0.25f, 0.25f, 1.0f);
  in.grad_output.set(0, 1.0f);
  const MsdaGrads g = msda_backward_ref(in.value, in.sampling, in.cfg, in.grad_output);
  EXPECT_EQ(g.grad_value.get(0), 1.0f);
  for (std::size_t i = 1; i < 4; ++i) EXPECT_EQ(g.grad_value.get(i), 0.0f);
  EXPECT_EQ(g.grad_weights.get(0), 1.0f);
  // lambda = 0 on both axes: d/dw_im = (2 - 1) * W, d/dh_im = (3 - 1) * H.
  EXPECT_FLOAT_EQ(g.grad_locations.get(0), 2.0f);
  EXPECT_FLOAT_EQ(g.grad_locations.get(1), 4.0f);
}

TEST(BackwardRef, OutOfBoundsCornersHaveNoLocationGradient) {
  Instance in = tiny_instance(1);
  put_point(in, 0, -0.5f, -0.5f, 1.0f);
  in.grad_output.set(0, 1.0f);
  const MsdaGrads g = msda_backward_ref(in.value, in.sampling, in.cfg, in.grad_output);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(g.grad_value.get(i), 0.0f);
  EXPECT_EQ(g.grad_locations.get(0), 0.0f);
  EXPECT_EQ(g.grad_locations.get(1), 0.0f);
  EXPECT_EQ(g.grad_weights.get(0), 0.0f);
}

TEST(BackwardRef, GradWeightsIsSampleDotGrad) {
  MsdaConfig cfg = oracle_config();
  cfg.mode = Mode::Train;
  const Instance in = random_instance(cfg, 61);
  const ForwardResult f = msda_forward_ref(in.value, in.sampling, cfg);
  const MsdaGrads g = msda_backward_ref(in.value, in.sampling, cfg, in.grad_output);
  const std::size_t L = cfg.num_levels();
  std::vector<double> want(g.grad_weights.size(), 0.0);
  for (std::size_t pt = 0; pt < want.size(); ++pt) {
    const std::size_t row = pt / (L * cfg.points);  // (b, q, h)
    const std::size_t h = row % cfg.heads;
    const std::size_t bq = row / cfg.heads;
    for (std::size_t c = 0; c < cfg.channels; ++c)
      want[pt] += static_cast<double>(in.grad_output.get(bq * cfg.embed_dim() + h * cfg.channels + c)) *
                  f.saved->sampled.get(pt * cfg.channels + c);
  }
  EXPECT_TRUE(compare(as_double(g.grad_weights), want, Tolerance{1e-5, 1e-6}).pass);
}

TEST(BackwardRef, AdjointIdentity) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const MsdaConfig cfg = random_config(seed);
    SamplingOptions opts;
    opts.lo = -0.25;
    opts.hi = 1.25;
    const Instance in = random_instance(cfg, seed, opts);
    const Tensor out = msda_forward_ref(in.value, in.sampling, cfg).output;
    const MsdaGrads g = msda_backward_ref(in.value, in.sampling, cfg, in.grad_output);
    const double lhs = dot(in.grad_output, out);
    const double rhs = dot(g.grad_value, in.value.storage);
    EXPECT_LE(std::fabs(lhs - rhs), 1e-5 * std::max(std::fabs(lhs), 1e-3)) << "seed " << seed;
  }
}

TEST(BackwardRef, ShapeErrorOnGradOutput) {
  const MsdaConfig cfg = oracle_config();
  const Instance in = random_instance(cfg, 71);
  const Tensor bad({cfg.batch, cfg.queries, cfg.embed_dim() + 1}, Dtype::F32);
  EXPECT_THROW(msda_backward_ref(in.value, in.sampling, cfg, bad), ShapeError);
}

TEST(GradCheck, SmallInstancePasses) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const GradCheckReport r = grad_check(small_grad_config(), seed, 1e-3, Tolerance{1e-3, 1e-5});
    ASSERT_EQ(r.tensors.size(), 3u);
    EXPECT_TRUE(r.pass()) << "seed " << seed;
  }
}

TEST(GradCheck, IsDeterministic) {
  const GradCheckReport a = grad_check(small_grad_config(), 9, 1e-3, Tolerance{1e-3, 1e-5});
  const GradCheckReport b = grad_check(small_grad_config(), 9, 1e-3, Tolerance{1e-3, 1e-5});
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    EXPECT_EQ(a.tensors[i].name, b.tensors[i].name);
    EXPECT_EQ(a.tensors[i].result.max_rel, b.tensors[i].result.max_rel);
    EXPECT_EQ(a.tensors[i].result.worst_index, b.tensors[i].result.worst_index);
  }
}

TEST(GradCheck, BadStepThrows) {
  EXPECT_THROW(grad_check(small_grad_config(), 0, 0.0, {}), InputError);
  EXPECT_THROW(grad_check(small_grad_config(), 0, -1e-3, {}), InputError);
  EXPECT_THROW(grad_check(small_grad_config(), 0, std::nan(""), {}), InputError);
}

TEST(GradCheck, CatchesScaledWeightGradient) {
  const BackwardFn corrupted = [](const FeaturePyramid& v, const SamplingTensors& s,
                                  const MsdaConfig& cfg, const Tensor& go) {
    MsdaGrads g = msda_backward_ref(v, s, cfg, go);
    for (std::size_t i = 0; i < g.grad_weights.size(); ++i)
      g.grad_weights.set(i, 2.0f * g.grad_weights.get(i));
    return g;
  };
  const GradCheckReport r =
      grad_check(small_grad_config(), 3, 1e-3, Tolerance{1e-3, 1e-5}, corrupted);
  EXPECT_FALSE(r.pass());
  for (const TensorCheck& t : r.tensors) {
    if (t.name == "grad_weights") {
      EXPECT_FALSE(t.result.pass);
      EXPECT_NEAR(t.result.max_rel, 1.0, 0.05);
    } else {
      EXPECT_TRUE(t.result.pass) << t.name;
    }
  }
}

}  // namespace
}  // namespace msda
