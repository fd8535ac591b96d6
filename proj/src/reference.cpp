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

#include "msda/reference.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "msda/error.hpp"
#include "msda/fixtures.hpp"

namespace msda {

namespace {

template <class Real>
struct Corners {
  std::ptrdiff_t h0, w0;
  Real lh, lw;          // fractional offsets inside the cell
  Real weight[4];       // tl, tr, bl, br
  bool valid[4];
};

template <class Real>
Corners<Real> corners_at(std::size_t height, std::size_t width, Real x, Real y) {
  const Real h_im = y * static_cast<Real>(height) - Real(0.5);
  const Real w_im = x * static_cast<Real>(width) - Real(0.5);
  Corners<Real> c{};
  const Real hf = std::floor(h_im);
  const Real wf = std::floor(w_im);
  c.lh = h_im - hf;
  c.lw = w_im - wf;
  const Real hh = Real(1) - c.lh;
  const Real hw = Real(1) - c.lw;
  c.weight[0] = hh * hw;
  c.weight[1] = hh * c.lw;
  c.weight[2] = c.lh * hw;
  c.weight[3] = c.lh * c.lw;
  // clamp before the integer conversion so far-away points stay well defined
  const Real hlim = static_cast<Real>(height) + 1;
  const Real wlim = static_cast<Real>(width) + 1;
  c.h0 = static_cast<std::ptrdiff_t>(std::clamp(hf, Real(-2), hlim));
  c.w0 = static_cast<std::ptrdiff_t>(std::clamp(wf, Real(-2), wlim));
  const auto H = static_cast<std::ptrdiff_t>(height);
  const auto W = static_cast<std::ptrdiff_t>(width);
  const bool top = c.h0 >= 0 && c.h0 < H;
  const bool bottom = c.h0 + 1 >= 0 && c.h0 + 1 < H;
  const bool left = c.w0 >= 0 && c.w0 < W;
  const bool right = c.w0 + 1 >= 0 && c.w0 + 1 < W;
  c.valid[0] = top && left;
  c.valid[1] = top && right;
  c.valid[2] = bottom && left;
  c.valid[3] = bottom && right;
  return c;
}

constexpr std::ptrdiff_t kDr[4] = {0, 0, 1, 1};
constexpr std::ptrdiff_t kDc[4] = {0, 1, 0, 1};

template <class Real>
Real sample(const BasicPlaneView<Real>& plane, Real x, Real y) {
  const auto c = corners_at<Real>(plane.height, plane.width, x, y);
  Real v = 0;
  for (int k = 0; k < 4; ++k) {
    if (c.valid[k]) v += c.weight[k] * plane.at(c.h0 + kDr[k], c.w0 + kDc[k]);
  }
  return v;
}

// Channel-last geometry helper: plane of (b, level, head, channel).
template <class Real>
BasicPlaneView<Real> channel_last_plane(const MsdaConfig& cfg, const Real* value, std::size_t b,
                                        std::size_t l, std::size_t h, std::size_t c) {
  const std::size_t e = cfg.embed_dim();
  const auto& lv = cfg.levels[l];
  const std::size_t np = total_pixels(cfg.levels);
  BasicPlaneView<Real> v;
  v.data = value + (b * np + lv.offset) * e + h * cfg.channels + c;
  v.height = lv.height;
  v.width = lv.width;
  v.row_stride = static_cast<std::ptrdiff_t>(lv.width * e);
  v.col_stride = static_cast<std::ptrdiff_t>(e);
  return v;
}

// out[b,q,h*C+c] = sum_{l,p} w * sample; saved, when non-null, receives every sample.
template <class Real>
void forward_loops(const MsdaConfig& cfg, const Real* value, const Real* loc, const Real* w,
                   Real* out, Real* saved) {
  const std::size_t L = cfg.num_levels();
  const std::size_t P = cfg.points;
  const std::size_t C = cfg.channels;
  for (std::size_t b = 0; b < cfg.batch; ++b) {
    for (std::size_t q = 0; q < cfg.queries; ++q) {
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        const std::size_t row = (b * cfg.queries + q) * cfg.heads + h;
        for (std::size_t c = 0; c < C; ++c) {
          Real acc = 0;
          for (std::size_t l = 0; l < L; ++l) {
            const auto plane = channel_last_plane(cfg, value, b, l, h, c);
            for (std::size_t p = 0; p < P; ++p) {
              const std::size_t pt = (row * L + l) * P + p;
              const Real s = sample(plane, loc[2 * pt], loc[2 * pt + 1]);
              if (saved != nullptr) saved[pt * C + c] = s;
              acc += w[pt] * s;
            }
          }
          out[(b * cfg.queries + q) * cfg.embed_dim() + h * C + c] = acc;
        }
      }
    }
  }
}

void require_finite(const std::vector<float>& v, const char* what) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw InputError(std::string(what) + " has a non-finite entry at flat index " +
                       std::to_string(i));
    }
  }
}

void require_channel_last(const FeaturePyramid& value) {
  if (value.layout != Layout::ChannelLast) {
    throw InputError("reference kernels take a channel_last pyramid, got " +
                     std::string(layout_name(value.layout)));
  }
}

Tensor tensor_like(const std::vector<std::size_t>& dims, Dtype dtype, std::vector<float> data) {
  return Tensor::from_f32(dims, std::move(data)).cast(dtype);
}

}  // namespace

float bilinear_sample(const PlaneView& plane, float x, float y) {
  if (!std::isfinite(x) || !std::isfinite(y)) {
    throw InputError("bilinear_sample: non-finite location");
  }
  if (plane.height == 0 || plane.width == 0) {
    throw InputError("bilinear_sample: empty plane");
  }
  return sample(plane, x, y);
}

ForwardResult msda_forward_ref(const FeaturePyramid& value, const SamplingTensors& sampling,
                               const MsdaConfig& cfg) {
  check_forward_inputs(value, sampling, cfg);
  require_channel_last(value);
  const auto v = value.storage.to_f32_vector();
  const auto loc = sampling.locations.to_f32_vector();
  const auto w = sampling.weights.to_f32_vector();
  require_finite(loc, "locations");

  std::vector<float> out(checked_element_count(cfg.output_dims()));
  std::vector<float> saved;
  if (cfg.mode == Mode::Train) saved.resize(checked_element_count(cfg.saved_dims()));
  forward_loops<float>(cfg, v.data(), loc.data(), w.data(), out.data(),
                       cfg.mode == Mode::Train ? saved.data() : nullptr);

  ForwardResult r;
  r.output = tensor_like(cfg.output_dims(), value.dtype(), std::move(out));
  if (cfg.mode == Mode::Train) {
    r.saved = SavedForward{Tensor::from_f32(cfg.saved_dims(), std::move(saved))};
  }
  return r;
}

std::vector<double> msda_forward_ref_f64(const MsdaConfig& cfg, const std::vector<double>& value,
                                         const std::vector<double>& locations,
                                         const std::vector<double>& weights) {
  cfg.validate();
  std::vector<double> out(checked_element_count(cfg.output_dims()));
  forward_loops<double>(cfg, value.data(), locations.data(), weights.data(), out.data(), nullptr);
  return out;
}

MsdaGrads msda_backward_ref(const FeaturePyramid& value, const SamplingTensors& sampling,
                            const MsdaConfig& cfg, const Tensor& grad_output) {
  check_forward_inputs(value, sampling, cfg);
  check_grad_output(grad_output, cfg);
  require_channel_last(value);
  const auto v = value.storage.to_f32_vector();
  const auto loc = sampling.locations.to_f32_vector();
  const auto w = sampling.weights.to_f32_vector();
  const auto g = grad_output.to_f32_vector();
  require_finite(loc, "locations");

  const std::size_t L = cfg.num_levels();
  const std::size_t P = cfg.points;
  const std::size_t C = cfg.channels;
  const std::size_t E = cfg.embed_dim();
  const std::size_t np = total_pixels(cfg.levels);

  std::vector<float> gv(v.size(), 0.0f);
  std::vector<float> gl(loc.size(), 0.0f);
  std::vector<float> gw(w.size(), 0.0f);

  for (std::size_t b = 0; b < cfg.batch; ++b) {
    for (std::size_t q = 0; q < cfg.queries; ++q) {
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        const std::size_t row = (b * cfg.queries + q) * cfg.heads + h;
        const float* grow = g.data() + (b * cfg.queries + q) * E + h * C;
        for (std::size_t l = 0; l < L; ++l) {
          const auto& lv = cfg.levels[l];
          for (std::size_t p = 0; p < P; ++p) {
            const std::size_t pt = (row * L + l) * P + p;
            const float x = loc[2 * pt];
            const float y = loc[2 * pt + 1];
            const float aw = w[pt];
            const auto cr = corners_at<float>(lv.height, lv.width, x, y);
            float d_weight = 0.0f;
            float d_wim = 0.0f;
            float d_him = 0.0f;
            for (std::size_t c = 0; c < C; ++c) {
              const auto plane = channel_last_plane(cfg, v.data(), b, l, h, c);
              float corner[4];
              for (int k = 0; k < 4; ++k) {
                corner[k] = cr.valid[k] ? plane.at(cr.h0 + kDr[k], cr.w0 + kDc[k]) : 0.0f;
              }
              const float s = cr.weight[0] * corner[0] + cr.weight[1] * corner[1] +
                              cr.weight[2] * corner[2] + cr.weight[3] * corner[3];
              const float gc = grow[c];
              d_weight += gc * s;
              d_wim += gc * ((1.0f - cr.lh) * (corner[1] - corner[0]) +
                             cr.lh * (corner[3] - corner[2]));
              d_him += gc * ((1.0f - cr.lw) * (corner[2] - corner[0]) +
                             cr.lw * (corner[3] - corner[1]));
              const float top = aw * gc;
              for (int k = 0; k < 4; ++k) {
                if (!cr.valid[k]) continue;
                const std::size_t pix = lv.offset + static_cast<std::size_t>(cr.h0 + kDr[k]) * lv.width +
                                        static_cast<std::size_t>(cr.w0 + kDc[k]);
                gv[((b * np + pix) * cfg.heads + h) * C + c] += top * cr.weight[k];
              }
            }
            gw[pt] = d_weight;
            gl[2 * pt] = aw * d_wim * static_cast<float>(lv.width);
            gl[2 * pt + 1] = aw * d_him * static_cast<float>(lv.height);
          }
        }
      }
    }
  }

  MsdaGrads r;
  r.grad_value = tensor_like(value.storage.dims(), value.dtype(), std::move(gv));
  r.grad_locations = tensor_like(sampling.locations.dims(), sampling.locations.dtype(), std::move(gl));
  r.grad_weights = tensor_like(sampling.weights.dims(), sampling.weights.dtype(), std::move(gw));
  return r;
}

bool GradCheckReport::pass() const {
  return std::all_of(tensors.begin(), tensors.end(),
                     [](const TensorCheck& t) { return t.result.pass; });
}

GradCheckReport grad_check(const MsdaConfig& cfg_in, std::uint64_t seed, double step,
                           Tolerance tol, const BackwardFn& backward) {
  if (!(step > 0.0) || !std::isfinite(step)) {
    throw InputError("grad_check: step must be positive and finite");
  }
  MsdaConfig cfg = cfg_in;
  cfg.dtype = Dtype::F32;
  cfg.mode = Mode::Inference;
  cfg.validate();

  std::size_t max_extent = 1;
  for (const auto& lv : cfg.levels) max_extent = std::max({max_extent, lv.height, lv.width});
  // keep x*W-0.5 at least 2 steps (in pixels) plus slack away from a kink
  const double margin = 2.0 * step * static_cast<double>(max_extent) + 0.02;
  if (margin >= 0.5) {
    throw InputError("grad_check: step too large for the level sizes");
  }
  SamplingOptions opts;
  opts.lo = 0.0;
  opts.hi = 1.0;
  opts.lattice_margin = margin;
  const Instance inst = random_instance(cfg, seed, opts);

  const MsdaGrads analytic = backward(inst.value, inst.sampling, cfg, inst.grad_output);

  auto widen = [](const Tensor& t) {
    const auto f = t.to_f32_vector();
    return std::vector<double>(f.begin(), f.end());
  };
  std::vector<double> value = widen(inst.value.storage);
  std::vector<double> loc = widen(inst.sampling.locations);
  std::vector<double> wts = widen(inst.sampling.weights);
  const std::vector<double> gout = widen(inst.grad_output);

  auto loss = [&]() {
    const auto out = msda_forward_ref_f64(cfg, value, loc, wts);
    double acc = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) acc += gout[i] * out[i];
    return acc;
  };
  auto central = [&](std::vector<double>& param) {
    std::vector<double> grad(param.size());
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double saved = param[i];
      param[i] = saved + step;
      const double up = loss();
      param[i] = saved - step;
      const double down = loss();
      param[i] = saved;
      grad[i] = (up - down) / (2.0 * step);
    }
    return grad;
  };

  GradCheckReport report;
  const std::pair<const char*, std::pair<const Tensor*, std::vector<double>*>> params[] = {
      {"grad_value", {&analytic.grad_value, &value}},
      {"grad_locations", {&analytic.grad_locations, &loc}},
      {"grad_weights", {&analytic.grad_weights, &wts}},
  };
  for (const auto& [name, pair] : params) {
    const auto& [tensor, param] = pair;
    const auto numeric = central(*param);
    const auto got = widen(*tensor);
    if (got.size() != numeric.size()) {
      throw ShapeError(std::string("grad_check: ") + name + " has the wrong element count");
    }
    report.tensors.push_back({name, compare(got, numeric, tol)});
  }
  return report;
}

}  // namespace msda
