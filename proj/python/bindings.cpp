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


// Python bindings: numpy in, numpy out. The value pyramid is passed
// channel-last as (batch, pixels, heads, channels) with the level shapes
// given separately.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "msda/config.hpp"
#include "msda/error.hpp"
#include "msda/fixtures.hpp"
#include "msda/membench.hpp"
#include "msda/optimized.hpp"
#include "msda/pyramid.hpp"
#include "msda/reference.hpp"
#include "msda/tensor.hpp"

namespace py = pybind11;

namespace msda {
namespace {

using Shapes = std::vector<std::pair<std::size_t, std::size_t>>;

std::vector<std::size_t> dims_of(const py::array& a) {
  return {a.shape(), a.shape() + a.ndim()};
}

Tensor to_tensor(const py::array& a) {
  if (py::isinstance<py::array_t<std::uint16_t>>(a) ||
      a.dtype().is(py::dtype("float16"))) {
    auto c = py::array_t<std::uint16_t, py::array::c_style | py::array::forcecast>::ensure(
        a.attr("view")("uint16"));
    const auto* p = c.data();
    return Tensor::from_f16_bits(dims_of(a), std::vector<std::uint16_t>(p, p + c.size()));
  }
  auto c = py::array_t<float, py::array::c_style | py::array::forcecast>::ensure(a);
  if (!c) throw InputError("expected a float32 or float16 array");
  const float* p = c.data();
  return Tensor::from_f32(dims_of(a), std::vector<float>(p, p + c.size()));
}

py::array to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.dims().begin(), t.dims().end());
  if (t.dtype() == Dtype::F16) {
    py::array out(py::dtype("float16"), shape);
    std::memcpy(out.mutable_data(), t.f16().data(), t.size() * sizeof(std::uint16_t));
    return out;
  }
  py::array_t<float> out(shape);
  std::memcpy(out.mutable_data(), t.f32().data(), t.size() * sizeof(float));
  return out;
}

Mode parse_mode(const std::string& m) {
  if (m == "inference") return Mode::Inference;
  if (m == "train") return Mode::Train;
  throw InputError("mode must be 'inference' or 'train', got '" + m + "'");
}

struct Problem {
  MsdaConfig cfg;
  FeaturePyramid value;
  SamplingTensors sampling;
};

// Geometry is read off the arrays: value (B, pixels, H, C),
// locations (B, Q, H, L, P, 2).
Problem make_problem(const py::array& value, const Shapes& levels, const py::array& locations,
                     const py::array& weights, const std::string& mode) {
  if (value.ndim() != 4) throw ShapeError("value must be (batch, pixels, heads, channels)");
  if (locations.ndim() != 6) {
    throw ShapeError("locations must be (batch, queries, heads, levels, points, 2)");
  }
  Problem p;
  p.cfg.batch = value.shape(0);
  p.cfg.heads = value.shape(2);
  p.cfg.channels = value.shape(3);
  p.cfg.queries = locations.shape(1);
  p.cfg.points = locations.shape(4);
  p.cfg.levels = make_levels(levels);
  p.cfg.mode = parse_mode(mode);
  p.value.levels = p.cfg.levels;
  p.value.batch = p.cfg.batch;
  p.value.heads = p.cfg.heads;
  p.value.channels = p.cfg.channels;
  p.value.storage = to_tensor(value);
  p.cfg.dtype = p.value.storage.dtype();
  p.value.validate();
  p.sampling.locations = to_tensor(locations).cast(Dtype::F32);
  p.sampling.weights = to_tensor(weights).cast(Dtype::F32);
  return p;
}

OptFlags make_flags(bool adaptive_veclen, bool gather_fusion, bool staggered_write,
                    bool scatter_fusion, std::size_t tile_budget_bytes, std::size_t workers,
                    const std::string& saved_dtype) {
  OptFlags f;
  f.adaptive_veclen = adaptive_veclen;
  f.gather_fusion = gather_fusion;
  f.staggered_write = staggered_write;
  f.scatter_fusion = scatter_fusion;
  f.tile_budget_bytes = tile_budget_bytes;
  if (workers) f.workers = workers;
  if (saved_dtype == "f16") {
    f.saved_dtype = Dtype::F16;
  } else if (saved_dtype != "f32") {
    throw InputError("saved_dtype must be 'f32' or 'f16'");
  }
  return f;
}

#define MSDA_FLAG_ARGS                                                                     \
  py::arg("adaptive_veclen") = true, py::arg("gather_fusion") = true,                      \
  py::arg("staggered_write") = true, py::arg("scatter_fusion") = true,                     \
  py::arg("tile_budget_bytes") = kDefaultTileBudget, py::arg("workers") = 0,               \
  py::arg("saved_dtype") = "f32"

py::object forward(const py::array& value, const Shapes& levels, const py::array& locations,
                   const py::array& weights, const std::string& mode, const std::string& impl,
                   bool adaptive, bool gather, bool staggered, bool scatter, std::size_t budget,
                   std::size_t workers, const std::string& saved_dtype) {
  const Problem p = make_problem(value, levels, locations, weights, mode);
  ForwardResult r;
  {
    py::gil_scoped_release release;
    if (impl == "reference") {
      r = msda_forward_ref(p.value, p.sampling, p.cfg);
    } else if (impl == "optimized") {
      r = msda_forward_opt(p.value, p.sampling, p.cfg,
                           make_flags(adaptive, gather, staggered, scatter, budget, workers,
                                      saved_dtype));
    } else {
      throw InputError("impl must be 'reference' or 'optimized'");
    }
  }
  if (r.saved) return py::make_tuple(to_numpy(r.output), to_numpy(r.saved->sampled));
  return to_numpy(r.output);
}

py::dict backward(const py::array& value, const Shapes& levels, const py::array& locations,
                  const py::array& weights, const py::array& grad_output,
                  const std::optional<py::array>& saved, const std::string& impl, bool adaptive,
                  bool gather, bool staggered, bool scatter, std::size_t budget,
                  std::size_t workers, const std::string& saved_dtype) {
  const Problem p = make_problem(value, levels, locations, weights,
                                 saved ? "train" : "inference");
  const Tensor go = to_tensor(grad_output).cast(p.cfg.dtype);
  std::optional<SavedForward> sv;
  if (saved) sv = SavedForward{to_tensor(*saved)};
  MsdaGrads g;
  {
    py::gil_scoped_release release;
    if (impl == "reference") {
      g = msda_backward_ref(p.value, p.sampling, p.cfg, go);
    } else if (impl == "optimized") {
      g = msda_backward_opt(p.value, p.sampling, p.cfg,
                            make_flags(adaptive, gather, staggered, scatter, budget, workers,
                                       saved_dtype),
                            go, sv);
    } else {
      throw InputError("impl must be 'reference' or 'optimized'");
    }
  }
  py::dict d;
  d["grad_value"] = to_numpy(g.grad_value);
  d["grad_locations"] = to_numpy(g.grad_locations);
  d["grad_weights"] = to_numpy(g.grad_weights);
  return d;
}

py::dict config_dict(const MsdaConfig& c) {
  py::dict d;
  d["batch"] = c.batch;
  d["queries"] = c.queries;
  d["heads"] = c.heads;
  d["channels"] = c.channels;
  d["points"] = c.points;
  Shapes levels;
  for (const auto& l : c.levels) levels.emplace_back(l.height, l.width);
  d["levels"] = levels;
  d["mode"] = std::string(mode_name(c.mode));
  return d;
}

}  // namespace
}  // namespace msda

PYBIND11_MODULE(_msda_cpu, m) {
  using namespace msda;
  m.doc() = "Multi-scale deformable attention on the CPU: reference and optimized kernels.";

  auto& error = py::register_exception<Error>(m, "MsdaError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", error.ptr());
  py::register_exception<InputError>(m, "InputError", error.ptr());
  py::register_exception<SizeError>(m, "SizeError", error.ptr());
  py::register_exception<PlanError>(m, "PlanError", error.ptr());

  m.def("bilinear_sample",
        [](py::array_t<float, py::array::c_style | py::array::forcecast> plane, float x, float y) {
          if (plane.ndim() != 2) throw ShapeError("plane must be 2-D");
          const PlaneView v{plane.data(), static_cast<std::size_t>(plane.shape(0)),
                            static_cast<std::size_t>(plane.shape(1)),
                            static_cast<std::ptrdiff_t>(plane.shape(1)), 1};
          return bilinear_sample(v, x, y);
        },
        py::arg("plane"), py::arg("x"), py::arg("y"));

  m.def("forward", &forward, py::arg("value"), py::arg("levels"), py::arg("locations"),
        py::arg("weights"), py::arg("mode") = "inference", py::arg("impl") = "optimized",
        MSDA_FLAG_ARGS,
        "Output (batch, queries, heads*channels); in train mode a tuple (output, saved).");

  m.def("backward", &backward, py::arg("value"), py::arg("levels"), py::arg("locations"),
        py::arg("weights"), py::arg("grad_output"), py::arg("saved") = py::none(),
        py::arg("impl") = "optimized", MSDA_FLAG_ARGS,
        "Dict with grad_value, grad_locations and grad_weights.");

  m.def("plan_chunks",
        [](const Shapes& levels, std::size_t heads, std::size_t channels, std::size_t points,
           const std::string& mode, bool adaptive, std::size_t budget) {
          MsdaConfig c = paper_config(1, parse_mode(mode));
          c.levels = make_levels(levels);
          c.heads = heads;
          c.channels = channels;
          c.points = points;
          OptFlags f;
          f.adaptive_veclen = adaptive;
          f.tile_budget_bytes = budget;
          f.workers = 1;
          std::vector<std::size_t> out;
          for (const auto& lp : plan(c, f).levels) out.push_back(lp.chunk_points);
          return out;
        },
        py::arg("levels"), py::arg("heads") = 8, py::arg("channels") = 32, py::arg("points") = 4,
        py::arg("mode") = "inference", py::arg("adaptive_veclen") = true,
        py::arg("tile_budget_bytes") = kDefaultTileBudget,
        "Planned chunk length (sampling points) per level.");

  m.def("grad_check",
        [](std::uint64_t seed, double step, double rel, double abs_floor) {
          const GradCheckReport r = grad_check(small_grad_config(), seed, step, {rel, abs_floor});
          py::dict d;
          for (const auto& t : r.tensors) {
            py::dict e;
            e["pass"] = t.result.pass;
            e["max_rel"] = t.result.max_rel;
            e["max_abs"] = t.result.max_abs;
            e["worst_index"] = t.result.worst_index;
            d[py::str(t.name)] = e;
          }
          return d;
        },
        py::arg("seed") = 0, py::arg("step") = 1e-3, py::arg("rel") = 1e-3,
        py::arg("abs_floor") = 1e-5,
        "Finite-difference check of the reference backward on the small instance.");

  m.def("paper_config", [](std::size_t queries, const std::string& mode) {
    return config_dict(paper_config(queries, parse_mode(mode)));
  }, py::arg("queries") = 87296, py::arg("mode") = "inference");

  m.def("run_bench",
        [](const std::string& kind, std::size_t group, std::size_t working_set_bytes,
           std::size_t accesses, std::size_t workers, std::uint64_t seed) {
          BenchSpec s;
          s.kind = parse_bench_kind(kind);
          s.group = group;
          s.working_set_bytes = working_set_bytes;
          s.accesses = accesses;
          s.workers = workers;
          s.seed = seed;
          BenchReport r;
          {
            py::gil_scoped_release release;
            r = run_bench(s);
          }
          py::dict d;
          d["elapsed"] = r.elapsed;
          d["bytes_moved"] = r.bytes_moved;
          d["bandwidth"] = r.bandwidth;
          d["per_worker_bandwidth"] = r.per_worker_bandwidth;
          d["checksum"] = r.checksum;
          d["checksum_ok"] = r.checksum_ok;
          return d;
        },
        py::arg("kind") = "gather", py::arg("group") = 1, py::arg("working_set_bytes") = 16384,
        py::arg("accesses") = kMinAccesses, py::arg("workers") = 1, py::arg("seed") = 0);

  m.attr("DEFAULT_TILE_BUDGET") = kDefaultTileBudget;
}
