# Copyright 2026 The msda-cpu Authors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Multi-scale deformable attention kernels for the CPU."""

from msda_cpu._msda_cpu import (
    DEFAULT_TILE_BUDGET,
    InputError,
    MsdaError,
    PlanError,
    ShapeError,
    SizeError,
    backward,
    bilinear_sample,
    forward,
    grad_check,
    paper_config,
    plan_chunks,
    run_bench,
)

__all__ = [
    "DEFAULT_TILE_BUDGET",
    "InputError",
    "MsdaError",
    "PlanError",
    "ShapeError",
    "SizeError",
    "backward",
    "bilinear_sample",
    "forward",
    "grad_check",
    "paper_config",
    "plan_chunks",
    "run_bench",
]
