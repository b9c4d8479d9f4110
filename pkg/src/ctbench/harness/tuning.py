"""Hyperparameter grid search scored on held-out phantom variants.

Rather than tuning on the benchmark phantom itself (which would leak the
test image into the hyperparameters), each grid point is scored by mean
squared error against a small set of seeded phantom variants drawn from the
same family, and the argmin wins.  Exact ties go to the entry that appears
first in the expanded grid; numeric axes are expanded in ascending order, so
ties resolve toward the weakest intervention (smallest step size / weight).
"""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from ..grids import ImageGrid, Sinogram
from ..operators import Projector
from .benchmark import ExperimentPlan, MethodSpec, run_cell
from .phantoms import generate_phantom

__all__ = ["TuningResult", "expand_grid", "holdout_phantoms", "grid_search"]

# Offset added to the plan seed when generating holdout variants so they can
# never collide with per-repeat measurement seeds (plan.seed + repeat index).
HOLDOUT_SEED_STRIDE = 1000


@dataclass
class TuningResult:
    """Winning grid point for one method, plus the full score table.

    ``scores[i]`` is the mean squared error of ``grid[i]`` averaged over the
    holdout phantoms; ``per_phantom[i, j]`` the error on phantom ``j`` alone
    (``inf`` where the cell failed).  ``method`` is the input spec with the
    winning options merged in, ready to drop into a benchmark plan.
    """

    best: dict[str, Any]
    best_score: float
    grid: list[dict[str, Any]]
    scores: np.ndarray
    per_phantom: np.ndarray
    method: MethodSpec


def expand_grid(param_grid: Mapping[str, Sequence]) -> list[dict[str, Any]]:
    """Cartesian product of the grid axes, weakest settings first.

    Numeric axes are sorted ascending before expansion; non-numeric axes
    (e.g. sampler names) keep their given order.
    """
    if not param_grid:
        raise ValueError("parameter grid is empty")
    keys = list(param_grid)
    axes = []
    for key in keys:
        values = list(param_grid[key])
        if not values:
            raise ValueError(f"grid axis {key!r} has no values")
        numeric = all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in values
        )
        if numeric:
            values = sorted(values)
        axes.append(values)
    return [dict(zip(keys, combo)) for combo in itertools.product(*axes)]


def holdout_phantoms(plan: ExperimentPlan, count: int = 10) -> list[ImageGrid]:
    """``count`` seeded variants of the plan's phantom family.

    Each variant perturbs the ellipse table (densities, axes, centers,
    tilts) with its own seed, standing in for distinct training images.
    """
    if count < 1:
        raise ValueError("need at least one holdout phantom")
    return [
        generate_phantom(
            plan.phantom_kind,
            plan.size,
            plan.pixel_size,
            seed=plan.seed + HOLDOUT_SEED_STRIDE + i,
            spec_text=plan.phantom_spec,
        )
        for i in range(count)
    ]


def _score_point(
    method: MethodSpec,
    point: dict[str, Any],
    plan: ExperimentPlan,
    phantoms: Sequence[ImageGrid],
    cleans: Sequence[Sinogram],
) -> np.ndarray:
    trial = dataclasses.replace(method, options={**method.options, **point})
    errors = np.empty(len(phantoms))
    for j, (phantom, clean) in enumerate(zip(phantoms, cleans)):
        try:
            recon, _, _, _ = run_cell(
                trial, plan.configs[0], clean, phantom, plan.seed + j
            )
            mse = float(np.mean((recon.values - phantom.values) ** 2))
        except Exception:
            mse = np.inf
        errors[j] = mse if np.isfinite(mse) else np.inf
    return errors


def grid_search(
    plan: ExperimentPlan,
    param_grid: Mapping[str, Sequence],
    holdout: Sequence[ImageGrid] | None = None,
    count: int = 10,
) -> list[TuningResult]:
    """Tune every method in ``plan`` over ``param_grid``; one result each.

    The plan must hold exactly one measurement config (tune one acquisition
    setting at a time).  Grid points are option overrides merged onto each
    method's existing options; a point that makes a cell fail simply scores
    ``inf`` on that phantom and the search continues.
    """
    if len(plan.configs) != 1:
        raise ValueError("tuning expects a plan with exactly one config")
    grid = expand_grid(param_grid)
    phantoms = list(holdout) if holdout is not None else holdout_phantoms(plan, count)
    if not phantoms:
        raise ValueError("holdout phantom list is empty")

    dense_geom = plan.dense_geometry()
    cleans = []
    for phantom in phantoms:
        proj = Projector(dense_geom, phantom.shape, phantom.pixel_size)
        cleans.append(Sinogram(proj.apply(phantom.values), dense_geom))

    results = []
    for method in plan.methods:
        per_phantom = np.stack(
            [_score_point(method, point, plan, phantoms, cleans) for point in grid]
        )
        scores = per_phantom.mean(axis=1)
        best_idx = 0
        for i in range(1, len(grid)):
            if scores[i] < scores[best_idx]:
                best_idx = i
        tuned = dataclasses.replace(
            method, options={**method.options, **grid[best_idx]}
        )
        results.append(
            TuningResult(
                best=dict(grid[best_idx]),
                best_score=float(scores[best_idx]),
                grid=grid,
                scores=scores,
                per_phantom=per_phantom,
                method=tuned,
            )
        )
    return results
