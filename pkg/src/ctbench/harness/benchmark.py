"""Benchmark plans: the (method x config x repeat) run matrix.

A plan owns one phantom, a list of simulation configs, and a list of method
specs.  Each cell simulates a measurement, reconstructs, scores, and lands as
one CSV row; failures are recorded in-row and never abort the run.  Guidance
methods operate on a [-1, 1]-normalized copy of the problem (the affine map
is inverted before metrics), with an analytic Gaussian prior centered on a
blurred phantom standing in for a trained score model.
"""
from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import io
import math
import os
import tempfile
import time

import numpy as np
import scipy.ndimage

from ..analysis import MetricsReport, compute_metrics, null_space_component
from ..grids import ImageGrid, ProjectionGeometry, Sinogram
from ..guidance import GuidanceSpec, sample_reconstruct
from ..mbir import TVSpec, admm_tv, fista_tv
from ..operators import Projector, fbp_reconstruct, sirt_reconstruct
from ..priors import GaussianPrior, linear_beta_schedule
from ..simulate import (
    BUILTIN_CONFIG_IDS,
    SimulationConfig,
    builtin_config,
    simulate_measurement,
)
from .configfmt import ConfigError
from .phantoms import generate_phantom
from .rawio import load_raw, save_raw

__all__ = [
    "MethodSpec",
    "ExperimentPlan",
    "CSV_COLUMNS",
    "default_detector_count",
    "plan_from_sections",
    "resolve_config",
    "resolve_method",
    "run_cell",
    "run_benchmark",
]

CSV_COLUMNS = (
    "method",
    "config",
    "seed",
    "psnr",
    "ssim",
    "data_fit",
    "wall_time_ms",
    "status",
)

WORKER_ENV_VAR = "CTBENCH_WORKERS"

_GUIDANCE_FIELD_NAMES = {f.name for f in dataclasses.fields(GuidanceSpec)}


def default_detector_count(size: int) -> int:
    """Enough detector bins to cover the grid diagonal with a small margin."""
    return max(16, int(round(1.4375 * size)))


@dataclasses.dataclass
class MethodSpec:
    """One reconstruction method: a kind plus free-form options.

    kinds: ``classical`` (options ``algo`` = fbp|sirt, ``window``,
    ``iterations``, ``nonneg``), ``mbir`` (``solver`` = fista|admm plus
    TVSpec fields), ``guidance`` (GuidanceSpec fields plus ``prior_blur``,
    ``prior_var``, ``prior_mean`` = blur|flat).
    """

    name: str
    kind: str
    options: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in ("classical", "mbir", "guidance"):
            raise ValueError(f"unknown method kind {self.kind!r}")


@dataclasses.dataclass
class ExperimentPlan:
    """Everything needed to reproduce one benchmark run.

    ``configs`` entries may be builtin ids or SimulationConfig objects; they
    are resolved to objects on construction, with labels kept in
    ``config_names``.
    """

    methods: list
    configs: list
    config_names: list | None = None
    phantom_kind: str = "shepplogan"
    phantom_path: str | None = None
    phantom_spec: str | None = None
    size: int = 64
    pixel_size: float = 1.0
    dense_views: int = 360
    detector_count: int | None = None
    detector_pitch: float = 1.0
    metrics: tuple = ("psnr", "ssim", "data_fit")
    output_dir: str = "out"
    seed: int = 0
    repeats: int = 1
    save_recons: bool = False
    save_trajectories: bool = False
    save_null_split: bool = False
    null_split_eps: float = 1e-4
    null_split_max_iter: int = 200000
    workers: int | None = None
    csv_name: str = "results.csv"

    def __post_init__(self) -> None:
        if not self.methods:
            raise ValueError("plan needs at least one method")
        if not self.configs:
            raise ValueError("plan needs at least one config")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.size < 16:
            raise ValueError("size must be >= 16")
        if self.dense_views < 1:
            raise ValueError("dense_views must be >= 1")
        self.methods = [resolve_method(m) for m in self.methods]
        resolved = [resolve_config(c) for c in self.configs]
        self.configs = [cfg for _, cfg in resolved]
        if self.config_names is None:
            self.config_names = [
                name if name != "inline" else f"config{i}"
                for i, (name, _) in enumerate(resolved)
            ]
        if len(self.config_names) != len(self.configs):
            raise ValueError("config_names must parallel configs")

    def resolve_detector_count(self) -> int:
        if self.detector_count is not None:
            return self.detector_count
        return default_detector_count(self.size)

    def load_phantom(self) -> ImageGrid:
        if self.phantom_path is not None:
            obj = load_raw(self.phantom_path)
            if not isinstance(obj, ImageGrid):
                raise ValueError(f"{self.phantom_path} does not hold an image")
            return obj
        return generate_phantom(
            self.phantom_kind, self.size, self.pixel_size, spec_text=self.phantom_spec
        )

    def dense_geometry(self) -> ProjectionGeometry:
        angles = math.pi * np.arange(self.dense_views) / self.dense_views
        return ProjectionGeometry(
            angles, self.resolve_detector_count(), self.detector_pitch
        )


def resolve_config(entry, sections=None) -> tuple[str, SimulationConfig]:
    """Map a config entry (builtin id, section name, or object) to a config."""
    if isinstance(entry, SimulationConfig):
        return "inline", entry
    name = str(entry)
    if name in BUILTIN_CONFIG_IDS:
        return name, builtin_config(name)
    if sections is not None and f"config {name}" in sections:
        fields = dict(sections[f"config {name}"])
        if "angular_range" in fields:
            lo, hi = fields["angular_range"]
            fields["angular_range"] = (float(lo), float(hi))
        known = {f.name for f in dataclasses.fields(SimulationConfig)}
        unknown = set(fields) - known
        if unknown:
            raise ConfigError(
                f"[config {name}] has unknown keys {sorted(unknown)}; "
                f"valid keys: {sorted(known)}"
            )
        return name, SimulationConfig(**fields)
    raise ConfigError(
        f"unknown config {name!r}: not a builtin id {BUILTIN_CONFIG_IDS} "
        "and no [config ...] section found"
    )


_METHOD_SHORTHANDS = {
    "fbp": ("classical", {"algo": "fbp"}),
    "sirt": ("classical", {"algo": "sirt"}),
    "fista": ("mbir", {"solver": "fista"}),
    "admm": ("mbir", {"solver": "admm"}),
}


def resolve_method(entry, sections=None) -> MethodSpec:
    if isinstance(entry, MethodSpec):
        return entry
    name = str(entry)
    if sections is not None and f"method {name}" in sections:
        fields = dict(sections[f"method {name}"])
        kind = fields.pop("kind", None)
        if kind is None:
            if "strategy" in fields:
                kind = "guidance"
            elif "solver" in fields:
                kind = "mbir"
            else:
                kind = "classical"
        return MethodSpec(name, str(kind), fields)
    if name in _METHOD_SHORTHANDS:
        kind, options = _METHOD_SHORTHANDS[name]
        return MethodSpec(name, kind, dict(options))
    raise ConfigError(
        f"unknown method {name!r}: not a shorthand {tuple(_METHOD_SHORTHANDS)} "
        "and no [method ...] section found"
    )


def _as_list(value):
    if value is None:
        return []
    if isinstance(value, (list, tuple)):
        return list(value)
    return [value]


def plan_from_sections(sections: dict) -> ExperimentPlan:
    """Build a plan from parsed config sections (see configfmt grammar)."""
    plan_fields = dict(sections.get("plan", {}))
    resolved = [
        resolve_config(c, sections) for c in _as_list(plan_fields.pop("configs", None))
    ]
    methods = [
        resolve_method(m, sections) for m in _as_list(plan_fields.pop("methods", None))
    ]
    known = {f.name for f in dataclasses.fields(ExperimentPlan)}
    unknown = set(plan_fields) - known
    if unknown:
        raise ConfigError(f"unknown plan keys: {sorted(unknown)}")
    if "metrics" in plan_fields:
        plan_fields["metrics"] = tuple(_as_list(plan_fields["metrics"]))
    return ExperimentPlan(
        methods=methods,
        configs=[cfg for _, cfg in resolved],
        config_names=[
            name if name != "inline" else f"config{i}"
            for i, (name, _) in enumerate(resolved)
        ],
        **plan_fields,
    )


def _blur(values: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return values.copy()
    return scipy.ndimage.gaussian_filter(values, sigma, mode="nearest")


def _run_guidance(
    method: MethodSpec,
    measured: Sinogram,
    gamma: float,
    phantom: ImageGrid,
    proj: Projector,
    seed: int,
):
    options = dict(method.options)
    prior_blur = float(options.pop("prior_blur", 2.0))
    prior_var = float(options.pop("prior_var", 0.09))
    prior_mean_kind = str(options.pop("prior_mean", "blur"))
    unknown = set(options) - _GUIDANCE_FIELD_NAMES
    if unknown:
        raise ValueError(f"unknown guidance options: {sorted(unknown)}")
    options.setdefault("seed", seed)
    spec = GuidanceSpec(**options)

    lo = float(phantom.values.min())
    hi = float(phantom.values.max())
    if hi <= lo:
        raise ValueError("phantom has zero dynamic range; cannot normalize")
    # physical = a * normalized + b, in the gamma-scaled measurement domain
    a = gamma * (hi - lo) / 2.0
    b = gamma * (hi + lo) / 2.0
    offset = proj.apply(np.full(phantom.shape, b))
    y_norm = Sinogram((measured.values - offset) / a, measured.geometry)

    x_norm_ref = (phantom.values - (hi + lo) / 2.0) / ((hi - lo) / 2.0)
    if prior_mean_kind == "blur":
        mean = _blur(x_norm_ref, prior_blur)
    elif prior_mean_kind == "flat":
        mean = np.zeros(phantom.shape)
    else:
        raise ValueError(f"unknown prior_mean {prior_mean_kind!r}")
    prior = GaussianPrior(mean, prior_var)
    schedule = linear_beta_schedule()
    image, trajectory = sample_reconstruct(
        y_norm, prior, schedule, spec, phantom.shape, phantom.pixel_size, proj
    )
    recon_scaled = a * image.values + b
    return ImageGrid(recon_scaled / gamma, phantom.pixel_size), trajectory


def run_cell(
    method: MethodSpec,
    config: SimulationConfig,
    clean: Sinogram,
    phantom: ImageGrid,
    seed: int,
) -> tuple[ImageGrid, MetricsReport, Sinogram, object]:
    """Simulate one measurement and reconstruct it with one method.

    Returns the physical-domain reconstruction, its metrics, the measured
    sinogram, and the guidance trajectory (None for non-guidance methods).
    """
    config = dataclasses.replace(config, seed=seed)
    measured, info = simulate_measurement(clean, config)
    proj = Projector(measured.geometry, phantom.shape, phantom.pixel_size)
    gamma = info.gamma
    trajectory = None

    if method.kind == "classical":
        algo = method.options.get("algo", "fbp")
        if algo == "fbp":
            recon = fbp_reconstruct(
                measured,
                phantom.shape,
                phantom.pixel_size,
                window=method.options.get("window", "ramlak"),
            )
        elif algo == "sirt":
            recon = sirt_reconstruct(
                measured,
                phantom.shape,
                int(method.options.get("iterations", 80)),
                phantom.pixel_size,
                nonneg=bool(method.options.get("nonneg", False)),
                projector=proj,
            )
        else:
            raise ValueError(f"unknown classical algo {algo!r}")
        recon = ImageGrid(recon.values / gamma, phantom.pixel_size)
    elif method.kind == "mbir":
        solver = method.options.get("solver", "fista")
        tv_fields = {f.name for f in dataclasses.fields(TVSpec)}
        tv_options = {k: v for k, v in method.options.items() if k in tv_fields}
        spec = TVSpec(**tv_options)
        if solver == "fista":
            recon, _ = fista_tv(
                measured, phantom.shape, spec, phantom.pixel_size, projector=proj
            )
        elif solver == "admm":
            recon, _ = admm_tv(
                measured, phantom.shape, spec, phantom.pixel_size, projector=proj
            )
        else:
            raise ValueError(f"unknown mbir solver {solver!r}")
        recon = ImageGrid(recon.values / gamma, phantom.pixel_size)
    elif method.kind == "guidance":
        recon, trajectory = _run_guidance(method, measured, gamma, phantom, proj, seed)
    else:
        raise ValueError(f"unknown method kind {method.kind!r}")

    report = compute_metrics(
        ImageGrid(gamma * recon.values, phantom.pixel_size),
        ImageGrid(gamma * phantom.values, phantom.pixel_size),
        measured,
        projector=proj,
    )
    return recon, report, measured, trajectory


def _format_float(x: float) -> str:
    return repr(float(x))


def _resolve_workers(plan: ExperimentPlan) -> int:
    if plan.workers is not None:
        return max(1, int(plan.workers))
    env = os.environ.get(WORKER_ENV_VAR)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"{WORKER_ENV_VAR} must be an integer, got {env!r}")
    return 1


def _atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run_benchmark(plan: ExperimentPlan) -> list[dict]:
    """Execute the full plan; returns the CSV rows and writes artifacts.

    Cells run concurrently up to the worker count (plan field, else the
    CTBENCH_WORKERS env var, else serial); rows are assembled in plan order
    regardless of completion order, so the CSV is reproducible except for
    the wall_time_ms column.
    """
    os.makedirs(plan.output_dir, exist_ok=True)
    if not os.access(plan.output_dir, os.W_OK):
        raise ValueError(f"output directory {plan.output_dir!r} is not writable")
    phantom = plan.load_phantom()
    dense_geom = plan.dense_geometry()
    dense_proj = Projector(dense_geom, phantom.shape, phantom.pixel_size)
    clean = Sinogram(dense_proj.apply(phantom.values), dense_geom)

    tasks = []
    for mi, method in enumerate(plan.methods):
        for ci in range(len(plan.configs)):
            for r in range(plan.repeats):
                tasks.append((mi, ci, r))

    def execute(task):
        mi, ci, r = task
        method = plan.methods[mi]
        config = plan.configs[ci]
        label = plan.config_names[ci]
        seed = plan.seed + r
        row = {
            "method": method.name,
            "config": label,
            "seed": str(seed),
            "psnr": "",
            "ssim": "",
            "data_fit": "",
            "wall_time_ms": "",
            "status": "ok",
        }
        started = time.perf_counter()
        try:
            recon, report, measured, trajectory = run_cell(
                method, config, clean, phantom, seed
            )
        except Exception as exc:  # failure is data, not an abort
            row["status"] = f"error: {type(exc).__name__}: {exc}"
            return row, None
        row["wall_time_ms"] = f"{(time.perf_counter() - started) * 1e3:.3f}"
        row["psnr"] = _format_float(report.psnr)
        row["ssim"] = _format_float(report.ssim)
        row["data_fit"] = _format_float(report.data_fit)
        artifacts = (recon, trajectory, f"{method.name}_{label}_{seed}")
        return row, artifacts

    workers = _resolve_workers(plan)
    results = [None] * len(tasks)
    if workers == 1:
        for i, task in enumerate(tasks):
            results[i] = execute(task)
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            for i, result in enumerate(pool.map(execute, tasks)):
                results[i] = result

    rows = []
    for (row, artifacts) in results:
        if artifacts is not None:
            recon, trajectory, stem = artifacts
            if plan.save_recons:
                save_raw(os.path.join(plan.output_dir, f"recon_{stem}.raw"), recon)
            if plan.save_trajectories and trajectory is not None:
                trajectory.to_csv(
                    os.path.join(plan.output_dir, f"trajectory_{stem}.csv")
                )
            if plan.save_null_split:
                try:
                    dec = null_space_component(
                        recon,
                        clean.geometry,
                        eps_rel=plan.null_split_eps,
                        max_iter=plan.null_split_max_iter,
                        projector=dense_proj,
                    )
                    save_raw(
                        os.path.join(plan.output_dir, f"range_{stem}.raw"), dec.x_range
                    )
                    save_raw(
                        os.path.join(plan.output_dir, f"null_{stem}.raw"), dec.x_null
                    )
                except RuntimeError as exc:
                    row["status"] += f" (decompose failed: {exc})"
        rows.append(row)

    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(CSV_COLUMNS), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    _atomic_write_text(os.path.join(plan.output_dir, plan.csv_name), buffer.getvalue())
    return rows
